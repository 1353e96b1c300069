import pytest

from idlg.data import load_cifar100, load_image_dir, load_mnist
from realdata import cifar_file, face_dir, mnist_files

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def datasets(tmp_path_factory):
    """MNIST, CIFAR-100 and the 100-class face directory, read through the package loaders."""
    root = tmp_path_factory.mktemp("realdata")
    return {
        "mnist": load_mnist(*mnist_files(root)),
        "cifar100": load_cifar100(cifar_file(root)),
        "faces": load_image_dir(face_dir(root)),
    }


@pytest.fixture
def verdict(request):
    """Record ``(criterion, status, detail)`` for the end-of-run acceptance table."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, status: str, detail: str) -> None:
        table[number] = (status, detail)
        print(f"criterion {number}: {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance")
    for number in sorted(table):
        status, detail = table[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
