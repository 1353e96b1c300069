"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL (or WARN for the soft convergence check) line
that the conftest prints in an ``acceptance`` section after the run.  The
bench-backed criteria share two session fixtures: a 100-trial MNIST bench and
a 50-trial CIFAR-100 bench, both at 300 iterations for both methods.
"""

import struct

import numpy as np
import pytest

from idlg.data import (
    ParseError,
    load_cifar100,
    load_image_dir,
    load_mnist,
    synthetic_dataset,
    write_pnm,
)
from idlg.harness import BenchConfig, arch_for, run_bench, summarize
from idlg.leakage import extract_label, softmax_grad
from idlg.model import Architecture, Model, backward, cross_entropy, forward, init_model
from idlg.tensor import make_rng
from oracles import fd_param_grad_error, input_fd_error
from realdata import write_idx

THRESHOLDS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)


@pytest.fixture(scope="session")
def mnist_bench(datasets):
    return run_bench(BenchConfig(datasets["mnist"], trials=100, iterations=300))


@pytest.fixture(scope="session")
def cifar_bench(datasets):
    return run_bench(BenchConfig(datasets["cifar100"], trials=50, iterations=300))


def _fifty_trial_summaries(mnist_bench, cifar_bench):
    # trial t uses seed t and sample t, so the first 50 MNIST trials are a 50-trial bench
    mnist50 = [r for r in mnist_bench.records if r.trial < 50]
    return {
        "mnist": (mnist50, summarize(mnist50, ("idlg", "dlg"), THRESHOLDS)),
        "cifar100": (cifar_bench.records, cifar_bench.summaries),
    }


def _extraction_failures(dataset, trials):
    arch = arch_for(dataset)
    failures = 0
    for t in range(trials):
        x, c = dataset[t % len(dataset)]
        model = init_model(arch, make_rng(t))
        failures += extract_label(backward(model, x, c)["fc.w"]).label != c
    return failures


def test_label_extraction_exact(datasets, verdict):
    runs = {"synthetic": (synthetic_dataset(make_rng(1), 1000, 1, 10), 1000)}
    runs.update({name: (ds, 200) for name, ds in datasets.items()})
    failures = {name: _extraction_failures(ds, n) for name, (ds, n) in runs.items()}
    detail = ", ".join(f"{name} {failures[name]}/{n} wrong" for name, (_, n) in runs.items())
    ok = not any(failures.values())
    verdict(1, "PASS" if ok else "FAIL", f"label extraction: {detail}")
    assert ok


@pytest.mark.slow
def test_dlg_label_inaccuracy(mnist_bench, verdict):
    s = mnist_bench.summaries
    idlg, dlg = s["idlg"].label_accuracy, s["dlg"].label_accuracy
    ok = dlg < idlg == 1.0
    window = "inside" if abs(100 * dlg - 89.9) <= 10 else "outside"
    verdict(2, "PASS" if ok else "FAIL",
            f"MNIST 100 trials: iDLG {idlg:.1%}, DLG {dlg:.1%} ({window} 89.9 +/- 10 points)")
    assert ok


@pytest.mark.slow
def test_fidelity_dominance(mnist_bench, cifar_bench, verdict):
    parts, ok = [], True
    for name, (_, summaries) in _fifty_trial_summaries(mnist_bench, cifar_bench).items():
        i, d = summaries["idlg"].fidelity, summaries["dlg"].fidelity
        dominates = all(i[t] >= d[t] for t in THRESHOLDS)
        strict = any(i[t] > d[t] for t in THRESHOLDS)
        ok &= dominates and strict
        pairs = " ".join(f"{t:g}:{i[t]:.2f}/{d[t]:.2f}" for t in THRESHOLDS)
        parts.append(f"{name} [{pairs}]")
    verdict(3, "PASS" if ok else "FAIL", "good-fidelity iDLG/DLG " + "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_convergence_speed(mnist_bench, cifar_bench, verdict):
    tau = 1e-2
    idlg_iters, dlg_iters = [], []
    for records, _ in _fifty_trial_summaries(mnist_bench, cifar_bench).values():
        by_key = {(r.method, r.trial): r for r in records}
        for (method, trial), r in by_key.items():
            other = by_key.get(("dlg", trial))
            if method == "idlg" and other and tau in r.iters_to and tau in other.iters_to:
                idlg_iters.append(r.iters_to[tau])
                dlg_iters.append(other.iters_to[tau])
    if not idlg_iters:
        verdict(4, "WARN", "no trial where both methods reach MSE < 1e-2")
        return
    mi, md = float(np.median(idlg_iters)), float(np.median(dlg_iters))
    detail = f"median iterations to MSE < 1e-2 over {len(idlg_iters)} shared trials: iDLG {mi:g}, DLG {md:g}"
    if mi <= md:
        verdict(4, "PASS", detail)
    elif mi <= 1.1 * md:
        verdict(4, "WARN", detail + " (iDLG slower by under 10%)")
    else:
        verdict(4, "FAIL", detail)
        pytest.fail(detail)


def test_gradient_correctness(verdict):
    worst_first, worst_second = 0.0, 0.0
    shapes = [(1, 10), (3, 100), (3, 5749)]
    for channels, classes in shapes:
        arch = Architecture(channels, classes)
        for seed in range(20):
            rng = make_rng(1000 + seed)
            model = init_model(arch, rng)
            x = rng.uniform(0, 1, arch.input_shape)
            c = int(rng.integers(classes))
            grads = backward(model, x, c)

            def loss(params):
                return cross_entropy(forward(Model(arch, params), x).logits, c)

            worst_first = max(worst_first, fd_param_grad_error(
                loss, model.params, grads, rng, coords=False))
            xd = rng.standard_normal(x.shape)
            worst_second = max(worst_second, input_fd_error(model, xd, c, grads, rng))
    ok = worst_first < 1e-6 and worst_second < 1e-4
    verdict(5, "PASS" if ok else "FAIL",
            f"20 instances per shape {shapes}: first-order {worst_first:.1e} (< 1e-6), "
            f"second-order {worst_second:.1e} (< 1e-4)")
    assert ok


def test_sign_structure(verdict):
    rng = make_rng(6)
    violations = 0
    dims = (2, 10, 100, 5749)
    for n in range(10**4):
        dim = dims[n % 4]
        logits = rng.normal(0.0, (0.1, 1.0, 10.0)[n % 3], dim)
        c = int(rng.integers(dim))
        g = softmax_grad(logits, c)
        others = np.delete(g, c)
        good = (-1 < g[c] < 0 and np.all((others > 0) & (others < 1))
                and abs(g.sum()) <= 1e-12)
        violations += not good
    verdict(6, "PASS" if not violations else "FAIL",
            f"{violations} of 10000 logit vectors over dims {dims} violate the sign structure")
    assert violations == 0


def test_factorization_identity(verdict):
    worst = 0.0
    for n in range(100):
        channels, classes = [(1, 10), (3, 100)][n % 2]
        arch = Architecture(channels, classes)
        rng = make_rng(2000 + n)
        model = init_model(arch, rng)
        x = rng.uniform(0, 1, arch.input_shape)
        c = int(rng.integers(classes))
        trace = forward(model, x)
        expected = np.outer(softmax_grad(trace.logits, c), trace.features)
        got = backward(model, x, c)["fc.w"]
        worst = max(worst, float(np.max(np.abs(got - expected) / np.abs(expected))))
    verdict(7, "PASS" if worst < 1e-12 else "FAIL",
            f"max elementwise rel. error of fc.w rows vs g_i * features over 100 instances: {worst:.1e}")
    assert worst < 1e-12


def _parser_checks(tmp):
    """Yield ``(name, passed)`` for each hand-built fixture."""
    raw = np.arange(2 * 28 * 28).reshape(2, 28, 28) % 256
    write_idx(raw, np.array([3, 9]), tmp / "img", tmp / "lab")
    ds = load_mnist(tmp / "img", tmp / "lab")
    yield "idx round trip", ds.labels.tolist() == [3, 9] and ds.images.shape == (2, 1, 32, 32)

    def rejected(fn, offset=None):
        try:
            fn()
        except ParseError as exc:
            return offset is None or exc.offset == offset
        return False

    (tmp / "swap").write_bytes(struct.pack(">IIII", 0x801, 2, 28, 28) + bytes(2 * 784))
    yield "idx label magic in image slot", rejected(lambda: load_mnist(tmp / "swap", tmp / "lab"), 0)
    (tmp / "short").write_bytes((tmp / "img").read_bytes()[:-1])
    yield "idx truncated", rejected(lambda: load_mnist(tmp / "short", tmp / "lab"))
    (tmp / "lab1").write_bytes(struct.pack(">II", 0x801, 1) + bytes([3]))
    yield "idx count mismatch", rejected(lambda: load_mnist(tmp / "img", tmp / "lab1"))

    pixels = np.zeros(3072, dtype=np.uint8)
    pixels[1024 + 33] = 51
    (tmp / "c.bin").write_bytes(bytes([13, 7]) + pixels.tobytes())
    ds = load_cifar100(tmp / "c.bin")
    yield "cifar label and planes", ds.labels.tolist() == [7] and ds.images[0, 1, 1, 1] == 0.2
    (tmp / "c2.bin").write_bytes(bytes(3075))
    yield "cifar bad length", rejected(lambda: load_cifar100(tmp / "c2.bin"), 3074)

    for name, value in (("b", 200), ("a", 10)):
        (tmp / "dir" / name).mkdir(parents=True)
        write_pnm(np.full((3, 64, 64), value, dtype=np.uint8), tmp / "dir" / name / "0.ppm")
    ds = load_image_dir(tmp / "dir")
    yield "ppm classes and values", (ds.labels.tolist() == [0, 1]
                                     and np.all(ds.images[0] == 10 / 255)
                                     and np.all(ds.images[1] == 200 / 255))
    write_pnm(np.zeros((1, 4, 4), dtype=np.uint8), tmp / "dir" / "a" / "1.pgm")
    yield "ppm rejects greyscale", rejected(lambda: load_image_dir(tmp / "dir"))


def test_parser_fixtures(tmp_path, verdict):
    results = dict(_parser_checks(tmp_path))
    failed = [name for name, ok in results.items() if not ok]
    verdict(8, "PASS" if not failed else "FAIL",
            f"{len(results) - len(failed)}/{len(results)} parser fixtures"
            + (f", failed: {', '.join(failed)}" if failed else ""))
    assert not failed
