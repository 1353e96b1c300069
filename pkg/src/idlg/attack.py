"""Gradient-matching reconstruction: iDLG and the DLG baseline.

iDLG reads the label off the shared gradients first and then optimizes only
the dummy image.  DLG optimizes the dummy image together with free label
logits, whose softmax serves as a soft label.  Both minimize the squared
distance between dummy and shared parameter gradients.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .leakage import extract_label
from .model import GradSet, Model, check_structure, grad_match, softmax
from .tensor import make_rng, mse, sample_normal

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
METHODS = ("idlg", "dlg")
OPTIMIZERS = ("lbfgs", "gd")

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 20
CURVATURE_EPS = 1e-10

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class AttackAborted(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite gradient-matching loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class AttackConfig:
    method: str = "idlg"
    iterations: int = 300
    optimizer: str = "lbfgs"
    learning_rate: float = 1.0
    lbfgs_history: int = 10
    seed: int = 0
    snapshot_every: int = 0
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lbfgs_history < 1:
            raise ValueError("lbfgs_history must be positive")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be non-negative")


@dataclass
class AttackReport:
    method: str
    extracted_label: int
    label_exact: bool
    final_dummy: np.ndarray
    loss_trajectory: list[float]
    mse_trajectory: list[float] | None = None
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    iterations_to_threshold: dict[float, int] = field(default_factory=dict)
    fallback_steps: list[int] = field(default_factory=list)
    label_logits: np.ndarray | None = None  # DLG only

    @property
    def final_mse(self) -> float | None:
        return self.mse_trajectory[-1] if self.mse_trajectory else None

    @property
    def min_mse(self) -> float | None:
        return min(self.mse_trajectory) if self.mse_trajectory else None


@dataclass
class LbfgsState:
    history_size: int = 10
    s_hist: deque = field(default_factory=deque)
    y_hist: deque = field(default_factory=deque)
    # loss and gradient at the current point, filled in by each step
    loss: float | None = None
    grad: np.ndarray | None = None
    fallback: bool = False


def gd_step(x: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    return x - eta * grad


def lbfgs_direction(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    """Two-loop recursion; steepest descent when the history is empty."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(state.s_hist), reversed(state.y_hist)):
        rho = 1.0 / np.vdot(y, s)
        a = rho * np.vdot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if state.s_hist:
        s, y = state.s_hist[-1], state.y_hist[-1]
        q *= np.vdot(s, y) / np.vdot(y, y)
    for (s, y), (rho, a) in zip(zip(state.s_hist, state.y_hist), reversed(alphas)):
        b = rho * np.vdot(y, q)
        q += (a - b) * s
    return -q


def lbfgs_step(state: LbfgsState, x: np.ndarray, grad: np.ndarray, loss_fn: Objective,
               eta: float, loss: float | None = None) -> tuple[np.ndarray, LbfgsState]:
    """One L-BFGS update with Armijo backtracking from step ``eta``.

    ``loss_fn(x)`` returns ``(loss, grad)``.  On return ``state.loss`` and
    ``state.grad`` hold the values at the new point and ``state.fallback`` is
    set if the step did not satisfy the Armijo condition.
    """
    if loss is None:
        loss, _ = loss_fn(x)
    state.fallback = False
    d = lbfgs_direction(state, grad)
    slope = np.vdot(grad, d)
    if not slope < 0:
        state.s_hist.clear()
        state.y_hist.clear()
        d = -grad
        slope = -np.vdot(grad, grad)

    alpha = eta
    for attempt in range(MAX_BACKTRACKS + 1):
        x_new = x + alpha * d
        f_new, g_new = loss_fn(x_new)
        if not np.isfinite(f_new):
            log.debug("non-finite loss in line search, falling back to a short gradient step")
            x_new = gd_step(x, grad, eta / 10)
            f_new, g_new = loss_fn(x_new)
            state.fallback = True
            break
        if f_new <= loss + ARMIJO_C1 * alpha * slope:
            break
        if attempt == MAX_BACKTRACKS:
            state.fallback = True
            break
        alpha *= 0.5

    s = x_new - x
    y = g_new - grad
    if np.isfinite(f_new) and np.vdot(s, y) > CURVATURE_EPS:
        state.s_hist.append(s)
        state.y_hist.append(y)
        while len(state.s_hist) > state.history_size:
            state.s_hist.popleft()
            state.y_hist.popleft()
    state.loss = float(f_new)
    state.grad = g_new
    return x_new, state


class _Recorder:
    def __init__(self, config: AttackConfig, ground_truth: np.ndarray | None):
        self.config = config
        self.ground_truth = ground_truth
        self.losses: list[float] = []
        self.mses: list[float] | None = [] if ground_truth is not None else None
        self.snapshots: list[tuple[int, np.ndarray]] = []
        self.reached: dict[float, int] = {}

    def __call__(self, iteration: int, image: np.ndarray, loss: float) -> None:
        if not np.isfinite(loss):
            raise AttackAborted(iteration, loss)
        self.losses.append(loss)
        every = self.config.snapshot_every
        if every and iteration % every == 0:
            self.snapshots.append((iteration, image.copy()))
        if self.mses is not None:
            err = mse(image, self.ground_truth)
            self.mses.append(err)
            for tau in self.config.thresholds:
                if tau not in self.reached and err < tau:
                    self.reached[tau] = iteration


def _minimize(objective: Objective, z0: np.ndarray, config: AttackConfig, record,
              to_image: Callable[[np.ndarray], np.ndarray]) -> tuple[np.ndarray, list[int]]:
    z = z0
    loss, grad = objective(z)
    record(0, to_image(z), loss)
    state = LbfgsState(config.lbfgs_history)
    fallbacks = []
    for it in range(1, config.iterations + 1):
        if config.optimizer == "gd":
            z = gd_step(z, grad, config.learning_rate)
            loss, grad = objective(z)
        else:
            z, state = lbfgs_step(state, z, grad, objective, config.learning_rate, loss)
            loss, grad = state.loss, state.grad
            if state.fallback:
                fallbacks.append(it)
        record(it, to_image(z), loss)
    return z, fallbacks


def _check_inputs(model: Model, shared: GradSet, ground_truth, init) -> None:
    check_structure(model.arch, shared, what="shared gradients")
    for name, arr in (("ground truth", ground_truth), ("initial dummy", init)):
        if arr is not None and arr.shape != model.arch.input_shape:
            raise ValueError(f"{name} shape {arr.shape} does not match {model.arch.input_shape}")


def run_idlg(model: Model, shared: GradSet, config: AttackConfig,
             ground_truth: np.ndarray | None = None, init: np.ndarray | None = None) -> AttackReport:
    """Extract the label analytically, then fit the dummy image.

    ``init`` overrides the N(0, 1) starting point (used to test fixed points).
    """
    if config.method != "idlg":
        raise ValueError(f"run_idlg called with method {config.method!r}")
    _check_inputs(model, shared, ground_truth, init)
    prediction = extract_label(shared["fc.w"])
    label = prediction.label
    x0 = init.copy() if init is not None else sample_normal(make_rng(config.seed), model.arch.input_shape)

    def objective(x):
        r = grad_match(model, x, label, shared)
        return r.loss, r.input_grad

    rec = _Recorder(config, ground_truth)
    x, fallbacks = _minimize(objective, x0, config, rec, lambda z: z)
    return AttackReport(
        method="idlg",
        extracted_label=label,
        label_exact=prediction.exact,
        final_dummy=x,
        loss_trajectory=rec.losses,
        mse_trajectory=rec.mses,
        snapshots=rec.snapshots,
        iterations_to_threshold=rec.reached,
        fallback_steps=fallbacks,
    )


def run_dlg(model: Model, shared: GradSet, config: AttackConfig,
            ground_truth: np.ndarray | None = None, init: np.ndarray | None = None) -> AttackReport:
    """Jointly fit the dummy image and free label logits (soft label = softmax)."""
    if config.method != "dlg":
        raise ValueError(f"run_dlg called with method {config.method!r}")
    _check_inputs(model, shared, ground_truth, init)
    shape = model.arch.input_shape
    size = int(np.prod(shape))
    rng = make_rng(config.seed)
    x0 = sample_normal(rng, shape)
    if init is not None:
        x0 = init.copy()
    u0 = sample_normal(rng, model.arch.num_classes)

    def unpack(z):
        return z[:size].reshape(shape), z[size:]

    def objective(z):
        x, u = unpack(z)
        q = softmax(u)
        r = grad_match(model, x, q, shared)
        # chain through the softmax on the label logits
        gu = q * (r.label_grad - np.vdot(q, r.label_grad))
        return r.loss, np.concatenate([r.input_grad.ravel(), gu])

    rec = _Recorder(config, ground_truth)
    z0 = np.concatenate([x0.ravel(), u0])
    z, fallbacks = _minimize(objective, z0, config, rec, lambda z: unpack(z)[0])
    x, u = unpack(z)
    return AttackReport(
        method="dlg",
        extracted_label=int(np.argmax(u)),
        label_exact=False,
        final_dummy=x.copy(),
        loss_trajectory=rec.losses,
        mse_trajectory=rec.mses,
        snapshots=rec.snapshots,
        iterations_to_threshold=rec.reached,
        fallback_steps=fallbacks,
        label_logits=u.copy(),
    )


def run_attack(model: Model, shared: GradSet, config: AttackConfig,
               ground_truth: np.ndarray | None = None) -> AttackReport:
    runner = run_idlg if config.method == "idlg" else run_dlg
    return runner(model, shared, config, ground_truth)
