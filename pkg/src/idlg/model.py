"""LeNet-style classifier with hand-written first and second order gradients.

Architecture (32x32 input, batch of one)::

    conv1  C -> 12, 5x5, stride 2, pad 2   -> sigmoid   (12x16x16)
    conv2 12 -> 12, 5x5, stride 2, pad 2   -> sigmoid   (12x8x8)
    conv3 12 -> 12, 5x5, stride 1, pad 2   -> sigmoid   (12x8x8)
    flatten (768) -> fc (num_classes)

Parameters are kept in a dict in the fixed order of ``PARAM_NAMES``.  A
``GradSet`` is a dict with the same keys and shapes.

The gradient-matching loss ``||dW' - dW||^2`` is differentiated with respect to
the dummy input by forward-over-reverse: the first-order backward pass down to
the input is pushed forward along the weight direction ``dW' - dW``.  By
symmetry of mixed partials that tangent equals half the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DimensionError,
    Rng,
    conv2d,
    conv2d_grads,
    conv2d_input_grad,
    sample_uniform,
    sigmoid,
)

IMAGE_SIDE = 32
WIDTH = 12
KERNEL = 5
PAD = 2
FEATURES = WIDTH * 8 * 8

# (name, stride) in forward order
CONV_LAYERS = (("conv1", 2), ("conv2", 2), ("conv3", 1))
PARAM_NAMES = (
    "conv1.w", "conv1.b",
    "conv2.w", "conv2.b",
    "conv3.w", "conv3.b",
    "fc.w", "fc.b",
)

GradSet = dict


@dataclass(frozen=True)
class Architecture:
    in_channels: int
    num_classes: int
    image_side: int = IMAGE_SIDE

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.image_side != IMAGE_SIDE:
            raise ValueError(f"only {IMAGE_SIDE}x{IMAGE_SIDE} inputs are supported")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_side, self.image_side)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.in_channels
        return {
            "conv1.w": (WIDTH, c, KERNEL, KERNEL), "conv1.b": (WIDTH,),
            "conv2.w": (WIDTH, WIDTH, KERNEL, KERNEL), "conv2.b": (WIDTH,),
            "conv3.w": (WIDTH, WIDTH, KERNEL, KERNEL), "conv3.b": (WIDTH,),
            "fc.w": (self.num_classes, FEATURES), "fc.b": (self.num_classes,),
        }


@dataclass(frozen=True)
class Model:
    arch: Architecture
    params: dict[str, np.ndarray]

    def __post_init__(self):
        check_structure(self.arch, self.params, what="model parameters")


@dataclass
class ForwardTrace:
    x: np.ndarray
    activations: list[np.ndarray]  # sigmoid outputs of conv1..conv3
    features: np.ndarray  # flattened conv3 activation, the fc input
    logits: np.ndarray


@dataclass
class GradMatch:
    """Gradient-matching loss and its derivatives at one dummy point."""

    loss: float
    input_grad: np.ndarray
    label_grad: np.ndarray
    dummy_grads: GradSet = field(repr=False)


def check_structure(arch: Architecture, grads: dict, what: str = "gradient set") -> None:
    shapes = arch.param_shapes()
    if tuple(grads) != PARAM_NAMES:
        raise DimensionError(f"{what} has keys {tuple(grads)}, expected {PARAM_NAMES}")
    for name, shape in shapes.items():
        if grads[name].shape != shape:
            raise DimensionError(f"{what}: {name} has shape {grads[name].shape}, expected {shape}")


def init_model(arch: Architecture, rng: Rng) -> Model:
    """Sample every parameter i.i.d. from U(-0.5, 0.5), in ``PARAM_NAMES`` order."""
    shapes = arch.param_shapes()
    params = {name: sample_uniform(rng, shapes[name], -0.5, 0.5) for name in PARAM_NAMES}
    return Model(arch, params)


def forward(model: Model, x: np.ndarray) -> ForwardTrace:
    if x.shape != model.arch.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match architecture {model.arch.input_shape}")
    p = model.params
    acts = []
    a = x
    for name, stride in CONV_LAYERS:
        a = sigmoid(conv2d(a, p[name + ".w"], p[name + ".b"], stride, PAD))
        acts.append(a)
    features = a.reshape(-1)
    logits = p["fc.w"] @ features + p["fc.b"]
    return ForwardTrace(x, acts, features, logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _check_class(c: int, num_classes: int) -> None:
    if not 0 <= c < num_classes:
        raise IndexError(f"class index {c} out of range for {num_classes} classes")


def cross_entropy(logits: np.ndarray, c: int) -> float:
    _check_class(c, len(logits))
    return float(-log_softmax(logits)[c])


def soft_cross_entropy(logits: np.ndarray, soft_label: np.ndarray) -> float:
    """``-sum_j q_j log softmax(logits)_j``; ``q`` need not be normalized."""
    if soft_label.shape != logits.shape:
        raise DimensionError(f"soft label {soft_label.shape} vs logits {logits.shape}")
    return float(-(soft_label * log_softmax(logits)).sum())


def _label_weights(label, num_classes: int) -> np.ndarray:
    if np.ndim(label) == 0:
        c = int(label)
        _check_class(c, num_classes)
        q = np.zeros(num_classes)
        q[c] = 1.0
        return q
    q = np.asarray(label, dtype=np.float64)
    if q.shape != (num_classes,):
        raise DimensionError(f"soft label shape {q.shape}, expected ({num_classes},)")
    return q


def logit_grad(logits: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d loss / d logits for label weights ``q`` (one-hot or soft)."""
    return softmax(logits) * q.sum() - q


_BELOW_ONE = np.nextafter(1.0, 0.0)


def onehot_logit_grad(logits: np.ndarray, c: int) -> np.ndarray:
    """``softmax(logits) - onehot(c)`` without cancellation in the class entry.

    Entry c is minus the probability mass of the other classes, so it keeps
    full relative precision when p_c is close to 1.  Entries whose exact value
    lies strictly inside (-1, 1) but would round onto +-1 are rounded toward
    zero instead, preserving the sign structure.
    """
    _check_class(c, len(logits))
    e = np.exp(logits - logits.max())
    total = e.sum()
    g = e / total
    g[c] = -(e[:c].sum() + e[c + 1:].sum()) / total
    return np.clip(g, -_BELOW_ONE, _BELOW_ONE, out=g)


def _logit_grad(logits: np.ndarray, label, q: np.ndarray) -> np.ndarray:
    if np.ndim(label) == 0:
        return onehot_logit_grad(logits, int(label))
    return logit_grad(logits, q)


def _backprop(model: Model, trace: ForwardTrace, g: np.ndarray):
    """Parameter gradients from the logit gradient ``g``.

    Also returns the upstream gradients at each sigmoid output (index k is
    d loss / d a_k for conv layer k) for reuse by the second-order pass.
    """
    p = model.params
    grads = {"fc.w": np.outer(g, trace.features), "fc.b": g.copy()}
    da = (p["fc.w"].T @ g).reshape(trace.activations[-1].shape)
    upstream = [None] * len(CONV_LAYERS)
    inputs = [trace.x] + trace.activations[:-1]
    for k in reversed(range(len(CONV_LAYERS))):
        name, stride = CONV_LAYERS[k]
        upstream[k] = da
        a = trace.activations[k]
        dz = da * a * (1.0 - a)
        if k > 0:
            da, gw, gb = conv2d_grads(inputs[k], p[name + ".w"], stride, PAD, dz)
        else:
            # the input gradient of the first layer is never needed here
            _, gw, gb = conv2d_grads(inputs[k], p[name + ".w"], stride, PAD, dz)
        grads[name + ".w"] = gw
        grads[name + ".b"] = gb
    return {name: grads[name] for name in PARAM_NAMES}, upstream


def backward(model: Model, x: np.ndarray, c: int) -> GradSet:
    """Gradient of the one-hot cross-entropy with respect to every parameter."""
    trace = forward(model, x)
    q = _label_weights(c, model.arch.num_classes)
    grads, _ = _backprop(model, trace, _logit_grad(trace.logits, c, q))
    return grads


def backward_soft(model: Model, x: np.ndarray, soft_label: np.ndarray) -> GradSet:
    trace = forward(model, x)
    q = _label_weights(soft_label, model.arch.num_classes)
    grads, _ = _backprop(model, trace, logit_grad(trace.logits, q))
    return grads


def grad_match(model: Model, x: np.ndarray, label, target: GradSet) -> GradMatch:
    """Loss ``sum_p ||dW'_p - target_p||^2`` with input and label gradients.

    ``label`` is a class index (one-hot loss) or a vector of label weights
    (soft-label loss).  ``label_grad`` is the gradient with respect to those
    weights in either case.
    """
    check_structure(model.arch, target, what="target gradients")
    p = model.params
    trace = forward(model, x)
    q = _label_weights(label, model.arch.num_classes)
    probs = softmax(trace.logits)
    g = _logit_grad(trace.logits, label, q)
    grads, upstream = _backprop(model, trace, g)
    diff = {name: grads[name] - target[name] for name in PARAM_NAMES}
    loss = float(sum(np.vdot(d, d) for d in diff.values()))

    # tangent of the forward pass along weight direction `diff` (input fixed)
    inputs = [x] + trace.activations[:-1]
    tangents = []
    t_in = None
    for k, (name, stride) in enumerate(CONV_LAYERS):
        t_z = conv2d(inputs[k], diff[name + ".w"], diff[name + ".b"], stride, PAD)
        if t_in is not None:
            t_z += conv2d(t_in, p[name + ".w"], None, stride, PAD)
        a = trace.activations[k]
        t_in = t_z * a * (1.0 - a)
        tangents.append(t_in)
    t_logits = p["fc.w"] @ tangents[-1].reshape(-1) + diff["fc.w"] @ trace.features + diff["fc.b"]
    t_g = q.sum() * probs * (t_logits - probs @ t_logits)

    # tangent of the backward pass down to the input
    t_da = (diff["fc.w"].T @ g + p["fc.w"].T @ t_g).reshape(trace.activations[-1].shape)
    for k in reversed(range(len(CONV_LAYERS))):
        name, stride = CONV_LAYERS[k]
        a = trace.activations[k]
        da = upstream[k]
        dz = da * a * (1.0 - a)
        t_dz = t_da * a * (1.0 - a) + da * tangents[k] * (1.0 - 2.0 * a)
        in_shape = inputs[k].shape
        t_da = (conv2d_input_grad(in_shape, diff[name + ".w"], stride, PAD, dz)
                + conv2d_input_grad(in_shape, p[name + ".w"], stride, PAD, t_dz))

    label_grad = 2.0 * (probs @ t_logits - t_logits)
    return GradMatch(loss, 2.0 * t_da, label_grad, grads)


def grad_match_loss(model: Model, x_dummy: np.ndarray, c, target: GradSet) -> float:
    check_structure(model.arch, target, what="target gradients")
    trace = forward(model, x_dummy)
    q = _label_weights(c, model.arch.num_classes)
    grads, _ = _backprop(model, trace, _logit_grad(trace.logits, c, q))
    return float(sum(np.vdot(grads[n] - target[n], grads[n] - target[n]) for n in PARAM_NAMES))


def grad_match_input_grad(model: Model, x_dummy: np.ndarray, c, target: GradSet) -> np.ndarray:
    return grad_match(model, x_dummy, c, target).input_grad


def grad_match_label_grad(model: Model, x_dummy: np.ndarray, soft_label: np.ndarray,
                          target: GradSet) -> np.ndarray:
    return grad_match(model, x_dummy, np.asarray(soft_label, dtype=np.float64), target).label_grad


def zero_grads(arch: Architecture) -> GradSet:
    return {name: np.zeros(shape) for name, shape in arch.param_shapes().items()}


def sq_norm(grads: GradSet) -> float:
    return float(sum(np.vdot(v, v) for v in grads.values()))
