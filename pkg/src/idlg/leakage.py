"""Recovering the true label from shared last-layer gradients.

For one-hot cross-entropy the logit gradient is ``softmax(y) - onehot(c)``, so
only the true class has a negative entry.  Each fc weight-gradient row is that
entry times the (shared) hidden activation vector, which makes the true row the
only one whose dot product with every other row is non-positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import onehot_logit_grad

# rows per block when forming cross dot products; bounds memory for 5749 classes
_BLOCK = 1024


class DegenerateGradientError(ValueError):
    """The gradients carry no usable label signal."""


@dataclass(frozen=True)
class LabelPrediction:
    label: int
    exact: bool  # exactly one row satisfied the dot-product rule
    witness: np.ndarray  # per row, max over j != i of row_i . row_j


def softmax_grad(logits: np.ndarray, c: int) -> np.ndarray:
    """Gradient of the one-hot cross-entropy with respect to the logits."""
    return onehot_logit_grad(np.asarray(logits, dtype=np.float64), c)


def cross_dot_witness(rows: np.ndarray) -> np.ndarray:
    """``max_{j != i} rows[i] . rows[j]`` for every i.

    The Gram matrix is symmetrized so that symmetric pairs compare equal.
    """
    n = rows.shape[0]
    witness = np.empty(n)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        block = rows[start:stop] @ rows.T
        block_t = (rows @ rows[start:stop].T).T
        block = 0.5 * (block + block_t)
        idx = np.arange(stop - start)
        block[idx, start + idx] = -np.inf
        witness[start:stop] = block.max(axis=1)
    return witness


def extract_label(fc_w_grad: np.ndarray) -> LabelPrediction:
    """Pick the row whose dot product with every other row is <= 0.

    If no row or several rows qualify, fall back to the row with the smallest
    witness, breaking exact ties by the smallest entry sum, and mark the
    prediction inexact.
    """
    rows = np.asarray(fc_w_grad, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError(f"need a (num_classes >= 2, features) matrix, got shape {rows.shape}")
    if not np.any(rows):
        raise DegenerateGradientError("last-layer gradient is identically zero")
    witness = cross_dot_witness(rows)
    qualifying = np.flatnonzero(witness <= 0.0)
    if len(qualifying) == 1:
        return LabelPrediction(int(qualifying[0]), True, witness)
    tied = np.flatnonzero(witness == witness.min())
    sums = rows[tied].sum(axis=1)
    return LabelPrediction(int(tied[np.argmin(sums)]), False, witness)


def extract_label_sign_rule(fc_w_grad: np.ndarray, fc_b_grad: np.ndarray) -> LabelPrediction:
    """Shortcut valid for non-negative hidden activations.

    The true row is the unique all-negative row of the weight gradient; if that
    is not unique, the unique negative entry of the bias gradient is used.
    """
    rows = np.asarray(fc_w_grad, dtype=np.float64)
    bias = np.asarray(fc_b_grad, dtype=np.float64)
    witness = np.full(rows.shape[0], np.nan)
    negative_rows = np.flatnonzero(np.all(rows < 0.0, axis=1))
    if len(negative_rows) == 1:
        return LabelPrediction(int(negative_rows[0]), True, witness)
    negative_bias = np.flatnonzero(bias < 0.0)
    if len(negative_bias) == 1:
        return LabelPrediction(int(negative_bias[0]), True, witness)
    raise DegenerateGradientError(
        f"{len(negative_rows)} all-negative rows and {len(negative_bias)} negative bias entries"
    )
