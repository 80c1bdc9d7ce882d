"""System 0-1 losses and the differentiable surrogates that train them.

All surrogate functions are batched: logits arrive as ``(n, ...)`` tensors
and a per-example loss vector of shape ``(n,)`` comes back, so callers
choose between summing and averaging.  Passing plain arrays evaluates the
loss without recording gradients.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, log_softmax, softplus, take_per_row

BINARY_SURROGATES = ("logistic", "exponential")


class EmptyDemonstrationError(ValueError):
    """A population surrogate was called with zero experts."""


def zero_one_single(h_pred: int, defer: int, m: int, y: int) -> int:
    """System 0-1 loss with one expert: who decided, and were they right."""
    if defer not in (0, 1):
        raise ValueError("defer flag must be 0 or 1")
    if defer:
        return int(m != y)
    return int(h_pred != y)


def zero_one_multi(h_pred: int, choice: int, demos: list[int], y: int) -> int:
    """System 0-1 loss with experts 1..J; choice 0 keeps the classifier."""
    if choice == 0:
        return int(h_pred != y)
    if not 1 <= choice <= len(demos):
        raise ValueError(f"choice {choice} references an absent expert")
    return int(demos[choice - 1] != y)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _col(t: Tensor) -> Tensor:
    return t.reshape(t.shape[0], 1) if t.ndim == 1 else t


def softmax_deferral(class_logits, reject_logit, y, m) -> Tensor:
    """Single-expert softmax surrogate over K+1 slots.

    The true-class slot is always penalized; the reject slot only when the
    expert's prediction matches the label.
    """
    class_logits = _as_tensor(class_logits)
    reject_logit = _col(_as_tensor(reject_logit))
    y = np.asarray(y, dtype=np.intp)
    m = np.asarray(m, dtype=np.intp)
    full = concat([class_logits, reject_logit], axis=1)
    ls = log_softmax(full, axis=1)
    k = class_logits.shape[1]
    correct = (m == y).astype(np.float64)
    reject_col = np.full(y.shape, k, dtype=np.intp)
    return -take_per_row(ls, y) - correct * take_per_row(ls, reject_col)


def softmax_deferral_multi(class_logits, reject_logits, y, demos) -> Tensor:
    """Fixed-panel surrogate over K+J slots, one reject slot per expert."""
    class_logits = _as_tensor(class_logits)
    reject_logits = _as_tensor(reject_logits)
    y = np.asarray(y, dtype=np.intp)
    demos = np.asarray(demos, dtype=np.intp)
    if reject_logits.ndim != 2 or reject_logits.shape[1] < 1:
        raise ValueError("need at least one expert slot")
    k = class_logits.shape[1]
    j = reject_logits.shape[1]
    full = concat([class_logits, reject_logits], axis=1)
    ls = log_softmax(full, axis=1)
    loss = -take_per_row(ls, y)
    for jj in range(j):
        correct = (demos[:, jj] == y).astype(np.float64)
        col = np.full(y.shape, k + jj, dtype=np.intp)
        loss = loss - correct * take_per_row(ls, col)
    return loss


def softmax_population(class_logits, reject_logits, y, correctness,
                       mask=None) -> Tensor:
    """Population surrogate: one K+1-way normalizer per observed expert.

    ``reject_logits`` is (n, E) with the e-th column produced from that
    expert's representation; ``correctness`` holds the 0/1 agreement
    indicators.  ``mask`` (0/1, same shape) drops absent demonstrations.
    """
    class_logits = _as_tensor(class_logits)
    reject_logits = _as_tensor(reject_logits)
    y = np.asarray(y, dtype=np.intp)
    correctness = np.asarray(correctness, dtype=np.float64)
    if reject_logits.ndim != 2 or reject_logits.shape[1] == 0:
        raise EmptyDemonstrationError("population loss needs E >= 1 experts")
    n, num_experts = reject_logits.shape
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if not mask.any(axis=1).all():
            raise EmptyDemonstrationError(
                "every example needs at least one demonstration; "
                "skip empty ones before calling")
    loss = None
    reject_col = np.full(y.shape, class_logits.shape[1], dtype=np.intp)
    for e in range(num_experts):
        full = concat([class_logits, _col(take_col(reject_logits, e))], axis=1)
        ls = log_softmax(full, axis=1)
        term = -take_per_row(ls, y) - correctness[:, e] * take_per_row(ls, reject_col)
        if mask is not None:
            term = term * mask[:, e]
        loss = term if loss is None else loss + term
    return loss


def take_col(t: Tensor, e: int) -> Tensor:
    """Column slice of a 2-D tensor as an (n,) tensor."""
    n = t.shape[0]
    return take_per_row(t, np.full(n, e, dtype=np.intp))


def softmax_marginal(class_logits, reject_logit, y, correctness,
                     mask=None) -> Tensor:
    """Marginal-expert surrogate: reject term weighted by the fraction of
    the observed population that got the point right.

    Examples with no demonstrations keep only the class term.
    """
    class_logits = _as_tensor(class_logits)
    reject_logit = _col(_as_tensor(reject_logit))
    y = np.asarray(y, dtype=np.intp)
    correctness = np.asarray(correctness, dtype=np.float64)
    if correctness.ndim == 1:
        correctness = correctness[:, None]
    if mask is None:
        frac = correctness.mean(axis=1)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        counts = mask.sum(axis=1)
        frac = np.where(counts > 0,
                        (correctness * mask).sum(axis=1) / np.maximum(counts, 1.0),
                        0.0)
    full = concat([class_logits, reject_logit], axis=1)
    ls = log_softmax(full, axis=1)
    k = class_logits.shape[1]
    reject_col = np.full(y.shape, k, dtype=np.intp)
    return -take_per_row(ls, y) - frac * take_per_row(ls, reject_col)


def _binary_loss(z: Tensor, kind: str) -> Tensor:
    if kind == "logistic":
        return softplus(-z)
    if kind == "exponential":
        from .autodiff import exp
        return exp(-z)
    raise ValueError(f"unknown binary surrogate {kind!r}")


def ova_population(class_logits, reject_logits, y, correctness,
                   binary_surrogate: str = "logistic", mask=None) -> Tensor:
    """One-vs-all population surrogate built from a calibrated binary loss.

    Per expert: the true class slot is pushed positive, every other class
    and the reject slot negative, plus a correction pair on the reject slot
    whenever the expert was right.
    """
    class_logits = _as_tensor(class_logits)
    reject_logits = _as_tensor(reject_logits)
    y = np.asarray(y, dtype=np.intp)
    correctness = np.asarray(correctness, dtype=np.float64)
    if reject_logits.ndim != 2 or reject_logits.shape[1] == 0:
        raise EmptyDemonstrationError("population loss needs E >= 1 experts")
    n, k = class_logits.shape
    num_experts = reject_logits.shape[1]
    sign = np.full((n, k), -1.0)
    sign[np.arange(n), y] = 1.0
    class_term = _binary_loss(class_logits * sign, binary_surrogate).sum(axis=1)
    loss = None
    for e in range(num_experts):
        ge = take_col(reject_logits, e)
        phi_pos = _binary_loss(ge, binary_surrogate)
        phi_neg = _binary_loss(-ge, binary_surrogate)
        term = class_term + phi_neg + correctness[:, e] * (phi_pos - phi_neg)
        if mask is not None:
            term = term * np.asarray(mask, dtype=np.float64)[:, e]
        loss = term if loss is None else loss + term
    return loss


def cross_entropy(class_logits, y) -> Tensor:
    """Plain K-way cross entropy, used for classifier-only warm starts."""
    class_logits = _as_tensor(class_logits)
    y = np.asarray(y, dtype=np.intp)
    ls = log_softmax(class_logits, axis=1)
    return -take_per_row(ls, y)
