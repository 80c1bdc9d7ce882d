"""Closed-form optimal decisions and a brute-force risk minimizer.

The minimizer is an independent check on the surrogate losses: it writes
the expected per-point loss directly from the loss definitions (its own
formulas and gradients, no shared code with the training path) and runs
backtracking gradient descent on the convex objective.  If the surrogates
are consistent, the decisions read off the minimizing logits must equal
the closed-form rules below away from ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SURROGATES = ("sm-pop", "ova-pop", "sm-pop-avg")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


@dataclass
class ProbabilityProfile:
    """Known truth at one input point: label posterior plus expert skill."""

    class_posterior: np.ndarray          # (K,)
    expert_correctness: np.ndarray       # (E,)
    marginal_correctness: float | None = None

    def __post_init__(self) -> None:
        self.class_posterior = np.asarray(self.class_posterior, dtype=np.float64)
        self.expert_correctness = np.asarray(self.expert_correctness,
                                             dtype=np.float64)
        if abs(self.class_posterior.sum() - 1.0) > 1e-9:
            raise ValueError("class posterior must sum to 1")
        if ((self.class_posterior < 0).any()
                or (self.expert_correctness < 0).any()
                or (self.expert_correctness > 1).any()):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.marginal_correctness is None:
            self.marginal_correctness = float(self.expert_correctness.mean())

    @property
    def num_classes(self) -> int:
        return self.class_posterior.shape[0]

    @property
    def num_experts(self) -> int:
        return self.expert_correctness.shape[0]


def bayes_classifier(profile: ProbabilityProfile) -> int:
    """argmax of the posterior; ties break to the lowest class index."""
    return int(np.argmax(profile.class_posterior))


def bayes_rejector_single(profile: ProbabilityProfile) -> int:
    """Defer iff the (single) expert is at least as likely right as the
    best class guess; equality defers."""
    return int(profile.expert_correctness[0]
               >= profile.class_posterior.max())


def bayes_rejector_pop(profile: ProbabilityProfile, expert_index: int) -> int:
    if not 0 <= expert_index < profile.num_experts:
        raise IndexError(f"expert index {expert_index} out of range")
    return int(profile.expert_correctness[expert_index]
               >= profile.class_posterior.max())


def bayes_rejector_marginal(profile: ProbabilityProfile) -> int:
    return int(profile.marginal_correctness >= profile.class_posterior.max())


def bayes_rejector_multi(profile: ProbabilityProfile) -> int:
    """0 if the classifier strictly beats every expert, else 1 + best expert."""
    best = profile.class_posterior.max()
    if (best > profile.expert_correctness).all():
        return 0
    return 1 + int(np.argmax(profile.expert_correctness))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def pointwise_risk(profile: ProbabilityProfile, surrogate: str,
                   logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Expected surrogate loss at one point, with its analytic gradient.

    Logit layout: K class scores followed by E reject scores (one for
    sm-pop-avg).  Written straight from the loss displays, independently of
    the autodiff path.
    """
    p = profile.class_posterior
    k = profile.num_classes
    logits = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(logits)
    gy = logits[:k]

    if surrogate == "sm-pop":
        value = 0.0
        for e in range(profile.num_experts):
            pe = profile.expert_correctness[e]
            group = np.append(gy, logits[k + e])
            logz = _logsumexp(group)
            sm = np.exp(group - logz)
            value += (1.0 + pe) * logz - float(p @ gy) - pe * group[-1]
            grad[:k] += (1.0 + pe) * sm[:k] - p
            grad[k + e] = (1.0 + pe) * sm[-1] - pe
        return value, grad

    if surrogate == "sm-pop-avg":
        pbar = profile.marginal_correctness
        logz = _logsumexp(logits)
        sm = np.exp(logits - logz)
        value = (1.0 + pbar) * logz - float(p @ gy) - pbar * logits[k]
        grad[:k] = (1.0 + pbar) * sm[:k] - p
        grad[k] = (1.0 + pbar) * sm[k] - pbar
        return value, grad

    if surrogate == "ova-pop":
        def phi(z):
            return np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
        num_experts = profile.num_experts
        class_value = float(p @ phi(gy) + (1.0 - p) @ phi(-gy))
        value = num_experts * class_value
        grad[:k] = num_experts * (_sigmoid(gy) - p)
        for e in range(num_experts):
            pe = profile.expert_correctness[e]
            ge = logits[k + e]
            value += phi(-ge) + pe * (phi(ge) - phi(-ge))
            grad[k + e] = _sigmoid(ge) - pe
        return value, grad

    raise ValueError(f"unknown surrogate {surrogate!r}")


def minimize_pointwise_risk(profile: ProbabilityProfile, surrogate: str,
                            iterations: int = 20000, tolerance: float = 1e-7,
                            scale: float = 1.0) -> np.ndarray:
    """Backtracking gradient descent on the convex pointwise risk.

    Converged when the sup-norm of the gradient drops to ``tolerance``.
    Tolerances much below ~1e-8 are unreachable: the Armijo test needs a
    function decrease that float64 cancellation swallows near the optimum.
    ``scale`` multiplies the whole objective; decisions must not depend
    on it.
    """
    if surrogate not in SURROGATES:
        raise ValueError(f"surrogate must be one of {SURROGATES}")
    dim = profile.num_classes + (1 if surrogate == "sm-pop-avg"
                                 else profile.num_experts)
    x = np.zeros(dim)
    value, grad = pointwise_risk(profile, surrogate, x)
    value, grad = scale * value, scale * grad
    step = 1.0
    for _ in range(iterations):
        gnorm = np.abs(grad).max()
        if gnorm <= tolerance:
            return x
        # backtracking line search with a mild Armijo condition
        step = min(step * 2.0, 64.0)
        while True:
            cand = x - step * grad
            cval, cgrad = pointwise_risk(profile, surrogate, cand)
            cval, cgrad = scale * cval, scale * cgrad
            if cval <= value - 0.5 * step * float(grad @ grad) or step < 1e-18:
                break
            step *= 0.5
        x, value, grad = cand, cval, cgrad
    gnorm = float(np.abs(grad).max())
    if gnorm > tolerance:
        raise ConvergenceError("pointwise-risk minimization did not converge",
                               gnorm)
    return x


@dataclass
class InducedDecisions:
    """Decisions read off a logit vector returned by the minimizer."""

    classifier: int
    defer: np.ndarray  # per expert for sm-pop/ova-pop, length 1 for avg

    def defer_flag(self, e: int = 0) -> int:
        return int(self.defer[e])


def induced_decisions(logits: np.ndarray, num_classes: int) -> InducedDecisions:
    gy = logits[:num_classes]
    gr = logits[num_classes:]
    best = gy.max()
    return InducedDecisions(classifier=int(np.argmax(gy)),
                            defer=(gr >= best).astype(int))


@dataclass
class StationarityReport:
    """Observed softmax mass ratios at the sm-pop minimizer.

    ``observed[e]`` holds exp(g)/Z ratios for the K class slots plus that
    expert's reject slot; the two candidate denominators let the report
    show which closed form the numbers actually follow.
    """

    observed: list[np.ndarray] = field(default_factory=list)
    candidate_one_plus: list[np.ndarray] = field(default_factory=list)
    candidate_one_minus: list[np.ndarray] = field(default_factory=list)


def stationarity_ratios(profile: ProbabilityProfile,
                        logits: np.ndarray) -> StationarityReport:
    p = profile.class_posterior
    k = profile.num_classes
    report = StationarityReport()
    for e in range(profile.num_experts):
        pe = profile.expert_correctness[e]
        group = np.append(logits[:k], logits[k + e])
        sm = np.exp(group - _logsumexp(group))
        probs = np.append(p, pe)
        report.observed.append(sm)
        report.candidate_one_plus.append(probs / (1.0 + pe))
        with np.errstate(divide="ignore"):
            report.candidate_one_minus.append(
                np.where(pe < 1.0, probs / (1.0 - pe), np.inf))
    return report
