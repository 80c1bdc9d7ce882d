"""Test-time adaptation: vanilla fine-tuning on a context set.

Fine-tuning moves the marginal-expert model toward the currently available
expert.  The trunk (and encoder, when present) stay frozen; only the
classifier and rejector heads take gradient steps, on the single-expert
softmax surrogate averaged over the context set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, Tape, Tensor
from .experts import ContextSet
from .losses import softmax_deferral, take_col
from .model import DeferralModel
from .nn import mlp_apply


@dataclass
class FinetuneConfig:
    steps: int
    step_size: float
    update: tuple[str, ...] = ("classifier", "rejector")

    def __post_init__(self) -> None:
        if self.steps < 0 or self.step_size < 0.0:
            raise ValueError("steps and step size must be nonnegative")
        for name in self.update:
            if name not in ("classifier", "rejector"):
                raise ValueError(f"unknown update target {name!r}")


@dataclass
class MamlConfig:
    inner_steps: int
    inner_lr: float
    first_order: bool = True  # second-order is out of scope

    def __post_init__(self) -> None:
        if not self.first_order:
            raise ValueError("only the first-order variant is implemented")
        if self.inner_steps < 0 or self.inner_lr < 0.0:
            raise ValueError("inner steps and step size must be nonnegative")


def _context_loss(model: DeferralModel, context: ContextSet,
                  tape: Tape | None) -> Tensor:
    """Mean single-expert surrogate over the context demonstrations."""
    feats = model.features(context.xs)          # trunk frozen: constants
    cls = model.class_scores(Tensor(feats.data), tape)
    rej = model.reject_scores(Tensor(feats.data), None, tape)
    loss = softmax_deferral(cls, take_col(rej, 0), context.ys, context.ms)
    return loss.mean()


def finetune(model: DeferralModel, context: ContextSet,
             config: FinetuneConfig) -> DeferralModel:
    """Plain gradient descent on the context set; empty context is a no-op.

    Returns an adapted copy; the input model is untouched.
    """
    if model.variant in ("pop-np", "pop-np-attn"):
        raise ValueError("fine-tuning applies to encoder-free variants; "
                         "context-conditioned models adapt via their encoder")
    if len(context) == 0 or config.steps == 0 or config.step_size == 0.0:
        return model
    adapted = model.copy()
    targets: dict[str, np.ndarray] = {}
    if "classifier" in config.update:
        targets.update(adapted.classifier.named_arrays("classifier"))
    if "rejector" in config.update:
        targets.update(adapted.rejector.named_arrays("rejector"))
    for _ in range(config.steps):
        tape = Tape()
        loss = _context_loss(adapted, context, tape)
        if not np.isfinite(loss.data):
            raise NumericError("fine-tuning loss became non-finite")
        tape.run_backward(loss, 1.0)
        for arr in targets.values():
            arr -= config.step_size * tape.grad_for(arr)
    return adapted


def finetune_grid_search(model: DeferralModel, context: ContextSet,
                         valid_triples: ContextSet,
                         step_grid: tuple[int, ...] = (1, 2, 5, 10, 20),
                         size_grid: tuple[float, ...] = (1e-2, 1e-1)
                         ) -> FinetuneConfig:
    """Pick (steps, step size) by held-out surrogate loss.

    Ties prefer fewer steps, then the smaller step size.
    """
    if not step_grid or not size_grid:
        raise ValueError("grids must be nonempty")
    best: tuple[float, int, float] | None = None
    for steps in sorted(step_grid):
        for size in sorted(size_grid):
            cfg = FinetuneConfig(steps, size)
            adapted = finetune(model, context, cfg)
            score = float(_context_loss(adapted, valid_triples, None).data)
            key = (score, steps, size)
            if best is None or key < best:
                best = key
    return FinetuneConfig(best[1], best[2])


def adapt_rejector(model: DeferralModel, context: ContextSet,
                   config: MamlConfig):
    """Inner-loop adaptation for meta-training: rejector-only descent.

    With zero steps (or zero step size) the shared rejector itself is
    returned, so the meta-step degenerates exactly to marginal training.
    The classifier stays frozen here, unlike test-time fine-tuning.
    """
    if config.inner_steps == 0 or config.inner_lr == 0.0 or len(context) == 0:
        return model.rejector
    rej = model.rejector.copy()
    feats = model.features(context.xs).data
    cls_const = model.class_scores(Tensor(feats)).data
    for _ in range(config.inner_steps):
        tape = Tape()
        r = mlp_apply(rej, Tensor(feats), tape)
        loss = softmax_deferral(Tensor(cls_const), take_col(r, 0),
                                context.ys, context.ms).mean()
        if not np.isfinite(loss.data):
            raise NumericError("inner-loop loss became non-finite")
        tape.run_backward(loss, 1.0)
        for arr in rej.arrays():
            arr -= config.inner_lr * tape.grad_for(arr)
    return rej
