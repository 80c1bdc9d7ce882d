"""Minibatch training loops for every model variant.

One loop serves both plain surrogate training and first-order
meta-optimization: the meta path adapts per-expert rejector copies before
each outer step, and with zero inner steps the copies collapse to the
shared rejector, making the meta loop reproduce marginal training to the
bit.  The trunk takes Nesterov SGD with weight decay; classifier head,
rejector, and encoder take Adam; both follow the cosine schedule with a
held floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adaptation import MamlConfig, adapt_rejector
from .autodiff import Tape, Tensor, broadcast_to, concat
from .data import Dataset
from .encoders import attentive_encode, embed_points, mean_pool
from .evaluation import EvalConfig, evaluate
from .experts import ContextSet, ExpertSpec, expert_predict_batch, sample_context_set
from .losses import (cross_entropy, ova_population, softmax_deferral_multi,
                     softmax_marginal, softmax_population, take_col)
from .model import DeferralModel
from .nn import Adam, Mlp, NesterovSgd, cosine_lr, mlp_apply

SURROGATES = ("sm-pop", "sm-pop-avg", "ova-pop", "sm-multi")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    surrogate: str = "sm-pop"
    context_size: int = 50
    base_lr: float = 1e-2
    head_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    floor_ratio: float = 1e-3
    hold_epochs: int = 50
    divergence_threshold: float = 1e6
    metrics_points: int = 200
    checkpoint_best: bool = True
    checkpoint_metric: str = "valid-loss"   # valid-loss | system-accuracy

    def __post_init__(self) -> None:
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}")
        if self.checkpoint_metric not in ("valid-loss", "system-accuracy"):
            raise ValueError("checkpoint metric must be valid-loss or "
                             "system-accuracy")
        if self.hold_epochs >= self.epochs:
            self.hold_epochs = 0


@dataclass
class TrainResult:
    model: DeferralModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = float("inf")


def annotate_dataset(ds: Dataset, population: list[ExpertSpec],
                     rng: np.random.Generator) -> np.ndarray:
    """Draw one prediction per (sample, expert); frozen for the whole run."""
    demos = np.empty((len(ds), len(population)), dtype=np.intp)
    for e, spec in enumerate(population):
        demos[:, e] = expert_predict_batch(spec, ds.y, ds.subclass, rng)
    return demos


def _context_slabs(model: DeferralModel, contexts: list[ContextSet],
                   tape: Tape | None) -> Tensor:
    """Embed every expert's context: (E, B, D).  All slabs share one B."""
    enc = model.encoder
    xs = np.concatenate([c.xs for c in contexts])
    ys = np.concatenate([c.ys for c in contexts])
    ms = np.concatenate([c.ms for c in contexts])
    feat_tape = tape if enc.train_feature_pathway else None
    feats = model.features(xs, feat_tape)
    if feat_tape is None:
        feats = Tensor(feats.data)
    emb = embed_points(enc, feats, ys, ms, tape)
    b = len(contexts[0])
    return emb.reshape(len(contexts), b, enc.embed_dim)


def _per_expert_reject_scores(model: DeferralModel, feats: Tensor,
                              xb: np.ndarray, contexts: list[ContextSet] | None,
                              rejectors: list[Mlp] | None,
                              tape: Tape | None) -> Tensor:
    """(n, E) reject scores: one column per expert.

    Encoder variants condition the shared rejector on each expert's
    representation; the meta path instead swaps in per-expert rejector
    parameters on the plain feature input.
    """
    if rejectors is not None:
        cols = [mlp_apply(r, feats, tape) for r in rejectors]
        return concat(cols, axis=1)
    enc = model.encoder
    num_experts = len(contexts)
    n = feats.shape[0]
    slabs = _context_slabs(model, contexts, tape)
    if enc.attentive:
        query = feats if enc.train_feature_pathway else Tensor(feats.data)
        psi = attentive_encode(enc, slabs, query, tape)        # (E, n, D)
    else:
        pooled = mean_pool(slabs)                              # (E, D)
        psi = broadcast_to(pooled.reshape(num_experts, 1, enc.embed_dim),
                           (num_experts, n, enc.embed_dim))
    feats3 = broadcast_to(feats.reshape(1, n, feats.shape[1]),
                          (num_experts, n, feats.shape[1]))
    rej_in = concat([feats3, psi], axis=2)
    rej_in = rej_in.reshape(num_experts * n, rej_in.shape[2])
    out = mlp_apply(model.rejector, rej_in, tape)
    return out.reshape(num_experts, n).swapaxes(0, 1)


def _batch_loss(model: DeferralModel, xb: np.ndarray, yb: np.ndarray,
                demos_b: np.ndarray, corr_b: np.ndarray,
                contexts: list[ContextSet] | None,
                rejectors: list[Mlp] | None,
                cfg: TrainConfig, tape: Tape | None) -> Tensor:
    feats = model.features(xb, tape)
    cls = model.class_scores(feats, tape)
    if cfg.surrogate == "sm-pop-avg":
        rej = model.reject_scores(feats, None, tape)
        return softmax_marginal(cls, take_col(rej, 0), yb, corr_b).mean()
    if cfg.surrogate == "sm-multi":
        rej = model.reject_scores(feats, None, tape)
        return softmax_deferral_multi(cls, rej, yb, demos_b).mean()
    rej_cols = _per_expert_reject_scores(model, feats, xb, contexts,
                                         rejectors, tape)
    if cfg.surrogate == "sm-pop":
        return softmax_population(cls, rej_cols, yb, corr_b).mean()
    return ova_population(cls, rej_cols, yb, corr_b).mean()


def _needs_contexts(model: DeferralModel, cfg: TrainConfig) -> bool:
    return model.variant in ("pop-np", "pop-np-attn") \
        and cfg.surrogate in ("sm-pop", "ova-pop")


def _collect_grads(model: DeferralModel, tape: Tape,
                   adapted: list[Mlp] | None
                   ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    gbase = {k: tape.grad_for(a) for k, a in model.base_arrays().items()}
    ghead = {k: tape.grad_for(a) for k, a in model.head_arrays().items()}
    if adapted is not None:
        # first-order meta gradient: fold adapted-copy gradients back onto
        # the shared rejector slots
        names = list(model.rejector.named_arrays("rejector"))
        for copy in adapted:
            if copy is model.rejector:
                continue
            for name, arr in zip(names, copy.arrays()):
                ghead[name] = ghead[name] + tape.grad_for(arr)
    return gbase, ghead


def _epoch_eval_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2 ** 31 - 1)


def _train(model: DeferralModel, train_ds: Dataset, valid_ds: Dataset,
           population: list[ExpertSpec], cfg: TrainConfig, seed: int,
           maml_cfg: MamlConfig | None = None) -> TrainResult:
    rng = np.random.default_rng([seed, 3])
    demo_rng = np.random.default_rng([seed, 4])
    demos_train = annotate_dataset(train_ds, population, demo_rng)
    demos_valid = annotate_dataset(valid_ds, population, demo_rng)
    corr_train = (demos_train == train_ds.y[:, None]).astype(np.float64)
    corr_valid = (demos_valid == valid_ds.y[:, None]).astype(np.float64)

    sgd = NesterovSgd(cfg.base_lr, cfg.momentum, cfg.weight_decay)
    adam = Adam(cfg.head_lr)
    base = model.base_arrays()
    head = model.head_arrays()

    use_contexts = _needs_contexts(model, cfg)
    # fixed context draws score validation: epochs stay comparable instead
    # of racing per-epoch draw luck; several draws average out the luck of
    # any single one
    valid_context_draws = None
    if use_contexts:
        vrng = np.random.default_rng([seed, 8])
        b = min(cfg.context_size, len(valid_ds))
        valid_context_draws = [
            [sample_context_set(spec, valid_ds, b, vrng)
             for spec in population]
            for _ in range(4)]
    inner_active = (maml_cfg is not None and maml_cfg.inner_steps > 0
                    and maml_cfg.inner_lr > 0.0)

    result = TrainResult(model)
    best_snapshot = None
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        lr_base = cosine_lr(epoch, cfg.epochs, cfg.base_lr,
                            cfg.floor_ratio, cfg.hold_epochs)
        lr_head = cosine_lr(epoch, cfg.epochs, cfg.head_lr,
                            cfg.floor_ratio, cfg.hold_epochs)
        sgd.lr, adam.lr = lr_base, lr_head
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = train_ds.x[idx], train_ds.y[idx]
            contexts = None
            if use_contexts:
                contexts = [sample_context_set(spec, train_ds,
                                               cfg.context_size, rng)
                            for spec in population]
            adapted = None
            if maml_cfg is not None:
                if inner_active:
                    inner_ctx = [sample_context_set(spec, train_ds,
                                                    cfg.context_size, rng)
                                 for spec in population]
                    adapted = [adapt_rejector(model, c, maml_cfg)
                               for c in inner_ctx]
                else:
                    adapted = [model.rejector] * len(population)
            rejectors = adapted
            if (rejectors is None and not use_contexts
                    and cfg.surrogate in ("sm-pop", "ova-pop")):
                # marginal architecture under a per-expert loss: every
                # expert shares the one rejector
                rejectors = [model.rejector] * len(population)
            tape = Tape()
            loss = _batch_loss(model, xb, yb, demos_train[idx],
                               corr_train[idx], contexts, rejectors, cfg, tape)
            value = float(loss.data)
            if not np.isfinite(value) or value > cfg.divergence_threshold:
                raise TrainingError(
                    f"training diverged at epoch {epoch}, batch {batches}: "
                    f"loss {value:.3e}")
            tape.run_backward(loss, 1.0)
            gbase, ghead = _collect_grads(model, tape, adapted)
            if base:
                sgd.step(base, gbase)
            adam.step(head, ghead)
            epoch_loss += value
            batches += 1

        if valid_context_draws is None:
            valid_loss = _validation_loss(model, valid_ds, demos_valid,
                                          corr_valid, population, cfg, None)
        else:
            valid_loss = float(np.mean(
                [_validation_loss(model, valid_ds, demos_valid, corr_valid,
                                  population, cfg, draw)
                 for draw in valid_context_draws]))
        sys_acc, coverage = _quick_metrics(model, valid_ds, population,
                                           train_ds, cfg,
                                           _epoch_eval_seed(seed, epoch) + 1)
        result.log.append({
            "epoch": epoch, "lr_base": lr_base, "lr_head": lr_head,
            "train_loss": epoch_loss / max(batches, 1),
            "valid_loss": valid_loss,
            "system_accuracy": sys_acc, "coverage": coverage,
        })
        score = valid_loss if cfg.checkpoint_metric == "valid-loss" \
            else -sys_acc
        if cfg.checkpoint_best and score < result.best_valid_loss:
            result.best_valid_loss = score
            result.best_epoch = epoch
            best_snapshot = model.copy()
    if cfg.checkpoint_best and best_snapshot is not None:
        result.model = best_snapshot
    else:
        result.model = model
    return result


def _validation_loss(model: DeferralModel, valid_ds: Dataset,
                     demos: np.ndarray, corr: np.ndarray,
                     population: list[ExpertSpec], cfg: TrainConfig,
                     contexts: list[ContextSet] | None,
                     chunk: int = 512) -> float:
    rejectors = None
    if contexts is None and cfg.surrogate in ("sm-pop", "ova-pop"):
        rejectors = [model.rejector] * len(population)
    total, count = 0.0, 0
    for start in range(0, len(valid_ds), chunk):
        idx = np.arange(start, min(start + chunk, len(valid_ds)))
        loss = _batch_loss(model, valid_ds.x[idx], valid_ds.y[idx],
                           demos[idx], corr[idx], contexts, rejectors,
                           cfg, tape=None)
        total += float(loss.data) * len(idx)
        count += len(idx)
    return total / max(count, 1)


def _quick_metrics(model: DeferralModel, valid_ds: Dataset,
                   population: list[ExpertSpec], pool: Dataset,
                   cfg: TrainConfig, seed: int) -> tuple[float, float]:
    eval_cfg = EvalConfig(cfg.context_size, max_points=cfg.metrics_points)
    out = evaluate(model, valid_ds, population, pool, eval_cfg, seed)
    return out.record.system_accuracy, out.record.coverage


def train_marginal(model: DeferralModel, train_ds: Dataset, valid_ds: Dataset,
                   population: list[ExpertSpec], cfg: TrainConfig,
                   seed: int) -> TrainResult:
    """Minibatch surrogate training with per-epoch validation checkpointing."""
    return _train(model, train_ds, valid_ds, population, cfg, seed)


def maml_train(model: DeferralModel, train_ds: Dataset, valid_ds: Dataset,
               population: list[ExpertSpec], cfg: TrainConfig,
               maml_cfg: MamlConfig, seed: int) -> TrainResult:
    """First-order meta-optimization of the marginal architecture.

    Each outer step adapts a rejector copy per expert on a fresh context
    set (classifier frozen inside the inner loop), evaluates the
    population surrogate with the adapted copies, and applies first-order
    meta-gradients to the shared parameters.
    """
    if model.variant in ("pop-np", "pop-np-attn"):
        raise ValueError("meta-optimization runs on the marginal "
                         "architecture, not encoder variants")
    if cfg.surrogate != "sm-pop":
        raise ValueError("the meta objective is the population softmax "
                         "surrogate")
    return _train(model, train_ds, valid_ds, population, cfg, seed, maml_cfg)


def train_classifier_only(model: DeferralModel, train_ds: Dataset,
                          valid_ds: Dataset, epochs: int, batch_size: int,
                          base_lr: float, seed: int,
                          weight_decay: float = 5e-4,
                          momentum: float = 0.9) -> list[dict]:
    """Warm-start phase: plain cross entropy on trunk plus classifier head.

    Runs a fixed number of epochs, cosine-annealed to (effectively) zero,
    no checkpointing; the model is updated in place.
    """
    rng = np.random.default_rng([seed, 6])
    sgd = NesterovSgd(base_lr, momentum, weight_decay)
    adam = Adam(1e-3)
    base = model.base_arrays()
    head = model.classifier.named_arrays("classifier")
    log = []
    n = len(train_ds)
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, base_lr, floor_ratio=1e-9, hold_epochs=0)
        sgd.lr = lr
        adam.lr = lr * 0.1
        order = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            feats = model.features(train_ds.x[idx], tape)
            cls = model.class_scores(feats, tape)
            loss = cross_entropy(cls, train_ds.y[idx]).mean()
            tape.run_backward(loss, 1.0)
            if base:
                sgd.step(base, {k: tape.grad_for(a) for k, a in base.items()})
            adam.step(head, {k: tape.grad_for(a) for k, a in head.items()})
            epoch_loss += float(loss.data)
            batches += 1
        feats = model.features(valid_ds.x)
        preds = np.argmax(model.class_scores(feats).data, axis=1)
        log.append({"epoch": epoch, "lr_base": lr,
                    "train_loss": epoch_loss / max(batches, 1),
                    "valid_accuracy": float((preds == valid_ds.y).mean())})
    return log
