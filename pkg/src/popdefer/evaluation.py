"""Evaluation protocol, metrics, budget curves, and decision rasters.

The protocol mirrors deployment: for every test point one expert is drawn
uniformly from the evaluation population, that expert's context set is
drawn fresh from the context pool, the model decides, and a deferral is
scored against a freshly simulated expert prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import FinetuneConfig, finetune
from .autodiff import Tensor
from .bayes import ProbabilityProfile, bayes_classifier, bayes_rejector_pop
from .data import Dataset, GaussianClusterTask
from .encoders import attentive_paired, embed_points
from .experts import (ContextSet, ExpertSpec, expert_correctness_prob,
                      expert_predict_batch, sample_context_set)
from .model import Decision, DeferralModel, budget_deferral, decide, score

MISSING_VALUE = ""  # CSV cell for undefined metrics


@dataclass
class MetricsRecord:
    system_accuracy: float
    coverage: float
    classifier_accuracy_kept: float | None
    expert_accuracy_deferred: float | None
    n: int
    config_fingerprint: str = ""
    seed: int | None = None

    def as_row(self) -> dict:
        return {
            "system_accuracy": self.system_accuracy,
            "coverage": self.coverage,
            "classifier_accuracy_kept":
                MISSING_VALUE if self.classifier_accuracy_kept is None
                else self.classifier_accuracy_kept,
            "expert_accuracy_deferred":
                MISSING_VALUE if self.expert_accuracy_deferred is None
                else self.expert_accuracy_deferred,
            "n": self.n,
            "config_fingerprint": self.config_fingerprint,
            "seed": MISSING_VALUE if self.seed is None else self.seed,
        }


@dataclass
class EvalConfig:
    context_size: int
    adapt: str = "none"                      # none | finetune
    finetune: FinetuneConfig | None = None
    presence: float = 1.0                    # context presence probability
    max_points: int | None = None

    def __post_init__(self) -> None:
        if self.adapt not in ("none", "finetune"):
            raise ValueError(f"unknown adaptation mode {self.adapt!r}")
        if self.adapt == "finetune" and self.finetune is None:
            raise ValueError("finetune mode needs a FinetuneConfig")
        if not 0.0 <= self.presence <= 1.0:
            raise ValueError("presence must be a probability")


@dataclass
class EvalOutcome:
    """Everything needed to re-score under budgets without re-running."""

    decisions: list[Decision]
    labels: np.ndarray
    expert_preds: np.ndarray
    expert_indices: np.ndarray
    record: MetricsRecord


def metrics_from(decisions: list[Decision], labels: np.ndarray,
                 expert_preds: np.ndarray, fingerprint: str = "",
                 seed: int | None = None) -> MetricsRecord:
    """Exact-count tally; the accounting identity holds by construction."""
    n = len(decisions)
    if n == 0:
        raise ValueError("cannot evaluate an empty test set")
    kept_correct = deferred_correct = kept = deferred = 0
    for d, y, m in zip(decisions, labels, expert_preds):
        if d.deferred():
            deferred += 1
            deferred_correct += int(m == y)
        else:
            kept += 1
            kept_correct += int(d.class_pred == y)
    return MetricsRecord(
        system_accuracy=(kept_correct + deferred_correct) / n,
        coverage=kept / n,
        classifier_accuracy_kept=None if kept == 0 else kept_correct / kept,
        expert_accuracy_deferred=None if deferred == 0
        else deferred_correct / deferred,
        n=n, config_fingerprint=fingerprint, seed=seed)


def representations_for(model: DeferralModel, contexts: list[ContextSet],
                        query_xs: np.ndarray) -> np.ndarray:
    """Per-point expert representations, batched; empty contexts map to 0."""
    enc = model.encoder
    n = len(contexts)
    psi = np.zeros((n, enc.embed_dim))
    live = [i for i, c in enumerate(contexts) if len(c) > 0]
    if not live:
        return psi
    sizes = {len(contexts[i]) for i in live}
    for b in sizes:
        idx = [i for i in live if len(contexts[i]) == b]
        xs = np.concatenate([contexts[i].xs for i in idx])
        ys = np.concatenate([contexts[i].ys for i in idx])
        ms = np.concatenate([contexts[i].ms for i in idx])
        feats = model.features(xs).data
        emb = embed_points(enc, feats, ys, ms, tape=None)
        slab = emb.reshape(len(idx), b, enc.embed_dim)
        if enc.attentive:
            qf = model.features(query_xs[idx]).data
            reps = attentive_paired(enc, Tensor(slab.data), qf, tape=None).data
        else:
            reps = slab.data.mean(axis=1)
        psi[idx] = reps
    return psi


def evaluate(model: DeferralModel, test: Dataset, population: list[ExpertSpec],
             context_pool: Dataset, cfg: EvalConfig, seed: int,
             fingerprint: str = "") -> EvalOutcome:
    """One full pass of the per-point protocol.

    Expert assignment, context draws, and simulated outcomes use three
    independent substreams of ``seed``, so paired model comparisons see
    the same experts and outcomes even when one model skips contexts.
    """
    if len(test) == 0:
        raise ValueError("cannot evaluate an empty test set")
    rng_assign = np.random.default_rng([seed, 0])
    rng_context = np.random.default_rng([seed, 1])
    rng_outcome = np.random.default_rng([seed, 2])
    n = len(test) if cfg.max_points is None else min(len(test), cfg.max_points)
    xs, ys = test.x[:n], test.y[:n]
    subs = None if test.subclass is None else test.subclass[:n]
    expert_idx = rng_assign.integers(0, len(population), size=n)
    needs_context = (cfg.adapt == "finetune"
                     or model.variant in ("pop-np", "pop-np-attn"))
    contexts: list[ContextSet] = []
    if needs_context:
        for i in range(n):
            spec = population[expert_idx[i]]
            ctx = sample_context_set(spec, context_pool, cfg.context_size,
                                     rng_context)
            if cfg.presence < 1.0 and rng_context.random() >= cfg.presence:
                ctx = ContextSet.empty(context_pool.dim, spec.expert_id)
            contexts.append(ctx)
    expert_preds = np.empty(n, dtype=np.intp)
    for i in range(n):
        spec = population[expert_idx[i]]
        sub = None if subs is None else subs[i:i + 1]
        expert_preds[i] = expert_predict_batch(
            spec, ys[i:i + 1], sub, rng_outcome)[0]

    decisions: list[Decision] = []
    if cfg.adapt == "finetune":
        for i in range(n):
            adapted = finetune(model, contexts[i], cfg.finetune)
            cls, rej = score(adapted, xs[i])
            decisions.append(decide(cls, rej, adapted.variant))
    elif model.variant in ("pop-np", "pop-np-attn"):
        feats = model.features(xs)
        cls = model.class_scores(feats).data
        psi = representations_for(model, contexts, xs)
        rej = model.reject_scores(feats, Tensor(psi)).data
        for i in range(n):
            decisions.append(decide(cls[i], rej[i], model.variant))
    else:
        feats = model.features(xs)
        cls = model.class_scores(feats).data
        rej = model.reject_scores(feats, None).data
        for i in range(n):
            decisions.append(decide(cls[i], rej[i], model.variant))
    record = metrics_from(decisions, ys, expert_preds, fingerprint, seed)
    return EvalOutcome(decisions, ys, expert_preds, expert_idx, record)


@dataclass
class SweepResult:
    axis_name: str
    axis_values: list[float]
    records: dict[float, list[MetricsRecord]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        vals = list(self.axis_values)
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("axis values must be strictly increasing")

    def add(self, value: float, record: MetricsRecord) -> None:
        self.records.setdefault(value, []).append(record)

    def mean(self, value: float, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.records[value]]
        vals = [v for v in vals if v is not None]
        if not vals:
            raise ValueError(f"metric {metric} undefined at {value}")
        return float(np.mean(vals))


def budget_sweep(outcome: EvalOutcome, budgets: list[float],
                 fingerprint: str = "") -> SweepResult:
    """Re-scores one evaluation pass under each deferral budget."""
    if not budgets:
        raise ValueError("budget axis must be nonempty")
    if any(b < 0 or b > 1 for b in budgets):
        raise ValueError("budgets must lie in [0, 1]")
    result = SweepResult("budget", list(budgets))
    for b in budgets:
        capped = budget_deferral(outcome.decisions, b)
        result.add(b, metrics_from(capped, outcome.labels,
                                   outcome.expert_preds,
                                   f"{fingerprint}|budget={b}",
                                   outcome.record.seed))
    return result


def missing_context_sweep(model: DeferralModel, test: Dataset,
                          population: list[ExpertSpec], context_pool: Dataset,
                          cfg: EvalConfig, presences: list[float],
                          seed: int, fingerprint: str = "") -> SweepResult:
    """Evaluate with contexts independently dropped at each presence rate."""
    if not presences:
        raise ValueError("presence axis must be nonempty")
    result = SweepResult("presence", list(presences))
    for p in presences:
        sub = EvalConfig(cfg.context_size, cfg.adapt, cfg.finetune,
                         presence=p, max_points=cfg.max_points)
        out = evaluate(model, test, population, context_pool, sub, seed,
                       f"{fingerprint}|presence={p}")
        result.add(p, out.record)
    return result


@dataclass
class RasterRow:
    x0: float
    x1: float
    action: str
    margin: float
    cluster: int
    radius_sigma: float          # distance to the owning cluster mean
    bayes_action: str

    @property
    def in_cluster(self) -> bool:
        """Within the 3-sigma extent that visually defines a cluster."""
        return self.radius_sigma <= 3.0


def decision_region_raster(model: DeferralModel, task: GaussianClusterTask,
                           expert: ExpertSpec, context: ContextSet,
                           grid_lo: float = 0.0, grid_hi: float = 12.0,
                           steps: int = 60) -> list[RasterRow]:
    """Dense decision grid for the 2-D task with the closed-form overlay.

    Every cell reports its nearest cluster and the distance in sigma
    units; cells beyond 3 sigma sit in regions of negligible mass.
    """
    if task.means.shape[1] != 2:
        raise ValueError("rasters are defined for 2-D tasks only")
    axis = np.linspace(grid_lo, grid_hi, steps)
    xx, yy = np.meshgrid(axis, axis)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    post = task.posterior(pts)
    resp = task.responsibilities(pts)
    sigma = float(np.sqrt(task.cov_diag.max()))
    feats = model.features(pts)
    cls = model.class_scores(feats).data
    if model.variant in ("pop-np", "pop-np-attn"):
        contexts = [context] * len(pts)
        psi = representations_for(model, contexts, pts)
        rej = model.reject_scores(feats, Tensor(psi)).data
    else:
        rej = model.reject_scores(feats, None).data
    rows = []
    for i, (x0, x1) in enumerate(pts):
        d = decide(cls[i], rej[i], model.variant)
        corr = expert_correctness_prob(expert, post[i])
        profile = ProbabilityProfile(post[i], [corr])
        bayes_defer = bayes_rejector_pop(profile, 0)
        bayes_act = "defer" if bayes_defer else f"predict:{bayes_classifier(profile)}"
        act = "defer" if d.deferred() else f"predict:{d.class_pred}"
        cluster = int(np.argmax(resp[i]))
        radius = float(np.linalg.norm(pts[i] - task.means[cluster]) / sigma)
        rows.append(RasterRow(float(x0), float(x1), act, d.margin,
                              cluster, radius, bayes_act))
    return rows


# -- CSV output --------------------------------------------------------------

def write_metrics_csv(path: str | Path, rows: list[dict],
                      fieldnames: list[str]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, MISSING_VALUE))
                             for k in fieldnames})


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_to_rows(result: SweepResult, variant: str) -> list[dict]:
    rows = []
    for value in result.axis_values:
        for rec in result.records.get(value, []):
            row = {"axis": result.axis_name, "value": value,
                   "variant": variant}
            row.update(rec.as_row())
            rows.append(row)
    return rows


def write_raster_csv(path: str | Path, rows: list[RasterRow]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "action", "margin", "cluster",
                         "radius_sigma", "bayes_action"])
        for r in rows:
            writer.writerow([repr(r.x0), repr(r.x1), r.action, repr(r.margin),
                             r.cluster, repr(r.radius_sigma), r.bayes_action])


def write_decisions_csv(path: str | Path, outcome: EvalOutcome) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example", "action", "expert", "margin", "scores"])
        for i, d in enumerate(outcome.decisions):
            writer.writerow([
                i, d.action,
                int(outcome.expert_indices[i]),
                repr(d.margin),
                " ".join(repr(float(s)) for s in d.scores)])
