"""Synthetic expert populations: samplers, predictors, context draws.

Two noise conventions coexist on purpose.  Oracle-style experts that miss
their p-coin fall back to a uniform draw over all K classes (effective
correctness p + (1-p)/K), while uniform-correctness experts exclude the
true class from the noise draw so their stated correctness is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np

from .data import Dataset


@dataclass
class UniformCorrectness:
    """Correct with probability q anywhere; errors spread over the other
    K-1 classes."""

    q: float
    num_classes: int
    expert_id: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must be a probability")


@dataclass
class OracleClasses:
    """Always right on its oracle classes, right with probability p
    elsewhere (noise uniform over all K classes)."""

    oracle_set: frozenset[int]
    overlap_p: float
    num_classes: int
    expert_id: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        self.oracle_set = frozenset(int(c) for c in self.oracle_set)
        if not self.oracle_set:
            raise ValueError("oracle set must be nonempty")
        if not 0.0 <= self.overlap_p <= 1.0:
            raise ValueError("overlap probability must be in [0, 1]")


@dataclass
class HierarchicalOracle:
    """Oracle on chosen subclasses; p-correct within its superclasses;
    uniform over superclasses everywhere else."""

    oracle_subclasses: frozenset[int]
    within_superclasses: frozenset[int]
    overlap_p: float
    num_superclasses: int
    subclasses_per_super: int
    expert_id: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        self.oracle_subclasses = frozenset(int(c) for c in self.oracle_subclasses)
        self.within_superclasses = frozenset(int(c) for c in self.within_superclasses)
        if not self.oracle_subclasses:
            raise ValueError("oracle subclass set must be nonempty")
        if not 0.0 <= self.overlap_p <= 1.0:
            raise ValueError("overlap probability must be in [0, 1]")

    def super_of(self, subclass: int) -> int:
        return int(subclass) // self.subclasses_per_super


ExpertSpec = Union[UniformCorrectness, OracleClasses, HierarchicalOracle]


@dataclass
class PopulationConfig:
    variant: str                        # uniform | oracle | hierarchical
    size: int
    num_classes: int
    overlap_p: float = 0.1
    oracle_classes_per_expert: int = 1
    correctness_values: tuple[float, ...] = ()
    supers_per_expert: int = 4
    oracle_subclasses_per_super: int = 3
    subclasses_per_super: int = 5
    swap_out: int = 0
    swap_in: int = 0

    def __post_init__(self) -> None:
        if self.swap_out > self.size or self.swap_in > self.size:
            raise ValueError("swap counts cannot exceed the population size")


@dataclass
class ContextSet:
    """Demonstration triples (x, y, m) for one expert; possibly empty."""

    xs: np.ndarray
    ys: np.ndarray
    ms: np.ndarray
    expert_id: int = 0
    subclasses: np.ndarray | None = None

    def __len__(self) -> int:
        return self.xs.shape[0]

    @staticmethod
    def empty(dim: int, expert_id: int = 0) -> "ContextSet":
        return ContextSet(np.zeros((0, dim)), np.zeros(0, dtype=np.intp),
                          np.zeros(0, dtype=np.intp), expert_id)


def _sample_one_spec(config: PopulationConfig, expert_id: int,
                     rng: np.random.Generator) -> ExpertSpec:
    seed = int(rng.integers(0, 2 ** 31 - 1))
    if config.variant == "uniform":
        values = config.correctness_values or (0.5,)
        q = float(values[expert_id % len(values)])
        return UniformCorrectness(q, config.num_classes, expert_id, seed)
    if config.variant == "oracle":
        if config.oracle_classes_per_expert > config.num_classes:
            raise ValueError("more oracle classes requested than classes exist")
        classes = rng.choice(config.num_classes,
                             size=config.oracle_classes_per_expert,
                             replace=False)
        return OracleClasses(frozenset(int(c) for c in classes),
                             config.overlap_p, config.num_classes,
                             expert_id, seed)
    if config.variant == "hierarchical":
        supers = rng.choice(config.num_classes, size=config.supers_per_expert,
                            replace=False)
        subs = []
        for sc in supers:
            chosen = rng.choice(config.subclasses_per_super,
                                size=config.oracle_subclasses_per_super,
                                replace=False)
            subs.extend(int(sc) * config.subclasses_per_super + int(c)
                        for c in chosen)
        return HierarchicalOracle(frozenset(subs),
                                  frozenset(int(s) for s in supers),
                                  config.overlap_p, config.num_classes,
                                  config.subclasses_per_super, expert_id, seed)
    raise ValueError(f"unknown population variant {config.variant!r}")


def sample_population(config: PopulationConfig, seed: int) -> list[ExpertSpec]:
    rng = np.random.default_rng(seed)
    return [_sample_one_spec(config, i, rng) for i in range(config.size)]


def eval_population_swap(train_pop: list[ExpertSpec], config: PopulationConfig,
                         seed: int) -> list[ExpertSpec]:
    """Drop the last ``swap_out`` experts and draw ``swap_in`` fresh ones."""
    rng = np.random.default_rng(seed)
    kept = list(train_pop[:len(train_pop) - config.swap_out])
    next_id = max((s.expert_id for s in train_pop), default=-1) + 1
    fresh = [_sample_one_spec(config, next_id + i, rng)
             for i in range(config.swap_in)]
    return kept + fresh


def expert_predict(spec: ExpertSpec, x: np.ndarray, y: int,
                   subclass: int | None = None,
                   rng: np.random.Generator | None = None) -> int:
    """One simulated prediction.  The feature vector is accepted for
    signature parity; these experts condition on label-side information."""
    if rng is None:
        raise ValueError("an rng is required")
    y = int(y)
    if isinstance(spec, UniformCorrectness):
        k = spec.num_classes
        if rng.random() < spec.q:
            return y
        wrong = int(rng.integers(0, k - 1))
        return wrong if wrong < y else wrong + 1
    if isinstance(spec, OracleClasses):
        if y in spec.oracle_set:
            return y
        if rng.random() < spec.overlap_p:
            return y
        return int(rng.integers(0, spec.num_classes))
    if isinstance(spec, HierarchicalOracle):
        if subclass is None:
            raise ValueError("hierarchical experts need the subclass")
        if int(subclass) in spec.oracle_subclasses:
            return y
        if spec.super_of(subclass) in spec.within_superclasses:
            if rng.random() < spec.overlap_p:
                return y
        return int(rng.integers(0, spec.num_superclasses))
    raise TypeError(f"unknown expert spec {type(spec).__name__}")


def expert_predict_batch(spec: ExpertSpec, ys: np.ndarray,
                         subclasses: np.ndarray | None,
                         rng: np.random.Generator) -> np.ndarray:
    """Vectorized predictions for a batch of labeled points."""
    ys = np.asarray(ys, dtype=np.intp)
    n = ys.shape[0]
    if isinstance(spec, UniformCorrectness):
        k = spec.num_classes
        hit = rng.random(n) < spec.q
        wrong = rng.integers(0, k - 1, size=n)
        wrong = np.where(wrong < ys, wrong, wrong + 1)
        return np.where(hit, ys, wrong).astype(np.intp)
    if isinstance(spec, OracleClasses):
        oracle = np.isin(ys, list(spec.oracle_set))
        hit = rng.random(n) < spec.overlap_p
        noise = rng.integers(0, spec.num_classes, size=n)
        return np.where(oracle | hit, ys, noise).astype(np.intp)
    if isinstance(spec, HierarchicalOracle):
        if subclasses is None:
            raise ValueError("hierarchical experts need subclasses")
        subclasses = np.asarray(subclasses, dtype=np.intp)
        oracle = np.isin(subclasses, list(spec.oracle_subclasses))
        within = np.isin(subclasses // spec.subclasses_per_super,
                         list(spec.within_superclasses))
        hit = within & (rng.random(n) < spec.overlap_p)
        noise = rng.integers(0, spec.num_superclasses, size=n)
        return np.where(oracle | hit, ys, noise).astype(np.intp)
    raise TypeError(f"unknown expert spec {type(spec).__name__}")


def expert_correctness_prob(spec: ExpertSpec, y_dist: np.ndarray,
                            subclass: int | None = None) -> float:
    """Exact P(prediction = label) given the label posterior at a point."""
    y_dist = np.asarray(y_dist, dtype=np.float64)
    if isinstance(spec, UniformCorrectness):
        return float(spec.q)
    if isinstance(spec, OracleClasses):
        k = spec.num_classes
        base = spec.overlap_p + (1.0 - spec.overlap_p) / k
        per_class = np.array([1.0 if c in spec.oracle_set else base
                              for c in range(k)])
        return float(per_class @ y_dist)
    if isinstance(spec, HierarchicalOracle):
        if subclass is None:
            raise ValueError("hierarchical experts need the subclass")
        if int(subclass) in spec.oracle_subclasses:
            return 1.0
        k = spec.num_superclasses
        if spec.super_of(subclass) in spec.within_superclasses:
            return float(spec.overlap_p + (1.0 - spec.overlap_p) / k)
        return 1.0 / k
    raise TypeError(f"unknown expert spec {type(spec).__name__}")


def sample_context_set(spec: ExpertSpec, pool: Dataset, b: int,
                       rng: np.random.Generator) -> ContextSet:
    """Draw B pool points without replacement and annotate them."""
    if b == 0:
        return ContextSet.empty(pool.dim, spec.expert_id)
    if b > len(pool):
        raise ValueError(f"context size {b} exceeds pool size {len(pool)}")
    idx = rng.choice(len(pool), size=b, replace=False)
    ys = pool.y[idx]
    subs = None if pool.subclass is None else pool.subclass[idx]
    ms = expert_predict_batch(spec, ys, subs, rng)
    return ContextSet(pool.x[idx], ys, ms, spec.expert_id, subs)


def population_to_json(pop: list[ExpertSpec]) -> str:
    """Serialization for run reproducibility records."""
    items = []
    for spec in pop:
        d = {"expert_id": spec.expert_id, "seed": spec.seed}
        if isinstance(spec, UniformCorrectness):
            d.update(kind="uniform", q=spec.q, num_classes=spec.num_classes)
        elif isinstance(spec, OracleClasses):
            d.update(kind="oracle", oracle_set=sorted(spec.oracle_set),
                     overlap_p=spec.overlap_p, num_classes=spec.num_classes)
        else:
            d.update(kind="hierarchical",
                     oracle_subclasses=sorted(spec.oracle_subclasses),
                     within_superclasses=sorted(spec.within_superclasses),
                     overlap_p=spec.overlap_p,
                     num_superclasses=spec.num_superclasses,
                     subclasses_per_super=spec.subclasses_per_super)
        items.append(d)
    return json.dumps(items, indent=2, sort_keys=True)


def population_from_json(text: str) -> list[ExpertSpec]:
    pop: list[ExpertSpec] = []
    for d in json.loads(text):
        kind = d["kind"]
        if kind == "uniform":
            pop.append(UniformCorrectness(d["q"], d["num_classes"],
                                          d["expert_id"], d["seed"]))
        elif kind == "oracle":
            pop.append(OracleClasses(frozenset(d["oracle_set"]), d["overlap_p"],
                                     d["num_classes"], d["expert_id"], d["seed"]))
        elif kind == "hierarchical":
            pop.append(HierarchicalOracle(frozenset(d["oracle_subclasses"]),
                                          frozenset(d["within_superclasses"]),
                                          d["overlap_p"], d["num_superclasses"],
                                          d["subclasses_per_super"],
                                          d["expert_id"], d["seed"]))
        else:
            raise ValueError(f"unknown expert kind {kind!r}")
    return pop
