"""The classifier+rejector model: scoring, decision rules, persistence.

Variants share one trunk.  The classifier head reads trunk features; the
rejector head reads trunk features, concatenated with an expert
representation for the context-conditioned variants.  The decision rule
defers whenever a reject score reaches the best class score (ties defer).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, broadcast_to, concat
from .encoders import (EncoderParams, AttentionParams, attentive_encode,
                       embed_points, mean_pool, missing_context_representation)
from .experts import ContextSet
from .nn import DenseLayer, Mlp, mlp_apply

VARIANTS = ("single", "multi", "pop-avg", "pop-np", "pop-np-attn")
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class DeferralModel:
    variant: str
    num_classes: int
    trunk: Mlp
    classifier: Mlp
    rejector: Mlp
    encoder: EncoderParams | None = None
    num_experts: int | None = None   # fixed panel size, multi variant only

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in ("pop-np", "pop-np-attn") and self.encoder is None:
            raise ValueError(f"variant {self.variant} needs an encoder")
        if self.variant == "multi" and not self.num_experts:
            raise ValueError("multi variant needs the expert panel size")

    # -- parameter bookkeeping -------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.trunk.named_arrays("trunk"))
        out.update(self.classifier.named_arrays("classifier"))
        out.update(self.rejector.named_arrays("rejector"))
        if self.encoder is not None:
            out.update(self.encoder.named_arrays("encoder"))
        return out

    def base_arrays(self) -> dict[str, np.ndarray]:
        """Trunk parameters: the group that takes SGD plus weight decay."""
        return self.trunk.named_arrays("trunk")

    def head_arrays(self) -> dict[str, np.ndarray]:
        """Classifier head, rejector, encoder: the Adam group."""
        out = {}
        out.update(self.classifier.named_arrays("classifier"))
        out.update(self.rejector.named_arrays("rejector"))
        if self.encoder is not None:
            out.update(self.encoder.named_arrays("encoder"))
        return out

    def copy(self) -> "DeferralModel":
        enc = None
        if self.encoder is not None:
            e = self.encoder
            enc = EncoderParams(
                e.label_embed.copy(), e.pred_embed.copy(), e.fusion.copy(),
                e.embed_dim,
                None if e.self_attn is None else AttentionParams(
                    e.self_attn.wq.copy(), e.self_attn.wk.copy(),
                    e.self_attn.wv.copy(), e.self_attn.wo.copy(),
                    e.self_attn.heads),
                None if e.cross_attn is None else AttentionParams(
                    e.cross_attn.wq.copy(), e.cross_attn.wk.copy(),
                    e.cross_attn.wv.copy(), e.cross_attn.wo.copy(),
                    e.cross_attn.heads),
                None if e.query_proj is None else e.query_proj.copy(),
                e.train_feature_pathway)
        return DeferralModel(self.variant, self.num_classes, self.trunk.copy(),
                             self.classifier.copy(), self.rejector.copy(),
                             enc, self.num_experts)

    # -- forward pieces ----------------------------------------------------

    def features(self, x, tape: Tape | None = None) -> Tensor:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64)) \
            if not isinstance(x, Tensor) else x
        return mlp_apply(self.trunk, x, tape)

    def class_scores(self, feats, tape: Tape | None = None) -> Tensor:
        return mlp_apply(self.classifier, feats, tape)

    def reject_scores(self, feats: Tensor, psi: Tensor | None,
                      tape: Tape | None = None) -> Tensor:
        """(n, 1) reject score, or (n, J) for the multi variant.

        ``psi`` is required (possibly the zero representation) for the
        context-conditioned variants and must be (n, embed_dim).
        """
        if self.variant in ("pop-np", "pop-np-attn"):
            if psi is None:
                raise ValueError("context-conditioned rejector needs psi")
            feats = concat([feats, psi], axis=1)
        return mlp_apply(self.rejector, feats, tape)


@dataclass
class Decision:
    action: str                 # "predict" | "defer"
    class_pred: int
    expert: int | None
    margin: float               # best reject score minus best class score
    scores: np.ndarray          # class scores then reject score(s)

    def deferred(self) -> bool:
        return self.action == "defer"


def decide(class_logits: np.ndarray, reject_logits: np.ndarray,
           variant: str) -> Decision:
    """Shift-invariant decision: defer iff a reject score reaches the top
    class score; among experts, highest score wins with lowest-index ties."""
    class_logits = np.asarray(class_logits, dtype=np.float64).reshape(-1)
    reject_logits = np.asarray(reject_logits, dtype=np.float64).reshape(-1)
    class_pred = int(np.argmax(class_logits))
    best = float(class_logits[class_pred])
    margin = float(reject_logits.max() - best)
    defer = margin >= 0.0
    expert = None
    if variant == "multi" and defer:
        expert = int(np.argmax(reject_logits))
    return Decision("defer" if defer else "predict", class_pred, expert,
                    margin, np.concatenate([class_logits, reject_logits]))


def score(model: DeferralModel, x: np.ndarray,
          context: ContextSet | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-path scores for one input; deterministic given inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = model.features(x)
    cls = model.class_scores(feats).data
    if model.variant in ("pop-np", "pop-np-attn"):
        psi = expert_representation(model, context, x)
        rej = model.reject_scores(feats, Tensor(psi[None, :])).data
    else:
        rej = model.reject_scores(feats, None).data
    return cls[0], rej[0]


def expert_representation(model: DeferralModel, context: ContextSet | None,
                          query_x: np.ndarray) -> np.ndarray:
    """Mean-pool or cross-attention representation; zeros when the context
    is missing or empty."""
    enc = model.encoder
    if enc is None:
        raise ValueError("model has no encoder")
    if context is None or len(context) == 0:
        return missing_context_representation(enc).vector
    feats = model.features(context.xs).data
    emb = embed_points(enc, feats, context.ys, context.ms, tape=None)
    if enc.attentive:
        qf = model.features(np.atleast_2d(query_x))
        rep = attentive_encode(enc, emb, Tensor(qf.data), tape=None)
        return rep.data[0]
    return mean_pool(emb).data


def decide_for(model: DeferralModel, x: np.ndarray,
               context: ContextSet | None = None) -> Decision:
    cls, rej = score(model, x, context)
    return decide(cls, rej, model.variant)


def budget_deferral(decisions: list[Decision], budget: float) -> list[Decision]:
    """Keep only the floor(budget*n) largest-margin deferrals.

    Everything else reverts to the classifier's prediction.  Selection is
    deterministic: margin descending, position ascending on ties.
    """
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must be in [0, 1]")
    n = len(decisions)
    allowed = int(np.floor(budget * n))
    deferred = [(i, d) for i, d in enumerate(decisions) if d.deferred()]
    deferred.sort(key=lambda item: (-item[1].margin, item[0]))
    keep = {i for i, _ in deferred[:allowed]}
    out = []
    for i, d in enumerate(decisions):
        if d.deferred() and i not in keep:
            out.append(Decision("predict", d.class_pred, None, d.margin,
                                d.scores))
        else:
            out.append(d)
    return out


def build_model(variant: str, num_classes: int, input_dim: int,
                rng: np.random.Generator,
                trunk_hidden: tuple[int, ...] = (),
                rejector_hidden: tuple[int, ...] = (64,),
                embed_dim: int = 128, fusion_layers: int = 3,
                heads: int = 8, num_experts: int | None = None,
                train_feature_pathway: bool = False) -> DeferralModel:
    """Assemble a model; an empty trunk means raw inputs are the features."""
    from .encoders import init_encoder
    from .nn import init_mlp

    trunk = Mlp([])
    feat_dim = input_dim
    if trunk_hidden:
        trunk = init_mlp([input_dim, *trunk_hidden], rng,
                         out_activation="relu")
        feat_dim = trunk_hidden[-1]
    classifier = init_mlp([feat_dim, num_classes], rng)
    encoder = None
    rej_in = feat_dim
    if variant in ("pop-np", "pop-np-attn"):
        encoder = init_encoder(feat_dim, num_classes, embed_dim, fusion_layers,
                               rng, attention=(variant == "pop-np-attn"),
                               heads=heads,
                               train_feature_pathway=train_feature_pathway)
        rej_in = feat_dim + embed_dim
    rej_out = num_experts if variant == "multi" else 1
    rejector = init_mlp([rej_in, *rejector_hidden, rej_out], rng)
    return DeferralModel(variant, num_classes, trunk, classifier, rejector,
                         encoder, num_experts)


# -- persistence ------------------------------------------------------------

def _mlp_meta(mlp: Mlp) -> list[str]:
    return [layer.activation for layer in mlp.layers]


def _rebuild_mlp(acts: list[str], arrays: dict[str, np.ndarray],
                 prefix: str) -> Mlp:
    layers = []
    for i, act in enumerate(acts):
        layers.append(DenseLayer(arrays[f"{prefix}.{i}.w"],
                                 arrays[f"{prefix}.{i}.b"], act))
    return Mlp(layers)


def save_checkpoint(model: DeferralModel, path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "num_classes": model.num_classes,
        "num_experts": model.num_experts,
        "trunk": _mlp_meta(model.trunk),
        "classifier": _mlp_meta(model.classifier),
        "rejector": _mlp_meta(model.rejector),
    }
    if model.encoder is not None:
        e = model.encoder
        header["encoder"] = {
            "embed_dim": e.embed_dim,
            "fusion": _mlp_meta(e.fusion),
            "heads": e.self_attn.heads if e.self_attn is not None else None,
            "attentive": e.attentive,
            "query_proj": _mlp_meta(e.query_proj) if e.query_proj else None,
            "train_feature_pathway": e.train_feature_pathway,
        }
    arrays = dict(model.named_arrays())
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> DeferralModel:
    try:
        with np.load(path) as payload:
            arrays = {k: payload[k].copy() for k in payload.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
    if "__header__" not in arrays:
        raise CheckpointError(f"{path} is missing the checkpoint header")
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported; "
            f"this build reads version {CHECKPOINT_VERSION}")
    encoder = None
    if "encoder" in header:
        meta = header["encoder"]
        fusion = _rebuild_mlp(meta["fusion"], arrays, "encoder.fusion")
        encoder = EncoderParams(arrays["encoder.label_embed"],
                                arrays["encoder.pred_embed"], fusion,
                                meta["embed_dim"],
                                train_feature_pathway=meta["train_feature_pathway"])
        if meta["attentive"]:
            encoder.self_attn = AttentionParams(
                arrays["encoder.self_attn.wq"], arrays["encoder.self_attn.wk"],
                arrays["encoder.self_attn.wv"], arrays["encoder.self_attn.wo"],
                meta["heads"])
            encoder.cross_attn = AttentionParams(
                arrays["encoder.cross_attn.wq"], arrays["encoder.cross_attn.wk"],
                arrays["encoder.cross_attn.wv"], arrays["encoder.cross_attn.wo"],
                meta["heads"])
            encoder.query_proj = _rebuild_mlp(meta["query_proj"], arrays,
                                              "encoder.query_proj")
    return DeferralModel(header["variant"], header["num_classes"],
                         _rebuild_mlp(header["trunk"], arrays, "trunk"),
                         _rebuild_mlp(header["classifier"], arrays, "classifier"),
                         _rebuild_mlp(header["rejector"], arrays, "rejector"),
                         encoder, header["num_experts"])
