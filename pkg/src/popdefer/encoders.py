"""Context-set encoders producing per-expert representations.

Each demonstration (x, y, m) becomes a point embedding: extracted input
features concatenated with learned label and prediction embeddings, fused
by an MLP.  A set representation is either the mean of the point
embeddings or, in the attentive variant, a self-attention pass followed by
cross-attention against the query point.  No positional encodings are used
anywhere: context sets are unordered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ShapeError, Tape, Tensor, broadcast_to, concat,
                       softmax, take_rows)
from .experts import ContextSet
from .nn import Mlp, init_mlp, mlp_apply


@dataclass
class AttentionParams:
    """One multi-head scaled-dot-product attention block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self) -> None:
        d = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise ShapeError("attention projections must be square and equal")
        if d % self.heads != 0:
            raise ShapeError(f"head count {self.heads} must divide dim {d}")

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def init_attention(dim: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    bound = 1.0 / np.sqrt(dim)
    mk = lambda: rng.uniform(-bound, bound, size=(dim, dim))
    return AttentionParams(mk(), mk(), mk(), mk(), heads)


@dataclass
class EncoderParams:
    """Point-embedding pathway plus optional attention blocks."""

    label_embed: np.ndarray       # (K, embed_dim)
    pred_embed: np.ndarray        # (K, embed_dim)
    fusion: Mlp                   # feat+2*embed -> embed_dim
    embed_dim: int
    self_attn: AttentionParams | None = None
    cross_attn: AttentionParams | None = None
    query_proj: Mlp | None = None  # feat -> embed_dim, attentive variant only
    train_feature_pathway: bool = False

    @property
    def attentive(self) -> bool:
        return self.cross_attn is not None

    def named_arrays(self, prefix: str = "encoder") -> dict[str, np.ndarray]:
        out = {f"{prefix}.label_embed": self.label_embed,
               f"{prefix}.pred_embed": self.pred_embed}
        out.update(self.fusion.named_arrays(f"{prefix}.fusion"))
        if self.self_attn is not None:
            out.update(self.self_attn.named_arrays(f"{prefix}.self_attn"))
        if self.cross_attn is not None:
            out.update(self.cross_attn.named_arrays(f"{prefix}.cross_attn"))
        if self.query_proj is not None:
            out.update(self.query_proj.named_arrays(f"{prefix}.query_proj"))
        return out


@dataclass
class ExpertRepresentation:
    vector: np.ndarray
    provenance: str  # mean-pool | cross-attention | zero/missing

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("representation must be finite")


def init_encoder(feat_dim: int, num_classes: int, embed_dim: int,
                 fusion_layers: int, rng: np.random.Generator,
                 attention: bool = False, heads: int = 8,
                 train_feature_pathway: bool = False) -> EncoderParams:
    bound = 1.0 / np.sqrt(num_classes)
    label_embed = rng.uniform(-bound, bound, size=(num_classes, embed_dim))
    pred_embed = rng.uniform(-bound, bound, size=(num_classes, embed_dim))
    dims = [feat_dim + 2 * embed_dim] + [embed_dim] * max(fusion_layers, 1)
    fusion = init_mlp(dims, rng)
    enc = EncoderParams(label_embed, pred_embed, fusion, embed_dim,
                        train_feature_pathway=train_feature_pathway)
    if attention:
        enc.self_attn = init_attention(embed_dim, heads, rng)
        enc.cross_attn = init_attention(embed_dim, heads, rng)
        enc.query_proj = init_mlp([feat_dim, embed_dim], rng)
    return enc


def embed_points(enc: EncoderParams, feats: Tensor | np.ndarray,
                 ys: np.ndarray, ms: np.ndarray,
                 tape: Tape | None) -> Tensor:
    """Embed a stack of demonstrations into (n, embed_dim)."""
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    ys = np.asarray(ys, dtype=np.intp)
    ms = np.asarray(ms, dtype=np.intp)
    le = tape.watch(enc.label_embed) if tape is not None else Tensor(enc.label_embed)
    pe = tape.watch(enc.pred_embed) if tape is not None else Tensor(enc.pred_embed)
    fused_in = concat([feats, take_rows(le, ys), take_rows(pe, ms)], axis=1)
    return mlp_apply(enc.fusion, fused_in, tape)


def mean_pool(embeddings: Tensor) -> Tensor:
    """Permutation-invariant average over the set axis (second-to-last)."""
    if embeddings.shape[-2] == 0:
        raise ValueError("cannot pool an empty context; use the zero "
                         "representation for missing contexts")
    return embeddings.mean(axis=-2)


def multi_head_attention(params: AttentionParams, queries: Tensor,
                         keys: Tensor, values: Tensor,
                         tape: Tape | None,
                         return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    Accepts (..., n, D) stacks; weights per query sum to 1 per head.
    """
    d = params.wq.shape[0]
    h = params.heads
    dh = d // h
    wq = tape.watch(params.wq) if tape is not None else Tensor(params.wq)
    wk = tape.watch(params.wk) if tape is not None else Tensor(params.wk)
    wv = tape.watch(params.wv) if tape is not None else Tensor(params.wv)
    wo = tape.watch(params.wo) if tape is not None else Tensor(params.wo)

    def split_heads(t: Tensor) -> Tensor:
        # (..., n, D) -> (..., H, n, dh)
        n = t.shape[-2]
        return t.reshape(t.shape[:-1] + (h, dh)).swapaxes(-3, -2)

    q = split_heads(queries @ wq)
    k = split_heads(keys @ wk)
    v = split_heads(values @ wv)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    mixed = weights @ v                              # (..., H, n, dh)
    merged = mixed.swapaxes(-3, -2)                  # (..., n, H, dh)
    merged = merged.reshape(merged.shape[:-2] + (d,))
    out = merged @ wo
    if return_weights:
        return out, weights
    return out


def attentive_encode(enc: EncoderParams, ctx_embeddings: Tensor,
                     query_feats: Tensor | np.ndarray,
                     tape: Tape | None,
                     return_weights: bool = False):
    """Self-attention over the context then cross-attention from queries.

    ``ctx_embeddings``: (B, D) or (E, B, D); ``query_feats``: (n, feat_dim).
    Returns (n, D) or (E, n, D) representations, one per query point.
    """
    if enc.self_attn is None or enc.cross_attn is None or enc.query_proj is None:
        raise ValueError("encoder was built without attention blocks")
    if ctx_embeddings.shape[-2] == 0:
        raise ValueError("cannot attend over an empty context")
    attended = multi_head_attention(enc.self_attn, ctx_embeddings,
                                    ctx_embeddings, ctx_embeddings, tape)
    q = mlp_apply(enc.query_proj, query_feats, tape)      # (n, D)
    if ctx_embeddings.ndim == 3:
        q = broadcast_to(q.reshape((1,) + q.shape),
                         (ctx_embeddings.shape[0],) + q.shape)
    return multi_head_attention(enc.cross_attn, q, attended, attended, tape,
                                return_weights=return_weights)


def attentive_paired(enc: EncoderParams, ctx_embeddings: Tensor,
                     query_feats: Tensor | np.ndarray,
                     tape: Tape | None) -> Tensor:
    """Attentive encoding where row i of the queries owns context slab i.

    ``ctx_embeddings``: (P, B, D); ``query_feats``: (P, feat_dim).  Returns
    one (P, D) representation, pairing each query with its own context.
    """
    if enc.self_attn is None or enc.cross_attn is None or enc.query_proj is None:
        raise ValueError("encoder was built without attention blocks")
    attended = multi_head_attention(enc.self_attn, ctx_embeddings,
                                    ctx_embeddings, ctx_embeddings, tape)
    q = mlp_apply(enc.query_proj, query_feats, tape)
    q = q.reshape(q.shape[0], 1, q.shape[1])
    out = multi_head_attention(enc.cross_attn, q, attended, attended, tape)
    return out.reshape(out.shape[0], out.shape[2])


def missing_context_representation(enc: EncoderParams) -> ExpertRepresentation:
    return ExpertRepresentation(np.zeros(enc.embed_dim), "zero/missing")


def encode_expert(enc: EncoderParams, context: ContextSet,
                  feature_fn, query_x: np.ndarray | None = None
                  ) -> ExpertRepresentation:
    """Evaluation-path encoding of one expert's context set.

    ``feature_fn`` maps raw inputs (n, d) to extracted features; the
    attentive variant additionally needs the query point.
    """
    if len(context) == 0:
        return missing_context_representation(enc)
    feats = feature_fn(context.xs)
    emb = embed_points(enc, feats, context.ys, context.ms, tape=None)
    if enc.attentive:
        if query_x is None:
            raise ValueError("attentive encoding needs the query point")
        qf = feature_fn(np.atleast_2d(query_x))
        rep = attentive_encode(enc, emb, qf, tape=None)
        return ExpertRepresentation(rep.data[0], "cross-attention")
    return ExpertRepresentation(mean_pool(emb).data, "mean-pool")
