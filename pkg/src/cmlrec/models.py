"""Scoring heads and analytic gradients for the five model kinds.

All heads measure user-item affinity as a squared Euclidean distance between
a (possibly translated) user point and the item point:

* ``cml``      : plain distance, no translation.
* ``lrml``     : translation read from a key/value relation memory addressed
                 by the user-item joint embedding.
* ``adacml``   : translation built as an attention-weighted sum of the
                 user's historical item vectors.
* ``hlr``      : translation built hierarchically: candidate-to-history
                 item relations come from the relation memory, then a user
                 attention module combines them.
* ``hlr++``    : ``hlr`` plus a symmetric item attention module over the
                 candidate item's user history, backed by a second memory.

Single-pair scoring (:func:`score`) is written with the small composable
operations below; training and ranking use the stacked batch code
(:func:`backward`, :func:`batch_distances`), and the two paths are held
together by tests.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .parameters import (
    ITEM_REL_KEYS,
    ITEM_REL_MEMORIES,
    ITEM_VECS,
    REL_KEYS,
    REL_MEMORIES,
    USER_VECS,
    ParameterStore,
    SparseGradients,
)

_EMPTY = np.empty(0, dtype=np.int64)


class ModelKind(enum.Enum):
    CML = "cml"
    LRML = "lrml"
    ADACML = "adacml"
    HLR = "hlr"
    HLRPP = "hlr++"

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        norm = text.strip().lower().replace("_", "").replace("-", "")
        aliases = {
            "cml": cls.CML,
            "lrml": cls.LRML,
            "adacml": cls.ADACML,
            "hlr": cls.HLR,
            "hlr++": cls.HLRPP,
            "hlrpp": cls.HLRPP,
            "hlrplusplus": cls.HLRPP,
        }
        try:
            return aliases[norm]
        except KeyError:
            raise ValueError(f"unknown model kind {text!r}; expected one of {[k.value for k in cls]}") from None

    @property
    def uses_memory(self) -> bool:
        return self in (ModelKind.LRML, ModelKind.HLR, ModelKind.HLRPP)

    @property
    def uses_history(self) -> bool:
        return self in (ModelKind.ADACML, ModelKind.HLR, ModelKind.HLRPP)

    @property
    def uses_item_memory(self) -> bool:
        return self is ModelKind.HLRPP


class NonFiniteScoreError(FloatingPointError):
    """A forward pass produced NaN/Inf; identifies the offending instance."""

    def __init__(self, index: int, user: int, item: int):
        super().__init__(f"non-finite distance for instance {index} (user {user}, item {item})")
        self.index = index
        self.user = user
        self.item = item


@dataclass(frozen=True)
class RelationContext:
    """One (user, item) pair plus the attention support sets.

    ``history`` holds train-set items of the user (candidate item excluded,
    capped); ``item_history`` holds train-set users of the item (scored user
    excluded, capped) and is only consumed by the ``hlr++`` head.
    """

    user: int
    item: int
    history: np.ndarray = field(default_factory=lambda: _EMPTY)
    item_history: np.ndarray = field(default_factory=lambda: _EMPTY)


@dataclass
class ScoreBreakdown:
    """Distance plus the intermediate attention traces of one scored pair."""

    distance: float
    relation: np.ndarray
    key_weights: np.ndarray | None = None
    history_weights: np.ndarray | None = None
    item_key_weights: np.ndarray | None = None
    item_history_weights: np.ndarray | None = None


@dataclass
class TripletBatch:
    """Positive/negative context pairs of one training batch.

    ``pos[i]`` and ``neg[i]`` share the user and the history draw; they
    differ in the scored item (and its item history).
    """

    pos: list[RelationContext]
    neg: list[RelationContext]

    def __post_init__(self) -> None:
        if len(self.pos) != len(self.neg):
            raise ValueError("positive and negative context lists must have equal length")

    def __len__(self) -> int:
        return len(self.pos)


# ---------------------------------------------------------------------------
# Small composable operations
# ---------------------------------------------------------------------------


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max subtraction; cannot overflow for finite input."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over the unmasked entries; fully-masked rows yield zeros."""
    guarded = np.where(mask, logits, -np.inf)
    mx = np.max(guarded, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    ex = np.where(mask, np.exp(guarded - mx), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    return np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)


def joint_embedding(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Elementwise (Hadamard) product of two same-dimension vectors."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise ValueError(f"dimension mismatch: {q1.shape} vs {q2.shape}")
    return q1 * q2


def key_attention(s: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Probability weights over relation keys: softmax of the key logits."""
    if keys.shape[1] != s.shape[-1]:
        raise ValueError(f"dimension mismatch: joint embedding {s.shape} vs keys {keys.shape}")
    return stable_softmax(keys @ s)


def relation_vector(weights: np.ndarray, memories: np.ndarray) -> np.ndarray:
    """Convex combination of memory rows under probability ``weights``."""
    return weights @ memories


def item_item_relation(v1: int, v2: int, store: ParameterStore) -> np.ndarray:
    """Latent relation vector between two items; symmetric in (v1, v2)."""
    s = joint_embedding(store.item_vecs[v1], store.item_vecs[v2])
    return relation_vector(key_attention(s, store.rel_keys), store.rel_memories)


def _memory_relations(
    query_rows: np.ndarray, anchor: np.ndarray, keys: np.ndarray, memories: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Relation vectors between ``anchor`` and each row of ``query_rows``.

    Returns (relations (h, d), key weights (h, N)).
    """
    s = anchor[None, :] * query_rows
    w = stable_softmax(s @ keys.T, axis=-1)
    return w @ memories, w


def user_relation(ctx: RelationContext, store: ParameterStore) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """User-side translation vector plus its attention trace.

    Builds the candidate-to-history item relations, attends over them with
    the user vector as query, and returns (relation, key_weights (h, N),
    history_weights (h,)). An empty history yields the zero vector (the
    plain-metric fallback).
    """
    dim = store.dim
    if len(ctx.history) == 0:
        return np.zeros(dim), np.zeros((0, store.n_relations)), np.zeros(0)
    rels, key_w = _memory_relations(
        store.item_vecs[ctx.history], store.item_vecs[ctx.item], store.rel_keys, store.rel_memories
    )
    logits = rels @ store.user_vecs[ctx.user]
    alpha = stable_softmax(logits)
    return alpha @ rels, key_w, alpha


def item_relation(ctx: RelationContext, store: ParameterStore) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Item-side translation vector plus its attention trace.

    Symmetric to :func:`user_relation`: user-user relations over the item's
    user history from the second memory, attended with the item vector as
    query. Empty item history yields the zero vector.
    """
    if store.item_rel_keys is None or store.item_rel_memories is None:
        raise ValueError("item-side relation requested but the store has no item memory")
    dim = store.dim
    if len(ctx.item_history) == 0:
        return np.zeros(dim), np.zeros((0, store.n_relations)), np.zeros(0)
    rels, key_w = _memory_relations(
        store.user_vecs[ctx.item_history], store.user_vecs[ctx.user], store.item_rel_keys, store.item_rel_memories
    )
    logits = rels @ store.item_vecs[ctx.item]
    beta = stable_softmax(logits)
    return beta @ rels, key_w, beta


def score(ctx: RelationContext, kind: ModelKind, store: ParameterStore) -> ScoreBreakdown:
    """Score one (user, item) pair: squared distance between the translated
    user point and the item point, with attention traces."""
    pu = store.user_vecs[ctx.user]
    qv = store.item_vecs[ctx.item]
    if pu.shape != qv.shape:
        raise ValueError(f"dimension mismatch: user {pu.shape} vs item {qv.shape}")
    key_w = hist_w = item_key_w = item_hist_w = None
    if kind is ModelKind.CML:
        relation = np.zeros(store.dim)
    elif kind is ModelKind.LRML:
        s = joint_embedding(pu, qv)
        key_w = key_attention(s, store.rel_keys)
        relation = relation_vector(key_w, store.rel_memories)
    elif kind is ModelKind.ADACML:
        if len(ctx.history) == 0:
            relation = np.zeros(store.dim)
            hist_w = np.zeros(0)
        else:
            hist_vecs = store.item_vecs[ctx.history]
            hist_w = stable_softmax(hist_vecs @ qv)
            relation = hist_w @ hist_vecs
    elif kind is ModelKind.HLR:
        relation, key_w, hist_w = user_relation(ctx, store)
    elif kind is ModelKind.HLRPP:
        rel_user, key_w, hist_w = user_relation(ctx, store)
        rel_item, item_key_w, item_hist_w = item_relation(ctx, store)
        relation = rel_user + rel_item
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unhandled model kind {kind}")
    diff = pu + relation - qv
    return ScoreBreakdown(
        distance=float(diff @ diff),
        relation=relation,
        key_weights=key_w,
        history_weights=hist_w,
        item_key_weights=item_key_w,
        item_history_weights=item_hist_w,
    )


def triplet_margin_loss(d_pos: float, d_neg: float, margin: float) -> float:
    """Hinge on the distance gap: max(0, d_pos - d_neg + margin)."""
    return max(0.0, d_pos - d_neg + margin)


# ---------------------------------------------------------------------------
# Stacked (batched) forward/backward
# ---------------------------------------------------------------------------


@dataclass
class _Stacked:
    """Padded index arrays for a batch of contexts."""

    users: np.ndarray  # (B,)
    items: np.ndarray  # (B,)
    hist: np.ndarray  # (B, H) padded with 0
    hist_mask: np.ndarray  # (B, H)
    ihist: np.ndarray | None  # (B, J) padded with 0
    ihist_mask: np.ndarray | None


def _pad(index_lists: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(a) for a in index_lists), default=0)
    width = max(width, 1)
    padded = np.zeros((len(index_lists), width), dtype=np.int64)
    mask = np.zeros((len(index_lists), width), dtype=bool)
    for i, arr in enumerate(index_lists):
        padded[i, : len(arr)] = arr
        mask[i, : len(arr)] = True
    return padded, mask


def _stack(contexts: Sequence[RelationContext], kind: ModelKind) -> _Stacked:
    users = np.fromiter((c.user for c in contexts), dtype=np.int64, count=len(contexts))
    items = np.fromiter((c.item for c in contexts), dtype=np.int64, count=len(contexts))
    if kind.uses_history:
        hist, hist_mask = _pad([c.history for c in contexts])
    else:
        hist = np.zeros((len(contexts), 1), dtype=np.int64)
        hist_mask = np.zeros((len(contexts), 1), dtype=bool)
    ihist = ihist_mask = None
    if kind.uses_item_memory:
        ihist, ihist_mask = _pad([c.item_history for c in contexts])
    return _Stacked(users, items, hist, hist_mask, ihist, ihist_mask)


@dataclass
class _AttentionCache:
    """Intermediates of one memory-attention block (user or item side)."""

    support: np.ndarray  # (B, H) indices into the embedding table
    mask: np.ndarray  # (B, H)
    emb: np.ndarray  # (B, H, d) gathered support embeddings
    anchor: np.ndarray  # (B, d) the vector forming joint embeddings
    query: np.ndarray  # (B, d) the attention query vector
    s: np.ndarray  # (B, H, d) joint embeddings
    key_w: np.ndarray  # (B, H, N)
    rels: np.ndarray  # (B, H, d)
    alpha: np.ndarray  # (B, H)
    relation: np.ndarray  # (B, d)


def _attention_forward(
    support: np.ndarray,
    mask: np.ndarray,
    table: np.ndarray,
    anchor: np.ndarray,
    query: np.ndarray,
    keys: np.ndarray,
    memories: np.ndarray,
) -> _AttentionCache:
    """Hierarchical relation block: memory relations between ``anchor`` and
    each support row, then attention with ``query``. Shapes: support (B, H),
    anchor/query (B, d)."""
    batch, width = support.shape
    dim = table.shape[1]
    emb = table[support]  # (B,H,d)
    s = anchor[:, None, :] * emb
    logits = s.reshape(batch * width, dim) @ keys.T
    key_w = stable_softmax(logits, axis=-1)
    rels = (key_w @ memories).reshape(batch, width, dim)
    key_w = key_w.reshape(batch, width, -1)
    att_logits = np.einsum("bhd,bd->bh", rels, query, optimize=True)
    alpha = _masked_softmax(att_logits, mask)
    relation = np.einsum("bh,bhd->bd", alpha, rels, optimize=True)
    return _AttentionCache(support, mask, emb, anchor, query, s, key_w, rels, alpha, relation)


def _attention_backward(
    cache: _AttentionCache,
    g_relation: np.ndarray,
    keys: np.ndarray,
    memories: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backprop one attention block.

    Given dL/d(relation) returns (g_query, g_anchor, g_emb (B, H, d),
    g_keys, g_memories); g_emb is zero at masked slots.
    """
    batch, width, dim = cache.rels.shape
    g_alpha = np.einsum("bd,bhd->bh", g_relation, cache.rels, optimize=True)
    inner = (g_alpha * cache.alpha).sum(axis=1, keepdims=True)
    g_logits = cache.alpha * (g_alpha - inner)
    g_query = np.einsum("bh,bhd->bd", g_logits, cache.rels, optimize=True)
    g_rels = cache.alpha[:, :, None] * g_relation[:, None, :] + g_logits[:, :, None] * cache.query[:, None, :]
    g_rels_flat = g_rels.reshape(batch * width, dim)
    key_w_flat = cache.key_w.reshape(batch * width, -1)
    g_memories = key_w_flat.T @ g_rels_flat
    g_key_w = g_rels_flat @ memories.T
    inner_k = (g_key_w * key_w_flat).sum(axis=1, keepdims=True)
    g_key_logits = key_w_flat * (g_key_w - inner_k)
    s_flat = cache.s.reshape(batch * width, dim)
    g_keys = g_key_logits.T @ s_flat
    g_s = (g_key_logits @ keys).reshape(batch, width, dim)
    g_anchor = (g_s * cache.emb).sum(axis=1)
    g_emb = g_s * cache.anchor[:, None, :]
    return g_query, g_anchor, g_emb, g_keys, g_memories


@dataclass
class _ForwardCache:
    stacked: _Stacked
    pu: np.ndarray
    qv: np.ndarray
    diff: np.ndarray
    distances: np.ndarray
    # lrml
    s: np.ndarray | None = None
    key_w: np.ndarray | None = None
    # adacml
    hist_emb: np.ndarray | None = None
    alpha: np.ndarray | None = None
    # hlr / hlr++
    user_att: _AttentionCache | None = None
    item_att: _AttentionCache | None = None


def _forward_stacked(stacked: _Stacked, kind: ModelKind, store: ParameterStore) -> _ForwardCache:
    pu = store.user_vecs[stacked.users]
    qv = store.item_vecs[stacked.items]
    cache = _ForwardCache(stacked, pu, qv, diff=np.empty(0), distances=np.empty(0))
    relation = np.zeros_like(pu)
    if kind is ModelKind.LRML:
        cache.s = pu * qv
        cache.key_w = stable_softmax(cache.s @ store.rel_keys.T, axis=-1)
        relation = cache.key_w @ store.rel_memories
    elif kind is ModelKind.ADACML:
        cache.hist_emb = store.item_vecs[stacked.hist]
        logits = np.einsum("bhd,bd->bh", cache.hist_emb, qv, optimize=True)
        cache.alpha = _masked_softmax(logits, stacked.hist_mask)
        relation = np.einsum("bh,bhd->bd", cache.alpha, cache.hist_emb, optimize=True)
    elif kind in (ModelKind.HLR, ModelKind.HLRPP):
        cache.user_att = _attention_forward(
            stacked.hist, stacked.hist_mask, store.item_vecs, anchor=qv, query=pu,
            keys=store.rel_keys, memories=store.rel_memories,
        )
        relation = cache.user_att.relation
        if kind is ModelKind.HLRPP:
            assert stacked.ihist is not None and stacked.ihist_mask is not None
            if store.item_rel_keys is None or store.item_rel_memories is None:
                raise ValueError("hlr++ requires a store initialized with the item memory")
            cache.item_att = _attention_forward(
                stacked.ihist, stacked.ihist_mask, store.user_vecs, anchor=pu, query=qv,
                keys=store.item_rel_keys, memories=store.item_rel_memories,
            )
            relation = relation + cache.item_att.relation
    cache.diff = pu + relation - qv
    cache.distances = np.einsum("bd,bd->b", cache.diff, cache.diff, optimize=True)
    return cache


def _backward_stacked(
    cache: _ForwardCache, kind: ModelKind, store: ParameterStore, coeff: np.ndarray, grads: SparseGradients
) -> None:
    """Accumulate coeff[b] * d(distance_b)/d(params) into ``grads``."""
    stacked = cache.stacked
    g_diff = (2.0 * coeff)[:, None] * cache.diff
    g_pu = g_diff.copy()
    g_qv = -g_diff
    if kind is ModelKind.LRML:
        assert cache.s is not None and cache.key_w is not None
        g_rel = g_diff
        grads.add_dense(REL_MEMORIES, cache.key_w.T @ g_rel)
        g_key_w = g_rel @ store.rel_memories.T
        inner = (g_key_w * cache.key_w).sum(axis=1, keepdims=True)
        g_logits = cache.key_w * (g_key_w - inner)
        grads.add_dense(REL_KEYS, g_logits.T @ cache.s)
        g_s = g_logits @ store.rel_keys
        g_pu = g_pu + g_s * cache.qv
        g_qv = g_qv + g_s * cache.pu
    elif kind is ModelKind.ADACML:
        assert cache.hist_emb is not None and cache.alpha is not None
        g_rel = g_diff
        g_alpha = np.einsum("bd,bhd->bh", g_rel, cache.hist_emb, optimize=True)
        inner = (g_alpha * cache.alpha).sum(axis=1, keepdims=True)
        g_logits = cache.alpha * (g_alpha - inner)
        g_qv = g_qv + np.einsum("bh,bhd->bd", g_logits, cache.hist_emb, optimize=True)
        g_hist = cache.alpha[:, :, None] * g_rel[:, None, :] + g_logits[:, :, None] * cache.qv[:, None, :]
        mask = stacked.hist_mask
        grads.add_rows(ITEM_VECS, stacked.hist[mask], g_hist[mask])
    elif kind in (ModelKind.HLR, ModelKind.HLRPP):
        att = cache.user_att
        assert att is not None
        g_query, g_anchor, g_emb, g_keys, g_memories = _attention_backward(
            att, g_diff, store.rel_keys, store.rel_memories
        )
        g_pu = g_pu + g_query
        g_qv = g_qv + g_anchor
        grads.add_dense(REL_KEYS, g_keys)
        grads.add_dense(REL_MEMORIES, g_memories)
        mask = att.mask
        grads.add_rows(ITEM_VECS, att.support[mask], g_emb[mask])
        if kind is ModelKind.HLRPP:
            iatt = cache.item_att
            assert iatt is not None and store.item_rel_keys is not None and store.item_rel_memories is not None
            g_query_i, g_anchor_i, g_emb_i, g_keys_i, g_memories_i = _attention_backward(
                iatt, g_diff, store.item_rel_keys, store.item_rel_memories
            )
            g_qv = g_qv + g_query_i
            g_pu = g_pu + g_anchor_i
            grads.add_dense(ITEM_REL_KEYS, g_keys_i)
            grads.add_dense(ITEM_REL_MEMORIES, g_memories_i)
            imask = iatt.mask
            grads.add_rows(USER_VECS, iatt.support[imask], g_emb_i[imask])
    grads.add_rows(USER_VECS, stacked.users, g_pu)
    grads.add_rows(ITEM_VECS, stacked.items, g_qv)


def batch_distances(contexts: Sequence[RelationContext], kind: ModelKind, store: ParameterStore) -> np.ndarray:
    """Distances of many contexts at once; agrees with :func:`score`."""
    if len(contexts) == 0:
        return np.zeros(0)
    cache = _forward_stacked(_stack(contexts, kind), kind, store)
    return cache.distances


def _check_finite_distances(distances: np.ndarray, contexts: Sequence[RelationContext]) -> None:
    finite = np.isfinite(distances)
    if not finite.all():
        idx = int(np.argmin(finite))
        ctx = contexts[idx]
        raise NonFiniteScoreError(idx, ctx.user, ctx.item)


def backward(
    batch: TripletBatch,
    kind: ModelKind,
    store: ParameterStore,
    margin: float,
    *,
    chunk_size: int = 256,
) -> tuple[SparseGradients, float]:
    """Exact subgradients of the summed triplet hinge loss over a batch.

    Satisfied triplets (hinge exactly 0 included) contribute zero gradient.
    Returns the accumulated sparse gradients and the summed batch loss.
    Raises :class:`NonFiniteScoreError` naming the offending triplet if a
    forward pass degenerates.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    grads = SparseGradients(store)
    total = 0.0
    for start in range(0, len(batch), chunk_size):
        pos = batch.pos[start : start + chunk_size]
        neg = batch.neg[start : start + chunk_size]
        cache_pos = _forward_stacked(_stack(pos, kind), kind, store)
        cache_neg = _forward_stacked(_stack(neg, kind), kind, store)
        _check_finite_distances(cache_pos.distances, pos)
        _check_finite_distances(cache_neg.distances, neg)
        slack = cache_pos.distances - cache_neg.distances + margin
        active = slack > 0.0
        total += float(slack[active].sum())
        if active.any():
            coeff = active.astype(np.float64)
            _backward_stacked(cache_pos, kind, store, coeff, grads)
            _backward_stacked(cache_neg, kind, store, -coeff, grads)
    return grads, total


def candidate_distances(
    user: int,
    candidates: np.ndarray,
    kind: ModelKind,
    store: ParameterStore,
    history: np.ndarray | None = None,
    item_histories: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Distances from one user to many candidate items.

    ``history`` is the user's (already capped) train history shared by every
    candidate; ``item_histories`` supplies one user list per candidate for
    the ``hlr++`` head.
    """
    if history is None:
        history = _EMPTY
    contexts = []
    for i, v in enumerate(candidates):
        ih = item_histories[i] if item_histories is not None else _EMPTY
        contexts.append(RelationContext(user=user, item=int(v), history=history, item_history=ih))
    return batch_distances(contexts, kind, store)
