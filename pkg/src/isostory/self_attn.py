"""Extended self-attention over image tokens plus stored character references.

Each old character's reference columns are reachable only from rows inside
that character's mask (additive -inf elsewhere). Rows inside the mask then
have their image-column weights scaled by the normalized cross-attention map
and are renormalized, which shifts mass toward the reference tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bank import ConcatLayout, ReferenceEntry
from .masks import CharacterMask
from .numeric import (
    NEG_INF,
    AttentionTensors,
    as_matrix,
    attention_scores,
    matmul,
    row_sums,
    scaled_dot_attention,
    softmax_rows,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReweightVector:
    character_id: int
    values: np.ndarray


def build_isolation_mask(layout: ConcatLayout, masks: Mapping[int, CharacterMask]) -> np.ndarray:
    """Additive mask of shape (h*w, h*w + sum n_m) with entries in {0, -inf}.

    A character without a usable mask gets all -inf reference columns.
    """
    hw = layout.image_token_count
    unknown = set(masks) - set(layout.character_ids)
    if unknown:
        raise ValueError(f"masks given for characters outside the layout: {sorted(unknown)}")
    out = np.zeros((hw, layout.total_length), dtype=np.float32)
    for cid, start, n in layout.spans:
        mask = masks.get(cid)
        if mask is not None and mask.bits.size != hw:
            raise ValueError(f"mask for character {cid} covers {mask.bits.size} cells, need {hw}")
        blocked = np.ones(hw, dtype=bool) if mask is None else ~mask.bits.astype(bool)
        out[np.ix_(blocked, np.arange(start, start + n))] = NEG_INF
    return out


def normalize_cross_map(values, character_id: int = 0) -> ReweightVector:
    x = np.asarray(values, dtype=np.float64).ravel()
    peak = x.max()
    if peak == 0:
        return ReweightVector(character_id, np.zeros_like(x))
    return ReweightVector(character_id, np.clip((x - np.median(x)) / peak, 0.0, 1.0))


def reweight(weights, mask: CharacterMask, rw: ReweightVector, layout: ConcatLayout) -> np.ndarray:
    """Scale image-column weights of masked rows by ``rw`` and renormalize.

    A row whose mass would vanish is left as it was.
    """
    weights = np.asarray(weights, dtype=np.float32)
    hw = layout.image_token_count
    if weights.shape != (hw, layout.total_length):
        raise ValueError(f"weights shape {weights.shape} does not match layout")
    if rw.values.size != hw or mask.bits.size != hw:
        raise ValueError("reweight vector or mask does not cover the image tokens")
    rows = mask.rows
    if rows.size == 0:
        return weights
    sub = weights[rows].astype(np.float64)
    sub[:, :hw] *= rw.values[None, :]
    totals = row_sums(sub)
    dead = totals <= 0
    if dead.any():
        log.warning(
            "character %d: %d row(s) lost all attention mass, left unchanged",
            rw.character_id,
            int(dead.sum()),
        )
    out = weights.copy()
    live = ~dead
    out[rows[live]] = (sub[live] / totals[live, None]).astype(np.float32)
    return out


def isolated_self_attention(
    tokens,
    w_q,
    w_k,
    w_v,
    entries: Sequence[ReferenceEntry] = (),
    layout: ConcatLayout | None = None,
    masks: Mapping[int, CharacterMask] | None = None,
    reweights: Mapping[int, ReweightVector] | None = None,
) -> AttentionTensors:
    """Self-attention with queries from ``tokens`` and keys/values from
    ``Concat(tokens, entry tokens...)``.

    With no entries this is exactly plain self-attention. ``reweights`` may be
    empty to skip re-weighting; masks missing for a character block its
    reference columns entirely.
    """
    tokens = as_matrix(tokens)
    q = matmul(tokens, w_q)
    if not entries:
        return scaled_dot_attention(q, matmul(tokens, w_k), matmul(tokens, w_v))

    masks = dict(masks or {})
    reweights = dict(reweights or {})
    if layout is None or layout.character_ids != tuple(e.character_id for e in entries):
        raise ValueError("layout does not match the reference entries")
    context = np.concatenate([tokens] + [e.tokens for e in entries], axis=0)
    k = matmul(context, w_k)
    v = matmul(context, w_v)
    usable = {cid: m for cid, m in masks.items() if not m.degenerate}
    scores = attention_scores(q, k, build_isolation_mask(layout, usable))
    raw = softmax_rows(scores)
    weights = raw
    for cid in layout.character_ids:
        if cid in usable and cid in reweights:
            weights = reweight(weights, usable[cid], reweights[cid], layout)
    return AttentionTensors(q, k, v, scores, weights, matmul(weights, v), raw_weights=raw)
