"""Prompt cross-attention, per-character map extraction, and regional blending."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .masks import CharacterMask
from .numeric import AttentionTensors, as_matrix, matmul, scaled_dot_attention


def cross_attention(tokens, text, w_q, w_k, w_v) -> AttentionTensors:
    """Queries from image tokens, keys and values from a prompt embedding.

    ``weights`` (h*w x L) is what character maps are extracted from.
    """
    tokens = as_matrix(tokens)
    text = as_matrix(text)
    return scaled_dot_attention(matmul(tokens, w_q), matmul(text, w_k), matmul(text, w_v))


def character_map_extract(weights, span: tuple[int, int]) -> np.ndarray:
    """Mean attention over the token columns ``span`` = [start, stop)."""
    weights = np.asarray(weights)
    start, stop = span
    if stop <= start:
        raise ValueError(f"empty token span {span}")
    if start < 0 or stop > weights.shape[1]:
        raise ValueError(f"span {span} outside [0, {weights.shape[1]})")
    cols = weights[:, start:stop].astype(np.float64)
    total = np.zeros(weights.shape[0])
    for j in range(cols.shape[1]):
        total += cols[:, j]
    return total / (stop - start)


def regional_blend(
    global_features,
    character_features: Mapping[int, np.ndarray],
    masks: Mapping[int, CharacterMask],
) -> np.ndarray:
    """Rows inside a character's mask come from that character's features,
    all other rows from the global (scene prompt) features."""
    out = np.array(global_features, dtype=np.float32, copy=True)
    claimed = np.zeros(out.shape[0], dtype=bool)
    for cid in sorted(masks):
        mask = masks[cid]
        rows = mask.bits.astype(bool)
        if rows.size != out.shape[0]:
            raise ValueError(f"mask for character {cid} covers {rows.size} rows, need {out.shape[0]}")
        if (rows & claimed).any():
            raise ValueError(f"mask for character {cid} overlaps another mask")
        claimed |= rows
        if rows.any():
            feats = np.asarray(character_features[cid], dtype=np.float32)
            if feats.shape != out.shape:
                raise ValueError(f"features for character {cid} have shape {feats.shape}")
            out[rows] = feats[rows]
    return out
