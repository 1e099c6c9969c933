"""Two-branch transformer block.

The original branch is a plain pre-norm block (self-attention, prompt
cross-attention, feed-forward). The extended branch reuses the same weights
but swaps in isolated self-attention and regional cross-attention. Outputs are
merged by extrapolating from the original toward the extended features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .bank import ReferenceBank
from .cross_attn import character_map_extract, cross_attention, regional_blend
from .masks import CharacterMask
from .numeric import AttentionTensors, ShapeError, as_matrix, matmul
from .self_attn import ReweightVector, isolated_self_attention

LN_EPS = 1e-5


def seeded_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# stream tags so weights, latents and token embeddings never share draws
WEIGHT_STREAM, LATENT_STREAM = 1, 2


@dataclass(frozen=True)
class BlockParams:
    key: int
    self_q: np.ndarray
    self_k: np.ndarray
    self_v: np.ndarray
    self_out: np.ndarray
    cross_q: np.ndarray
    cross_k: np.ndarray
    cross_v: np.ndarray
    cross_out: np.ndarray
    ff_in: np.ndarray
    ff_out: np.ndarray
    norms: tuple[tuple[np.ndarray, np.ndarray], ...]

    @classmethod
    def generate(cls, seed: int, key: int, d: int, d_txt: int, ff_mult: int = 4) -> "BlockParams":
        """Gaussian weights scaled by 1/sqrt(fan_in), drawn from (seed, key)."""
        rng = seeded_rng(seed, WEIGHT_STREAM, key)

        def lin(n_in, n_out):
            return (rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)).astype(np.float32)

        shapes = [(d, d)] * 4 + [(d, d), (d_txt, d), (d_txt, d), (d, d), (d, ff_mult * d), (ff_mult * d, d)]
        mats = [lin(*s) for s in shapes]
        norms = tuple((np.ones(d, np.float32), np.zeros(d, np.float32)) for _ in range(3))
        return cls(key, *mats, norms=norms)


@dataclass(frozen=True)
class ExtendedBlockConfig:
    lam: float = 1.1
    extended_enabled: bool = True
    iso_self_enabled: bool = True
    iso_cross_enabled: bool = True
    reweight_enabled: bool = True

    def __post_init__(self):
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")
        if self.reweight_enabled and not self.iso_self_enabled:
            raise ValueError("reweighting only works together with isolated self-attention")

    @property
    def any_isolation(self) -> bool:
        return self.extended_enabled and (self.iso_self_enabled or self.iso_cross_enabled)


@dataclass
class IsolationState:
    """What the extended branch needs for one scene at one step.

    ``masks`` and ``reweights`` are keyed by old-character id.
    """

    old_ids: tuple[int, ...]
    bank: ReferenceBank
    masks: Mapping[int, CharacterMask]
    reweights: Mapping[int, ReweightVector]
    character_embeddings: Mapping[int, np.ndarray]


@dataclass
class BlockOutputs:
    f_ori: np.ndarray
    f_iso: np.ndarray | None
    merged: np.ndarray
    maps: dict[int, np.ndarray]
    attn_input: np.ndarray
    self_attn: AttentionTensors | None = None
    iso_self_attn: AttentionTensors | None = None
    layout: object | None = None
    extras: dict = field(default_factory=dict)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=1, keepdims=True)
    return ((x64 - mean) / np.sqrt(var + LN_EPS) * gamma + beta).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    # x*x is exact for float32 inputs, so this cube is rounded once
    cube = x64 * x64 * x64
    y = 0.5 * x64 * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x64 + 0.044715 * cube)))
    return y.astype(np.float32)


def _feed_forward(x: np.ndarray, p: BlockParams) -> np.ndarray:
    h = layer_norm(x, *p.norms[2])
    return x + matmul(gelu(matmul(h, p.ff_in)), p.ff_out)


def run_original_branch(x, scene_embedding, params: BlockParams, name_spans: Mapping[int, tuple[int, int]]):
    """Plain block. Returns (output, per-character maps, self-attn input, self-attn tensors)."""
    x = as_matrix(x)
    h = layer_norm(x, *params.norms[0])
    sa = isolated_self_attention(h, params.self_q, params.self_k, params.self_v)
    x1 = x + matmul(sa.output, params.self_out)
    ca = cross_attention(layer_norm(x1, *params.norms[1]), scene_embedding,
                         params.cross_q, params.cross_k, params.cross_v)
    x2 = x1 + matmul(ca.output, params.cross_out)
    maps = {cid: character_map_extract(ca.weights, span) for cid, span in sorted(name_spans.items())}
    return _feed_forward(x2, params), maps, h, sa


def run_extended_branch(x, scene_embedding, params: BlockParams, state: IsolationState,
                        config: ExtendedBlockConfig, attn_input=None):
    """Isolated self-attention, then regional cross-attention, then the shared
    feed-forward. Returns (output, isolated self-attn tensors, layout)."""
    x = as_matrix(x)
    h = layer_norm(x, *params.norms[0]) if attn_input is None else attn_input
    layout = None
    if config.iso_self_enabled and state.old_ids:
        entries, layout = state.bank.fetch(state.old_ids, params.key, h.shape[0])
        masks = {cid: state.masks[cid] for cid in state.old_ids if cid in state.masks}
        rws = dict(state.reweights) if config.reweight_enabled else {}
        sa = isolated_self_attention(h, params.self_q, params.self_k, params.self_v,
                                     entries, layout, masks, rws)
    else:
        sa = isolated_self_attention(h, params.self_q, params.self_k, params.self_v)
    x1 = x + matmul(sa.output, params.self_out)

    h2 = layer_norm(x1, *params.norms[1])
    ca = cross_attention(h2, scene_embedding, params.cross_q, params.cross_k, params.cross_v)
    features = ca.output
    if config.iso_cross_enabled and state.old_ids:
        regions = {cid: state.masks[cid] for cid in state.old_ids
                   if cid in state.masks and not state.masks[cid].degenerate}
        per_char = {
            cid: cross_attention(h2, state.character_embeddings[cid],
                                 params.cross_q, params.cross_k, params.cross_v).output
            for cid in sorted(regions)
        }
        features = regional_blend(features, per_char, regions)
    x2 = x1 + matmul(features, params.cross_out)
    return _feed_forward(x2, params), sa, layout


def merge(f_ori, f_iso, lam: float) -> np.ndarray:
    """``F_iso * lam + F_ori * (1 - lam)``, evaluated as ``F_ori + lam * (F_iso - F_ori)``
    in float64 so that equal branches and lam in {0, 1} come out exact."""
    f_ori = np.asarray(f_ori, dtype=np.float32)
    f_iso = np.asarray(f_iso, dtype=np.float32)
    if f_ori.shape != f_iso.shape:
        raise ShapeError(f"cannot merge {f_ori.shape} with {f_iso.shape}")
    a = f_ori.astype(np.float64)
    return (a + lam * (f_iso.astype(np.float64) - a)).astype(np.float32)


def run_block(x, scene_embedding, params: BlockParams, name_spans, config: ExtendedBlockConfig,
              state: IsolationState | None = None) -> BlockOutputs:
    """One block. ``state`` None (or no old characters) means isolation is off
    for this call, in which case the extended branch equals the original."""
    f_ori, maps, h, sa = run_original_branch(x, scene_embedding, params, name_spans)
    if not config.extended_enabled:
        return BlockOutputs(f_ori, None, f_ori, maps, h, self_attn=sa)
    if state is None or not state.old_ids or not config.any_isolation:
        return BlockOutputs(f_ori, f_ori, f_ori, maps, h, self_attn=sa)
    f_iso, iso_sa, layout = run_extended_branch(x, scene_embedding, params, state, config, attn_input=h)
    return BlockOutputs(f_ori, f_iso, merge(f_ori, f_iso, config.lam), maps, h,
                        self_attn=sa, iso_self_attn=iso_sa, layout=layout)
