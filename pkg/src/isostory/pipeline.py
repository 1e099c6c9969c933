"""Seeded desk-scale denoising loop over a story's scenes.

Each scene starts from its own seeded latent and runs ``steps`` passes of a
block stack; the trailing blocks are two-branch extended blocks. Per-step
cross-attention maps of every present character are averaged, turned into
masks once the warm-up is over, and drive isolation in the extended blocks.
At the last step each new character's masked tokens go into the bank.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .bank import ConcatLayout, ReferenceBank
from .block import (
    LATENT_STREAM,
    BlockParams,
    ExtendedBlockConfig,
    IsolationState,
    run_block,
    run_original_branch,
    seeded_rng,
)
from .masks import AttnMapAccumulator, CharacterMask, accumulate, otsu_binarize, resolve_overlaps
from .planner import StoryPlan, tokenize
from .self_attn import ReweightVector, normalize_cross_map

log = logging.getLogger(__name__)

TOKEN_STREAM = 3


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    h: int = 16
    w: int = 16
    d: int = 32
    steps: int = 10
    seed: int = 0
    stack: tuple[bool, ...] = (False, False, True, True)
    lam: float = 1.1
    mask_warmup_steps: int = 2
    d_txt: int = 32
    iso_self: bool = True
    iso_cross: bool = True
    reweight: bool = True
    dump_attn: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.h, self.w, self.d, self.d_txt) < 1:
            raise ValueError("latent and embedding sizes must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.mask_warmup_steps < 0:
            raise ValueError("mask_warmup_steps must be non-negative")
        if not self.stack:
            raise ValueError("stack needs at least one block")
        if (self.iso_self or self.iso_cross) and not any(self.stack):
            raise ValueError("isolation is enabled but no block is extended")
        # raises on reweight without iso_self, non-finite lambda
        self.block_config(True)

    @property
    def tokens(self) -> int:
        return self.h * self.w

    def block_config(self, extended: bool) -> ExtendedBlockConfig:
        return ExtendedBlockConfig(
            lam=self.lam,
            extended_enabled=extended,
            iso_self_enabled=self.iso_self,
            iso_cross_enabled=self.iso_cross,
            reweight_enabled=self.reweight,
        )

    def block_params(self) -> list[BlockParams]:
        return [BlockParams.generate(self.seed, i, self.d, self.d_txt) for i in range(len(self.stack))]


@dataclass
class AttnTrace:
    step: int
    block: int
    branch: str
    weights: np.ndarray
    raw_weights: np.ndarray | None = None
    layout: ConcatLayout | None = None
    masks: dict[int, CharacterMask] = field(default_factory=dict)


@dataclass
class SceneResult:
    scene_index: int
    latent: np.ndarray
    masks: dict[int, CharacterMask]
    maps: dict[int, np.ndarray]
    stored: list[tuple[int, int]] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    isolated_steps: int = 0
    traces: list[AttnTrace] = field(default_factory=list)


@lru_cache(maxsize=65536)
def _token_vector(token: str, d_txt: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = seeded_rng(seed, TOKEN_STREAM, int.from_bytes(digest, "little"))
    v = rng.standard_normal(d_txt)
    v = (v / np.linalg.norm(v)).astype(np.float32)
    v.flags.writeable = False
    return v


def encode_prompt(text: str, d_txt: int = 32, seed: int = 0) -> np.ndarray:
    """One unit-norm row per whitespace token, from a seeded hash of the token."""
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("cannot encode an empty prompt")
    return np.stack([_token_vector(t, d_txt, seed) for t in tokens])


def init_latent(config: PipelineConfig, scene_index: int) -> np.ndarray:
    rng = seeded_rng(config.seed, LATENT_STREAM, scene_index)
    return rng.standard_normal((config.tokens, config.d)).astype(np.float32)


def _masks_from(accs: dict[int, AttnMapAccumulator], config: PipelineConfig) -> dict[int, CharacterMask]:
    raw = [otsu_binarize(acc.running_mean, config.h, config.w, cid) for cid, acc in sorted(accs.items())]
    return {m.character_id: m for m in resolve_overlaps(raw)}


def denoise_scene(plan: StoryPlan, scene_index: int, bank: ReferenceBank, config: PipelineConfig,
                  params: list[BlockParams] | None = None) -> SceneResult:
    scene = plan.scenes[scene_index]
    params = params or config.block_params()
    ext_keys = [p.key for p, ext in zip(params, config.stack) if ext]
    diagnostics: list[str] = []

    old_ids = []
    for cid in sorted(scene.old):
        missing = [k for k in ext_keys if (cid, k) not in bank]
        if not missing:
            old_ids.append(cid)
        elif all((cid, k) in bank.skipped for k in missing):
            diagnostics.append(f"character {cid}: no reference stored (empty mask at first appearance)")
        else:
            raise PipelineError(
                f"scene {scene_index}: character {cid} is old but has no reference at blocks {missing}"
            )

    scene_emb = encode_prompt(scene.prompt, config.d_txt, config.seed)
    char_embs = {cid: encode_prompt(plan.character(cid).id_prompt, config.d_txt, config.seed)
                 for cid in old_ids}
    map_blocks = set(ext_keys) or {p.key for p in params}
    accs = {cid: AttnMapAccumulator(cid, config.h, config.w) for cid in sorted(scene.present)}
    masks: dict[int, CharacterMask] = {}
    reweights: dict[int, ReweightVector] = {}
    traces: list[AttnTrace] = []
    attn_inputs: dict[int, np.ndarray] = {}
    isolated_steps = 0
    degenerate_noted = False

    latent = init_latent(config, scene_index)
    step_size = np.float32(1.0 / config.steps)
    for t in range(1, config.steps + 1):
        usable = [cid for cid in old_ids if cid in masks and not masks[cid].degenerate]
        state = None
        if t > config.mask_warmup_steps and usable:
            state = IsolationState(
                old_ids=tuple(old_ids),
                bank=bank,
                masks={cid: masks[cid] for cid in old_ids},
                reweights={cid: reweights[cid] for cid in old_ids},
                character_embeddings=char_embs,
            )
            isolated_steps += 1
        elif t > config.mask_warmup_steps and old_ids and masks and not degenerate_noted:
            diagnostics.append("all old characters have empty masks; isolation skipped")
            degenerate_noted = True

        x = latent
        step_maps: dict[int, list[np.ndarray]] = {cid: [] for cid in accs}
        for p, ext in zip(params, config.stack):
            out = run_block(x, scene_emb, p, scene.name_spans, config.block_config(ext),
                            state if ext else None)
            if p.key in map_blocks:
                for cid, m in out.maps.items():
                    step_maps[cid].append(m)
            attn_inputs[p.key] = out.attn_input
            if config.dump_attn:
                traces.append(AttnTrace(t, p.key, "original", out.self_attn.weights))
                if out.iso_self_attn is not None:
                    traces.append(AttnTrace(
                        t, p.key, "extended", out.iso_self_attn.weights,
                        out.iso_self_attn.raw_weights, out.layout, dict(state.masks),
                    ))
            x = out.merged
        latent = latent - (latent - x) * step_size

        for cid in accs:
            accs[cid] = accumulate(accs[cid], np.mean(step_maps[cid], axis=0))
        if t >= config.mask_warmup_steps or t == config.steps:
            masks = _masks_from(accs, config)
            reweights = {cid: normalize_cross_map(accs[cid].running_mean, cid) for cid in old_ids}

    stored = []
    for cid in sorted(scene.new):
        if masks[cid].degenerate or masks[cid].popcount == 0:
            diagnostics.append(f"character {cid}: empty mask in first scene, no reference stored")
            for key in ext_keys:
                bank.skipped.add((cid, key))
            continue
        for key in ext_keys:
            bank.store_new(cid, key, attn_inputs[key], masks[cid], scene_index)
            stored.append((cid, key))
    if accs and all(m.degenerate for m in masks.values()):
        diagnostics.append("every character mask is degenerate")

    return SceneResult(
        scene_index=scene_index,
        latent=latent,
        masks=masks,
        maps={cid: acc.running_mean for cid, acc in accs.items()},
        stored=stored,
        diagnostics=diagnostics,
        isolated_steps=isolated_steps,
        traces=traces,
    )


def run_story(plan: StoryPlan, config: PipelineConfig, bank: ReferenceBank | None = None) -> list[SceneResult]:
    bank = ReferenceBank() if bank is None else bank
    params = config.block_params()
    return [denoise_scene(plan, i, bank, config, params) for i in range(len(plan.scenes))]


def run_plain_stack(plan: StoryPlan, config: PipelineConfig) -> list[np.ndarray]:
    """Final latents from the same seeded weights with plain blocks only."""
    params = config.block_params()
    step_size = np.float32(1.0 / config.steps)
    latents = []
    for i, scene in enumerate(plan.scenes):
        emb = encode_prompt(scene.prompt, config.d_txt, config.seed)
        latent = init_latent(config, i)
        for _ in range(config.steps):
            x = latent
            for p in params:
                x = run_original_branch(x, emb, p, {})[0]
            latent = latent - (latent - x) * step_size
        latents.append(latent)
    return latents


def baseline_config(config: PipelineConfig) -> PipelineConfig:
    return replace(config, iso_self=False, iso_cross=False, reweight=False)
