"""Character masks from accumulated cross-attention maps.

Maps are averaged over denoising steps, thresholded with a 256-bin Otsu
split, and overlapping claims are settled in favour of the map with the
lowest coefficient of variation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

OTSU_BINS = 256


@dataclass(frozen=True)
class AttnMapAccumulator:
    character_id: int
    h: int
    w: int
    running_mean: np.ndarray = field(default=None, repr=False)
    steps_seen: int = 0

    def __post_init__(self):
        if self.running_mean is None:
            object.__setattr__(self, "running_mean", np.zeros(self.h * self.w))


@dataclass(frozen=True)
class CharacterMask:
    character_id: int
    h: int
    w: int
    bits: np.ndarray = field(repr=False)
    cv: float
    degenerate: bool = False
    threshold: float | None = None

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def rows(self) -> np.ndarray:
        """Token indices (row-major spatial order) where the mask is set."""
        return np.flatnonzero(self.bits)


def _check_map(values, size: int | None = None) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    if size is not None and x.size != size:
        raise ValueError(f"map has {x.size} entries, expected {size}")
    if not np.isfinite(x).all():
        raise ValueError("map holds non-finite values")
    if (x < 0).any():
        raise ValueError("map holds negative values")
    return x


def accumulate(acc: AttnMapAccumulator, values) -> AttnMapAccumulator:
    x = _check_map(values, acc.h * acc.w)
    n = acc.steps_seen
    mean = (acc.running_mean * n + x) / (n + 1)
    return replace(acc, running_mean=mean, steps_seen=n + 1)


def coefficient_of_variation(values) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    mean = x.mean()
    if not mean > 0:
        raise ValueError(f"coefficient of variation needs a positive mean, got {mean}")
    return float(x.std() / mean)


def histogram_bins(x: np.ndarray) -> np.ndarray:
    """Bin index of every value over [min, max] in ``OTSU_BINS`` equal bins."""
    lo, hi = x.min(), x.max()
    idx = np.floor((x - lo) / (hi - lo) * OTSU_BINS).astype(np.int64)
    return np.clip(idx, 0, OTSU_BINS - 1)


def otsu_boundary(values) -> int | None:
    """Bin boundary ``k`` (class 0 = bins < k) maximizing between-class variance.

    Variance is compared exactly with integer arithmetic on bin indices, which
    is an affine image of the bin centres and so has the same argmax. Ties go
    to the smallest boundary. Returns None for a constant map.
    """
    x = _check_map(values)
    if x.max() == x.min():
        return None
    counts = np.bincount(histogram_bins(x), minlength=OTSU_BINS)
    sums = counts * np.arange(OTSU_BINS)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    n_total = int(counts.sum())
    s_total = int(sums.sum())
    # sigma_b^2 is proportional to (n0*S - N*s0)^2 / (n0*n1)
    best_k, best_num, best_den = None, 0, 1
    for k in range(1, OTSU_BINS):
        a, s = int(n0[k - 1]), int(s0[k - 1])
        b = n_total - a
        if a == 0 or b == 0:
            continue
        num = (a * s_total - n_total * s) ** 2
        den = a * b
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def boundary_value(values, k: int) -> float:
    x = np.asarray(values, dtype=np.float64)
    lo, hi = x.min(), x.max()
    return float(lo + k * (hi - lo) / OTSU_BINS)


def otsu_binarize(values, h: int, w: int, character_id: int = 0) -> CharacterMask:
    x = _check_map(values, h * w)
    k = otsu_boundary(x)
    cv = coefficient_of_variation(x) if x.mean() > 0 else 0.0
    if k is None:
        return CharacterMask(character_id, h, w, np.zeros(h * w, np.uint8), cv, degenerate=True)
    threshold = boundary_value(x, k)
    bits = (x > threshold).astype(np.uint8)
    return CharacterMask(character_id, h, w, bits, cv, threshold=threshold)


def resolve_overlaps(masks: list[CharacterMask]) -> list[CharacterMask]:
    """Make masks pairwise disjoint; contested cells go to the lowest (cv, id)."""
    if not masks:
        return []
    shape = (masks[0].h, masks[0].w)
    if any((m.h, m.w) != shape for m in masks):
        raise ValueError("masks do not share a resolution")
    order = sorted(range(len(masks)), key=lambda i: (masks[i].cv, masks[i].character_id))
    taken = np.zeros(shape[0] * shape[1], dtype=bool)
    out: list[CharacterMask | None] = [None] * len(masks)
    for i in order:
        bits = masks[i].bits.astype(bool) & ~taken
        taken |= bits
        out[i] = replace(masks[i], bits=bits.astype(np.uint8))
    return out


def write_pgm(path, values, h: int, w: int) -> None:
    """Write an 8-bit binary PGM, scaling the map maximum to 255."""
    x = np.asarray(values, dtype=np.float64).reshape(h, w)
    peak = x.max()
    if peak > 0:
        pix = np.rint(np.clip(x, 0, None) / peak * 255).astype(np.uint8)
    else:
        pix = np.zeros((h, w), np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = (int(t) for t in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
