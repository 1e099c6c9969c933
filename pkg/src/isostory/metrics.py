"""Cross-scene character consistency and ablation grids.

A character's appearance in a scene is summarized by mean-pooling the final
latent rows under that scene's mask; consistency is the cosine similarity of
that summary against the character's first scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .pipeline import PipelineConfig, SceneResult, run_story
from .planner import StoryPlan

# (iso_cross, iso_self, reweight), all-off baseline first
ABLATION_GRID: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, True, True),
    (True, True, True),
)


class MetricError(ValueError):
    pass


def pooled_features(result: SceneResult, character_id: int) -> np.ndarray:
    mask = result.masks.get(character_id)
    if mask is None or mask.degenerate or mask.popcount == 0:
        raise MetricError(f"scene {result.scene_index}: no usable mask for character {character_id}")
    return result.latent[mask.rows].astype(np.float64).mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def masked_feature_similarity(result_a: SceneResult, result_b: SceneResult, character_id: int) -> float:
    return cosine(pooled_features(result_a, character_id), pooled_features(result_b, character_id))


@dataclass
class ConsistencyReport:
    label: str
    pairs: dict[int, list[tuple[tuple[int, int], float]]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def character_means(self) -> dict[int, float]:
        return {cid: float(np.mean([s for _, s in ps])) for cid, ps in self.pairs.items() if ps}

    @property
    def mean(self) -> float | None:
        """Average over characters of each character's mean pair similarity."""
        means = self.character_means
        return float(np.mean(list(means.values()))) if means else None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "mean": self.mean,
            "characters": {
                str(cid): {
                    "mean": self.character_means.get(cid),
                    "pairs": [{"scenes": list(p), "similarity": s} for p, s in ps],
                }
                for cid, ps in sorted(self.pairs.items())
            },
            "notes": list(self.notes),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConsistencyReport":
        pairs = {
            int(cid): [((p["scenes"][0], p["scenes"][1]), p["similarity"]) for p in item["pairs"]]
            for cid, item in doc["characters"].items()
        }
        return cls(doc["label"], pairs, list(doc.get("notes", [])), dict(doc.get("metadata", {})))


def consistency_report(results: list[SceneResult], plan: StoryPlan, label: str = "") -> ConsistencyReport:
    """Similarity of each character's first valid scene against every later one."""
    report = ConsistencyReport(label)
    by_index = {r.scene_index: r for r in results}
    for c in plan.characters:
        valid = []
        for s in plan.scenes:
            if c.id not in s.present or s.index not in by_index:
                continue
            mask = by_index[s.index].masks.get(c.id)
            if mask is None or mask.degenerate or mask.popcount == 0:
                report.notes.append(f"character {c.id}: empty mask in scene {s.index}, excluded")
            else:
                valid.append(s.index)
        if len(valid) < 2:
            report.notes.append(f"character {c.id}: fewer than 2 usable scenes, skipped")
            continue
        ref = by_index[valid[0]]
        report.pairs[c.id] = [
            ((valid[0], j), masked_feature_similarity(ref, by_index[j], c.id)) for j in valid[1:]
        ]
    return report


def grid_label(switches: tuple[bool, bool, bool]) -> str:
    parts = [name for name, on in zip(("IC", "IS", "Re"), switches) if on]
    return "+".join(parts) if parts else "baseline"


def ablation_run(plan: StoryPlan, config: PipelineConfig, grid=ABLATION_GRID) -> list[ConsistencyReport]:
    """One report per (iso_cross, iso_self, reweight) row, all with the same seed."""
    reports = []
    for switches in grid:
        ic, is_, re_ = switches
        if re_ and not is_:
            raise ValueError("reweighting requires isolated self-attention")
        cfg = replace(config, iso_cross=ic, iso_self=is_, reweight=re_)
        report = consistency_report(run_story(plan, cfg), plan, grid_label(switches))
        report.metadata = {"iso_cross": ic, "iso_self": is_, "reweight": re_,
                           "seed": cfg.seed, "lambda": cfg.lam}
        reports.append(report)
    return reports


TABLE_COLUMNS = ("IC", "IS", "Re", "mean")


def format_table(reports: list[ConsistencyReport]) -> str:
    """Aligned text table: one row per configuration, one column per character."""
    cids = sorted({cid for r in reports for cid in r.pairs})
    header = ["config", *TABLE_COLUMNS, *(f"char{c}" for c in cids)]
    rows = [header]
    for r in reports:
        md = r.metadata
        cells = [r.label] + ["x" if md.get(k) else "-" for k in ("iso_cross", "iso_self", "reweight")]
        cells.append("n/a" if r.mean is None else f"{r.mean:.6f}")
        means = r.character_means
        cells += [f"{means[c]:.6f}" if c in means else "n/a" for c in cids]
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def parse_table(text: str) -> list[ConsistencyReport]:
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    header, body = lines[0], lines[1:]
    cids = [int(h[4:]) for h in header[5:]]
    reports = []
    for cells in body:
        flags = [c == "x" for c in cells[1:4]]
        report = ConsistencyReport(cells[0], metadata=dict(zip(("iso_cross", "iso_self", "reweight"), flags)))
        for cid, cell in zip(cids, cells[5:]):
            if cell != "n/a":
                report.pairs[cid] = [((-1, -1), float(cell))]
        reports.append(report)
    return reports


def dumps_reports(reports: list[ConsistencyReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
