"""Write-once store of per-character reference tokens, keyed by block."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masks import CharacterMask

log = logging.getLogger(__name__)


class DuplicateReferenceError(KeyError):
    pass


class MissingReferenceError(KeyError):
    pass


@dataclass(frozen=True)
class ReferenceEntry:
    character_id: int
    block_key: int
    tokens: np.ndarray
    source_scene: int

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


@dataclass(frozen=True)
class ConcatLayout:
    """Column layout of ``Concat(I, F_a, F_b, ...)``.

    ``spans`` holds ``(character_id, start, length)`` in concatenation order.
    """

    image_token_count: int
    spans: tuple[tuple[int, int, int], ...] = ()

    @classmethod
    def from_counts(cls, image_token_count: int, counts):
        spans = []
        start = image_token_count
        for cid, n in counts:
            spans.append((cid, start, n))
            start += n
        return cls(image_token_count, tuple(spans))

    @property
    def total_length(self) -> int:
        if not self.spans:
            return self.image_token_count
        _, start, n = self.spans[-1]
        return start + n

    @property
    def character_ids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _, _ in self.spans)

    def span(self, character_id: int) -> tuple[int, int]:
        for cid, start, n in self.spans:
            if cid == character_id:
                return start, start + n
        raise KeyError(character_id)


class ReferenceBank:
    def __init__(self):
        self._entries: dict[tuple[int, int], ReferenceEntry] = {}
        # (character, block) pairs whose first-scene mask was empty
        self.skipped: set[tuple[int, int]] = set()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def entries(self) -> list[ReferenceEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def get(self, character_id: int, block_key: int) -> ReferenceEntry:
        try:
            return self._entries[(character_id, block_key)]
        except KeyError:
            raise MissingReferenceError(
                f"no reference for character {character_id} at block {block_key}"
            ) from None

    def store_new(self, character_id, block_key, tokens, mask: CharacterMask, scene: int):
        """Keep the rows of ``tokens`` where ``mask`` is set.

        Returns the new entry, or None when the mask is degenerate (nothing is
        stored and the character stays reference-free).
        """
        if (character_id, block_key) in self._entries:
            raise DuplicateReferenceError(
                f"character {character_id} already has a reference at block {block_key}"
            )
        if mask.degenerate or mask.popcount == 0:
            log.warning("character %d: empty mask, reference not stored", character_id)
            return None
        tokens = np.asarray(tokens, dtype=np.float32)
        if tokens.shape[0] != mask.bits.size:
            raise ValueError(f"{tokens.shape[0]} token rows but mask covers {mask.bits.size}")
        entry = ReferenceEntry(character_id, block_key, tokens[mask.rows].copy(), scene)
        self._entries[(character_id, block_key)] = entry
        return entry

    def fetch(self, ids, block_key: int, image_token_count: int):
        """Entries for ``ids`` in ascending id order plus their concat layout."""
        entries = [self.get(cid, block_key) for cid in sorted(set(ids))]
        layout = ConcatLayout.from_counts(
            image_token_count, [(e.character_id, e.n_tokens) for e in entries]
        )
        return entries, layout

    def summary(self) -> list[dict]:
        return [
            {
                "character": e.character_id,
                "block": e.block_key,
                "n_tokens": e.n_tokens,
                "source_scene": e.source_scene,
            }
            for e in self.entries()
        ]

    def dump(self, path) -> None:
        doc = {
            "entries": [
                {**meta, "rows": e.tokens.astype(float).tolist()}
                for meta, e in zip(self.summary(), self.entries())
            ],
            "skipped": sorted([list(k) for k in self.skipped]),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ReferenceBank":
        doc = json.loads(Path(path).read_text())
        bank = cls()
        for item in doc["entries"]:
            tokens = np.asarray(item["rows"], dtype=np.float32)
            if tokens.shape[0] != item["n_tokens"]:
                raise ValueError(f"entry {item['character']}/{item['block']}: row count mismatch")
            entry = ReferenceEntry(item["character"], item["block"], tokens, item["source_scene"])
            bank._entries[(entry.character_id, entry.block_key)] = entry
        bank.skipped = {tuple(k) for k in doc.get("skipped", [])}
        return bank
