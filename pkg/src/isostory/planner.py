"""Story plans: characters, scene prompts, and per-scene appearance sets.

Plans come from a small line-oriented script format or from an LLM endpoint.
Either way the new/old split is recomputed locally from scene order.

Script format::

    # comment
    character Alice: a girl with red hair and a green coat
    character Old Tom: an elderly fisherman in a yellow raincoat
    scene: Alice walks along the harbour
    scene (Alice, Old Tom): Old Tom shows Alice his boat

Characters are detected by exact whitespace-token match of their name in the
scene prompt. An explicit cast list in parentheses is checked against the
declared characters and the prompt.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path


class PlanError(ValueError):
    pass


class ScriptSyntaxError(PlanError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def tokenize(text: str) -> list[str]:
    return text.split()


def find_span(tokens: list[str], name_tokens: list[str]) -> tuple[int, int] | None:
    """First [start, stop) where ``name_tokens`` occurs in ``tokens``."""
    n = len(name_tokens)
    for i in range(len(tokens) - n + 1):
        if tokens[i:i + n] == name_tokens:
            return i, i + n
    return None


@dataclass(frozen=True)
class CharacterSpec:
    id: int
    name: str
    prompt: str

    @property
    def id_prompt(self) -> str:
        """Prompt used for this character's own cross-attention pass."""
        return f"{self.name} {self.prompt}"


@dataclass(frozen=True)
class SceneSpec:
    index: int
    prompt: str
    present: frozenset[int] = frozenset()
    new: frozenset[int] = frozenset()
    old: frozenset[int] = frozenset()
    name_spans: dict[int, tuple[int, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class StoryPlan:
    characters: tuple[CharacterSpec, ...]
    scenes: tuple[SceneSpec, ...]

    def character(self, cid: int) -> CharacterSpec:
        for c in self.characters:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def to_dict(self) -> dict:
        return {
            "characters": [{"id": c.id, "name": c.name, "prompt": c.prompt} for c in self.characters],
            "scenes": [
                {
                    "index": s.index,
                    "prompt": s.prompt,
                    "present": sorted(s.present),
                    "new": sorted(s.new),
                    "old": sorted(s.old),
                    "name_spans": {str(k): list(v) for k, v in sorted(s.name_spans.items())},
                }
                for s in self.scenes
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "StoryPlan":
        chars = tuple(CharacterSpec(int(c["id"]), c["name"], c["prompt"]) for c in doc["characters"])
        scenes = tuple(
            SceneSpec(
                index=int(s["index"]),
                prompt=s["prompt"],
                present=frozenset(s["present"]),
                new=frozenset(s["new"]),
                old=frozenset(s["old"]),
                name_spans={int(k): (int(v[0]), int(v[1])) for k, v in s["name_spans"].items()},
            )
            for s in doc["scenes"]
        )
        return cls(chars, scenes)

    @classmethod
    def load(cls, path) -> "StoryPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def assign_appearances(characters, scene_casts) -> tuple[SceneSpec, ...]:
    """Build scenes from ``(prompt, present ids)`` pairs, deriving new/old
    from first occurrence and locating each name in its prompt."""
    seen: set[int] = set()
    scenes = []
    for index, (prompt, present) in enumerate(scene_casts):
        tokens = tokenize(prompt)
        spans = {}
        for cid in sorted(present):
            span = find_span(tokens, tokenize(characters[cid].name))
            if span is None:
                raise PlanError(f"scene {index}: name {characters[cid].name!r} not found in prompt")
            spans[cid] = span
        present = frozenset(present)
        scenes.append(SceneSpec(index, prompt, present, present - seen, present & seen, spans))
        seen |= present
    return tuple(scenes)


def _check_names(characters) -> None:
    names = [c.name for c in characters]
    for a in names:
        for b in names:
            if a != b and find_span(tokenize(b), tokenize(a)) is not None:
                raise PlanError(f"character name {a!r} is contained in {b!r}")


_CHARACTER = re.compile(r"character\s+([^:]+?)\s*:\s*(.*)$")
_SCENE = re.compile(r"scene\s*(?:\(([^)]*)\))?\s*:\s*(.*)$")


def parse_script(text: str) -> StoryPlan:
    characters: list[CharacterSpec] = []
    by_name: dict[str, int] = {}
    casts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        col = raw.index(line[0]) + 1
        if line.startswith("character"):
            m = _CHARACTER.match(line)
            if m is None or not m.group(2).strip():
                raise ScriptSyntaxError("expected 'character <Name>: <prompt>'", lineno, col)
            if casts:
                raise ScriptSyntaxError("character declared after the first scene", lineno, col)
            name, prompt = " ".join(m.group(1).split()), m.group(2).strip()
            if name in by_name:
                raise ScriptSyntaxError(f"duplicate character name {name!r}", lineno, col)
            by_name[name] = len(characters)
            characters.append(CharacterSpec(len(characters), name, prompt))
        elif line.startswith("scene"):
            m = _SCENE.match(line)
            if m is None or not m.group(2).strip():
                raise ScriptSyntaxError("expected 'scene: <prompt>'", lineno, col)
            prompt = " ".join(m.group(2).split())
            tokens = tokenize(prompt)
            if m.group(1) is not None:
                cast = set()
                for name in (n.strip() for n in m.group(1).split(",")):
                    if name not in by_name:
                        raise ScriptSyntaxError(f"unknown character {name!r}", lineno, col)
                    if find_span(tokens, tokenize(name)) is None:
                        raise ScriptSyntaxError(f"character {name!r} is not named in the prompt", lineno, col)
                    cast.add(by_name[name])
            else:
                cast = {c.id for c in characters if find_span(tokens, tokenize(c.name)) is not None}
            casts.append((prompt, cast))
        else:
            raise ScriptSyntaxError(f"unrecognized line {line.split()[0]!r}", lineno, col)
    if not casts:
        raise PlanError("script has no scenes")
    _check_names(characters)
    return StoryPlan(tuple(characters), assign_appearances(characters, casts))


def validate_plan(plan: StoryPlan) -> list[str]:
    issues: list[str] = []
    ids = [c.id for c in plan.characters]
    if sorted(ids) != list(range(len(ids))):
        issues.append(f"character ids {sorted(ids)} are not dense 0..{len(ids) - 1}")
    names = [c.name for c in plan.characters]
    for name in sorted({n for n in names if names.count(n) > 1}):
        issues.append(f"duplicate character name {name!r}")
    for c in plan.characters:
        if not c.name.strip() or not c.prompt.strip():
            issues.append(f"character {c.id}: empty name or prompt")
    known = set(ids)
    name_of = {c.id: c.name for c in plan.characters}
    seen: set[int] = set()
    new_count = {cid: 0 for cid in known}
    for i, s in enumerate(plan.scenes):
        where = f"scene {s.index}"
        if s.index != i:
            issues.append(f"{where}: index out of order (position {i})")
        if not s.prompt.strip():
            issues.append(f"{where}: empty prompt")
        if unknown := (s.present | s.new | s.old) - known:
            issues.append(f"{where}: unknown character ids {sorted(unknown)}")
        if both := s.new & s.old:
            issues.append(f"{where}: characters {sorted(both)} are both new and old")
        if (s.new | s.old) != s.present:
            issues.append(f"{where}: new and old do not cover present")
        if early := s.old - seen:
            issues.append(f"{where}: characters {sorted(early)} marked old before appearing")
        if late := (s.new - s.old) & seen:
            issues.append(f"{where}: characters {sorted(late)} marked new after appearing")
        tokens = tokenize(s.prompt)
        for cid in sorted(s.present & known):
            span = s.name_spans.get(cid)
            if span is None or tokens[span[0]:span[1]] != tokenize(name_of[cid]):
                issues.append(f"{where}: bad name span for character {cid}")
        for cid in (s.new - s.old) & known:
            new_count[cid] += 1
        seen |= s.present
    for cid in sorted(known):
        if new_count[cid] > 1:
            issues.append(f"character {cid}: new in {new_count[cid]} scenes")
    if not plan.scenes:
        issues.append("plan has no scenes")
    return issues


# LLM planning ---------------------------------------------------------------

PLAN_RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["characters", "scenes"],
    "properties": {
        "characters": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "name", "prompt"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "name": {"type": "string", "minLength": 1},
                    "prompt": {"type": "string", "minLength": 1},
                },
            },
        },
        "scenes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["prompt", "present"],
                "properties": {
                    "index": {"type": "integer"},
                    "prompt": {"type": "string", "minLength": 1},
                    "present": {"type": "array", "items": {"type": "integer"}},
                    "new": {"type": "array", "items": {"type": "integer"}},
                    "old": {"type": "array", "items": {"type": "integer"}},
                },
            },
        },
    },
}


def plan_from_response(doc) -> StoryPlan:
    """Validate an endpoint response and rebuild the plan locally.

    Any new/old sets in the response are ignored.
    """
    import jsonschema

    try:
        jsonschema.validate(doc, PLAN_RESPONSE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise PlanError(f"LLM response fails schema: {exc.message}") from None
    raw = sorted(doc["characters"], key=lambda c: c["id"])
    if [c["id"] for c in raw] != list(range(len(raw))):
        raise PlanError("LLM response character ids are not dense")
    characters = tuple(CharacterSpec(c["id"], " ".join(c["name"].split()), c["prompt"]) for c in raw)
    if len({c.name for c in characters}) != len(characters):
        raise PlanError("LLM response repeats a character name")
    _check_names(characters)
    casts = []
    for s in doc["scenes"]:
        present = set(s["present"])
        if unknown := present - set(range(len(characters))):
            raise PlanError(f"LLM response references unknown characters {sorted(unknown)}")
        casts.append((" ".join(s["prompt"].split()), present))
    plan = StoryPlan(characters, assign_appearances(characters, casts))
    if issues := validate_plan(plan):
        raise PlanError("; ".join(issues))
    return plan


def plan_with_llm(storyline: str, client) -> StoryPlan:
    """``client.request(storyline, schema)`` must return the decoded response
    document; see :class:`isostory.llm.HttpPlannerClient`."""
    if not storyline.strip():
        raise PlanError("storyline is empty")
    return plan_from_response(client.request(storyline, PLAN_RESPONSE_SCHEMA))
