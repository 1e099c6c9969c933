"""``isostory`` command line: plan, generate, ablate, inspect.

Exit codes: 0 success, 1 domain error (plan or content), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bank import DuplicateReferenceError, MissingReferenceError, ReferenceBank
from .config import ConfigError, RunConfig, load_config
from .llm import TOKEN_ENV, HttpPlannerClient, LLMEndpointError
from .masks import read_pgm, write_pgm
from .metrics import (
    ABLATION_GRID,
    MetricError,
    ablation_run,
    consistency_report,
    dumps_reports,
    format_table,
    grid_label,
)
from .pipeline import PipelineConfig, PipelineError, SceneResult, run_story
from .planner import PlanError, StoryPlan, parse_script, plan_with_llm, validate_plan

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        changes["lam"] = args.lam
    if getattr(args, "dump_attn", False):
        changes["dump_attn"] = True
    if changes:
        try:
            cfg.pipeline = replace(cfg.pipeline, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def build_llm_client(cfg: RunConfig) -> HttpPlannerClient:
    """Endpoint from the config if set, else from the environment."""
    if cfg.endpoint is None:
        return HttpPlannerClient.from_env(cfg.template)
    template = Path(cfg.template).read_text() if cfg.template else None
    return HttpPlannerClient(cfg.endpoint, os.environ.get(TOKEN_ENV), template)


def load_plan(path) -> StoryPlan:
    """A serialized plan (JSON) or a story script."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read plan {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return parse_script(text)
    try:
        plan = StoryPlan.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise PlanError(f"{path} is not a plan document: {exc}") from None
    if issues := validate_plan(plan):
        raise PlanError("; ".join(issues))
    return plan


# plan -----------------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = _resolve(args)
    if args.llm is not None or cfg.planner_mode == "llm":
        if args.llm is not None:
            storyline = args.llm
        elif args.source is not None:
            storyline = Path(args.source).read_text()
        else:
            raise UsageError("llm planning needs a storyline (--llm TEXT or a storyline file)")
        plan = plan_with_llm(storyline, build_llm_client(cfg))
    else:
        if args.source is None:
            raise UsageError("plan needs a script path or --llm")
        try:
            text = Path(args.source).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read script {args.source}: {exc.strerror}") from None
        plan = parse_script(text)
    issues = validate_plan(plan)
    for issue in issues:
        print(f"plan: {issue}", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(plan.dumps())
    else:
        sys.stdout.write(plan.dumps())
    return EXIT_DOMAIN if issues else EXIT_OK


# generate -------------------------------------------------------------------

def report_label(config: PipelineConfig) -> str:
    switches = (config.iso_cross, config.iso_self, config.reweight)
    if config.lam == 0 or not any(config.stack):
        return "baseline"
    return grid_label(switches)


def _prepare_dir(out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise UsageError(f"{out} exists and is not a directory")
        if any(out.iterdir()):
            if not (out / "manifest.json").exists():
                raise UsageError(f"refusing to overwrite non-run directory {out}")
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write_scene(scene_dir: Path, result: SceneResult, config: PipelineConfig) -> None:
    scene_dir.mkdir()
    np.save(scene_dir / "latent.npy", result.latent)
    summary = {}
    for cid, mask in sorted(result.masks.items()):
        write_pgm(scene_dir / f"map_{cid}.pgm", result.maps[cid], config.h, config.w)
        write_pgm(scene_dir / f"mask_{cid}.pgm", mask.bits, config.h, config.w)
        summary[str(cid)] = {
            "cv": mask.cv,
            "degenerate": mask.degenerate,
            "popcount": mask.popcount,
            "threshold": mask.threshold,
        }
    _dump_json(scene_dir / "masks.json", summary)
    final = [t for t in result.traces if t.step == config.steps]
    for trace in final:
        rows, cols = trace.weights.shape
        write_pgm(scene_dir / f"attn_b{trace.block}_{trace.branch}.pgm", trace.weights, rows, cols)
        if trace.layout is None:
            continue
        for cid in trace.layout.character_ids:
            start, stop = trace.layout.span(cid)
            mass = trace.weights[:, start:stop].astype(np.float64).sum(axis=1)
            write_pgm(scene_dir / f"refmass_{cid}_b{trace.block}.pgm", mass, config.h, config.w)


def generate_run(plan: StoryPlan, cfg: RunConfig, out: Path) -> None:
    config = cfg.pipeline
    bank = ReferenceBank()
    results = run_story(plan, config, bank)
    _prepare_dir(out)
    for r in results:
        _write_scene(out / f"scene_{r.scene_index:03d}", r, config)
    report = consistency_report(results, plan, report_label(config))
    report.metadata = {"iso_cross": config.iso_cross, "iso_self": config.iso_self,
                       "reweight": config.reweight, "seed": config.seed, "lambda": config.lam}
    _dump_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(format_table([report]))
    bank.dump(out / "bank.json")
    (out / "plan.json").write_text(plan.dumps())
    _dump_json(out / "manifest.json", {
        "config": cfg.to_dict(),
        "seeds": {
            "seed": config.seed,
            "weights": [[config.seed, "weights", i] for i in range(len(config.stack))],
            "latents": [[config.seed, "latent", r.scene_index] for r in results],
        },
        "bank": bank.summary(),
        "scenes": [
            {
                "index": r.scene_index,
                "present": sorted(plan.scenes[r.scene_index].present),
                "new": sorted(plan.scenes[r.scene_index].new),
                "old": sorted(plan.scenes[r.scene_index].old),
                "isolated_steps": r.isolated_steps,
                "stored": [list(s) for s in r.stored],
                "diagnostics": list(r.diagnostics),
            }
            for r in results
        ],
        "report_label": report.label,
    })


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    plan = load_plan(args.plan)
    out = Path(args.out or cfg.directory)
    generate_run(plan, cfg, out)
    print(f"wrote {out}")
    return EXIT_OK


# ablate ---------------------------------------------------------------------

def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    plan = load_plan(args.plan)
    reports = ablation_run(plan, cfg.pipeline, ABLATION_GRID)
    table = format_table(reports)
    out = Path(args.out or "ablation.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    out.with_suffix(".json").write_text(dumps_reports(reports))
    sys.stdout.write(table)
    return EXIT_OK


# inspect --------------------------------------------------------------------

class MissingArtifact(Exception):
    pass


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(path)
    return path


def cmd_inspect(args) -> int:
    run = Path(args.run)
    plan = StoryPlan.load(_need(run / "plan.json"))
    if not 0 <= args.scene < len(plan.scenes):
        print(f"scene {args.scene} does not exist (run has {len(plan.scenes)} scenes)", file=sys.stderr)
        return EXIT_DOMAIN
    try:
        cid = int(args.character)
        character = plan.character(cid)
    except ValueError:
        matches = [c for c in plan.characters if c.name == args.character]
        if not matches:
            print(f"unknown character {args.character!r}", file=sys.stderr)
            return EXIT_DOMAIN
        character = matches[0]
    except KeyError:
        print(f"unknown character {args.character!r}", file=sys.stderr)
        return EXIT_DOMAIN
    cid = character.id
    if cid not in plan.scenes[args.scene].present:
        print(f"character {cid} ({character.name}) is not present in scene {args.scene}", file=sys.stderr)
        return EXIT_DOMAIN

    scene_dir = run / f"scene_{args.scene:03d}"
    info = json.loads(_need(scene_dir / "masks.json").read_text())[str(cid)]
    out = Path(args.out or run / "inspect" / f"scene_{args.scene:03d}_char_{cid}")
    out.mkdir(parents=True, exist_ok=True)

    heat = read_pgm(_need(scene_dir / f"map_{cid}.pgm"))
    shutil.copyfile(scene_dir / f"map_{cid}.pgm", out / "map.pgm")
    written = ["map.pgm"]
    if not info["degenerate"]:
        bits = read_pgm(_need(scene_dir / f"mask_{cid}.pgm")) > 0
        shutil.copyfile(scene_dir / f"mask_{cid}.pgm", out / "mask.pgm")
        # map intensity inside the mask, dimmed outside
        overlay = np.where(bits, heat.astype(np.float64), heat / 4.0)
        write_pgm(out / "overlay.pgm", overlay, *heat.shape)
        written += ["mask.pgm", "overlay.pgm"]
    for src in sorted(scene_dir.glob(f"refmass_{cid}_b*.pgm")):
        shutil.copyfile(src, out / src.name)
        written.append(src.name)

    print(f"scene {args.scene} character {cid} ({character.name})")
    print(f"  cv         {info['cv']:.6f}")
    print(f"  n_m        {info['popcount']}")
    print(f"  degenerate {'yes' if info['degenerate'] else 'no'}")
    if info["degenerate"]:
        print("  degenerate mask: no mask overlay written")
    print(f"  wrote {', '.join(written)} to {out}")
    return EXIT_OK


# entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isostory", description="Isolated-attention story visualization toy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log info messages")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_flags=True):
        p.add_argument("--config", help="JSON run config")
        if run_flags:
            p.add_argument("--seed", type=int, help="override pipeline.seed")
            p.add_argument("--lambda", dest="lam", type=float, help="override pipeline.lambda")

    p = sub.add_parser("plan", help="parse or request a story plan")
    p.add_argument("source", nargs="?", help="story script (or storyline file in llm mode)")
    p.add_argument("--llm", metavar="STORYLINE", help="plan this storyline with the LLM endpoint")
    p.add_argument("--out", help="plan file (default: stdout)")
    common(p, run_flags=False)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("generate", help="run a story and write a run directory")
    p.add_argument("plan", help="plan JSON or story script")
    p.add_argument("--out", help="run directory (default: output.directory)")
    p.add_argument("--dump-attn", action="store_true", help="write final-step attention weights")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate", help="run the switch grid and write a comparison table")
    p.add_argument("plan", help="plan JSON or story script")
    p.add_argument("--out", help="table file (default: ablation.txt); JSON goes next to it")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize one character's mask in one scene")
    p.add_argument("run", help="run directory")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--character", required=True, help="character id or name")
    p.add_argument("--out", help="output directory for the PGM files")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"error: missing artifact {exc.args[0]}", file=sys.stderr)
        return EXIT_DOMAIN
    except (PlanError, PipelineError, LLMEndpointError, MetricError,
            DuplicateReferenceError, MissingReferenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
