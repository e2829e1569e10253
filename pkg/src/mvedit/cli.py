"""``mvedit`` command line: gen-scene, match, edit, eval, experiment.

Every command writes the resolved configuration next to its outputs. Errors
end the process with a single JSON line on stderr and exit code 2 (usage),
3 (bad or missing data) or 4 (numerical failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, dump_config, load_config
from .diffusion import MixtureEditModel, NumericalError, default_transforms, make_schedule
from .evaluation import MissingViewError, emit_report, evaluate, parse_heldout
from .experiment import baseline_guidance, run_experiment
from .matching import (MatchFileError, MatchFilterConfig, UnsupportedSceneError, filter_matches,
                       load_matches, oracle_matches, save_matches)
from .scene import (DegenerateGeometryError, SceneIOError, generate_scene, load_scene, make_texture,
                    read_png, save_scene)
from .scheduler import EditError, EditSession, edit_scene, write_session

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

logger = logging.getLogger("mvedit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "engine", None) is not None:
        cfg = cfg.replace(engine=args.engine)
    return cfg


def _load_matchsets(directory, filter_cfg: MatchFilterConfig) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise MatchFileError(f"match directory not found: {directory}")
    out = {}
    for path in sorted(directory.glob("*.txt")):
        ms = filter_matches(load_matches(path), filter_cfg)
        key = (min(ms.view_a, ms.view_b), max(ms.view_a, ms.view_b))
        out[key] = ms.oriented(key[0])
    if not out:
        raise MatchFileError(f"no match files (*.txt) in {directory}")
    return out


def _load_edited(directory, view_ids) -> dict:
    directory = Path(directory)
    if (directory / "edited").is_dir():
        directory = directory / "edited"
    if not directory.is_dir():
        raise SceneIOError(f"edited directory not found: {directory}")
    edited = {}
    for vid in view_ids:
        path = directory / f"{vid}.png"
        if path.exists():
            edited[vid] = read_png(path)
    return edited


def _model(cfg: RunConfig) -> MixtureEditModel:
    return MixtureEditModel(make_schedule(cfg.model.T, cfg.model.schedule),
                            default_transforms(cfg.model.n_variants))


def cmd_gen_scene(args) -> int:
    cfg = _resolve(args)
    seed = cfg.seed
    if args.texture:
        if not Path(args.texture).exists():
            raise SceneIOError(f"texture not found: {args.texture}")
        texture = read_png(Path(args.texture))
    else:
        texture = make_texture(args.texture_size or cfg.scene.texture_size, seed=seed,
                               kind=cfg.scene.texture_kind)
    n_views = args.views if args.views is not None else cfg.scene.n_views
    spread = args.spread if args.spread is not None else cfg.scene.spread
    scene = generate_scene(texture, n_views, spread, seed=seed)
    out = Path(args.out)
    save_scene(scene, out)
    resolved = cfg.replace(scene=type(cfg.scene)(texture.shape[0], cfg.scene.texture_kind, n_views, spread))
    dump_config(resolved, out / "config.json")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _resolve(args)
    m = cfg.matching
    filter_cfg = MatchFilterConfig(
        args.certainty_min if args.certainty_min is not None else m.filter.certainty_min,
        args.max_matches if args.max_matches is not None else m.filter.max_matches)
    mode = args.mode or m.mode
    grid_step = args.grid_step if args.grid_step is not None else m.grid_step
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "oracle":
        ids = scene.view_ids
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                ms = filter_matches(oracle_matches(scene, a, b, grid_step), filter_cfg)
                save_matches(ms, out / f"{a}_{b}.txt")
    else:
        if not args.input:
            raise UsageError("--mode file needs --input DIR with match files")
        for key, ms in _load_matchsets(args.input, filter_cfg).items():
            save_matches(ms, out / f"{key[0]}_{key[1]}.txt")
    resolved = cfg.replace(matching=type(m)(mode, grid_step, filter_cfg))
    dump_config(resolved, out / "config.json")
    return EXIT_OK


def cmd_edit(args) -> int:
    cfg = _resolve(args)
    if args.baseline:
        cfg = cfg.replace(guidance=baseline_guidance(cfg.guidance))
    scene = load_scene(args.scene)
    matchsets = _load_matchsets(args.matches, cfg.matching.filter)
    model = _model(cfg)
    session = EditSession(scene, matchsets, model, model.schedule, guidance=cfg.guidance,
                          consistency=cfg.consistency, seed=cfg.seed, engine=cfg.engine,
                          ordering=cfg.ordering)
    edit_scene(session)
    out = Path(args.out)
    write_session(session, out, {"baseline": bool(args.baseline)})
    dump_config(cfg, out / "config.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    scene = load_scene(args.scene)
    matchsets = _load_matchsets(args.matches, cfg.matching.filter)
    edited = _load_edited(args.edited, scene.view_ids)
    for vid in scene.view_ids:
        if vid not in edited:
            raise MissingViewError(vid)
    heldout_spec = args.heldout or cfg.experiment.heldout
    heldout = parse_heldout(heldout_spec, scene.view_ids)
    model = _model(cfg)
    variants = {v.view_id: model.variants(v.image).numpy() for v in scene.views}
    report = evaluate(edited, scene, matchsets, heldout, cfg.consistency, variants=variants,
                      config={**cfg.to_dict(), "heldout": heldout_spec})
    path = emit_report(report, args.report)
    dump_config(cfg, path.parent / "config.json")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _resolve(args)
    changes = {}
    if args.sessions is not None:
        changes["sessions"] = args.sessions
    if args.ablation:
        changes["ablation"] = True
    if changes:
        cfg = cfg.replace(experiment=dataclasses.replace(cfg.experiment, **changes))
    run_experiment(cfg, args.out, save_images=args.save_images)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvedit", description="Consistent multi-view editing with guided diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic planar multi-view scene")
    p.add_argument("--texture", help="PNG texture (default: procedural noise texture)")
    p.add_argument("--texture-size", type=int, help="size of the procedural texture")
    p.add_argument("--views", type=int)
    p.add_argument("--spread", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("match", help="compute or import filtered correspondences for every view pair")
    p.add_argument("--scene", required=True)
    p.add_argument("--mode", choices=["oracle", "file"])
    p.add_argument("--input", help="directory of match files for --mode file")
    p.add_argument("--grid-step", type=int)
    p.add_argument("--certainty-min", type=float)
    p.add_argument("--max-matches", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("edit", help="edit every view, sequentially guided toward earlier edits")
    p.add_argument("--scene", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--config")
    p.add_argument("--engine", choices=["multistep", "onestep"])
    p.add_argument("--baseline", action="store_true", help="edit each view independently (no guidance)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score an edited scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--heldout", help="held-out views, every:N or ids:a,b (default every:5)")
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run the toy baseline-vs-guided experiment")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--ablation", action="store_true", help="also sweep neighbor count and backward steps")
    p.add_argument("--save-images", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    line = {"error": kind, "exit_code": code, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except (SceneIOError, MatchFileError, UnsupportedSceneError, MissingViewError,
            DegenerateGeometryError, FileNotFoundError, EditError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (UsageError, ConfigError, ValueError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)


if __name__ == "__main__":
    sys.exit(main())
