"""Toy consistency experiment: per-image baseline vs guided sequential editing.

Each session draws a texture and a 6-view homography scene from its seed,
computes oracle matches and edits the scene twice with the mixture model:
once without guidance and once with it. Guidance strength comes from a
sweep on separate tuning sessions. The report holds only quantities derived
from seeded computation, so equal configs give byte-identical reports.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config
from .diffusion import GuidanceConfig, MixtureEditModel, default_transforms, make_schedule
from .evaluation import classify_views, dumps_report, evaluate, parse_heldout
from .matching import all_pair_matches
from .scheduler import EditSession, edit_scene, write_session
from .scene import generate_scene, make_texture

logger = logging.getLogger(__name__)

# Sessions are seeded s, s+1, ...; their per-view sampler seeds are spaced by
# this stride so no two sessions share noise.
EDIT_SEED_STRIDE = 1000


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MVEDIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclasses.dataclass
class SessionInputs:
    seed: int
    scene: object
    matchsets: dict
    model: MixtureEditModel
    variants: dict


def prepare_session(cfg: RunConfig, seed: int) -> SessionInputs:
    s = cfg.scene
    texture = make_texture(s.texture_size, seed=seed, kind=s.texture_kind)
    scene = generate_scene(texture, s.n_views, s.spread, seed=seed)
    matchsets = all_pair_matches(scene, cfg.matching.grid_step, cfg.matching.filter)
    schedule = make_schedule(cfg.model.T, cfg.model.schedule)
    model = MixtureEditModel(schedule, default_transforms(cfg.model.n_variants))
    variants = {v.view_id: model.variants(v.image).numpy() for v in scene.views}
    return SessionInputs(seed, scene, matchsets, model, variants)


def baseline_guidance(g: GuidanceConfig) -> GuidanceConfig:
    return dataclasses.replace(g, lambda_guidance=0.0, n_b=0)


def run_edit(inputs: SessionInputs, cfg: RunConfig, guidance: GuidanceConfig) -> EditSession:
    session = EditSession(inputs.scene, inputs.matchsets, inputs.model, inputs.model.schedule,
                          guidance=guidance, consistency=cfg.consistency,
                          seed=inputs.seed * EDIT_SEED_STRIDE, engine=cfg.engine, ordering=cfg.ordering)
    edit_scene(session)
    return session


def score(inputs: SessionInputs, session: EditSession, cfg: RunConfig) -> dict:
    heldout = parse_heldout(cfg.experiment.heldout, inputs.scene.view_ids)
    report = evaluate(session.edited, inputs.scene, inputs.matchsets, heldout, cfg.consistency,
                      variants=inputs.variants)
    labels = classify_views(session.edited, inputs.variants)
    return {
        "matched_l1": report.matched_l1,
        "matched_perceptual": report.matched_perceptual,
        "variant_agreement": report.variant_agreement,
        "heldout_psnr": report.heldout_psnr,
        "heldout_ssim": report.heldout_ssim,
        "labels": [labels[v] for v in sorted(labels)],
    }


def ablation_settings(cfg: RunConfig) -> dict[str, GuidanceConfig]:
    """Named guidance variants: neighbor counts at the configured n_b, then n_b at the configured count."""
    g = cfg.guidance
    out = {}
    for k in cfg.experiment.ablation_neighbors:
        out[f"neighbors={k},n_b={g.n_b}"] = dataclasses.replace(g, neighbor_count=k)
    for nb in cfg.experiment.ablation_backward:
        out[f"neighbors={g.neighbor_count},n_b={nb}"] = dataclasses.replace(g, n_b=nb)
    return out


def run_session(cfg: RunConfig, seed: int, runs: dict[str, GuidanceConfig],
                out_dir=None) -> tuple[dict, dict]:
    """Score every named guidance setting on one session.

    Returns the per-run metrics and, separately, wall-clock seconds per run
    (timings never enter the report so it stays reproducible).
    """
    torch.set_num_threads(1)
    start = time.perf_counter()
    inputs = prepare_session(cfg, seed)
    timings = {"prepare": time.perf_counter() - start}
    result = {"seed": seed}
    done: dict[GuidanceConfig, dict] = {}
    for name, guidance in runs.items():
        if guidance not in done:
            start = time.perf_counter()
            session = run_edit(inputs, cfg, guidance)
            done[guidance] = score(inputs, session, cfg)
            timings[name] = time.perf_counter() - start
            logger.info("session %d %s: %.1fs", seed, name, timings[name])
            if out_dir is not None:
                write_session(session, Path(out_dir) / f"session_{seed:05d}" / name)
        result[name] = done[guidance]
    return result, timings


def _map_sessions(cfg: RunConfig, seeds, runs, out_dir, workers: int,
                  timings: dict | None = None) -> list[dict]:
    if workers <= 1 or len(seeds) <= 1:
        pairs = [run_session(cfg, s, runs, out_dir) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_session, cfg, s, runs, out_dir) for s in seeds]
            pairs = [f.result() for f in futures]
    if timings is not None:
        for _, t in pairs:
            for name, sec in t.items():
                timings[name] = timings.get(name, 0.0) + sec
    return [r for r, _ in pairs]


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def tune_lambda(cfg: RunConfig, workers: int = 1, timings: dict | None = None) -> dict:
    """Pick the guidance weight with the best mean held-out PSNR on tuning sessions.

    Ties go to the lower matched L1, then to the smaller weight.
    """
    e = cfg.experiment
    if e.sweep_sessions == 0:
        return {"seeds": [], "table": [], "tuned_lambda": cfg.guidance.lambda_guidance}
    runs = {f"lambda={lam:g}": dataclasses.replace(cfg.guidance, lambda_guidance=float(lam))
            for lam in e.lambda_sweep}
    seeds = [cfg.seed + e.sweep_seed_offset + i for i in range(e.sweep_sessions)]
    results = _map_sessions(cfg, seeds, runs, None, workers, timings)
    table = []
    for lam, name in zip(e.lambda_sweep, runs):
        table.append({
            "lambda": float(lam),
            "heldout_psnr": _mean([r[name]["heldout_psnr"] for r in results]),
            "matched_l1": _mean([r[name]["matched_l1"] for r in results]),
            "variant_agreement": _mean([r[name]["variant_agreement"] for r in results]),
        })
    best = min(table, key=lambda row: (-row["heldout_psnr"], row["matched_l1"], row["lambda"]))
    return {"seeds": seeds, "table": table, "tuned_lambda": best["lambda"]}


def _count(flags) -> int:
    return int(sum(bool(f) for f in flags))


def _summarize(sessions: list[dict], name: str) -> dict:
    keys = ("matched_l1", "matched_perceptual", "variant_agreement", "heldout_psnr", "heldout_ssim")
    return {k: _mean([s[name][k] for s in sessions]) for k in keys}


def run_experiment(cfg: RunConfig, out_dir=None, workers: int | None = None,
                   save_images: bool = False) -> dict:
    """Sweep, baseline, guided and optional ablation runs; returns the report.

    With ``out_dir`` set, writes ``report.json``, ``config.json`` and
    ``timings.json`` (seconds per phase, summed over sessions).
    """
    workers = worker_count() if workers is None else workers
    sweep_timings: dict[str, float] = {}
    timings: dict[str, float] = {}
    sweep = tune_lambda(cfg, workers, sweep_timings)
    guided = dataclasses.replace(cfg.guidance, lambda_guidance=sweep["tuned_lambda"])
    tuned_cfg = cfg.replace(guidance=guided)
    runs = {"baseline": baseline_guidance(guided), "guided": guided}
    if cfg.experiment.ablation:
        runs.update(ablation_settings(tuned_cfg))
    seeds = [cfg.seed + i for i in range(cfg.experiment.sessions)]
    image_dir = Path(out_dir) / "sessions" if (out_dir is not None and save_images) else None
    sessions = _map_sessions(cfg, seeds, runs, image_dir, workers, timings)

    base, guid = _summarize(sessions, "baseline"), _summarize(sessions, "guided")
    comparison = {
        "sessions": len(sessions),
        "guided_l1_ratio": guid["matched_l1"] / base["matched_l1"] if base["matched_l1"] > 0 else float("nan"),
        "sessions_guided_l1_lower": _count(s["guided"]["matched_l1"] < s["baseline"]["matched_l1"] for s in sessions),
        "sessions_psnr_gain_ge_3db": _count(s["guided"]["heldout_psnr"] >= s["baseline"]["heldout_psnr"] + 3.0
                                         for s in sessions),
        "sessions_guided_agreement_ge_0.9": _count(s["guided"]["variant_agreement"] >= 0.9 for s in sessions),
    }
    report = {"config": cfg.to_dict(), "sweep": sweep, "tuned_lambda": sweep["tuned_lambda"],
              "summary": {"baseline": base, "guided": guid}, "comparison": comparison,
              "sessions": sessions}
    if cfg.experiment.ablation:
        names = list(ablation_settings(tuned_cfg))
        g = tuned_cfg.guidance
        report["ablation"] = {
            "runs": {n: _summarize(sessions, n) for n in names},
            "backward_comparison": {
                f"sessions_n_b={nb}_le_n_b=0": _count(
                    s[f"neighbors={g.neighbor_count},n_b={nb}"]["matched_l1"]
                    <= s[f"neighbors={g.neighbor_count},n_b=0"]["matched_l1"] for s in sessions)
                for nb in cfg.experiment.ablation_backward if nb != 0 and 0 in cfg.experiment.ablation_backward
            },
        }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.json")
        (out / "report.json").write_text(dumps_report(report))
        doc = {"sweep": sweep_timings, "sessions": timings,
               "total": sum(sweep_timings.values()) + sum(timings.values())}
        (out / "timings.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return report
