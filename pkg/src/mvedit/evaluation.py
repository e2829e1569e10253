"""Consistency and fidelity metrics for edited scenes.

``matched_consistency_score`` is a transparent stand-in for learned
multi-view consistency metrics: it compares the edited colors and patches at
matched points. Planar texture reconstruction stands in for retraining a 3D
representation on the edited views.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .consistency import ConsistencyConfig, PyramidPerceptualMetric, _PairTerms, as_tensor
from .matching import MatchSet
from .scene import FILL_VALUE, Scene, bilinear_sample, in_bounds, pixel_grid, render_view, warp_point

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class MissingViewError(KeyError):
    def __init__(self, view_id: int) -> None:
        super().__init__(f"view {view_id} has no edited image")
        self.view_id = view_id

    def __str__(self) -> str:
        return self.args[0]


def _edited(edited: dict, view_id: int) -> np.ndarray:
    if view_id not in edited:
        raise MissingViewError(view_id)
    return np.asarray(edited[view_id], dtype=np.float64)


# -- matched consistency -------------------------------------------------------------


def pair_scores(image_a, image_b, ms: MatchSet, cfg: ConsistencyConfig | None = None,
                metric=None) -> tuple[float, float]:
    """Mean per-match L1 (averaged over channels) and mean patch distance."""
    cfg = cfg or ConsistencyConfig()
    metric = metric or PyramidPerceptualMetric()
    if len(ms) == 0:
        return 0.0, 0.0
    a, b = as_tensor(image_a), as_tensor(image_b)
    terms = _PairTerms(ms, a.shape[:2], b.shape[:2], _scoring_cfg(cfg))
    with torch.no_grad():
        l1 = float((terms.sample_a(a) - terms.sample_b(b)).abs().mean())
        perceptual = float(metric.distance(terms.patch_a(a), terms.patch_b(b)).mean())
    return l1, perceptual


def _scoring_cfg(cfg: ConsistencyConfig) -> ConsistencyConfig:
    # Patch terms are always scored, even when the loss weight is 0.
    if cfg.lambda_perceptual > 0:
        return cfg
    return ConsistencyConfig(1.0, cfg.patch_size, cfg.perceptual_subsample, cfg.subsample_seed)


def matched_consistency_score(edited: dict, matchsets, cfg: ConsistencyConfig | None = None,
                              metric=None) -> dict:
    """Average matched L1 and patch distance over all pairs with matches.

    Returns ``{"matched_l1", "matched_perceptual", "per_pair"}``; ``per_pair``
    is keyed ``"a-b"``.
    """
    if isinstance(matchsets, dict):
        matchsets = list(matchsets.values())
    per_pair = {}
    for ms in sorted(matchsets, key=lambda m: (min(m.view_a, m.view_b), max(m.view_a, m.view_b))):
        a, b = _edited(edited, ms.view_a), _edited(edited, ms.view_b)
        if len(ms) == 0:
            continue
        l1, perceptual = pair_scores(a, b, ms, cfg, metric)
        per_pair[f"{ms.view_a}-{ms.view_b}"] = {"matched_l1": l1, "matched_perceptual": perceptual,
                                                "matches": len(ms)}
    if not per_pair:
        return {"matched_l1": 0.0, "matched_perceptual": 0.0, "per_pair": {}}
    return {
        "matched_l1": float(np.mean([p["matched_l1"] for p in per_pair.values()])),
        "matched_perceptual": float(np.mean([p["matched_perceptual"] for p in per_pair.values()])),
        "per_pair": per_pair,
    }


# -- variant agreement ---------------------------------------------------------------


def classify_variant(image, variants) -> int:
    """Index of the variant with the smallest mean absolute difference."""
    image = np.asarray(image, dtype=np.float64)
    variants = np.asarray(variants, dtype=np.float64)
    dists = np.abs(variants - image[None]).reshape(len(variants), -1).mean(axis=1)
    return int(np.argmin(dists))


def classify_views(edited: dict, variants: dict) -> dict[int, int]:
    return {vid: classify_variant(_edited(edited, vid), variants[vid]) for vid in sorted(variants)}


def variant_agreement(edited: dict, variants: dict) -> float:
    """Fraction of views in the largest group classified to one variant.

    ``variants[view_id]`` is the ``(K, H, W, 3)`` stack of variants rendered
    for that view.
    """
    labels = list(classify_views(edited, variants).values())
    if not labels:
        return 0.0
    return float(np.bincount(labels).max() / len(labels))


# -- image metrics -------------------------------------------------------------------


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _blur(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def ssim(a, b) -> float:
    """Mean SSIM over channels for unit-range images (11x11 Gaussian window, sigma 1.5).

    The mean is taken over pixels whose window lies inside the image.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    r = SSIM_RADIUS
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _blur(x, w), _blur(y, w)
        vx = _blur(x * x, w) - mx * mx
        vy = _blur(y * y, w) - my * my
        cxy = _blur(x * y, w) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s[r:-r, r:-r].mean())
    return float(np.mean(scores))


# -- reconstruction oracle -----------------------------------------------------------


def _valid_pixels(view, texture_size: tuple[int, int]) -> np.ndarray:
    """``(H, W, 1)`` mask of view pixels whose preimage lies on the texture."""
    src = warp_point(np.linalg.inv(view.homography), pixel_grid(view.size))
    return in_bounds(src, texture_size).astype(np.float64).reshape(*view.size, 1)


def reconstruct_texture(edited: dict, scene: Scene, return_coverage: bool = False):
    """Average the edited views back onto the base-texture plane.

    Views are accumulated in ascending id order so the result does not depend
    on the order of ``edited``. Bilinear taps on fill pixels get zero weight.
    Texture pixels seen by no view are filled with
    0.5; with ``return_coverage`` the visible fraction is returned as well.
    """
    if not scene.is_synthetic:
        raise ValueError("texture reconstruction needs a synthetic scene")
    th, tw = scene.base_texture.shape[:2]
    grid = pixel_grid((th, tw))
    total = np.zeros((th * tw, 3))
    count = np.zeros(th * tw)
    for vid in sorted(edited):
        view = scene.view(vid)
        p = warp_point(view.homography, grid)
        inside = in_bounds(p, view.size)
        # Normalized interpolation over taps whose preimage is on the texture,
        # so fill pixels never leak into the average.
        valid = _valid_pixels(view, (th, tw))
        weight = bilinear_sample(valid, p[inside])[:, 0]
        colors = bilinear_sample(_edited(edited, vid) * valid, p[inside])
        use = weight > 1e-9
        idx = np.flatnonzero(inside)[use]
        total[idx] += colors[use] / weight[use, None]
        count[idx] += 1
    seen = count > 0
    out = np.full((th * tw, 3), FILL_VALUE)
    out[seen] = total[seen] / count[seen, None]
    recon = out.reshape(th, tw, 3)
    if return_coverage:
        return recon, float(seen.mean())
    return recon


def parse_heldout(spec: str, view_ids) -> set[int]:
    """``every:N`` selects every N-th view in ascending id order, starting with the first."""
    kind, _, value = spec.partition(":")
    ids = sorted(view_ids)
    if kind == "every":
        try:
            n = int(value)
        except ValueError:
            raise ValueError(f"bad held-out spec {spec!r}") from None
        if n < 2:
            raise ValueError("every:N needs N >= 2")
        return {v for i, v in enumerate(ids) if i % n == 0}
    if kind == "ids":
        return {int(v) for v in value.split(",") if v}
    raise ValueError(f"bad held-out spec {spec!r}; expected every:N or ids:a,b")


def heldout_eval(edited: dict, scene: Scene, heldout_ids) -> tuple[float, float]:
    """Reconstruct from the training views and score renders at held-out poses."""
    heldout = set(heldout_ids)
    ids = set(scene.view_ids)
    if not heldout:
        raise ValueError("held-out set is empty")
    if not heldout < ids:
        raise ValueError("held-out ids must be a proper subset of the scene's view ids")
    train = {v: _edited(edited, v) for v in sorted(ids - heldout)}
    recon = reconstruct_texture(train, scene)
    psnrs, ssims = [], []
    for vid in sorted(heldout):
        view = scene.view(vid)
        render = render_view(recon, view.homography, view.size)
        target = _edited(edited, vid)
        psnrs.append(psnr(render, target))
        ssims.append(ssim(render, target))
    return float(np.mean(psnrs)), float(np.mean(ssims))


# -- reports -------------------------------------------------------------------------


@dataclass
class MetricsReport:
    matched_l1: float
    matched_perceptual: float
    variant_agreement: float | None
    heldout_psnr: float
    heldout_ssim: float
    coverage: float = 1.0
    per_pair: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variant_agreement is not None and not 0.0 <= self.variant_agreement <= 1.0:
            raise ValueError("variant_agreement must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["matched_l1", "matched_perceptual", "variant_agreement", "heldout_psnr",
                 "heldout_ssim", "coverage", "per_pair", "config"],
    "additionalProperties": False,
    "properties": {
        "matched_l1": {"type": "number", "minimum": 0},
        "matched_perceptual": {"type": "number", "minimum": 0},
        "variant_agreement": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "heldout_psnr": {"anyOf": [{"type": "number", "minimum": 0}, {"enum": ["inf", "nan"]}]},
        "heldout_ssim": {"anyOf": [{"type": "number"}, {"enum": ["nan"]}]},
        "coverage": {"type": "number", "minimum": 0, "maximum": 1},
        "per_pair": {"type": "object", "additionalProperties": {
            "type": "object",
            "required": ["matched_l1", "matched_perceptual", "matches"],
            "properties": {"matched_l1": {"type": "number"}, "matched_perceptual": {"type": "number"},
                           "matches": {"type": "integer"}}}},
        "config": {"type": "object"},
    },
}

_SPECIAL = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def encode_floats(obj):
    """Replace non-finite floats with the strings ``"inf"``, ``"-inf"`` and ``"nan"``."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): encode_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return encode_floats(obj.item())
    return obj


def decode_floats(obj):
    if isinstance(obj, str) and obj in _SPECIAL:
        return _SPECIAL[obj]
    if isinstance(obj, dict):
        return {k: decode_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [decode_floats(v) for v in obj]
    return obj


def dumps_report(doc) -> str:
    if isinstance(doc, MetricsReport):
        doc = doc.to_dict()
    return json.dumps(encode_floats(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(report))
    return path


def load_report(path) -> dict:
    return decode_floats(json.loads(Path(path).read_text()))


def evaluate(edited: dict, scene: Scene, matchsets, heldout_ids, cfg: ConsistencyConfig | None = None,
             variants: dict | None = None, config: dict | None = None) -> MetricsReport:
    """Every metric for one edited scene."""
    scores = matched_consistency_score(edited, matchsets, cfg)
    if scene.is_synthetic:
        hp, hs = heldout_eval(edited, scene, heldout_ids)
        _, coverage = reconstruct_texture({v: _edited(edited, v) for v in scene.view_ids}, scene,
                                          return_coverage=True)
    else:
        hp, hs, coverage = math.nan, math.nan, 0.0
    agreement = variant_agreement(edited, variants) if variants is not None else None
    return MetricsReport(scores["matched_l1"], scores["matched_perceptual"], agreement, hp, hs,
                         coverage, scores["per_pair"], config or {})
