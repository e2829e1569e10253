"""Planar multi-view scenes: homography views of a base texture.

Pixel convention used throughout the package: origin at the top-left,
points are ``(x, y) = (column, row)`` and pixel centers sit at integer
coordinates. Images are float64 arrays of shape ``(H, W, 3)`` in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

FILL_VALUE = 0.5
MIN_SIZE = 8
MAX_RESAMPLES = 100


class DegenerateGeometryError(RuntimeError):
    pass


class PointAtInfinityError(ValueError):
    pass


class SceneIOError(OSError):
    pass


def validate_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if image.shape[0] < MIN_SIZE or image.shape[1] < MIN_SIZE:
        raise ValueError(f"{name} must be at least {MIN_SIZE}x{MIN_SIZE}, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name} values must be finite and within [0, 1]")
    return image


@dataclass
class View:
    view_id: int
    image: np.ndarray
    homography: np.ndarray

    def __post_init__(self) -> None:
        self.image = validate_image(self.image, f"view {self.view_id}")
        self.homography = np.asarray(self.homography, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(self.homography)) <= 1e-9:
            raise DegenerateGeometryError(f"view {self.view_id}: homography is not invertible")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class Scene:
    views: list[View]
    base_texture: np.ndarray | None = None
    rng_seed: int = 0
    _by_id: dict[int, View] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.views) < 2:
            raise ValueError("a scene needs at least 2 views")
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate view ids in scene: {ids}")
        sizes = {v.size for v in self.views}
        if len(sizes) != 1:
            raise ValueError(f"all views must share one size, got {sorted(sizes)}")
        if self.base_texture is not None:
            self.base_texture = validate_image(self.base_texture, "base_texture")
        self._by_id = {v.view_id: v for v in self.views}

    @property
    def view_ids(self) -> list[int]:
        return [v.view_id for v in self.views]

    @property
    def size(self) -> tuple[int, int]:
        return self.views[0].size

    @property
    def is_synthetic(self) -> bool:
        return self.base_texture is not None

    def view(self, view_id: int) -> View:
        try:
            return self._by_id[view_id]
        except KeyError:
            raise KeyError(f"no view with id {view_id}") from None


def warp_point(H: np.ndarray, p) -> np.ndarray:
    """Apply a homography to a point or an ``(N, 2)`` array of points."""
    H = np.asarray(H, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    pts = np.atleast_2d(p)
    x, y = pts[:, 0], pts[:, 1]
    u = H[0, 0] * x + H[0, 1] * y + H[0, 2]
    v = H[1, 0] * x + H[1, 1] * y + H[1, 2]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinityError("homogeneous scale vanishes: point maps to infinity")
    out = np.stack([u / w, v / w], axis=1)
    return out[0] if p.ndim == 1 else out


def bilinear_sample(image: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``image`` at ``(N, 2)`` points, clamped to the image."""
    h, w = image.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1)
    y = np.clip(pts[:, 1], 0.0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x0 + 1] * fx
    bottom = image[y0 + 1, x0] * (1 - fx) + image[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


def in_bounds(pts: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)


def pixel_grid(size: tuple[int, int], step: int = 1) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h:step, 0:w:step]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def render_view(texture: np.ndarray, H: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Inverse-warp ``texture`` into a view whose pixels relate to it by ``H``.

    View pixels whose preimage falls outside the texture get ``FILL_VALUE``.
    """
    h, w = size
    pts = pixel_grid(size)
    src = warp_point(np.linalg.inv(H), pts)
    out = np.full((h * w, 3), FILL_VALUE)
    inside = in_bounds(src, texture.shape[:2])
    out[inside] = bilinear_sample(texture, src[inside])
    return np.clip(out.reshape(h, w, 3), 0.0, 1.0)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Four-point DLT solving ``dst ~ H @ src`` with ``H[2, 2] = 1``."""
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(A, b)
    return np.append(h, 1.0).reshape(3, 3)


def _is_convex(quad: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        signs.append(cross > 0)
    return all(signs) or not any(signs)


def sample_homography(size: tuple[int, int], spread: float, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    if spread == 0:
        return np.eye(3)
    for _ in range(MAX_RESAMPLES):
        offsets = rng.uniform(-1.0, 1.0, size=(4, 2)) * spread * min(h, w)
        quad = corners + offsets
        if not _is_convex(quad):
            continue
        try:
            H = homography_from_points(corners, quad)
        except np.linalg.LinAlgError:
            continue
        if abs(np.linalg.det(H)) > 1e-9:
            return H
    raise DegenerateGeometryError(f"no invertible homography after {MAX_RESAMPLES} samples")


def generate_scene(texture: np.ndarray, n_views: int, spread: float, seed: int) -> Scene:
    """Render ``n_views`` random perspective views of a planar texture."""
    texture = validate_image(texture, "texture")
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    if not 0.0 <= spread <= 0.3:
        raise ValueError("spread must lie in [0, 0.3]")
    rng = np.random.default_rng(seed)
    size = texture.shape[:2]
    views = []
    for i in range(n_views):
        H = sample_homography(size, spread, rng)
        views.append(View(i, render_view(texture, H, size), H))
    return Scene(views, base_texture=texture, rng_seed=seed)


def make_texture(size: int = 128, seed: int = 0, kind: str = "noise", smooth: float = 3.0) -> np.ndarray:
    """Procedural test textures.

    ``noise`` is independently smoothed noise per channel, stretched to the
    full unit range, so channel permutations of it look clearly different.
    ``checkerboard`` uses 8-pixel cells in two colors.
    """
    if kind == "checkerboard":
        ys, xs = np.mgrid[0:size, 0:size]
        mask = ((xs // 8 + ys // 8) % 2).astype(np.float64)[..., None]
        return mask * np.array([0.9, 0.2, 0.1]) + (1 - mask) * np.array([0.1, 0.6, 0.9])
    if kind != "noise":
        raise ValueError(f"unknown texture kind {kind!r}")
    rng = np.random.default_rng(seed)
    tex = np.empty((size, size, 3))
    for c in range(3):
        layer = gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
        lo, hi = np.percentile(layer, [2, 98])
        tex[..., c] = np.clip((layer - lo) / (hi - lo), 0.0, 1.0)
    return tex


def read_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_png(image: np.ndarray, path: Path) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def save_scene(scene: Scene, path) -> Path:
    """Write ``scene.json`` plus one PNG per view (and the texture) into ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for view in scene.views:
        name = f"view_{view.view_id:03d}.png"
        write_png(view.image, root / name)
        entries.append({"id": view.view_id, "image": name,
                        "homography": [float(v) for v in view.homography.ravel()]})
    manifest = {"views": entries, "base_texture": None, "seed": scene.rng_seed}
    if scene.base_texture is not None:
        write_png(scene.base_texture, root / "texture.png")
        manifest["base_texture"] = "texture.png"
    (root / "scene.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root / "scene.json"


def load_scene(path) -> Scene:
    root = Path(path)
    manifest_path = root / "scene.json" if root.is_dir() else root
    root = manifest_path.parent
    if not manifest_path.exists():
        raise SceneIOError(f"scene manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        entries = manifest["views"]
        ids = [int(e["id"]) for e in entries]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SceneIOError(f"malformed scene manifest {manifest_path}: {exc}") from exc
    if len(set(ids)) != len(ids):
        raise SceneIOError(f"malformed scene manifest {manifest_path}: duplicate view id")
    views = []
    for entry in entries:
        image_path = root / entry["image"]
        if not image_path.exists():
            raise SceneIOError(f"missing view image {image_path}")
        H = np.asarray(entry["homography"], dtype=np.float64)
        if H.size != 9:
            raise SceneIOError(f"view {entry['id']}: homography must have 9 numbers")
        views.append(View(int(entry["id"]), read_png(image_path), H.reshape(3, 3)))
    texture = None
    if manifest.get("base_texture"):
        tex_path = root / manifest["base_texture"]
        if not tex_path.exists():
            raise SceneIOError(f"missing base texture {tex_path}")
        texture = read_png(tex_path)
    return Scene(views, base_texture=texture, rng_seed=int(manifest.get("seed", 0)))
