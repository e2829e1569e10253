"""Point correspondences between view pairs.

Matches always live in the pixel coordinates of the *unedited* views. The
oracle matcher derives them exactly from the scene homographies; the text
loader is the ingestion point for externally computed dense matches.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .scene import Scene, in_bounds, pixel_grid, warp_point


class UnsupportedSceneError(ValueError):
    pass


class MatchFileError(ValueError):
    pass


class Match(NamedTuple):
    x: tuple[float, float]
    y: tuple[float, float]
    certainty: float


@dataclass
class MatchSet:
    """Correspondences ``xa[i] <-> xb[i]`` between ``view_a`` and ``view_b``."""

    view_a: int
    view_b: int
    xa: np.ndarray
    xb: np.ndarray
    certainty: np.ndarray
    size: tuple[int, int] | None = None  # (height, width) of the unedited views

    def __post_init__(self) -> None:
        if self.view_a == self.view_b:
            raise ValueError("a MatchSet must relate two different views")
        self.xa = np.asarray(self.xa, dtype=np.float64).reshape(-1, 2)
        self.xb = np.asarray(self.xb, dtype=np.float64).reshape(-1, 2)
        self.certainty = np.asarray(self.certainty, dtype=np.float64).reshape(-1)
        if not len(self.xa) == len(self.xb) == len(self.certainty):
            raise ValueError("match arrays must have equal length")
        if not np.all(np.isfinite(self.certainty)):
            raise ValueError("match certainties must be finite")

    def __len__(self) -> int:
        return len(self.certainty)

    def __iter__(self) -> Iterator[Match]:
        for a, b, c in zip(self.xa, self.xb, self.certainty):
            yield Match((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), float(c))

    def reversed(self) -> "MatchSet":
        return MatchSet(self.view_b, self.view_a, self.xb.copy(), self.xa.copy(),
                        self.certainty.copy(), self.size)

    def subset(self, index: np.ndarray) -> "MatchSet":
        return MatchSet(self.view_a, self.view_b, self.xa[index], self.xb[index],
                        self.certainty[index], self.size)

    def oriented(self, view_a: int) -> "MatchSet":
        """This set with ``view_a`` as its first view, flipping if needed."""
        if view_a == self.view_a:
            return self
        if view_a == self.view_b:
            return self.reversed()
        raise ValueError(f"view {view_a} is not part of match set {self.view_a}-{self.view_b}")


@dataclass(frozen=True)
class MatchFilterConfig:
    certainty_min: float = 0.05
    max_matches: int = 50_000

    def __post_init__(self) -> None:
        if not 0.0 <= self.certainty_min < 1.0:
            raise ValueError("certainty_min must lie in [0, 1)")
        if self.max_matches < 1:
            raise ValueError("max_matches must be >= 1")


def oracle_matches(scene: Scene, a: int, b: int, grid_step: int = 2,
                   certainty_noise: float = 0.0, seed: int = 0) -> MatchSet:
    """Exact correspondences from the scene homographies.

    Every grid point of view ``a`` whose image under ``H_b @ inv(H_a)`` lands
    inside view ``b`` becomes a match. ``certainty_noise > 0`` replaces the
    constant certainty 1.0 with ``1 - noise * U(0, 1)`` for filter testing.
    """
    if not scene.is_synthetic:
        raise UnsupportedSceneError(
            "oracle matching needs a synthetic scene with homographies; use load_matches instead")
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    va, vb = scene.view(a), scene.view(b)
    pts = pixel_grid(va.size, grid_step)
    mapped = warp_point(vb.homography @ np.linalg.inv(va.homography), pts)
    keep = in_bounds(mapped, vb.size)
    certainty = np.ones(int(keep.sum()))
    if certainty_noise > 0:
        rng = np.random.default_rng(seed)
        certainty = 1.0 - certainty_noise * rng.uniform(size=certainty.shape)
    return MatchSet(a, b, pts[keep], mapped[keep], certainty, va.size)


def all_pair_matches(scene: Scene, grid_step: int = 2,
                     cfg: MatchFilterConfig | None = None) -> dict[tuple[int, int], MatchSet]:
    cfg = cfg or MatchFilterConfig()
    out = {}
    for a, b in itertools.combinations(scene.view_ids, 2):
        out[(a, b)] = filter_matches(oracle_matches(scene, a, b, grid_step), cfg)
    return out


def filter_matches(ms: MatchSet, cfg: MatchFilterConfig) -> MatchSet:
    """Drop matches with certainty <= ``certainty_min`` and cap the count.

    When more than ``max_matches`` survive, the most certain ones are kept
    (ties go to the earlier match). Survivors stay in their original order.
    """
    keep = np.flatnonzero(ms.certainty > cfg.certainty_min)
    if len(keep) > cfg.max_matches:
        ranked = np.argsort(-ms.certainty[keep], kind="stable")[: cfg.max_matches]
        keep = np.sort(keep[ranked])
    return ms.subset(keep)


class MatchIndex:
    """Symmetric lookup of match counts per unordered view pair."""

    def __init__(self, counts: dict[tuple[int, int], int] | None = None) -> None:
        self._counts: dict[tuple[int, int], int] = {}
        for (a, b), n in (counts or {}).items():
            self._counts[self._key(a, b)] = int(n)

    @staticmethod
    def _key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a <= b else (b, a)

    def count(self, a: int, b: int) -> int:
        return self._counts.get(self._key(a, b), 0)

    def total(self, view: int) -> int:
        return sum(n for (a, b), n in self._counts.items() if view in (a, b))

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self._counts)

    def __len__(self) -> int:
        return len(self._counts)


def match_count_index(matchsets) -> MatchIndex:
    if isinstance(matchsets, dict):
        matchsets = matchsets.values()
    index = MatchIndex()
    for ms in matchsets:
        index._counts[MatchIndex._key(ms.view_a, ms.view_b)] = len(ms)
    return index


def save_matches(ms: MatchSet, path) -> None:
    h, w = ms.size if ms.size is not None else (0, 0)
    lines = [f"# matches view_a={ms.view_a} view_b={ms.view_b} width={w} height={h}"]
    for a, b, c in zip(ms.xa, ms.xb, ms.certainty):
        lines.append(f"{a[0]:.9g} {a[1]:.9g} {b[0]:.9g} {b[1]:.9g} {c:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict[str, int]:
    fields = {}
    for token in line.lstrip("#").split()[1:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise MatchFileError(f"malformed header token {token!r}")
        try:
            fields[key] = int(value)
        except ValueError:
            raise MatchFileError(f"header field {key} is not an integer: {value!r}") from None
    return fields


def load_matches(path, view_a: int | None = None, view_b: int | None = None) -> MatchSet:
    """Parse a match file; see ``save_matches`` for the format.

    Points outside the image bounds declared in the header are clamped onto
    the border and their certainty set to 0, so filtering removes them.
    """
    path = Path(path)
    if not path.exists():
        raise MatchFileError(f"match file not found: {path}")
    header: dict[str, int] = {}
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.lstrip("#").split()[:1] == ["matches"]:
                header = _parse_header(line)
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MatchFileError(f"{path}:{lineno}: expected 5 values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise MatchFileError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
    data = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    va = header.get("view_a", view_a if view_a is not None else 0)
    vb = header.get("view_b", view_b if view_b is not None else 1)
    xa, xb, cert = data[:, 0:2].copy(), data[:, 2:4].copy(), data[:, 4].copy()
    size = None
    if header.get("width", 0) > 0 and header.get("height", 0) > 0:
        size = (header["height"], header["width"])
        hi = np.array([size[1] - 1, size[0] - 1], dtype=np.float64)
        outside = ~(in_bounds(xa, size) & in_bounds(xb, size))
        xa = np.clip(xa, 0.0, hi)
        xb = np.clip(xb, 0.0, hi)
        cert[outside] = 0.0
    return MatchSet(va, vb, xa, xb, cert, size)
