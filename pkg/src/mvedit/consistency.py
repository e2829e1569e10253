"""Correspondence-based consistency loss between edited views.

For matches ``(x, y)`` computed on the unedited views, the loss between two
edited images is

    sum_{(x, y)} |A(x) - B(y)|_1  +  lambda * sum_{sub} d(patch_A(x), patch_B(y))

where the L1 term uses every match (bilinear lookups at sub-pixel points) and
the perceptual term ``d`` runs on a seeded subsample of patch pairs. All
arithmetic is in torch float64 so gradients come from autograd.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import sparse
import torch

from .matching import MatchSet

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class ConsistencyConfig:
    lambda_perceptual: float = 2.0
    patch_size: int = 64
    perceptual_subsample: int | None = 64  # None: every match
    subsample_seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size < 8 or self.patch_size % 2:
            raise ValueError("patch_size must be even and >= 8")
        if self.lambda_perceptual < 0:
            raise ValueError("lambda_perceptual must be >= 0")
        if self.perceptual_subsample is not None and self.perceptual_subsample < 0:
            raise ValueError("perceptual_subsample must be >= 0 or None")


class PerceptualMetric(Protocol):
    """Batched patch distance: ``(N, s, s, C)`` x ``(N, s, s, C)`` -> ``(N,)``.

    Must be symmetric, zero exactly for equal patches and differentiable.
    """

    def distance(self, patches_a: torch.Tensor, patches_b: torch.Tensor) -> torch.Tensor: ...


def _reduce_1d(n: int) -> sparse.csr_matrix:
    # Binomial [1 4 6 4 1] / 16 blur with edge replication, kept at even positions.
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    rows, cols, vals = [], [], []
    for i in range(0, n, 2):
        for j, k in enumerate(kernel):
            rows.append(i // 2)
            cols.append(min(max(i + j - 2, 0), n - 1))
            vals.append(k)
    return sparse.csr_matrix((vals, (rows, cols)), shape=((n + 1) // 2, n))


def _diff_1d(n: int) -> sparse.csr_matrix:
    return sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


@functools.lru_cache(maxsize=16)
def _pyramid_operators(levels: int, h: int, w: int) -> list[tuple]:
    """Per level: (reduce op or None, dx op, dy op, weight per value/dx/dy term)."""
    out = []
    lh, lw = h, w
    for i in range(levels):
        reduce = None
        if i:
            reduce = GatherOp(sparse.kron(_reduce_1d(lh), _reduce_1d(lw), format="csr"), (-1,))
            lh, lw = (lh + 1) // 2, (lw + 1) // 2
        dx = GatherOp(sparse.kron(sparse.identity(lh), _diff_1d(lw), format="csr"), (-1,))
        dy = GatherOp(sparse.kron(_diff_1d(lh), sparse.identity(lw), format="csr"), (-1,))
        counts = (lh * lw, lh * (lw - 1), (lh - 1) * lw)
        out.append((reduce, dx, dy, tuple(1.0 / (3.0 * n) if n else 0.0 for n in counts)))
    return out


class PyramidPerceptualMetric:
    """Multi-scale filter-bank distance used in place of a learned LPIPS.

    On each level of a Gaussian pyramid the mean squared difference of the
    values and of the horizontal and vertical finite differences are averaged;
    levels are summed. Every term is a linear filter of the patch difference,
    so it is evaluated as a chain of small sparse operators on that difference.
    """

    def __init__(self, levels: int = 3) -> None:
        self.levels = levels

    def distance(self, patches_a: torch.Tensor, patches_b: torch.Tensor) -> torch.Tensor:
        n, h, w, c = patches_a.shape
        x = (patches_a - patches_b).permute(1, 2, 0, 3).reshape(h * w, n * c)
        total = x.new_zeros(n)
        for reduce, dx, dy, (wv, wx, wy) in _pyramid_operators(self.levels, h, w):
            if reduce is not None:
                x = reduce(x)
            level = wv * x.pow(2).sum(dim=0)
            if wx:
                level = level + wx * dx(x).pow(2).sum(dim=0)
            if wy:
                level = level + wy * dy(x).pow(2).sum(dim=0)
            total = total + level.reshape(n, c).mean(dim=1)
        return total

    __call__ = distance


class SparseGather(torch.autograd.Function):
    """``Y = M @ X`` for a fixed sparse ``M`` and ``X`` of shape ``(H*W, C)``."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, op: "GatherOp") -> torch.Tensor:
        ctx.op = op
        return torch.from_numpy(op.matrix @ x.detach().numpy())

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        return torch.from_numpy(ctx.op.matrix_t @ grad.contiguous().numpy()), None


class GatherOp:
    """Linear lookup of image values; rows index outputs, columns flat pixels."""

    def __init__(self, matrix: sparse.csr_matrix, out_shape: tuple[int, ...]) -> None:
        self.matrix = matrix.tocsr()
        self.matrix_t = self.matrix.T.tocsr()
        self.out_shape = out_shape

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        flat = image.reshape(self.matrix.shape[1], -1)
        out = SparseGather.apply(flat, self) if flat.requires_grad else torch.from_numpy(
            self.matrix @ flat.detach().numpy())
        return out.reshape(*self.out_shape, flat.shape[-1])


def bilinear_op(pts: np.ndarray, size: tuple[int, int]) -> GatherOp:
    """Bilinear lookups at ``(N, 2)`` points, clamped into an ``(h, w)`` image."""
    h, w = size
    pts = np.atleast_2d(pts)
    x = np.clip(pts[:, 0], 0.0, w - 1)
    y = np.clip(pts[:, 1], 0.0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx, fy = x - x0, y - y0
    cols = np.stack([y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1], axis=1)
    vals = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    rows = np.repeat(np.arange(len(pts)), 4)
    m = sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(pts), h * w))
    return GatherOp(m, (len(pts),))


def patch_op(centers: np.ndarray, size: int, shape: tuple[int, int]) -> GatherOp:
    """``size x size`` edge-clamped windows around rounded centers."""
    h, w = shape
    c = np.floor(np.atleast_2d(centers) + 0.5).astype(np.int64)
    offs = np.arange(size) - size // 2
    r = np.clip(c[:, 1, None] + offs, 0, h - 1)
    q = np.clip(c[:, 0, None] + offs, 0, w - 1)
    cols = (r[:, :, None] * w + q[:, None, :]).ravel()
    m = sparse.csr_matrix((np.ones(len(cols)), (np.arange(len(cols)), cols)), shape=(len(cols), h * w))
    return GatherOp(m, (len(c), size, size))


def sample_at(image, p) -> torch.Tensor:
    """Bilinear color lookup at point(s) ``p`` (clamped into the image)."""
    image = as_tensor(image)
    out = bilinear_op(np.asarray(p, dtype=np.float64), image.shape[:2])(image)
    return out[0] if np.ndim(p) == 1 else out


def extract_patches(image, centers, size: int) -> torch.Tensor:
    """Edge-clamped ``size x size`` patches around rounded centers: ``(N, s, s, C)``."""
    image = as_tensor(image)
    return patch_op(np.asarray(centers, dtype=np.float64), size, image.shape[:2])(image)


def extract_patch(image, center, size: int) -> torch.Tensor:
    return extract_patches(image, np.asarray(center, dtype=np.float64)[None], size)[0]


def perceptual_subsample(n_matches: int, cfg: ConsistencyConfig) -> np.ndarray:
    """Indices of the matches that get a perceptual term.

    Depends only on the match count and seed, so a reversed match set picks
    the same pairs.
    """
    k = n_matches if cfg.perceptual_subsample is None else min(cfg.perceptual_subsample, n_matches)
    if k == n_matches:
        return np.arange(n_matches)
    rng = np.random.default_rng(cfg.subsample_seed)
    return np.sort(rng.choice(n_matches, size=k, replace=False))


class _PairTerms:
    """Lookup operators for one match set on fixed image sizes."""

    def __init__(self, ms: MatchSet, shape_a, shape_b, cfg: ConsistencyConfig) -> None:
        self.sample_a = bilinear_op(ms.xa, shape_a)
        self.sample_b = bilinear_op(ms.xb, shape_b)
        sub = perceptual_subsample(len(ms), cfg)
        self.patch_a = self.patch_b = None
        if cfg.lambda_perceptual > 0 and len(sub) > 0:
            self.patch_a = patch_op(ms.xa[sub], cfg.patch_size, shape_a)
            self.patch_b = patch_op(ms.xb[sub], cfg.patch_size, shape_b)


def consistency_loss(edited_a, edited_b, matches: MatchSet,
                     cfg: ConsistencyConfig | None = None, metric=None) -> float:
    cfg = cfg or ConsistencyConfig()
    metric = metric or PyramidPerceptualMetric()
    if len(matches) == 0:
        return 0.0
    a, b = as_tensor(edited_a), as_tensor(edited_b)
    terms = _PairTerms(matches, a.shape[:2], b.shape[:2], cfg)
    with torch.no_grad():
        loss = (terms.sample_a(a) - terms.sample_b(b)).abs().sum()
        if terms.patch_a is not None:
            loss = loss + cfg.lambda_perceptual * metric.distance(terms.patch_a(a), terms.patch_b(b)).sum()
    return float(loss)


class ConsistencyLoss:
    """Loss of a candidate image against already edited neighbors.

    ``neighbors`` holds ``(edited_image, matchset)`` pairs where each match
    set has the candidate's view as ``view_a``. Calling the object on a
    candidate tensor returns a differentiable scalar; every neighbor-side
    quantity is constant and computed once.
    """

    def __init__(self, neighbors: Sequence, cfg: ConsistencyConfig | None = None,
                 metric=None, shape: tuple[int, int] | None = None) -> None:
        self.cfg = cfg or ConsistencyConfig()
        self.metric = metric or PyramidPerceptualMetric()
        self._pairs = []
        for edited, ms in neighbors:
            if len(ms) == 0:
                continue
            b = as_tensor(edited).detach()
            shape_a = shape or (ms.size if ms.size is not None else tuple(b.shape[:2]))
            terms = _PairTerms(ms, shape_a, b.shape[:2], self.cfg)
            patches_b = terms.patch_b(b) if terms.patch_b is not None else None
            self._pairs.append((terms, terms.sample_b(b), patches_b))

    def __len__(self) -> int:
        return len(self._pairs)

    def __call__(self, candidate: torch.Tensor) -> torch.Tensor:
        total = candidate.new_zeros(())
        for terms, samples_b, patches_b in self._pairs:
            total = total + (terms.sample_a(candidate) - samples_b).abs().sum()
            if patches_b is not None:
                d = self.metric.distance(terms.patch_a(candidate), patches_b)
                total = total + self.cfg.lambda_perceptual * d.sum()
        return total

    def value(self, candidate) -> float:
        with torch.no_grad():
            return float(self(as_tensor(candidate)))

    def grad(self, candidate) -> np.ndarray:
        x = as_tensor(candidate).detach().clone().requires_grad_(True)
        loss = self(x)
        if not loss.requires_grad:
            return np.zeros(tuple(x.shape))
        (g,) = torch.autograd.grad(loss, x)
        return g.numpy()


def consistency_loss_multi(candidate, neighbors: Sequence,
                           cfg: ConsistencyConfig | None = None, metric=None) -> float:
    return ConsistencyLoss(neighbors, cfg, metric, shape=np.shape(candidate)[:2]).value(candidate)


def consistency_grad(candidate, neighbors: Sequence,
                     cfg: ConsistencyConfig | None = None, metric=None) -> np.ndarray:
    """Gradient of ``consistency_loss_multi`` with respect to every candidate value."""
    return ConsistencyLoss(neighbors, cfg, metric, shape=np.shape(candidate)[:2]).grad(candidate)
