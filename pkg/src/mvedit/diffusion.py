"""Noise schedules, the analytic mixture edit model and guided samplers.

Everywhere below ``alpha_bar[t]`` is the cumulative product of the per-step
alphas; it is the coefficient used for the one-step clean-sample estimate

    x0_hat = (z_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)

and for the backward-guidance update, which is what makes ``x0_hat`` an exact
inverse of the forward noising process.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .consistency import DTYPE, as_tensor

logger = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor], torch.Tensor]

MAX_HALVINGS = 5


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    alpha_bar: np.ndarray
    kind: str = "linear"

    @property
    def alphas(self) -> np.ndarray:
        """Per-step alphas for t = 1..T (index 0 holds 1.0)."""
        out = np.ones_like(self.alpha_bar)
        out[1:] = self.alpha_bar[1:] / self.alpha_bar[:-1]
        return out

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[int(t)])


def make_schedule(T: int = 1000, kind: str = "linear") -> Schedule:
    if T < 10:
        raise ValueError("T must be >= 10")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = 1.0 - f[1:] / f[:-1]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 1e-8, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return Schedule(T, alpha_bar, kind)


def timesteps(T: int, num_steps: int) -> list[int]:
    """Descending re-spaced timesteps from T to 0 inclusive."""
    if not 1 <= num_steps <= T:
        raise ValueError("num_steps must lie in [1, T]")
    return [int(t) for t in np.round(np.linspace(T, 0, num_steps + 1))]


def predict_x0(z_t, t: int, eps, schedule: Schedule):
    a = schedule.ab(t)
    return (z_t - math.sqrt(1.0 - a) * eps) / math.sqrt(a)


# -- mixture edit model --------------------------------------------------------------


@dataclass(frozen=True)
class VariantTransform:
    """Pointwise recoloring ``gain * c[perm] + bias``."""

    perm: tuple[int, int, int]
    gain: float = 1.0
    bias: float = 0.0

    def apply(self, image):
        image = as_tensor(image)
        return self.gain * image[..., list(self.perm)] + self.bias


_PERMS = [(0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (2, 1, 0), (1, 0, 2)]


def default_transforms(k: int = 8) -> list[VariantTransform]:
    """Channel permutations, then channel-permuted inversions."""
    pool = [VariantTransform(p) for p in _PERMS] + [VariantTransform(p, -1.0, 1.0) for p in _PERMS]
    if not 2 <= k <= len(pool):
        raise ValueError(f"number of variants must lie in [2, {len(pool)}]")
    return pool[:k]


def _logits(z_t: torch.Tensor, flat_variants: torch.Tensor, sq_norms: torch.Tensor, a: float) -> torch.Tensor:
    # -|z - sqrt(a) v|^2 / (2 (1 - a)) with the v-independent |z|^2 dropped.
    return (2.0 * math.sqrt(a) * (flat_variants @ z_t.reshape(-1)) - a * sq_norms) / (2.0 * (1.0 - a))


def mixture_log_weights(z_t, t: int, variants, schedule: Schedule) -> torch.Tensor:
    z_t, variants = as_tensor(z_t), as_tensor(variants)
    flat = variants.reshape(variants.shape[0], -1)
    return torch.log_softmax(_logits(z_t, flat, flat.pow(2).sum(dim=1), schedule.ab(t)), dim=0)


def mixture_weights(z_t, t: int, variants, schedule: Schedule) -> torch.Tensor:
    return mixture_log_weights(z_t, t, variants, schedule).exp()


def mixture_posterior_mean(z_t, t: int, variants, schedule: Schedule) -> torch.Tensor:
    variants = as_tensor(variants)
    w = mixture_weights(z_t, t, variants, schedule)
    return (w @ variants.reshape(variants.shape[0], -1)).reshape(variants.shape[1:])


def mixture_eps(z_t, t: int, variants, schedule: Schedule) -> torch.Tensor:
    """Exact noise prediction for a uniform mixture of Dirac masses at ``variants``."""
    z_t = as_tensor(z_t)
    a = schedule.ab(t)
    x0 = mixture_posterior_mean(z_t, t, variants, schedule)
    return (z_t - math.sqrt(a) * x0) / math.sqrt(1.0 - a)


class _VariantBank:
    def __init__(self, variants: torch.Tensor) -> None:
        self.shape = tuple(variants.shape[1:])
        self.flat = variants.reshape(variants.shape[0], -1).contiguous()
        self.sq_norms = self.flat.pow(2).sum(dim=1)

    def posterior_mean(self, z_t: torch.Tensor, a: float) -> torch.Tensor:
        w = torch.softmax(_logits(z_t, self.flat, self.sq_norms, a), dim=0)
        return (w @ self.flat).reshape(self.shape)


class Denoiser(Protocol):
    def predict_eps(self, z_t: torch.Tensor, t: int, condition) -> torch.Tensor: ...


class MixtureEditModel:
    """Editor whose outputs for a view are K fixed recolorings of it.

    Because the transforms act pointwise on colors, variant k of two views of
    one scene agree at every correspondence: picking the same k everywhere is
    the consistent edit.
    """

    def __init__(self, schedule: Schedule, transforms: Sequence[VariantTransform] | None = None) -> None:
        self.schedule = schedule
        self.transforms = list(transforms) if transforms is not None else default_transforms()
        if len(self.transforms) < 2:
            raise ValueError("a mixture model needs at least 2 variants")

    @property
    def k(self) -> int:
        return len(self.transforms)

    def variants(self, condition) -> torch.Tensor:
        return torch.stack([tr.apply(condition) for tr in self.transforms])

    def _bank(self, condition) -> _VariantBank:
        # One-entry cache keyed on the condition object; the sampler reuses it every step.
        cached = getattr(self, "_cache", None)
        if cached is None or cached[0] is not condition:
            cached = (condition, _VariantBank(self.variants(condition)))
            self._cache = cached
        return cached[1]

    def predict_eps(self, z_t, t: int, condition) -> torch.Tensor:
        z_t = as_tensor(z_t)
        a = self.schedule.ab(t)
        x0 = self._bank(condition).posterior_mean(z_t, a)
        return (z_t - math.sqrt(a) * x0) / math.sqrt(1.0 - a)

    def posterior_mean(self, z_t, t: int, condition) -> torch.Tensor:
        return self._bank(condition).posterior_mean(as_tensor(z_t), self.schedule.ab(t))

    def generator(self, condition, t_star: int | None = None) -> Callable[[torch.Tensor], torch.Tensor]:
        """One-step generator ``f(z)``: the posterior mean at a fixed ``t_star``.

        The default sits near the noisy end of the schedule. At mid-schedule the
        posterior is already saturated on one variant for typical seeds, so
        ``f`` is flat and seed optimization cannot move it.
        """
        t_star = default_onestep_t(self.schedule) if t_star is None else int(t_star)
        bank = _VariantBank(self.variants(condition))
        a = self.schedule.ab(t_star)
        return lambda z: bank.posterior_mean(as_tensor(z), a)


def default_onestep_t(schedule: Schedule) -> int:
    return int(round(0.95 * schedule.T))


# -- guidance ------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_guidance: float = 0.05
    n_g: int = 700
    n_b: int = 3
    backward_lr: float = 0.1
    neighbor_count: int = 2
    sampler: str = "ancestral"
    num_steps: int = 50
    jacobian: str = "exact"
    onestep_steps: int = 200
    onestep_lr: float = 0.1
    onestep_t: int | None = None
    # Classifier-free guidance scales for real editing backends; unused here.
    text_guidance_scale: float = 7.5
    image_guidance_scale: float = 1.5

    def __post_init__(self) -> None:
        if self.n_g < 0:
            raise ValueError("n_g must be >= 0")
        if self.n_b < 0:
            raise ValueError("n_b must be >= 0")
        if self.neighbor_count < 0:
            raise ValueError("neighbor_count must be >= 0")
        if self.sampler not in ("ancestral", "deterministic"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.jacobian not in ("exact", "frozen"):
            raise ValueError(f"unknown jacobian treatment {self.jacobian!r}")
        if self.num_steps < 1 or self.onestep_steps < 0:
            raise ValueError("step counts must be positive")

    def check(self, schedule: Schedule) -> None:
        if self.n_g > schedule.T:
            raise ValueError(f"n_g={self.n_g} exceeds T={schedule.T}")
        if self.num_steps > schedule.T:
            raise ValueError(f"num_steps={self.num_steps} exceeds T={schedule.T}")
        if self.onestep_t is not None and not 0 <= self.onestep_t <= schedule.T:
            raise ValueError(f"onestep_t={self.onestep_t} outside [0, {schedule.T}]")


def _grad(loss: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if not loss.requires_grad:
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(loss, x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def guided_eps(z_t, t: int, denoiser: Denoiser, condition, loss_fn: LossFn | None,
               cfg: GuidanceConfig, schedule: Schedule) -> torch.Tensor:
    """Forward guidance: ``eps + lambda_t * grad_z L(x0_hat(z_t))``.

    ``lambda_t`` is ``cfg.lambda_guidance`` for ``t < cfg.n_g`` and 0 otherwise;
    when it is 0 the denoiser output is returned untouched.
    """
    z_t = as_tensor(z_t)
    if loss_fn is None or cfg.lambda_guidance == 0 or t >= cfg.n_g:
        with torch.no_grad():
            return denoiser.predict_eps(z_t, t, condition)
    z = z_t.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        if cfg.jacobian == "frozen":
            with torch.no_grad():
                eps = denoiser.predict_eps(z_t, t, condition)
        else:
            eps = denoiser.predict_eps(z, t, condition)
        loss = loss_fn(predict_x0(z, t, eps, schedule))
        grad = _grad(loss, z)
    norm = float(grad.norm())
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite guidance gradient at t={t} (grad norm={norm})")
    return eps.detach() + cfg.lambda_guidance * grad


def _descend(x0: torch.Tensor, objective: LossFn, steps: int, lr: float,
             losses: list | None = None) -> torch.Tensor:
    """Plain gradient descent with per-step step halving on loss increase."""
    x = x0.detach().clone()
    if steps == 0:
        if losses is not None:
            with torch.no_grad():
                losses.append(float(objective(x)))
        return x
    with torch.enable_grad():
        xg = x.clone().requires_grad_(True)
        out = objective(xg)
    current = float(out.detach())
    if losses is not None:
        losses.append(current)
    for i in range(steps):
        g = _grad(out, xg)
        if not torch.all(torch.isfinite(g)):
            raise NumericalError(f"non-finite gradient during descent (grad norm={float(g.norm())})")
        if not torch.any(g != 0):
            break
        step = lr
        for _ in range(MAX_HALVINGS + 1):
            with torch.enable_grad():
                xg = (x - step * g).requires_grad_(True)
                out = objective(xg)
            if float(out.detach()) <= current:
                break
            step /= 2.0
        else:
            break
        x, current = xg.detach(), float(out.detach())
        if losses is not None:
            losses.append(current)
    return x


def backward_correction(x0_hat, loss_fn: LossFn, n_b: int, lr: float,
                        losses: list | None = None) -> torch.Tensor:
    """Correction ``delta`` that lowers ``loss_fn(x0_hat + delta)``, from ``n_b`` descent steps."""
    x0_hat = as_tensor(x0_hat).detach()
    delta0 = torch.zeros_like(x0_hat)
    if n_b == 0:
        return delta0
    return _descend(delta0, lambda d: loss_fn(x0_hat + d), n_b, lr, losses)


def apply_backward(eps_tilde, delta, t: int, schedule: Schedule):
    """``eps' = eps_tilde - sqrt(alpha_bar / (1 - alpha_bar)) * delta``."""
    a = schedule.ab(t)
    if 1.0 - a < 1e-9:
        logger.warning("skipping backward guidance at t=%d: 1 - alpha_bar is %.3g", t, 1.0 - a)
        return eps_tilde
    if not torch.any(as_tensor(delta) != 0):
        return eps_tilde
    return eps_tilde - math.sqrt(a / (1.0 - a)) * delta


def _step(z, x0, eps, t: int, t_prev: int, schedule: Schedule, sampler: str, rng):
    a, a_prev = schedule.ab(t), schedule.ab(t_prev)
    if sampler == "deterministic":
        return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps
    sigma = math.sqrt((1.0 - a_prev) / (1.0 - a) * (1.0 - a / a_prev))
    noise = torch.as_tensor(rng.standard_normal(tuple(z.shape)))
    direction = math.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0))
    return math.sqrt(a_prev) * x0 + direction * eps + sigma * noise


def sample(denoiser: Denoiser, condition, schedule: Schedule, cfg: GuidanceConfig | None = None,
           seed: int = 0, loss_fn: LossFn | None = None) -> np.ndarray:
    """Run ``cfg.num_steps`` sampling steps from pure noise at t=T to t=0.

    With ``loss_fn`` set, the noise estimate at each step with ``t < n_g`` is
    replaced by the forward-guided one and then corrected by backward
    guidance. ``loss_fn=None`` (or ``lambda=0`` with ``n_b=0``) is the plain
    editor. Output is clamped to [0, 1].
    """
    cfg = cfg or GuidanceConfig()
    cfg.check(schedule)
    rng = np.random.default_rng(seed)
    shape = tuple(np.shape(condition))
    z = torch.as_tensor(rng.standard_normal(shape))
    ts = timesteps(schedule.T, cfg.num_steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = guided_eps(z, t, denoiser, condition, loss_fn, cfg, schedule)
        x0 = predict_x0(z, t, eps, schedule)
        if loss_fn is not None and cfg.n_b > 0 and t < cfg.n_g:
            delta = backward_correction(x0, loss_fn, cfg.n_b, cfg.backward_lr)
            eps = apply_backward(eps, delta, t, schedule)
            x0 = predict_x0(z, t, eps, schedule)
        with torch.no_grad():
            z = _step(z, x0, eps, t, t_prev, schedule, cfg.sampler, rng).detach()
    return torch.clamp(z, 0.0, 1.0).numpy()


def initial_noise(shape, seed: int) -> torch.Tensor:
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(tuple(shape)))


def one_step_edit(generator: Callable[[torch.Tensor], torch.Tensor], z_init, loss_fn: LossFn | None,
                  steps: int = 200, lr: float = 0.1, losses: list | None = None) -> np.ndarray:
    """Optimize the input noise of a one-step generator so ``loss_fn(f(z))`` drops."""
    z = as_tensor(z_init).detach()
    if steps > 0 and loss_fn is not None:
        z = _descend(z, lambda v: loss_fn(generator(v)), steps, lr, losses)
    with torch.no_grad():
        return torch.clamp(generator(z), 0.0, 1.0).numpy()
