"""Protective perturbation generation.

The defender's side of the pipeline: sign-gradient (PGD) attacks that push
images away from what a personalization model can learn, run inside an
alternating loop that keeps re-fitting a surrogate model so the
perturbations stay effective against a fine-tuned adversary. Supports an
optional per-pixel budget mask concentrating the perturbation in
high-frequency regions and pluggable timestep selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import (
    DenoiserModel,
    DiffusionSchedule,
    TrainConfig,
    TrainingDivergedError,
    train,
)
from .imaging import check_image, hwc_to_tensor, mix_seed, to_grayscale
from .metrics import _gaussian_taps, _sep_filter

BUDGET_SLACK = 1e-6

INIT_MODES = ("zero", "uniform-in-ball", "gaussian-clipped")
SELECTOR_NAMES = ("uniform-random", "greedy-topk")


class AttackFailedError(RuntimeError):
    """A gradient computation inside the attack went non-finite."""


@dataclass(frozen=True)
class PerturbationBudget:
    """L-infinity perturbation constraint for the protective attack.

    `eta` is the global radius, `alpha_step` the per-step sign-gradient step
    size, and `freq_mask` an optional (H, W) array of per-pixel budget
    multipliers in [0, 1] (eta stays the global cap).
    """

    eta: float = 0.05
    alpha_step: float = 0.005
    pgd_steps: int = 3
    init_mode: str = "uniform-in-ball"
    freq_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0,1]")
        if self.alpha_step <= 0:
            raise ValueError("alpha_step must be positive")
        if self.eta > 0 and self.alpha_step > self.eta:
            raise ValueError("alpha_step must not exceed eta")
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be non-negative")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.freq_mask is not None:
            m = np.asarray(self.freq_mask, dtype=np.float64)
            if m.ndim != 2:
                raise ValueError("freq_mask must be a 2-d (H, W) array")
            if not np.isfinite(m).all():
                raise ValueError("freq_mask must be finite")
            if m.min() < 0.0 or m.max() > 1.0 + 1e-9:
                raise ValueError("freq_mask values must lie in [0, 1]")
            object.__setattr__(self, "freq_mask", m)

    def pixel_cap(self, image_shape: tuple[int, ...]) -> np.ndarray:
        """Per-pixel |delta| cap broadcast to the image shape."""
        cap = np.full(image_shape, self.eta, dtype=np.float64)
        if self.freq_mask is not None:
            if self.freq_mask.shape != image_shape[:2]:
                raise ValueError(
                    f"freq_mask shape {self.freq_mask.shape} does not match "
                    f"image {image_shape[:2]}"
                )
            cap *= self.freq_mask[..., None] if len(image_shape) == 3 else self.freq_mask
        return cap


@dataclass(frozen=True)
class AsplConfig:
    """Alternating surrogate/perturbation loop parameters.

    Each iteration: (1) fine-tune a throwaway clone of the surrogate on the
    clean reference set, (2) PGD-update every perturbation against that
    clone, (3) fine-tune the persistent surrogate on the perturbed images.
    """

    aspl_iters: int = 50
    surrogate_finetune_steps: int = 20
    clean_ref_set: list[np.ndarray] = field(default_factory=list)
    timestep_selector: str = "uniform-random"
    topk: int = 5
    surrogate_learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.aspl_iters < 1:
            raise ValueError("aspl_iters must be >= 1")
        if self.surrogate_finetune_steps < 0:
            raise ValueError("surrogate_finetune_steps must be non-negative")
        if not self.clean_ref_set:
            raise ValueError("clean_ref_set must be non-empty")
        if self.timestep_selector not in SELECTOR_NAMES:
            raise ValueError(f"timestep_selector must be one of {SELECTOR_NAMES}")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")


@dataclass
class AsplTrace:
    """Instrumented counters and final models from a defense run."""

    clone_finetunes: int = 0
    perturbation_updates: int = 0
    surrogate_updates: int = 0
    final_clone: DenoiserModel | None = None
    final_surrogate: DenoiserModel | None = None


@dataclass
class ProtectedSet:
    """Perturbed publication set: originals plus budget-bounded deltas."""

    originals: list[np.ndarray]
    deltas: list[np.ndarray]
    token: str
    budget: PerturbationBudget
    trace: AsplTrace | None = None

    def __post_init__(self) -> None:
        if len(self.originals) != len(self.deltas):
            raise ValueError("originals and deltas must pair up")
        if not self.originals:
            raise ValueError("protected set must be non-empty")
        for i, (x, d) in enumerate(zip(self.originals, self.deltas)):
            x = np.asarray(x)
            d = np.asarray(d)
            if x.shape != d.shape:
                raise ValueError(f"image {i}: delta shape mismatch")
            cap = self.budget.pixel_cap(x.shape)
            if (np.abs(d) > cap + BUDGET_SLACK).any():
                raise ValueError(f"image {i}: delta exceeds budget")
            y = x + d
            if y.min() < -1e-9 or y.max() > 1.0 + 1e-9:
                raise ValueError(f"image {i}: perturbed pixels leave [0,1]")

    def images(self) -> list[np.ndarray]:
        return [np.clip(x + d, 0.0, 1.0) for x, d in zip(self.originals, self.deltas)]

    def max_deltas(self) -> list[float]:
        return [float(np.abs(d).max()) for d in self.deltas]


# ---------------------------------------------------------------------------
# Conditional loss and its input gradient
# ---------------------------------------------------------------------------


def _validate_timesteps(timesteps: list[int], schedule: DiffusionSchedule) -> list[int]:
    ts = [int(t) for t in timesteps]
    if not ts:
        raise ValueError("timesteps must be non-empty")
    for t in ts:
        if not 1 <= t <= schedule.T_max:
            raise ValueError(f"timestep {t} outside [1, {schedule.T_max}]")
    return ts


def _per_timestep_losses(
    model: DenoiserModel,
    x0: torch.Tensor,
    cond: torch.Tensor,
    timesteps: list[int],
    schedule: DiffusionSchedule,
    seed: int,
) -> list[torch.Tensor]:
    """One scalar loss per timestep; the noise draw for timestep t depends
    only on (seed, t), so multi-timestep calls match single-timestep ones."""
    table = schedule.alpha_bar_table(x0.dtype)
    losses = []
    for t in timesteps:
        gen = torch.Generator().manual_seed(mix_seed(seed, t))
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        ab = table[t]
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
        t_vec = torch.full((x0.shape[0],), t, dtype=torch.long)
        pred = model.predict_eps(x_t, t_vec, cond)
        losses.append(((pred - eps) ** 2).mean())
    return losses


def cond_loss(
    model: DenoiserModel,
    x: np.ndarray,
    token: str,
    timesteps: list[int],
    schedule: DiffusionSchedule,
    seed: int,
) -> float:
    """Mean token-conditioned denoising loss of `x` over `timesteps`.

    This is the objective the protective attack ascends. Averaging is done
    in float64 over per-timestep values, so the multi-timestep result equals
    the arithmetic mean of matched single-timestep calls exactly.
    """
    ts = _validate_timesteps(timesteps, schedule)
    img = check_image(x, "x")
    x0 = (hwc_to_tensor(img, model.dtype) * 2.0 - 1.0)[None]
    cond = torch.tensor([model.token_index(token)])
    with torch.no_grad():
        losses = _per_timestep_losses(model, x0, cond, ts, schedule, seed)
    return float(sum(float(v) for v in losses) / len(losses))


def cond_loss_grad(
    model: DenoiserModel,
    x: np.ndarray,
    token: str,
    timesteps: list[int],
    schedule: DiffusionSchedule,
    seed: int,
) -> tuple[float, np.ndarray]:
    """(loss, d loss / d x) with the gradient in image space.

    Matches `cond_loss`'s noise draws; the gradient is taken with respect to
    the [0,1]-scale pixels (the model consumes a [-1,1] rescaling, hence the
    chain-rule factor of 2 folded in).
    """
    ts = _validate_timesteps(timesteps, schedule)
    img = check_image(x, "x")
    x_unit = hwc_to_tensor(img, model.dtype)[None].requires_grad_(True)
    x0 = x_unit * 2.0 - 1.0
    cond = torch.tensor([model.token_index(token)])
    losses = _per_timestep_losses(model, x0, cond, ts, schedule, seed)
    loss = torch.stack(losses).mean()
    grad = torch.autograd.grad(loss, x_unit)[0][0]
    grad_np = grad.permute(1, 2, 0).numpy().astype(np.float64)
    return float(loss.detach()), grad_np


# ---------------------------------------------------------------------------
# Timestep selectors
# ---------------------------------------------------------------------------


class UniformRandomSelector:
    """Fresh uniformly random timesteps at every attack step."""

    recompute_each_step = True

    def __init__(self, count: int = 1):
        if count < 1:
            raise ValueError("count must be >= 1")
        self.count = count

    def pick(
        self,
        model: DenoiserModel,
        x: np.ndarray,
        token: str,
        schedule: DiffusionSchedule,
        seed: int,
        step: int,
    ) -> list[int]:
        gen = torch.Generator().manual_seed(mix_seed(seed, 0x5E1, step))
        ts = torch.randint(1, schedule.T_max + 1, (self.count,), generator=gen)
        return [int(t) for t in ts]


class GreedyTopKSelector:
    """Keep the k candidate timesteps with the largest input-gradient norm.

    Candidates are scored once per attacked image (against the current
    model) rather than per attack step; the score is the L2 norm of
    d cond_loss / d x at that single timestep.
    """

    recompute_each_step = False

    def __init__(self, k: int = 5, candidates: list[int] | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.candidates = candidates

    def pick(
        self,
        model: DenoiserModel,
        x: np.ndarray,
        token: str,
        schedule: DiffusionSchedule,
        seed: int,
        step: int,
    ) -> list[int]:
        cands = self.candidates
        if cands is None:
            stride = max(1, schedule.T_max // 24)
            cands = list(range(1, schedule.T_max + 1, stride))
        scores = []
        for t in cands:
            _, grad = cond_loss_grad(model, x, token, [t], schedule, seed)
            scores.append(float(np.linalg.norm(grad)))
        order = np.argsort(scores)[::-1]
        chosen = [cands[i] for i in order[: self.k]]
        return sorted(chosen)


def make_selector(config: AsplConfig):
    if config.timestep_selector == "uniform-random":
        return UniformRandomSelector()
    return GreedyTopKSelector(k=config.topk)


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------


def _init_delta(
    x: np.ndarray, budget: PerturbationBudget, seed: int
) -> np.ndarray:
    cap = budget.pixel_cap(x.shape)
    if budget.init_mode == "zero" or budget.eta == 0:
        delta = np.zeros_like(x)
    else:
        gen = torch.Generator().manual_seed(mix_seed(seed, 0x171D))
        if budget.init_mode == "uniform-in-ball":
            u = torch.rand(x.shape, generator=gen, dtype=torch.float64).numpy()
            delta = (2.0 * u - 1.0) * cap
        else:  # gaussian-clipped
            g = torch.randn(x.shape, generator=gen, dtype=torch.float64).numpy()
            delta = np.clip(budget.eta * g, -cap, cap)
    return project_delta(delta, x, budget)


def project_delta(
    delta: np.ndarray, x: np.ndarray, budget: PerturbationBudget
) -> np.ndarray:
    """Project onto the (masked) L-inf ball intersected with [0,1] pixels."""
    cap = budget.pixel_cap(x.shape)
    delta = np.clip(delta, -cap, cap)
    return np.clip(x + delta, 0.0, 1.0) - x


def pgd_step(
    delta: np.ndarray,
    grad: np.ndarray,
    x: np.ndarray,
    budget: PerturbationBudget,
) -> np.ndarray:
    """One sign-ascent update followed by projection."""
    return project_delta(delta + budget.alpha_step * np.sign(grad), x, budget)


def pgd_attack(
    model: DenoiserModel,
    x: np.ndarray,
    token: str,
    budget: PerturbationBudget,
    selector,
    schedule: DiffusionSchedule,
    seed: int,
    init_delta: np.ndarray | None = None,
) -> np.ndarray:
    """Sign-gradient ascent on the conditional loss within the budget.

    Returns the final delta. `init_delta` warm-starts the attack (used by
    the alternating loop); otherwise the budget's init_mode applies.
    """
    x = check_image(x, "x")
    if budget.eta == 0:
        return np.zeros_like(x)
    if init_delta is None:
        delta = _init_delta(x, budget, seed)
    else:
        delta = project_delta(np.asarray(init_delta, dtype=np.float64), x, budget)
    timesteps: list[int] | None = None
    for step in range(budget.pgd_steps):
        if timesteps is None or selector.recompute_each_step:
            timesteps = selector.pick(
                model, x + delta, token, schedule, mix_seed(seed, 0x7C), step
            )
        _, grad = cond_loss_grad(
            model, x + delta, token, timesteps, schedule, mix_seed(seed, 0x10, step)
        )
        if not np.isfinite(grad).all():
            raise AttackFailedError(f"non-finite gradient at pgd step {step}")
        delta = pgd_step(delta, grad, x, budget)
    return delta


# ---------------------------------------------------------------------------
# Alternating surrogate / perturbation loop
# ---------------------------------------------------------------------------


def aspl_defend(
    base_model: DenoiserModel,
    protect_images: list[np.ndarray],
    token: str,
    budget: PerturbationBudget,
    config: AsplConfig,
    schedule: DiffusionSchedule,
) -> ProtectedSet:
    """Run the three-step alternating defense and emit a ProtectedSet.

    Per iteration: fine-tune a clone of the surrogate on the clean reference
    set, PGD-update every delta against that clone, then fine-tune the
    persistent surrogate on the perturbed images. Deltas persist across
    iterations (each PGD call warm-starts from the previous delta).
    """
    if not protect_images:
        raise ValueError("protect_images must be non-empty")
    originals = [check_image(im, f"protect_images[{i}]") for i, im in enumerate(protect_images)]

    if base_model.has_token(token):
        surrogate = base_model.clone()
    else:
        surrogate = base_model.with_token(token, seed=mix_seed(config.seed, 0xA5))
    selector = make_selector(config)
    ref_batch = [(im, token) for im in config.clean_ref_set]

    deltas = [
        _init_delta(x, budget, mix_seed(config.seed, 0xD0, i))
        for i, x in enumerate(originals)
    ]
    trace = AsplTrace()
    clone = surrogate
    for it in range(config.aspl_iters):
        try:
            clone = train(
                surrogate,
                ref_batch,
                TrainConfig(
                    learning_rate=config.surrogate_learning_rate,
                    steps=config.surrogate_finetune_steps,
                    batch_size=min(16, len(ref_batch)),
                    seed=mix_seed(config.seed, 0xC1, it),
                ),
                schedule,
            )
            trace.clone_finetunes += 1

            for i, x in enumerate(originals):
                deltas[i] = pgd_attack(
                    clone, x, token, budget, selector, schedule,
                    seed=mix_seed(config.seed, 0xB2, it, i),
                    init_delta=deltas[i],
                )
            trace.perturbation_updates += 1

            perturbed_batch = [
                (np.clip(x + d, 0.0, 1.0), token) for x, d in zip(originals, deltas)
            ]
            surrogate = train(
                surrogate,
                perturbed_batch,
                TrainConfig(
                    learning_rate=config.surrogate_learning_rate,
                    steps=config.surrogate_finetune_steps,
                    batch_size=min(16, len(perturbed_batch)),
                    seed=mix_seed(config.seed, 0xC3, it),
                ),
                schedule,
            )
            trace.surrogate_updates += 1
        except (AttackFailedError, TrainingDivergedError) as err:
            raise type(err)(f"{err} (defense iteration {it})") from None

    trace.final_clone = clone
    trace.final_surrogate = surrogate
    return ProtectedSet(
        originals=originals, deltas=deltas, token=token, budget=budget, trace=trace
    )


# ---------------------------------------------------------------------------
# High-frequency budget mask
# ---------------------------------------------------------------------------


def make_hf_mask(
    x: np.ndarray, cutoff: float = 0.3, low_mult: float = 0.2
) -> np.ndarray:
    """Per-pixel budget multiplier concentrating the attack in busy regions.

    The local high-pass response magnitude (pixel minus Gaussian-blurred
    pixel) is normalized to [0,1]; pixels at or above its cutoff-quantile
    get multiplier 1.0, the rest low_mult, and the map is lightly smoothed
    to avoid blocky budget edges. A constant image yields a uniform
    low_mult mask.
    """
    if not 0.0 < cutoff <= 0.5:
        raise ValueError("cutoff must be in (0, 0.5]")
    if not 0.0 <= low_mult <= 1.0:
        raise ValueError("low_mult must be in [0, 1]")
    gray = to_grayscale(check_image(x, "x"))
    taps = _gaussian_taps(2, 1.0)
    response = np.abs(gray - _sep_filter(gray, taps))
    peak = response.max()
    if peak < 1e-9:
        return np.full(gray.shape, float(low_mult))
    response = response / peak
    threshold = np.quantile(response, cutoff)
    # Slack keeps uniformly-busy images (all responses equal up to float
    # noise) from being split arbitrarily by the quantile.
    mask = np.where(response >= threshold - 1e-9, 1.0, float(low_mult))
    mask = _sep_filter(mask, _gaussian_taps(1, 0.7))
    return np.clip(mask, 0.0, 1.0)
