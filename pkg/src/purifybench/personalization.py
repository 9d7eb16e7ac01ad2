"""Identity-token fine-tuning and generation.

The adversary's capability: bind a fresh condition token to a small set of
instance images by fine-tuning a copy of the base denoiser, then sample from
the fine-tuned model to reproduce the identity. An optional prior term keeps
the model anchored to generic class images; it defaults off at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import (
    NULL_TOKEN,
    DenoiserModel,
    DiffusionSchedule,
    TrainingDivergedError,
    prepare_batch_tensors,
    reverse_diffusion,
)
from .imaging import mix_seed, tensor_to_hwc

MAX_INSTANCE_IMAGES = 32

# Published-scale personalization hyperparameters, recorded for reference;
# the toy defaults in FinetuneConfig are the desk-scale rescaling.
FULL_SCALE_REFERENCE = {"learning_rate": 5e-7, "steps": 1000}


@dataclass
class InstanceSet:
    """The images a personalization run binds to `token`."""

    images: list[np.ndarray]
    token: str
    identity_id: int

    def __post_init__(self) -> None:
        if not 1 <= len(self.images) <= MAX_INSTANCE_IMAGES:
            raise ValueError(
                f"instance set needs 1..{MAX_INSTANCE_IMAGES} images, "
                f"got {len(self.images)}"
            )
        shapes = {np.asarray(im).shape for im in self.images}
        if len(shapes) != 1:
            raise ValueError(f"instance images disagree on shape: {shapes}")
        if not self.token:
            raise ValueError("token must be non-empty")


@dataclass(frozen=True)
class FinetuneConfig:
    """Fine-tuning hyperparameters.

    Toy-scale defaults (lr 1e-4, 300 steps) suit a ~1e5-parameter denoiser;
    full-scale diffusion personalization uses a far smaller rate over ~1000
    steps, which does nothing at this parameter count.
    """

    learning_rate: float = 1e-4
    steps: int = 300
    prior_weight: float = 0.0
    prior_images: list[np.ndarray] | None = field(default=None)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be non-negative")
        if self.prior_weight > 0 and not self.prior_images:
            raise ValueError("prior_weight > 0 requires prior_images")


def _per_sample_losses(
    model: DenoiserModel,
    x0: torch.Tensor,
    cond_idx: torch.Tensor,
    schedule: DiffusionSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    """Per-sample denoising loss with fresh timestep/noise draws."""
    n = x0.shape[0]
    t = torch.randint(1, schedule.T_max + 1, (n,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    ab = schedule.alpha_bar_table(x0.dtype)[t][:, None, None, None]
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    pred = model.predict_eps(x_t, t, cond_idx)
    return ((pred - eps) ** 2).mean(dim=(1, 2, 3))


def _dreambooth_loss_tensor(
    model: DenoiserModel,
    batch_tensors: tuple[torch.Tensor, torch.Tensor],
    prior_tensors: tuple[torch.Tensor, torch.Tensor] | None,
    prior_weight: float,
    schedule: DiffusionSchedule,
    rng_seed: int,
) -> torch.Tensor:
    """Differentiable instance + weighted prior loss; raises on non-finite
    per-sample terms with the offending batch index."""
    x0, cond_idx = batch_tensors
    gen = torch.Generator().manual_seed(mix_seed(rng_seed, 0x1257))
    inst = _per_sample_losses(model, x0, cond_idx, schedule, gen)
    bad = torch.nonzero(~torch.isfinite(inst))
    if len(bad):
        raise TrainingDivergedError(
            f"non-finite instance loss at batch index {int(bad[0])}"
        )
    loss = inst.mean()
    if prior_tensors is not None and prior_weight > 0:
        p_gen = torch.Generator().manual_seed(mix_seed(rng_seed, 0x9121))
        prior = _per_sample_losses(
            model, prior_tensors[0], prior_tensors[1], schedule, p_gen
        )
        bad = torch.nonzero(~torch.isfinite(prior))
        if len(bad):
            raise TrainingDivergedError(
                f"non-finite prior loss at batch index {int(bad[0])}"
            )
        loss = loss + prior_weight * prior.mean()
    return loss


def dreambooth_loss(
    model: DenoiserModel,
    batch: list[tuple[np.ndarray, str]],
    prior_batch: list[tuple[np.ndarray, str]] | None,
    prior_weight: float,
    schedule: DiffusionSchedule,
    rng_seed: int,
) -> float:
    """Instance denoising loss plus prior_weight x prior-class loss.

    The prior term is zero when no prior batch is supplied. Deterministic in
    (inputs, rng_seed); the instance and prior noise draws are independent
    streams, so the result is affine in prior_weight.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    bt = prepare_batch_tensors(batch, model)
    pt = prepare_batch_tensors(prior_batch, model) if prior_batch else None
    weight = prior_weight if pt is not None else 0.0
    with torch.no_grad():
        val = _dreambooth_loss_tensor(model, bt, pt, weight, schedule, rng_seed)
    return float(val)


def finetune(
    base: DenoiserModel,
    instances: InstanceSet,
    config: FinetuneConfig,
    schedule: DiffusionSchedule,
) -> DenoiserModel:
    """Fine-tune a copy of `base` so `instances.token` reproduces the set.

    The base model is never mutated; the token is appended to the vocabulary
    if absent. Prior images (when configured) are conditioned on the null
    token, anchoring generic generation while the instance term memorizes.
    """
    if base.has_token(instances.token):
        model = base.clone()
    else:
        model = base.with_token(instances.token, seed=mix_seed(config.seed, 0x70CE))
    batch = [(img, instances.token) for img in instances.images]
    bt = prepare_batch_tensors(batch, model)
    pt = None
    if config.prior_weight > 0 and config.prior_images:
        pt = prepare_batch_tensors(
            [(img, NULL_TOKEN) for img in config.prior_images], model
        )
    if config.steps == 0:
        return model

    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    model.net.train()
    for step in range(config.steps):
        try:
            loss = _dreambooth_loss_tensor(
                model, bt, pt, config.prior_weight, schedule,
                mix_seed(config.seed, 0xF15E, step),
            )
        except TrainingDivergedError as err:
            raise TrainingDivergedError(f"{err} (fine-tune step {step})") from None
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.net.eval()
    return model


def generate(
    model: DenoiserModel,
    token: str,
    schedule: DiffusionSchedule,
    n: int = 30,
    seed: int = 0,
) -> list[np.ndarray]:
    """Sample n images by full reverse diffusion conditioned on `token`.

    Deterministic in (model, token, n, seed); outputs are (H, W, C) arrays
    clamped to [0, 1].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cond_idx = torch.full((n,), model.token_index(token), dtype=torch.long)
    c = model.image_shape[2]
    h, w = model.image_shape[0], model.image_shape[1]
    gen = torch.Generator().manual_seed(mix_seed(seed, 0x6E4E))
    x = torch.randn((n, c, h, w), generator=gen, dtype=model.dtype)
    x = reverse_diffusion(model, x, schedule.T_max, cond_idx, schedule, gen)
    x = ((x + 1.0) / 2.0).clamp(0.0, 1.0)
    return [tensor_to_hwc(img) for img in x]
