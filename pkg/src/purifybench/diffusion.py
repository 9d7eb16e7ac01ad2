"""Minimal conditional denoising diffusion model.

One model class serves three roles in the pipeline: the generator that gets
personalized, the defender's surrogate, and the prior behind diffusion-based
purification. Public entry points take (H, W, C) numpy images; tensors in
NCHW layout and the [-1, 1] value convention stay internal.

Timestep convention: ``t`` counts applied noising steps, so ``t = 0`` is the
clean image (``alpha_bar(0) == 1``) and ``t = T_max`` is (nearly) pure noise.
Schedule arrays are indexed by ``t - 1``.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import check_image, hwc_to_tensor, mix_seed, tensor_to_hwc

NULL_TOKEN = "<none>"

CHECKPOINT_MAGIC = "PURIFYBENCH-DDM"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class UnknownTokenError(KeyError):
    """Raised when a condition token is not in the model vocabulary."""


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta noise schedule with cached cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T_max(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention after t noising steps (1.0 at t=0)."""
        if not 0 <= t <= self.T_max:
            raise ValueError(f"timestep {t} outside [0, {self.T_max}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T_max:
            raise ValueError(f"timestep {t} outside [1, {self.T_max}]")
        return float(self.betas[t - 1])

    def alpha_bar_table(self, dtype: torch.dtype) -> torch.Tensor:
        """(T_max + 1,) tensor mapping t -> alpha_bar(t), t starting at 0."""
        table = np.concatenate([[1.0], self.alpha_bars])
        return torch.from_numpy(table).to(dtype)


def make_schedule(
    T_max: int = 250, beta_start: float = 1e-4, beta_end: float = 0.05
) -> DiffusionSchedule:
    """Build a linear-ramp beta schedule with T_max steps.

    Defaults give a desk-scale schedule whose terminal signal level is near
    zero (full-noise sampling is valid) while t=50 retains most of the
    signal, mirroring the mild default purification strength.
    """
    if T_max < 1:
        raise ValueError(f"T_max must be >= 1, got {T_max}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(beta_start, beta_end, T_max, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_noise(
    x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps.

    Pure algebra on same-shaped real arrays; no value-range clipping, so it
    applies equally to [0, 1] images and model-space tensors.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Denoiser network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Size knobs for the convolutional denoiser."""

    hidden: int = 40
    blocks: int = 3
    downsample: bool = True
    emb_dim: int = 32

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.downsample and self.blocks < 2:
            raise ValueError("downsample requires at least 2 blocks")


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)
        self.time_proj = nn.Linear(emb_dim, ch)
        self.cond_proj = nn.Linear(emb_dim, ch)

    def forward(self, v, temb, cemb):
        v = (
            self.conv(v)
            + self.time_proj(temb)[:, :, None, None]
            + self.cond_proj(cemb)[:, :, None, None]
        )
        return F.silu(v)


class _DenoiserNet(nn.Module):
    """Small conv denoiser: timestep and condition enter as channel biases."""

    def __init__(self, in_ch: int, config: ModelConfig, vocab_size: int):
        super().__init__()
        h, e = config.hidden, config.emb_dim
        self.emb_dim = e
        self.stem = nn.Conv2d(in_ch, h, 3, padding=1)
        self.time_mlp = nn.Linear(e, e)
        self.cond_emb = nn.Embedding(vocab_size, e)
        self.blocks = nn.ModuleList(
            [_Block(h, e) for _ in range(config.blocks)]
        )
        if config.downsample:
            self.down = nn.Conv2d(h, h, 3, stride=2, padding=1)
            self.up = nn.Conv2d(h, h, 3, padding=1)
        else:
            self.down = None
            self.up = None
        self.head = nn.Conv2d(h, in_ch, 3, padding=1)

    def forward(self, x, t, cond_idx):
        temb = F.silu(self.time_mlp(_sinusoidal_embedding(t.to(x.dtype), self.emb_dim)))
        cemb = self.cond_emb(cond_idx)
        v = F.silu(self.stem(x))
        if self.down is None:
            for block in self.blocks:
                v = block(v, temb, cemb)
        else:
            v = self.blocks[0](v, temb, cemb)
            skip = v
            v = F.silu(self.down(v))
            for block in self.blocks[1:]:
                v = block(v, temb, cemb)
            v = F.interpolate(v, scale_factor=2, mode="nearest")
            v = F.silu(self.up(v)) + skip
        return self.head(v)


def _init_params(net: _DenoiserNet, gen: torch.Generator) -> None:
    """Deterministic parameter init driven entirely by the given generator."""
    for module in net.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight.shape[1] * (
                module.weight[0, 0].numel() if module.weight.ndim == 4 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(module, nn.Embedding):
            with torch.no_grad():
                module.weight.normal_(0.0, 0.1, generator=gen)
    # Damped output head keeps early training stable while leaving input
    # gradients nonzero.
    with torch.no_grad():
        net.head.weight.mul_(0.1)
        net.head.bias.zero_()


class DenoiserModel:
    """Conditional noise predictor plus its token vocabulary and image shape.

    The vocabulary always starts with NULL_TOKEN (index 0), used for
    unconditional prediction during purification.
    """

    def __init__(
        self,
        net: _DenoiserNet,
        image_shape: tuple[int, int, int],
        vocab: tuple[str, ...],
        config: ModelConfig,
        dtype: torch.dtype = torch.float32,
    ):
        self.net = net.to(dtype)
        self.image_shape = tuple(image_shape)
        self.vocab = tuple(vocab)
        self.config = config
        self.dtype = dtype
        self.net.eval()

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def token_index(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise UnknownTokenError(
                f"token {token!r} not in vocabulary {self.vocab}"
            ) from None

    def has_token(self, token: str) -> bool:
        return token in self.vocab

    def predict_eps(
        self, x_t: torch.Tensor, t: torch.Tensor, cond_idx: torch.Tensor
    ) -> torch.Tensor:
        """Noise prediction for a batch; x_t is (N, C, H, W) in model space."""
        return self.net(x_t, t, cond_idx)

    def clone(self) -> "DenoiserModel":
        return DenoiserModel(
            copy.deepcopy(self.net), self.image_shape, self.vocab, self.config, self.dtype
        )

    def with_token(self, token: str, seed: int) -> "DenoiserModel":
        """Copy of the model with `token` appended to the vocabulary."""
        if token in self.vocab:
            return self.clone()
        new_vocab = self.vocab + (token,)
        new_net = _DenoiserNet(self.image_shape[2], self.config, len(new_vocab))
        new_net = new_net.to(self.dtype)
        state = copy.deepcopy(self.net.state_dict())
        gen = torch.Generator().manual_seed(mix_seed(seed, len(new_vocab)))
        new_row = torch.empty(1, self.config.emb_dim).normal_(0.0, 0.1, generator=gen)
        state["cond_emb.weight"] = torch.cat(
            [state["cond_emb.weight"], new_row.to(self.dtype)]
        )
        new_net.load_state_dict(state)
        return DenoiserModel(new_net, self.image_shape, new_vocab, self.config, self.dtype)

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes, for mutation checks."""
        digest = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def new_model(
    image_shape: tuple[int, int, int],
    tokens: tuple[str, ...] = (),
    config: ModelConfig | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> DenoiserModel:
    """Fresh denoiser with NULL_TOKEN plus the given identity tokens."""
    config = config or ModelConfig()
    H, W, C = image_shape
    if config.downsample and (H % 2 or W % 2):
        raise ValueError("downsampling model needs even H and W")
    vocab = (NULL_TOKEN,) + tuple(t for t in tokens if t != NULL_TOKEN)
    net = _DenoiserNet(C, config, len(vocab))
    _init_params(net, torch.Generator().manual_seed(mix_seed(seed, 0xD0DE)))
    return DenoiserModel(net, image_shape, vocab, config, dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 1500
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def prepare_batch_tensors(
    dataset: list[tuple[np.ndarray, str]],
    model: DenoiserModel,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Validate a labeled image list -> ((N,C,H,W) in [-1,1], token indices)."""
    if not dataset:
        raise ValueError("empty dataset")
    xs, idxs = [], []
    for i, (img, token) in enumerate(dataset):
        img = check_image(img, f"dataset[{i}]")
        if img.shape != model.image_shape:
            raise ValueError(
                f"dataset[{i}] shape {img.shape} != model shape {model.image_shape}"
            )
        xs.append(hwc_to_tensor(img, model.dtype) * 2.0 - 1.0)
        idxs.append(model.token_index(token))
    return torch.stack(xs), torch.tensor(idxs, dtype=torch.long)


def noise_prediction_loss(
    model: DenoiserModel,
    x0_internal: torch.Tensor,
    cond_idx: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """MSE between predicted and true noise at the given timesteps.

    Differentiable core shared by training, fine-tuning, and the attack
    objective. `t` holds per-sample timesteps in [1, T_max].
    """
    ab = schedule.alpha_bar_table(x0_internal.dtype)[t][:, None, None, None]
    x_t = torch.sqrt(ab) * x0_internal + torch.sqrt(1.0 - ab) * eps
    pred = model.predict_eps(x_t, t, cond_idx)
    return F.mse_loss(pred, eps)


def train(
    model: DenoiserModel,
    dataset: list[tuple[np.ndarray, str]],
    config: TrainConfig,
    schedule: DiffusionSchedule,
    loss_out: list[float] | None = None,
) -> DenoiserModel:
    """Train a copy of `model` with the standard denoising objective.

    The run is fully determined by config.seed; per-step losses are appended
    to `loss_out` when given. Raises TrainingDivergedError on non-finite loss.
    """
    x0, cond_idx = prepare_batch_tensors(dataset, model)
    model = model.clone()
    if config.steps == 0:
        return model
    n = x0.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    model.net.train()
    for step in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        t = torch.randint(1, schedule.T_max + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(
            (config.batch_size, *x0.shape[1:]), generator=gen, dtype=model.dtype
        )
        loss = noise_prediction_loss(model, x0[idx], cond_idx[idx], t, eps, schedule)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss.item()} at step {step}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss_out is not None:
            loss_out.append(float(loss.detach()))
    model.net.eval()
    return model


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def reverse_step_batch(
    model: DenoiserModel,
    x_t: torch.Tensor,
    t: int,
    cond_idx: torch.Tensor,
    schedule: DiffusionSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral DDPM step x_t -> x_{t-1} for an (N, C, H, W) batch.

    Posterior mean from the model's noise prediction plus the fixed-small
    posterior variance term; `noise=None` (and always t=1) drops the
    stochastic term.
    """
    if not 1 <= t <= schedule.T_max:
        raise ValueError(f"timestep {t} outside [1, {schedule.T_max}]")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta_t = schedule.beta(t)
    alpha_t = 1.0 - beta_t
    t_vec = torch.full((x_t.shape[0],), t, dtype=torch.long)
    with torch.no_grad():
        eps_pred = model.predict_eps(x_t, t_vec, cond_idx)
    mean = (x_t - beta_t / math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(alpha_t)
    if t > 1 and noise is not None:
        var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
        return mean + math.sqrt(var) * noise
    return mean


def denoise_step(
    model: DenoiserModel,
    x_t: np.ndarray,
    t: int,
    cond: str,
    schedule: DiffusionSchedule,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Single-image reverse step on an (H, W, C) array in model space.

    With `generator=None` the stochastic term is zero, making the step the
    deterministic posterior mean.
    """
    x = hwc_to_tensor(np.asarray(x_t, dtype=np.float64), model.dtype)[None]
    cond_idx = torch.tensor([model.token_index(cond)])
    noise = None
    if generator is not None and t > 1:
        noise = torch.randn(x.shape, generator=generator, dtype=model.dtype)
    out = reverse_step_batch(model, x, t, cond_idx, schedule, noise)
    return tensor_to_hwc(out[0])


def reverse_diffusion(
    model: DenoiserModel,
    x_t: torch.Tensor,
    t_start: int,
    cond_idx: torch.Tensor,
    schedule: DiffusionSchedule,
    generator: torch.Generator | None,
) -> torch.Tensor:
    """Run reverse steps from t_start down to 1 on an (N, C, H, W) batch."""
    x = x_t
    for t in range(t_start, 0, -1):
        noise = None
        if generator is not None and t > 1:
            noise = torch.randn(x.shape, generator=generator, dtype=model.dtype)
        x = reverse_step_batch(model, x, t, cond_idx, schedule, noise)
    return x


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: DenoiserModel,
    path,
    schedule: DiffusionSchedule | None = None,
    extra: dict | None = None,
) -> None:
    """Write a single-file checkpoint: parameters plus a metadata record."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "image_shape": list(model.image_shape),
        "vocab": list(model.vocab),
        "model_config": {
            "hidden": model.config.hidden,
            "blocks": model.config.blocks,
            "downsample": model.config.downsample,
            "emb_dim": model.config.emb_dim,
        },
        "state": model.net.state_dict(),
        "extra": dict(extra or {}),
    }
    if schedule is not None:
        payload["schedule"] = {
            "T_max": schedule.T_max,
            "beta_start": float(schedule.betas[0]),
            "beta_end": float(schedule.betas[-1]),
        }
    torch.save(payload, path)


def load_checkpoint(
    path, dtype: torch.dtype = torch.float32
) -> tuple[DenoiserModel, dict]:
    """Load a checkpoint; returns (model, metadata record).

    The metadata record carries `extra` plus `schedule` parameters when they
    were saved.
    """
    payload = torch.load(path, weights_only=True)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a denoiser checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = ModelConfig(**payload["model_config"])
    vocab = tuple(payload["vocab"])
    image_shape = tuple(payload["image_shape"])
    net = _DenoiserNet(image_shape[2], config, len(vocab))
    net.load_state_dict(payload["state"])
    model = DenoiserModel(net, image_shape, vocab, config, dtype)
    model.net.to(dtype)
    meta = {"extra": payload.get("extra", {})}
    if "schedule" in payload:
        meta["schedule"] = payload["schedule"]
    return model, meta
