"""Identity embedder and face detector trained on the toy corpus.

These play the role that off-the-shelf face-recognition and face-detection
networks play at full scale: the embedder maps an image to a unit-norm
vector whose cosine similarity measures identity agreement, and the detector
scores whether an image contains a face-like structure at all. Both are
small convnets trained from scratch on the corpus, so the whole pipeline
stays self-contained and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import ToyDataset
from .imaging import hwc_to_tensor, mix_seed

SURROGATE_MAGIC = "PURIFYBENCH-SUR"
SURROGATE_VERSION = 1


@dataclass(frozen=True)
class SurrogateConfig:
    emb_dim: int = 32
    hidden: int = 24
    embedder_epochs: int = 60
    detector_epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 2e-3
    cosine_scale: float = 12.0
    clean_quantile: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.emb_dim < 2:
            raise ValueError("emb_dim must be >= 2")
        if not 0.0 < self.clean_quantile < 0.5:
            raise ValueError("clean_quantile must be in (0, 0.5)")


class _Trunk(nn.Module):
    """Shared conv feature extractor: (N,3,H,W) -> (N, feat_dim)."""

    def __init__(self, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * hidden, 2 * hidden, 3, stride=1, padding=1)
        self.act = nn.SiLU()
        self.feat_dim = 2 * hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        h = self.act(self.conv3(h))
        return h.mean(dim=(2, 3))


def _init_net(net: nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for p in net.parameters():
            if p.dim() > 1:
                fan_in = p[0].numel()
                bound = 1.0 / np.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()


class IdentityEmbedder:
    """Unit-norm identity embeddings from a classification-trained trunk."""

    def __init__(self, trunk: _Trunk, proj: nn.Linear, emb_dim: int):
        self._trunk = trunk
        self._proj = proj
        self.emb_dim = emb_dim
        self._trunk.eval()
        self._proj.eval()

    @torch.no_grad()
    def embed_batch(self, images: list[np.ndarray] | np.ndarray) -> np.ndarray:
        """Embed images (each HWC in [0,1]) to an (N, emb_dim) unit-norm array."""
        x = torch.stack([hwc_to_tensor(np.asarray(im), torch.float32) for im in images])
        e = self._proj(self._trunk(x))
        e = e / e.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return e.numpy().astype(np.float64)

    def embed(self, image: np.ndarray) -> np.ndarray:
        return self.embed_batch([image])[0]

    def state_dicts(self) -> dict:
        return {"trunk": self._trunk.state_dict(), "proj": self._proj.state_dict()}


class FaceDetector:
    """Binary face-vs-junk scorer with a calibrated decision threshold.

    `tau` is set so that roughly `clean_quantile` of held-out clean corpus
    images score below it, i.e. a ~1% false-failure rate on real faces by
    default.
    """

    def __init__(self, trunk: _Trunk, head: nn.Linear, tau: float):
        self._trunk = trunk
        self._head = head
        self.tau = float(tau)
        self._trunk.eval()
        self._head.eval()

    @torch.no_grad()
    def score_batch(self, images: list[np.ndarray] | np.ndarray) -> np.ndarray:
        x = torch.stack([hwc_to_tensor(np.asarray(im), torch.float32) for im in images])
        logits = self._head(self._trunk(x)).squeeze(1)
        return torch.sigmoid(logits).numpy().astype(np.float64)

    def score(self, image: np.ndarray) -> float:
        return float(self.score_batch([image])[0])

    def detects(self, image: np.ndarray) -> bool:
        return self.score(image) >= self.tau

    def state_dicts(self) -> dict:
        return {"trunk": self._trunk.state_dict(), "head": self._head.state_dict()}


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Photometric + small shift jitter so the nets tolerate instance and
    generation artifacts instead of memorizing exact training renders."""
    shifts = torch.randint(-2, 3, (x.shape[0], 2), generator=gen)
    x = torch.stack(
        [torch.roll(img, tuple(s.tolist()), dims=(1, 2)) for img, s in zip(x, shifts)]
    )
    sigma = torch.rand((x.shape[0], 1, 1, 1), generator=gen) * 0.04
    noise = torch.randn(x.shape, generator=gen) * sigma
    gain = 0.95 + 0.1 * torch.rand((x.shape[0], 1, 1, 1), generator=gen)
    return (x * gain + noise).clamp(0.0, 1.0)


def _shuffle_patches(x: torch.Tensor, tiles: int, gen: torch.Generator) -> torch.Tensor:
    """Permute a tiles x tiles grid of patches, destroying face layout."""
    n, c, h, w = x.shape
    th, tw = h // tiles, w // tiles
    patches = (
        x.reshape(n, c, tiles, th, tiles, tw)
        .permute(0, 2, 4, 1, 3, 5)
        .reshape(n, tiles * tiles, c, th, tw)
    )
    out = torch.empty_like(patches)
    for i in range(n):
        perm = torch.randperm(tiles * tiles, generator=gen)
        out[i] = patches[i, perm]
    return (
        out.reshape(n, tiles, tiles, c, th, tw)
        .permute(0, 3, 1, 4, 2, 5)
        .reshape(n, c, h, w)
    )


def _make_negatives(pos: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Non-face images: noise fields, smooth blobs, flats, scrambled faces."""
    n, c, h, w = pos.shape
    k = max(n // 4, 1)
    uniform = torch.rand((k, c, h, w), generator=gen)
    gauss = (0.5 + 0.25 * torch.randn((k, c, h, w), generator=gen)).clamp(0, 1)
    blobs = torch.rand((k, c, 4, 4), generator=gen)
    blobs = nn.functional.interpolate(blobs, size=(h, w), mode="bilinear", align_corners=False)
    flats = torch.rand((k, c, 1, 1), generator=gen).expand(k, c, h, w).clone()
    flats = (flats + 0.02 * torch.randn((k, c, h, w), generator=gen)).clamp(0, 1)
    scrambled = _shuffle_patches(pos, tiles=4, gen=gen)
    return torch.cat([uniform, gauss, blobs, flats, scrambled], dim=0)


def _train_embedder(
    images: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    config: SurrogateConfig,
) -> IdentityEmbedder:
    gen = torch.Generator().manual_seed(mix_seed(config.seed, 0xE4B))
    trunk = _Trunk(config.hidden)
    proj = nn.Linear(trunk.feat_dim, config.emb_dim)
    weights = nn.Parameter(torch.empty(n_classes, config.emb_dim))
    _init_net(trunk, gen)
    _init_net(proj, gen)
    with torch.no_grad():
        weights.normal_(0.0, 0.5, generator=gen)

    params = list(trunk.parameters()) + list(proj.parameters()) + [weights]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    n = images.shape[0]
    for _ in range(config.embedder_epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = _augment(images[idx], gen)
            e = proj(trunk(x))
            e = e / e.norm(dim=1, keepdim=True).clamp_min(1e-12)
            w = weights / weights.norm(dim=1, keepdim=True).clamp_min(1e-12)
            logits = config.cosine_scale * (e @ w.T)
            loss = nn.functional.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return IdentityEmbedder(trunk, proj, config.emb_dim)


def _train_detector(
    pos: torch.Tensor,
    holdout_pos: torch.Tensor,
    config: SurrogateConfig,
) -> FaceDetector:
    gen = torch.Generator().manual_seed(mix_seed(config.seed, 0xDE7))
    trunk = _Trunk(config.hidden)
    head = nn.Linear(trunk.feat_dim, 1)
    _init_net(trunk, gen)
    _init_net(head, gen)

    neg = _make_negatives(pos, gen)
    x_all = torch.cat([pos, neg], dim=0)
    y_all = torch.cat([torch.ones(pos.shape[0]), torch.zeros(neg.shape[0])])

    params = list(trunk.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    n = x_all.shape[0]
    for _ in range(config.detector_epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = _augment(x_all[idx], gen)
            logits = head(trunk(x)).squeeze(1)
            loss = nn.functional.binary_cross_entropy_with_logits(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    trunk.eval()
    head.eval()
    with torch.no_grad():
        scores = torch.sigmoid(head(trunk(holdout_pos)).squeeze(1))
    tau = float(torch.quantile(scores.double(), config.clean_quantile))
    # Never let the threshold exceed the decision boundary; junk should fail.
    tau = min(tau, 0.5)
    return FaceDetector(trunk, head, tau)


def train_surrogates(
    dataset: ToyDataset,
    config: SurrogateConfig | None = None,
) -> tuple[IdentityEmbedder, FaceDetector]:
    """Train both surrogates on a labeled corpus.

    A deterministic tail slice of each identity's images is held out from
    detector threshold calibration duty; the embedder trains on everything
    (identity metrics are computed on images the harness keeps out of the
    corpus it passes here).
    """
    if config is None:
        config = SurrogateConfig()
    if dataset.n_identities < 2:
        raise ValueError("need at least 2 identities to train an embedder")
    counts = {i: dataset.identity_ids.count(i) for i in set(dataset.identity_ids)}
    if min(counts.values()) < 16:
        raise ValueError("need at least 16 images per identity to train surrogates")

    idents = sorted(set(dataset.identity_ids))
    label_of = {ident: i for i, ident in enumerate(idents)}
    images = torch.stack(
        [hwc_to_tensor(im, torch.float32) for im in dataset.images]
    )
    labels = torch.tensor([label_of[i] for i in dataset.identity_ids])

    embedder = _train_embedder(images, labels, len(idents), config)

    # Calibration holdout: every 5th image, so all identities contribute to
    # both detector training and threshold calibration.
    hold_mask = torch.zeros(len(dataset), dtype=torch.bool)
    hold_mask[4::5] = True
    detector = _train_detector(images[~hold_mask], images[hold_mask], config)
    return embedder, detector


def save_surrogates(
    embedder: IdentityEmbedder, detector: FaceDetector, path: str | Path,
    config: SurrogateConfig | None = None,
) -> None:
    torch.save(
        {
            "magic": SURROGATE_MAGIC,
            "version": SURROGATE_VERSION,
            "emb_dim": embedder.emb_dim,
            "hidden": embedder._trunk.conv1.out_channels,
            "tau": detector.tau,
            "embedder": embedder.state_dicts(),
            "detector": detector.state_dicts(),
        },
        Path(path),
    )


def load_surrogates(path: str | Path) -> tuple[IdentityEmbedder, FaceDetector]:
    blob = torch.load(Path(path), weights_only=True)
    if not isinstance(blob, dict) or blob.get("magic") != SURROGATE_MAGIC:
        raise ValueError(f"{path} is not a surrogate checkpoint")
    hidden = blob["hidden"]
    e_trunk = _Trunk(hidden)
    e_proj = nn.Linear(e_trunk.feat_dim, blob["emb_dim"])
    e_trunk.load_state_dict(blob["embedder"]["trunk"])
    e_proj.load_state_dict(blob["embedder"]["proj"])
    d_trunk = _Trunk(hidden)
    d_head = nn.Linear(d_trunk.feat_dim, 1)
    d_trunk.load_state_dict(blob["detector"]["trunk"])
    d_head.load_state_dict(blob["detector"]["head"])
    return (
        IdentityEmbedder(e_trunk, e_proj, blob["emb_dim"]),
        FaceDetector(d_trunk, d_head, blob["tau"]),
    )
