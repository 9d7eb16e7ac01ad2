"""Procedural toy-face dataset and image-folder ingestion.

Each identity is a fixed parameter vector (face geometry, skin hue, eye and
mouth layout); each instance is a re-render with small geometric and
photometric jitter. The renders are crude but carry enough identity signal
for a small embedder to separate subjects and for a toy diffusion model to
memorize them.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import check_image, mix_seed


@dataclass
class ToyDataset:
    """Labeled image corpus: images[i] belongs to identity_ids[i]."""

    images: list[np.ndarray]
    identity_ids: list[int]
    size: int
    channels: int
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_identities(self) -> int:
        return len(set(self.identity_ids))

    def by_identity(self) -> dict[int, list[np.ndarray]]:
        out: dict[int, list[np.ndarray]] = {}
        for img, ident in zip(self.images, self.identity_ids):
            out.setdefault(ident, []).append(img)
        return out


@dataclass(frozen=True)
class IdentitySplit:
    """Per-identity image split used throughout the harness.

    `reference` (A) is the defender's clean reference set for the ASPL loop,
    `instance` (B) is the set that gets protected and fine-tuned on, and
    `holdout` (C) supplies reference embeddings for identity metrics. `rest`
    feeds generic corpus training.
    """

    reference: list[np.ndarray] = field(default_factory=list)
    instance: list[np.ndarray] = field(default_factory=list)
    holdout: list[np.ndarray] = field(default_factory=list)
    rest: list[np.ndarray] = field(default_factory=list)


def _smooth_mask(dist: np.ndarray, softness: float) -> np.ndarray:
    """Sigmoid edge profile: 1 inside (dist < 1), 0 outside."""
    z = np.clip((dist - 1.0) / softness, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(z))


def _identity_params(seed: int, identity: int) -> dict:
    rng = np.random.default_rng(mix_seed(seed, 0xFACE, identity))
    hue = rng.uniform(0.0, 1.0)
    skin = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.35, 0.65), rng.uniform(0.65, 0.95)))
    hair = np.array(
        colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.3, 0.8), rng.uniform(0.1, 0.4))
    )
    return {
        "skin": skin,
        "hair": hair,
        "bg": rng.uniform(0.08, 0.30) + rng.uniform(-0.04, 0.04, size=3),
        "cx": rng.uniform(0.47, 0.53),
        "cy": rng.uniform(0.50, 0.56),
        "rx": rng.uniform(0.26, 0.36),
        "ry": rng.uniform(0.34, 0.44),
        "eye_dx": rng.uniform(0.10, 0.17),
        "eye_dy": rng.uniform(0.08, 0.15),
        "eye_r": rng.uniform(0.035, 0.06),
        "eye_level": rng.uniform(0.02, 0.18),
        "mouth_dy": rng.uniform(0.13, 0.21),
        "mouth_w": rng.uniform(0.09, 0.17),
        "mouth_h": rng.uniform(0.020, 0.045),
        "mouth_level": rng.uniform(0.05, 0.35),
        "hair_frac": rng.uniform(0.20, 0.40),
    }


def render_face(
    params: dict,
    size: int,
    jitter_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render one (size, size, 3) face instance; jitter is optional."""
    dx = dy = 0.0
    scale = 1.0
    brightness = 1.0
    noise_sigma = 0.0
    if jitter_rng is not None:
        dx, dy = jitter_rng.uniform(-1.5, 1.5, size=2) / size
        scale = jitter_rng.uniform(0.96, 1.04)
        brightness = jitter_rng.uniform(0.94, 1.06)
        noise_sigma = 0.01

    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    soft = 1.2 / size
    cx, cy = params["cx"] + dx, params["cy"] + dy
    rx, ry = params["rx"] * scale, params["ry"] * scale

    img = np.ones((size, size, 3)) * np.clip(params["bg"], 0.0, 1.0)

    face_dist = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    face = _smooth_mask(face_dist, soft)
    img = img * (1 - face[..., None]) + face[..., None] * params["skin"]

    hair_dist = np.sqrt(((xs - cx) / (rx * 1.08)) ** 2 + ((ys - cy) / (ry * 1.08)) ** 2)
    hair_zone = _smooth_mask(hair_dist, soft) * (
        ys < cy - ry * (1 - params["hair_frac"])
    )
    img = img * (1 - hair_zone[..., None]) + hair_zone[..., None] * params["hair"]

    for sign in (-1, 1):
        ex, ey = cx + sign * params["eye_dx"] * scale, cy - params["eye_dy"] * scale
        eye_dist = np.sqrt(((xs - ex) ** 2 + (ys - ey) ** 2)) / params["eye_r"]
        eye = _smooth_mask(eye_dist, soft)
        img = img * (1 - eye[..., None]) + eye[..., None] * params["eye_level"]

    mx, my = cx, cy + params["mouth_dy"] * scale
    mouth_dist = np.sqrt(
        ((xs - mx) / params["mouth_w"]) ** 2 + ((ys - my) / params["mouth_h"]) ** 2
    )
    mouth = _smooth_mask(mouth_dist, soft)
    mouth_color = np.array([params["mouth_level"], 0.1, 0.12])
    img = img * (1 - mouth[..., None]) + mouth[..., None] * mouth_color

    img = img * brightness
    if noise_sigma > 0 and jitter_rng is not None:
        img = img + jitter_rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_toy_dataset(
    n_identities: int,
    images_per_identity: int,
    seed: int,
    size: int = 32,
) -> ToyDataset:
    """Deterministic face-like corpus: identity = parameter vector."""
    if n_identities < 4:
        raise ValueError("need at least 4 identities")
    if images_per_identity < 1:
        raise ValueError("images_per_identity must be >= 1")
    images: list[np.ndarray] = []
    identity_ids: list[int] = []
    for ident in range(n_identities):
        params = _identity_params(seed, ident)
        for inst in range(images_per_identity):
            rng = np.random.default_rng(mix_seed(seed, ident, inst, 0x11))
            images.append(render_face(params, size, jitter_rng=rng))
            identity_ids.append(ident)
    return ToyDataset(images, identity_ids, size, 3, seed)


def split_identity(
    dataset: ToyDataset,
    identity: int,
    set_size: int = 5,
) -> IdentitySplit:
    """Split one identity's images into reference/instance/holdout (+rest)."""
    imgs = dataset.by_identity().get(identity)
    if imgs is None:
        raise ValueError(f"identity {identity} not in dataset")
    if len(imgs) < 3 * set_size:
        raise ValueError(
            f"identity {identity} has {len(imgs)} images, need {3 * set_size}"
        )
    return IdentitySplit(
        reference=imgs[:set_size],
        instance=imgs[set_size : 2 * set_size],
        holdout=imgs[2 * set_size : 3 * set_size],
        rest=imgs[3 * set_size :],
    )


def load_image_folder(root: str | Path, size: int) -> ToyDataset:
    """Ingest real images: one subdirectory per identity.

    Images are center-cropped to square, resized, and converted to RGB in
    [0, 1]. Not exercised by the acceptance suite; provided as an input path
    for non-synthetic runs.
    """
    from PIL import Image

    root = Path(root)
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        raise ValueError(f"no identity subdirectories under {root}")
    images: list[np.ndarray] = []
    identity_ids: list[int] = []
    for ident, sub in enumerate(subdirs):
        paths = sorted(
            p for p in sub.iterdir()
            if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"}
        )
        for p in paths:
            with Image.open(p) as im:
                im = im.convert("RGB")
                w, h = im.size
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side))
                im = im.resize((size, size), Image.LANCZOS)
                arr = np.asarray(im, dtype=np.float64) / 255.0
            images.append(check_image(arr))
            identity_ids.append(ident)
    return ToyDataset(images, identity_ids, size, 3, seed=-1)
