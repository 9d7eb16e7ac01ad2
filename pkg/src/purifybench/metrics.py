"""Identity and quality metrics plus frequency-domain diagnostics.

Implements the evaluation side of the pipeline: face-detection failure rate
(FDFR), identity score matching (ISM) against reference embeddings, a
no-reference quality score built from MSCN coefficient statistics, Fourier
spectrum visualization, high-frequency energy measurement, and perturbation
heatmaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import check_image, to_grayscale
from .surrogates import FaceDetector, IdentityEmbedder

VARIANCE_FLOOR = 1e-6

# Shape-parameter grid for moment-matched generalized-Gaussian fits.
_GGD_GAMMAS = np.arange(0.2, 10.0, 0.005)
_GGD_RHOS = np.array(
    [
        math.gamma(2.0 / g) ** 2 / (math.gamma(1.0 / g) * math.gamma(3.0 / g))
        for g in _GGD_GAMMAS
    ]
)


@dataclass
class MetricsReport:
    """Per-condition evaluation summary.

    `ism` is None when no generated image passed face detection (rendered as
    a dash in reports). `face_quality` is the quality score restricted to
    detector-positive images — the face-region-quality surrogate column —
    and is None under total detection failure.
    """

    condition: str
    fdfr: float
    ism: float | None
    quality: float
    face_quality: float | None
    hf_energy: float
    sample_count: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.fdfr <= 1.0:
            raise ValueError("fdfr must be in [0,1]")
        if self.ism is not None and not -1.0 - 1e-9 <= self.ism <= 1.0 + 1e-9:
            raise ValueError("ism must be in [-1,1]")
        if self.sample_count < 0:
            raise ValueError("sample_count must be non-negative")


def fdfr(images: list[np.ndarray], detector: FaceDetector) -> float:
    """Fraction of images whose detector score falls below the threshold."""
    if len(images) == 0:
        raise ValueError("fdfr needs a non-empty image list")
    scores = detector.score_batch(images)
    return float((scores < detector.tau).mean())


def ism(
    generated: list[np.ndarray],
    references: list[np.ndarray],
    embedder: IdentityEmbedder,
    detector: FaceDetector,
) -> float | None:
    """Mean cosine between detected generations and the mean reference
    embedding; None when no generated image passes detection."""
    if len(references) == 0:
        raise ValueError("ism needs a non-empty reference list")
    if len(generated) == 0:
        raise ValueError("ism needs a non-empty generated list")
    scores = detector.score_batch(generated)
    detected = [img for img, s in zip(generated, scores) if s >= detector.tau]
    if not detected:
        return None
    ref_mean = embedder.embed_batch(references).mean(axis=0)
    norm = np.linalg.norm(ref_mean)
    if norm < 1e-12:
        return 0.0
    emb = embedder.embed_batch(detected)
    return float((emb @ (ref_mean / norm)).mean())


def _gaussian_taps(radius: int, sigma: float) -> np.ndarray:
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


def _sep_filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable correlation with reflect padding."""
    r = (len(taps) - 1) // 2
    out = img
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.pad(moved, ((r, r),) + ((0, 0),) * (moved.ndim - 1), mode="reflect")
        acc = np.zeros_like(moved)
        for i, w in enumerate(taps):
            acc += w * padded[i : i + moved.shape[0]]
        out = np.moveaxis(acc, 0, axis)
    return out


def _mscn(gray: np.ndarray) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients with variance floor."""
    taps = _gaussian_taps(3, 7.0 / 6.0)
    mu = _sep_filter(gray, taps)
    var = _sep_filter((gray - mu) ** 2, taps)
    return (gray - mu) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))


def _ggd_fit(coeffs: np.ndarray) -> tuple[float, float]:
    """Moment-matched generalized-Gaussian (shape, second moment)."""
    m1 = np.abs(coeffs).mean()
    m2 = (coeffs**2).mean()
    if m2 < 1e-12:
        return float(_GGD_GAMMAS[-1]), 0.0
    ratio = m1 * m1 / m2
    idx = int(np.argmin(np.abs(_GGD_RHOS - ratio)))
    return float(_GGD_GAMMAS[idx]), float(m2)


def _scale_features(gray: np.ndarray) -> list[float]:
    mscn = _mscn(gray)
    feats = list(_ggd_fit(mscn))
    for shifted in (
        mscn[:, 1:] * mscn[:, :-1],      # horizontal neighbors
        mscn[1:, :] * mscn[:-1, :],      # vertical
        mscn[1:, 1:] * mscn[:-1, :-1],   # main diagonal
        mscn[1:, :-1] * mscn[:-1, 1:],   # anti-diagonal
    ):
        feats.extend(_ggd_fit(shifted))
    return feats


def natural_scene_features(image: np.ndarray) -> np.ndarray:
    """MSCN/GGD feature vector over two scales (full and half resolution)."""
    img = check_image(image)
    if min(img.shape[0], img.shape[1]) < 16:
        raise ValueError("quality features need images of at least 16x16")
    gray = to_grayscale(img)
    feats = _scale_features(gray)
    h, w = gray.shape
    half = gray[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    feats.extend(_scale_features(half))
    return np.array(feats)


@dataclass(frozen=True)
class QualityScorer:
    """Distance-to-clean-statistics quality score; higher means worse.

    Fit on a clean corpus: stores per-feature mean and spread of the natural
    scene statistics; `score` is the root mean squared z-score of an image's
    features against them.
    """

    feature_mean: np.ndarray
    feature_std: np.ndarray

    @classmethod
    def fit(cls, images: list[np.ndarray]) -> "QualityScorer":
        if len(images) < 2:
            raise ValueError("need at least 2 clean images to fit a QualityScorer")
        feats = np.stack([natural_scene_features(im) for im in images])
        std = np.maximum(feats.std(axis=0), np.sqrt(VARIANCE_FLOOR))
        return cls(feature_mean=feats.mean(axis=0), feature_std=std)

    def score(self, image: np.ndarray) -> float:
        z = (natural_scene_features(image) - self.feature_mean) / self.feature_std
        return float(np.sqrt((z**2).mean()))


def quality_score(image: np.ndarray, scorer: QualityScorer) -> float:
    """Naturalness-deviation score of one image (higher = worse)."""
    return scorer.score(image)


def fourier_magnitude(image: np.ndarray) -> np.ndarray:
    """Un-shifted orthonormal FFT magnitude of the grayscale image.

    With the orthonormal convention, total spectral power equals spatial
    power exactly (Parseval), which the spectrum tests rely on.
    """
    gray = to_grayscale(check_image(image))
    return np.abs(np.fft.fft2(gray, norm="ortho"))


def fourier_spectrum(image: np.ndarray) -> np.ndarray:
    """log(1+|FFT|) magnitude image, DC-centered, scaled to [0,1]."""
    gray = to_grayscale(check_image(image))
    mag = np.abs(np.fft.fftshift(np.fft.fft2(gray)))
    spec = np.log1p(mag)
    peak = spec.max()
    return spec / peak if peak > 0 else spec


def hf_energy(image: np.ndarray, cutoff_frac: float = 0.5) -> float:
    """Fraction of (DC-removed) spectral power outside the centered
    low-frequency square of side cutoff_frac * min(H, W)."""
    if not 0.0 < cutoff_frac < 1.0:
        raise ValueError("cutoff_frac must be in (0,1)")
    gray = to_grayscale(check_image(image))
    power = np.abs(np.fft.fft2(gray)) ** 2
    power[0, 0] = 0.0  # the DC bin says nothing about perturbation content
    power = np.fft.fftshift(power)
    total = power.sum()
    if total <= 1e-24:
        return 0.0
    h, w = gray.shape
    side = int(round(cutoff_frac * min(h, w)))
    cy, cx = h // 2, w // 2
    lo = side // 2
    hi = side - lo
    inside = power[cy - lo : cy + hi, cx - lo : cx + hi].sum()
    return float(1.0 - inside / total)


def perturbation_heatmap(
    x: np.ndarray, x_mod: np.ndarray, eta: float | None = None
) -> np.ndarray:
    """Channel-averaged |x_mod - x| as an (H, W) intensity map in [0,1].

    With `eta` given the map is normalized by the perturbation budget (so a
    saturated budget renders as 1.0 everywhere); otherwise by the observed
    maximum. Color mapping is applied at figure-writing time.
    """
    x = np.asarray(x, dtype=np.float64)
    x_mod = np.asarray(x_mod, dtype=np.float64)
    if x.shape != x_mod.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_mod.shape}")
    diff = np.abs(x_mod - x)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    if eta is not None:
        if eta <= 0:
            raise ValueError("eta must be positive")
        return np.clip(diff / eta, 0.0, 1.0)
    peak = diff.max()
    return diff / peak if peak > 0 else diff


def evaluate_images(
    condition: str,
    images: list[np.ndarray],
    references: list[np.ndarray],
    embedder: IdentityEmbedder,
    detector: FaceDetector,
    scorer: QualityScorer,
    cutoff_frac: float = 0.5,
) -> MetricsReport:
    """Run the full per-condition evaluation over a set of images."""
    if len(images) == 0:
        raise ValueError("evaluate_images needs a non-empty image list")
    scores = detector.score_batch(images)
    detected = [img for img, s in zip(images, scores) if s >= detector.tau]
    quality = float(np.mean([scorer.score(im) for im in images]))
    face_quality = (
        float(np.mean([scorer.score(im) for im in detected])) if detected else None
    )
    return MetricsReport(
        condition=condition,
        fdfr=float((scores < detector.tau).mean()),
        ism=ism(images, references, embedder, detector),
        quality=quality,
        face_quality=face_quality,
        hf_energy=float(np.mean([hf_energy(im, cutoff_frac) for im in images])),
        sample_count=len(images),
    )
