"""Lip-video feature extraction.

Videos are upsampled to the audio frame rate, lip ROIs are normalized with a
similarity transform anchored on the mouth corners, and each ROI is reduced by
a 2-D DCT (zigzag-truncated) followed by an LDA projection fitted on per-frame
phoneme labels.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.linalg

ROI_SIZE = 32
DCT_KEEP = 64
LDA_DIM = 20

# mouth corners map to these ROI anchor points (left, right), making the
# corner segment horizontal
LEFT_ANCHOR = (8.0, 16.0)
RIGHT_ANCHOR = (24.0, 16.0)


@dataclass
class LipROI:
    """Normalized grayscale mouth region in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("LipROI must be a 2-D image")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("LipROI contains non-finite values")


@dataclass
class VisualFeatures:
    """T x Dv matrix, row-aligned with the paired AudioFeatures."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError("VisualFeatures must be 2-D")


@dataclass
class LdaProjection:
    mean: np.ndarray
    basis: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.shape[1] > self.class_count - 1:
            raise ValueError("LDA out_dim must be <= class_count - 1")

    def project(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) @ self.basis


def upsample_align(video_frame_count: int, audio_frame_count: int) -> np.ndarray:
    """Audio frame j reads video frame floor(j * Nv / Na)."""
    if video_frame_count < 1 or audio_frame_count < 1:
        raise ValueError("frame counts must be >= 1")
    if video_frame_count > audio_frame_count:
        raise ValueError("video frame rate must not exceed the audio frame rate")
    j = np.arange(audio_frame_count, dtype=np.int64)
    return (j * video_frame_count) // audio_frame_count


def _similarity_from_corners(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """2x3 affine mapping source mouth corners onto the ROI anchor points."""
    src = complex(right[0] - left[0], right[1] - left[1])
    if abs(src) < 1e-9:
        raise ValueError("coincident mouth corners: degenerate transform")
    dst = complex(RIGHT_ANCHOR[0] - LEFT_ANCHOR[0], RIGHT_ANCHOR[1] - LEFT_ANCHOR[1])
    m = dst / src  # scale * exp(i * rotation)
    a, b = m.real, m.imag
    tx = LEFT_ANCHOR[0] - (a * left[0] - b * left[1])
    ty = LEFT_ANCHOR[1] - (b * left[0] + a * left[1])
    return np.array([[a, -b, tx], [b, a, ty]])


def normalize_lip_roi(frame: np.ndarray, landmarks: np.ndarray,
                      roi_size: int = ROI_SIZE) -> LipROI:
    """Similarity-normalize the mouth region to a fixed horizontal ROI.

    The mouth corners are taken as the leftmost and rightmost landmark
    points; they are mapped exactly onto the ROI anchors and the frame is
    bilinearly resampled.
    """
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least 2 landmark points (x, y)")
    left = pts[np.argmin(pts[:, 0])]
    right = pts[np.argmax(pts[:, 0])]
    transform = _similarity_from_corners(left, right)

    # invert: source = A^<-1> (dst - t)
    rot = transform[:, :2]
    shift = transform[:, 2]
    inv = np.linalg.inv(rot)
    ys, xs = np.mgrid[0:roi_size, 0:roi_size].astype(np.float64)
    dst = np.stack([xs.ravel(), ys.ravel()], axis=0)
    src = inv @ (dst - shift[:, None])
    img = np.asarray(frame, dtype=np.float64)
    h, w = img.shape
    sx = np.clip(src[0], 0.0, w - 1.0)
    sy = np.clip(src[1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    roi = (top * (1 - fy) + bottom * fy).reshape(roi_size, roi_size)
    return LipROI(roi)


def corner_transform(landmarks: np.ndarray) -> np.ndarray:
    """Expose the fitted 2x3 similarity matrix (for tests/diagnostics)."""
    pts = np.asarray(landmarks, dtype=np.float64)
    left = pts[np.argmin(pts[:, 0])]
    right = pts[np.argmax(pts[:, 0])]
    return _similarity_from_corners(left, right)


def dct2(roi: np.ndarray | LipROI) -> np.ndarray:
    """Orthonormal type-II 2-D DCT (energy preserving)."""
    pixels = roi.pixels if isinstance(roi, LipROI) else np.asarray(roi, dtype=np.float64)
    if pixels.shape[0] != pixels.shape[1]:
        raise ValueError("dct2 expects a square ROI")
    if not np.all(np.isfinite(pixels)):
        raise ValueError("non-finite ROI")
    return scipy.fft.dctn(pixels, type=2, norm="ortho")


def idct2(coeffs: np.ndarray) -> np.ndarray:
    return scipy.fft.idctn(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho")


@lru_cache(maxsize=8)
def zigzag_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/col indices of the zigzag scan over an n x n grid."""
    order = []
    for s in range(2 * n - 1):
        diag = [(i, s - i) for i in range(max(0, s - n + 1), min(s, n - 1) + 1)]
        if s % 2 == 0:
            diag = diag[::-1]  # even diagonals run bottom-left to top-right
        order.extend(diag)
    rows = np.array([r for r, _ in order])
    cols = np.array([c for _, c in order])
    return rows, cols


def zigzag_truncate(coeffs: np.ndarray, keep: int) -> np.ndarray:
    """First `keep` DCT coefficients in zigzag scan order."""
    coeffs = np.asarray(coeffs)
    n = coeffs.shape[0]
    if coeffs.shape != (n, n):
        raise ValueError("zigzag_truncate expects a square matrix")
    if keep < 1 or keep > n * n:
        raise ValueError(f"keep must lie in [1, {n * n}]")
    rows, cols = zigzag_indices(n)
    return coeffs[rows[:keep], cols[:keep]]


def zigzag_restore(vector: np.ndarray, n: int) -> np.ndarray:
    """Inverse of zigzag_truncate with zeros for dropped coefficients."""
    out = np.zeros((n, n))
    rows, cols = zigzag_indices(n)
    k = len(vector)
    out[rows[:k], cols[:k]] = vector
    return out


def fit_lda(features: np.ndarray, labels: np.ndarray, out_dim: int) -> LdaProjection:
    """Fisher LDA via the generalized eigenproblem on scatter matrices.

    The within-class scatter is ridge-regularized by 1e-6 * trace(Sw) * I to
    keep small toy corpora well-conditioned.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("LDA needs at least 2 classes")
    if out_dim > len(classes) - 1:
        raise ValueError(f"out_dim {out_dim} exceeds classes - 1 = {len(classes) - 1}")
    for c in classes:
        if np.sum(y == c) < 2:
            raise ValueError(f"class {c!r} has fewer than 2 samples")
    dim = x.shape[1]
    mean = x.mean(axis=0)
    sw = np.zeros((dim, dim))
    sb = np.zeros((dim, dim))
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        centered = xc - mc
        sw += centered.T @ centered
        dm = (mc - mean)[:, None]
        sb += len(xc) * (dm @ dm.T)
    sw_reg = sw + (1e-6 * np.trace(sw) + 1e-12) * np.eye(dim)
    try:
        eigvals, eigvecs = scipy.linalg.eigh(sb, sw_reg)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"singular within-class scatter: {exc}") from exc
    order = np.argsort(eigvals)[::-1][:out_dim]
    basis = eigvecs[:, order]
    basis = basis / np.linalg.norm(basis, axis=0, keepdims=True)
    return LdaProjection(mean=mean, basis=basis, class_count=len(classes))


def roi_feature_vector(frame: np.ndarray, landmarks: np.ndarray,
                       keep: int = DCT_KEEP) -> np.ndarray:
    """normalize -> dct2 -> zigzag truncation for one video frame."""
    roi = normalize_lip_roi(frame, landmarks)
    return zigzag_truncate(dct2(roi), keep)


def extract_visual_features(video: np.ndarray, landmarks: list[np.ndarray],
                            audio_frame_count: int, lda: LdaProjection,
                            keep: int = DCT_KEEP) -> VisualFeatures:
    """Per-audio-frame visual features, time-aligned by upsampling.

    `video` is (N, H, W) grayscale (uint8 or float); `landmarks` one (20, 2)
    array per video frame.
    """
    n_video = video.shape[0]
    if len(landmarks) != n_video:
        raise ValueError("landmark rows must match video frame count")
    img = video.astype(np.float64)
    if img.max() > 1.5:
        img = img / 255.0
    index_map = upsample_align(n_video, audio_frame_count)
    cache: dict[int, np.ndarray] = {}
    rows = np.empty((audio_frame_count, lda.basis.shape[1]), dtype=np.float64)
    for j, v in enumerate(index_map):
        v = int(v)
        if v not in cache:
            cache[v] = lda.project(roi_feature_vector(img[v], landmarks[v], keep))
        rows[j] = cache[v]
    return VisualFeatures(rows)
