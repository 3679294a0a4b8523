"""EigenCAM maps from classifier activations and their two-threshold masks."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .sparse_models import Classifier, classifier_forward


@dataclass
class CamMap:
    m: np.ndarray
    class_id: int


@dataclass
class MaskPair:
    specific: np.ndarray
    generic: np.ndarray
    tau_high: float
    tau_low: float


def eigencam_raw(activations, class_gate=None) -> np.ndarray:
    """Projection of the activations onto their first right singular vector.

    ``activations`` is ``(H, W, C_a)``. With ``class_gate`` every channel is
    first scaled by the positive part of its gate weight. The SVD sign is
    chosen so the map sums to a non-negative value; negatives are then
    clamped to zero. An all-zero (gated) input gives an all-zero map.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"activations must be (H, W, C_a), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activations")
    h, w, ca = a.shape
    if class_gate is not None:
        gate = np.asarray(class_gate, dtype=np.float64)
        if gate.shape != (ca,):
            raise ShapeError(f"class gate length {gate.shape} != {ca}")
        a = a * np.maximum(gate, 0.0)
    x = a.reshape(h * w, ca)
    if not np.any(x):
        return np.zeros((h, w))
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    proj = x @ vt[0]
    if proj.sum() < 0:
        proj = -proj
    return np.maximum(proj, 0.0).reshape(h, w)


def normalize_map(raw, class_id: int = -1) -> CamMap:
    r = np.asarray(raw, dtype=np.float64)
    lo, hi = r.min(), r.max()
    if hi == lo:
        return CamMap(np.full(r.shape, 0.5), class_id)
    return CamMap((r - lo) / (hi - lo), class_id)


def _axis_weights(n_in: int, n_out: int):
    # cell-centre sampling: output cell i sits at source coordinate (i + .5) * n_in / n_out - .5
    x = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def upsample_bilinear(m, height: int, width: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    if height < h or width < w:
        raise ValueError(f"upsample_bilinear cannot shrink {m.shape} to {(height, width)}")
    if (height, width) == (h, w):
        return m.copy()
    r0, r1, fr = _axis_weights(h, height)
    c0, c1, fc = _axis_weights(w, width)
    rows = m[r0] * (1 - fr)[:, None] + m[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def threshold_masks(cam: CamMap | np.ndarray, tau_high: float = 0.4, tau_low: float = 0.4) -> MaskPair:
    """``specific = m >= tau_high``, ``generic = m <= tau_low`` (both inclusive)."""
    for name, tau in (("tau_high", tau_high), ("tau_low", tau_low)):
        if not 0.0 < tau < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1), got {tau}")
    m = cam.m if isinstance(cam, CamMap) else np.asarray(cam)
    return MaskPair((m >= tau_high).astype(np.uint8), (m <= tau_low).astype(np.uint8), tau_high, tau_low)


def class_cam(classifier: Classifier, zs, class_id: int, class_agnostic: bool = False) -> CamMap:
    """Normalised CAM of one sparse latent ``(H, W, C')`` for ``class_id``."""
    return CamMap(class_cams(classifier, np.asarray(zs)[None], class_id, class_agnostic)[0], class_id)


def class_cams(classifier: Classifier, zs_batch, class_id: int, class_agnostic: bool = False) -> np.ndarray:
    """Normalised CAMs ``(N, H, W)`` for a batch of sparse latents."""
    zs_batch = np.asarray(zs_batch)
    if len(zs_batch) == 0:
        return np.zeros((0, *zs_batch.shape[1:3]))
    acts = classifier_forward(classifier, zs_batch).activations
    gate = None if class_agnostic else classifier.head.weight.detach().double().numpy()[class_id]
    out = []
    for a in acts:
        raw = eigencam_raw(a, gate)
        if raw.shape != zs_batch.shape[1:3]:
            raw = upsample_bilinear(raw, *zs_batch.shape[1:3])
        out.append(normalize_map(raw, class_id).m)
    return np.stack(out)


def write_pgm(m, path) -> None:
    """Binary greyscale PGM (P5, maxval 255) of a map in [0, 1]."""
    arr = np.clip(np.rint(np.asarray(m, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    match = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if match is None:
        raise ValueError("not a binary PGM")
    w, h = int(match[1]), int(match[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=match.end()).reshape(h, w)
