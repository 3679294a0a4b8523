"""Tail-class synthesis by fusing tail and head sparse latents, plus the SMOTE baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .cam_engine import class_cams, threshold_masks
from .errors import ConfigError, ShapeError
from .il_trainer import CheckpointSet
from .latent_store import DatasetManifest, PartitionSpec, Record
from .seeding import derive_seed
from .sparse_models import Decoder, classifier_forward, decoder_forward, student_forward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# pairing
# ---------------------------------------------------------------------------


def select_confusion_head(tail_scores, partition: PartitionSpec, tail_class: int) -> int:
    """Head class with the highest mean predicted probability over the tail samples.

    ``tail_scores`` is ``(N, K)``: classifier outputs for the train samples of
    ``tail_class``. Ties go to the lowest class index.
    """
    s = np.asarray(tail_scores, dtype=np.float64)
    if s.ndim != 2 or len(s) == 0:
        raise ValueError(f"no scored samples for tail class {tail_class}")
    heads = sorted(partition.head_classes)
    if not heads:
        raise ValueError("partition has no head classes")
    means = s[:, heads].mean(axis=0)
    return heads[int(np.argmax(means))]


def knn_neighbor(zs_tail, pool, k: int, seed) -> int:
    """Index of a uniformly chosen member of the ``k`` pool vectors nearest to ``zs_tail``."""
    pool = np.asarray(pool, dtype=np.float64)
    if len(pool) == 0:
        raise ValueError("empty neighbour pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = ((pool.reshape(len(pool), -1) - np.asarray(zs_tail, dtype=np.float64).reshape(1, -1)) ** 2).sum(axis=1)
    nearest = np.argsort(d, kind="stable")[: min(k, len(pool))]
    rng = np.random.default_rng(seed)
    return int(nearest[rng.integers(len(nearest))])


# ---------------------------------------------------------------------------
# fusion algebra
# ---------------------------------------------------------------------------


def random_mask(shape: tuple[int, int], seed) -> np.ndarray:
    """Fair coin per spatial coordinate; 1 selects the tail vector."""
    return np.random.default_rng(seed).integers(0, 2, size=shape).astype(np.float64)


def _binary(mask, shape, name) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != shape:
        raise ShapeError(f"{name} has shape {m.shape}, expected {shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must be binary")
    return m.astype(np.float64)[..., None]


def fuse_sparse(zs_tail, zs_head, specific, generic, seed) -> np.ndarray:
    """Assemble the fused sparse latent.

    Coordinates marked only by the tail's specific mask come from the tail,
    those marked only by the head's generic mask come from the head, and the
    rest (both or neither) come from whichever vector the random mask picks.
    Masks are ``(H, W)`` and are broadcast over the channel axis.
    """
    zt = np.asarray(zs_tail, dtype=np.float64)
    zh = np.asarray(zs_head, dtype=np.float64)
    if zt.shape != zh.shape or zt.ndim != 3:
        raise ShapeError(f"tail {zt.shape} and head {zh.shape} must be equal (H, W, C')")
    hw = zt.shape[:2]
    ms = _binary(specific, hw, "specific mask")
    mg = _binary(generic, hw, "generic mask")
    mr = random_mask(hw, seed)[..., None]
    z_rand = zt * mr + zh * (1 - mr)
    z_rand = z_rand * (1 - mg - ms + 2 * mg * ms)
    z_tail = zt * (ms * (1 - mg))
    z_head = zh * (mg * (1 - ms))
    return z_head + z_tail + z_rand


def decode_fused(zs_fused, decoder: Decoder) -> np.ndarray:
    return decoder_forward(decoder, np.asarray(zs_fused, dtype=np.float32))


# ---------------------------------------------------------------------------
# denoising hook
# ---------------------------------------------------------------------------

Denoiser = Callable[[np.ndarray, int, str], np.ndarray]
_EXTERNAL: dict[str, Denoiser] = {}


def register_denoiser(name: str, fn: Denoiser) -> None:
    """Register ``fn(latent, steps, conditioning) -> latent`` for the ``external`` tag."""
    _EXTERNAL[name] = fn


def unregister_denoiser(name: str) -> None:
    _EXTERNAL.pop(name, None)


class DenoiseConfig(BaseModel):
    total_steps: int = Field(50, ge=1)
    divisor: float = Field(10.0, ge=1.0)
    denoiser: Literal["identity", "gaussian-smoother", "external"] = "gaussian-smoother"
    external_name: str = "default"
    conditioning: str = ""

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def _divisor_range(self):
        if self.divisor > self.total_steps:
            raise ValueError("divisor must lie in [1, total_steps]")
        return self

    @property
    def steps(self) -> int:
        return int(math.floor(self.total_steps / self.divisor + 0.5))


_BINOMIAL = np.array([1.0, 2.0, 1.0]) / 4.0


def smooth_binomial(z: np.ndarray) -> np.ndarray:
    """One pass of the 3x3 binomial kernel per channel, edge-replicated borders."""
    out = np.asarray(z, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 1)
        p = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        out = sum(w * np.take(p, range(i, i + n), axis=axis) for i, w in enumerate(_BINOMIAL))
    return out


def denoise(z, cfg: DenoiseConfig, steps: int | None = None, conditioning: str | None = None) -> np.ndarray:
    s = cfg.steps if steps is None else steps
    z = np.asarray(z)
    if s == 0 or cfg.denoiser == "identity":
        return z.copy()
    if cfg.denoiser == "gaussian-smoother":
        out = z.astype(np.float64)
        for _ in range(s):
            out = smooth_binomial(out)
        return out.astype(z.dtype)
    fn = _EXTERNAL.get(cfg.external_name)
    if fn is None:
        raise ConfigError(f"no external denoiser registered under {cfg.external_name!r}")
    return np.asarray(fn(z, s, cfg.conditioning if conditioning is None else conditioning), dtype=z.dtype)


# ---------------------------------------------------------------------------
# SMOTE baseline
# ---------------------------------------------------------------------------


def smote_oversample(pool, n_new: int, k: int = 5, seed=0) -> list[np.ndarray]:
    """Interpolate between random pool members and one of their k nearest neighbours."""
    pool = np.asarray(pool)
    if len(pool) < 2:
        raise ValueError("SMOTE needs at least two pool samples")
    if k < 1:
        raise ValueError("k must be >= 1")
    flat = pool.reshape(len(pool), -1).astype(np.float64)
    d = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    neighbours = np.argsort(d, axis=1, kind="stable")[:, : min(k, len(pool) - 1)]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_new):
        i = rng.integers(len(pool))
        j = neighbours[i, rng.integers(neighbours.shape[1])]
        u = rng.random()
        out.append((flat[i] + u * (flat[j] - flat[i])).reshape(pool.shape[1:]).astype(pool.dtype))
    return out


def smote_augment(manifest: DatasetManifest, partition: PartitionSpec, target: int, k: int = 5, seed: int = 0) -> DatasetManifest:
    """Top every tail class up to ``target`` train positives with SMOTE samples."""
    ids, z, y = manifest.arrays("train")
    counts = manifest.class_counts("train")
    new_records, tensors = [], {}
    for t in sorted(partition.tail_classes):
        need = int(target - counts[t])
        if need <= 0:
            continue
        members = np.flatnonzero(y[:, t] > 0)
        samples = smote_oversample(z[members], need, k, derive_seed(seed, "smote", t))
        for n, s in enumerate(samples):
            rid = f"smote_c{t}_{n:05d}"
            labels = tuple(int(c == t) for c in range(manifest.num_classes))
            new_records.append(Record(rid, f"tensors/{rid}.lta", labels, "train", {"synthetic": True, "method": "smote"}))
            tensors[rid] = s
        counts[t] += need
    return manifest.with_records(new_records, tensors)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class FusionRecord:
    tail_id: str
    head_id: str
    tail_class: int
    head_class: int
    specific: np.ndarray
    generic: np.ndarray
    seed: int
    zs_fused: np.ndarray
    z_fused: np.ndarray
    labels: tuple[int, ...]
    denoise_steps: int = 0


def generate_fusions(
    manifest: DatasetManifest,
    partition: PartitionSpec,
    ckpt: CheckpointSet,
    tau_high: float = 0.4,
    tau_low: float = 0.4,
    k: int = 5,
    target: int = 200,
    seed: int = 0,
    class_agnostic: bool = False,
) -> list[FusionRecord]:
    """Decoded (not yet denoised) fusions that lift each tail class to ``target`` train positives."""
    threshold_masks(np.zeros((1, 1)), tau_high, tau_low)
    ids, z, y = manifest.arrays("train")
    student, decoder, classifier = ckpt.student, ckpt.decoder, ckpt.classifier
    zs = student_forward(student, z)
    scores = classifier_forward(classifier, zs).scores
    counts = manifest.class_counts("train")
    head_set = sorted(partition.head_classes)
    tail_set = sorted(partition.tail_classes)
    out: list[FusionRecord] = []
    for t in tail_set:
        need = int(target - counts[t])
        if need <= 0:
            continue
        tail_idx = np.flatnonzero(y[:, t] > 0)
        h = select_confusion_head(scores[tail_idx], partition, t)
        pool_idx = np.flatnonzero(y[:, h] > 0)
        tail_cams = class_cams(classifier, zs[tail_idx], t, class_agnostic)
        head_cams = class_cams(classifier, zs[pool_idx], h, class_agnostic)
        order = np.random.default_rng(derive_seed(seed, "tail-order", t)).permutation(len(tail_idx))
        log.info("tail class %d: %d fusions against head class %d", t, need, h)
        for n in range(need):
            pos = order[n % len(order)]
            rep = n // len(order)
            ti = tail_idx[pos]
            j = knn_neighbor(zs[ti], zs[pool_idx], k, derive_seed(seed, "knn", ids[ti], rep))
            hi = pool_idx[j]
            ms = threshold_masks(tail_cams[pos], tau_high, tau_low).specific
            mg = threshold_masks(head_cams[j], tau_high, tau_low).generic
            fseed = derive_seed(seed, "fuse", ids[ti], ids[hi], rep)
            zf = fuse_sparse(zs[ti], zs[hi], ms, mg, fseed)
            labels = tuple(
                int((c in tail_set and y[ti, c] > 0) or (c in head_set and y[hi, c] > 0))
                for c in range(manifest.num_classes)
            )
            out.append(
                FusionRecord(ids[ti], ids[hi], t, h, ms, mg, fseed, zf.astype(np.float32),
                             decode_fused(zf, decoder), labels)
            )
            counts += np.asarray(labels)
    return out


def fusions_to_manifest(
    manifest: DatasetManifest, fusions: list[FusionRecord], denoise_cfg: DenoiseConfig | None = None,
    steps: int | None = None,
) -> DatasetManifest:
    """Append fused records, denoised with ``denoise_cfg`` for ``steps`` (default: the config's N/d)."""
    cfg = denoise_cfg or DenoiseConfig(denoiser="identity")
    s = cfg.steps if steps is None else steps
    new_records, tensors = [], {}
    per_class: dict[int, int] = {}
    for f in fusions:
        n = per_class.get(f.tail_class, 0)
        per_class[f.tail_class] = n + 1
        rid = f"syn_c{f.tail_class}_{n:05d}"
        cond = cfg.conditioning or ",".join(manifest.class_names[c] for c, v in enumerate(f.labels) if v)
        zf = denoise(f.z_fused, cfg, steps=s, conditioning=cond)
        if zf.shape != tuple(manifest.dims) or not np.all(np.isfinite(zf)):
            raise ShapeError(f"fused record {rid} failed shape/finiteness validation")
        tensors[rid] = zf.astype(np.float32)
        new_records.append(Record(rid, f"tensors/{rid}.lta", f.labels, "train", {
            "synthetic": True, "tail_id": f.tail_id, "head_id": f.head_id, "seed": f.seed,
            "denoise_steps": s, "tail_class": f.tail_class, "head_class": f.head_class,
        }))
    return manifest.with_records(new_records, tensors)


def augment_tailset(
    manifest: DatasetManifest,
    partition: PartitionSpec,
    ckpt: CheckpointSet,
    tau_high: float = 0.4,
    tau_low: float = 0.4,
    k: int = 5,
    target: int = 200,
    denoise_cfg: DenoiseConfig | None = None,
    seed: int = 0,
    class_agnostic: bool = False,
) -> DatasetManifest:
    fusions = generate_fusions(manifest, partition, ckpt, tau_high, tau_low, k, target, seed, class_agnostic)
    return fusions_to_manifest(manifest, fusions, denoise_cfg)
