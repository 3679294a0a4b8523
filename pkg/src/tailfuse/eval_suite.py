"""Fréchet distance, multilabel mAP, sparsity diagnostics and the downstream harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from pydantic import BaseModel, Field

from .errors import MetricError, ShapeError, TrainingError
from .il_trainer import classification_loss
from .latent_store import DatasetManifest, PartitionSpec
from .seeding import derive_seed
from .sparse_models import Classifier, build, classifier_forward

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "avg_tail_fd", "head_map", "tail_map")


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


@dataclass
class GaussStats:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features) -> GaussStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise MetricError("gaussian_stats needs at least two feature vectors")
    mu = x.mean(axis=0)
    d = x - mu
    return GaussStats(mu, d.T @ d / (len(x) - 1))


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussStats, b: GaussStats) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    The cross term uses the symmetric product ``sqrt(A) B sqrt(A)``, whose
    trace square root equals that of ``A B``; eigenvalues are clamped at 0.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mu)) and np.all(np.isfinite(s.sigma))):
            raise MetricError("non-finite Gaussian statistics")
    root_a = _sqrt_psd(a.sigma)
    m = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mu - b.mu
    fd = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_cross)
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# mAP
# ---------------------------------------------------------------------------


def average_precision(scores, labels) -> float:
    """Mean of precision at each positive; ties keep ascending record order."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    if not y.any():
        raise MetricError("average precision undefined without positives")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, len(ranks) + 1) / ranks).mean())


def mean_ap(scores, labels, class_set: Iterable[int]) -> float:
    s, y = np.asarray(scores), np.asarray(labels)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    classes = sorted(class_set)
    if not classes:
        raise MetricError("empty class set")
    aps = [average_precision(s[:, c], y[:, c]) for c in classes if np.any(y[:, c] > 0)]
    if not aps:
        raise MetricError("no class in the set has a positive example")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------


def sparsity_report(sparse) -> dict:
    p = np.asarray(sparse, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
    ent = np.clip(ent, 0.0, math.log(p.shape[-1]))
    return {"mean_entropy": float(ent.mean()), "mean_effective_channels": float(np.exp(ent).mean())}


# ---------------------------------------------------------------------------
# downstream evaluation
# ---------------------------------------------------------------------------


class EvalConfig(BaseModel):
    epochs: int = Field(15, ge=1)
    lr: float = Field(3e-3, gt=0.0)
    batch_size: int = Field(32, ge=1)
    hidden: int = Field(32, ge=1)

    model_config = {"extra": "forbid"}


@dataclass
class EvalRow:
    method: str
    avg_tail_fd: float | None
    head_map: float
    tail_map: float


def train_classifier(z, y, cfg: EvalConfig, seed: int) -> Classifier:
    """Fresh multilabel classifier on raw latents ``(N, H, W, C)``."""
    z_t = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    y_t = torch.as_tensor(np.asarray(y), dtype=torch.float32)
    net = build(Classifier.arch, z_t.shape[-1], y_t.shape[1], cfg.hidden, derive_seed(seed, "eval-classifier"))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    net.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(seed, "eval-order", epoch)).permutation(len(z_t))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = classification_loss(y_t[idx], net(z_t[idx]))
            if not torch.isfinite(loss):
                raise TrainingError(f"evaluation classifier diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net


def pooled_features(net: Classifier, z) -> np.ndarray:
    with torch.no_grad():
        return net.pooled(torch.as_tensor(np.asarray(z), dtype=torch.float32)).double().numpy()


def avg_tail_fd(net: Classifier, manifest: DatasetManifest, partition: PartitionSpec) -> float | None:
    """Per-tail-class Fréchet distance between real and synthetic records, averaged over classes.

    Classes with fewer than two synthetic records are skipped; ``None`` when
    no class qualifies (e.g. an unaugmented manifest).
    """
    real, synth = [], []
    for r in manifest.records:
        (synth if r.provenance.get("synthetic") else real).append(r)
    fds = []
    for t in sorted(partition.tail_classes):
        r_t = [r for r in real if r.labels[t]]
        s_t = [r for r in synth if r.labels[t]]
        if len(s_t) < 2 or len(r_t) < 2:
            continue
        fa = pooled_features(net, np.stack([manifest.tensor(r.id) for r in r_t]))
        fb = pooled_features(net, np.stack([manifest.tensor(r.id) for r in s_t]))
        fds.append(frechet_distance(gaussian_stats(fa), gaussian_stats(fb)))
    return float(np.mean(fds)) if fds else None


def downstream_eval(
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest | None,
    partition: PartitionSpec,
    cfg: EvalConfig | None = None,
    seed: int = 0,
    method: str = "baseline",
) -> EvalRow:
    cfg = cfg or EvalConfig()
    test_manifest = test_manifest or train_manifest
    _, z, y = train_manifest.arrays("train")
    net = train_classifier(z, y, cfg, seed)
    _, zt, yt = test_manifest.arrays("test")
    scores = classifier_forward(net, zt).scores
    row = EvalRow(
        method,
        avg_tail_fd(net, train_manifest, partition),
        mean_ap(scores, yt, partition.head_classes),
        mean_ap(scores, yt, partition.tail_classes),
    )
    log.info("%s: %s", method, row)
    return row


def label_preservation(augmented: DatasetManifest, oracle: Classifier) -> float | None:
    """Fraction of fused records whose tail-class probability beats that of their head neighbour.

    ``augmented`` must still hold the head records referenced by each fused
    record's provenance. ``None`` when there are no fused records.
    """
    fused = [r for r in augmented.records if r.provenance.get("synthetic") and "head_id" in r.provenance]
    if not fused:
        return None
    idx = np.arange(len(fused))
    t = [r.provenance["tail_class"] for r in fused]
    p_fused = classifier_forward(oracle, np.stack([augmented.tensor(r.id) for r in fused])).scores
    p_head = classifier_forward(oracle, np.stack([augmented.tensor(r.provenance["head_id"]) for r in fused])).scores
    return float(np.mean(p_fused[idx, t] > p_head[idx, t]))


# ---------------------------------------------------------------------------
# report I/O
# ---------------------------------------------------------------------------


def write_report(rows: list[EvalRow], json_path, csv_path=None, extra: dict | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"columns": list(REPORT_COLUMNS), "rows": [asdict(r) for r in rows], **(extra or {})}
    json_path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    if csv_path is not None:
        with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([r.method, "-" if r.avg_tail_fd is None else repr(r.avg_tail_fd),
                            repr(r.head_map), repr(r.tail_map)])


def read_report(json_path) -> list[EvalRow]:
    doc = json.loads(Path(json_path).read_text(encoding="utf-8"))
    return [EvalRow(**{k: r[k] for k in REPORT_COLUMNS}) for r in doc["rows"]]
