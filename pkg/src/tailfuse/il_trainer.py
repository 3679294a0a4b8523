"""Iterated learning: imitation of a frozen teacher, then joint interaction training."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, Field

from .errors import ConfigError, ShapeError, TrainingError
from .latent_store import DatasetManifest, PartitionSpec
from .seeding import derive_seed
from .sparse_models import Classifier, Decoder, Student, build, load_params, sample_onehot, save_params

log = logging.getLogger(__name__)

EPS = 1e-7
HISTORY_FIELDS = ("generation", "epoch", "phase", "L_I", "L_R", "L_C", "combined")


class ILConfig(BaseModel):
    generations: int = Field(3, ge=1)
    imitation_epochs: int = Field(5, ge=1)
    interaction_epochs: int = Field(10, ge=1)
    lam: float = Field(0.5, ge=0.0, le=1.0)
    lr: float = Field(3e-3, gt=0.0)
    batch_size: int = Field(32, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    sparse_channels: int = Field(16, ge=2)
    hidden: int = Field(32, ge=1)
    optimizer: Literal["sgd", "adam"] = "adam"
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    temperature: float = Field(1.0, gt=0.0)

    model_config = {"extra": "forbid"}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.array(x))


def _bce(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def imitation_loss(student_probs, target) -> torch.Tensor:
    """Mean BCE between student channel probabilities and a sampled one-hot target."""
    p, y = _t(student_probs), _t(target)
    if p.shape != y.shape:
        raise ShapeError(f"imitation_loss: {tuple(p.shape)} vs {tuple(y.shape)}")
    return _bce(y.to(p.dtype), p)


def reconstruction_loss(z, z_hat) -> torch.Tensor:
    a, b = _t(z), _t(z_hat)
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction_loss: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a.to(b.dtype) - b) ** 2).mean()


def classification_loss(y, scores) -> torch.Tensor:
    a, s = _t(y), _t(scores)
    if a.shape != s.shape:
        raise ShapeError(f"classification_loss: {tuple(a.shape)} vs {tuple(s.shape)}")
    return _bce(a.to(s.dtype), s)


def interaction_objective(lam: float, loss_r, loss_c):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return lam * loss_r + (1.0 - lam) * loss_c


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------


@dataclass
class ILState:
    student: Student
    decoder: Decoder
    classifier: Classifier
    teacher: Student | None = None
    history: list[dict] = field(default_factory=list)


@dataclass
class CheckpointSet:
    students: list[Student]
    decoders: list[Decoder]
    classifiers: list[Classifier]
    history: list[dict]

    @property
    def student(self) -> Student:
        return self.students[-1]

    @property
    def decoder(self) -> Decoder:
        return self.decoders[-1]

    @property
    def classifier(self) -> Classifier:
        return self.classifiers[-1]


def init_state(cfg: ILConfig, in_channels: int, num_classes: int, seed: int) -> ILState:
    return ILState(
        student=build(Student.arch, in_channels, cfg.sparse_channels, cfg.hidden, derive_seed(seed, "student", 0)),
        decoder=build(Decoder.arch, cfg.sparse_channels, in_channels, cfg.hidden, derive_seed(seed, "decoder")),
        classifier=build(Classifier.arch, cfg.sparse_channels, num_classes, cfg.hidden, derive_seed(seed, "classifier")),
    )


def _optimizer(params, cfg: ILConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


def _batches(n: int, batch_size: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _finite(value: torch.Tensor, what: str, gen: int, epoch: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise TrainingError(f"non-finite {what} ({v}) at generation {gen}, epoch {epoch}; aborting")
    return v


def run_generation(state: ILState, data: tuple[np.ndarray, np.ndarray], cfg: ILConfig, gen_index: int, seed: int) -> ILState:
    """One IL generation. ``data`` is ``(z, y)`` for the train split.

    Generation 0 has no teacher and goes straight to interaction. Later
    generations freeze the incoming student as teacher, start a fresh
    student, and fit it to one-hot samples of the teacher's channel
    probabilities (resampled every batch) before interaction.
    """
    z_all = torch.as_tensor(data[0], dtype=torch.float32)
    y_all = torch.as_tensor(data[1], dtype=torch.float32)
    n = z_all.shape[0]
    history = list(state.history)
    student, teacher = state.student, state.teacher
    decoder, classifier = state.decoder, state.classifier

    if gen_index > 0:
        teacher = state.student
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        student = build(
            Student.arch, student.in_channels, student.out_channels, student.hidden, derive_seed(seed, "student", gen_index)
        )
        opt = _optimizer(student.parameters(), cfg)
        for epoch in range(cfg.imitation_epochs):
            rng = np.random.default_rng(derive_seed(seed, "imitation-targets", gen_index, epoch))
            total, count = 0.0, 0
            for idx in _batches(n, cfg.batch_size, derive_seed(seed, "imitation-order", gen_index, epoch)):
                zb = z_all[idx]
                with torch.no_grad():
                    target = torch.from_numpy(sample_onehot(teacher(zb).double().numpy(), rng, cfg.temperature))
                loss = imitation_loss(student(zb), target)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += _finite(loss, "imitation loss", gen_index, epoch) * len(idx)
                count += len(idx)
            history.append(
                {"generation": gen_index, "epoch": epoch, "phase": "imitation", "L_I": total / count,
                 "L_R": float("nan"), "L_C": float("nan"), "combined": total / count}
            )
            log.debug("gen %d imitation epoch %d: L_I=%.5f", gen_index, epoch, total / count)

    student.train()
    for p in student.parameters():
        p.requires_grad_(True)
    params = list(student.parameters()) + list(decoder.parameters()) + list(classifier.parameters())
    opt = _optimizer(params, cfg)
    for epoch in range(cfg.interaction_epochs):
        sums = np.zeros(3)
        count = 0
        for idx in _batches(n, cfg.batch_size, derive_seed(seed, "interaction-order", gen_index, epoch)):
            zb, yb = z_all[idx], y_all[idx]
            zs = student(zb)
            loss_r = reconstruction_loss(zb, decoder(zs))
            loss_c = classification_loss(yb, classifier(zs))
            loss = interaction_objective(cfg.lam, loss_r, loss_c)
            opt.zero_grad()
            loss.backward()
            opt.step()
            vals = [_finite(v, name, gen_index, epoch) for v, name in
                    ((loss_r, "reconstruction loss"), (loss_c, "classification loss"), (loss, "objective"))]
            sums += np.array(vals) * len(idx)
            count += len(idx)
        lr_, lc_, comb = (float(v) for v in sums / count)
        history.append(
            {"generation": gen_index, "epoch": epoch, "phase": "interaction", "L_I": float("nan"),
             "L_R": lr_, "L_C": lc_, "combined": comb}
        )
        log.debug("gen %d interaction epoch %d: L_R=%.5f L_C=%.5f", gen_index, epoch, lr_, lc_)

    for net in (student, decoder, classifier):
        net.eval()
    return ILState(student, decoder, classifier, teacher, history)


def run_il(cfg: ILConfig, manifest: DatasetManifest, partition: PartitionSpec | None = None, out_dir=None) -> CheckpointSet:
    """Train ``cfg.generations`` IL generations on the train split.

    ``partition`` is accepted for interface symmetry; IL itself is label-set
    agnostic. When ``out_dir`` is given the checkpoint set is persisted there.
    """
    _, z, y = manifest.arrays("train")
    if len(z) == 0:
        raise TrainingError("no train records")
    seed = cfg.seed
    state = init_state(cfg, manifest.dims[2], manifest.num_classes, seed)
    students, decoders, classifiers = [], [], []
    for g in range(cfg.generations):
        state = run_generation(state, (z, y), cfg, g, seed)
        students.append(copy.deepcopy(state.student))
        decoders.append(copy.deepcopy(state.decoder))
        classifiers.append(copy.deepcopy(state.classifier))
        last = state.history[-1]
        log.info("generation %d done: L_R=%.4f L_C=%.4f", g, last["L_R"], last["L_C"])
    ckpt = CheckpointSet(students, decoders, classifiers, state.history)
    if out_dir is not None:
        save_checkpoints(ckpt, out_dir, dims=manifest.dims, partition=partition)
    return ckpt


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_history_csv(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(row[k])) if k in ("L_I", "L_R", "L_C", "combined") else row[k])
                        for k in HISTORY_FIELDS})


def read_history_csv(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [
            {"generation": int(r["generation"]), "epoch": int(r["epoch"]), "phase": r["phase"],
             **{k: float(r[k]) for k in ("L_I", "L_R", "L_C", "combined")}}
            for r in csv.DictReader(fh)
        ]


def save_checkpoints(ckpt: CheckpointSet, out_dir, dims=None, partition: PartitionSpec | None = None) -> Path:
    out = Path(out_dir)
    for g, (s, d, c) in enumerate(zip(ckpt.students, ckpt.decoders, ckpt.classifiers)):
        gen_hist = [h for h in ckpt.history if h["generation"] == g]
        save_params(s, out / f"gen_{g}" / "student", generation=g, latent_dims=dims,
                    loss_history=[{k: _json_num(v) for k, v in h.items()} for h in gen_hist])
        save_params(d, out / f"gen_{g}" / "decoder", generation=g, latent_dims=dims)
        save_params(c, out / f"gen_{g}" / "classifier", generation=g, latent_dims=dims)
    write_history_csv(ckpt.history, out / "loss_history.csv")
    index = {"generations": len(ckpt.students), "latent_dims": list(dims) if dims else None,
             "partition": partition.to_json() if partition else None}
    (out / "checkpoints.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    return out


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def load_checkpoints(out_dir) -> CheckpointSet:
    out = Path(out_dir)
    index = json.loads((out / "checkpoints.json").read_text(encoding="utf-8"))
    students, decoders, classifiers = [], [], []
    for g in range(index["generations"]):
        students.append(load_params(out / f"gen_{g}" / "student")[0])
        decoders.append(load_params(out / f"gen_{g}" / "decoder")[0])
        classifiers.append(load_params(out / f"gen_{g}" / "classifier")[0])
    return CheckpointSet(students, decoders, classifiers, read_history_csv(out / "loss_history.csv"))
