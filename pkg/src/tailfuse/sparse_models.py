"""Student, decoder and classifier networks plus the simplex primitives.

All networks take channel-last batches ``(B, H, W, C)`` and use stride-1,
padding-1 3x3 convolutions so every spatial map keeps the input's ``(H, W)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, NumericError, ShapeError
from .latent_store import read_tensor, write_tensor
from .seeding import derive_seed


# ---------------------------------------------------------------------------
# simplex primitives (numpy API)
# ---------------------------------------------------------------------------


def channelwise_softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("channelwise_softmax: non-finite logits")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_simplex(p, atol: float = 1e-5) -> None:
    p = np.asarray(p)
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise NumericError("sparse latent entries must lie in [0, 1]")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=atol):
        raise NumericError("sparse latent coordinates must sum to 1")


def sample_onehot(p, seed, temperature: float = 1.0) -> np.ndarray:
    """Draw one channel per spatial coordinate from the categorical ``p``.

    Works on any leading shape; the last axis is the channel axis. ``seed``
    may be an int or a ``numpy.random.Generator``.
    """
    p = np.asarray(p, dtype=np.float64)
    check_simplex(p)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if temperature != 1.0:
        # p ** (1 / T), renormalised; zero channels stay zero
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)) / temperature, -np.inf)
        e = np.exp(logp - logp.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # zero-probability channels are never picked, even at u == cdf boundaries
    idx = np.minimum(idx, p.shape[-1] - 1)
    out = np.zeros_like(p, dtype=np.float32)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def _conv(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Uniform fan-in init, one seeded substream per parameter name."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            weight = getattr(owner, "weight", p)
            fan_in = int(np.prod(weight.shape[1:])) if weight.dim() > 1 else weight.shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            rng = np.random.default_rng(derive_seed(seed, name))
            vals = rng.uniform(-bound, bound, size=tuple(p.shape))
            p.copy_(torch.as_tensor(vals, dtype=p.dtype))
    return module


class _Net(nn.Module):
    arch: str = ""

    def __init__(self, in_channels: int, out_channels: int, hidden: int):
        super().__init__()
        self.in_channels, self.out_channels, self.hidden = in_channels, out_channels, hidden

    @property
    def dims(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels, "hidden": self.hidden}

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"{self.arch}: expected (B, H, W, {self.in_channels}), got {tuple(x.shape)}")


class Student(_Net):
    """Latent ``(H, W, C)`` to channel-wise probabilities ``(H, W, C')``."""

    arch = "student-conv3"

    def __init__(self, in_channels: int, sparse_channels: int, hidden: int = 32):
        super().__init__(in_channels, sparse_channels, hidden)
        self.body = nn.Sequential(
            _conv(in_channels, hidden), nn.ReLU(), _conv(hidden, hidden), nn.ReLU(), _conv(hidden, sparse_channels)
        )

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        self._check(z)
        return self.body(z.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(z), dim=-1)


class Decoder(_Net):
    arch = "decoder-conv3"

    def __init__(self, sparse_channels: int, out_channels: int, hidden: int = 32):
        super().__init__(sparse_channels, out_channels, hidden)
        self.body = nn.Sequential(
            _conv(sparse_channels, hidden), nn.ReLU(), _conv(hidden, hidden), nn.ReLU(), _conv(hidden, out_channels)
        )

    def forward(self, zs: torch.Tensor) -> torch.Tensor:
        self._check(zs)
        return self.body(zs.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class Classifier(_Net):
    """Two convolutions, global average pool, linear head, per-class sigmoid."""

    arch = "classifier-conv2-gap"

    def __init__(self, in_channels: int, num_classes: int, hidden: int = 32):
        super().__init__(in_channels, num_classes, hidden)
        self.features = nn.Sequential(_conv(in_channels, hidden), nn.ReLU(), _conv(hidden, hidden), nn.ReLU())
        self.head = nn.Linear(hidden, num_classes)

    def activations(self, x: torch.Tensor) -> torch.Tensor:
        """Last-convolution activations, channel-last ``(B, H, W, C_a)``."""
        self._check(x)
        return self.features(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def logits_and_activations(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = self.activations(x)
        return self.head(a.mean(dim=(1, 2))), a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_and_activations(x)[0])

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return self.activations(x).mean(dim=(1, 2))


ARCHITECTURES = {cls.arch: cls for cls in (Student, Decoder, Classifier)}


def build(arch: str, in_channels: int, out_channels: int, hidden: int, seed: int, dtype=torch.float32) -> _Net:
    net = ARCHITECTURES[arch](in_channels, out_channels, hidden).to(dtype)
    return init_params(net, seed)


# ---------------------------------------------------------------------------
# forward passes on numpy arrays
# ---------------------------------------------------------------------------


@dataclass
class ClassScores:
    scores: np.ndarray
    activations: np.ndarray


def _batched(x, net: _Net) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite network input")
    single = arr.ndim == 3
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(arr[None] if single else arr, dtype=dtype)
    return t, single


def _run(net: _Net, x, fn=None):
    t, single = _batched(x, net)
    with torch.no_grad():
        out = (fn or net)(t)
    out = out.numpy()
    return out[0] if single else out


def student_forward(student: Student, z) -> np.ndarray:
    """``(H, W, C)`` or a batch of them to simplex-valued ``(.., H, W, C')``."""
    return _run(student, z)


def student_logits(student: Student, z) -> np.ndarray:
    return _run(student, z, student.logits)


def decoder_forward(decoder: Decoder, zs) -> np.ndarray:
    return _run(decoder, zs)


def classifier_forward(classifier: Classifier, zs) -> ClassScores:
    t, single = _batched(zs, classifier)
    with torch.no_grad():
        logits, acts = classifier.logits_and_activations(t)
        scores = torch.sigmoid(logits)
    s, a = scores.numpy(), acts.numpy()
    return ClassScores(s[0], a[0]) if single else ClassScores(s, a)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_params(net: _Net, directory, **meta) -> Path:
    """Directory of LTA1 parameter tensors plus ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in net.state_dict().items():
        write_tensor(tensor.detach().cpu().numpy(), d / f"{name}.lta")
        names.append(name)
    doc = {"architecture": net.arch, "dims": net.dims, "parameters": names, **meta}
    (d / "meta.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return d


def load_params(directory) -> tuple[_Net, dict]:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        cls = ARCHITECTURES[meta["architecture"]]
        dims = meta["dims"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}: unreadable checkpoint ({exc})") from exc
    net = cls(dims["in_channels"], dims["out_channels"], dims["hidden"])
    state = {}
    for name in meta["parameters"]:
        arr = read_tensor(d / f"{name}.lta")
        state[name] = torch.from_numpy(arr.copy())
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise ShapeError(f"{d}: parameters inconsistent with {meta['architecture']} ({exc})") from exc
    net.eval()
    return net, meta
