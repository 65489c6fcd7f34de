"""Small 2D encoder-decoder segmentation network and its gradient contract."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class InvalidArchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Arch:
    n_classes: int = 2
    in_channels: int = 1
    widths: tuple[int, ...] = (8, 16, 32)
    dropout_rate: float = 0.3

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.depth < 2:
            raise InvalidArchError(f"depth must be >= 2, got {self.depth}")
        if min(self.widths) < 4:
            raise InvalidArchError(f"widths must be >= 4, got {self.widths}")
        if self.n_classes < 2:
            raise InvalidArchError("need at least 2 classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArchError("dropout_rate must lie in [0, 1)")

    def min_input_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(
            n_classes=int(d["n_classes"]),
            in_channels=int(d.get("in_channels", 1)),
            widths=tuple(int(w) for w in d["widths"]),
            dropout_rate=float(d.get("dropout_rate", 0.3)),
        )


@dataclass(frozen=True)
class ForwardMode:
    """How a forward pass is perturbed.

    Deterministic mode ignores every other field. Stochastic mode adds
    N(0, sigma^2) noise to the input and applies inverted dropout, both drawn
    from a generator seeded with ``rng_seed``.
    """

    kind: str = "deterministic"
    dropout_rate: float = 0.3
    input_noise_sigma: float = 0.05
    rng_seed: int = 0

    @property
    def stochastic(self) -> bool:
        return self.kind == "stochastic"


DETERMINISTIC = ForwardMode()


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.SiLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.SiLU(inplace=True),
    )


class SegNet(nn.Module):
    """U-Net style network: ``depth`` encoder stages, skip connections,
    dropout in front of every decoder stage, per-pixel softmax output."""

    def __init__(self, arch: Arch):
        super().__init__()
        arch.validate()
        self.arch = arch
        w = arch.widths
        self.enc = nn.ModuleList()
        cin = arch.in_channels
        for width in w:
            self.enc.append(_double_conv(cin, width))
            cin = width
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(len(w) - 1)):
            self.up.append(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2))
            self.dec.append(_double_conv(2 * w[i], w[i]))
        self.head = nn.Conv2d(w[0], arch.n_classes, 1)
        # noticeably faster mkldnn convolutions on CPU
        self.to(memory_format=torch.channels_last)

    def logits(self, x: torch.Tensor, dropout_rate: float = 0.0,
               generators: Sequence[torch.Generator] | None = None) -> torch.Tensor:
        x = x.contiguous(memory_format=torch.channels_last)
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, block in zip(self.up, self.dec):
            x = torch.cat([up(x), skips.pop()], dim=1)
            if generators is not None and dropout_rate > 0:
                x = x * _dropout_masks(x, dropout_rate, generators)
            x = block(x)
        return self.head(x)

    def forward(self, x: torch.Tensor, mode: ForwardMode = DETERMINISTIC,
                generators: Sequence[torch.Generator] | None = None) -> torch.Tensor:
        if not mode.stochastic:
            return torch.softmax(self.logits(x), dim=1)
        if generators is None:
            generators = [_generator(mode.rng_seed + i) for i in range(x.shape[0])]
        x = add_input_noise(x, mode.input_noise_sigma, generators)
        return torch.softmax(self.logits(x, mode.dropout_rate, generators), dim=1)


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _dropout_masks(x: torch.Tensor, rate: float,
                   generators: Sequence[torch.Generator]) -> torch.Tensor:
    # one mask per batch element, each drawn from that element's generator
    keep = torch.stack([
        torch.rand(x.shape[1:], generator=g, dtype=x.dtype) >= rate
        for g in generators
    ])
    return keep.to(x.dtype) / (1.0 - rate)


def add_input_noise(x: torch.Tensor, sigma: float,
                    generators: Sequence[torch.Generator]) -> torch.Tensor:
    if sigma <= 0:
        return x
    noise = torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype)
                         for g in generators])
    return x + sigma * noise


def init_params(arch: Arch, seed: int) -> SegNet:
    """Fresh network: fan-in scaled uniform weights, zero biases."""
    arch.validate()
    g = _generator(seed)
    net = SegNet(arch)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                # ConvTranspose2d weights are laid out (in, out, kh, kw)
                if name.startswith("up."):
                    fan_in = p.shape[0] * p.shape[2] * p.shape[3]
                else:
                    fan_in = int(np.prod(p.shape[1:]))
                bound = float(np.sqrt(6.0 / fan_in))
                p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * bound)
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def as_batch(image) -> torch.Tensor:
    """Accept (H, W), (C, H, W) or (B, C, H, W) arrays and return a float batch."""
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    return x


def forward(net: SegNet, image, mode: ForwardMode = DETERMINISTIC) -> torch.Tensor:
    """Class probabilities, shape (B, C, H, W). Gradients flow when enabled."""
    x = as_batch(image).to(next(net.parameters()).dtype)
    m = net.arch.min_input_multiple()
    if x.ndim != 4 or x.shape[1] != net.arch.in_channels:
        raise ValueError(f"expected {net.arch.in_channels} input channel(s), got shape {tuple(x.shape)}")
    if x.shape[-1] % m or x.shape[-2] % m:
        raise ValueError(f"spatial size {tuple(x.shape[-2:])} must be divisible by {m}")
    return net(x, mode)


def loss_and_grad(net: SegNet, images, targets,
                  loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                  mode: ForwardMode = DETERMINISTIC) -> tuple[float, dict[str, torch.Tensor]]:
    """Scalar loss of ``loss_fn(probs, targets)`` and its exact gradient
    for every named parameter. The net's own ``.grad`` fields are left alone."""
    params = [p for _, p in net.named_parameters()]
    probs = forward(net, images, mode)
    loss = loss_fn(probs, torch.as_tensor(targets))
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for (name, p), g in zip(net.named_parameters(), grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return float(loss.detach()), out


def copy_model(net: SegNet) -> SegNet:
    clone = SegNet(net.arch).to(dtype=next(net.parameters()).dtype, memory_format=torch.channels_last)
    clone.load_state_dict(net.state_dict())
    return clone


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(net: SegNet, directory: str | Path, step: int,
                    rng_state: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, p in net.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": arr.size})
        offset += arr.size
        blobs.append(arr)
    (directory / "params.f32").write_bytes(np.concatenate(blobs).tobytes())
    manifest = {
        "arch": net.arch.to_dict(),
        "step": int(step),
        "rng_state": rng_state or {},
        "params": entries,
        "blob": "params.f32",
        "dtype": "float32-le",
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[SegNet, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    net = SegNet(Arch.from_dict(manifest["arch"]))
    flat = np.frombuffer((directory / manifest["blob"]).read_bytes(), dtype="<f4")
    named = dict(net.named_parameters())
    if [e["name"] for e in manifest["params"]] != list(named):
        raise ValueError(f"checkpoint parameters do not match architecture in {directory}")
    with torch.no_grad():
        for e in manifest["params"]:
            chunk = flat[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
            named[e["name"]].copy_(torch.from_numpy(chunk.copy()))
    return net, manifest
