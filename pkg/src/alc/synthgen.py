"""Synthetic 2D segmentation data and morphological label corruption."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

HQ = "HQ"
LQ = "LQ"

# background / class intensity levels and noise of the generated images
BACKGROUND_LEVEL = 0.35
FOREGROUND_SPAN = (0.55, 0.9)
PIXEL_NOISE = 0.18
SHADING = 0.12


class InvalidDimensionError(ValueError):
    pass


class EmptyHQError(ValueError):
    pass


@dataclass
class LabeledSample:
    id: str
    image: np.ndarray   # (H, W) float32 in [0, 1]
    label: np.ndarray   # (H, W) uint8 class ids
    quality: str = HQ

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} vs label {self.label.shape}")


@dataclass
class Dataset:
    samples: list[LabeledSample]
    n_classes: int
    clean_labels: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")

    def __len__(self):
        return len(self.samples)

    def by_quality(self, quality: str) -> list[LabeledSample]:
        return [s for s in self.samples if s.quality == quality]

    def get(self, sample_id: str) -> LabeledSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    @property
    def hq_ratio(self) -> float:
        return len(self.by_quality(HQ)) / len(self.samples)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples[0].image.shape

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.n_classes).encode())
        for s in self.samples:
            h.update(s.id.encode())
            h.update(s.quality.encode())
            h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())
        return h.hexdigest()


def _sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def _draw_shape(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)
    ry, rx = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _make_sample(sample_seed: int, h: int, w: int, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(sample_seed)
    label = np.zeros((h, w), dtype=np.uint8)
    for c in range(1, n_classes):
        for _ in range(rng.integers(1, 4)):
            label[_draw_shape(rng, h, w)] = c
    if n_classes > 2:
        levels = np.linspace(*FOREGROUND_SPAN, n_classes - 1)
    else:
        levels = np.array([FOREGROUND_SPAN[1] - 0.1])
    intensity = np.concatenate([[BACKGROUND_LEVEL], levels])[label]
    # smooth low-frequency shading so intensity alone is not a perfect cue
    shading = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=h / 6, mode="wrap")
    shading *= SHADING / (shading.std() + 1e-12)
    image = intensity + shading + PIXEL_NOISE * rng.standard_normal((h, w))
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def make_shapes_dataset(seed: int, n_samples: int, grid_size: tuple[int, int] | int,
                        n_classes: int) -> Dataset:
    """Random filled ellipses/rectangles (1-3 per foreground class) on a
    noisy, shaded background. Labels are exact; every sample is HQ."""
    if isinstance(grid_size, int):
        grid_size = (grid_size, grid_size)
    h, w = grid_size
    if h < 16 or w < 16:
        raise InvalidDimensionError(f"grid must be at least 16x16, got {h}x{w}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    seeds = _sample_seeds(seed, n_samples)
    samples = []
    for i, s in enumerate(seeds):
        image, label = _make_sample(s, h, w, n_classes)
        samples.append(LabeledSample(id=f"s{i:04d}", image=image, label=label, quality=HQ))
    clean = {s.id: s.label.copy() for s in samples}
    meta = {"seed": int(seed), "n_samples": n_samples, "grid": [h, w], "sample_seeds": seeds}
    return Dataset(samples=samples, n_classes=n_classes, clean_labels=clean, meta=meta)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= r * r


def morph(mask: np.ndarray, radius: int, mode: str) -> np.ndarray:
    """Binary dilation or erosion with a Euclidean disc of ``radius``.
    Pixels outside the grid count as background."""
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    if mode == "dilate":
        return ndimage.binary_dilation(mask, structure=disc(radius))
    if mode == "erode":
        return ndimage.binary_erosion(mask, structure=disc(radius), border_value=0)
    raise ValueError(f"unknown mode {mode!r}")


def corrupt_label(label: np.ndarray, min_px: int, max_px: int, rng: np.random.Generator,
                  n_classes: int | None = None, mode: str | None = None) -> np.ndarray:
    """Move every foreground class boundary in or out by a random radius.

    Each class draws its own radius in [min_px, max_px] and its own mode
    (unless ``mode`` forces one). Eroded pixels become background; dilated
    pixels only claim background, lower class ids first.
    """
    if min_px > max_px:
        raise ValueError("min_px must not exceed max_px")
    label = np.asarray(label)
    if n_classes is None:
        n_classes = int(label.max()) + 1
    plan = []
    for c in range(1, n_classes):
        r = int(rng.integers(min_px, max_px + 1))
        m = mode if mode is not None else ("dilate", "erode")[int(rng.integers(0, 2))]
        plan.append((c, r, m))
    out = label.copy()
    for c, r, m in plan:
        if m == "erode":
            cls = label == c
            out[cls & ~morph(cls, r, "erode")] = 0
    for c, r, m in plan:
        if m == "dilate":
            grown = morph(label == c, r, "dilate")
            out[grown & (out == 0)] = c
    return out


def split_hq_lq(dataset: Dataset, hq_ratio: float, noise: tuple[int, int],
                rng: np.random.Generator) -> Dataset:
    """Keep the first floor(hq_ratio * N) shuffled samples clean (HQ) and
    corrupt the rest (LQ). Sample order is preserved."""
    if not 0.0 < hq_ratio <= 1.0:
        raise ValueError("hq_ratio must lie in (0, 1]")
    n = len(dataset.samples)
    n_hq = int(np.floor(hq_ratio * n + 1e-9))
    if n_hq == 0:
        raise EmptyHQError(f"hq_ratio={hq_ratio} leaves no HQ sample out of {n}")
    order = rng.permutation(n)
    hq_idx = set(int(i) for i in order[:n_hq])
    clean = dict(dataset.clean_labels) if dataset.clean_labels else {}
    samples = []
    for i, s in enumerate(dataset.samples):
        truth = clean.setdefault(s.id, s.label.copy())
        if i in hq_idx:
            samples.append(replace(s, label=truth.copy(), quality=HQ))
        else:
            noisy = corrupt_label(truth, noise[0], noise[1], rng, dataset.n_classes)
            samples.append(replace(s, label=noisy, quality=LQ))
    meta = dict(dataset.meta, hq_ratio=hq_ratio, noise=list(noise))
    return Dataset(samples=samples, n_classes=dataset.n_classes, clean_labels=clean, meta=meta)


def generate(seed: int, n_samples: int, grid_size, n_classes: int, hq_ratio: float,
             noise: tuple[int, int]) -> Dataset:
    """Shapes dataset plus HQ/LQ split, driven by one seed."""
    base = make_shapes_dataset(seed, n_samples, grid_size, n_classes)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return split_hq_lq(base, hq_ratio, noise, rng)


# -- on-disk format ----------------------------------------------------------

def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = dataset.shape
    for s in dataset.samples:
        (directory / f"{s.id}.img").write_bytes(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        (directory / f"{s.id}.lab").write_bytes(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())
        if dataset.clean_labels is not None:
            clean = dataset.clean_labels[s.id]
            (directory / f"{s.id}.clean").write_bytes(np.ascontiguousarray(clean, dtype=np.uint8).tobytes())
    manifest = {
        "n_classes": dataset.n_classes,
        "grid": [h, w],
        "ids": [s.id for s in dataset.samples],
        "quality": [s.quality for s in dataset.samples],
        "has_clean": dataset.clean_labels is not None,
        "seeds": dataset.meta.get("sample_seeds", []),
        "seed": dataset.meta.get("seed"),
        "hq_ratio": dataset.meta.get("hq_ratio"),
        "noise": dataset.meta.get("noise"),
        "fingerprint": dataset.fingerprint(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    h, w = manifest["grid"]
    samples = []
    clean = {} if manifest.get("has_clean") else None
    for sid, quality in zip(manifest["ids"], manifest["quality"]):
        image = np.frombuffer((directory / f"{sid}.img").read_bytes(), dtype="<f4").reshape(h, w)
        label = np.frombuffer((directory / f"{sid}.lab").read_bytes(), dtype=np.uint8).reshape(h, w)
        samples.append(LabeledSample(sid, image.astype(np.float32), label.copy(), quality))
        if clean is not None:
            clean[sid] = np.frombuffer((directory / f"{sid}.clean").read_bytes(),
                                       dtype=np.uint8).reshape(h, w).copy()
    meta = {
        "seed": manifest.get("seed"),
        "grid": [h, w],
        "sample_seeds": manifest.get("seeds", []),
        "hq_ratio": manifest.get("hq_ratio"),
        "noise": manifest.get("noise"),
        "n_samples": len(samples),
    }
    return Dataset(samples=samples, n_classes=int(manifest["n_classes"]), clean_labels=clean, meta=meta)
