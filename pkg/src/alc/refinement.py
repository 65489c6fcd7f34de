"""Uncertainty-weighted fusion of perturbed teacher predictions into corrected labels.

Stacks are laid out (..., m, C, H, W): pass axis -4, class axis -3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .nn import ForwardMode, SegNet, _generator, as_batch

KL_EPS = 1e-7


@dataclass
class ProbStack:
    sample_id: str
    probs: torch.Tensor   # (m, C, H, W)
    seeds: list[int]

    def __post_init__(self):
        if self.probs.shape[0] < 2:
            raise ValueError("a stack needs at least two passes")


@dataclass
class UncertaintyMaps:
    mean: torch.Tensor    # (C, H, W)
    kl: torch.Tensor      # (m, H, W)


def pass_seeds(master_seed, m: int) -> list[int]:
    """``m`` independent seeds derived from one master seed (an int or a
    sequence of ints)."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(m, dtype=np.uint32)]


@torch.no_grad()
def perturbed_probs(teacher: SegNet, images, m: int, sigma: float, dropout_rate: float,
                    seeds_per_image: list[list[int]]) -> torch.Tensor:
    """Batched stochastic passes: images (B, 1, H, W) -> (B, m, C, H, W).
    Pass j of image i is driven only by ``seeds_per_image[i][j]``."""
    x = as_batch(images).to(next(teacher.parameters()).dtype)
    b = x.shape[0]
    reps = x.repeat_interleave(m, dim=0)
    gens = [_generator(s) for seeds in seeds_per_image for s in seeds]
    mode = ForwardMode("stochastic", dropout_rate, sigma)
    out = teacher(reps, mode, generators=gens)
    return out.reshape(b, m, *out.shape[1:])


def perturbed_stack(teacher: SegNet, image, m: int = 8, sigma: float = 0.05,
                    dropout_rate: float = 0.3, seed=0, sample_id: str = "") -> ProbStack:
    if m < 2:
        raise ValueError("m must be >= 2")
    seeds = pass_seeds(seed, m)
    probs = perturbed_probs(teacher, as_batch(image)[:1], m, sigma, dropout_rate, [seeds])[0]
    return ProbStack(sample_id, probs, seeds)


def _probs(stack) -> torch.Tensor:
    if isinstance(stack, ProbStack):
        return stack.probs
    return stack if torch.is_tensor(stack) else torch.as_tensor(stack)


def stack_mean(stack) -> torch.Tensor:
    return _probs(stack).mean(dim=-4)


def voxel_kl(mean, member, kl_form: str = "summed") -> torch.Tensor:
    """KL(mean || member) per pixel, classes on axis -3.

    ``kl_form="printed"`` skips the class sum and returns the elementwise
    terms mean_c log(mean_c / member_c), keeping the class axis; individual
    terms can be negative."""
    mean = _probs(mean).clamp(KL_EPS, 1.0)
    member = _probs(member).clamp(KL_EPS, 1.0)
    terms = mean * (torch.log(mean) - torch.log(member))
    if kl_form == "summed":
        return terms.sum(dim=-3)
    if kl_form == "printed":
        return terms
    raise ValueError(f"unknown kl_form {kl_form!r}")


def uncertainty_maps(stack, kl_form: str = "summed") -> UncertaintyMaps:
    probs = _probs(stack)
    mean = probs.mean(dim=-4)
    return UncertaintyMaps(mean=mean, kl=voxel_kl(mean.unsqueeze(-4), probs, kl_form))


def fused_scores(probs, kl, scale_by_m: bool = True) -> torch.Tensor:
    """Per-pixel softmax over passes of -KL, then the weighted average of the
    pass probabilities: (..., m, C, H, W), (..., m, H, W) -> (..., C, H, W).
    A per-class ``kl`` of shape (..., m, C, H, W) gives per-class weights."""
    probs = _probs(probs)
    if kl.ndim == probs.ndim:
        w = torch.softmax(-kl, dim=-4)
    else:
        w = torch.softmax(-kl, dim=-3).unsqueeze(-3)
    fused = (w * probs).sum(dim=-4)
    return fused / probs.shape[-4] if scale_by_m else fused


def refine_label(stack, kl_form: str = "summed") -> torch.Tensor:
    """Corrected label map (..., H, W); ties go to the lower class id."""
    maps = uncertainty_maps(stack, kl_form)
    return torch.argmax(fused_scores(_probs(stack), maps.kl), dim=-3)
