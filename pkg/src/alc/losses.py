"""Segmentation, selection, noisy and consistency losses plus their weighting.

Probability maps are channel-first: a single sample is (C, H, W) and batches
add leading dimensions. Per-sample losses reduce only the trailing (C, H, W)
axes, so they work on batches and return one value per sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

CE_EPS = 1e-7
DICE_SMOOTH = 1e-5
ALL_TERMS = frozenset({"hs", "ls", "n", "c"})


class EmptyBatchError(ValueError):
    pass


def _as_tensor(x, dtype=None) -> torch.Tensor:
    t = x if torch.is_tensor(x) else torch.as_tensor(x)
    return t.to(dtype) if dtype is not None else t


def _check(prob: torch.Tensor, label: torch.Tensor) -> None:
    if prob.shape[:-3] + prob.shape[-2:] != label.shape:
        raise ValueError(f"prob {tuple(prob.shape)} does not match label {tuple(label.shape)}")


def one_hot(label: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(..., H, W) int -> (..., C, H, W) float."""
    oh = torch.nn.functional.one_hot(label.long(), n_classes).to(dtype)
    return oh.movedim(-1, -3)


def cross_entropy(prob, label) -> torch.Tensor:
    prob = _as_tensor(prob)
    label = _as_tensor(label).long()
    _check(prob, label)
    picked = torch.gather(prob, -3, label.unsqueeze(-3)).squeeze(-3)
    return -torch.log(picked.clamp(CE_EPS, 1.0)).mean(dim=(-2, -1))


def soft_dice_loss(prob, label) -> torch.Tensor:
    prob = _as_tensor(prob)
    label = _as_tensor(label)
    _check(prob, label)
    g = one_hot(label, prob.shape[-3], prob.dtype)
    inter = (prob * g).sum(dim=(-2, -1))
    denom = prob.sum(dim=(-2, -1)) + g.sum(dim=(-2, -1))
    per_class = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return 1 - per_class.mean(dim=-1)


def seg_loss(prob, label) -> torch.Tensor:
    return 0.5 * (cross_entropy(prob, label) + soft_dice_loss(prob, label))


def hq_loss(student_probs, labels) -> torch.Tensor:
    """Mean segmentation loss over an HQ batch (B, C, H, W) / (B, H, W)."""
    student_probs = _as_tensor(student_probs)
    if student_probs.shape[0] == 0:
        raise EmptyBatchError("HQ batch is empty")
    return seg_loss(student_probs, labels).mean()


def lq_loss(student_probs, refined_labels) -> torch.Tensor:
    """Mean segmentation loss over the selected LQ samples against their
    refined labels. An empty selection contributes 0."""
    student_probs = _as_tensor(student_probs)
    if student_probs.shape[0] == 0:
        return student_probs.sum() * 0.0
    return seg_loss(student_probs, refined_labels).mean()


def noisy_loss(student_probs, targets) -> torch.Tensor:
    """Mean segmentation loss over the residual (non-selected) samples,
    normalized by the residual count. Empty residual gives 0."""
    return lq_loss(student_probs, targets)


def consistency_loss(teacher_stack, student_prob) -> torch.Tensor:
    """Mean over pixels of the L2 distance (across classes) between the
    average teacher prediction and the student prediction.

    ``teacher_stack`` is (..., m, C, H, W), ``student_prob`` (..., C, H, W).
    """
    teacher_stack = _as_tensor(teacher_stack)
    student_prob = _as_tensor(student_prob)
    teacher_mean = teacher_stack.mean(dim=-4)
    if teacher_mean.shape != student_prob.shape:
        raise ValueError(f"teacher {tuple(teacher_mean.shape)} vs student {tuple(student_prob.shape)}")
    diff = teacher_mean - student_prob
    return torch.linalg.vector_norm(diff, dim=-3).mean(dim=(-2, -1))


def lambda_ramp(t: float, t_ramp: float) -> float:
    """Gaussian ramp-up exp(-5 (1 - t/T)^2), clipped to 1 after ``t_ramp``."""
    if t_ramp <= 0:
        raise ValueError("t_ramp must be positive")
    frac = min(max(t, 0) / t_ramp, 1.0)
    return math.exp(-5.0 * (1.0 - frac) ** 2)


@dataclass(frozen=True)
class LossSpec:
    alpha: float = 3.0
    beta: float = 2.0
    lambda_now: float = 1.0
    active_terms: frozenset = field(default=ALL_TERMS)

    def weights(self) -> dict[str, float]:
        w = {
            "hs": 1.0,
            "ls": self.lambda_now * self.alpha,
            "n": self.lambda_now * self.beta,
            "c": self.lambda_now,
        }
        return {k: (v if k in self.active_terms else 0.0) for k, v in w.items()}


def total_loss(l_hs, l_ls, l_n, l_c, spec: LossSpec):
    """L_hs + lambda * (alpha * L_ls + beta * L_n + L_c); inactive terms are dropped."""
    parts = {"hs": l_hs, "ls": l_ls, "n": l_n, "c": l_c}
    for name, v in parts.items():
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise ValueError(f"loss term {name} is not finite: {val}")
    a = spec.alpha if "ls" in spec.active_terms else 0.0
    b = spec.beta if "n" in spec.active_terms else 0.0
    c = 1.0 if "c" in spec.active_terms else 0.0
    hs = l_hs if "hs" in spec.active_terms else 0.0 * l_hs
    return hs + spec.lambda_now * (a * l_ls + b * l_n + c * l_c)
