"""Sample-level uncertainty scores and low-uncertainty-first selection."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch


@dataclass
class SelectionResult:
    scores: dict[str, float]
    selected: list[str]
    residual: list[str]
    k_effective: int


def sample_uncertainty(stack) -> torch.Tensor:
    """Population variance across passes, averaged over pixels and classes.
    Accepts (..., m, C, H, W) and returns one score per leading index."""
    probs = stack.probs if hasattr(stack, "probs") else torch.as_tensor(stack)
    var = probs.var(dim=-4, unbiased=False)
    return var.mean(dim=(-3, -2, -1))


def k_effective(k_ratio: float, n: int) -> int:
    # round half up; Python's round() would send 2.5 to 2
    return min(n, int(math.floor(k_ratio * n + 0.5 + 1e-9)))


def select_top_k(scores: dict[str, float], k_ratio: float) -> SelectionResult:
    if not 0.0 <= k_ratio <= 1.0:
        raise ValueError("k_ratio must lie in [0, 1]")
    if not scores:
        raise ValueError("no scores to select from")
    order = sorted(scores, key=lambda sid: (scores[sid], sid))
    k = k_effective(k_ratio, len(order))
    return SelectionResult(dict(scores), order[:k], order[k:], k)


def append_selection_log(path: str | Path, epoch: int, result: SelectionResult) -> None:
    path = Path(path)
    new = not path.exists()
    chosen = set(result.selected)
    with path.open("a", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["epoch", "sample_id", "score", "selected"])
        for sid in result.selected + result.residual:
            w.writerow([epoch, sid, repr(float(result.scores[sid])), int(sid in chosen)])
