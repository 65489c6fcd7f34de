"""Mean Teacher training with label refinement, selection and consistency."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .metrics import MetricsReport, evaluate_labels, label_dice, mean_report, write_metrics_csv
from .nn import Arch, ForwardMode, SegNet, _generator, copy_model, init_params, save_checkpoint
from .refinement import fused_scores, pass_seeds, perturbed_probs, voxel_kl
from .selection import SelectionResult, append_selection_log, sample_uncertainty, select_top_k
from .synthgen import HQ, LQ, Dataset, LabeledSample, make_shapes_dataset

log = logging.getLogger(__name__)

MODES = ("alc", "alc-no-ls", "alc-no-lr", "mt")
RUNLOG_COLUMNS = ["step", "lambda", "L_hs", "L_ls", "L_n", "L_c", "L_total", "selected"]
EVAL_COLUMNS = ["step", "dice", "jaccard", "hd95", "asd",
                "noisy_label_dice", "pseudo_label_dice", "refined_label_dice"]


class TrainingDiverged(FloatingPointError):
    pass


class ArchMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    hq_batch: int = 4
    lq_batch: int = 8
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    gamma: float = 0.99
    m: int = 8
    sigma: float = 0.05
    dropout_rate: float = 0.3
    k_ratio: float = 0.5
    alpha: float = 3.0
    beta: float = 2.0
    t_ramp: int | None = None  # None: 40% of steps
    disable_LS: bool = False
    disable_LR: bool = False
    mt_baseline: bool = False
    residual_targets: str = "refined"
    student_perturb: bool = True  # train the student under its own noise + dropout
    kl_form: str = "summed"
    master_seed: int = 0
    widths: tuple[int, ...] = (8, 16, 32)
    eval_every: int = 250
    eval_n: int = 50
    eval_seed: int | None = None  # None: dataset seed + 100003

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.residual_targets not in ("refined", "original"):
            raise ValueError("residual_targets must be 'refined' or 'original'")
        if self.m < 2:
            raise ValueError("m must be >= 2")
        self.widths = tuple(self.widths)

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "TrainConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        flags = {
            "alc": {},
            "alc-no-ls": {"disable_LS": True},
            "alc-no-lr": {"disable_LR": True},
            "mt": {"mt_baseline": True},
        }[mode]
        return cls(**{**kw, **flags})

    @property
    def mode(self) -> str:
        if self.mt_baseline:
            return "mt"
        if self.disable_LS and self.disable_LR:
            return "alc-no-ls-no-lr"
        if self.disable_LS:
            return "alc-no-ls"
        if self.disable_LR:
            return "alc-no-lr"
        return "alc"

    @property
    def ramp_steps(self) -> float:
        return self.t_ramp if self.t_ramp is not None else max(1.0, 0.4 * self.steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["mode"] = self.mode
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


# -- optimizer and teacher ---------------------------------------------------

@torch.no_grad()
def ema_update(teacher: SegNet, student: SegNet, gamma: float) -> SegNet:
    if teacher.arch != student.arch:
        raise ArchMismatchError(f"{teacher.arch} vs {student.arch}")
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(gamma).add_(ps, alpha=1.0 - gamma)
    return teacher


@torch.no_grad()
def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
             velocity: dict[str, torch.Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> dict[str, torch.Tensor]:
    """v <- momentum * v + g + wd * theta;  theta <- theta - lr * v  (in place)."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name}")
    for name, p in params.items():
        d = grads[name] + weight_decay * p if weight_decay else grads[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = torch.zeros_like(p)
        v.mul_(momentum).add_(d)
        p.sub_(lr * v)
    return params


# -- batches -----------------------------------------------------------------

class BatchStream:
    """Endless batches from a pool, reshuffled with a fresh seeded
    permutation every epoch."""

    def __init__(self, samples: list[LabeledSample], batch_size: int, seed: tuple[int, ...]):
        if not samples:
            raise ValueError("cannot draw batches from an empty pool")
        self.samples = samples
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = -1
        self._queue: list[int] = []

    def next(self) -> list[LabeledSample]:
        out = []
        while len(out) < self.batch_size:
            if not self._queue:
                self.epoch += 1
                rng = np.random.default_rng(np.random.SeedSequence([*self.seed, self.epoch]))
                self._queue = [int(i) for i in rng.permutation(len(self.samples))]
            out.append(self.samples[self._queue.pop(0)])
        return out


def _images(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]))[:, None]


def _labels(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))


# -- one step ----------------------------------------------------------------

def teacher_stacks(teacher: SegNet, samples, config: TrainConfig, seed_prefix) -> torch.Tensor:
    seeds = [pass_seeds([*seed_prefix, i], config.m) for i in range(len(samples))]
    return perturbed_probs(teacher, _images(samples), config.m, config.sigma,
                           config.dropout_rate, seeds)


def corrected_labels(stacks: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    if config.disable_LR:
        # single perturbed teacher pass, no fusion
        return stacks[:, 0].argmax(dim=1)
    kl = voxel_kl(stacks.mean(dim=1, keepdim=True), stacks, config.kl_form)
    return fused_scores(stacks, kl).argmax(dim=1)


@dataclass
class LQTargets:
    """Everything the LQ terms need from the teacher, frozen for one step."""

    stacks: torch.Tensor              # (B_n, m, C, H, W)
    refined: torch.Tensor | None      # (B_n, H, W) corrected labels
    noisy: torch.Tensor               # (B_n, H, W) stored LQ labels
    selection: SelectionResult | None
    selected_idx: torch.Tensor
    residual_idx: torch.Tensor


def lq_targets(teacher: SegNet, lq: list[LabeledSample], config: TrainConfig,
               step: int) -> LQTargets:
    stacks = teacher_stacks(teacher, lq, config, (config.master_seed, step))
    empty = torch.zeros(0, dtype=torch.long)
    if config.mt_baseline:
        return LQTargets(stacks, None, _labels(lq), None, empty, empty)
    ids = [s.id for s in lq]
    refined = corrected_labels(stacks, config)
    scores = {sid: float(u) for sid, u in zip(ids, sample_uncertainty(stacks))}
    sel = select_top_k(scores, 1.0 if config.disable_LS else config.k_ratio)
    pos = {sid: i for i, sid in enumerate(ids)}
    si = torch.tensor([pos[s] for s in sel.selected], dtype=torch.long)
    ri = torch.tensor([pos[s] for s in sel.residual], dtype=torch.long)
    return LQTargets(stacks, refined, _labels(lq), sel, si, ri)


def step_losses(p_hq: torch.Tensor, hq_labels: torch.Tensor, p_lq: torch.Tensor,
                targets: LQTargets, spec: L.LossSpec, config: TrainConfig) -> dict[str, torch.Tensor]:
    """The four loss terms and their weighted total for given student outputs."""
    l_hs = L.hq_loss(p_hq, hq_labels)
    l_c = L.consistency_loss(targets.stacks, p_lq).mean()
    if targets.refined is None:
        l_ls = l_n = p_lq.sum() * 0.0
    else:
        si, ri = targets.selected_idx, targets.residual_idx
        l_ls = L.lq_loss(p_lq[si], targets.refined[si])
        residual = targets.refined if config.residual_targets == "refined" else targets.noisy
        l_n = L.noisy_loss(p_lq[ri], residual[ri])
    total = L.total_loss(l_hs, l_ls, l_n, l_c, spec)
    return {"hs": l_hs, "ls": l_ls, "n": l_n, "c": l_c, "total": total}


def loss_spec(config: TrainConfig, step: int) -> L.LossSpec:
    active = frozenset({"hs", "c"}) if config.mt_baseline else L.ALL_TERMS
    return L.LossSpec(config.alpha, config.beta, L.lambda_ramp(step, config.ramp_steps), active)


STUDENT_STREAM = 1_000_003  # keeps student seeds apart from the per-sample teacher seeds


def student_forward(student: SegNet, x: torch.Tensor, config: TrainConfig, step: int) -> torch.Tensor:
    if not config.student_perturb:
        return student(x)
    seeds = pass_seeds([config.master_seed, step, STUDENT_STREAM], x.shape[0])
    mode = ForwardMode("stochastic", config.dropout_rate, config.sigma)
    return student(x, mode, generators=[_generator(s) for s in seeds])


def train_step(student: SegNet, teacher: SegNet, velocity: dict, hq: list[LabeledSample],
               lq: list[LabeledSample], config: TrainConfig, step: int):
    """One iteration: refine and select on the LQ batch, combine the four
    losses, update the student by SGD and the teacher by EMA."""
    spec = loss_spec(config, step)
    targets = lq_targets(teacher, lq, config, step)
    probs = student_forward(student, torch.cat([_images(hq), _images(lq)]), config, step)
    p_hq, p_lq = probs[:len(hq)], probs[len(hq):]
    try:
        terms = step_losses(p_hq, _labels(hq), p_lq, targets, spec, config)
        if not torch.isfinite(terms["total"]):
            raise ValueError(f"total loss is {float(terms['total'])}")
    except ValueError as exc:
        raise TrainingDiverged(f"step {step}: {exc}; HQ batch {[s.id for s in hq]}, "
                               f"LQ batch {[s.id for s in lq]}") from exc

    params = dict(student.named_parameters())
    grads = torch.autograd.grad(terms["total"], list(params.values()))
    sgd_step(params, dict(zip(params, grads)), velocity, config.lr,
             config.momentum, config.weight_decay)
    ema_update(teacher, student, config.gamma)

    sel = targets.selection
    row = {
        "step": step,
        "lambda": spec.lambda_now,
        "L_hs": float(terms["hs"].detach()),
        "L_ls": float(terms["ls"].detach()),
        "L_n": float(terms["n"].detach()),
        "L_c": float(terms["c"].detach()),
        "L_total": float(terms["total"].detach()),
        "selected": "|".join(sel.selected) if sel else "",
    }
    return student, teacher, row, sel


# -- evaluation --------------------------------------------------------------

@torch.no_grad()
def predict(net: SegNet, samples: list[LabeledSample], batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch):
        out.append(net(_images(samples[i:i + batch])).argmax(dim=1).numpy())
    return np.concatenate(out).astype(np.uint8)


def evaluate(net: SegNet, samples: list[LabeledSample], n_classes: int,
             csv_path: str | Path | None = None) -> tuple[MetricsReport, dict[str, MetricsReport]]:
    """Deterministic forward + argmax, metrics against each sample's label."""
    preds = predict(net, samples)
    reports = {s.id: evaluate_labels(p, s.label, n_classes) for s, p in zip(samples, preds)}
    if csv_path is not None:
        mean = write_metrics_csv(csv_path, reports)
    else:
        mean = mean_report(list(reports.values()))
    return mean, reports


@torch.no_grad()
def label_quality(teacher: SegNet, dataset: Dataset, config: TrainConfig,
                  batch: int = 16) -> dict[str, float]:
    """Mean Dice against clean labels of the noisy labels, single-pass
    teacher pseudo labels and fused (refined) labels over the LQ pool."""
    lq = dataset.by_quality(LQ)
    if not lq or not dataset.clean_labels:
        return {"noisy_label_dice": float("nan"), "pseudo_label_dice": float("nan"),
                "refined_label_dice": float("nan")}
    c = dataset.n_classes
    noisy, pseudo, refined = [], [], []
    cfg_lr = replace(config, disable_LR=False)
    for i in range(0, len(lq), batch):
        chunk = lq[i:i + batch]
        stacks = teacher_stacks(teacher, chunk, config, (config.master_seed, 7777, i))
        ref = corrected_labels(stacks, cfg_lr).numpy()
        single = stacks[:, 0].argmax(dim=1).numpy()
        for s, r, p in zip(chunk, ref, single):
            clean = dataset.clean_labels[s.id]
            noisy.append(label_dice(s.label, clean, c))
            pseudo.append(label_dice(p, clean, c))
            refined.append(label_dice(r, clean, c))
    return {"noisy_label_dice": float(np.mean(noisy)),
            "pseudo_label_dice": float(np.mean(pseudo)),
            "refined_label_dice": float(np.mean(refined))}


def eval_split(dataset: Dataset, config: TrainConfig) -> list[LabeledSample]:
    """Held-out samples generated fresh with corruption disabled."""
    seed = config.eval_seed
    if seed is None:
        if dataset.meta.get("seed") is None:
            raise ValueError("dataset carries no generation seed; set eval_seed")
        seed = int(dataset.meta["seed"]) + 100003
    h, w = dataset.shape
    return make_shapes_dataset(seed, config.eval_n, (h, w), dataset.n_classes).samples


# -- full run ----------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, columns: list[str], rows: list[dict], mode: str = "w") -> None:
    new = mode == "w" or not path.exists()
    with path.open(mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def run_training(dataset: Dataset, config: TrainConfig, out_dir: str | Path | None = None,
                 eval_samples: list[LabeledSample] | None = None,
                 progress: bool = False) -> tuple[SegNet, RunLog]:
    hq = dataset.by_quality(HQ)
    lq = dataset.by_quality(LQ)
    if not hq:
        raise ValueError("dataset has no HQ samples")
    if not lq:
        if not config.mt_baseline:
            raise ValueError("dataset has no LQ samples (only allowed with the MT baseline)")
        lq = hq
    if eval_samples is None:
        eval_samples = eval_split(dataset, config)

    torch.manual_seed(config.master_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
        for name, cols in (("runlog.csv", RUNLOG_COLUMNS), ("eval_log.csv", EVAL_COLUMNS)):
            _write_rows(out / name, cols, [])
        sel_log = out / "selection.csv"
        if sel_log.exists():
            sel_log.unlink()

    arch = Arch(n_classes=dataset.n_classes, widths=config.widths, dropout_rate=config.dropout_rate)
    student = init_params(arch, config.master_seed)
    teacher = copy_model(student)
    teacher.requires_grad_(False)
    velocity: dict[str, torch.Tensor] = {}
    hq_stream = BatchStream(hq, config.hq_batch, (config.master_seed, 1))
    lq_stream = BatchStream(lq, config.lq_batch, (config.master_seed, 2))
    runlog = RunLog()

    def do_eval(step: int) -> None:
        metrics, _ = evaluate(student, eval_samples, dataset.n_classes)
        rec = {"step": step, "dice": metrics.dice, "jaccard": metrics.jaccard,
               "hd95": metrics.hd95, "asd": metrics.asd, **label_quality(teacher, dataset, config)}
        runlog.evals.append(rec)
        if progress:
            log.info("step %d dice %.4f refined %.4f", step, metrics.dice, rec["refined_label_dice"])
        if out is not None:
            _write_rows(out / "eval_log.csv", EVAL_COLUMNS, [rec], mode="a")
            save_checkpoint(student, out / f"ckpt_{step:06d}", step,
                            {"master_seed": config.master_seed, "next_step": step})

    for step in range(config.steps):
        hq_batch = hq_stream.next()
        lq_batch = lq_stream.next()
        student, teacher, row, sel = train_step(student, teacher, velocity, hq_batch, lq_batch,
                                                config, step)
        runlog.steps.append(row)
        if out is not None:
            _write_rows(out / "runlog.csv", RUNLOG_COLUMNS, [row], mode="a")
            if sel is not None:
                append_selection_log(out / "selection.csv", lq_stream.epoch, sel)
        done = step + 1
        if config.eval_every and done % config.eval_every == 0 and done < config.steps:
            do_eval(done)
    do_eval(config.steps)

    if out is not None:
        save_checkpoint(student, out / "final", config.steps,
                        {"master_seed": config.master_seed, "next_step": config.steps})
        evaluate(student, eval_samples, dataset.n_classes, out / "eval_final.csv")
    return student, runlog

