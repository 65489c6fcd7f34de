"""Command line entry point: gen, train, eval, refine-inspect, report."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("alc")

DEFAULT_SEED = 0
SWEEPABLE = {"k": "k_ratio", "alpha": "alpha", "beta": "beta", "gamma": "gamma",
             "lr": "lr", "m": "m", "sigma": "sigma", "dropout": "dropout_rate"}
MODE_ORDER = ["mt", "alc-no-ls", "alc-no-lr", "alc-no-ls-no-lr", "alc"]


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


# -- shared plumbing ---------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def resolve_seed(flag: int | None) -> int:
    """flag > ALC_SEED > default."""
    if flag is not None:
        return flag
    env = os.environ.get("ALC_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise CliError(f"ALC_SEED must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def prepare_out(out: Path, no_clobber: bool) -> None:
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if no_clobber:
            raise CliError(f"{out} is not empty and --no-clobber is set")
        log.warning("overwriting contents of %s", out)
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, config: dict, fingerprint: str | None) -> dict:
    manifest = {
        "command": [Path(sys.argv[0]).name, *sys.argv[1:]],
        "config": config,
        "dataset_fingerprint": fingerprint,
        "version": __version__,
        "started_at": _now(),
        "finished_at": None,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def finish_manifest(out: Path, manifest: dict) -> None:
    manifest["finished_at"] = _now()
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_data(path: str):
    from .synthgen import load_dataset

    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise CliError(f"no dataset found at {p} (missing manifest.json)")
    return load_dataset(p)


def _load_ckpt(path: str):
    from .nn import load_checkpoint

    p = Path(path)
    if (p / "final" / "manifest.json").is_file():
        p = p / "final"  # a run directory was given
    if not (p / "manifest.json").is_file() or not (p / "params.f32").is_file():
        raise CliError(f"no checkpoint found at {path}")
    return load_checkpoint(p)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "NA" if not math.isfinite(v) else repr(float(v))
    return str(v)


# -- gen ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .synthgen import generate, save_dataset

    if args.n < 1 or args.size < 1 or args.classes < 2:
        args.parser.error("--n and --size must be positive and --classes >= 2")
    if not 0.0 <= args.hq_ratio <= 1.0:
        args.parser.error("--hq-ratio must lie in [0, 1]")
    if not 0 <= args.noise_min <= args.noise_max:
        args.parser.error("need 0 <= --noise-min <= --noise-max")
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    prepare_out(out, args.no_clobber)
    for stale in itertools.chain(out.glob("*.img"), out.glob("*.lab"), out.glob("*.clean")):
        stale.unlink()
    config = {"seed": seed, "n": args.n, "size": args.size, "classes": args.classes,
              "hq_ratio": args.hq_ratio, "noise": [args.noise_min, args.noise_max]}
    manifest = write_manifest(out, config, None)
    ds = generate(seed, args.n, args.size, args.classes, args.hq_ratio, (args.noise_min, args.noise_max))
    save_dataset(ds, out)
    manifest["dataset_fingerprint"] = ds.fingerprint()
    finish_manifest(out, manifest)
    n_hq = len(ds.by_quality("HQ"))
    print(f"wrote {len(ds)} samples ({n_hq} HQ, {len(ds) - n_hq} LQ) to {out}")
    return 0


# -- train -------------------------------------------------------------------

def parse_sweep(spec: str) -> tuple[str, list[float]]:
    """``name=start:stop:step`` (inclusive) or ``name=v1,v2,...``."""
    if "=" not in spec:
        raise ValueError(f"sweep {spec!r} must look like name=start:stop:step")
    name, rng = spec.split("=", 1)
    if name not in SWEEPABLE:
        raise ValueError(f"cannot sweep {name!r}; choose from {sorted(SWEEPABLE)}")
    if ":" in rng:
        parts = [float(x) for x in rng.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise ValueError(f"bad range in sweep {spec!r}")
        start, stop, step = parts
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        values = [round(start + i * step, 10) for i in range(n)]
    else:
        values = [float(x) for x in rng.split(",") if x]
    if not values:
        raise ValueError(f"empty sweep {spec!r}")
    if name == "m":
        values = [int(v) for v in values]
    return name, values


def _train_config(args):
    from .trainer import TrainConfig

    kw = dict(steps=args.steps, k_ratio=args.k, alpha=args.alpha, beta=args.beta, gamma=args.gamma,
              lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
              hq_batch=args.hq_batch, lq_batch=args.lq_batch, m=args.m, sigma=args.sigma,
              dropout_rate=args.dropout, t_ramp=args.t_ramp, residual_targets=args.residual_targets,
              kl_form=args.kl_form, student_perturb=args.student_perturb, eval_every=args.eval_every, eval_n=args.eval_n,
              master_seed=resolve_seed(args.seed))
    return TrainConfig.for_mode(args.mode, **kw)


def _one_run(dataset, config, out: Path, no_clobber: bool) -> float:
    from .trainer import run_training

    prepare_out(out, no_clobber)
    for stale in out.glob("ckpt_*"):
        shutil.rmtree(stale)
    manifest = write_manifest(out, config.to_dict(), dataset.fingerprint())
    t0 = time.time()
    _, runlog = run_training(dataset, config, out, progress=True)
    finish_manifest(out, manifest)
    final = runlog.evals[-1]
    print(f"{out}: mode={config.mode} dice={final['dice']:.4f} "
          f"refined_label_dice={final['refined_label_dice']:.4f} ({time.time() - t0:.0f}s)")
    return final["dice"]


def cmd_train(args) -> int:
    from dataclasses import replace

    from .trainer import TrainingDiverged

    if args.steps < 1:
        args.parser.error("--steps must be positive")
    if not 0.0 <= args.k <= 1.0:
        args.parser.error("--k must lie in [0, 1]")
    try:
        sweeps = [parse_sweep(s) for s in args.sweep or []]
        config = _train_config(args)
        grid = list(itertools.product(*[[(n, v) for v in vals] for n, vals in sweeps]))
        for combo in grid:
            replace(config, **{SWEEPABLE[n]: v for n, v in combo})
    except ValueError as exc:
        args.parser.error(str(exc))
    dataset = _load_data(args.data)
    out = Path(args.out)
    try:
        if not sweeps:
            _one_run(dataset, config, out, args.no_clobber)
            return 0
        # serial on purpose: each run stays bit-reproducible on its own
        prepare_out(out, args.no_clobber)
        manifest = write_manifest(out, {**config.to_dict(), "sweep": args.sweep}, dataset.fingerprint())
        for combo in grid:
            name = "_".join(f"{n}={v:g}" for n, v in combo)
            cfg = replace(config, **{SWEEPABLE[n]: v for n, v in combo})
            _one_run(dataset, cfg, out / name, args.no_clobber)
        finish_manifest(out, manifest)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}") from exc
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .synthgen import LabeledSample
    from .trainer import TrainConfig, eval_split, evaluate

    dataset = _load_data(args.data)
    net, ck = _load_ckpt(args.checkpoint)
    if net.arch.n_classes != dataset.n_classes:
        raise CliError(f"checkpoint predicts {net.arch.n_classes} classes, dataset has {dataset.n_classes}")
    out = Path(args.out)
    prepare_out(out, args.no_clobber)
    manifest = write_manifest(out, {"checkpoint": str(args.checkpoint), "split": args.split,
                                    "eval_n": args.eval_n, "step": ck.get("step")},
                              dataset.fingerprint())
    if args.split == "heldout":
        samples = eval_split(dataset, TrainConfig(eval_n=args.eval_n))
    else:
        pool = dataset.samples if args.split == "all" else dataset.by_quality(args.split.upper())
        clean = dataset.clean_labels or {}
        samples = [LabeledSample(s.id, s.image, clean.get(s.id, s.label), s.quality) for s in pool]
    if not samples:
        raise CliError(f"split {args.split!r} is empty")
    mean, _ = evaluate(net, samples, dataset.n_classes, out / "metrics.csv")
    finish_manifest(out, manifest)
    print(f"{len(samples)} samples: dice={mean.dice:.4f} jaccard={mean.jaccard:.4f} "
          f"hd95={mean.hd95:.4f} asd={mean.asd:.4f}")
    return 0


# -- refine-inspect ----------------------------------------------------------

def cmd_refine_inspect(args) -> int:
    import torch

    from .metrics import label_dice
    from .plots import write_pgm
    from .refinement import perturbed_stack, refine_label, uncertainty_maps
    from .selection import sample_uncertainty
    from .synthgen import LQ

    if args.m < 2:
        args.parser.error("--m must be >= 2")
    dataset = _load_data(args.data)
    if not dataset.clean_labels:
        raise CliError("dataset has no clean labels; refinement quality cannot be measured")
    net, _ = _load_ckpt(args.checkpoint)
    if args.ids:
        wanted = [s for s in args.ids.split(",") if s]
        known = {s.id: s for s in dataset.samples}
        samples = []
        for sid in wanted:
            if sid not in known:
                raise CliError(f"unknown sample id {sid!r}")
            if known[sid].quality != LQ:
                log.warning("skipping %s: not an LQ sample", sid)
                continue
            samples.append(known[sid])
    else:
        samples = dataset.by_quality(LQ)
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    prepare_out(out, args.no_clobber)
    manifest = write_manifest(out, {"checkpoint": str(args.checkpoint), "m": args.m, "sigma": args.sigma,
                                    "dropout": args.dropout, "seed": seed,
                                    "ids": [s.id for s in samples]}, dataset.fingerprint())
    previews = out / "previews"
    previews.mkdir(exist_ok=True)
    c = dataset.n_classes
    rows = []
    with torch.no_grad():
        for i, s in enumerate(samples):
            stack = perturbed_stack(net, s.image, args.m, args.sigma, args.dropout,
                                    seed=[seed, i], sample_id=s.id)
            refined = refine_label(stack).numpy()
            single = stack.probs[0].argmax(0).numpy()
            clean = dataset.clean_labels[s.id]
            kl = uncertainty_maps(stack).kl.mean(0).numpy()
            rows.append([s.id, label_dice(s.label, clean, c), label_dice(single, clean, c),
                         label_dice(refined, clean, c), float(sample_uncertainty(stack.probs))])
            write_pgm(previews / f"{s.id}_image.pgm", s.image, 0.0, 1.0)
            for tag, lab in (("clean", clean), ("noisy", s.label), ("pseudo", single), ("refined", refined)):
                write_pgm(previews / f"{s.id}_{tag}.pgm", lab, 0, c - 1)
            write_pgm(previews / f"{s.id}_kl.pgm", kl)
    header = ["id", "noisy_dice", "pseudo_dice", "refined_dice", "uncertainty"]
    if rows:
        rows.append(["__mean__", *[_nanmean([r[j] for r in rows]) for j in range(1, 5)]])
    _write_csv(out / "inspect.csv", header, rows)
    finish_manifest(out, manifest)
    if rows:
        m = rows[-1]
        print(f"{len(rows) - 1} LQ samples: noisy={m[1]:.4f} pseudo={m[2]:.4f} refined={m[3]:.4f}")
    return 0


# -- report ------------------------------------------------------------------

def _run_dirs(paths: list[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "config.json").is_file():
            found.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / "config.json").is_file())
            if not subs:
                raise CliError(f"{p} holds no run directories")
            found.extend(subs)
        else:
            raise CliError(f"{p} is not a run directory")
    return found


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _nanmean(values) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def _flt(v: str) -> float:
    return math.nan if v in ("NA", "", None) else float(v)


def load_run(run: Path) -> dict:
    from .metrics import read_mean_row

    try:
        config = json.loads((run / "config.json").read_text(encoding="utf-8"))
        manifest = json.loads((run / "run_manifest.json").read_text(encoding="utf-8"))
        mean = read_mean_row(run / "eval_final.csv")
        steps = _read_csv(run / "runlog.csv")
        evals = _read_csv(run / "eval_log.csv")
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read run {run}: {exc}") from exc
    return {"name": run.name, "path": run, "config": config,
            "fingerprint": manifest.get("dataset_fingerprint"), "mean": mean,
            "steps": steps, "evals": evals}


def cmd_report(args) -> int:
    from .plots import heatmap, line_chart

    if not args.runs:
        args.parser.error("need at least one run directory")
    runs = [load_run(r) for r in _run_dirs(args.runs)]
    prints = {r["fingerprint"] for r in runs}
    if len(prints) > 1:
        raise CliError("runs were trained on different datasets: "
                       + ", ".join(f"{r['name']}={str(r['fingerprint'])[:12]}" for r in runs))
    out = Path(args.out)
    prepare_out(out, args.no_clobber)
    manifest = write_manifest(out, {"runs": [str(r["path"]) for r in runs]}, prints.pop())
    metrics = ["dice", "jaccard", "hd95", "asd"]

    def cfg(r, key):
        return r["config"].get(key)

    _write_csv(out / "runs.csv", ["run", "mode", "k", "alpha", "beta", "gamma", "seed", *metrics],
               [[r["name"], cfg(r, "mode"), cfg(r, "k_ratio"), cfg(r, "alpha"), cfg(r, "beta"),
                 cfg(r, "gamma"), cfg(r, "master_seed"), *[r["mean"][m] for m in metrics]] for r in runs])

    by_mode: dict[str, list[dict]] = {}
    for r in runs:
        by_mode.setdefault(cfg(r, "mode"), []).append(r)
    order = [m for m in MODE_ORDER if m in by_mode] + sorted(set(by_mode) - set(MODE_ORDER))
    _write_csv(out / "ablation.csv", ["mode", "n_runs", *metrics],
               [[m, len(by_mode[m]), *[_nanmean([r["mean"][k] for r in by_mode[m]])
                                        for k in metrics]] for m in order])

    line_chart(out / "loss_curves.svg",
               {r["name"]: ([float(s["step"]) for s in r["steps"]], [_flt(s["L_total"]) for s in r["steps"]])
                for r in runs}, "Total training loss", "iteration", "L_total")
    series = {}
    for r in runs:
        xs = [float(e["step"]) for e in r["evals"]]
        for key, tag in (("refined_label_dice", "refined"), ("pseudo_label_dice", "pseudo"),
                         ("noisy_label_dice", "noisy")):
            series[f"{r['name']} {tag}"] = (xs, [_flt(e[key]) for e in r["evals"]])
    line_chart(out / "label_quality.svg", series, "LQ label quality vs clean labels", "iteration", "Dice")

    # only runs that differ from each other in k alone form the k curve
    ks = sorted({cfg(r, "k_ratio") for r in by_mode.get("alc", [])})
    if len(ks) > 1:
        pts = {}
        for r in by_mode["alc"]:
            pts.setdefault(cfg(r, "k_ratio"), []).append(r["mean"]["dice"])
        kd = [(k, _nanmean(pts[k])) for k in ks]
        _write_csv(out / "k_sweep.csv", ["k", "dice"], [list(p) for p in kd])
        line_chart(out / "dice_vs_k.svg", {"alc": ([k for k, _ in kd], [d for _, d in kd])},
                   "Held-out Dice vs selection ratio k", "k", "Dice")
    ab = {}
    for r in by_mode.get("alc", []):
        ab.setdefault((cfg(r, "alpha"), cfg(r, "beta")), []).append(r["mean"]["dice"])
    if len(ab) > 1:
        values = {key: _nanmean(v) for key, v in ab.items()}
        alphas = sorted({a for a, _ in values})
        betas = sorted({b for _, b in values})
        _write_csv(out / "alpha_beta.csv", ["alpha", "beta", "dice"],
                   [[a, b, d] for (a, b), d in sorted(values.items())])
        heatmap(out / "dice_alpha_beta.svg", alphas, betas, values,
                "Held-out Dice over (alpha, beta)", "alpha", "beta")
    finish_manifest(out, manifest)
    print(f"report for {len(runs)} runs written to {out}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alc", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--no-clobber", action="store_true", help="refuse to write into a non-empty --out")
        sp.set_defaults(parser=sp)

    g = sub.add_parser("gen", help="generate a synthetic HQ/LQ dataset")
    g.add_argument("--seed", type=int, default=None, help="default: $ALC_SEED, else 0")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--hq-ratio", type=float, required=True)
    g.add_argument("--noise-min", type=int, required=True)
    g.add_argument("--noise-max", type=int, required=True)
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one run, or a serial sweep")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["alc", "alc-no-ls", "alc-no-lr", "mt"], default="alc")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--k", type=float, default=0.5, help="fraction of the LQ batch routed to the trusted loss")
    t.add_argument("--alpha", type=float, default=3.0)
    t.add_argument("--beta", type=float, default=2.0)
    t.add_argument("--gamma", type=float, default=0.99, help="EMA decay")
    t.add_argument("--seed", type=int, default=None, help="default: $ALC_SEED, else 0")
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--hq-batch", type=int, default=4)
    t.add_argument("--lq-batch", type=int, default=8)
    t.add_argument("--m", type=int, default=8, help="perturbed teacher passes")
    t.add_argument("--sigma", type=float, default=0.05, help="input noise std")
    t.add_argument("--dropout", type=float, default=0.3)
    t.add_argument("--t-ramp", type=int, default=None, help="ramp length, default 40%% of --steps")
    t.add_argument("--residual-targets", choices=["refined", "original"], default="refined")
    t.add_argument("--kl-form", choices=["summed", "printed"], default="summed")
    t.add_argument("--student-perturb", action=argparse.BooleanOptionalAction, default=True,
                   help="run the student under its own noise and dropout")
    t.add_argument("--eval-every", type=int, default=250)
    t.add_argument("--eval-n", type=int, default=50)
    t.add_argument("--sweep", action="append", metavar="NAME=START:STOP:STEP",
                   help="repeatable; the runs cover the cartesian product")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["heldout", "all", "hq", "lq"], default="heldout")
    e.add_argument("--eval-n", type=int, default=50)
    common(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine-inspect", help="label quality of refined LQ labels")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--ids", default=None, help="comma separated sample ids (default: every LQ sample)")
    r.add_argument("--m", type=int, default=8)
    r.add_argument("--sigma", type=float, default=0.05)
    r.add_argument("--dropout", type=float, default=0.3)
    r.add_argument("--seed", type=int, default=None)
    common(r)
    r.set_defaults(func=cmd_refine_inspect)

    rp = sub.add_parser("report", help="merge run directories into tables and SVG plots")
    rp.add_argument("runs", nargs="*", help="run directories or sweep parents")
    common(rp)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"alc: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"alc: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
