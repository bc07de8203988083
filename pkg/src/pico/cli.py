"""Command-line interface.

Subcommands: gen, train, eval, active, bench, gradcheck. Every command takes
--seed/--config/--out; option precedence is built-in default < config file <
explicit flag. The config file is plain ``key=value`` lines with ``#``
comments, keys matching the long flag names with dashes as underscores.
Commands that produce reports render matplotlib figures next to their CSVs.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import figures
from .errors import ParameterError, UndefinedMetricError
from .gradcheck import gradient_suite
from .metrics import anomaly_map, evaluate
from .model import ModelConfig, PipelineModel, TrainConfig, apply_variant
from .policy import PolicyConfig, run_active_loop
from .rng import substream
from .simulator import (
    Dataset,
    DatasetConfig,
    Pose,
    make_dataset,
    render,
    save_dataset,
    write_pgm,
)
from .tensor import Tensor, no_grad
from .train import train_model


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PICO_THREADS", "1")))
    except ValueError:
        return 1


def _load_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"config line without '=': {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


class _Command:
    """One subcommand with default < config-file < flag option resolution."""

    def __init__(self, sub, name: str, help_text: str):
        self.name = name
        self.defaults: dict[str, object] = {"seed": 0, "out": "out", "config": None}
        self.types: dict[str, type] = {}
        self.parser = sub.add_parser(name, help=help_text, description=help_text)
        self.parser.add_argument("--seed", type=int, default=None, help="root random seed (default: 0)")
        self.parser.add_argument("--config", type=str, default=None, help="key=value config file (default: none)")
        self.parser.add_argument("--out", type=str, default=None, help="output directory (default: out)")

    def opt(self, name: str, default, type_=None, help_="", choices=None):
        key = name.replace("-", "_")
        self.defaults[key] = default
        if type_ is None and default is not None and not isinstance(default, bool):
            type_ = type(default)
        if isinstance(default, bool):
            self.parser.add_argument(f"--{name}", action="store_true", default=None, help=f"{help_} (default: {default})")
        else:
            self.parser.add_argument(
                f"--{name}", type=type_, default=None, choices=choices, help=f"{help_} (default: {default})"
            )
            self.types[key] = type_
        return self

    def resolve(self, args: argparse.Namespace) -> argparse.Namespace:
        values = dict(self.defaults)
        if args.config:
            file_cfg = _load_config_file(args.config)
            for k, v in file_cfg.items():
                key = k.replace("-", "_")
                if key not in values:
                    raise ParameterError(f"unknown config key {k!r} for command {self.name!r}")
                base = self.defaults[key]
                if isinstance(base, bool):
                    values[key] = v.lower() in ("1", "true", "yes")
                elif key in self.types and self.types[key] is not None:
                    values[key] = self.types[key](v)
                elif isinstance(base, int):
                    values[key] = int(v)
                elif isinstance(base, float):
                    values[key] = float(v)
                else:
                    values[key] = v
        for key, val in vars(args).items():
            if key in ("command", "config") or val is None:
                continue
            values[key] = val
        values["config"] = args.config
        return argparse.Namespace(**values)


def _ensure_out(ns) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- gen -----------------------------------------------------------------------


def cmd_gen(ns) -> int:
    out = _ensure_out(ns)
    cfg = DatasetConfig(train_normal=ns.train, test_normal=ns.test_normal, test_defect=ns.test_defect, hard_cases=ns.hard)
    items = make_dataset(cfg, ns.seed)
    save_dataset(items, out)
    previews = out / "previews"
    previews.mkdir(exist_ok=True)
    for it in items:
        write_pgm(previews / f"{it.id}.pgm", it.observation.image)
    counts = {}
    for it in items:
        counts[it.split] = counts.get(it.split, 0) + 1
    for split in ("train", "test_normal", "test_defect", "hard"):
        print(f"{split}: {counts.get(split, 0)}")
    print(f"wrote {out / 'manifest.csv'}, {out / 'observations.pico'}, {len(items)} previews")
    return 0


# -- train -----------------------------------------------------------------------


def cmd_train(ns) -> int:
    out = _ensure_out(ns)
    dataset = Dataset.load(ns.data)
    model_cfg = ModelConfig(image_size=ns.image_size, channels=ns.channels, depth=ns.depth)
    train_cfg = TrainConfig(
        epochs=ns.epochs,
        batch=ns.batch,
        lr_start=ns.lr_start,
        lr_end=ns.lr_end,
        weight_decay=ns.weight_decay,
        alpha_dir=ns.alpha_dir,
    )
    if ns.ablation:
        model_cfg, train_cfg = apply_variant(model_cfg, train_cfg, ns.ablation)
    t0 = time.time()
    res = train_model(dataset, model_cfg, train_cfg, ns.seed, out, quiet=False)
    fig = figures.training_curves(res.log_rows, out / "loss_curves.png")
    print(f"trained {train_cfg.epochs} epochs in {time.time() - t0:.1f}s")
    print(f"best val recon {res.best_val:.6f}; tau {res.tau:.5f}; score_tau {res.score_tau:.6f}")
    print(f"wrote {res.best_path}, {res.final_path}, {res.log_path}, {fig}")
    return 0


# -- eval -----------------------------------------------------------------------


def _split_rows(dataset: Dataset, name: str) -> list[dict]:
    if name == "test":
        return dataset.split("test_normal", "test_defect")
    if name == "train":
        return dataset.split("train")
    if name == "hard":
        return dataset.split("hard")
    raise ParameterError(f"unknown split {name!r}")


def cmd_eval(ns) -> int:
    out = _ensure_out(ns)
    dataset = Dataset.load(ns.data)
    ckpt = ns.checkpoint or str(Path(ns.out) / "checkpoint_best.pico")
    model, _ = PipelineModel.load(ckpt)
    rows = _split_rows(dataset, ns.split)
    report, maps = evaluate(model, dataset, rows)

    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "o_auroc", "p_auroc", "aupro", "n_normal", "n_defect"])
        writer.writerow([ns.split, f"{report.o_auroc:.6f}", f"{report.p_auroc:.6f}", f"{report.aupro:.6f}", report.n_normal, report.n_defect])
    with open(out / "cases.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "score", "pose"])
        for c in report.cases:
            writer.writerow([c.id, c.label, f"{c.score:.8g}", c.pose])
    figures.score_separation([c.score for c in report.cases], [c.label for c in report.cases], report, out / "eval_scores.png")
    if ns.dump_maps:
        maps_dir = out / "maps"
        maps_dir.mkdir(exist_ok=True)
        for c, am in zip(report.cases, maps):
            write_pgm(maps_dir / f"{c.id}.pgm", am.scores, lo=0.0, hi=max(am.image_score, 1e-9))
    print(f"split={ns.split} O-AUROC={report.o_auroc:.4f} P-AUROC={report.p_auroc:.4f} AUPRO={report.aupro:.4f}")
    print(f"wrote {out / 'report.csv'}, {out / 'cases.csv'}, {out / 'eval_scores.png'}")
    return 0


# -- active -----------------------------------------------------------------------


def cmd_active(ns) -> int:
    out = _ensure_out(ns)
    dataset = Dataset.load(ns.data)
    ckpt = ns.checkpoint or str(Path(ns.out) / "checkpoint_best.pico")
    model, trailer = PipelineModel.load(ckpt)
    tau = ns.tau if ns.tau is not None else float(trailer["tau"])
    score_tau = ns.score_tau if ns.score_tau is not None else float(trailer["score_tau"])
    rows = dataset.split("hard")
    if not rows:
        print("no hard split in dataset", file=sys.stderr)
        return 2

    policy_rng = substream(ns.seed, "policy")

    def run_case(row):
        scene, pose0, cond = dataset.scene_and_condition(row)

        def scene_access(k: int):
            return render(scene, Pose(k), cond)

        cfg = PolicyConfig(tau=tau, score_tau=score_tau, budget=ns.budget, strategy=ns.strategy, seed=ns.seed)
        case_rng = np.random.default_rng(policy_rng.integers(0, 2**31 - 1)) if ns.strategy == "random" else None
        traj = run_active_loop(scene_access, model, cfg, initial_pose=pose0.index, rng=case_rng)
        return row["id"], traj

    workers = _worker_count()
    if workers > 1 and ns.strategy != "random":
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_case, rows))
    else:
        results = [run_case(r) for r in rows]
    results.sort(key=lambda t: t[0])

    initial_flags, final_flags, initial_u, final_u = [], [], [], []
    with open(out / "trajectories.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "step", "pose", "U", "converged", "decision", "score"])
        for case_id, traj in results:
            for step, rec in enumerate(traj.records):
                is_decision = traj.decision is not None and rec is traj.decision
                writer.writerow(
                    [case_id, step, rec.pose, f"{rec.u:.8g}", int(traj.converged), int(is_decision), f"{rec.image_score:.8g}"]
                )
            if traj.error or not traj.records:
                continue
            initial = traj.records[0]
            initial_flags.append(initial.image_score > score_tau)
            final_flags.append(bool(traj.anomalous))
            initial_u.append(initial.u)
            final_u.append(traj.decision.u)
            if ns.dump_maps:
                maps_dir = out / "maps"
                maps_dir.mkdir(exist_ok=True)
                for step, rec in enumerate(traj.records):
                    write_pgm(maps_dir / f"{case_id}_step{step}.pgm", rec.map_scores, lo=0.0, hi=max(rec.image_score, 1e-9))

    n = len(final_flags)
    initial_acc = float(np.mean(initial_flags)) if n else float("nan")
    final_acc = float(np.mean(final_flags)) if n else float("nan")
    mean_u0 = float(np.mean(initial_u)) if n else float("nan")
    mean_u1 = float(np.mean(final_u)) if n else float("nan")
    with open(out / "active_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cases", "initial_accuracy", "final_accuracy", "mean_u_initial", "mean_u_final"])
        writer.writerow([n, f"{initial_acc:.6f}", f"{final_acc:.6f}", f"{mean_u0:.6g}", f"{mean_u1:.6g}"])
    figures.uncertainty_collapse(initial_u, final_u, out / "active_uncertainty.png")
    figures.accuracy_lift(initial_acc, final_acc, out / "active_accuracy.png")
    print(f"hard cases: {n}")
    print(f"initial-view accuracy: {100 * initial_acc:.1f}%  final accuracy: {100 * final_acc:.1f}%")
    print(f"mean U initial: {mean_u0:.4f}  mean U final: {mean_u1:.4f}")
    print(f"wrote {out / 'trajectories.csv'}, {out / 'active_summary.csv'}")
    return 0


# -- bench -----------------------------------------------------------------------


def _time_ms(fn, repeats: int, inner: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner * 1000.0)
    return statistics.median(samples)


def cmd_bench(ns) -> int:
    from .decoder import kernel_attention_quadratic, la3_attention

    out = _ensure_out(ns)
    sizes = [int(s) for s in ns.sizes.split(",")]
    d = ns.dim
    rng = substream(ns.seed, "init")
    rows = []
    with no_grad():
        for n_tokens in sizes:
            q = Tensor(rng.normal(size=(n_tokens, d)).astype(np.float32))
            k = Tensor(rng.normal(size=(n_tokens, d)).astype(np.float32))
            v = Tensor(rng.normal(size=(n_tokens, d)).astype(np.float32))
            inner = max(1, 4096 // n_tokens * 4)
            la3 = _time_ms(lambda: la3_attention(q, k, v), ns.repeats, inner)
            quad = _time_ms(lambda: kernel_attention_quadratic(q, k, v), ns.repeats, max(1, inner // 4))
            rows.append({"N": n_tokens, "la3_ms": la3, "quadratic_ms": quad})
            print(f"N={n_tokens:5d}  la3 {la3:9.3f} ms   quadratic {quad:9.3f} ms")
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "la3_ms", "quadratic_ms"])
        for r in rows:
            writer.writerow([r["N"], f"{r['la3_ms']:.6f}", f"{r['quadratic_ms']:.6f}"])
    figures.bench_scaling(rows, out / "bench_scaling.png")
    print(f"wrote {out / 'bench.csv'}, {out / 'bench_scaling.png'}")
    return 0


# -- gradcheck -----------------------------------------------------------------------


def cmd_gradcheck(ns) -> int:
    results = gradient_suite(n_seeds=ns.seeds)
    failed = False
    for name, err in results.items():
        budget = 1e-3 if name == "pipeline-loss" else 1e-4
        ok = err < budget
        failed |= not ok
        print(f"{name:>18}: max rel err {err:.3e}  (budget {budget:.0e})  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


# -- wiring -----------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    parser = argparse.ArgumentParser(prog="pico", description="Active-view anomaly detection bench.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds: dict[str, _Command] = {}

    c = _Command(sub, "gen", "Generate the synthetic inspection dataset.")
    c.opt("train", 200, help_="defect-free training renders")
    c.opt("test-normal", 50, help_="normal test renders")
    c.opt("test-defect", 50, help_="defective test renders")
    c.opt("hard", 50, help_="glare-hidden hard cases with pose-sweep certificates")
    cmds["gen"] = c

    c = _Command(sub, "train", "Train the detection pipeline on a generated dataset.")
    c.opt("data", "out", help_="dataset directory from `pico gen`")
    c.opt("epochs", 200, help_="training epochs")
    c.opt("batch", 16, help_="batch size")
    c.opt("lr-start", 1e-3, help_="initial learning rate")
    c.opt("lr-end", 1e-5, help_="final learning rate of the cosine schedule")
    c.opt("weight-decay", 1e-4, help_="decoupled weight decay")
    c.opt("alpha-dir", 0.1, help_="invariance regularizer weight (0, 0.1 or 0.2)")
    c.opt("ablation", None, type_=str, choices=["a", "b", "c", "d"], help_="studied variant wiring; overrides alpha-dir/attention flags")
    c.opt("image-size", 32, help_="render size; must match the dataset")
    c.opt("channels", 32, help_="token embedding width")
    c.opt("depth", 2, help_="decoder blocks")
    cmds["train"] = c

    c = _Command(sub, "eval", "Score a checkpoint on a dataset split.")
    c.opt("data", "out", help_="dataset directory")
    c.opt("checkpoint", None, type_=str, help_="checkpoint path (default: <out>/checkpoint_best.pico)")
    c.opt("split", "test", help_="test | train | hard")
    c.opt("dump-maps", False, help_="write one anomaly-map PGM per case")
    cmds["eval"] = c

    c = _Command(sub, "active", "Run the uncertainty-driven re-orientation loop on hard cases.")
    c.opt("data", "out", help_="dataset directory")
    c.opt("checkpoint", None, type_=str, help_="checkpoint path (default: <out>/checkpoint_best.pico)")
    c.opt("budget", 3, help_="max re-orientation actions")
    c.opt("strategy", "dispersion", help_="dispersion | greedy-neighbor | random")
    c.opt("tau", None, type_=float, help_="uncertainty threshold (default: calibrated value from checkpoint)")
    c.opt("score-tau", None, type_=float, help_="decision threshold (default: calibrated value from checkpoint)")
    c.opt("dump-maps", False, help_="write per-step anomaly-map PGMs")
    cmds["active"] = c

    c = _Command(sub, "bench", "Time linear attention against the quadratic reference.")
    c.opt("sizes", "256,1024,4096", help_="comma-separated token counts")
    c.opt("dim", 16, help_="head dimension")
    c.opt("repeats", 5, help_="timing repetitions (median reported)")
    cmds["bench"] = c

    c = _Command(sub, "gradcheck", "Finite-difference audit of every layer type.")
    c.opt("seeds", 10, help_="random seeds per layer type")
    cmds["gradcheck"] = c

    return parser, cmds


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "active": cmd_active,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser, cmds = build_parser()
    args = parser.parse_args(argv)
    ns = cmds[args.command].resolve(args)
    try:
        return HANDLERS[args.command](ns)
    except (ParameterError, UndefinedMetricError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
