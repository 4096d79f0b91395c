"""Command-line front door: single runs, missing-rate sweeps, reports.

Output layout::

    out/<strategy>/<rate>/<seed>/rounds.csv
    out/<strategy>/<rate>/<seed>/class_report.csv   (+ .json)
    out/<strategy>/<rate>/<seed>/cell.json
    out/summary.csv
    out/summary.json
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, flcore, metrics, nnkit
from .config import STRATEGIES, ConfigError, RunConfig, config_from_dict, dump_config, tomllib, validate
from .datagen import DatasetSpec, MultimodalDataset, export_csv, generate_dataset, save_dataset

DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class ReportError(ValueError):
    """Two runs cannot be compared."""


@dataclass(frozen=True)
class ExperimentPlan:
    base: RunConfig
    strategies: tuple[str, ...] = ("modality_mirror",)
    missing_rates: tuple[float, ...] = (0.3,)
    seeds: tuple[int, ...] = (0,)
    out: Path = Path("out")
    workers: int = 1
    figures: bool = False

    def cells(self) -> list[RunConfig]:
        return [
            self.base.replace(strategy=s, missing_rate=r, seed=sd)
            for s in self.strategies
            for r in self.missing_rates
            for sd in self.seeds
        ]

    def validate(self) -> None:
        errors = []
        if not self.strategies:
            errors.append(("plan.strategies", "empty"))
        for s in self.strategies:
            if s not in STRATEGIES:
                errors.append(("plan.strategies", f"unknown strategy {s!r}"))
        for r in self.missing_rates:
            if not 0.0 <= r <= 1.0:
                errors.append(("plan.missing_rates", f"{r} outside [0, 1]"))
        for sd in self.seeds:
            if sd < 0:
                errors.append(("plan.seeds", f"{sd} is negative"))
        if len(set(self.strategies)) != len(self.strategies) or len(set(self.missing_rates)) != len(
            self.missing_rates
        ) or len(set(self.seeds)) != len(self.seeds):
            errors.append(("plan", "duplicate entries would run a cell twice"))
        if errors:
            raise ConfigError(errors)
        for cell in self.cells():
            validate(cell)


def rate_dir(r: float) -> str:
    return f"{r:g}"


def cell_dir(out: Path, cfg: RunConfig) -> Path:
    return Path(out) / cfg.strategy / rate_dir(cfg.missing_rate) / str(cfg.seed)


@lru_cache(maxsize=8)
def _dataset(spec: DatasetSpec) -> MultimodalDataset:
    return generate_dataset(spec)


@lru_cache(maxsize=8)
def _fingerprint(spec: DatasetSpec) -> str:
    return _dataset(spec).fingerprint()


def check_writable(out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    probe.write_text("")
    probe.unlink()


def run_cell(cfg: RunConfig, out: Path, figures: bool = False) -> dict:
    """Run one (strategy, rate, seed) cell and write its files."""
    data = _dataset(cfg.dataset)
    result = baselines.run_strategy(cfg, data)
    d = cell_dir(out, cfg)
    d.mkdir(parents=True, exist_ok=True)
    topo = cfg.topology
    (d / "rounds.csv").write_text(metrics.rounds_csv(result.history))
    pred = metrics.predict(flcore.audio_logits(result.audio_model, topo, data.test))
    report = metrics.class_f1(pred, data.test.labels, topo.num_classes)
    (d / "class_report.csv").write_text(metrics.class_report_csv(report))
    (d / "class_report.json").write_text(metrics.class_report_json(report))
    flcore.save_checkpoint(result.audio_model, topo, d / "audio_model")
    final = result.history[-1] if result.history else flcore.evaluate_round(-1, 0, result.audio_model, cfg, data.test)
    cell = {
        "strategy": cfg.strategy,
        "missing_rate": cfg.missing_rate,
        "seed": cfg.seed,
        "dataset_fingerprint": _fingerprint(cfg.dataset),
        "final_audio_top1": final.audio_top1,
        "final_audio_topk": final.audio_topk,
        "config": cfg.to_dict(),
    }
    (d / "cell.json").write_text(json.dumps(cell, indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_history

        plot_history(result.history, d / "rounds.png")
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def summarize(cells: Sequence[dict]) -> list[dict]:
    """Mean and population variance of the final audio metrics per (strategy, rate)."""
    groups: dict[tuple[str, float], list[dict]] = {}
    for c in cells:
        groups.setdefault((c["strategy"], c["missing_rate"]), []).append(c)
    rows = []
    for (s, r), cs in groups.items():
        cs = sorted(cs, key=lambda c: c["seed"])
        top1 = np.array([c["final_audio_top1"] for c in cs])
        topk = np.array([c["final_audio_topk"] for c in cs])
        rows.append(
            {
                "strategy": s,
                "missing_rate": r,
                "n_seeds": len(cs),
                "seeds": [c["seed"] for c in cs],
                "mean_audio_top1": float(top1.mean()),
                "var_audio_top1": float(top1.var()),
                "mean_audio_topk": float(topk.mean()),
                "var_audio_topk": float(topk.var()),
            }
        )
    order = {s: i for i, s in enumerate(STRATEGIES)}
    rows.sort(key=lambda row: (order.get(row["strategy"], 99), row["missing_rate"]))
    return rows


SUMMARY_COLUMNS = ("strategy", "missing_rate", "n_seeds", "mean_audio_top1", "var_audio_top1",
                   "mean_audio_topk", "var_audio_topk")


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def run_plan(plan: ExperimentPlan) -> list[dict]:
    plan.validate()
    check_writable(plan.out)
    jobs = [(cfg, plan.out, plan.figures) for cfg in plan.cells()]
    if plan.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [run_cell(*j) for j in jobs]
    rows = summarize(cells)
    out = Path(plan.out)
    (out / "summary.csv").write_text(summary_csv(rows))
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    if plan.figures:
        from .plotting import plot_missing_rate_sweep

        plot_missing_rate_sweep(rows, out / "summary.png")
    return rows


def emit_f1_diff_report(run_a: Path, run_b: Path, top_n: int, class_names=None) -> list[dict]:
    """Per-label F1 differences between two evaluated cells (a minus b)."""
    run_a, run_b = Path(run_a), Path(run_b)
    meta_a = json.loads((run_a / "cell.json").read_text())
    meta_b = json.loads((run_b / "cell.json").read_text())
    if meta_a["dataset_fingerprint"] != meta_b["dataset_fingerprint"]:
        raise ReportError("the two runs were evaluated on different datasets")
    rep_a = metrics.read_class_report_csv((run_a / "class_report.csv").read_text())
    rep_b = metrics.read_class_report_csv((run_b / "class_report.csv").read_text())
    if rep_a.num_classes != rep_b.num_classes:
        raise ReportError("the two runs cover different class counts")
    return metrics.diff_rows(rep_a, rep_b, top_n, class_names)


def gradcheck(n_models: int = 5, temperatures=(1.0, 2.0, 4.0), h: float = 1e-5) -> dict:
    """Finite-difference check of CE and distillation gradients on small random models."""
    topo = nnkit.Topology(audio_dim=8, visual_dim=8, num_classes=4, hidden_dim=16, embed_dim=8)
    worst = {"ce_audio": 0.0, "ce_multimodal": 0.0, "distill": 0.0}
    for seed in range(n_models):
        rng = np.random.default_rng(seed)
        params = flcore.init_params(topo, seed)
        # non-zero biases so every parameter gets exercised
        params = flcore.ParamSet(**{k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.blocks().items()})
        xa = rng.normal(size=(6, 8))
        xv = rng.normal(size=(6, 8))
        y = rng.integers(0, 4, size=6)
        audio_flat = np.concatenate([params.audio_encoder, params.audio_head])
        am = nnkit.AudioModel.from_flat(topo, audio_flat)
        g = nnkit.grad_ce(am, (xa, y))
        fd = nnkit.finite_difference(
            lambda p: nnkit.loss_and_grad_ce(nnkit.AudioModel.from_flat(topo, p), (xa, y))[0], audio_flat, h
        )
        worst["ce_audio"] = max(worst["ce_audio"], nnkit.max_relative_error(g, fd))
        mm_flat = np.concatenate([params.audio_encoder, params.visual_encoder, params.fusion_head])
        mm = nnkit.MultimodalModel.from_flat(topo, mm_flat)
        g = nnkit.grad_ce(mm, (xa, xv, y))
        fd = nnkit.finite_difference(
            lambda p: nnkit.loss_and_grad_ce(nnkit.MultimodalModel.from_flat(topo, p), (xa, xv, y))[0], mm_flat, h
        )
        worst["ce_multimodal"] = max(worst["ce_multimodal"], nnkit.max_relative_error(g, fd))
        teacher = nnkit.softmax(nnkit.forward_multimodal(mm, xa, xv)[0])
        for T in temperatures:
            g = nnkit.grad_distill(am, teacher, (xa, y), T)
            fd = nnkit.finite_difference(
                lambda p: nnkit.loss_and_grad_distill(nnkit.AudioModel.from_flat(topo, p), teacher, (xa, y), T)[0],
                audio_flat,
                h,
            )
            worst["distill"] = max(worst["distill"], nnkit.max_relative_error(g, fd))
    worst["max"] = max(worst.values())
    return worst


# ---------------------------------------------------------------------------
# argument handling


def _fail(kind: str, message: str, fields=None, code: int = 1) -> int:
    payload = {"error": kind, "message": message}
    if fields:
        payload["fields"] = [{"path": p, "message": m} for p, m in fields]
    print(json.dumps(payload), file=sys.stderr)
    return code


def _read_toml(path) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([("<file>", f"invalid TOML: {exc}")]) from exc


def load_run_config(path) -> RunConfig:
    """RunConfig from a TOML file (defaults when ``path`` is empty).

    A ``[plan]`` table, used by ``sweep``, is ignored here.
    """
    raw = _read_toml(path)
    raw.pop("plan", None)
    return config_from_dict(raw)


def _base_config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    overrides = {}
    for attr in ("seed", "strategy", "missing_rate", "rounds"):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[attr] = value
    return validate(cfg.replace(**overrides)) if overrides else cfg


def _split_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _split_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def cmd_run(args) -> int:
    cfg = _base_config(args)
    plan = ExperimentPlan(cfg, (cfg.strategy,), (cfg.missing_rate,), (cfg.seed,), Path(args.out), 1, args.figures)
    rows = run_plan(plan)
    print(summary_csv(rows), end="")
    return 0


def cmd_sweep(args) -> int:
    base = _base_config(args)
    table = _read_toml(args.config).get("plan", {})
    strategies = tuple(args.strategies.split(",")) if args.strategies else tuple(table.get("strategies", STRATEGIES[:3]))
    rates = _split_floats(args.missing_rates) if args.missing_rates else tuple(
        float(r) for r in table.get("missing_rates", DEFAULT_RATES)
    )
    seeds = _split_ints(args.seeds) if args.seeds else tuple(int(s) for s in table.get("seeds", (0, 1, 2)))
    plan = ExperimentPlan(base, strategies, rates, seeds, Path(args.out), args.workers, args.figures)
    rows = run_plan(plan)
    print(summary_csv(rows), end="")
    return 0


def cmd_report(args) -> int:
    rows = emit_f1_diff_report(Path(args.a), Path(args.b), args.top_n)
    text = metrics.diff_csv(rows)
    if args.out:
        out = Path(args.out)
        if out.suffix != ".csv":
            out = out.with_name(out.name + ".csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        out.with_suffix(".json").write_text(json.dumps(rows, indent=2) + "\n")
        if args.figures:
            from .plotting import plot_f1_diff

            plot_f1_diff(rows, out.with_suffix(".png"))
    print(text, end="")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    ds = generate_dataset(cfg.dataset)
    save_dataset(ds, args.out)
    if args.csv:
        export_csv(ds, args.csv)
    print(json.dumps({"path": str(args.out), "train": len(ds.train), "test": len(ds.test),
                      "fingerprint": ds.fingerprint()}))
    return 0


def cmd_gradcheck(args) -> int:
    worst = gradcheck(args.models)
    for k, v in worst.items():
        print(f"{k}: {v:.3e}")
    return 0 if worst["max"] < 1e-4 else 1


def cmd_config(args) -> int:
    cfg = load_run_config(args.config)
    print(dump_config(cfg), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modmirror", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rounds", type=int, help="override rounds per stage")

    sp = sub.add_parser("run", help="run a single (strategy, missing rate, seed) cell")
    common(sp)
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.add_argument("--missing-rate", type=float)
    sp.add_argument("--out", default="out")
    sp.add_argument("--figures", action="store_true", help="also render PNG figures")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run strategies x missing rates x seeds")
    sp.add_argument("--config")
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--strategies", help="comma-separated")
    sp.add_argument("--missing-rates", help="comma-separated")
    sp.add_argument("--seeds", help="comma-separated")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", default="out")
    sp.add_argument("--figures", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report-f1diff", help="per-label F1 differences between two cells")
    sp.add_argument("a", help="cell directory of run A")
    sp.add_argument("b", help="cell directory of run B")
    sp.add_argument("--top-n", type=int, default=10)
    sp.add_argument("--out")
    sp.add_argument("--figures", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gen-data", help="materialize the configured dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    sp.add_argument("--models", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("config", help="validate a config and echo it with defaults filled")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("validation", "invalid configuration", exc.errors, code=2)
    except (ReportError, baselines.StrategyError, nnkit.InvalidInput, flcore.InvalidState, flcore.ContractViolation) as exc:
        return _fail(type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail("io", str(exc), code=3)


if __name__ == "__main__":
    sys.exit(main())
