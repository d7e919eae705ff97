"""CLI entry point for multimodal dialogue response retrieval."""

import argparse
import csv
import json
import math
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

from rich.console import Console
from rich.markup import escape
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from mmdr.checkpoint import load_model, save_checkpoint, save_composition
from mmdr.config import (
    RunConfig,
    SyntheticGenConfig,
    config_digest,
    eval_workers,
    load_run_config,
    parse_override,
    save_resolved_config,
)
from mmdr.data import (
    SPLITS,
    build_pools,
    candidate_store,
    generate,
    load_jsonl,
    load_splits,
    modality_counts,
    save_jsonl,
    split_path,
)
from mmdr.errors import ConfigError, DataError, DegenerateInputError, MmdrError, NumericalError
from mmdr.evaluation import KS, TrailEntry, evaluate, spearman_correlation
from mmdr.models import DialogueExample, EvalReport, Protocol, Regime
from mmdr.optim import AdamState
from mmdr.regimes import ModelBundle, build_model, count_parameters, infer
from mmdr.runlog import RunLog
from mmdr.training import Trainer, plan_runs

console = Console()
err_console = Console(stderr=True)

DEFAULT_SWEEP_NOISE = (0.0, 0.1, 0.3, 0.5)
DEFAULT_SWEEP_SEEDS = (0, 1, 2)
REPORT_COLUMNS = [
    "run",
    "regime",
    "size",
    "split",
    "protocol",
    "r_at_1",
    "r_at_5",
    "r_at_10",
    "intent_accuracy",
    "param_total",
]
SWEEP_COLUMNS = ["seed", "regime", "noise", "r_at_1", "r_at_5", "r_at_10", "intent_accuracy"]


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _overrides(assignments: Sequence[str] | None) -> dict[str, Any]:
    return dict(parse_override(a) for a in assignments or [])


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _json_float(value: float) -> float | None:
    return None if math.isnan(value) else value


def report_table(reports: Sequence[EvalReport], labels: Sequence[str], title: str = "Retrieval") -> Table:
    """Text/Image/Multimodal x R@1/5/10 plus intent accuracy, one row per report."""
    table = Table(title=title)
    table.add_column("Model", style="cyan")
    for group in ("Text", "Image", "Multimodal"):
        for k in KS:
            table.add_column(f"{group} R@{k}", justify="right")
    table.add_column("Intent Acc", justify="right")
    for label, report in zip(labels, reports, strict=True):
        cells = []
        for protocol in (Protocol.TEXT, Protocol.IMAGE, Protocol.MULTIMODAL):
            for k in KS:
                value = report.recall(protocol, k)
                cells.append("-" if value is None else f"{value:.3f}")
        acc = "-" if report.intent_accuracy is None else f"{report.intent_accuracy:.3f}"
        table.add_row(label, *cells, acc)
    return table


# gen-data


def cmd_gen_data(args) -> None:
    """Generate train/dev/test JSONL splits and a generation manifest."""
    overrides = _overrides(args.set)
    if args.preset is not None:
        overrides["data.preset"] = args.preset
    if args.seed is not None:
        overrides["data.seed"] = args.seed
    if args.dialogues is not None:
        for split in SPLITS:
            overrides[f"data.{split}_dialogues"] = args.dialogues
    config = load_run_config(args.config, overrides)

    splits = generate(config.data)
    out = Path(args.out)
    counts = {split: save_jsonl(examples, split_path(out, split)) for split, examples in splits.items()}
    modalities = {split: modality_counts(examples) for split, examples in splits.items()}
    manifest = {
        "config_hash": config_digest(config.data),
        "data": config.data.model_dump(mode="json"),
        "counts": counts,
        "modalities": modalities,
        "image_ratio": {split: modalities[split]["image"] / counts[split] for split in SPLITS},
    }
    _write_json(out / "manifest.json", manifest)

    table = Table(title=f"Generated data in {out}")
    table.add_column("Split", style="cyan")
    table.add_column("Dialogues", justify="right")
    table.add_column("Text", justify="right")
    table.add_column("Image", justify="right")
    for split in SPLITS:
        table.add_row(split, str(counts[split]), str(modalities[split]["text"]), str(modalities[split]["image"]))
    console.print(table)


# train


def _train_config(args) -> RunConfig:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.size is not None:
        overrides["model.size"] = args.size
    config = load_run_config(args.config, overrides)

    manifest = Path(args.data) / "manifest.json"
    if manifest.exists():
        try:
            data = SyntheticGenConfig.model_validate(json.loads(manifest.read_text(encoding="utf-8"))["data"])
        except (KeyError, ValueError) as e:
            raise DataError(f"{manifest}: unreadable generation manifest: {e}") from e
        config = config.model_copy(update={"data": data})
    return config


def _checkpoint_name(regime: Regime, run: str, kind: str) -> str:
    if regime == Regime.DR:
        return f"dr_{run}.ckpt" if kind == "best" else f"dr_{run}.{kind}.ckpt"
    return f"{kind}.ckpt"


def _progress() -> Progress:
    return Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=err_console,
    )


def cmd_train(args) -> None:
    """Train a regime and write checkpoints, metrics and dev/test reports."""
    regime = Regime(args.regime)
    config = _train_config(args)
    splits = load_splits(Path(args.data))
    out = Path(args.out)
    save_resolved_config(config, out)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    log = RunLog(metrics)
    workers = eval_workers()

    bundle = build_model(regime, config.model, config.train.seed, config.data.vocab_size, config.data.image_dims)
    components = {plan.name: list(plan.components) for plan in plan_runs(bundle, config)}

    def on_checkpoint(run: str, entry: TrailEntry, kind: str, state: AdamState) -> None:
        path = out / _checkpoint_name(regime, run, kind)
        save_checkpoint(path, bundle, components[run], state, entry.step, entry.report, run)
        log.log_event("checkpoint", run=run, step=entry.step, kind=kind, path=path.name)

    progress = None if args.quiet else _progress()
    tasks: dict[str, Any] = {}

    def on_step(run: str, step: int, total: int) -> None:
        assert progress is not None
        if run not in tasks:
            tasks[run] = progress.add_task(f"{regime.value}/{run}", total=total)
        progress.update(tasks[run], completed=step)

    trainer = Trainer(
        bundle,
        splits["train"],
        splits["dev"],
        config,
        log=log,
        workers=workers,
        on_checkpoint=on_checkpoint,
        progress=on_step if progress is not None else None,
    )
    try:
        if progress is not None:
            with progress:
                result = trainer.train()
        else:
            result = trainer.train()
    except NumericalError as e:
        _write_json(out / "diagnostics.json", {"message": str(e), **e.diagnostics})
        save_checkpoint(out / "last_good.ckpt", bundle, run=e.diagnostics.get("run"))
        raise

    if regime == Regime.DR:
        save_composition(out / "composition.json", {run: _checkpoint_name(regime, run, "best") for run in components})

    test_pools = build_pools(
        "test", splits["test"], config.eval.seed, config.eval.pool_size, config.eval.shared_pool
    )
    dev_report = evaluate(bundle, splits["dev"], trainer.dev_pools, config.eval.protocols, workers)
    test_report = evaluate(bundle, splits["test"], test_pools, config.eval.protocols, workers)
    params = count_parameters(bundle)
    _write_json(out / "params.json", params.model_dump(mode="json"))
    _write_json(
        out / "report.json",
        {
            "regime": regime.value,
            "size": config.model.size,
            "config_hash": config.config_hash(),
            "dev": dev_report.model_dump(mode="json"),
            "test": test_report.model_dump(mode="json"),
            "parameters": params.model_dump(mode="json"),
            "runs": {name: {"steps": r.steps, "best_step": r.best.step} for name, r in result.runs.items()},
        },
    )
    console.print(report_table([dev_report, test_report], [f"{regime.value}/dev", f"{regime.value}/test"]))
    console.print(f"[green]Run written to {out}[/green] ({params.total:,} parameters)")


# eval


def cmd_eval(args) -> None:
    """Evaluate a checkpoint on a split's frozen candidate pools."""
    bundle = load_model(Path(args.checkpoint)).bundle
    examples = load_jsonl(split_path(Path(args.data), args.split))
    pools = build_pools(args.split, examples, args.pool_seed, args.pool_size, args.shared_pool)
    protocols = [Protocol(p) for p in args.protocols]
    report = evaluate(bundle, examples, pools, protocols, eval_workers())

    if args.format in ("json", "both"):
        print(report.model_dump_json(indent=2))
    if args.format in ("table", "both"):
        console.print(report_table([report], [f"{bundle.regime.value}/{args.split}"]))


# retrieve


def parse_context(raw: str) -> list[list[int]]:
    """Parse ``"1,2/3,4"`` into utterances of token ids."""
    if not raw.strip():
        raise DegenerateInputError("context is empty")
    utterances = []
    for part in raw.split("/"):
        try:
            tokens = [int(tok) for tok in part.split(",") if tok.strip()]
        except ValueError as e:
            raise ConfigError(f"context {raw!r}: token ids must be integers") from e
        if not tokens:
            raise DegenerateInputError(f"context {raw!r} has an empty utterance")
        utterances.append(tokens)
    return utterances


def retrieve(
    bundle: ModelBundle,
    utterances: list[list[int]],
    store_split: str,
    examples: Sequence[DialogueExample],
    k: int,
) -> dict[str, Any]:
    """Top-k candidates of a split's full candidate store, as written by ``mmdr retrieve``."""
    store = candidate_store(store_split, examples)
    result = infer(bundle, utterances, store.text, list(store.image.values()))
    return {
        "regime": bundle.regime.value,
        "intent_probability": result.intent_probability,
        "modality": result.modality.value if result.modality is not None else None,
        "results": [
            {"id": c.response_id, "modality": c.modality.value, "score": c.score} for c in result.ranked[:k]
        ],
    }


def cmd_retrieve(args) -> None:
    """Rank a split's candidates for one context."""
    if args.k < 1:
        raise ConfigError(f"-k must be at least 1, got {args.k}")
    utterances = parse_context(args.context)
    bundle = load_model(Path(args.checkpoint)).bundle
    examples = load_jsonl(split_path(Path(args.data), args.pool_from))
    print(json.dumps(retrieve(bundle, utterances, args.pool_from, examples, args.k), indent=2))


# report


def report_rows(run_dirs: Sequence[Path], split: str = "test") -> list[dict[str, Any]]:
    """One row per (run, protocol) from each run's report.json."""
    missing = [str(d / "report.json") for d in run_dirs if not (d / "report.json").exists()]
    if missing:
        raise DataError(f"missing run reports: {', '.join(missing)}")
    rows = []
    for run_dir in run_dirs:
        payload = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
        report = EvalReport.model_validate(payload[split])
        for protocol, scores in report.protocols.items():
            rows.append(
                {
                    "run": run_dir.name,
                    "regime": report.regime.value,
                    "size": payload.get("size", ""),
                    "split": report.split,
                    "protocol": protocol.value,
                    "r_at_1": scores.r_at_1,
                    "r_at_5": scores.r_at_5,
                    "r_at_10": scores.r_at_10,
                    "intent_accuracy": "" if report.intent_accuracy is None else report.intent_accuracy,
                    "param_total": payload["parameters"]["total"],
                }
            )
    return rows


def _write_csv(rows: list[dict[str, Any]], columns: list[str], out: Path | None) -> None:
    if out is None:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_report(args) -> None:
    """Collect completed runs into one comparison CSV."""
    rows = report_rows([Path(r) for r in args.runs], args.split)
    out = Path(args.out) if args.out else None
    _write_csv(rows, REPORT_COLUMNS, out)
    if out is not None:
        console.print(f"[green]Wrote {len(rows)} rows to {out}[/green]")


# sweep


def sweep_summary(rows: Sequence[dict[str, Any]]) -> dict[str, dict[str, Any]]:
    """Per regime: rank correlation of noise vs. multimodal R@1 (pooled over seeds), max R@1 drift."""
    summary = {}
    for regime in dict.fromkeys(r["regime"] for r in rows):
        own = [r for r in rows if r["regime"] == regime]
        baseline_noise = min(r["noise"] for r in own)
        baseline = {r["seed"]: r["r_at_1"] for r in own if r["noise"] == baseline_noise}
        drift = max(abs(r["r_at_1"] - baseline[r["seed"]]) for r in own)
        rho = spearman_correlation([r["noise"] for r in own], [r["r_at_1"] for r in own])
        summary[regime] = {
            "spearman_rho": _json_float(rho),
            "baseline_noise": baseline_noise,
            "max_abs_r_at_1_change": drift,
            "runs": len(own),
        }
    return summary


def cmd_sweep(args) -> None:
    """Train every regime under increasing intent-label noise and compare multimodal R@1."""
    regimes = [Regime(r) for r in args.regimes]
    noises = [float(n) for n in args.noise]
    bad = [n for n in noises if not 0.0 <= n <= 0.5]
    if bad:
        raise ConfigError(f"--noise values must lie in [0, 0.5], got {bad}")
    config = load_run_config(args.config, _overrides(args.set))
    out = Path(args.out)
    workers = eval_workers()
    save_resolved_config(config, out)

    rows: list[dict[str, Any]] = []
    for seed in args.seeds:
        data_config = config.data.model_copy(update={"seed": seed})
        splits = generate(data_config)
        test_pools = build_pools(
            "test", splits["test"], config.eval.seed, config.eval.pool_size, config.eval.shared_pool
        )
        for noise in noises:
            for regime in regimes:
                train_config = config.train.model_copy(update={"seed": seed, "intent_label_noise": noise})
                run_config = config.model_copy(update={"data": data_config, "train": train_config})
                name = f"{regime.value}-noise{noise:g}-seed{seed}"
                err_console.print(f"[bold blue]{name}[/bold blue]")
                log_path = out / "logs" / f"{name}.jsonl"
                log_path.unlink(missing_ok=True)
                bundle = build_model(
                    regime, run_config.model, seed, data_config.vocab_size, data_config.image_dims
                )
                Trainer(bundle, splits["train"], splits["dev"], run_config, RunLog(log_path), workers=workers).train()
                report = evaluate(bundle, splits["test"], test_pools, workers=workers)
                multimodal = report.protocols[Protocol.MULTIMODAL]
                rows.append(
                    {
                        "seed": seed,
                        "regime": regime.value,
                        "noise": noise,
                        "r_at_1": multimodal.r_at_1,
                        "r_at_5": multimodal.r_at_5,
                        "r_at_10": multimodal.r_at_10,
                        "intent_accuracy": "" if report.intent_accuracy is None else report.intent_accuracy,
                    }
                )

    _write_csv(rows, SWEEP_COLUMNS, out / "sweep.csv")
    summary = sweep_summary(rows)
    _write_json(out / "sweep_summary.json", summary)

    table = Table(title="Intent-noise sweep (multimodal R@1)")
    table.add_column("Regime", style="cyan")
    table.add_column("Spearman rho", justify="right")
    table.add_column("Max |dR@1|", justify="right")
    for regime, stats in summary.items():
        rho = "-" if stats["spearman_rho"] is None else f"{stats['spearman_rho']:+.3f}"
        table.add_row(regime, rho, f"{stats['max_abs_r_at_1_change']:.3f}")
    console.print(table)


# params


def cmd_params(args) -> None:
    """Print per-component parameter counts without training."""
    overrides = _overrides(args.set)
    if args.size is not None:
        overrides["model.size"] = args.size
    config = load_run_config(args.config, overrides)
    counts = [
        count_parameters(build_model(Regime(r), config.model, 0, config.data.vocab_size, config.data.image_dims))
        for r in args.regime
    ]
    if args.json:
        print(json.dumps([c.model_dump(mode="json") for c in counts], indent=2))
        return
    table = Table(title=f"Parameters ({config.model.size})")
    table.add_column("Regime", style="cyan")
    table.add_column("Component")
    table.add_column("Parameters", justify="right")
    for count in counts:
        for name, n in count.components.items():
            table.add_row(count.regime.value, name, f"{n:,}")
        table.add_row(count.regime.value, "[bold]total[/bold]", f"[bold]{count.total:,}[/bold]")
    console.print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        description="Train and evaluate dual-encoder retrieval over text and image dialogue responses",
        prog="mmdr",
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, help="YAML or JSON run configuration (defaults when omitted)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="Override a config field, e.g. --set train.batch_size=32 (repeatable)",
        )

    # gen-data
    gen_parser = subparsers.add_parser("gen-data", help="Generate a synthetic dialogue dataset")
    add_config(gen_parser)
    gen_parser.add_argument("--out", type=str, required=True, help="Output directory for the JSONL splits")
    gen_parser.add_argument("--seed", type=int, help="Generator seed (overrides data.seed)")
    gen_parser.add_argument("--dialogues", type=int, help="Dialogues per split (overrides all three counts)")
    gen_parser.add_argument("--preset", type=str, help="Generation preset: photochat or mmdial")
    gen_parser.set_defaults(func=cmd_gen_data)

    # train
    train_parser = subparsers.add_parser("train", help="Train a DR, SDR or MDR model")
    add_config(train_parser)
    train_parser.add_argument("--regime", choices=[r.value for r in Regime], required=True)
    train_parser.add_argument("--data", type=str, required=True, help="Directory holding train/dev/test.jsonl")
    train_parser.add_argument("--out", type=str, required=True, help="Run directory")
    train_parser.add_argument("--seed", type=int, help="Training seed (overrides train.seed)")
    train_parser.add_argument("--size", choices=["small", "large"], help="Encoder size preset")
    train_parser.add_argument("--quiet", action="store_true", help="No progress bar")
    train_parser.set_defaults(func=cmd_train)

    # eval
    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint with R@k")
    eval_parser.add_argument("--checkpoint", type=str, required=True, help="Checkpoint or DR composition.json")
    eval_parser.add_argument("--data", type=str, required=True)
    eval_parser.add_argument("--split", choices=["dev", "test"], default="test")
    eval_parser.add_argument(
        "--protocols",
        nargs="+",
        choices=[p.value for p in Protocol],
        default=[p.value for p in Protocol],
    )
    eval_parser.add_argument("--shared-pool", action="store_true", help="One candidate set for the whole split")
    eval_parser.add_argument("--pool-size", type=int, default=50)
    eval_parser.add_argument("--pool-seed", type=int, default=0)
    eval_parser.add_argument("--format", choices=["json", "table", "both"], default="both")
    eval_parser.set_defaults(func=cmd_eval)

    # retrieve
    retrieve_parser = subparsers.add_parser("retrieve", help="Rank candidates for one context")
    retrieve_parser.add_argument("--checkpoint", type=str, required=True)
    retrieve_parser.add_argument("--context", type=str, required=True, help="Utterances split by '/', ids by ','")
    retrieve_parser.add_argument("--data", type=str, required=True)
    retrieve_parser.add_argument("--pool-from", choices=list(SPLITS), default="test")
    retrieve_parser.add_argument("-k", type=int, default=10, help="Number of results (default: 10)")
    retrieve_parser.set_defaults(func=cmd_retrieve)

    # report
    report_parser = subparsers.add_parser("report", help="Compare completed runs as CSV")
    report_parser.add_argument("--runs", nargs="+", required=True, help="Run directories")
    report_parser.add_argument("--split", choices=["dev", "test"], default="test")
    report_parser.add_argument("--out", type=str, help="CSV path (standard output when omitted)")
    report_parser.set_defaults(func=cmd_report)

    # sweep
    sweep_parser = subparsers.add_parser("sweep", help="Intent-label noise sweep across regimes")
    add_config(sweep_parser)
    sweep_parser.add_argument("--out", type=str, required=True)
    sweep_parser.add_argument(
        "--regimes", nargs="+", choices=[r.value for r in Regime], default=[r.value for r in Regime]
    )
    sweep_parser.add_argument("--noise", nargs="+", type=float, default=list(DEFAULT_SWEEP_NOISE))
    sweep_parser.add_argument("--seeds", nargs="+", type=int, default=list(DEFAULT_SWEEP_SEEDS))
    sweep_parser.set_defaults(func=cmd_sweep)

    # params
    params_parser = subparsers.add_parser("params", help="Parameter counts per regime")
    add_config(params_parser)
    params_parser.add_argument(
        "--regime", nargs="+", choices=[r.value for r in Regime], default=[r.value for r in Regime]
    )
    params_parser.add_argument("--size", choices=["small", "large"])
    params_parser.add_argument("--json", action="store_true", help="Print JSON instead of a table")
    params_parser.set_defaults(func=cmd_params)

    return parser


def main(argv: Sequence[str] | None = None) -> None:
    """Main entry point for the mmdr CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        sys.exit(1)

    try:
        args.func(args)
    except MmdrError as e:
        err_console.print(f"[red]Error:[/red] {escape(str(e))}")
        sys.exit(e.exit_code)
    except OSError as e:
        err_console.print(f"[red]Error:[/red] {escape(str(e))}")
        sys.exit(1)


if __name__ == "__main__":
    main()
