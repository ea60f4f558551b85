"""Experiment driver: dataset synthesis, both training stages, evaluation,
and report emission.

Every invocation resolves one experiment config (defaults, then an optional
JSON file, then dotted-key --set overrides, then convenience flags), stamps
its digest into every artifact, and writes under <out>/<run-id>/ where the
run id is a timestamp plus a digest prefix.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from .data import EpisodeSpec, generate_dataset, load_dataset
from .encoder import EncoderConfig
from .errors import ContractViolationError, DatasetError, TrainingError
from .metrics import CSV_COLUMNS
from .trainer import Checkpoint, TrainConfig, dump_log, evaluate, finetune_stage, pretrain_stage

PRESETS = ("desk", "full")
REPORT_FORMATS = ("markdown", "csv", "json")
_REPORT_EXT = {"markdown": "md", "csv": "csv", "json": "json"}


class CliError(Exception):
    """Carries an exit code plus a machine-readable error record."""

    def __init__(self, code: int, record: dict):
        super().__init__(record.get("message", record["error"]))
        self.code = code
        self.record = record


# -- experiment config -----------------------------------------------------


def default_config() -> dict:
    """Fully resolved default experiment: every legal key is present."""
    stages = {}
    for stage in ("pretrain", "finetune"):
        raw = TrainConfig(stage=stage).to_dict()
        raw.pop("stage")
        raw.pop("attention_variant")
        raw["seed"] = None  # None inherits the experiment seed
        stages[stage] = raw
    return {
        "dataset": None,
        "preset": "desk",
        "out": None,
        "seed": 42,
        "attention": "none",
        "synth": {"count": 200, "size": 32, "seed": None},
        "pretrain": stages["pretrain"],
        "finetune": stages["finetune"],
        "eval": {
            "episodes": 1000,
            "split": "test",
            "seed": None,
            "spec": asdict(EpisodeSpec()),
        },
    }


def _validate_tree(user: dict, defaults: dict, prefix: str = "") -> None:
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if not isinstance(defaults, dict) or key not in defaults:
            raise CliError(2, {"error": "unknown-config-key", "key": dotted})
        base = defaults[key]
        if isinstance(base, dict):
            if not isinstance(value, dict):
                raise CliError(2, {"error": "invalid-config-value", "key": dotted,
                                   "message": f"{dotted} names a config section"})
            _validate_tree(value, base, dotted + ".")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(out.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_override(item: str) -> dict:
    """One --set KEY=VALUE into a single-path nested dict."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise CliError(2, {"error": "invalid-config-value", "key": item,
                           "message": "overrides take the form key=value"})
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    for part in reversed(key.split(".")):
        value = {part: value}
    return value

def resolve_config(config_path, sets, flag_overrides: dict) -> dict:
    """defaults <- config file <- --set overrides <- convenience flags."""
    defaults = default_config()
    resolved = defaults
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError(1, {"error": "missing-config", "path": str(path)})
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise CliError(1, {"error": "invalid-config", "path": str(path),
                               "message": str(err)}) from err
        _validate_tree(loaded, defaults)
        resolved = _merge(resolved, loaded)
    for item in sets:
        override = _parse_override(item)
        _validate_tree(override, defaults)
        resolved = _merge(resolved, override)
    _validate_tree(flag_overrides, defaults)
    resolved = _merge(resolved, flag_overrides)
    if resolved["preset"] not in PRESETS:
        raise CliError(2, {"error": "invalid-config-value", "key": "preset",
                           "message": f"preset must be one of {PRESETS}"})
    return resolved


def config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _stage_config(config: dict, stage: str) -> TrainConfig:
    raw = dict(config[stage])
    raw["stage"] = stage
    if raw.get("seed") is None:
        raw["seed"] = config["seed"]
    raw["attention_variant"] = config["attention"] if stage == "finetune" else "none"
    return TrainConfig.from_dict(raw)


def _encoder_config(config: dict) -> EncoderConfig:
    return EncoderConfig.full() if config["preset"] == "full" else EncoderConfig.desk()


# -- artifact plumbing -----------------------------------------------------


def _make_run_dir(config: dict, digest: str) -> Path:
    root = Path(config.get("out") or os.environ.get("PROTOSEG_OUT") or "runs")
    base = f"{time.strftime('%Y%m%dT%H%M%S')}-{digest[:8]}"
    run = root / base
    suffix = 0
    while run.exists():
        suffix += 1
        run = root / f"{base}-{suffix}"
    run.mkdir(parents=True)
    return run


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_config(run: Path, command: str, config: dict, digest: str) -> None:
    _write_json(run / "config.json", {
        "digest": digest,
        "seed": config["seed"],
        "command": command,
        "config": config,
    })


def _require_dataset(config: dict, run: Path | None, synth_requested: bool) -> Path:
    """Resolve the dataset directory, synthesizing it first when asked."""
    path = Path(config["dataset"]) if config["dataset"] else (run / "dataset" if run else None)
    present = path is not None and (path / "meta.json").exists()
    if present:
        return path
    if synth_requested and path is not None:
        _synthesize(config, path)
        return path
    raise CliError(3, {"error": "missing-dataset",
                       "path": str(path) if path else None})


def _synthesize(config: dict, path: Path):
    synth = config["synth"]
    seed = config["seed"] if synth["seed"] is None else synth["seed"]
    return generate_dataset(path, num_images=synth["count"],
                            image_size=synth["size"], seed=seed)


def _resolve_checkpoint(raw: str) -> Path:
    path = Path(raw)
    if path.is_dir():
        path = path / "checkpoint.npz"
    if not path.exists():
        raise CliError(1, {"error": "missing-checkpoint", "path": str(raw)})
    return path


def _save_training_artifacts(run: Path, checkpoint: Checkpoint, log: list[dict],
                             digest: str, seed: int) -> None:
    checkpoint.header["experiment_digest"] = digest
    checkpoint.save(run / "checkpoint.npz")
    meta = {"record": "meta", "digest": digest, "seed": seed}
    dump_log([meta] + log, run / "log.jsonl")


# -- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    config = resolve_config(args.config, args.set, _flag_overrides(args))
    digest = config_digest(config)
    run = _make_run_dir(config, digest)
    _write_config(run, "synth", config, digest)
    dataset_dir = Path(config["dataset"]) if config["dataset"] else run / "dataset"
    meta = _synthesize(config, dataset_dir)
    _write_json(run / "synth.json", {
        "digest": digest,
        "seed": config["seed"],
        "dataset": str(dataset_dir),
        "count": config["synth"]["count"],
        "size": config["synth"]["size"],
        "class_frequencies": list(meta.class_frequencies),
        "split_sizes": {name: len(ids) for name, ids in meta.splits.items()},
    })
    print(dataset_dir)
    return 0


def cmd_pretrain(args) -> int:
    config = resolve_config(args.config, args.set, _flag_overrides(args))
    digest = config_digest(config)
    train_config = _stage_config(config, "pretrain")
    run = _make_run_dir(config, digest)
    _write_config(run, "pretrain", config, digest)
    dataset = load_dataset(_require_dataset(config, run, args.synth))
    checkpoint, log = pretrain_stage(dataset, train_config,
                                     encoder_config=_encoder_config(config))
    _save_training_artifacts(run, checkpoint, log, digest, train_config.seed)
    print(f"{run} loss={log[-1]['loss']:.4f}")
    return 0


def cmd_finetune(args) -> int:
    config = resolve_config(args.config, args.set, _flag_overrides(args))
    digest = config_digest(config)
    train_config = _stage_config(config, "finetune")
    base = Checkpoint.load(_resolve_checkpoint(args.checkpoint))
    run = _make_run_dir(config, digest)
    _write_config(run, "finetune", config, digest)
    dataset = load_dataset(_require_dataset(config, run, args.synth))
    checkpoint, log = finetune_stage(base, dataset, train_config)
    _save_training_artifacts(run, checkpoint, log, digest, train_config.seed)
    print(f"{run} loss={log[-1]['loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args.config, args.set, _flag_overrides(args))
    digest = config_digest(config)
    checkpoint = Checkpoint.load(_resolve_checkpoint(args.checkpoint))
    run = _make_run_dir(config, digest)
    _write_config(run, "eval", config, digest)
    dataset = load_dataset(_require_dataset(config, run, args.synth))
    eval_cfg = config["eval"]
    spec = EpisodeSpec(**eval_cfg["spec"])
    seed = config["seed"] if eval_cfg["seed"] is None else eval_cfg["seed"]
    aggregate, reports = evaluate(checkpoint, dataset, spec=spec,
                                  episodes=eval_cfg["episodes"], seed=seed,
                                  split=eval_cfg["split"])
    n_train = checkpoint.header["config"]["episode_spec"]["n_ways"]
    columns = list(CSV_COLUMNS)
    _write_json(run / "eval.json", {
        "digest": digest,
        "seed": seed,
        "checkpoint": str(args.checkpoint),
        "checkpoint_digest": checkpoint.header["config_digest"],
        "attention": checkpoint.header["attention_variant"],
        "n_train": n_train,
        "n_test": spec.n_ways,
        "k": spec.k_shots,
        "split": eval_cfg["split"],
        "episodes": aggregate.episodes,
        "columns": columns,
        "mean": dict(zip(columns, aggregate.mean.values())),
        "std": dict(zip(columns, aggregate.std.values())),
        "per_episode": [list(r.values()) for r in reports],
    })
    header = f"n_train,n_test,k,{','.join(columns)},seed,digest"
    row = (f"{n_train},{spec.n_ways},{spec.k_shots},"
           f"{aggregate.mean.csv_row()},{seed},{digest}")
    (run / "eval.csv").write_text(f"{header}\n{row}\n", encoding="utf-8")
    print(header)
    print(row)
    return 0


# -- report rendering --------------------------------------------------------


def _load_eval_rows(run_dirs: list[str]) -> tuple[list[str], list[dict]]:
    columns: list[str] | None = None
    rows = []
    for raw in run_dirs:
        path = Path(raw) / "eval.json"
        if not path.exists():
            raise CliError(1, {"error": "missing-eval-output", "dir": str(raw)})
        payload = json.loads(path.read_text())
        if columns is None:
            columns = list(payload["columns"])
        elif list(payload["columns"]) != columns:
            got = list(payload["columns"])
            raise CliError(1, {
                "error": "schema-mismatch",
                "dir": str(raw),
                "expected": columns,
                "got": got,
                "missing": [c for c in columns if c not in got],
                "extra": [c for c in got if c not in columns],
            })
        rows.append({
            "run": Path(raw).name,
            "n_train": payload["n_train"],
            "n_test": payload["n_test"],
            "k": payload["k"],
            **{c: payload["mean"][c] for c in columns},
            "seed": payload["seed"],
            "digest": payload["digest"],
        })
    return columns or [], rows


def _render_markdown(columns, rows, best) -> str:
    header = ["Run", "n_train", "n_test", "k", *columns, "Seed", "Digest"]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    for row in rows:
        cells = [row["run"], str(row["n_train"]), str(row["n_test"]), str(row["k"])]
        for col in columns:
            cell = f"{row[col]:.4f}"
            if row[col] == best[col]:
                cell = f"**{cell}**"
            cells.append(cell)
        cells.extend([str(row["seed"]), row["digest"]])
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _render_csv(columns, rows, best) -> str:
    lines = ["run,n_train,n_test,k," + ",".join(columns) + ",seed,digest"]
    for row in rows:
        metric_cells = ",".join(f"{row[c]:.6f}" for c in columns)
        lines.append(f"{row['run']},{row['n_train']},{row['n_test']},{row['k']},"
                     f"{metric_cells},{row['seed']},{row['digest']}")
    lines.append("best,,,," + ",".join(f"{best[c]:.6f}" for c in columns) + ",,")
    return "\n".join(lines) + "\n"


def _render_json(columns, rows, best) -> str:
    return json.dumps({"columns": columns, "rows": rows, "best": best}, indent=2) + "\n"


def cmd_report(args) -> int:
    columns, rows = _load_eval_rows(args.runs)
    best = {c: max(row[c] for row in rows) for c in columns}
    renderer = {"markdown": _render_markdown, "csv": _render_csv, "json": _render_json}
    text = renderer[args.format](columns, rows, best)
    report_config = {"out": args.out, "format": args.format, "runs": list(args.runs)}
    digest = config_digest(report_config)
    run = _make_run_dir(report_config, digest)
    _write_json(run / "config.json", {
        "digest": digest,
        "seeds": {row["run"]: row["seed"] for row in rows},
        "command": "report",
        "config": report_config,
    })
    (run / f"report.{_REPORT_EXT[args.format]}").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# -- argument parsing --------------------------------------------------------


def _flag_overrides(args) -> dict:
    """Convenience flags become dotted-config overrides."""
    mapping = {
        "dataset": ("dataset",),
        "out": ("out",),
        "seed": ("seed",),
        "count": ("synth", "count"),
        "size": ("synth", "size"),
        "episodes": (args.command, "episodes"),
        "attention": ("attention",),
        "ways": ("eval", "spec", "n_ways"),
        "shots": ("eval", "spec", "k_shots"),
        "split": ("eval", "split"),
    }
    if args.command == "eval":
        mapping["episodes"] = ("eval", "episodes")
    overrides: dict = {}
    for flag, path in mapping.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = overrides
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return overrides


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key config override; value parsed as JSON when possible")
    parser.add_argument("--dataset", help="dataset directory")
    parser.add_argument("--out", help="output root (default: $PROTOSEG_OUT or ./runs)")
    parser.add_argument("--seed", type=int, help="experiment seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoseg",
        description="Few-shot segmentation experiments: synthesize data, "
                    "pretrain, finetune, evaluate, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic defect dataset")
    _add_common(synth)
    synth.add_argument("--count", type=int, help="number of images")
    synth.add_argument("--size", type=int, help="square image size in pixels")

    pretrain = sub.add_parser("pretrain", help="stage one: episodic encoder training")
    _add_common(pretrain)
    pretrain.add_argument("--episodes", type=int, help="training episodes")
    pretrain.add_argument("--synth", action="store_true",
                          help="synthesize the dataset first when missing")

    finetune = sub.add_parser("finetune",
                              help="stage two: joint encoder + attention finetuning")
    _add_common(finetune)
    finetune.add_argument("--checkpoint", required=True,
                          help="pretrain run directory or checkpoint file")
    finetune.add_argument("--episodes", type=int, help="training episodes")
    finetune.add_argument("--attention", choices=("none", "sa", "lsa", "ca"),
                          help="attention variant to attach")
    finetune.add_argument("--synth", action="store_true",
                          help="synthesize the dataset first when missing")

    evaluate_p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_common(evaluate_p)
    evaluate_p.add_argument("--checkpoint", required=True,
                            help="run directory or checkpoint file")
    evaluate_p.add_argument("--ways", type=int, help="episode ways at test time")
    evaluate_p.add_argument("--shots", type=int, help="support shots per way")
    evaluate_p.add_argument("--episodes", type=int, help="evaluation episodes")
    evaluate_p.add_argument("--split", choices=("train", "val", "test"),
                            help="dataset split to draw episodes from")
    evaluate_p.add_argument("--synth", action="store_true",
                            help="synthesize the dataset first when missing")

    report = sub.add_parser("report", help="render eval outputs as one table")
    report.add_argument("runs", nargs="+", help="run directories holding eval output")
    report.add_argument("--format", choices=REPORT_FORMATS, default="markdown",
                        help="output format")
    report.add_argument("--out", help="output root (default: $PROTOSEG_OUT or ./runs)")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already wrote usage/help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except CliError as err:
        print(json.dumps(err.record, sort_keys=True), file=sys.stderr)
        return err.code
    except (ContractViolationError, DatasetError, TrainingError) as err:
        record = {"error": "contract-violation", "message": str(err)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
