"""Command-line entry point: synth, train, eval, detect, report.

Every command is deterministic given its flags; no output contains
timestamps, so identical invocations produce identical bytes. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import TrainConfig, config_from_text, config_to_text
from .data import generate_synthetic, load_dataset, make_split, save_dataset
from .metrics import MetricReport
from .pipeline import (
    calibrate_threshold,
    collect_validation_confidences,
    evaluate_outcomes,
    outcomes_to_text,
    run_pipeline,
)
from .trainer import train


class UsageError(ValueError):
    """Flag-level mistake: reported with exit code 2."""


def write_manifest(path, entries: dict) -> None:
    text = "".join(f"{k}: {v}\n" for k, v in entries.items())
    Path(path).write_text(text)


def read_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"manifest line {raw!r} is not 'key: value'")
        entries[key.strip()] = value.strip()
    return entries


def _parse_class_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise UsageError(f"expected a comma-separated class list, got {text!r}") from None


def cmd_synth(args) -> int:
    novel = _parse_class_list(args.novel)
    for c in novel:
        if not 0 <= c < args.classes:
            raise UsageError(f"novel class {c} is outside 0..{args.classes - 1}")
    if args.classes - len(novel) < 2:
        raise UsageError("at least two classes must stay known")
    sequences = generate_synthetic(
        seed=args.seed,
        num_classes=args.classes,
        frames_per_segment=args.frames,
        V=args.joints,
        noise_std=args.noise,
        num_sequences=args.sequences,
    )
    save_dataset(args.out, sequences)
    known = tuple(c for c in range(args.classes) if c not in novel)
    write_manifest(
        str(args.out) + ".manifest",
        {
            "classes": args.classes,
            "known": ",".join(str(c) for c in known),
            "novel": ",".join(str(c) for c in novel),
            "sequences": args.sequences,
            "frames_per_segment": args.frames,
            "joints": args.joints,
            "noise_std": repr(args.noise),
            "seed": args.seed,
        },
    )
    print(f"wrote {len(sequences)} sequences to {args.out} (seed {args.seed})")
    return 0


def _load_config(args) -> TrainConfig:
    if args.config:
        text = Path(args.config).read_text()
    else:
        text = config_to_text(TrainConfig())
    overrides = []
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides.append(f"{key.strip()}: {value.strip()}")
    if args.seed is not None:
        overrides.append(f"seed: {args.seed}")
    if args.epochs is not None:
        overrides.append(f"epochs: {args.epochs}")
    if args.batch_size is not None:
        overrides.append(f"batch_size: {args.batch_size}")
    if args.no_mixup:
        overrides.append("mixup_enabled: false")
    if args.no_tc_loss:
        overrides.append("tc_loss_enabled: false")
    if args.decoder:
        overrides.append(f"model.decoder: {args.decoder}")
    full = config_to_text(config_from_text(text))  # normalize before overriding
    return config_from_text(full + "\n".join(overrides) + ("\n" if overrides else ""))


def _load_split(data_path, manifest_path, ratios):
    sequences = load_dataset(data_path)
    manifest = read_manifest(manifest_path or str(data_path) + ".manifest")
    novel = set(_parse_class_list(manifest.get("novel", "")))
    return make_split(sequences, novel, ratios), manifest


def cmd_train(args) -> int:
    config = _load_config(args)
    split, _ = _load_split(args.data, args.manifest, (config.train_ratio, config.val_ratio))
    result = train(split, config)
    save_checkpoint(result.checkpoint, args.out)
    log_path = args.log or str(args.out) + ".log.csv"
    Path(log_path).write_text(f"# seed: {config.seed}\n" + result.log_csv())
    best = result.checkpoint
    print(
        f"checkpoint: {args.out} (best epoch {best.epoch}, "
        f"val_acc {best.val_acc:.4f}, val_loss {best.val_loss:.4f})"
    )
    return 0


_SCENARIOS = ("closed", "open", "ood")


def _scenario_sequences(split, scenario: str):
    return {
        "closed": split.test_closed,
        "open": split.test_open,
        "ood": split.test_ood_only,
    }[scenario]


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    ratios = (checkpoint.config.train_ratio, checkpoint.config.val_ratio)
    split, manifest = _load_split(args.data, args.manifest, ratios)
    known = tuple(sorted(split.known_classes))
    if known != checkpoint.known_classes:
        raise ValueError(
            f"dataset known classes {known} do not match checkpoint {checkpoint.known_classes}"
        )
    detector = calibrate_threshold(
        collect_validation_confidences(model, list(split.val)), args.percentile
    )
    num_novel = len(split.novel_classes)
    clusters = args.clusters if args.clusters is not None else max(num_novel, 1)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for scenario in _SCENARIOS:
        try:
            sequences = _scenario_sequences(split, scenario)
            result = run_pipeline(
                model,
                detector,
                list(sequences),
                clusters,
                class_order=checkpoint.known_classes,
                known_classes=split.known_classes,
                seed=args.seed,
            )
            report = evaluate_outcomes(
                result.outcomes,
                split.known_classes,
                scenario,
                alpha=detector.alpha,
                num_novel_classes=num_novel,
            )
        except Exception as exc:
            print(f"eval failed in scenario '{scenario}': {exc}", file=sys.stderr)
            return 1
        (out_dir / f"report_{scenario}.txt").write_text(
            f"# seed: {args.seed}\n" + report.to_text()
        )
        (out_dir / f"outcomes_{scenario}.csv").write_text(outcomes_to_text(result.outcomes))
        rows.append(report.to_csv_row())
        print(f"{scenario}: " + report.to_text().replace("\n", "  ").strip())
    (out_dir / "reports.csv").write_text(
        f"# seed: {args.seed}\n" + MetricReport.csv_header() + "\n" + "\n".join(rows) + "\n"
    )
    return 0


def cmd_detect(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    ratios = (checkpoint.config.train_ratio, checkpoint.config.val_ratio)
    split, _ = _load_split(args.data, args.manifest, ratios)
    detector = calibrate_threshold(
        collect_validation_confidences(model, list(split.val)), args.percentile
    )
    clusters = args.clusters if args.clusters is not None else max(len(split.novel_classes), 1)
    sequences = _scenario_sequences(split, args.scenario)
    result = run_pipeline(
        model,
        detector,
        list(sequences),
        clusters,
        class_order=checkpoint.known_classes,
        known_classes=split.known_classes,
        seed=args.seed,
    )
    Path(args.out).write_text(outcomes_to_text(result.outcomes))
    print(
        f"wrote {args.out}: {result.num_flagged_novel} frames flagged novel "
        f"at alpha {result.alpha:.6f}"
    )
    return 0


_TABLE_COLUMNS = (
    "acc_close",
    "acc_open",
    "f1_10",
    "f1_25",
    "f1_50",
    "auroc",
    "acc_ood",
    "h_score",
)
_TABLE_TITLES = ("ACC_close", "ACC_open", "F1@10", "F1@25", "F1@50", "AUROC", "ACC_OOD", "h-score")


def _rows_from_report_csv(path: Path, label: str) -> list[dict[str, str]]:
    lines = [l for l in path.read_text().splitlines() if l.strip() and not l.startswith("#")]
    if not lines:
        raise ValueError(f"report {path} is empty")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(header):
            raise ValueError(f"report {path}: row width differs from header")
        row = dict(zip(header, cells))
        row.setdefault("label", label)
        rows.append(row)
    for column in ("scenario",) + _TABLE_COLUMNS:
        if column not in header and column != "label":
            raise ValueError(f"report {path} is missing column {column!r}")
    return rows


def _rows_from_report_text(path: Path, label: str) -> list[dict[str, str]]:
    report = MetricReport.from_text(
        "\n".join(l for l in path.read_text().splitlines() if not l.startswith("#"))
    )
    row = {name: report.format_value(name) for name in report.field_names()}
    row["label"] = label
    return [row]


def _report_label(arg: str) -> tuple[str, Path]:
    if "=" in arg:
        label, _, path = arg.partition("=")
        return label, Path(path)
    path = Path(arg)
    label = path.parent.name if path.name == "reports.csv" and path.parent.name else path.stem
    return label, path


def cmd_report(args) -> int:
    rows: list[dict[str, str]] = []
    for arg in args.inputs:
        label, path = _report_label(arg)
        if not path.exists():
            raise UsageError(f"report input {path} does not exist")
        if path.suffix == ".csv":
            rows.extend(_rows_from_report_csv(path, label))
        else:
            rows.extend(_rows_from_report_text(path, label))
    if args.scenario:
        rows = [r for r in rows if r.get("scenario") == args.scenario]
    if not rows:
        raise ValueError("no report rows matched")

    headers = ["configuration", "scenario", *_TABLE_TITLES]
    table = [headers]
    for row in rows:
        table.append([row["label"], row["scenario"], *(row[c] for c in _TABLE_COLUMNS)])
    widths = [max(len(line[i]) for line in table) for i in range(len(headers))]
    text_lines = []
    for i, line in enumerate(table):
        text_lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
        if i == 0:
            text_lines.append("  ".join("-" * w for w in widths))
    text = "\n".join(text_lines) + "\n"

    csv_lines = ["label,scenario," + ",".join(_TABLE_COLUMNS)]
    for row in rows:
        csv_lines.append(
            ",".join([row["label"], row["scenario"], *(row[c] for c in _TABLE_COLUMNS)])
        )
    csv_text = "\n".join(csv_lines) + "\n"

    if args.out_text:
        Path(args.out_text).write_text(text)
    if args.out_csv:
        Path(args.out_csv).write_text(csv_text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic skeleton dataset")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--novel", required=True, help="comma-separated novel class ids")
    p.add_argument("--sequences", type=int, default=32)
    p.add_argument("--frames", type=int, default=16, help="frames per segment")
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None, help="key: value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-mixup", action="store_true")
    p.add_argument("--no-tc-loss", action="store_true")
    p.add_argument("--decoder", choices=("teu", "tpp"), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under all three scenarios")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--percentile", type=float, default=5.0)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="export per-frame open-world decisions")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--percentile", type=float, default=5.0)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", choices=_SCENARIOS, default="open")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="combine eval reports into a comparison table")
    p.add_argument("inputs", nargs="+", metavar="LABEL=PATH")
    p.add_argument("--scenario", choices=_SCENARIOS, default=None)
    p.add_argument("--out-text", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
