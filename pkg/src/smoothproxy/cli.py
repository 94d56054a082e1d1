"""Command-line interface: data generation, training, and experiment drivers.

Contract: stdout carries exactly one machine-readable JSON document (or
nothing when --out redirects it to a file); human-readable tables and
diagnostics go to stderr, with a .txt sidecar next to --out. Exit codes:
0 success, 1 runtime failure (aborted training, I/O), 2 usage or config
errors. Every JSON document validates against the shipped schema.

The default seed can be set with the SMOOTHPROXY_SEED environment variable;
a config-file "seed" overrides it and an explicit --seed overrides both.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import os
import sys
from dataclasses import replace

import jsonschema
import numpy as np

from .data import (
    DataFormatError,
    GeneratorSpec,
    export_csv,
    generate_synthetic,
    import_csv,
)
from .losses import LOSS_NAMES
from .model import ConfidenceModel, EmbeddingModel, save_checkpoint
from .numerics import SeededRng
from .pipeline import (
    ExperimentConfig,
    TrainingError,
    _apply_noise_filter,
    confidence_noise_statistics,
    evaluate_embeddings,
    prepare_data,
    run_comparison,
    run_experiment,
    run_grid,
    run_noise_ablation,
    train_phase1,
    train_phase2,
    SCHEMA_VERSION,
)

__all__ = ["entrypoint", "build_parser", "validate_report", "ConfigError"]

SEED_ENV_VAR = "SMOOTHPROXY_SEED"

_schema_cache = None


class ConfigError(Exception):
    """Bad flags, config file, or input file; maps to exit code 2."""


def validate_report(payload: dict) -> None:
    """Check a JSON document against the shipped report schema."""
    global _schema_cache
    if _schema_cache is None:
        text = importlib.resources.files("smoothproxy").joinpath(
            "schemas/report.schema.json").read_text(encoding="utf-8")
        _schema_cache = json.loads(text)
    jsonschema.validate(payload, _schema_cache)


def _env_seed():
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def _load_config(args) -> ExperimentConfig:
    raw = {}
    path = getattr(args, "config", None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw:
        env = _env_seed()
        if env is not None:
            raw["seed"] = env
    try:
        return ExperimentConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def _percent_row(label: str, values, width: int = 9) -> str:
    cells = "".join(f"{100.0 * v:>{width}.2f}" if v is not None else
                    f"{'--':>{width}}" for v in values)
    return f"{label:<24}{cells}"


def _recall_table(rows, ks) -> str:
    header = f"{'':<24}" + "".join(f"{'R@' + str(k):>9}" for k in ks)
    lines = [header]
    for label, recall_at in rows:
        lines.append(_percent_row(label, [recall_at.get(str(k)) for k in ks]))
    return "\n".join(lines)


def _report_ks(recall: dict) -> list:
    return sorted(int(k) for k in recall["recall_at"])


def _emit(args, payload: dict, table=None) -> None:
    validate_report(payload)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    out = getattr(args, "out", None)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
        if table:
            with open(f"{out}.txt", "w", encoding="utf-8") as fh:
                fh.write(table + "\n")
    else:
        sys.stdout.write(text)
    if table:
        sys.stderr.write(table + "\n")
    figures_dir = getattr(args, "figures", None)
    if figures_dir:
        from .figures import save_report_figures

        for path in save_report_figures(payload, figures_dir):
            sys.stderr.write(f"figure: {path}\n")


def _cmd_gen_data(args):
    if not 0.0 <= args.noise < 1.0:
        raise ConfigError(f"--noise must be in [0, 1), got {args.noise}")
    if args.classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {args.classes}")
    if args.per_class < 1:
        raise ConfigError(f"--per-class must be >= 1, got {args.per_class}")
    if args.dim < 2:
        raise ConfigError(f"--dim must be >= 2, got {args.dim}")
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    try:
        spec = GeneratorSpec(class_count=args.classes, per_class=args.per_class,
                             raw_dim=args.dim, cluster_std=args.cluster_std,
                             noise_rate=args.noise, flip_mode=args.flip_mode,
                             center_rank=args.center_rank)
        dataset = generate_synthetic(SeededRng(seed), spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    export_csv(dataset, args.out)
    with open(f"{args.out}.meta.json", "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    sys.stderr.write(
        f"wrote {dataset.sample_count} samples to {args.out} "
        f"(+{args.out}.meta.json)\n"
    )
    # --out names the CSV here; the JSON summary goes to stdout
    args.out = None
    return payload, None


def _cmd_run(args):
    config = _load_config(args)
    report = run_experiment(config).to_dict()
    ks = _report_ks(report["recall"])
    table = _recall_table([(report["loss"], report["recall"]["recall_at"])], ks)
    return report, table


def _parse_losses(text: str) -> list:
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise ConfigError("--losses must name at least one loss")
    return names


def _cmd_compare(args):
    config = _load_config(args)
    report = run_comparison(config, losses=_parse_losses(args.losses),
                            seeds=args.seeds, jobs=args.jobs)
    first = report["runs"][report["losses"][0]][0]
    ks = _report_ks(first["recall"])
    rows = []
    for name in report["losses"]:
        runs = report["runs"][name]
        mean_at = {
            str(k): sum(r["recall"]["recall_at"][str(k)] for r in runs) / len(runs)
            for k in ks
        }
        rows.append((name, mean_at))
    return report, _recall_table(rows, ks)


def _parse_floats(text: str, flag: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag} must be comma-separated numbers, got {text!r}") from None


def _cmd_grid(args):
    config = _load_config(args)
    lambdas = _parse_floats(args.lambdas, "--lambdas")
    betas = _parse_floats(args.betas, "--betas")
    report = run_grid(config, lambdas=lambdas, betas=betas, seeds=args.seeds,
                      jobs=args.jobs)
    corner = "lam / beta"
    header = f"{corner:<12}" + "".join(f"{b:>9g}" for b in report["betas"])
    lines = [header]
    for lam, row in zip(report["lambdas"], report["recall1_table"]):
        cells = "".join(f"{100.0 * v:>9.2f}" if v is not None else f"{'--':>9}"
                        for v in row)
        lines.append(f"{lam:<12g}{cells}")
    return report, "\n".join(lines)


def _cmd_ablate(args):
    config = _load_config(args)
    if args.lambda_c is not None:
        config = replace(config, noise_filter=args.lambda_c)
    report = run_noise_ablation(config, seeds=args.seeds)
    ks = _report_ks(report["pairs"][0]["full"]["recall"])

    def mean_at(which):
        return {
            str(k): sum(p[which]["recall"]["recall_at"][str(k)]
                        for p in report["pairs"]) / len(report["pairs"])
            for k in ks
        }

    table = _recall_table([("full", mean_at("full")),
                           ("filtered", mean_at("filtered"))], ks)
    return report, table


def _cmd_train_confidence(args):
    config = _load_config(args)
    prepared = prepare_data(config)
    model, phase1_report = train_phase1(config, prepared.train,
                                        prepared.clean_val, prepared.backbone)
    stats = confidence_noise_statistics(model, prepared.backbone,
                                        prepared.train, prepared.train_class_ids)
    if args.out_model:
        model.save(args.out_model)
        sys.stderr.write(f"checkpoint: {args.out_model}\n")
    payload = {
        "kind": "phase1",
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "report": phase1_report,
        "confidence_stats": stats,
        "model_path": args.out_model,
    }
    acc = phase1_report["final_accuracy"]
    table = None
    if acc is not None:
        table = f"{'clean validation accuracy':<28}{100.0 * acc:>8.2f}"
    return payload, table


def _cmd_train_embedding(args):
    config = _load_config(args)
    prepared = prepare_data(config)
    if args.confidence_model:
        if not os.path.exists(args.confidence_model):
            raise ConfigError(
                f"confidence checkpoint not found: {args.confidence_model}")
        confidence = ConfidenceModel.load(args.confidence_model)
    else:
        confidence, _ = train_phase1(config, prepared.train,
                                     prepared.clean_val, prepared.backbone)
    train = prepared.train
    filter_info = None
    if config.noise_filter is not None:
        train, filter_info = _apply_noise_filter(config, train, confidence,
                                                 prepared.backbone,
                                                 prepared.train_class_ids)
    model, bank, phase2_report = train_phase2(config, train, confidence,
                                              prepared.backbone)
    if args.out_model:
        model.save(args.out_model)
        sys.stderr.write(f"checkpoint: {args.out_model}\n")
    if args.out_proxies:
        save_checkpoint(args.out_proxies, "proxies",
                        {"proxies": bank.proxies},
                        {"class_ids": list(bank.class_ids)})
        sys.stderr.write(f"checkpoint: {args.out_proxies}\n")
    payload = {
        "kind": "phase2",
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "report": phase2_report,
        "noise_filter": filter_info,
        "model_path": args.out_model,
        "proxies_path": args.out_proxies,
    }
    return payload, None


def _cmd_eval(args):
    config = _load_config(args)
    if not os.path.exists(args.model):
        raise ConfigError(f"embedding checkpoint not found: {args.model}")
    model = EmbeddingModel.load(args.model)
    prepared = prepare_data(config)
    expected = prepared.backbone.output_dim(prepared.eval.feature_dim)
    if model.feature_dim != expected:
        raise ConfigError(
            f"checkpoint expects {model.feature_dim}-dim features, "
            f"dataset provides {expected}"
        )
    recall = evaluate_embeddings(config, model, prepared.backbone, prepared.eval)
    payload = {
        "kind": "recall",
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "recall": recall.to_dict(),
    }
    ks = _report_ks(payload["recall"])
    table = _recall_table([("eval", payload["recall"]["recall_at"])], ks)
    return payload, table


def _cmd_inspect(args):
    dataset = import_csv(args.data)
    counts = {str(c): int(np.sum(dataset.noisy_labels == c))
              for c in range(dataset.class_count)}
    generator = dataset.metadata.get("generator", {})
    labels_known = bool(dataset.metadata.get("true_labels_known", True))
    realized = dataset.realized_noise_rate() if labels_known else None
    payload = {
        "kind": "dataset_stats",
        "schema_version": SCHEMA_VERSION,
        "path": str(args.data),
        "sample_count": dataset.sample_count,
        "feature_dim": dataset.feature_dim,
        "class_count": dataset.class_count,
        "per_class_counts": counts,
        "realized_noise_rate": realized,
        "metadata_noise_rate": generator.get("noise_rate"),
        "true_labels_known": labels_known,
        "metadata": dataset.metadata,
    }
    lines = [f"{'class':<8}{'count':>8}"]
    for c in range(dataset.class_count):
        lines.append(f"{c:<8}{counts[str(c)]:>8}")
    if realized is not None:
        lines.append(f"realized noise rate: {realized:.4f}")
    return payload, "\n".join(lines)


def _add_config_flags(sub, figures: bool = False):
    sub.add_argument("--config", help="JSON experiment config (object; may be partial)")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out", help="write the JSON report here instead of stdout")
    if figures:
        sub.add_argument("--figures",
                         help="directory for rendered PNG figures of the report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothproxy",
        description="Noise-robust proxy-based metric learning experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic noisy dataset CSV")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--flip-mode", choices=("uniform", "neighbor"),
                   default="uniform")
    p.add_argument("--cluster-std", type=float, default=0.35)
    p.add_argument("--center-rank", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("run", help="both phases plus final evaluation")
    _add_config_flags(p, figures=True)
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("compare", help="several losses on identical data and seeds")
    _add_config_flags(p, figures=True)
    p.add_argument("--losses", default=",".join(LOSS_NAMES),
                   help="comma-separated loss names")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=_cmd_compare)

    p = sub.add_parser("grid", help="lambda x beta grid for the smooth loss")
    _add_config_flags(p, figures=True)
    p.add_argument("--lambdas", default="0.075,0.1,0.125,0.15")
    p.add_argument("--betas", default="50,100,150,200")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=_cmd_grid)

    p = sub.add_parser("ablate-noise",
                       help="paired runs with and without low-confidence samples")
    _add_config_flags(p, figures=True)
    p.add_argument("--lambda-c", type=float, default=None,
                   help="confidence threshold for dropping samples")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("train-confidence", help="phase 1 only")
    _add_config_flags(p)
    p.add_argument("--out-model", help="write the confidence checkpoint here")
    p.set_defaults(handler=_cmd_train_confidence)

    p = sub.add_parser("train-embedding", help="phase 2 only")
    _add_config_flags(p)
    p.add_argument("--confidence-model",
                   help="phase-1 checkpoint; trains phase 1 inline if omitted")
    p.add_argument("--out-model", help="write the embedding checkpoint here")
    p.add_argument("--out-proxies", help="write the proxy checkpoint here")
    p.set_defaults(handler=_cmd_train_embedding)

    p = sub.add_parser("eval", help="Recall@K of a saved embedding model")
    _add_config_flags(p)
    p.add_argument("--model", required=True, help="embedding checkpoint")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("inspect", help="dataset statistics for a CSV file")
    p.add_argument("--data", required=True, help="dataset CSV path")
    p.add_argument("--out", help="write the JSON stats here instead of stdout")
    p.set_defaults(handler=_cmd_inspect)

    return parser


def entrypoint(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload, table = args.handler(args)
        _emit(args, payload, table)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except DataFormatError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except TrainingError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(entrypoint())
