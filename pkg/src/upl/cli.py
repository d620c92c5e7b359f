"""Command-line entry point: ``upl <subcommand> [flags]``.

Every output lands under ``--out``.  Exit codes: 0 success, 2 configuration or
input error, 3 empty selection, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import traceback

from . import analysis, data
from .encoders import FrozenEncoderPair, load_encoder
from .errors import ConfigError, EmptySelectionError, InputError, UPLError
from .fileio import atomic_write_text, file_hash
from .inference import EvalReport, build_class_embeddings, evaluate, zeroshot_bank
from .prompt import (
    CLS_POSITIONS,
    DEFAULT_BANK_SIZE,
    DEFAULT_LENGTH,
    PromptRepresentation,
    TrainConfig,
    read_flat_config,
    train_prompt_bank,
)
from .pseudo_label import (
    DEFAULT_K,
    PseudoLabelSet,
    Strategy,
    assign_pseudo_labels,
    ensemble_probs,
    pseudo_label_stats,
    select,
    select_threshold,
    zero_shot_probs,
)

log = logging.getLogger("upl")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_EMPTY = 0, 1, 2, 3
DEFAULT_BACKEND = "clip:RN50"

PSEUDO_FILE = "pseudo_labels.jsonl"
ASSIGN_FILE = "assignments.jsonl"
TRAIN_MANIFEST = "train_manifest.json"
EVAL_FILE = "eval.csv"
ZEROSHOT_EVAL_FILE = "eval_zeroshot.csv"

# Training flags that may also come from --config; argparse leaves them unset
# unless given so the precedence flags > file > defaults can be applied.
_TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "lr": float, "warmup_lr": float,
    "warmup_epochs": int, "schedule": str, "momentum": float, "weight_decay": float,
}


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


def _out(args, *parts) -> str:
    return os.path.join(args.out, *parts)


def _encoder(key: str) -> FrozenEncoderPair:
    return load_encoder(key)


def _dataset(args, encoder) -> data.DatasetSpec:
    return data.get_dataset(args.dataset, encoder=encoder, data_root=args.data_root)


def _cache_root(args, spec) -> str:
    if spec.layout == "synthetic":
        return args.out
    return data.resolve_data_root(args.data_root)


def _cache_file(args, spec, split, encoder) -> str:
    return data.cache_path(_cache_root(args, spec), spec.name, split, encoder.model_tag)


def _ensure_cache(args, spec, split, encoder) -> data.FeatureCache:
    path = _cache_file(args, spec, split, encoder)
    return data.build_cache(spec, split, encoder, path, jobs=args.jobs)


def _csv_list(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _safe(tag: str) -> str:
    return data.safe_tag(tag).replace(":", "_")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_cache_features(args) -> int:
    encoder = _encoder(args.backend)
    spec = _dataset(args, encoder)
    splits = data.SPLITS if args.split == "both" else (args.split,)
    for split in splits:
        path = _cache_file(args, spec, split, encoder)
        if os.path.exists(path):
            existing = data.load_cache(path, encoder.model_tag)
            done = set(existing.ids) | set(existing.skipped)
            if all(i in done for i in spec.split_ids(split)):
                print(f"{spec.name}/{split}: cache up to date ({path})")
                continue
        cache = data.build_cache(spec, split, encoder, path, jobs=args.jobs)
        print(f"{spec.name}/{split}: cached {len(cache)} features, {len(cache.skipped)} skipped -> {path}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    strategy = Strategy.parse(args.strategy)
    encoder = _encoder(args.backend)
    spec = _dataset(args, encoder)
    tags = _csv_list(args.backends) or [args.backend]
    encoders = [_encoder(t) for t in tags]

    rows_per_model, per_model_sets = [], {}
    ids = None
    for enc in encoders:
        cache = _ensure_cache(args, spec, "train", enc)
        if ids is None:
            ids = data.subsample_ids(cache.ids, args.max_unlabeled, seed=0)
        missing = [i for i in ids if i not in cache]
        if missing:
            raise InputError(f"{enc.model_tag} has no feature for {missing[0]!r} (skipped image?)")
        rows = zero_shot_probs(enc, spec.pseudo_prompt_template, spec.class_names, cache.features(ids))
        rows_per_model.append(rows)
        if len(encoders) > 1:
            recs = assign_pseudo_labels(rows, source_tag=enc.model_tag)
            per_model_sets[enc.model_tag] = select(recs, strategy, num_classes=spec.num_classes,
                                                   template=spec.pseudo_prompt_template)

    rows = rows_per_model[0] if len(rows_per_model) == 1 else ensemble_probs(rows_per_model)
    source = encoders[0].model_tag if len(encoders) == 1 else f"ensemble(M={len(encoders)})"
    records = assign_pseudo_labels(rows, source_tag=source)
    everything = select_threshold(records, 0.0, num_classes=spec.num_classes,
                                  template=spec.pseudo_prompt_template)
    chosen = select(records, strategy, num_classes=spec.num_classes, template=spec.pseudo_prompt_template)

    os.makedirs(args.out, exist_ok=True)
    everything.save(_out(args, ASSIGN_FILE))
    for tag, s in per_model_sets.items():
        s.save(_out(args, f"pseudo_labels.{_safe(tag)}.jsonl"))
    if len(chosen) == 0:
        raise EmptySelectionError(
            f"empty selection: strategy {strategy} kept no samples out of {len(records)}"
        )
    chosen.save(_out(args, PSEUDO_FILE))

    gt = spec.labels_for("train") or None
    stats = pseudo_label_stats(chosen, gt if gt and all(i in gt for i in chosen.image_ids) else None)
    members = f" [{', '.join(tags)}]" if len(encoders) > 1 else ""
    print(f"selected {len(chosen)} of {len(records)} images with {strategy} from {source}{members}")
    if stats.has_ground_truth:
        print(f"pseudo-label accuracy: {100 * stats.overall_accuracy:.2f}%")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    values: dict[str, object] = {}
    if args.config:
        values.update(read_flat_config(args.config))
    for key in _TRAIN_FLAGS:
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return TrainConfig.from_mapping(values)


def _seeds(args) -> list[int]:
    if args.seeds:
        try:
            seeds = [int(s) for s in _csv_list(args.seeds)]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        if args.prompts is not None and args.prompts != len(seeds):
            raise ConfigError(f"--prompts {args.prompts} disagrees with {len(seeds)} seeds")
        return seeds
    return list(range(args.prompts if args.prompts is not None else DEFAULT_BANK_SIZE))


def cmd_train(args) -> int:
    cfg = _train_config(args)
    seeds = _seeds(args)
    encoder = _encoder(args.backend)
    spec = _dataset(args, encoder)
    pseudo_path = args.pseudo_labels or _out(args, PSEUDO_FILE)
    if not os.path.exists(pseudo_path):
        raise ConfigError(f"pseudo-label file {pseudo_path} not found; run pseudo-label first")
    pseudo = PseudoLabelSet.load(pseudo_path)
    if pseudo.num_classes != spec.num_classes:
        raise InputError(f"pseudo labels cover {pseudo.num_classes} classes, dataset has {spec.num_classes}")
    cache = _ensure_cache(args, spec, "train", encoder)

    digest_before = encoder.parameter_digest()
    results = train_prompt_bank(seeds, pseudo, cache, encoder, spec.class_names, cfg,
                                length=args.length, cls_position=args.cls_position, jobs=args.jobs)
    digest_after = encoder.parameter_digest()
    if digest_before != digest_after:
        raise UPLError("encoder parameters changed during training")

    prompt_dir = _out(args, "prompts")
    os.makedirs(prompt_dir, exist_ok=True)
    runs = []
    for seed, (prompt, state) in zip(seeds, results):
        path = os.path.join(prompt_dir, f"prompt-seed{seed}.upl")
        prompt.save(path)
        runs.append({"seed": seed, "prompt_file": os.path.relpath(path, args.out),
                     "prompt_sha1": file_hash(path), "loss_history": state.loss_history,
                     "lr_history": state.lr_history, "steps": state.step})
    effective = cfg.to_dict() | {"prompts": len(seeds), "length": args.length,
                                 "cls_position": args.cls_position}
    _write_json(_out(args, TRAIN_MANIFEST), {
        "command": "train",
        "dataset": spec.name,
        "backend_tag": encoder.model_tag,
        "config": effective,
        "config_sources": {"file": args.config, "precedence": "flags > file > defaults"},
        "undocumented_choices": {
            "momentum": cfg.momentum,
            "weight_decay": cfg.weight_decay,
            "cosine_period": "epochs - warmup_epochs (warmup epoch excluded)",
        },
        "seeds": seeds,
        "pseudo_labels": {"path": pseudo_path, "git_blob_sha1": file_hash(pseudo_path)},
        "encoder_digest": digest_after,
        "runs": runs,
    })
    for run in runs:
        print(f"seed {run['seed']}: final loss {run['loss_history'][-1]:.4f} -> {run['prompt_file']}")
    return EXIT_OK


def _load_prompts(args) -> list[tuple[str, PromptRepresentation]]:
    if args.prompt_files:
        paths = _csv_list(args.prompt_files)
    else:
        manifest = _out(args, TRAIN_MANIFEST)
        if not os.path.exists(manifest):
            raise ConfigError(f"{manifest} not found; run train first or pass --prompt-files")
        with open(manifest, encoding="utf-8") as fh:
            paths = [_out(args, r["prompt_file"]) for r in json.load(fh)["runs"]]
    return [(os.path.basename(p), PromptRepresentation.load(p)) for p in paths]


def _banks(args, spec, encoder):
    if getattr(args, "zeroshot", False):
        return [zeroshot_bank(encoder, spec.pseudo_prompt_template, spec.class_names)]
    return [build_class_embeddings(p, spec.class_names, encoder, prompt_id=name)
            for name, p in _load_prompts(args)]


def _run_eval(args, spec, encoder) -> EvalReport:
    cache = _ensure_cache(args, spec, "test", encoder)
    banks = _banks(args, spec, encoder)
    return evaluate(banks, cache.features(), spec.ground_truth, encoder.temperature,
                    class_names=spec.class_names, jobs=args.jobs)


def cmd_eval(args) -> int:
    encoder = _encoder(args.backend)
    spec = _dataset(args, encoder)
    report = _run_eval(args, spec, encoder)
    path = args.output or _out(args, ZEROSHOT_EVAL_FILE if args.zeroshot else EVAL_FILE)
    report.save_csv(path)
    print(report.pretty())
    label = "zero-shot" if args.zeroshot else "prompt ensemble"
    print(f"{spec.name} {label} top-1 accuracy: {100 * report.accuracy:.2f}% -> {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.report not in analysis.REPORT_NAMES:
        raise ConfigError(f"unknown report {args.report!r}; valid reports: {', '.join(analysis.REPORT_NAMES)}")
    encoder = _encoder(args.backend)
    inputs: dict[str, str] = {}

    def pseudo(path_arg, default):
        path = path_arg or _out(args, default)
        if not os.path.exists(path):
            raise ConfigError(f"{path} not found; run pseudo-label first")
        inputs[os.path.basename(path)] = path
        return PseudoLabelSet.load(path)

    def train_truth(spec):
        gt = spec.labels_for("train")
        if not gt:
            raise ConfigError(f"{spec.name} has no train-split ground truth for this report")
        return gt

    name = args.report
    if name == "nearest-words":
        prompts = _load_prompts(args)
        pairs = analysis.nearest_words(prompts[0][1], encoder.vocabulary)
        table = analysis.nearest_words_table(pairs)
        inputs[prompts[0][0]] = args.prompt_files.split(",")[0] if args.prompt_files else _out(args, "prompts", prompts[0][0])
    else:
        spec = _dataset(args, encoder)
        if name == "per-class-curves":
            table = analysis.per_class_curves(pseudo(args.pseudo_labels, PSEUDO_FILE), train_truth(spec))
        elif name == "confidence-accuracy":
            table = analysis.confidence_accuracy_table(
                pseudo(args.assignments, ASSIGN_FILE).records, train_truth(spec), bins=args.bins)
        elif name == "model-gap":
            sets = {}
            for path in sorted(glob.glob(_out(args, "pseudo_labels.*.jsonl"))):
                s = pseudo(path, None)
                sets[s.records[0].source_tag if s.records else path] = s
            if args.baseline is None:
                raise ConfigError("--baseline is required for the model-gap report")
            table = analysis.model_gap_report(sets, train_truth(spec), args.baseline)
        elif name == "transfer-improvement":
            upl_path = args.upl_eval or _out(args, EVAL_FILE)
            zs_path = args.zeroshot_eval or _out(args, ZEROSHOT_EVAL_FILE)
            for p in (upl_path, zs_path):
                if not os.path.exists(p):
                    raise ConfigError(f"{p} not found; run eval (with and without --zeroshot) first")
                inputs[os.path.basename(p)] = p
            stats = None
            pseudo_path = args.pseudo_labels or _out(args, PSEUDO_FILE)
            if os.path.exists(pseudo_path) and spec.labels_for("train"):
                stats = pseudo_label_stats(pseudo(pseudo_path, None), spec.labels_for("train"))
            table = analysis.transfer_improvement_report(
                EvalReport.load_csv(upl_path), EvalReport.load_csv(zs_path), stats)
        else:  # prediction-records
            table = analysis.prediction_records(_run_eval(args, spec, encoder))

    rdir = analysis.report_dir(args.out, args.run_id)
    os.makedirs(rdir, exist_ok=True)
    csv_path = os.path.join(rdir, f"{name}.csv")
    table.save(csv_path)
    analysis.write_run_manifest(
        os.path.join(rdir, f"{name}.manifest.json"),
        command=f"analyze --report {name}",
        config={k: v for k, v in sorted(vars(args).items()) if k != "func"},
        backend_tags=[encoder.model_tag],
        inputs=inputs,
    )
    print(table.pretty())
    print(f"-> {csv_path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults for every option unless the help text already states one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, argparse.SUPPRESS, False) or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)".strip()


def _common(p: argparse.ArgumentParser, dataset=True) -> None:
    if dataset:
        p.add_argument("--dataset", required=True,
                       help="registered dataset name, or toy-separable / toy-ambiguous")
    p.add_argument("--backend", default=DEFAULT_BACKEND,
                   help='encoder registry key, e.g. "clip:RN50" or "toy:2"')
    p.add_argument("--data-root", default=None,
                   help=f"dataset root (falls back to ${data.DATA_ROOT_ENV})")
    p.add_argument("--out", default="upl-run", help="output directory for this run")
    p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel steps")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="upl", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--log-level", default="WARNING", help="python logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cache-features", help="encode images once into a feature cache", formatter_class=fmt)
    _common(p)
    p.add_argument("--split", choices=("train", "test", "both"), default="both", help="split(s) to encode")
    p.set_defaults(func=cmd_cache_features)

    p = sub.add_parser("pseudo-label", help="zero-shot pseudo labels plus selection", formatter_class=fmt)
    _common(p)
    p.add_argument("--strategy", default=f"top_k:{DEFAULT_K}", help="top_k:<K> or threshold:<t>")
    p.add_argument("--backends", default=None,
                   help="comma-separated backends whose probabilities are averaged (default: --backend)")
    p.add_argument("--max-unlabeled", type=int, default=None,
                   help="cap on unlabeled train images (deterministic subsample)")
    p.set_defaults(func=cmd_pseudo_label)

    defaults = TrainConfig()
    p = sub.add_parser("train", help="learn prompt representations on pseudo labels", formatter_class=fmt)
    _common(p)
    p.add_argument("--pseudo-labels", default=None, help=f"pseudo-label file (default: <out>/{PSEUDO_FILE})")
    p.add_argument("--prompts", type=int, default=argparse.SUPPRESS,
                   help=f"number of prompt representations N (default: {DEFAULT_BANK_SIZE})")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: 0..N-1)")
    p.add_argument("--config", default=None, help="flat key = value training config file")
    p.add_argument("--cls-position", choices=CLS_POSITIONS, default="end", help="where the class token goes")
    p.add_argument("--length", type=int, default=DEFAULT_LENGTH, help="context length L")
    p.add_argument("--epochs", type=int, default=argparse.SUPPRESS, help=f"(default: {defaults.epochs})")
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS, help=f"(default: {defaults.batch_size})")
    p.add_argument("--lr", type=float, default=argparse.SUPPRESS, help=f"(default: {defaults.lr})")
    p.add_argument("--warmup-lr", type=float, default=argparse.SUPPRESS, help=f"(default: {defaults.warmup_lr})")
    p.add_argument("--warmup-epochs", type=int, default=argparse.SUPPRESS,
                   help=f"(default: {defaults.warmup_epochs})")
    p.add_argument("--schedule", default=argparse.SUPPRESS, help=f"(default: {defaults.schedule})")
    p.add_argument("--momentum", type=float, default=argparse.SUPPRESS, help=f"(default: {defaults.momentum})")
    p.add_argument("--weight-decay", type=float, default=argparse.SUPPRESS,
                   help=f"(default: {defaults.weight_decay})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a prompt ensemble or the zero-shot baseline",
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--zeroshot", action="store_true", help="evaluate the hand-crafted template instead")
    p.add_argument("--prompt-files", default=None,
                   help=f"comma-separated prompt files (default: those listed in <out>/{TRAIN_MANIFEST})")
    p.add_argument("--output", default=None, help="CSV path (default: <out>/eval.csv or eval_zeroshot.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="diagnostic reports", formatter_class=fmt)
    _common(p, dataset=False)
    p.add_argument("--report", required=True, help=f"one of: {', '.join(analysis.REPORT_NAMES)}")
    p.add_argument("--dataset", default=None, help="dataset name (needed by all but nearest-words)")
    p.add_argument("--run-id", default="default", help="reports go to <out>/reports/<run-id>/")
    p.add_argument("--pseudo-labels", default=None)
    p.add_argument("--assignments", default=None, help=f"all zero-shot assignments (default: <out>/{ASSIGN_FILE})")
    p.add_argument("--baseline", default=None, help="baseline model tag for model-gap")
    p.add_argument("--upl-eval", default=None)
    p.add_argument("--zeroshot-eval", default=None)
    p.add_argument("--prompt-files", default=None)
    p.add_argument("--bins", type=int, default=10, help="confidence bins")
    p.add_argument("--zeroshot", action="store_true", help="prediction-records for the zero-shot baseline")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key in ("prompts", *_TRAIN_FLAGS):
        if not hasattr(args, key):
            setattr(args, key, None)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "analyze" and args.report != "nearest-words" and args.dataset is None \
            and args.report in analysis.REPORT_NAMES:
        print("error: --dataset is required for this report", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except EmptySelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UPLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - last-resort handler for the exit-code contract
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
