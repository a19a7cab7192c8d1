"""Command-line entry point.

Results go to files or stdout; progress and errors go to stderr. Every
subcommand accepts ``--config PATH`` holding a JSON object whose keys are
flag names (dashes or underscores); explicit flags win over file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, generate_synthetic, load_dataset, normalize_kind, save_dataset
from .errors import FusebedError
from .experiments import (
    REFERENCE_LR_MAX,
    build_vocab,
    compare,
    degradation_experiment,
    model_config_for,
    reference_synth_config,
)
from .model import MODES, HybridRetriever, ModelConfig
from .retrieval import EvalReport, build_index, evaluate_model, rank_items
from .training import AugmentConfig, TrainConfig, init_state, train_epoch

log = logging.getLogger("fusebed")

CHECKPOINT_NAME = "model.ckpt"
BEST_NAME = "best.ckpt"


class CliError(Exception):
    """Invalid configuration detected by the CLI itself (exit code 1)."""


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON object of flag values")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--metadata", choices=["cs", "os", "fs", "none", "CS", "OS", "FS"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-max", type=float)
    p.add_argument("--lr-min", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--separate-text-encoder", action="store_true", default=None)
    p.add_argument("--no-augment", action="store_true", default=None)
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mask-missing-metadata", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusebed", description="hybrid audio/metadata retrieval")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--topics", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--caption-from-tags", action="store_true", default=None)
    p.add_argument("-o", "--out", required=False)

    p = sub.add_parser("train", help="train a model and write checkpoints + per-epoch metrics")
    _add_common(p)
    p.add_argument("--data")
    _add_train_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="evaluate checkpoints (or untrained models) on a split")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", nargs="*")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--metadata")
    p.add_argument("--split")
    p.add_argument("--k", type=int)
    p.add_argument("--seeds", type=int, help="untrained models with seeds 0..N-1")
    p.add_argument("--mask-missing-metadata", action="store_true", default=None,
                   help="score items with empty metadata on audio alone")
    p.add_argument("--out")

    p = sub.add_parser("rank", help="top-K items for a query (in-process or via --url)")
    _add_common(p)
    p.add_argument("--query")
    p.add_argument("--k", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--metadata")
    p.add_argument("--split")
    p.add_argument("--url", help="base URL of a running service")

    p = sub.add_parser("compare", help="all retrieval modes over shared seeds, with map@10 deltas")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default: reference synthetic config)")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--modes", nargs="+", choices=MODES)
    p.add_argument("--out")

    p = sub.add_parser("degrade", help="caption-from-tags training vs natural-caption test")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--out")

    p = sub.add_parser("serve", help="HTTP ranking service")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--metadata")
    p.add_argument("--split")
    p.add_argument("--port", type=int)
    p.add_argument("--host")
    parser.subcommands = sub.choices
    return parser


DEFAULTS = {
    "gen-data": {"seed": 0, "out": "data"},
    "train": {"out": "run", "metadata": "os", "mode": "late"},
    "evaluate": {"metadata": "os", "split": "test", "k": 10, "seeds": 3, "mode": "content"},
    "rank": {"k": 10, "metadata": "os", "split": "test"},
    "compare": {"seeds": 3, "metadata": "os", "modes": list(MODES)},
    "degrade": {"seeds": 3, "metadata": "os"},
    "serve": {"metadata": "os", "split": "test", "port": 8750, "host": "127.0.0.1"},
}


def _coerce(sub: argparse.ArgumentParser, dest: str, value: object) -> object:
    for action in sub._actions:
        if action.dest != dest:
            continue
        try:
            if action.nargs in ("*", "+") and isinstance(value, list):
                value = [action.type(v) if action.type else v for v in value]
            elif action.type is not None:
                value = action.type(value)
        except (TypeError, ValueError) as exc:
            raise CliError(f"config: invalid value for {dest!r}: {value!r}") from exc
        if action.choices is not None:
            for v in value if isinstance(value, list) else [value]:
                if v not in action.choices:
                    raise CliError(f"config: {dest!r} must be one of {list(action.choices)}")
    return value


def _merge_config(args: argparse.Namespace, sub: argparse.ArgumentParser) -> argparse.Namespace:
    values = dict(DEFAULTS.get(args.command, {}))
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"config: cannot read {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError("config: file must hold a JSON object")
        for key, value in loaded.items():
            dest = key.replace("-", "_")
            if dest not in vars(args) or dest in ("command", "config"):
                raise CliError(f"config: unknown field {key!r} for {args.command}")
            values[dest] = _coerce(sub, dest, value)
    for key, value in vars(args).items():
        if value is not None:
            values[key] = value
    merged = argparse.Namespace(**{k: None for k in vars(args)})
    for key, value in values.items():
        setattr(merged, key, value)
    return merged


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) in (None, ""):
            raise CliError(f"{name.replace('_', '-')}: required")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig(lr_max=REFERENCE_LR_MAX)
    mapping = {
        "mode": "mode", "seed": "seed", "epochs": "epochs", "warmup_epochs": "warmup_epochs",
        "batch_size": "batch_size", "lr_max": "lr_max", "lr_min": "lr_min",
        "temperature": "temperature",
    }
    updates = {dst: getattr(args, src) for src, dst in mapping.items() if getattr(args, src, None) is not None}
    if getattr(args, "metadata", None):
        updates["metadata"] = normalize_kind(args.metadata)
    if getattr(args, "separate_text_encoder", None):
        updates["shared_text_encoder"] = False
    if getattr(args, "no_augment", None):
        updates["augment"] = AugmentConfig(enabled=False)
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def _model_base(args: argparse.Namespace) -> ModelConfig:
    base = ModelConfig()
    updates = {}
    for src, dst in (("d", "d"), ("layers", "n_layers"), ("heads", "n_heads")):
        if getattr(args, src, None) is not None:
            updates[dst] = getattr(args, src)
            if dst == "n_layers":
                updates["fusion_layers"] = getattr(args, src)
    if getattr(args, "mask_missing_metadata", None):
        updates["mask_missing_metadata"] = True
    return replace(base, **updates)


def _emit_report(report: EvalReport, out: str | None, labels: dict[str, str] | None = None) -> None:
    table = report.table(labels)
    sys.stdout.write(table)
    if out:
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        report.write_records(out_path)
        out_path.with_suffix(".txt").write_text(table, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = SynthConfig()
    for src, dst in (("seed", "seed"), ("items", "n_items"), ("topics", "n_topics"), ("rho", "rho"),
                     ("test_fraction", "test_fraction"), ("caption_from_tags", "caption_from_tags")):
        if getattr(args, src) is not None:
            setattr(cfg, dst, getattr(args, src))
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    (out / "synth.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d items to %s", len(ds), out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "data")
    cfg = _train_config(args)
    ds = load_dataset(args.data, cfg.metadata)
    vocab = build_vocab(ds, cfg.metadata)
    model = HybridRetriever(model_config_for(cfg, ds.items[0].frames.shape[1], _model_base(args)), vocab, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    items = ds.split("train")
    val = ds.split("val")
    state = init_state(model, len(items), cfg)
    best = -1.0
    with (out / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        for epoch in range(cfg.epochs):
            loss = train_epoch(model, items, cfg, state)
            record = {"epoch": epoch + 1, "loss": loss, "step": state.step}
            if val:
                metrics = evaluate_model(model, val, cfg.metadata)
                record["val_map@10"] = metrics["map@10"]
                if metrics["map@10"] > best:
                    best = metrics["map@10"]
                    save_checkpoint(out / BEST_NAME, model, cfg, state.optimizer, cfg.seed,
                                    extra={"epoch": epoch + 1})
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d loss %.5f", epoch + 1, loss)
    save_checkpoint(out / CHECKPOINT_NAME, model, cfg, state.optimizer, cfg.seed, extra={"epoch": cfg.epochs})
    log.info("wrote %s", out / CHECKPOINT_NAME)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    _require(args, "data")
    kind = normalize_kind(args.metadata)
    ds = load_dataset(args.data, kind)
    items = ds.items if args.split == "all" else ds.split(args.split)
    if not items:
        raise CliError(f"split: {args.split!r} is empty")
    report = EvalReport(k=args.k)
    if args.checkpoint:
        for path in args.checkpoint:
            model, header, _ = load_checkpoint(path)
            if args.mask_missing_metadata:
                model.config = replace(model.config, mask_missing_metadata=True)
            report.add(model.mode, header["seed"], evaluate_model(model, items, kind, args.k))
    else:
        vocab = build_vocab(ds, kind)
        width = ds.items[0].frames.shape[1]
        for seed in range(args.seeds):
            cfg = ModelConfig(mode=args.mode, frame_width=width,
                              mask_missing_metadata=bool(args.mask_missing_metadata))
            model = HybridRetriever(cfg, vocab, seed)
            report.add(args.mode, seed, evaluate_model(model, items, kind, args.k))
    _emit_report(report, args.out)
    return 0


def cmd_rank(args: argparse.Namespace) -> int:
    _require(args, "query")
    if args.k < 1:
        raise CliError("k: must be at least 1")
    if args.url:
        import httpx

        resp = httpx.post(args.url.rstrip("/") + "/rank", json={"query": args.query, "k": args.k}, timeout=60)
        if resp.status_code != 200:
            raise CliError(f"url: service answered {resp.status_code}: {resp.text}")
        results = [(r["id"], r["score"]) for r in resp.json()["results"]]
    else:
        _require(args, "checkpoint", "data")
        kind = normalize_kind(args.metadata)
        model, _, _ = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.data, kind)
        items = ds.items if args.split == "all" else ds.split(args.split)
        results = rank_items(build_index(items, model, kind), args.query, model, args.k)
    for rank, (item_id, score) in enumerate(results, start=1):
        sys.stdout.write(f"{rank}\t{item_id}\t{score:.6f}\n")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data, cfg.metadata) if args.data else generate_synthetic(reference_synth_config())
    report = compare(ds, seeds=tuple(range(args.seeds)), base_cfg=cfg, model_base=_model_base(args),
                     modes=args.modes)
    _emit_report(report, args.out)
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    report = degradation_experiment(seeds=tuple(range(args.seeds)), base_cfg=cfg, model_base=_model_base(args))
    _emit_report(report, args.out)
    d = report.delta("tags")
    log.info("tags minus none map@10: %+.4f (%s)", d, "hybrid degrades" if d < 0 else "no degradation")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "data")
    from .service.app import serve

    serve(args.checkpoint, args.data, args.mode, args.port, normalize_kind(args.metadata), args.split, args.host)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rank": cmd_rank,
    "compare": cmd_compare,
    "degrade": cmd_degrade,
    "serve": cmd_serve,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](_merge_config(args, parser.subcommands[args.command]))
    except (CliError, FusebedError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
