"""Operator entry point.

Subcommands: generate | train | evaluate | ablate | export-attention.
Exit codes: 0 success, 1 internal error, 2 bad input or configuration.
Every output artifact embeds the fully resolved configuration and the
SHA-256 digests of its input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .data import (
    COVERART_FILE,
    DAY,
    INTERACTIONS_FILE,
    METADATA_FILE,
    USERS_FILE,
    WORDVEC_FILE,
    IngestError,
    SyntheticSpec,
    generate_synthetic,
    ingest,
)
from .evaluation import EvalConfig, SplitConfig
from .item_tower import ATTENTION, CONCATENATION, FusionMode
from .pipeline import (
    ABLATION_ROWS,
    attention_histograms,
    build_training_data,
    evaluate_model,
    run_ablation,
    train_model,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DATA_FILES = (
    INTERACTIONS_FILE,
    METADATA_FILE,
    USERS_FILE,
    WORDVEC_FILE,
    COVERART_FILE,
)


class BadInputError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise BadInputError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise BadInputError(f"{p}: malformed config JSON ({exc.msg})") from None


def _split_config(cfg: dict) -> SplitConfig:
    if "split" in cfg:
        return SplitConfig.from_dict(cfg["split"])
    if "split_days" in cfg:
        d = cfg["split_days"]
        return SplitConfig(
            **{k: (int(v[0]) * DAY, int(v[1]) * DAY) for k, v in d.items()}
        )
    return SplitConfig()


def _train_config(cfg: dict, args) -> TrainConfig:
    fields = dict(cfg.get("train", {}))
    if getattr(args, "seed", None) is not None:
        fields["seed"] = args.seed
    try:
        return TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise BadInputError(f"bad train config: {exc}") from None


def _eval_config(cfg: dict) -> EvalConfig:
    fields = dict(cfg.get("eval", {}))
    if "categories" in fields:
        fields["categories"] = tuple(fields["categories"])
    return EvalConfig(**fields)


def _fusion_mode(cfg: dict, args) -> FusionMode:
    d = dict(cfg.get("fusion", {}))
    fusion = d.get("fusion", ATTENTION)
    channels = list(d.get("channels", ["id", "categorical", "synopsis", "coverart"]))
    if getattr(args, "fusion", None):
        fusion = {"att": ATTENTION, "con": CONCATENATION}[args.fusion]
    if getattr(args, "channels", None):
        channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    if getattr(args, "with_id", None) is not None:
        want = args.with_id == "true"
        if want and "id" not in channels:
            channels.append("id")
        if not want and "id" in channels:
            channels.remove("id")
    try:
        return FusionMode(fusion=fusion, channels=tuple(channels))
    except ValueError as exc:
        raise BadInputError(str(exc)) from None


def _data_dir(cfg: dict, args) -> Path:
    raw = getattr(args, "data", None) or cfg.get("data_dir")
    if raw is None:
        raise BadInputError("no data directory: pass --data or set data_dir in config")
    d = Path(raw)
    for name in DATA_FILES:
        if not (d / name).exists():
            raise BadInputError(f"missing data file: {d / name}")
    return d


def _input_digests(data_dir: Path) -> dict[str, str]:
    out = {}
    for name in DATA_FILES:
        p = data_dir / name
        if p.exists():
            out[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _write_artifact(path: Path, payload: dict, resolved: dict, digests: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload["resolved_config"] = resolved
    payload["input_digests"] = digests
    path.write_text(json.dumps(payload, indent=2))


def _resolved(train_cfg, split_cfg, eval_cfg, mode: FusionMode | None) -> dict:
    out = {
        "train": train_cfg.to_dict(),
        "split": split_cfg.to_dict(),
        "eval": dataclasses.asdict(eval_cfg),
    }
    if mode is not None:
        out["fusion"] = mode.to_dict()
    return out


# --------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    fields = dict(cfg.get("synthetic", {}))
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SyntheticSpec(**fields)
    except TypeError as exc:
        raise BadInputError(f"bad synthetic spec: {exc}") from None
    manifest = generate_synthetic(spec, args.out)
    print(
        f"generated {manifest['n_interactions']} interactions "
        f"(density {manifest['density']:.6g}) in {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    data_dir = _data_dir(cfg, args)
    train_cfg = _train_config(cfg, args)
    split_cfg = _split_config(cfg)
    eval_cfg = _eval_config(cfg)
    mode = _fusion_mode(cfg, args)
    dataset, report = ingest(data_dir)
    model, losses, _ = train_model(dataset, split_cfg, train_cfg, mode)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.ttwr"
    save_checkpoint(model, ckpt)
    _write_artifact(
        out / "loss_trace.json",
        {
            "epoch_mean_loss": losses,
            "checkpoint": str(ckpt),
            "dropped_interactions": report.dropped_interactions_unknown_item
            + report.dropped_interactions_unknown_user,
        },
        _resolved(train_cfg, split_cfg, eval_cfg, mode),
        _input_digests(data_dir),
    )
    print(f"wrote {ckpt} (final epoch loss {losses[-1]:.6f})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    data_dir = _data_dir(cfg, args)
    split_cfg = _split_config(cfg)
    eval_cfg = _eval_config(cfg)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise BadInputError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    dataset, _ = ingest(data_dir)
    data = build_training_data(dataset, split_cfg, model.config)
    if data.schema_hash != model.schema_hash:
        raise BadInputError(
            "schema hash mismatch: checkpoint was trained against "
            f"{model.schema_hash}, dataset encodes to {data.schema_hash}"
        )

    baseline_seed = (
        (args.seed if args.seed is not None else model.config.seed)
        if args.baseline == "random"
        else None
    )
    report, baseline = evaluate_model(
        model, dataset, split_cfg, eval_cfg, data, mode=args.mode,
        baseline_seed=baseline_seed,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(model.config, split_cfg, eval_cfg, model.mode)
    digests = _input_digests(data_dir)
    _write_artifact(out / f"report_{args.mode}.json", report.to_dict(), resolved,
                    digests)
    (out / f"report_{args.mode}.txt").write_text(report.to_text_table() + "\n")
    if baseline is not None:
        _write_artifact(out / f"baseline_{args.mode}.json", baseline.to_dict(),
                        resolved, digests)

    empty = all(
        m.n_users_averaged == 0 for m in report.per_category.values()
    ) and all(not report.per_category[c].coverage for c in report.per_category)
    if args.mode == "cold" and empty:
        print("cold evaluation: no cold-start items in this dataset (empty report)")
    else:
        print(report.to_text_table())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    data_dir = _data_dir(cfg, args)
    train_cfg = _train_config(cfg, args)
    split_cfg = _split_config(cfg)
    eval_cfg = _eval_config(cfg)
    ab = cfg.get("ablation", {})
    rows = ab.get("rows", list(ABLATION_ROWS))
    baseline_row = ab.get("baseline_row", "synopsis")
    dataset, _ = ingest(data_dir)
    grid = run_ablation(
        dataset, split_cfg, eval_cfg, train_cfg,
        rows=rows, baseline_row=baseline_row, mode=args.mode,
    )
    out = Path(args.out)
    _write_artifact(out / "ablation.json", grid,
                    _resolved(train_cfg, split_cfg, eval_cfg, None),
                    _input_digests(data_dir))
    print(f"wrote {out / 'ablation.json'} ({len(grid['rows'])} rows)")
    return 0


def cmd_export_attention(args) -> int:
    cfg = _load_config(args.config)
    data_dir = _data_dir(cfg, args)
    split_cfg = _split_config(cfg)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise BadInputError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    if model.mode.fusion != ATTENTION:
        raise BadInputError(
            "attention export requires an attention-mode checkpoint; this one "
            "uses concatenation"
        )
    dataset, _ = ingest(data_dir)
    data = build_training_data(dataset, split_cfg, model.config)
    if data.schema_hash != model.schema_hash:
        raise BadInputError(
            "schema hash mismatch: checkpoint was trained against "
            f"{model.schema_hash}, dataset encodes to {data.schema_hash}"
        )
    hist = attention_histograms(model, dataset, data)
    out = Path(args.out)
    _write_artifact(out / "attention_hist.json", hist,
                    _resolved(model.config, split_cfg, EvalConfig(), model.mode),
                    _input_digests(data_dir))
    print(f"wrote {out / 'attention_hist.json'}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twintower",
        description="Two-tower video recommender with attention metadata fusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", default=None, help="dataset directory")
        p.add_argument("--out", default="out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--fusion", choices=["att", "con"], default=None)
    p.add_argument("--channels", default=None,
                   help="comma-separated channel subset")
    p.add_argument("--with-id", dest="with_id", choices=["true", "false"],
                   default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint and write reports")
    common(p, checkpoint=True)
    p.add_argument("--mode", choices=["warm", "cold"], default="warm")
    p.add_argument("--baseline", choices=["random"], default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate a fusion-mode grid")
    common(p)
    p.add_argument("--mode", choices=["warm", "cold"], default="warm")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attention",
                       help="export attention-weight histograms")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BadInputError, IngestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal failure
        log.exception("internal error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
