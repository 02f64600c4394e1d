"""Command-line entry point binding generation, training, evaluation,
inference, and alerting into reproducible commands.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every failure
prints a single line to stderr starting with ``error:``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .datagen import generate_dataset, load_dataset, load_image
from .density import DensityMap
from .model import FusionCountingModel
from .supervisor import supervise
from .tensor import Tensor
from .training import TrainConfig, evaluate, train, write_history


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"expected WxH, got {text!r}") from exc


def _parse_box(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise UsageError(f"expected WxH, got {text!r}") from exc


_CONFIG_FIELDS = {f.name: f.type for f in dataclass_fields(TrainConfig)}


def _apply_config_file(overrides: dict, path: str) -> None:
    """Flat key=value lines; unknown keys are rejected by name."""
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key '{key}'")
        current = getattr(TrainConfig(), key)
        if isinstance(current, bool):
            overrides[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            overrides[key] = int(value)
        else:
            overrides[key] = float(value)


def _build_config(args) -> TrainConfig:
    overrides: dict = {}
    if getattr(args, "config", None):
        _apply_config_file(overrides, args.config)
    for key in ("lr", "epochs", "seed", "batch_size", "sigma", "dropout_rate",
                "grad_clip_norm", "assisted_threshold"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            overrides[key] = value
    try:
        return TrainConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_model(ckpt_path: str) -> tuple[FusionCountingModel, dict]:
    arrays, meta = load_checkpoint(ckpt_path)
    seed = meta.get("config", {}).get("seed", 0)
    model = FusionCountingModel(seed=int(seed))
    restore_params(model.named_params(), arrays)
    return model, meta


def _normalized_png(path: Path, values: np.ndarray) -> None:
    from PIL import Image

    peak = values.max()
    scaled = values / peak if peak > 0 else values
    Image.fromarray((np.clip(scaled, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args) -> int:
    root = Path(args.out)
    size = _parse_size(args.size)
    test_count = args.test_count if args.test_count is not None else max(1, args.count // 4)
    generate_dataset(root, "train", count=args.count, seed=args.seed, image_size=size)
    generate_dataset(root, "test", count=test_count, seed=args.seed + 100_000,
                     image_size=size)
    (root / "genconfig.json").write_text(json.dumps({
        "count": args.count, "test_count": test_count, "seed": args.seed,
        "size": list(size)}, sort_keys=True))
    print(json.dumps({"out": str(root), "train": args.count, "test": test_count}))
    return 0


def _train_common(args, stage: int) -> int:
    config = _build_config(args)
    index = load_dataset(args.data, "train")
    init = None
    if stage == 2:
        arrays, meta = load_checkpoint(args.init)
        if meta.get("stage") != 1:
            raise UsageError(
                f"--init must point at a stage-1 checkpoint, got stage={meta.get('stage')}")
        init = arrays
    result = train(config, index, stage=stage, init_params=init)
    save_checkpoint(args.out, result.model.named_params(), meta={
        "stage": stage, "config": config.to_dict()})
    history_path = args.history or f"{args.out}.history.ndjson"
    write_history(history_path, result.history)
    final = result.history[-1]["loss_total"] if result.history else None
    print(json.dumps({"checkpoint": str(args.out), "stage": stage,
                      "epochs": config.epochs, "final_loss": final,
                      "history": str(history_path)}))
    return 0


def _cmd_train_fusion(args) -> int:
    return _train_common(args, stage=1)


def _cmd_train(args) -> int:
    return _train_common(args, stage=2)


def _cmd_eval(args) -> int:
    model, meta = _load_model(args.ckpt)
    index = load_dataset(args.data, args.split)
    report = evaluate(model, index)
    payload = report.to_dict()
    payload["config"] = meta.get("config", {})
    Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=1))
    print(json.dumps({"mae": report.mae, "rmse": report.rmse,
                      "report": str(args.report)}))
    return 0


def _cmd_infer(args) -> int:
    model, ckpt_meta = _load_model(args.ckpt)
    visible = load_image(args.pair[0])
    thermal = load_image(args.pair[1])
    if visible.shape != thermal.shape:
        raise UsageError(
            f"pair images disagree in size: {visible.shape} vs {thermal.shape}")
    fused, pred = model.infer(visible, thermal)
    full = model.predict_full_resolution(pred)
    count = float(pred.data.sum())

    density_png = Path(args.out_density)
    _normalized_png(density_png, full.data[0])
    raw_path = density_png.with_suffix(".npy")
    np.save(raw_path, full.data[0])
    _normalized_png(Path(args.out_fused),
                    (fused.data[0] - fused.data[0].min())
                    / max(float(np.ptp(fused.data[0])), 1e-12))
    meta_path = density_png.with_suffix(".meta.json")
    meta_path.write_text(json.dumps({
        "pair": [str(args.pair[0]), str(args.pair[1])],
        "checkpoint": str(args.ckpt),
        "count": count,
        "config": ckpt_meta.get("config", {}),
    }, sort_keys=True))
    print(json.dumps({"count": count, "density": str(density_png),
                      "density_raw": str(raw_path), "fused": str(args.out_fused),
                      "meta": str(meta_path)}))
    return 0


def _cmd_supervise(args) -> int:
    values = np.load(args.density)
    if values.ndim != 2:
        raise UsageError(f"density raster must be 2-D, got shape {values.shape}")
    dm = DensityMap(values=Tensor(values[None]), sigma=0.0)
    box = _parse_box(args.box) if args.box else None
    message = supervise(dm, p_d=args.pd, box_size=box, stride=args.stride,
                        image_id=args.image_id)
    line = message.to_json()
    if args.out:
        Path(args.out).write_text(line + "\n")
    print(line)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="fusecount")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", default="64x64")
    p.add_argument("--test-count", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--history", default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--dropout-rate", type=float, default=None)
        p.add_argument("--grad-clip-norm", type=float, default=None)
        p.add_argument("--assisted-threshold", type=float, default=None)

    p = sub.add_parser("train-fusion", help="stage-1 fusion pre-training")
    add_train_flags(p)
    p.set_defaults(func=_cmd_train_fusion)

    p = sub.add_parser("train", help="stage-2 unified training")
    add_train_flags(p)
    p.add_argument("--init", required=True, help="stage-1 checkpoint")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="MAE/RMSE report over a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="fuse a pair and predict its density map")
    p.add_argument("--pair", nargs=2, metavar=("VISIBLE", "THERMAL"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-density", required=True)
    p.add_argument("--out-fused", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("supervise", help="raise or withhold a dense-area alert")
    p.add_argument("--density", required=True, help="raw .npy density raster")
    p.add_argument("--pd", type=float, required=True)
    p.add_argument("--box", default=None, help="WxH in map pixels")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--image-id", default="")
    p.set_defaults(func=_cmd_supervise)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary reporting
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
