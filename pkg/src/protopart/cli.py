"""Command-line entry point: train / evaluate / explain / audit / serve / synth.

Configuration comes from an optional JSON file with {"model", "train",
"loss"} sections; individual flags and --set section.key=value overrides win
over the file. Every train run writes its fully resolved config into the run
directory so the run can be reproduced from that file alone.

Exit codes: 0 success, 1 bad input/configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .data import (generate_synthetic, load_manifest, load_valid_set, load_image)
from .errors import ConfigurationError, ProtoPartError, ValidationError
from .losses import LossWeights
from .model import ModelConfig, ProtoPartNet, load_checkpoint, checkpoint_digest
from .trainer import TrainConfig, Trainer


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_set_override(spec: str):
    if "=" not in spec or "." not in spec.split("=", 1)[0]:
        raise ValidationError(f"--set expects section.key=value, got {spec!r}")
    key, raw = spec.split("=", 1)
    section, field = key.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, field, value


def _resolve_configs(config_path, set_overrides, flag_overrides):
    sections = {"model": {}, "train": {}, "loss": {}}
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        for name in sections:
            sections[name].update(doc.get(name, {}))
    for spec in set_overrides or []:
        section, field, value = _parse_set_override(spec)
        if section not in sections:
            raise ValidationError(f"--set section must be one of {sorted(sections)}, got {section!r}")
        sections[section][field] = value
    for (section, field), value in (flag_overrides or {}).items():
        if value is not None:
            sections[section][field] = value
    known = {
        "model": {f.name for f in dataclasses.fields(ModelConfig)},
        "train": {f.name for f in dataclasses.fields(TrainConfig)},
        "loss": {f.name for f in dataclasses.fields(LossWeights)},
    }
    for name, body in sections.items():
        unknown = set(body) - known[name]
        if unknown:
            raise ValidationError(f"unknown {name} config key(s): {sorted(unknown)}")
    model_cfg = ModelConfig.from_dict(sections["model"])
    train_cfg = TrainConfig.from_dict(sections["train"])
    weights = LossWeights(**sections["loss"])
    return model_cfg, train_cfg, weights


def _attach_masks_dir(manifest, masks_dir):
    masks_dir = Path(masks_dir)
    missing = []
    for rec in manifest:
        if rec.mask_path is None:
            stem = Path(rec.image_id).stem
            for ext in (".png", ".jpg", ".jpeg", ".bmp"):
                candidate = masks_dir / f"{stem}{ext}"
                if candidate.exists():
                    rec.mask_path = candidate
                    break
            else:
                missing.append(rec.image_id)
    if missing:
        raise ValidationError(
            f"--masks {masks_dir}: no mask found for {len(missing)} image(s), "
            f"first: {missing[:3]}")


def _cmd_train(args) -> int:
    flag_overrides = {
        ("train", "seed"): args.seed,
        ("train", "epochs"): args.epochs,
        ("train", "batch_size"): args.batch_size,
        ("train", "mode"): args.mode,
        ("train", "mask_polarity"): args.mask_polarity,
    }
    model_cfg, train_cfg, weights = _resolve_configs(args.config, args.set, flag_overrides)
    manifest = load_manifest(args.data)
    if len(manifest) == 0:
        raise ValidationError(f"{args.data}: training manifest is empty")
    val_manifest = load_manifest(args.val_data) if args.val_data else None

    if train_cfg.mode == "lp+lm":
        if args.masks:
            _attach_masks_dir(manifest, args.masks)
        if any(r.mask_path is None for r in manifest):
            raise ValidationError(
                "mode lp+lm needs lesion masks: add a mask column to the manifest "
                "or pass --masks DIR")
    valid_set = None
    if train_cfg.mode == "lp+lr":
        if not args.valid_set:
            raise ValidationError("mode lp+lr needs --valid-set FILE (exported by the review UI)")
        valid_set = load_valid_set(args.valid_set, image_size=model_cfg.image_size,
                                   num_classes=model_cfg.num_classes)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = ProtoPartNet(model_cfg, rng=np.random.default_rng(train_cfg.seed))
    trainer = Trainer(model, manifest, train_cfg, weights, run_dir,
                      val_manifest=val_manifest, valid_set=valid_set)
    resolved = {
        "model": model.config.to_dict(),
        "train": train_cfg.to_dict(),
        "loss": dataclasses.asdict(weights),
        "paths": {"data": str(args.data), "val_data": args.val_data,
                  "valid_set": args.valid_set, "masks": args.masks},
        "backend": kernels.active_backend(),
        "version": __version__,
    }
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True))
    summary = trainer.train()
    print(f"best validation BA: {summary['best_ba']:.2f}")
    print(f"run dir: {summary['run_dir']}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_checkpoint

    manifest = load_manifest(args.data)
    report = evaluate_checkpoint(args.ckpt, manifest)
    print(report.table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        print(f"report written to {args.out}")
    return 0


def _cmd_explain(args) -> int:
    from .evaluation import explain, render_explanation

    model, sources, meta = load_checkpoint(args.ckpt)
    image = load_image(args.image, model.config.image_size)
    expl = explain(model, sources, image, str(args.image), args.top)
    if args.out:
        Path(args.out).write_text(json.dumps(expl.to_dict(), indent=1, sort_keys=True))
    if args.render:
        manifest_path = args.data or meta.get("train_manifest")
        if not manifest_path:
            raise ValidationError("--render needs --data to locate prototype source images")
        by_id = load_manifest(manifest_path).by_id()

        def lookup(image_id):
            return load_image(by_id[image_id].path, model.config.image_size)

        render_explanation(expl, model, image, lookup, args.render)
    pred = expl.predicted_class
    print(f"predicted class {pred}, logits {np.round(expl.logits, 4).tolist()}")
    for e in expl.entries:
        print(f"  p{e.proto_id} class={e.class_id} sim={e.similarity:.4f} "
              f"w={e.weight:+.3f} points={e.points:+.4f}")
    return 0


def _cmd_audit(args) -> int:
    from .evaluation import audit_prototypes

    model, sources, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    audit = audit_prototypes(model, sources, manifest, boundary_px=args.boundary_px,
                             mask_polarity=args.mask_polarity)
    frac = audit.fraction_inside
    print(f"prototypes inside lesion (tolerance {args.boundary_px}px): "
          f"{frac if frac == frac else float('nan'):.3f}")
    for cls, val in audit.per_class_fraction(model.config.num_classes).items():
        print(f"  class {cls}: {val:.3f}" if val == val else f"  class {cls}: n/a")
    if args.out:
        Path(args.out).write_text(json.dumps(audit.to_dict(), indent=1, sort_keys=True))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .review import build_app, default_static_dir

    run_dir = Path(args.run_dir) if args.run_dir else Path(args.ckpt).parent
    app = build_app(args.ckpt, run_dir, manifest_path=args.data,
                    static_dir=args.static or default_static_dir())
    print(f"serving prototype review on http://{args.host}:{args.port} "
          f"(checkpoint {checkpoint_digest(args.ckpt)})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_synth(args) -> int:
    manifests = generate_synthetic(args.out, n_per_class=args.n, seed=args.seed,
                                   image_size=args.image_size,
                                   confound_fraction=args.confound_fraction)
    for name, path in manifests.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="protopart", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-stage training schedule")
    p.add_argument("--config", help="JSON config with model/train/loss sections")
    p.add_argument("--data", required=True, help="training manifest CSV")
    p.add_argument("--val-data", help="validation manifest (defaults to --data)")
    p.add_argument("--mode", choices=["lp", "lp+lm", "lp+lr"])
    p.add_argument("--masks", help="directory of masks matched by image stem")
    p.add_argument("--valid-set", help="valid_set.json for lp+lr")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mask-polarity", choices=["lesion-white", "lesion-black"])
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write report JSON here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("explain", help="prototype-based explanation for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--out", help="write explanation JSON here")
    p.add_argument("--render", help="write a panel PNG here")
    p.add_argument("--data", help="manifest for prototype source images (render)")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("audit", help="check prototypes sit inside their source lesions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest with masks for source images")
    p.add_argument("--boundary-px", type=int, default=8)
    p.add_argument("--mask-polarity", choices=["lesion-white", "lesion-black"],
                   default="lesion-white")
    p.add_argument("--out", help="write audit JSON here")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("serve", help="serve the prototype review UI/API")
    p.add_argument("--ckpt", required=True, help="post-projection checkpoint")
    p.add_argument("--port", type=int, default=8741)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data", help="manifest overriding the checkpoint's recorded one")
    p.add_argument("--run-dir", help="where sessions/exports live (default: ckpt dir)")
    p.add_argument("--static", help="directory with the built single-page UI")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("synth", help="generate the synthetic confound dataset")
    p.add_argument("--n", type=int, required=True, help="images per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--confound-fraction", type=float, default=0.5)
    p.set_defaults(func=_cmd_synth)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ProtoPartError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
