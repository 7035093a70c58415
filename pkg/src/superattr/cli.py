"""Command-line surface: train, eval, map-superclass, gradcheck, synth."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import Split, write_annotations
from .fixtures import SynthSpec, save_fixture, synth_fixture
from .hierarchy import (
    AttributeHierarchy,
    centroids_from_reference,
    exclude_indices,
    map_by_similarity,
    mapping_accuracy,
)
from .trainer import evaluate, gradcheck, load_dataset, train


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="config.json path")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", type=Path, default=Path("runs/out"), help="output directory")


def _load_cfg(args) -> RunConfig:
    if not args.config:
        raise SystemExit("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    checkpoint_dir, _ = train(cfg, args.out_dir)
    print(f"checkpoint written to {checkpoint_dir}")
    print(f"training log: {Path(args.out_dir) / 'training_log.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    report = evaluate(cfg, args.checkpoint, args.out_dir)
    def fmt(v):
        return "undefined" if v is None else f"{v:.4f}"
    print(f"ap_base={fmt(report.ap_base)} ap_novel={fmt(report.ap_novel)} ap_all={fmt(report.ap_all)}")
    print(f"report written to {Path(args.out_dir) / 'report.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    report = gradcheck(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "gradcheck.json").write_text(json.dumps(report.to_json_dict(), indent=1))
    status = "PASS" if report.passed else "FAIL"
    print(
        f"{status}: max rel err {report.max_rel_err:.3e} (tolerance {report.tolerance:.0e}, "
        f"worst {report.worst_param}, {report.runtime_s:.1f}s)"
    )
    return 0 if report.passed else 1


def cmd_map_superclass(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    hierarchy = ds.hierarchy
    if args.centroids == "reference":
        centroids = centroids_from_reference(ds.fixture.attr_text_emb, hierarchy.delta)
    else:
        centroids = ds.fixture.super_text_emb
    predicted = map_by_similarity(ds.fixture.attr_text_emb, centroids)
    excl = exclude_indices(hierarchy, ["other"])
    acc = mapping_accuracy(predicted, hierarchy.delta, exclude=excl)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    predicted_h = AttributeHierarchy(
        attributes=hierarchy.attributes,
        super_classes=hierarchy.super_classes,
        delta=predicted,
        object_categories=hierarchy.object_categories,
    )
    predicted_h.save(out_dir / "predicted_hierarchy.json")
    (out_dir / "mapping_accuracy.json").write_text(
        json.dumps({"accuracy": acc, "excluded_super_classes": ["other"]}, indent=1)
    )
    print(f"mapping accuracy vs reference (excluding dummy group): {acc:.4f}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed if args.seed is not None else 0,
        n_attrs=args.n_attrs,
        n_super=args.n_super,
        n_objects=args.n_objects,
        n_instances=args.train_instances + args.eval_instances,
        n_novel=args.n_novel,
        d_q=args.d_q,
        d_v=args.d_v,
        h=args.grid,
        w=args.grid,
        n_z=args.n_z,
        noise=args.noise,
    )
    result = synth_fixture(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_fixture(result.fixture, out / "fixture")
    result.hierarchy.save(out / "hierarchy.json")
    n_train = args.train_instances
    write_annotations(out / "train_annotations.jsonl", result.instances[:n_train])
    write_annotations(out / "eval_annotations.jsonl", result.instances[n_train:])
    split = Split.from_novel_names(result.novel_names, result.hierarchy)
    split.save(out / "split.json", result.hierarchy)

    cfg = RunConfig()
    cfg.paths.fixture = "fixture"
    cfg.paths.annotations = "train_annotations.jsonl"
    cfg.paths.eval_annotations = "eval_annotations.jsonl"
    cfg.paths.hierarchy = "hierarchy.json"
    cfg.paths.split = "split.json"
    cfg.dims.d = args.model_dim
    cfg.dims.d_ff = 2 * args.model_dim
    cfg.epochs = args.epochs
    cfg.seed = spec.seed
    cfg.save(out / "config.json")
    print(f"synthetic dataset written to {out} ({n_train} train / {args.eval_instances} eval)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="superattr",
        description="Super-class guided attribute classification over embedding fixtures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    _common_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write reports")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny config")
    _common_flags(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("map-superclass", help="similarity-based hierarchy construction")
    _common_flags(p)
    p.add_argument("--centroids", choices=["reference", "super-text"], default="reference")
    p.set_defaults(fn=cmd_map_superclass)

    p = sub.add_parser("synth", help="generate a synthetic fixture + dataset + config")
    _common_flags(p)
    p.add_argument("--n-attrs", type=int, default=40)
    p.add_argument("--n-super", type=int, default=5)
    p.add_argument("--n-objects", type=int, default=4)
    p.add_argument("--n-novel", type=int, default=8)
    p.add_argument("--train-instances", type=int, default=400)
    p.add_argument("--eval-instances", type=int, default=100)
    p.add_argument("--d-q", type=int, default=32)
    p.add_argument("--d-v", type=int, default=24)
    p.add_argument("--n-z", type=int, default=8)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.35)
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
