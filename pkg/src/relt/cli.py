"""Command-line surface: relt zero-shot | train | eval | inspect | gradcheck.

RELT_THREADS caps BLAS parallelism when set before the first numpy import;
all randomness flows from --seed.
"""

from __future__ import annotations

import os

if "RELT_THREADS" in os.environ:
    _threads = os.environ["RELT_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
from pathlib import Path

import numpy as np

from relt.embed_io import l2_normalize, load_embeddings, load_manifest, validate_manifest
from relt.evaluate import evaluate_checkpoint, evaluate_zero_shot, inspect_relations, write_heatmap_csvs
from relt.gradcheck import REL_TOL, run_gradcheck
from relt.rtm import load_checkpoint
from relt.train import TrainConfig, init_for_training, sample_shots, save_training_artifacts, train_few_shot
from relt.transition import CONSISTENCY, IMAGE_IMAGE, TOTAL_PROB, ZeroShotConfig
from relt.embed_io import LabeledImageSet

VARIANT_MAP = {
    "consistency": (CONSISTENCY,),
    "total-prob": (TOTAL_PROB,),
    "image-image": (IMAGE_IMAGE,),
    "all": (CONSISTENCY, TOTAL_PROB, IMAGE_IMAGE),
}


def _load_anchor_file(path):
    anchors = load_embeddings(path)
    return anchors if anchors.normalized else l2_normalize(anchors)


def _write_report(result, out: str | None) -> None:
    print(result.report.to_json(), end="")
    if out:
        out_path = Path(out)
        result.write_report(out_path)
        result.write_dump(out_path.with_suffix(".predictions.jsonl"))


def _cmd_zero_shot(args) -> int:
    bundle = validate_manifest(load_manifest(args.manifest))
    if args.anchors:
        bundle.anchors = _load_anchor_file(args.anchors)
    variants = VARIANT_MAP[args.variant]
    if bundle.anchors is None:
        variants = tuple(v for v in variants if v not in (CONSISTENCY, TOTAL_PROB))
    if IMAGE_IMAGE in variants and bundle.support is None:
        if args.variant == "all":
            variants = tuple(v for v in variants if v != IMAGE_IMAGE)
        else:
            print("error: image-image variant needs support_images/support_labels in the manifest", file=sys.stderr)
            return 2
    config = ZeroShotConfig(
        tau=args.tau if args.tau is not None else bundle.tau,
        tau_prime=args.tau_prime if args.tau_prime is not None else bundle.tau_prime,
        alphas=args.alpha if args.alpha is not None else bundle.alpha,
        variants=variants,
        support=bundle.support,
    )
    _write_report(evaluate_zero_shot(bundle, config), args.out)
    return 0


def _cmd_train(args) -> int:
    bundle = validate_manifest(load_manifest(args.manifest))
    config = TrainConfig(
        shots=args.shots,
        epochs=args.epochs,
        learning_rate=args.lr if args.lr is not None else 1e-5,
        tau=bundle.tau,
        tau_prime=bundle.tau_prime,
        alpha=bundle.alpha,
        gamma=args.gamma,
        num_anchors=args.num_anchors,
        seed=args.seed,
        dataset_tag=bundle.backbone,
    )
    anchor_features = None
    if args.anchor_init != "random":
        if not args.anchor_init.startswith("file:"):
            print("error: --anchor-init must be 'random' or 'file:PATH'", file=sys.stderr)
            return 2
        anchor_features = _load_anchor_file(args.anchor_init[len("file:") :])

    indices = sample_shots(bundle.labels, config.shots, config.seed)
    support = LabeledImageSet(
        type(bundle.images)(bundle.images.data[indices], normalized=bundle.images.normalized),
        bundle.labels[indices],
        bundle.class_count,
    )
    init = init_for_training(config, bundle.targets, bundle.targets.dim, anchor_features)
    result = train_few_shot(config, support, bundle.targets, init)
    save_training_artifacts(args.checkpoint, result, config)
    last = result.epochs[-1]
    print(
        f"epoch {last.epoch}: total_loss={last.total_loss:.6f} "
        f"support_accuracy={last.support_accuracy:.4f} lr={last.lr:.3g}"
    )
    print(f"checkpoint written to {args.checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    bundle = validate_manifest(load_manifest(args.manifest))
    params, _ = load_checkpoint(args.checkpoint)
    cfg_path = Path(args.checkpoint) / "train_config.json"
    alpha, clip_scale, tau = 1.0, 100.0, bundle.tau
    if cfg_path.exists():
        import json

        cfg = json.loads(cfg_path.read_text())
        alpha = float(cfg.get("alpha", alpha))
        clip_scale = float(cfg.get("clip_scale", clip_scale))
        tau = float(cfg.get("tau", tau))
    result = evaluate_checkpoint(bundle, params, alpha=alpha, clip_scale=clip_scale, tau=tau)
    _write_report(result, args.out)
    return 0


def _cmd_inspect(args) -> int:
    bundle = validate_manifest(load_manifest(args.manifest))
    anchors = _load_anchor_file(args.anchors)
    if anchors.dim != bundle.targets.dim:
        print(f"error: dimension mismatch targets/anchors: {bundle.targets.dim} vs {anchors.dim}", file=sys.stderr)
        return 2
    report = inspect_relations(bundle.targets, anchors, bundle.tau)
    paths = write_heatmap_csvs(report, args.heatmap)
    import json

    print(json.dumps(report.to_dict(include_balance=args.balance), indent=2))
    print(f"heatmaps written to {paths[0]} and {paths[1]}")
    return 0


def _cmd_gradcheck(args) -> int:
    result = run_gradcheck(trials=args.trials, seed=args.seed)
    status = "PASS" if result.passed else "FAIL"
    print(
        f"gradcheck: {result.trials} trials, max relative error {result.max_rel_error:.3e} "
        f"(tolerance {REL_TOL:.0e}) in {result.elapsed_seconds:.1f}s "
        f"[worst: trial {result.worst_trial}, {result.worst_field}] {status}"
    )
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zero-shot", help="training-free evaluation of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--anchors", default=None)
    p.add_argument("--variant", choices=sorted(VARIANT_MAP), default="consistency")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tau-prime", dest="tau_prime", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_zero_shot)

    p = sub.add_parser("train", help="few-shot training of anchors and block parameters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--num-anchors", dest="num_anchors", type=int, default=80)
    p.add_argument("--anchor-init", dest="anchor_init", default="random")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="relation heatmaps and anchor diagnostics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--heatmap", required=True)
    p.add_argument("--balance", action="store_true")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
