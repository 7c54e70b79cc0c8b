#!/usr/bin/env python3
"""Training-free relation transition on synthetic clusters.

Builds a 4-class Gaussian-cluster dataset with text-like target vectors and a
set of informative anchors, then compares the plain nearest-target classifier
against predictions routed through the anchor space: the image-anchor
distribution is matched against rows of the anchor-target relation matrix
(consistency prior) or pushed through the column-normalized matrix
(total probability). No training involved.

Run:  python3 demos/01_zero_shot_transition.py
"""

from relt.embed_io import DatasetBundle
from relt.evaluate import evaluate_zero_shot
from relt.synthetic import make_clusters
from relt.transition import ZeroShotConfig

data = make_clusters(anchor_profile="informative", seed=0)
bundle = DatasetBundle(
    targets=data.targets,
    images=data.images,
    labels=data.labels,
    anchors=data.anchors,
)

print(f"dataset: {data.images.rows} images, {data.targets.rows} classes, "
      f"{data.anchors.rows} anchors, D={data.targets.dim}")

baseline = evaluate_zero_shot(bundle, ZeroShotConfig(variants=())).report
print(f"\nnearest-target baseline accuracy: {baseline.top1_accuracy:.4f}")

for variants in (("consistency",), ("total_prob",), ("consistency", "total_prob")):
    report = evaluate_zero_shot(bundle, ZeroShotConfig(variants=variants)).report
    branches = {k: f"{v:.4f}" for k, v in report.branch_accuracies.items()}
    print(f"\nvariants {variants}:")
    print(f"  fused accuracy    : {report.top1_accuracy:.4f}")
    print(f"  branch accuracies : {branches}")
    print(f"  marginal balance  : {report.marginal_balance:.4f}")

print("\nThe transition branches lift accuracy over the baseline because each")
print("anchor relates to several classes at once; the relation matrix turns")
print("anchor affinities into class evidence the plain classifier lacks.")
