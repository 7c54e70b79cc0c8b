"""Deterministic Gaussian-cluster fixtures for demos and tests.

Image samples sit around orthonormal class centers whose pairwise distance is
``separation`` within-cluster standard deviations (unit deviation inside the
class subspace, ``off_noise`` elsewhere). Target vectors mimic encoder text
features: one shared dominant direction, a small class-specific offset that
sets the classifier's logit gaps, a relation-code component, and noise.

Two anchor profiles:

- ``informative``: anchors are random nonnegative mixtures of the class
  directions, so the anchor-target relation carries usable class structure
  out of the box (the training-free transitions beat the plain classifier).
- ``trainable``: one attention-dominant anchor per class whose relation
  column starts exactly flat (the class-direction coupling is cancelled in
  the code subspace), plus inert filler anchors anti-aligned with the shared
  target direction; a few optimizer steps separate the flat columns, which
  makes the fixture a sensitive probe of the training loop.

Everything derives from one seed; the direction basis is a fixed Hadamard
frame so runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from relt.embed_io import EmbeddingMatrix, LabeledImageSet, save_embeddings


@dataclass
class SyntheticData:
    targets: EmbeddingMatrix
    anchors: EmbeddingMatrix
    images: EmbeddingMatrix
    labels: np.ndarray
    class_names: list

    def image_set(self) -> LabeledImageSet:
        return LabeledImageSet(self.images, self.labels, self.targets.rows)


def _unit_rows(m: np.ndarray) -> EmbeddingMatrix:
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    return EmbeddingMatrix(m.astype(np.float32), normalized=True)


def _hadamard(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def make_clusters(
    n_classes: int = 4,
    dim: int = 16,
    per_class: int = 100,
    separation: float = 4.0,
    clip_gap: float = 1.2,
    target_noise: float = 0.003,
    code_strength: float = 1.5,
    off_noise: float = 0.02,
    anchor_profile: str = "informative",
    n_anchors: int = 80,
    anchor_noise: float = 0.05,
    seed: int = 0,
) -> SyntheticData:
    """Separable clusters with text-like targets and the chosen anchor set.

    ``clip_gap`` is the classifier's typical own-vs-other logit gap at scale
    100; ``code_strength`` is the size of the relation-code component of the
    targets, which sets how strongly anchor rotations move relation logits.
    """
    if 2 * n_classes + 2 > dim:
        raise ValueError("need dim >= 2*n_classes + 2 for the direction frame")
    if n_anchors < n_classes:
        raise ValueError("need at least one anchor per class")
    rng = np.random.default_rng(seed)
    frame = _hadamard(dim) / np.sqrt(dim)
    dirs = frame[1 : 1 + n_classes]
    common = frame[1 + n_classes]
    rel = frame[2 + n_classes : 2 + 2 * n_classes]

    center_amp = separation / np.sqrt(2.0)
    centers = dirs * center_amp
    labels = np.repeat(np.arange(n_classes), per_class)
    noise = rng.standard_normal((labels.size, dim))
    in_class = noise @ (dirs.T @ dirs)
    samples = centers[labels] + in_class + off_noise * (noise - in_class)

    x_norm = np.sqrt(center_amp**2 + n_classes)
    t_norm = 1.0
    for _ in range(8):
        ts = clip_gap * t_norm * x_norm / (100.0 * center_amp)
        t_norm = np.sqrt(1.0 + ts * ts + code_strength**2 + target_noise**2 * dim)
    targets = (
        common[None, :]
        + ts * dirs
        + code_strength * rel
        + target_noise * rng.standard_normal((n_classes, dim))
    )

    tau = 0.01
    if anchor_profile == "informative":
        weights = rng.uniform(0.0, 1.0, (n_anchors, n_classes))
        anchors = weights @ dirs + anchor_noise * rng.standard_normal((n_anchors, dim))
        # keep the relation signal clean: no anchor mass on the code subspace
        anchors -= (anchors @ rel.T) @ rel
    elif anchor_profile == "trainable":
        rows = []
        for cls in range(n_classes):
            code = np.full(n_classes, 0.5) * tau * t_norm / code_strength
            code[cls] -= ts / code_strength  # cancel class coupling: flat relation column
            rows.append(dirs[cls] + code @ rel)
        filler = -4.0 * common[None, :] + anchor_noise * rng.standard_normal(
            (n_anchors - n_classes, dim)
        )
        anchors = np.vstack([np.array(rows), filler])
    else:
        raise ValueError(f"unknown anchor profile {anchor_profile!r}")

    return SyntheticData(
        targets=_unit_rows(targets),
        anchors=_unit_rows(anchors),
        images=_unit_rows(samples),
        labels=labels.astype(np.int64),
        class_names=[f"class_{i}" for i in range(n_classes)],
    )


def write_dataset(directory, data: SyntheticData, tau: float = 0.01, tau_prime: float = 0.01,
                  alpha: float = 1.0, backbone: str = "synthetic") -> Path:
    """Write RTEB files, sidecars, and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_embeddings(data.targets, directory / "targets.rteb")
    save_embeddings(data.anchors, directory / "anchors.rteb")
    save_embeddings(data.images, directory / "images.rteb")
    (directory / "labels.txt").write_text("".join(f"{int(v)}\n" for v in data.labels))
    (directory / "class_names.txt").write_text("".join(name + "\n" for name in data.class_names))
    manifest = {
        "targets": "targets.rteb",
        "anchors": "anchors.rteb",
        "images": "images.rteb",
        "labels": "labels.txt",
        "class_names": "class_names.txt",
        "tau": tau,
        "tau_prime": tau_prime,
        "alpha": alpha,
        "backbone": backbone,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
