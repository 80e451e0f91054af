"""Synthetic grayscale expression-style image sets with known structure.

Every image is a fixed elliptical "section" mask; each category owns a
horizontal band inside it and a texture family (stripes or blobs) whose
parameters derive from the master seed. A gene renders the motifs of the
categories it belongs to, at a gene-specific phase, plus per-image
noise. Category signal therefore lives in local texture statistics,
which keeps the set learnable by construction: a linear model over patch
means already separates each category, so a pipeline scoring worse than
that has only itself to blame.

All randomness flows through seeds derived from (master seed, purpose,
index), so the emitted files are byte-identical run to run.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import save_manifest, save_pgm
from .classify import save_annotations
from .tensor import derive_seed, make_rng

__all__ = ["SynthError", "SynthConfig", "generate", "patch_features"]

ASSIGN_ATTEMPTS = 100


class SynthError(ValueError):
    """Configuration cannot produce a valid dataset."""


@dataclass(frozen=True)
class SynthConfig:
    n_genes: int = 200
    n_categories: int = 8
    h: int = 96
    w: int = 48
    images_per_gene: int = 2
    stripe_freq: tuple = (0.25, 0.6)  # cycles per pixel
    blob_density: tuple = (0.008, 0.016)  # bumps per in-band mask pixel
    noise_sigma: float = 0.03
    label_density: float = 0.15
    min_per_category: int = 15
    seed: int = 0

    def validate(self) -> None:
        if self.n_genes < 1 or self.n_categories < 1 or self.images_per_gene < 1:
            raise SynthError("counts must be >= 1")
        if self.h < 16 or self.w < 16:
            raise SynthError(f"image {self.h}x{self.w} too small (minimum 16x16)")
        if self.h // self.n_categories < 4:
            raise SynthError(
                f"{self.n_categories} categories need >= 4 rows each in h={self.h}"
            )
        if not 0.0 < self.label_density < 1.0:
            raise SynthError(f"label_density {self.label_density} outside (0, 1)")
        if self.noise_sigma < 0.0:
            raise SynthError("noise_sigma must be >= 0")
        if self.n_genes * self.label_density < self.min_per_category:
            raise SynthError(
                f"expected category size {self.n_genes * self.label_density:.1f} "
                f"cannot reach the minimum of {self.min_per_category}"
            )


def _gene_id(i: int) -> str:
    return f"g{i:04d}"


def _category_id(c: int) -> str:
    return f"cat{c:02d}"


def _ellipse_mask(h: int, w: int) -> np.ndarray:
    rows = (np.arange(h)[:, None] - (h - 1) / 2.0) / (0.46 * h)
    cols = (np.arange(w)[None, :] - (w - 1) / 2.0) / (0.44 * w)
    return rows * rows + cols * cols <= 1.0


def _band_rows(mask: np.ndarray, n_categories: int) -> list:
    """Split the mask into n row bands of equal visible area.

    Equal heights would starve the categories at the ellipse poles, where
    only a sliver of each row is inside the section.
    """
    cum = np.cumsum(mask.sum(axis=1), dtype=np.float64)
    targets = cum[-1] * np.arange(1, n_categories) / n_categories
    cuts = [0] + [int(np.searchsorted(cum, t)) + 1 for t in targets] + [mask.shape[0]]
    bands = list(zip(cuts[:-1], cuts[1:]))
    if any(r1 - r0 < 2 for r0, r1 in bands):
        raise SynthError(f"mask too small for {n_categories} row bands")
    return bands


def _motif_params(config: SynthConfig, c: int, row0: int, row1: int, area: int) -> dict:
    """Per-category texture family, derived from the master seed."""
    rng = make_rng(derive_seed(config.seed, "motif", c))
    params = {"kind": "stripes" if c % 2 == 0 else "blobs",
              "row0": row0, "row1": row1}
    if params["kind"] == "stripes":
        params["freq"] = float(rng.uniform(*config.stripe_freq))
        params["angle"] = float(rng.uniform(0.0, math.pi))
        params["amp"] = float(rng.uniform(0.30, 0.40))
    else:
        params["density"] = float(rng.uniform(*config.blob_density))
        params["radius"] = float(rng.uniform(1.8, 3.2))
        params["amp"] = float(rng.uniform(0.35, 0.50))
        params["count"] = max(2, int(round(params["density"] * area)))
    return params


def _render_motif(canvas: np.ndarray, mask: np.ndarray, params: dict, phase_rng) -> None:
    """Add one category band's texture in place, at a gene-specific phase."""
    h, w = canvas.shape
    row0, row1 = params["row0"], params["row1"]
    if params["kind"] == "stripes":
        phase = phase_rng.uniform(0.0, 2.0 * math.pi)
        rows = np.arange(row0, row1)[:, None]
        cols = np.arange(w)[None, :]
        wave = np.sin(
            2.0 * math.pi * params["freq"]
            * (rows * math.cos(params["angle"]) + cols * math.sin(params["angle"]))
            + phase
        )
        canvas[row0:row1] += params["amp"] * 0.5 * (1.0 + wave)
    else:
        # rejection-sample centers so every bump lands on visible tissue
        centers = []
        attempts = 0
        while len(centers) < params["count"] and attempts < 100 * params["count"]:
            r = phase_rng.uniform(row0, row1)
            col = phase_rng.uniform(0, w)
            attempts += 1
            if mask[min(int(r), h - 1), min(int(col), w - 1)]:
                centers.append((r, col))
        if not centers:
            return
        centers_r = np.array([r for r, _ in centers])
        centers_c = np.array([c for _, c in centers])
        rows = np.arange(row0, row1)[:, None, None]
        cols = np.arange(w)[None, :, None]
        d_sq = (rows - centers_r) ** 2 + (cols - centers_c) ** 2
        bumps = np.exp(-d_sq / (2.0 * params["radius"] ** 2)).sum(axis=2)
        canvas[row0:row1] += params["amp"] * np.minimum(bumps, 1.0)


def _assign_memberships(config: SynthConfig) -> np.ndarray:
    """(n_genes, n_categories) bool; resampled until every category is big
    enough, erroring out if the config makes that hopeless."""
    for attempt in range(ASSIGN_ATTEMPTS):
        rng = make_rng(derive_seed(config.seed, "assign", attempt))
        member = rng.random((config.n_genes, config.n_categories)) < config.label_density
        if member.sum(axis=0).min() >= config.min_per_category:
            return member
    raise SynthError(
        f"no assignment with >= {config.min_per_category} genes per category "
        f"after {ASSIGN_ATTEMPTS} draws; raise label_density or n_genes"
    )


def generate(config: SynthConfig, out_dir):
    """Write images plus manifest, annotation and ground-truth CSVs.

    Returns (manifest_rows, annotation_table). Layout under out_dir:
    images/<gene>_<k>.pgm, manifest.csv, annotations.csv,
    ground_truth.csv.
    """
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    member = _assign_memberships(config)
    mask = _ellipse_mask(config.h, config.w)
    bands = _band_rows(mask, config.n_categories)
    motifs = [
        _motif_params(config, c, r0, r1, int(mask[r0:r1].sum()))
        for c, (r0, r1) in enumerate(bands)
    ]

    manifest = []
    table = {_category_id(c): set() for c in range(config.n_categories)}
    for i in range(config.n_genes):
        gene = _gene_id(i)
        canvas = np.where(mask, 0.35, 0.0)
        phase_rng = make_rng(derive_seed(config.seed, "phase", i))
        for c in range(config.n_categories):
            if member[i, c]:
                table[_category_id(c)].add(gene)
                _render_motif(canvas, mask, motifs[c], phase_rng)
        canvas = np.where(mask, canvas, 0.0)
        for k in range(config.images_per_gene):
            image = canvas
            if config.noise_sigma > 0.0:
                noise_rng = make_rng(derive_seed(config.seed, "noise", i, k))
                image = canvas + noise_rng.normal(0.0, config.noise_sigma, canvas.shape)
            rel = f"images/{gene}_{k}.pgm"
            save_pgm(out / rel, np.clip(image, 0.0, 1.0))
            manifest.append((rel, gene))

    save_manifest(out / "manifest.csv", manifest)
    save_annotations(out / "annotations.csv", table)
    with open(out / "ground_truth.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["gene_id", "category_id", "kind", "row0", "row1", "param1", "param2", "amp"]
        )
        for i in range(config.n_genes):
            for c in range(config.n_categories):
                if member[i, c]:
                    p = motifs[c]
                    p1, p2 = (
                        (p["freq"], p["angle"])
                        if p["kind"] == "stripes"
                        else (p["density"], p["radius"])
                    )
                    writer.writerow(
                        [_gene_id(i), _category_id(c), p["kind"], p["row0"], p["row1"],
                         repr(p1), repr(p2), repr(p["amp"])]
                    )
    return manifest, table


def patch_features(values: np.ndarray, patch: int = 8) -> np.ndarray:
    """Mean over non-overlapping patch x patch blocks, flattened.

    Encoder-free featurization used to certify that generated datasets
    are linearly separable; truncates edges that do not fill a block.
    """
    h, w = values.shape
    ph, pw = h // patch, w // patch
    blocks = values[: ph * patch, : pw * patch].reshape(ph, patch, pw, patch)
    return blocks.mean(axis=(1, 3)).ravel()
