"""Image ingestion, downsampling, normalization and gene feature matrices.

Grayscale images come in as 8-bit PGM (P5) or grayscale PNG, are scaled
to [0, 1], area-average downsampled to the model's input size, mapped to
[-1, 1] to match the tanh output layer, and encoded. A gene with several
images gets the mean of its encodings; row order follows first
appearance in the manifest.
"""

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import network
from .tensor import ShapeError

__all__ = [
    "ImageFormatError",
    "GrayImage",
    "FeatureMatrix",
    "load_image",
    "save_pgm",
    "downsample",
    "normalize",
    "denormalize",
    "load_manifest",
    "save_manifest",
    "load_dataset",
    "build_feature_matrix",
    "save_features_csv",
    "load_features_csv",
    "save_features_fmat",
    "load_features_fmat",
]

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""


@dataclass
class GrayImage:
    """Grayscale image, values in [0, 1]."""

    values: np.ndarray  # (h, w) float64

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]


def _parse_pgm(data: bytes, path) -> GrayImage:
    # header = 4 whitespace-separated tokens (magic, w, h, maxval) with
    # '#' comments allowed, then one whitespace byte, then raw samples
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ImageFormatError(f"{path}: truncated PGM header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    i += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if maxval < 1 or maxval > 255:
        raise ImageFormatError(f"{path}: unsupported PGM maxval {maxval} (8-bit only)")
    raw = data[i : i + h * w]
    if len(raw) < h * w:
        raise ImageFormatError(f"{path}: truncated PGM data ({len(raw)} of {h * w} bytes)")
    values = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(h, w)
    return GrayImage(values / maxval)


def _load_png(path) -> GrayImage:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise ImageFormatError(
                    f"{path}: unsupported PNG mode {img.mode!r} (8-bit grayscale only)"
                )
            values = np.asarray(img, dtype=np.float64)
    except UnidentifiedImageError:
        raise ImageFormatError(f"{path}: not a readable image") from None
    except OSError as e:
        raise ImageFormatError(f"{path}: {e}") from None
    return GrayImage(values / 255.0)


def load_image(path) -> GrayImage:
    """Load an 8-bit grayscale PGM (P5) or PNG, scaled to [0, 1]."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(8)
    if head[:2] == b"P5":
        return _parse_pgm(path.read_bytes(), path)
    if head == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    raise ImageFormatError(f"{path}: unsupported image format (PGM P5 or grayscale PNG)")


def save_pgm(path, values: np.ndarray) -> None:
    """Write [0, 1] values as an 8-bit binary PGM."""
    h, w = values.shape
    samples = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(samples.tobytes())


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix of fractional pixel coverage."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        first, last = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(first, min(last, n_in)):
            cover = min(i + 1.0, hi) - max(float(i), lo)
            if cover > 0:
                weights[o, i] = cover / scale
    return weights


def downsample(img: GrayImage, out_h: int, out_w: int) -> GrayImage:
    """Area-averaged resampling; exact block means for integer factors."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output dims {out_h}x{out_w} must be >= 1")
    if out_h > img.h or out_w > img.w:
        raise ShapeError(
            f"cannot upscale {img.h}x{img.w} to {out_h}x{out_w}; downsampling only"
        )
    if (out_h, out_w) == (img.h, img.w):
        return GrayImage(img.values.copy())
    rows = _area_weights(img.h, out_h)
    cols = _area_weights(img.w, out_w)
    return GrayImage(rows @ img.values @ cols.T)


def normalize(img: GrayImage) -> np.ndarray:
    """[0, 1] image -> (1, 1, h, w) tensor in [-1, 1]."""
    return (2.0 * img.values - 1.0)[None, None, :, :]


def denormalize(tensor: np.ndarray) -> GrayImage:
    """Inverse of normalize for a single-image tensor."""
    return GrayImage((tensor[0, 0] + 1.0) / 2.0)


# ---------------------------------------------------------------------------
# Manifest and feature matrix


def load_manifest(path) -> list[tuple[str, str]]:
    """CSV rows of (image_path, gene_id); paths must be unique."""
    rows = []
    seen = set()
    with open(path, newline="") as f:
        for i, row in enumerate(csv.reader(f), start=1):
            if not row or (i == 1 and row == ["image_path", "gene_id"]):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{i}: expected 'image_path,gene_id', got {row!r}")
            image_path, gene_id = row[0].strip(), row[1].strip()
            if not gene_id:
                raise ValueError(f"{path}:{i}: empty gene_id")
            if image_path in seen:
                raise ValueError(f"{path}:{i}: duplicate image path {image_path!r}")
            seen.add(image_path)
            rows.append((image_path, gene_id))
    return rows


def save_manifest(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for image_path, gene_id in rows:
            writer.writerow([image_path, gene_id])


@dataclass
class FeatureMatrix:
    """One row of encoder features per distinct gene."""

    gene_ids: list
    values: np.ndarray  # (genes, D) float64

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _load_input(spec, path):
    img = load_image(path)
    try:
        img = downsample(img, spec.input_h, spec.input_w)
    except ShapeError as e:
        raise ShapeError(f"{path}: {e}") from None
    return normalize(img)


def load_dataset(spec, manifest, base_dir=None, threads: int = 1) -> list:
    """Load every manifest image as a model-ready (1, 1, h, w) tensor.

    Order follows the manifest regardless of thread count. Missing files
    are reported before any decoding starts.
    """
    if not manifest:
        raise ValueError("manifest is empty")
    base = Path(base_dir) if base_dir is not None else None
    paths = [base / p if base is not None else Path(p) for p, _ in manifest]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"manifest image not found: {p}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda p: _load_input(spec, p), paths))
    return [_load_input(spec, p) for p in paths]


def build_feature_matrix(
    model,
    manifest,
    base_dir=None,
    threads: int = 1,
    batch_size: int = 32,
    dtype=None,
) -> FeatureMatrix:
    """Encode every manifest image and mean-aggregate per gene.

    Gene row order is first-appearance order in the manifest; loading may
    fan out over threads but aggregation is an ordered reduction, so the
    result is bit-identical for any thread count.
    """
    inputs = load_dataset(model.spec, manifest, base_dir=base_dir, threads=threads)

    order: list[str] = []
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start : start + batch_size]
        encoded = network.encode(model, np.concatenate(chunk, axis=0), dtype=dtype)
        for offset, vec in enumerate(np.asarray(encoded, dtype=np.float64)):
            gene = manifest[start + offset][1]
            if gene not in sums:
                order.append(gene)
                sums[gene] = vec.copy()
                counts[gene] = 1
            else:
                sums[gene] += vec
                counts[gene] += 1
    values = np.stack([sums[g] / counts[g] for g in order])
    return FeatureMatrix(gene_ids=order, values=values)


def save_features_csv(path, matrix: FeatureMatrix) -> None:
    """Header gene_id,f0..f{D-1}; repr() floats so values round-trip exactly."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["gene_id"] + [f"f{i}" for i in range(matrix.dim)])
        for gene, row in zip(matrix.gene_ids, matrix.values):
            writer.writerow([gene] + [repr(float(v)) for v in row])


def load_features_csv(path) -> FeatureMatrix:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "gene_id":
            raise ValueError(f"{path}: not a feature CSV (header {header!r})")
        genes, rows = [], []
        for row in reader:
            if not row:
                continue
            genes.append(row[0])
            rows.append([float(v) for v in row[1:]])
    if not genes:
        raise ValueError(f"{path}: feature CSV has no rows")
    return FeatureMatrix(gene_ids=genes, values=np.array(rows, dtype=np.float64))


def save_features_fmat(path, matrix: FeatureMatrix) -> None:
    """Binary equivalent of the CSV: magic FMAT, ids, raw float64 rows."""
    with open(path, "wb") as f:
        f.write(FMAT_MAGIC)
        f.write(struct.pack("<HII", FMAT_VERSION, len(matrix.gene_ids), matrix.dim))
        for gene in matrix.gene_ids:
            encoded = gene.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
        f.write(np.ascontiguousarray(matrix.values, dtype="<f8").tobytes())


def load_features_fmat(path) -> FeatureMatrix:
    def need(f, n):
        data = f.read(n)
        if len(data) != n:
            raise ValueError(f"{path}: truncated feature file")
        return data

    with open(path, "rb") as f:
        if f.read(4) != FMAT_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        version, n, dim = struct.unpack("<HII", need(f, 10))
        if version != FMAT_VERSION:
            raise ValueError(f"{path}: unsupported feature file version {version}")
        genes = []
        for _ in range(n):
            (length,) = struct.unpack("<H", need(f, 2))
            genes.append(need(f, length).decode("utf-8"))
        values = np.frombuffer(need(f, 8 * n * dim), dtype="<f8").reshape(n, dim).copy()
    return FeatureMatrix(gene_ids=genes, values=values)
