"""Architecture specs, runnable models, encoder truncation and model files.

An architecture is described by a small text format (one layer per line)
so presets ship as data:

    # header lines
    input 300 140            image height, width
    corrupt 0.20             fraction of input values zeroed during training
    bottleneck after=11      encoder output = output of expanded layer 11
    # layer lines, in order
    conv repeat=3 filters=32 kernel=9 act=relu
    maxpool
    unpool
    deconv filters=1 kernel=5 act=tanh

Layer counting: `repeat=k` expands to k layers; a conv/deconv together
with its activation counts as one layer, as does each maxpool/unpool.
`deconv` is an alias of `conv` (resolution changes are carried entirely
by pool/unpool).

Model files are binary: magic "CDAE", little-endian u16 format version,
the canonical spec text, training metadata (epochs, final learning rate,
seed), then every weight/bias tensor in layer order as a shape header
plus raw float64 values. Round-trips are bit-exact.
"""

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .tensor import ShapeError, check_tensor, he_uniform_init, make_rng

__all__ = [
    "SpecError",
    "ModelFileError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedModelError",
    "LayerDescriptor",
    "ArchitectureSpec",
    "Model",
    "parse_spec",
    "forward",
    "encode",
    "save_model",
    "load_model",
    "load_preset",
    "preset_names",
]

MAGIC = b"CDAE"
FORMAT_VERSION = 1


class SpecError(ValueError):
    """Malformed or inconsistent architecture spec."""


class ModelFileError(IOError):
    """Base class for model-file load failures."""


class BadMagicError(ModelFileError):
    """Not a model file (magic bytes wrong)."""


class UnsupportedVersionError(ModelFileError):
    """Model file uses a format version this build cannot read."""


class TruncatedModelError(ModelFileError):
    """Model file ends before all declared content."""


@dataclass(frozen=True)
class LayerDescriptor:
    kind: str  # conv | deconv | maxpool | unpool | activation
    repeat: int = 1
    filters: int = 0
    kernel: int = 0
    activation: str = "none"  # relu | tanh | none


@dataclass(frozen=True)
class ArchitectureSpec:
    input_h: int
    input_w: int
    corruption_rate: float
    layers: tuple[LayerDescriptor, ...]
    bottleneck_index: int  # 1-based position in the expanded layer list

    def expanded(self) -> list[LayerDescriptor]:
        out = []
        for d in self.layers:
            out.extend([replace(d, repeat=1)] * d.repeat)
        return out

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """(c, h, w) after each expanded layer; validates the chain as it walks."""
        c, h, w = 1, self.input_h, self.input_w
        chain = []
        for i, d in enumerate(self.expanded(), start=1):
            if d.kind in ("conv", "deconv"):
                c = d.filters
            elif d.kind == "maxpool":
                if h % 2 or w % 2:
                    raise SpecError(
                        f"layer {i} ({d.kind}): spatial dims {h}x{w} not divisible by 2"
                    )
                h, w = h // 2, w // 2
            elif d.kind == "unpool":
                h, w = 2 * h, 2 * w
            elif d.kind == "activation":
                pass
            else:
                raise SpecError(f"layer {i}: unknown layer kind {d.kind!r}")
            chain.append((c, h, w))
        return chain

    def validate(self) -> None:
        if self.input_h < 1 or self.input_w < 1:
            raise SpecError(f"input dims {self.input_h}x{self.input_w} must be >= 1")
        if not 0.0 <= self.corruption_rate < 1.0:
            raise SpecError(f"corruption rate {self.corruption_rate} outside [0, 1)")
        if not self.layers:
            raise SpecError("spec has no layers")
        for i, d in enumerate(self.expanded(), start=1):
            if d.kind in ("conv", "deconv"):
                if d.filters < 1:
                    raise SpecError(f"layer {i} ({d.kind}): filters must be >= 1")
                if d.kernel < 1 or d.kernel % 2 == 0:
                    raise SpecError(
                        f"layer {i} ({d.kind}): kernel {d.kernel} must be odd and >= 1"
                    )
            if d.activation not in L.ACTIVATIONS:
                raise SpecError(f"layer {i}: unknown activation {d.activation!r}")
        expanded = self.expanded()
        pools = sum(d.kind == "maxpool" for d in expanded)
        unpools = sum(d.kind == "unpool" for d in expanded)
        if pools != unpools:
            raise SpecError(f"{pools} maxpool layers but {unpools} unpool layers")
        chain = self.shape_chain()
        if chain[-1] != (1, self.input_h, self.input_w):
            raise SpecError(
                f"layer {len(chain)}: final shape {chain[-1]} does not reproduce "
                f"input (1, {self.input_h}, {self.input_w})"
            )
        if not 1 <= self.bottleneck_index <= len(expanded):
            raise SpecError(
                f"bottleneck after={self.bottleneck_index} outside layer range "
                f"1..{len(expanded)}"
            )

    def bottleneck_shape(self) -> tuple[int, int, int]:
        """(c, h, w) of the encoder output, computed from the spec alone."""
        return self.shape_chain()[self.bottleneck_index - 1]

    @property
    def feature_dim(self) -> int:
        c, h, w = self.bottleneck_shape()
        return c * h * w

    def to_text(self) -> str:
        lines = [
            f"input {self.input_h} {self.input_w}",
            f"corrupt {self.corruption_rate!r}",
            f"bottleneck after={self.bottleneck_index}",
        ]
        for d in self.layers:
            if d.kind in ("conv", "deconv"):
                parts = [d.kind]
                if d.repeat != 1:
                    parts.append(f"repeat={d.repeat}")
                parts.append(f"filters={d.filters}")
                parts.append(f"kernel={d.kernel}")
                parts.append(f"act={d.activation}")
                lines.append(" ".join(parts))
            elif d.kind == "activation":
                lines.append(f"activation act={d.activation}")
            else:
                lines.append(d.kind)
        return "\n".join(lines) + "\n"


def _parse_kv(parts: list[str], lineno: int) -> dict[str, str]:
    kv = {}
    for p in parts:
        if "=" not in p:
            raise SpecError(f"line {lineno}: expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        kv[k] = v
    return kv


def _parse_int(kv: dict, key: str, lineno: int, default=None) -> int:
    if key not in kv:
        if default is None:
            raise SpecError(f"line {lineno}: missing {key}=")
        return default
    try:
        return int(kv[key])
    except ValueError:
        raise SpecError(f"line {lineno}: {key}={kv[key]!r} is not an integer") from None


def parse_spec(text: str) -> ArchitectureSpec:
    """Parse and validate the text architecture format."""
    input_hw = None
    corrupt = 0.0
    bottleneck = None
    descriptors: list[LayerDescriptor] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        head = parts[0]
        if head == "input":
            if len(parts) != 3:
                raise SpecError(f"line {lineno}: expected 'input H W'")
            try:
                input_hw = (int(parts[1]), int(parts[2]))
            except ValueError:
                raise SpecError(f"line {lineno}: input dims must be integers") from None
        elif head == "corrupt":
            if len(parts) != 2:
                raise SpecError(f"line {lineno}: expected 'corrupt RATE'")
            try:
                corrupt = float(parts[1])
            except ValueError:
                raise SpecError(f"line {lineno}: corrupt rate must be a number") from None
        elif head == "bottleneck":
            kv = _parse_kv(parts[1:], lineno)
            bottleneck = _parse_int(kv, "after", lineno)
        elif head in ("conv", "deconv"):
            kv = _parse_kv(parts[1:], lineno)
            descriptors.append(
                LayerDescriptor(
                    kind=head,
                    repeat=_parse_int(kv, "repeat", lineno, default=1),
                    filters=_parse_int(kv, "filters", lineno),
                    kernel=_parse_int(kv, "kernel", lineno),
                    activation=kv.get("act", "relu"),
                )
            )
        elif head in ("maxpool", "unpool"):
            descriptors.append(LayerDescriptor(kind=head))
        elif head == "activation":
            kv = _parse_kv(parts[1:], lineno)
            descriptors.append(LayerDescriptor(kind="activation", activation=kv["act"]))
        else:
            raise SpecError(f"layer {len(descriptors) + 1} (line {lineno}): unknown layer kind {head!r}")

    if input_hw is None:
        raise SpecError("spec is missing the 'input H W' header")
    if bottleneck is None:
        raise SpecError("spec is missing the 'bottleneck after=N' header")
    spec = ArchitectureSpec(
        input_h=input_hw[0],
        input_w=input_hw[1],
        corruption_rate=corrupt,
        layers=tuple(descriptors),
        bottleneck_index=bottleneck,
    )
    spec.validate()
    return spec


@dataclass
class TrainMeta:
    epochs: int = 0
    final_lr: float = 0.0
    seed: int = 0


@dataclass
class Model:
    """A spec plus one (weights, bias) pair per expanded conv/deconv layer."""

    spec: ArchitectureSpec
    params: list  # aligned with spec.expanded(); None for parameter-free layers
    meta: TrainMeta = field(default_factory=TrainMeta)

    @classmethod
    def init(cls, spec: ArchitectureSpec, seed: int = 0) -> "Model":
        """He-uniform filters, zero biases, deterministic per seed."""
        spec.validate()
        rng = make_rng(seed)
        params = []
        in_c = 1
        for d in spec.expanded():
            if d.kind in ("conv", "deconv"):
                w = he_uniform_init((d.filters, in_c, d.kernel, d.kernel), rng)
                params.append((w, np.zeros(d.filters)))
                in_c = d.filters
            else:
                params.append(None)
        return cls(spec=spec, params=params, meta=TrainMeta(seed=seed))

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def parameter_arrays(self) -> list[np.ndarray]:
        """All weight/bias arrays in layer order (shared references)."""
        out = []
        for p in self.params:
            if p is not None:
                out.extend(p)
        return out


def _check_batch(model: Model, x: np.ndarray) -> None:
    check_tensor(x, "batch")
    expect = (1, model.spec.input_h, model.spec.input_w)
    if x.shape[1:] != expect:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match spec {expect}")


def _cast(model: Model, x: np.ndarray, dtype):
    if dtype is None:
        return model.params, np.asarray(x, dtype=np.float64)
    params = [
        None if p is None else (p[0].astype(dtype), p[1].astype(dtype))
        for p in model.params
    ]
    return params, np.asarray(x, dtype=dtype)


def _run(model: Model, x: np.ndarray, upto: int | None, dtype=None) -> np.ndarray:
    params, h = _cast(model, x, dtype)
    for i, d in enumerate(model.spec.expanded()):
        if upto is not None and i >= upto:
            break
        if d.kind in ("conv", "deconv"):
            w, b = params[i]
            h = L.conv_forward(h, w, b)
            h = L.activation_forward(d.activation, h)
        elif d.kind == "maxpool":
            h, _ = L.maxpool_forward(h)
        elif d.kind == "unpool":
            h = L.unpool_forward(h)
        elif d.kind == "activation":
            h = L.activation_forward(d.activation, h)
    return h


def forward(model: Model, batch: np.ndarray, dtype=None) -> np.ndarray:
    """Full reconstruction pass; output shape equals input shape."""
    _check_batch(model, batch)
    return _run(model, batch, upto=None, dtype=dtype)


def encode(model: Model, batch: np.ndarray, dtype=None) -> np.ndarray:
    """Encoder output: bottleneck activations flattened row-major to (n, D)."""
    _check_batch(model, batch)
    h = _run(model, batch, upto=model.spec.bottleneck_index, dtype=dtype)
    return h.reshape(h.shape[0], -1)


def forward_cached(model: Model, batch: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass keeping what the backward sweep needs per layer."""
    _check_batch(model, batch)
    h = np.asarray(batch, dtype=np.float64)
    caches = []
    for i, d in enumerate(model.spec.expanded()):
        if d.kind in ("conv", "deconv"):
            w, b = model.params[i]
            x_in = h
            z, cols = L.conv_forward_cached(x_in, w, b)
            h = L.activation_forward(d.activation, z)
            caches.append((x_in, z, cols))
        elif d.kind == "maxpool":
            h, record = L.maxpool_forward(h)
            caches.append(record)
        elif d.kind == "unpool":
            h = L.unpool_forward(h)
            caches.append(None)
        elif d.kind == "activation":
            caches.append(h)
            h = L.activation_forward(d.activation, h)
    return h, caches


def backward(model: Model, caches: list, grad_out: np.ndarray, with_input: bool = False):
    """Gradients for every parameterized layer, aligned with model.params.

    With with_input=True also returns the loss gradient w.r.t. the batch,
    i.e. the fully backpropagated signal.
    """
    grads: list = [None] * len(model.params)
    g = grad_out
    for i, d in reversed(list(enumerate(model.spec.expanded()))):
        if d.kind in ("conv", "deconv"):
            x_in, z, cols = caches[i]
            w, _ = model.params[i]
            g = L.activation_backward(d.activation, z, g)
            g, gw, gb = L.conv_backward(
                x_in, w, g, cols=cols, need_input=with_input or i > 0
            )
            grads[i] = (gw, gb)
        elif d.kind == "maxpool":
            g = L.maxpool_backward(caches[i], g)
        elif d.kind == "unpool":
            g = L.unpool_backward(g)
        elif d.kind == "activation":
            g = L.activation_backward(d.activation, caches[i], g)
    if with_input:
        return grads, g
    return grads


# ---------------------------------------------------------------------------
# Model file format


def _write_tensor(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedModelError(f"model file ends early (wanted {n} bytes, got {len(data)})")
    return data


def _read_tensor(f) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = _read_exact(f, 8 * count)
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def save_model(model: Model, path) -> None:
    spec_bytes = model.spec.to_text().encode("utf-8")
    tensors = model.parameter_arrays()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(spec_bytes)))
    buf.write(spec_bytes)
    buf.write(struct.pack("<IdQ", model.meta.epochs, model.meta.final_lr, model.meta.seed))
    buf.write(struct.pack("<I", len(tensors)))
    for arr in tensors:
        _write_tensor(buf, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_model(path) -> Model:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: not a model file (bad magic {magic!r})")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
            )
        (spec_len,) = struct.unpack("<I", _read_exact(f, 4))
        spec = parse_spec(_read_exact(f, spec_len).decode("utf-8"))
        epochs, final_lr, seed = struct.unpack("<IdQ", _read_exact(f, 4 + 8 + 8))
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        flat = [_read_tensor(f) for _ in range(n_tensors)]
        if f.read(1):
            raise ModelFileError(f"{path}: trailing bytes after declared content")

    model = Model(spec=spec, params=[], meta=TrainMeta(epochs, final_lr, seed))
    it = iter(flat)
    in_c = 1
    try:
        for d in spec.expanded():
            if d.kind in ("conv", "deconv"):
                w, b = next(it), next(it)
                expect = (d.filters, in_c, d.kernel, d.kernel)
                if w.shape != expect or b.shape != (d.filters,):
                    raise ModelFileError(
                        f"{path}: tensor shapes {w.shape}/{b.shape} do not match spec {expect}"
                    )
                model.params.append((w, b))
                in_c = d.filters
            else:
                model.params.append(None)
    except StopIteration:
        raise TruncatedModelError(f"{path}: fewer tensors than the spec requires") from None
    if next(it, None) is not None:
        raise ModelFileError(f"{path}: more tensors than the spec requires")
    return model


# ---------------------------------------------------------------------------
# Shipped presets


def preset_names() -> list[str]:
    from importlib import resources

    names = []
    for entry in resources.files(__package__).joinpath("presets").iterdir():
        if entry.name.endswith(".spec"):
            names.append(entry.name[: -len(".spec")])
    return sorted(names)


def load_preset(name: str) -> ArchitectureSpec:
    """Load a shipped architecture by name (see preset_names())."""
    from importlib import resources

    ref = resources.files(__package__).joinpath("presets").joinpath(f"{name}.spec")
    if not ref.is_file():
        raise SpecError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return parse_spec(ref.read_text(encoding="utf-8"))
