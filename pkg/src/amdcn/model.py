"""The aggregated multicolumn dilated convolution network.

Parallel columns of dilated 3x3 convolutions (ReLU after each) read the same
input; their feature maps are concatenated along channels and fused by an
aggregator stack ending in one density channel.  No activation follows the last
layer.
"""

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from amdcn.tensor import ConvSpec, Tensor, concat_channels, conv2d, relu

GAMMA = 255.0
AGGREGATOR_DILATIONS = (1, 2, 4, 8, 16, 1)
MAX_COLUMNS = 5


@dataclass(frozen=True)
class ColumnSpec:
    layers: tuple
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError(f"column {self.label!r} has no layers")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_channels != prev.out_channels:
                raise ValueError(
                    f"column {self.label!r}: layer in_channels {cur.in_channels} "
                    f"!= previous out_channels {prev.out_channels}"
                )


@dataclass(frozen=True)
class ModelConfig:
    """Columns, aggregator and widths.  ``aggregator=None`` means a 1x1 head."""

    columns: tuple
    input_channels: int
    feature_maps: int = 32
    aggregator: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.aggregator is not None:
            object.__setattr__(self, "aggregator", tuple(self.aggregator))
        if not 1 <= len(self.columns) <= MAX_COLUMNS:
            raise ValueError(f"number of columns must be in 1..{MAX_COLUMNS}, got {len(self.columns)}")
        for col in self.columns:
            if col.layers[0].in_channels != self.input_channels:
                raise ValueError(
                    f"column {col.label!r} expects {col.layers[0].in_channels} input channels, "
                    f"model has {self.input_channels}"
                )
        head = self.head_layers()
        if head[0].in_channels != self.concat_channels:
            raise ValueError(
                f"head expects {head[0].in_channels} channels, concatenation gives {self.concat_channels}"
            )
        for prev, cur in zip(head, head[1:]):
            if cur.in_channels != prev.out_channels:
                raise ValueError("aggregator layers are not chained consistently")
        if head[-1].out_channels != 1:
            raise ValueError("final layer must produce a single density channel")

    @property
    def with_aggregator(self):
        return self.aggregator is not None

    @property
    def concat_channels(self):
        return sum(col.layers[-1].out_channels for col in self.columns)

    def head_layers(self):
        if self.aggregator is not None:
            return self.aggregator
        return (ConvSpec(self.concat_channels, 1, (1, 1), 1),)

    def layer_names(self):
        """``(name, ConvSpec)`` for every conv in execution order."""
        out = []
        for c, col in enumerate(self.columns, start=1):
            out.extend((f"col{c}.{i}", spec) for i, spec in enumerate(col.layers))
        prefix = "agg" if self.with_aggregator else "head"
        out.extend((f"{prefix}.{i}", spec) for i, spec in enumerate(self.head_layers()))
        return out

    def num_params(self):
        return sum(spec.num_params for _, spec in self.layer_names())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        def conv(s):
            return ConvSpec(s["in_channels"], s["out_channels"], tuple(s["kernel_size"]), s["dilation"])

        cols = tuple(ColumnSpec(tuple(conv(s) for s in c["layers"]), c.get("label", "")) for c in d["columns"])
        agg = d.get("aggregator")
        agg = None if agg is None else tuple(conv(s) for s in agg)
        return cls(cols, d["input_channels"], d.get("feature_maps", 32), agg)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def column_dilations(k):
    """Dilation schedule of the k-th column (1-based): 1, 2, ..., 2**k."""
    return tuple(2 ** i for i in range(k + 1))


def default_config(num_columns=5, with_aggregator=True, input_channels=1, feature_maps=32):
    if not 1 <= num_columns <= MAX_COLUMNS:
        raise ValueError(f"num_columns must be in 1..{MAX_COLUMNS}, got {num_columns}")
    fm = int(feature_maps)
    columns = []
    for k in range(1, num_columns + 1):
        layers = []
        cin = input_channels
        for d in column_dilations(k):
            layers.append(ConvSpec(cin, fm, (3, 3), d))
            cin = fm
        columns.append(ColumnSpec(tuple(layers), label=f"column{k}"))
    aggregator = None
    if with_aggregator:
        cin = fm * num_columns
        aggregator = []
        for i, d in enumerate(AGGREGATOR_DILATIONS):
            cout = 1 if i == len(AGGREGATOR_DILATIONS) - 1 else fm
            aggregator.append(ConvSpec(cin, cout, (3, 3), d))
            cin = cout
        aggregator = tuple(aggregator)
    return ModelConfig(tuple(columns), input_channels, fm, aggregator)


# ---------------------------------------------------------------------------
# parameters


def init_params(config, seed=0, dtype=np.float64):
    """Glorot-uniform kernels, zero biases.  Returns ``{"<layer>.kernel"|"<layer>.bias": Tensor}``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, spec in config.layer_names():
        kh, kw = spec.kernel_size
        fan_in = spec.in_channels * kh * kw
        fan_out = spec.out_channels * kh * kw
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=spec.kernel_shape).astype(dtype)
        params[f"{name}.kernel"] = Tensor._wrap(w)
        params[f"{name}.bias"] = Tensor._wrap(np.zeros(spec.out_channels, dtype=dtype))
    return params


def zero_params(config, dtype=np.float64):
    return {
        k: Tensor._wrap(np.zeros(v.shape, dtype=dtype))
        for k, v in init_params(config, 0, dtype).items()
    }


def count_params(params):
    return sum(t.size for t in params.values())


def check_params(params, config):
    expected = {}
    for name, spec in config.layer_names():
        expected[f"{name}.kernel"] = spec.kernel_shape
        expected[f"{name}.bias"] = (spec.out_channels,)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing={missing}, unexpected={extra})")
    for k, shape in expected.items():
        if tuple(params[k].shape) != tuple(shape):
            raise ValueError(f"parameter {k} has shape {params[k].shape}, config expects {shape}")


# ---------------------------------------------------------------------------
# forward


def _as_tensor(image):
    if isinstance(image, Tensor):
        return image
    return Tensor._wrap(np.ascontiguousarray(image, dtype=np.float64))


def forward(params, config, image, capture=None):
    """Network-space (gamma-scaled) density ``[B,1,H,W]`` for a normalized image batch.

    If ``capture`` is a dict, intermediate tensors are stored in it under
    ``"col<k>"`` and ``"concat"``.
    """
    x = _as_tensor(image)
    if x.data.ndim != 4:
        raise ValueError(f"image batch must be 4-D [B,C,H,W], got shape {x.shape}")
    if x.shape[1] != config.input_channels:
        raise ValueError(f"image has {x.shape[1]} channels, config expects {config.input_channels}")

    col_outs = []
    for c, col in enumerate(config.columns, start=1):
        h = x
        for i, spec in enumerate(col.layers):
            h = relu(conv2d(h, params[f"col{c}.{i}.kernel"], params[f"col{c}.{i}.bias"], spec))
        col_outs.append(h)
        if capture is not None:
            capture[f"col{c}"] = h
    h = concat_channels(col_outs)
    if capture is not None:
        capture["concat"] = h

    prefix = "agg" if config.with_aggregator else "head"
    head = config.head_layers()
    for i, spec in enumerate(head):
        h = conv2d(h, params[f"{prefix}.{i}.kernel"], params[f"{prefix}.{i}.bias"], spec)
        if i < len(head) - 1:
            h = relu(h)
    return h


def predict_count(params, config, image, gamma=GAMMA):
    out = forward(params, config, image)
    return max(0.0, float(out.data.sum()) / gamma)


# ---------------------------------------------------------------------------
# checkpoint file
#
# layout (all integers little-endian):
#   8 bytes   magic b"AMDCNCKP"
#   u32       format version
#   u64       header length N
#   N bytes   UTF-8 JSON header: fingerprint, config, metadata,
#             tensors = [{name, shape, offset, count}]
#   ...       raw float64 little-endian values, concatenated in table order
#   u32       CRC32 of everything above


MAGIC = b"AMDCNCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or mismatched checkpoint files."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)


def save_params(params, path, config, metadata=None):
    check_params(params, config)
    names = [f"{n}.{suffix}" for n, _ in config.layer_names() for suffix in ("kernel", "bias")]
    table, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 8
    header = json.dumps(
        {
            "fingerprint": config.fingerprint(),
            "config": config.to_dict(),
            "metadata": metadata or {},
            "tensors": table,
        },
        sort_keys=True,
    ).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, config=None):
    """Read a checkpoint; if ``config`` is given its fingerprint must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    prefix = len(MAGIC) + 12
    if len(blob) < prefix + 4 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    version, hlen = struct.unpack("<IQ", body[len(MAGIC):prefix])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(body[prefix:prefix + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    stored = ModelConfig.from_dict(header["config"])
    if stored.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: header fingerprint does not match stored config")
    if config is not None and config.fingerprint() != header["fingerprint"]:
        raise CheckpointError(
            f"{path}: config fingerprint {header['fingerprint']} does not match requested "
            f"config {config.fingerprint()}"
        )
    data = body[prefix + hlen:]
    params = {}
    for entry in header["tensors"]:
        start, count = entry["offset"], entry["count"]
        if start + count * 8 > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} extends past end of data")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64)
        params[entry["name"]] = Tensor._wrap(arr.reshape(entry["shape"]))
    try:
        check_params(params, stored)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return Checkpoint(stored, params, header.get("metadata", {}))


def load_params(path, config):
    return load_checkpoint(path, config).params
