"""Encoder-decoder segmentation backbone with a twin-projection branch.

Structure (per level L, feature width doubles while resolution halves):

    init_conv                       3x3x3, in_channels -> f
    encoder0   blocks[0] x resblock
    encoderL   stride-2 conv + blocks[L] x resblock        L = 1..depth
    decoderL   2x upsample + 1x1x1 conv (channel halving)
               + encoder skip + 1 resblock                  L = depth-1..0
    head       IN, ReLU, 1x1x1 conv -> out_classes, sigmoid

Each residual block is pre-activation: IN, ReLU, conv, IN, ReLU, conv, then
the identity skip.  `forward_features` returns the decoder0 block output
(the activation feeding the head); the projection branch pools it, reshapes
each pooled location into a row, and applies a 3-layer MLP.  The projection
is used in training only; `forward_segmentation` never touches it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import errors
from .volume import _read_exact

RCKP_MAGIC = b"RCKP"
RCKP_VERSION = 1


@dataclass
class ProjectionConfig:
    pool_factor: int = 4
    mlp_hidden: int | None = None  # defaults to 4 * init_filters
    mlp_out: int = 64
    normalize_hidden: bool = False


@dataclass
class SegResNetConfig:
    in_channels: int = 4
    init_filters: int = 8
    depth: int = 3
    blocks_per_level: tuple[int, ...] = (1, 2, 2, 4)
    out_classes: int = 3
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)

    def __post_init__(self):
        self.blocks_per_level = tuple(self.blocks_per_level)
        if isinstance(self.projection, dict):
            self.projection = ProjectionConfig(**self.projection)

    def validate(self) -> None:
        if self.depth < 1:
            raise errors.InvalidConfig(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.init_filters < 1 or self.out_classes < 1:
            raise errors.InvalidConfig("channel counts must be >= 1")
        if len(self.blocks_per_level) != self.depth + 1:
            raise errors.InvalidConfig(
                f"blocks_per_level needs {self.depth + 1} entries, got {len(self.blocks_per_level)}"
            )
        if any(n < 1 for n in self.blocks_per_level):
            raise errors.InvalidConfig("every level needs at least one block")
        if self.projection.pool_factor < 1:
            raise errors.InvalidConfig("pool_factor must be >= 1")

    def width(self, level: int) -> int:
        return self.init_filters * (2 ** level)

    @property
    def mlp_hidden(self) -> int:
        return self.projection.mlp_hidden or 4 * self.init_filters


class SegResNetModel:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: SegResNetConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.params = params

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _param_spec(config: SegResNetConfig):
    """Yield (name, kind, shape) in deterministic build order."""
    f = config.init_filters
    yield "init_conv.w", "conv", (f, config.in_channels, 3, 3, 3)
    yield "init_conv.b", "bias", (f,)
    for level in range(config.depth + 1):
        width = config.width(level)
        if level > 0:
            yield f"encoder{level}.down.w", "conv", (width, config.width(level - 1), 3, 3, 3)
            yield f"encoder{level}.down.b", "bias", (width,)
        for j in range(config.blocks_per_level[level]):
            for piece in _block_spec(f"encoder{level}.block{j}", width):
                yield piece
    for level in range(config.depth - 1, -1, -1):
        width = config.width(level)
        yield f"decoder{level}.up.w", "lin", (width, config.width(level + 1))
        yield f"decoder{level}.up.b", "bias", (width,)
        for piece in _block_spec(f"decoder{level}.block0", width):
            yield piece
    yield "head.norm.gamma", "gamma", (f,)
    yield "head.norm.beta", "beta", (f,)
    yield "head.conv.w", "lin", (config.out_classes, f)
    yield "head.conv.b", "head_bias", (config.out_classes,)
    hidden = config.mlp_hidden
    yield "proj.fc1.w", "lin", (hidden, f)
    yield "proj.fc1.b", "bias", (hidden,)
    yield "proj.fc2.w", "lin", (hidden, hidden)
    yield "proj.fc2.b", "bias", (hidden,)
    yield "proj.fc3.w", "lin", (config.projection.mlp_out, hidden)
    yield "proj.fc3.b", "bias", (config.projection.mlp_out,)


def _block_spec(prefix: str, width: int):
    yield f"{prefix}.norm1.gamma", "gamma", (width,)
    yield f"{prefix}.norm1.beta", "beta", (width,)
    yield f"{prefix}.conv1.w", "conv", (width, width, 3, 3, 3)
    yield f"{prefix}.conv1.b", "bias", (width,)
    yield f"{prefix}.norm2.gamma", "gamma", (width,)
    yield f"{prefix}.norm2.beta", "beta", (width,)
    yield f"{prefix}.conv2.w", "conv", (width, width, 3, 3, 3)
    yield f"{prefix}.conv2.b", "bias", (width,)


def build(config: SegResNetConfig, rng: np.random.Generator,
          dtype=np.float32) -> SegResNetModel:
    """Initialise all parameters; fan-in-scaled uniform for weights and biases."""
    config.validate()
    params: dict[str, ad.Tensor] = {}
    prev_fan = None
    for name, kind, shape in _param_spec(config):
        if kind == "gamma":
            arr = np.ones(shape, dtype)
        elif kind == "beta":
            arr = np.zeros(shape, dtype)
        elif kind == "head_bias":
            # start the sigmoid head near the background prior; foreground
            # classes cover a small voxel fraction and a 0.5-everywhere start
            # drowns their Dice gradient in the sum of squared predictions
            arr = np.full(shape, -2.0, dtype)
        elif kind == "bias":
            bound = 1.0 / np.sqrt(prev_fan)
            arr = rng.uniform(-bound, bound, shape).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, shape).astype(dtype)
            prev_fan = fan_in
        params[name] = ad.parameter(arr)
    return SegResNetModel(config, params)


def parameter_count(config: SegResNetConfig) -> int:
    """Closed-form parameter count for a config."""
    config.validate()
    return sum(int(np.prod(shape)) for _, _, shape in _param_spec(config))


def _conv1x1(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    c, d, h, wd = x.shape
    rows = ad.transpose(ad.reshape(x, (c, d * h * wd)))
    out = ad.linear(rows, w, b)
    return ad.reshape(ad.transpose(out), (w.shape[0], d, h, wd))


def _res_block(p: dict[str, ad.Tensor], prefix: str, x: ad.Tensor) -> ad.Tensor:
    h = ad.relu(ad.instance_norm(x, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"]))
    h = ad.conv3(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    h = ad.relu(ad.instance_norm(h, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"]))
    h = ad.conv3(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    return ad.add(h, x)


def _check_divisible(config: SegResNetConfig, x: ad.Tensor) -> None:
    if x.data.ndim != 4 or x.shape[0] != config.in_channels:
        raise errors.ShapeMismatch(
            f"expected input [{config.in_channels},D,H,W], got {x.shape}"
        )
    m = 2 ** config.depth
    if any(s % m for s in x.shape[1:]):
        raise errors.IndivisibleShape(
            f"spatial dims {tuple(x.shape[1:])} not divisible by 2^depth = {m}"
        )


def forward_features(model: SegResNetModel, x: ad.Tensor) -> ad.Tensor:
    """Run encoder and decoder; returns the decoder0 output [f, D, H, W]."""
    cfg, p = model.config, model.params
    _check_divisible(cfg, x)
    h = ad.conv3(x, p["init_conv.w"], p["init_conv.b"])
    skips = []
    for level in range(cfg.depth + 1):
        if level > 0:
            h = ad.conv3(h, p[f"encoder{level}.down.w"], p[f"encoder{level}.down.b"], stride=2)
        for j in range(cfg.blocks_per_level[level]):
            h = _res_block(p, f"encoder{level}.block{j}", h)
        if level < cfg.depth:
            skips.append(h)
    for level in range(cfg.depth - 1, -1, -1):
        h = ad.upsample_nearest2(h)
        h = _conv1x1(h, p[f"decoder{level}.up.w"], p[f"decoder{level}.up.b"])
        h = ad.add(h, skips[level])
        h = _res_block(p, f"decoder{level}.block0", h)
    return h


def segmentation_head(model: SegResNetModel, features: ad.Tensor) -> ad.Tensor:
    p = model.params
    h = ad.relu(ad.instance_norm(features, p["head.norm.gamma"], p["head.norm.beta"]))
    return ad.sigmoid(_conv1x1(h, p["head.conv.w"], p["head.conv.b"]))


def forward_segmentation(model: SegResNetModel, x: ad.Tensor) -> ad.Tensor:
    """Full pass to per-class probabilities [out_classes, D, H, W]."""
    return segmentation_head(model, forward_features(model, x))


def predict(model: SegResNetModel, v) -> "Volume":
    """Inference on a Volume: trunk and head only, no graph recording.

    The projection branch is never evaluated here; its parameters may even
    be absent or invalid without affecting the output.
    """
    from .volume import Volume
    with ad.no_grad():
        out = forward_segmentation(model, ad.constant(v.data))
    return Volume(out.data)


def forward_projection(model: SegResNetModel, features: ad.Tensor) -> ad.Tensor:
    """Pool features, one row per pooled location, then the 3-layer MLP."""
    cfg, p = model.config, model.params
    k = cfg.projection.pool_factor
    pooled = ad.avg_pool(features, k)
    f = pooled.shape[0]
    regions = int(np.prod(pooled.shape[1:]))
    if regions < 2:
        raise errors.TooFewRegions(
            f"pooled grid {tuple(pooled.shape[1:])} has {regions} region(s); need >= 2"
        )
    rows = ad.transpose(ad.reshape(pooled, (f, regions)))
    h = ad.linear(rows, p["proj.fc1.w"], p["proj.fc1.b"])
    if cfg.projection.normalize_hidden:
        h = ad.feature_norm(h)
    h = ad.relu(h)
    h = ad.linear(h, p["proj.fc2.w"], p["proj.fc2.b"])
    if cfg.projection.normalize_hidden:
        h = ad.feature_norm(h)
    h = ad.relu(h)
    return ad.linear(h, p["proj.fc3.w"], p["proj.fc3.b"])


# -- RCKP checkpoint container --------------------------------------------------

def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, np.float32).tobytes())


def save_checkpoint(path, params: dict[str, np.ndarray],
                    optimizer_state=None) -> None:
    """Write named float32 tensors; optimizer moments ride along as
    `<name>.m` / `<name>.v` entries plus a scalar `optim.step`."""
    entries: list[tuple[str, np.ndarray]] = list(params.items())
    if optimizer_state is not None:
        for name in params:
            entries.append((f"{name}.m", optimizer_state.m[name]))
            entries.append((f"{name}.v", optimizer_state.v[name]))
        entries.append(("optim.step", np.float32(optimizer_state.step)))
    try:
        with open(path, "wb") as fh:
            fh.write(RCKP_MAGIC)
            fh.write(struct.pack("<2I", RCKP_VERSION, len(entries)))
            for name, arr in entries:
                _write_entry(fh, name, np.asarray(arr))
    except OSError as err:
        raise errors.IoError(f"cannot write {path}: {err}") from err


def load_checkpoint(path):
    """Read an RCKP file; returns (params, optimizer_entries, step).

    `optimizer_entries` maps parameter name -> (m, v); step is None when the
    checkpoint carries no optimizer state.
    """
    try:
        fh = open(path, "rb")
    except OSError as err:
        raise errors.IoError(f"cannot read {path}: {err}") from err
    with fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != RCKP_MAGIC:
            raise errors.BadMagic(f"bad magic {magic!r}, expected {RCKP_MAGIC!r}")
        version, count = struct.unpack("<2I", _read_exact(fh, 8, "header"))
        if version != RCKP_VERSION:
            raise errors.UnsupportedVersion(f"RCKP version {version} not supported")
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * n, f"payload of {name}")
            entries[name] = np.frombuffer(payload, np.float32).reshape(dims).copy()
        if fh.read(1):
            raise errors.IoError(f"{path}: trailing bytes after last entry")
    step = entries.pop("optim.step", None)
    params: dict[str, np.ndarray] = {}
    moments: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in entries.items():
        if name.endswith(".m") or name.endswith(".v"):
            moments.setdefault(name[:-2], {})[name[-1]] = arr
        else:
            params[name] = arr
    opt = {k: (mv["m"], mv["v"]) for k, mv in moments.items()} if moments else None
    return params, opt, (int(step) if step is not None else None)


def config_from_params(params: dict[str, np.ndarray]) -> SegResNetConfig:
    """Reconstruct the architecture from checkpoint parameter names/shapes.

    The projection pool factor is not recoverable (it leaves no parameter
    footprint) and keeps its default; inference never uses it.
    """
    try:
        f, in_ch = params["init_conv.w"].shape[:2]
        depth = max(
            int(n.split(".")[0][len("encoder"):])
            for n in params if n.startswith("encoder") and ".down.w" in n
        )
        blocks = []
        for level in range(depth + 1):
            js = [
                int(n.split(".")[1][len("block"):])
                for n in params if n.startswith(f"encoder{level}.block")
            ]
            blocks.append(max(js) + 1)
        out_classes = params["head.conv.w"].shape[0]
        hidden = params["proj.fc1.w"].shape[0]
        mlp_out = params["proj.fc3.w"].shape[0]
    except (KeyError, ValueError) as err:
        raise errors.InvalidConfig(f"checkpoint is not a SegResNet state: {err}") from err
    return SegResNetConfig(
        in_channels=int(in_ch), init_filters=int(f), depth=depth,
        blocks_per_level=tuple(blocks), out_classes=int(out_classes),
        projection=ProjectionConfig(mlp_hidden=int(hidden), mlp_out=int(mlp_out)),
    )


def model_from_params(params: dict[str, np.ndarray],
                      trainable: bool = False) -> SegResNetModel:
    config = config_from_params(params)
    expected = [name for name, _, _ in _param_spec(config)]
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in set(expected)]
    if missing or extra:
        raise errors.InvalidConfig(
            f"checkpoint params do not match architecture (missing {missing[:3]}, extra {extra[:3]})"
        )
    tensors = {
        name: ad.Tensor(params[name], requires_grad=trainable) for name in expected
    }
    return SegResNetModel(config, tensors)
