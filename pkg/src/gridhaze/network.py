"""GridDehazeNet: learned pre-processing, attention-fused grid backbone, post-processing.

Grid layout
-----------
Node ``(s, j)`` sits at scale (row) ``s`` and column ``j``. Row streams run
left to right through one residual dense block between consecutive columns,
so each row has ``cols - 1`` blocks. Columns ``j < cols // 2`` carry stride-2
downsampling from scale ``s - 1`` into ``(s, j)``; the remaining columns carry
upsampling from scale ``s + 1``. A node fed by both streams fuses them with
per-channel attention weights, ``a_row * F_row + a_col * F_col``. The output is
taken from node ``(0, cols - 1)``.

Every ablation variant reuses the same parameter registry: routing switches
only decide which branches feed each node, so a pruned model can be run with
the parameters of the full one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import graph as G
from .graph import Tensor
from .haze import DEFAULT_T_FLOOR, derived_inputs


class ConfigError(ValueError):
    """GridConfig violates an architectural invariant."""


HEADS = ("direct", "indirect")
BLOCKS = ("rdb", "residual")
INPUTS = ("learned", "derived", "rgb")
ROUTES = ("grid", "encoder_decoder")


@dataclass(frozen=True)
class GridConfig:
    rows: int = 3
    cols: int = 6
    channels_per_scale: tuple[int, ...] = (16, 32, 64)
    rdb_layers: int = 5
    growth_rate: int = 16
    attention: bool = True
    attention_shared: bool = False
    exchange_branches: bool = True
    route: str = "grid"
    head: str = "direct"
    block: str = "rdb"
    inputs: str = "learned"
    postprocessing: bool = True
    rdb_per_row: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels_per_scale", tuple(int(c) for c in self.channels_per_scale))
        if self.rdb_per_row is None:
            object.__setattr__(self, "rdb_per_row", self.cols - 1)
        self.validate()

    def validate(self) -> None:
        if self.rows < 1:
            raise ConfigError(f"rows must be >= 1, got {self.rows}")
        if self.cols < 2 or self.cols % 2:
            raise ConfigError(f"cols must be even and >= 2, got {self.cols}")
        ch = self.channels_per_scale
        if len(ch) != self.rows:
            raise ConfigError(f"need one channel count per row ({self.rows}), got {list(ch)}")
        if ch[0] < 1:
            raise ConfigError("channel counts must be positive")
        for s in range(self.rows - 1):
            if ch[s + 1] != 2 * ch[s]:
                raise ConfigError(f"channels must double between scales, got {list(ch)}")
        if self.rdb_layers < 2:
            raise ConfigError("an RDB needs at least one growth layer and the fusion layer")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be positive")
        if self.rdb_per_row != self.cols - 1:
            raise ConfigError(
                f"rdb_per_row must equal cols - 1 = {self.cols - 1} (one block between columns)"
            )
        for value, allowed, name in ((self.head, HEADS, "head"), (self.block, BLOCKS, "block"),
                                     (self.inputs, INPUTS, "inputs"), (self.route, ROUTES, "route")):
            if value not in allowed:
                raise ConfigError(f"unknown {name} {value!r}; choose from {allowed}")
        if self.inputs == "derived" and ch[0] != 16:
            raise ConfigError("derived inputs are a 16-channel stack; need channels_per_scale[0] == 16")
        if self.inputs == "rgb" and ch[0] < 3:
            raise ConfigError("rgb inputs need at least 3 channels at the first scale")

    @property
    def multiple(self) -> int:
        """Spatial dims must be divisible by this."""
        return 2 ** (self.rows - 1)

    @property
    def out_channels(self) -> int:
        return 3 if self.head == "direct" else 2

    def to_json(self) -> str:
        d = asdict(self)
        d["channels_per_scale"] = list(self.channels_per_scale)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "GridConfig":
        d = json.loads(text)
        d["channels_per_scale"] = tuple(d["channels_per_scale"])
        return cls(**d)


def reduced_config(**overrides) -> GridConfig:
    """Small 3x6 grid (channels 4/8/16, growth 4) for fast checks."""
    base = dict(channels_per_scale=(4, 8, 16), growth_rate=4)
    base.update(overrides)
    return GridConfig(**base)


# --- parameter registry -----------------------------------------------------------------

def _conv_shapes(prefix: str, c_out: int, c_in: int, k: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}.weight", (c_out, c_in, k, k)), (f"{prefix}.bias", (c_out,))]


def _block_shapes(prefix: str, c: int, config: GridConfig) -> list[tuple[str, tuple]]:
    if config.block == "residual":
        return _conv_shapes(f"{prefix}.conv0", c, c, 3) + _conv_shapes(f"{prefix}.conv1", c, c, 3)
    g = config.growth_rate
    shapes = []
    for k in range(config.rdb_layers - 1):
        shapes += _conv_shapes(f"{prefix}.dense{k}", g, c + k * g, 3)
    shapes += _conv_shapes(f"{prefix}.fuse", c, c + (config.rdb_layers - 1) * g, 1)
    return shapes


def fusion_nodes(config: GridConfig) -> list[tuple[int, int]]:
    """Nodes that receive both a row and a column stream in the full grid."""
    half = config.cols // 2
    nodes = []
    for j in range(1, config.cols):
        for s in range(config.rows):
            if (j < half and s >= 1) or (j >= half and s <= config.rows - 2):
                nodes.append((s, j))
    return nodes


def parameter_shapes(config: GridConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) table; a pure function of the configuration."""
    ch = config.channels_per_scale
    r, c = config.rows, config.cols
    half = c // 2
    shapes: list[tuple[str, tuple]] = []
    if config.inputs == "learned":
        shapes += _conv_shapes("pre.conv", ch[0], 3, 3)
        shapes += _block_shapes("pre.rdb", ch[0], replace(config, block="rdb"))
    for s in range(r):
        for j in range(c - 1):
            shapes += _block_shapes(f"grid.row{s}.block{j}", ch[s], config)
    for j in range(half):
        for s in range(1, r):
            shapes += _conv_shapes(f"grid.down{s}.col{j}.conv0", ch[s - 1], ch[s - 1], 3)
            shapes += _conv_shapes(f"grid.down{s}.col{j}.conv1", ch[s], ch[s - 1], 3)
    for j in range(half, c):
        for s in range(r - 1):
            # transposed conv kernel is (c_in, c_out, k, k)
            shapes += _conv_shapes(f"grid.up{s}.col{j}.tconv", ch[s + 1], ch[s + 1], 3)
            shapes += _conv_shapes(f"grid.up{s}.col{j}.conv1", ch[s], ch[s + 1], 3)
    if config.attention:
        width = 1 if config.attention_shared else None
        for s, j in fusion_nodes(config):
            n = width or ch[s]
            shapes += [(f"grid.attn{s}.col{j}.row", (n,)), (f"grid.attn{s}.col{j}.col", (n,))]
    if config.postprocessing:
        shapes += _block_shapes("post.rdb", ch[0], replace(config, block="rdb"))
    shapes += _conv_shapes("post.conv", config.out_channels, ch[0], 3)
    return shapes


@dataclass
class ModelParams:
    config: GridConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                         for k, v in self.tensors.items()})

    def zero_grads(self) -> None:
        G.zero_grads(self.tensors.values())


def _fan_in(name: str, shape: tuple) -> int:
    if ".tconv." in name:
        return shape[0] * shape[2] * shape[3]
    return shape[1] * shape[2] * shape[3]


def build(config: GridConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: conv weights uniform in +-1/sqrt(fan_in), biases zero,
    attention weights 0.5."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape)
        elif ".attn" in name:
            data = np.full(shape, 0.5)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# --- building blocks ----------------------------------------------------------------------

def _conv(x: Tensor, p: ModelParams, prefix: str, stride: int = 1) -> Tensor:
    w = p[f"{prefix}.weight"]
    pad = w.shape[2] // 2
    return G.conv2d(x, w, p[f"{prefix}.bias"], stride=stride, padding=pad)


def rdb_forward(x: Tensor, p: ModelParams, prefix: str, layers: int | None = None) -> Tensor:
    """Residual dense block: each 3x3 layer sees the input and all earlier
    growth outputs; a 1x1 fusion maps back to the input width and is added."""
    layers = layers or p.config.rdb_layers
    c = p[f"{prefix}.fuse.weight"].shape[0]
    if x.shape[1] != c:
        raise G.ShapeError(f"{prefix}: input has {x.shape[1]} channels, block expects {c}")
    feats = [x]
    for k in range(layers - 1):
        inp = x if k == 0 else G.concat_channels(*feats)
        feats.append(G.relu(_conv(inp, p, f"{prefix}.dense{k}")))
    return G.add(x, _conv(G.concat_channels(*feats), p, f"{prefix}.fuse"))


def residual_forward(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return G.add(x, _conv(G.relu(_conv(x, p, f"{prefix}.conv0")), p, f"{prefix}.conv1"))


def _block(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    if p.config.block == "residual":
        return residual_forward(x, p, prefix)
    return rdb_forward(x, p, prefix)


def downsample(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    """(n, C, h, w) -> (n, 2C, h/2, w/2)."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise G.ShapeError(f"{prefix}: downsampling needs even spatial dims, got {x.shape[2:]}")
    return G.relu(_conv(G.relu(_conv(x, p, f"{prefix}.conv0", stride=2)), p, f"{prefix}.conv1"))


def upsample(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    """(n, 2C, h, w) -> (n, C, 2h, 2w)."""
    y = G.transposed_conv2d(x, p[f"{prefix}.tconv.weight"], p[f"{prefix}.tconv.bias"],
                            stride=2, padding=1, output_padding=1)
    return G.relu(_conv(G.relu(y), p, f"{prefix}.conv1"))


def fuse(row: Tensor, col: Tensor, a_row: Tensor | None = None, a_col: Tensor | None = None) -> Tensor:
    """Channel-wise attention fusion; plain addition when no weights are given."""
    if row.shape != col.shape:
        raise G.ShapeError(f"fuse: row stream {row.shape} and column stream {col.shape} differ")
    if a_row is None:
        return G.add(row, col)
    return G.add(G.scale_channel(row, a_row), G.scale_channel(col, a_col))


# --- forward ------------------------------------------------------------------------------

def node_inputs(config: GridConfig, s: int, j: int) -> tuple[bool, bool] | None:
    """Which of (row stream, column stream) feed node (s, j); None if unused."""
    r, c = config.rows, config.cols
    half = c // 2
    if config.route == "encoder_decoder":
        if j == 0:
            return False, s >= 1
        if s == r - 1:
            return True, False
        if j == c - 1:
            return False, True
        return None
    has_col = (j < half and s >= 1) or (j >= half and s <= r - 2)
    if not config.exchange_branches and 1 <= j <= c - 2:
        has_col = False
    return j >= 1, has_col


def _as_image(image) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if t.data.ndim != 4 or t.shape[1] != 3:
        raise G.ShapeError(f"expected an (n, 3, h, w) image batch, got {t.shape}")
    return t


def preprocess(x: Tensor, p: ModelParams) -> Tensor:
    cfg = p.config
    if cfg.inputs == "derived":
        return Tensor(derived_inputs(x.data).data.astype(x.data.dtype))
    if cfg.inputs == "rgb":
        n, _, h, w = x.shape
        zeros = Tensor(np.zeros((n, cfg.channels_per_scale[0] - 3, h, w), dtype=x.data.dtype))
        return G.concat_channels(x, zeros) if zeros.shape[1] else x
    return rdb_forward(_conv(x, p, "pre.conv"), p, "pre.rdb")


def backbone(feats: Tensor, p: ModelParams) -> dict[tuple[int, int], Tensor]:
    cfg = p.config
    r, c = cfg.rows, cfg.cols
    half = c // 2
    nodes: dict[tuple[int, int], Tensor] = {}
    for j in range(c):
        order = range(r) if j < half else range(r - 1, -1, -1)
        for s in order:
            if (s, j) == (0, 0):
                nodes[(0, 0)] = feats
                continue
            use = node_inputs(cfg, s, j)
            if use is None:
                continue
            use_row, use_col = use
            row = _block(nodes[(s, j - 1)], p, f"grid.row{s}.block{j - 1}") if use_row else None
            col = None
            if use_col:
                if j < half:
                    col = downsample(nodes[(s - 1, j)], p, f"grid.down{s}.col{j}")
                else:
                    col = upsample(nodes[(s + 1, j)], p, f"grid.up{s}.col{j}")
            if row is not None and col is not None:
                if cfg.attention:
                    nodes[(s, j)] = fuse(row, col, p[f"grid.attn{s}.col{j}.row"], p[f"grid.attn{s}.col{j}.col"])
                else:
                    nodes[(s, j)] = fuse(row, col)
            else:
                nodes[(s, j)] = row if row is not None else col
    return nodes


def forward(image, params: ModelParams, config: GridConfig | None = None, return_nodes: bool = False):
    """Run the network.

    Direct head returns the (n, 3, h, w) estimate (unclamped). Indirect head
    returns ``(t_hat, A_hat)`` with ``t_hat`` (n, 1, h, w) squashed into (0, 1)
    and ``A_hat`` (n, 1, 1, 1) the spatial mean of the second output map.
    ``config`` overrides the routing of ``params.config``; the parameter
    registry must still contain every tensor the routing touches.
    """
    p = params if config is None else ModelParams(config, params.tensors)
    cfg = p.config
    x = _as_image(image)
    h, w = x.shape[2:]
    if h % cfg.multiple or w % cfg.multiple:
        raise G.ShapeError(
            f"spatial dims {h}x{w} must be multiples of {cfg.multiple} for a {cfg.rows}-row grid"
        )
    nodes = backbone(preprocess(x, p), p)
    y = nodes[(0, cfg.cols - 1)]
    if cfg.postprocessing:
        y = rdb_forward(y, p, "post.rdb")
    y = _conv(y, p, "post.conv")
    if cfg.head == "indirect":
        t_hat = G.sigmoid(G.slice_channels(y, 0, 1))
        a_hat = G.mean_spatial(G.slice_channels(y, 1, 2))
        out = (t_hat, a_hat)
    else:
        out = y
    return (out, nodes) if return_nodes else out


def dehaze(image, params: ModelParams, config: GridConfig | None = None, clamp: bool = True,
           t_floor: float = DEFAULT_T_FLOOR) -> Tensor:
    """Dehazed image for either head; ``clamp`` applies the inference-time [0, 1] clip."""
    x = _as_image(image)
    cfg = config or params.config
    out = forward(x, params, cfg)
    if cfg.head == "indirect":
        t_hat, a_hat = out
        out = G.invert_scattering(x, t_hat, a_hat, t_floor)
    if clamp:
        return Tensor(np.clip(out.data, 0, 1))
    return out


# --- ablations ----------------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "no_attention": {"attention": False},
    "no_exchange": {"exchange_branches": False},
    "encoder_decoder": {"route": "encoder_decoder"},
    "original_gridnet_style": {"attention": False, "block": "residual"},
    "derived_inputs": {"inputs": "derived"},
    "no_preprocessing": {"inputs": "rgb"},
    "indirect_head": {"head": "indirect"},
    "no_postprocessing": {"postprocessing": False},
    # loss-level variant; the architecture is unchanged
    "no_perceptual": {},
}


def apply_ablation(config: GridConfig, variant: str) -> GridConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(config, **VARIANTS[variant])


def masked_attention(params: ModelParams) -> ModelParams:
    """Copy of ``params`` whose attention weights reproduce the encoder-decoder route
    on the full grid: 1 on the path's branch, 0 on the other."""
    cfg = params.config
    if not cfg.attention:
        raise ConfigError("masking needs a configuration with attention weights")
    ed = replace(cfg, route="encoder_decoder")
    out = params.copy()
    for s, j in fusion_nodes(cfg):
        use = node_inputs(ed, s, j) or (False, False)
        for branch, on in zip(("row", "col"), use):
            t = out[f"grid.attn{s}.col{j}.{branch}"]
            t.data = np.full_like(t.data, 1.0 if on else 0.0)
    return out
