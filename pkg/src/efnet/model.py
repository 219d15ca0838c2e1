"""Four-stage early-fusion segmentation model and its ablation variants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn, serialize
from . import tensor as T
from .dbtc import DownsampleParams, PixelCoordEncoding, TokenSet, cluster_downsample
from .errors import ConfigError, ContractError, DimensionError
from .mfad import SegPrediction, aggregate_multiscale, class_distance, init_class_tokens, predict, softmax_classes
from .mif import ChannelGate, mif_fuse
from .tensor import Tensor

FUSION_MODES = ("mif", "add", "cat")
POSITION_MODES = ("none", "pe", "pce")
DECODER_MODES = ("euclid", "mlp")
DOWNSAMPLE_MODES = ("dbtc", "pool")
UPSAMPLE_MODES = ("logits", "probs")
PATCH = 4
EMBED_KERNEL = 4


@dataclass
class ModelConfig:
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    mlp_ratio: int = 2
    window: int = 8
    tau: tuple[float, float, float] = (0.3, 0.7, 1.0)
    knn_k: int = 5
    ratio: float = 0.25
    fusion: str = "mif"
    position: str = "pce"
    decoder: str = "euclid"
    downsample: str = "dbtc"
    num_classes: int = 9
    height: int = 64
    width: int = 64
    symmetric_tau: bool = False
    upsample: str = "logits"

    def __post_init__(self):
        for name in ("channels", "depths", "heads", "tau"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(name, msg)

        for name in ("channels", "depths", "heads"):
            v = getattr(self, name)
            need(len(v) == 4 and all(int(x) == x for x in v), name, "needs four integers")
        need(all(c >= 1 for c in self.channels), "channels", "must be positive")
        need(all(d >= 0 for d in self.depths), "depths", "must be nonnegative")
        need(all(h >= 1 and c % h == 0 for c, h in zip(self.channels, self.heads)), "heads", "must divide channels")
        need(self.mlp_ratio >= 1, "mlp_ratio", "must be >= 1")
        need(self.window >= 1, "window", "must be >= 1")
        need(len(self.tau) == 3 and all(0.0 <= t <= 1.0 for t in self.tau), "tau", "needs three values in [0, 1]")
        need(self.knn_k >= 1, "knn_k", "must be >= 1")
        need(0.0 < self.ratio <= 1.0, "ratio", "must lie in (0, 1]")
        need(self.fusion in FUSION_MODES, "fusion", f"must be one of {FUSION_MODES}")
        need(self.position in POSITION_MODES, "position", f"must be one of {POSITION_MODES}")
        need(self.decoder in DECODER_MODES, "decoder", f"must be one of {DECODER_MODES}")
        need(self.downsample in DOWNSAMPLE_MODES, "downsample", f"must be one of {DOWNSAMPLE_MODES}")
        need(self.upsample in UPSAMPLE_MODES, "upsample", f"must be one of {UPSAMPLE_MODES}")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.height >= PATCH and self.height % PATCH == 0, "height", "must be a positive multiple of 4")
        need(self.width >= PATCH and self.width % PATCH == 0, "width", "must be a positive multiple of 4")

    def grids(self) -> list[tuple[int, int]]:
        """Nominal spatial extent of each stage's map."""
        h, w = self.height // PATCH, self.width // PATCH
        out = [(h, w)]
        for _ in range(3):
            h, w = -(-h // 2), -(-w // 2)
            out.append((h, w))
        return out

    def replace(self, **changes) -> ModelConfig:
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> Model:
        """Copy with every parameter cast (float64 for gradient checks)."""
        return Model(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    cfg.validate()
    ps = nn.ParamStore(np.random.default_rng(seed), dtype)
    c1 = cfg.channels[0]
    h1, w1 = cfg.grids()[0]
    patch_in = 3 * EMBED_KERNEL * EMBED_KERNEL
    for mod in ("rgb", "thermal"):
        ps.affine(f"embed.{mod}", patch_in, c1)
        ps.add(f"embed.{mod}.pos", 0.02 * ps.rng.standard_normal((h1 * w1, c1)))
        for i in range(cfg.depths[0]):
            ps.block(f"stage1.{mod}.block{i}", c1, cfg.mlp_ratio)
    if cfg.fusion == "mif":
        gate = ChannelGate.init(c1, ps.rng, dtype)
        for part in ("w1", "b1", "w2", "b2"):
            ps.add(f"fuse.gate.{part}", getattr(gate, part).data)
    elif cfg.fusion == "cat":
        ps.affine("fuse.cat", 2 * c1, c1)
    ps.norm("stage1.norm", c1)

    for n in (2, 3, 4):
        c_in, c_out = cfg.channels[n - 2], cfg.channels[n - 1]
        if n >= 3:
            c_prev = cfg.channels[n - 3]
            ps.add(f"bridge{n}.w", np.eye(c_prev, c_in))
            ps.add(f"bridge{n}.b", np.zeros(c_in))
        if cfg.downsample == "dbtc":
            ps.add(f"down{n}.importance.w", np.zeros((c_in, 1)))
            ps.add(f"down{n}.importance.b", np.zeros(1))
            ps.affine(f"down{n}.q", c_in, c_out)
            ps.affine(f"down{n}.k", c_in, c_out, bias=False)
            ps.affine(f"down{n}.v", c_in, c_out)
            ps.affine(f"down{n}.skip", c_in, c_out)
            if cfg.position == "pce":
                ps.add(f"down{n}.pce.scale", np.ones(2))
                ps.add(f"down{n}.pce.offset", np.zeros(2))
        else:
            ps.affine(f"down{n}.proj", c_in, c_out)
        for i in range(cfg.depths[n - 1]):
            ps.block(f"stage{n}.block{i}", c_out, cfg.mlp_ratio)
        ps.norm(f"stage{n}.norm", c_out)

    width = sum(cfg.channels)
    if cfg.decoder == "euclid":
        ps.add("head.class_tokens", init_class_tokens(cfg.num_classes, width, ps.rng, dtype).data)
    else:
        hidden = max(cfg.num_classes, width // 4)
        ps.affine("head.fc1", width, hidden)
        ps.affine("head.fc2", hidden, cfg.num_classes)
    return Model(cfg, ps.tensors)


def count_params(m: Model) -> int:
    return int(sum(t.data.size for t in m.params.values()))


# ---------------------------------------------------------------- forward pieces


def patchify(img: np.ndarray, patch: int = PATCH, kernel: int = PATCH) -> np.ndarray:
    """C×H×W -> (H/p · W/p) × (C·k·k) windows at stride p, row-major.

    ``kernel > patch`` gives overlapping windows centred on each patch
    (zero padding at the border).
    """
    c, h, w = img.shape
    pad = (kernel - patch) // 2
    x = np.pad(img, ((0, 0), (pad, kernel - patch - pad), (pad, kernel - patch - pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::patch, ::patch]
    return win.transpose(1, 2, 0, 3, 4).reshape((h // patch) * (w // patch), c * kernel * kernel)


def stage_bridge(prev: Tensor, cur: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2×2 mean-pool ``prev``, project its channels to ``cur``'s width and add."""
    pooled = T.mean_pool2x2(prev)
    if pooled.shape[1:] != cur.shape[1:]:
        raise DimensionError(f"stage_bridge: previous map {prev.shape} does not pool onto {cur.shape}")
    _, h, wd = cur.shape
    return T.add(cur, nn.tokens_to_map(T.affine(nn.map_to_tokens(pooled), w, b), h, wd))


def regrid_index(assignment: np.ndarray, h: int, w: int, gh: int, gw: int) -> np.ndarray:
    """Token index for each cell of a gh×gw grid laid over an h×w source grid.

    Each target cell covers a block of source cells; it takes the cluster
    holding most of them (lowest cluster id on ties).
    """
    a = np.asarray(assignment).reshape(h, w)
    sh, sw = h / gh, w / gw
    out = np.empty(gh * gw, dtype=np.int64)
    for r in range(gh):
        r0, r1 = int(math.floor(r * sh)), max(int(math.floor((r + 1) * sh)), int(math.floor(r * sh)) + 1)
        for c in range(gw):
            c0, c1 = int(math.floor(c * sw)), max(int(math.floor((c + 1) * sw)), int(math.floor(c * sw)) + 1)
            out[r * gw + c] = np.bincount(a[r0:r1, c0:c1].reshape(-1)).argmax()
    return out


def _stage_blocks(p, prefix: str, x: Tensor, depth: int, heads: int) -> Tensor:
    for i in range(depth):
        x = nn.block(p, f"{prefix}.block{i}", x, heads)
    return x


def _downsample_params(p, n: int) -> DownsampleParams:
    return DownsampleParams(
        importance_w=p[f"down{n}.importance.w"],
        importance_b=p[f"down{n}.importance.b"],
        q_w=p[f"down{n}.q.w"],
        q_b=p[f"down{n}.q.b"],
        k_w=p[f"down{n}.k.w"],
        v_w=p[f"down{n}.v.w"],
        v_b=p[f"down{n}.v.b"],
        skip_w=p[f"down{n}.skip.w"],
        skip_b=p[f"down{n}.skip.b"],
    )


def _as_image(x, channels: tuple[int, ...], name: str, h: int, w: int) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] not in channels or arr.shape[1:] != (h, w):
        raise DimensionError(f"{name}: expected {channels[0]}×{h}×{w}, got {arr.shape}")
    return arr


def forward(m: Model, rgb, thermal, trace: dict | None = None) -> SegPrediction:
    """Full-resolution class probabilities for one RGB + thermal pair.

    ``trace``, when given, collects per-stage token counts, stage maps and
    clustering results.
    """
    cfg, p = m.config, m.params
    dtype = next(iter(p.values())).dtype
    h, w = cfg.height, cfg.width
    rgb = _as_image(rgb, (3,), "rgb", h, w)
    thermal = _as_image(thermal, (1, 3), "thermal", h, w)
    if thermal.shape[0] == 1:
        thermal = np.repeat(thermal, 3, axis=0)
    grids = cfg.grids()
    h1, w1 = grids[0]

    feats = {}
    for mod, img in (("rgb", rgb), ("thermal", thermal)):
        x = nn.affine(p, f"embed.{mod}", Tensor(patchify(((img - 0.5) / 0.25).astype(dtype), PATCH, EMBED_KERNEL)))
        x = T.add(x, p[f"embed.{mod}.pos"])
        x = _stage_blocks(p, f"stage1.{mod}", x, cfg.depths[0], cfg.heads[0])
        feats[mod] = nn.tokens_to_map(x, h1, w1)

    if cfg.fusion == "mif":
        gate = ChannelGate(*(p[f"fuse.gate.{k}"] for k in ("w1", "b1", "w2", "b2")))
        fused = mif_fuse(feats["rgb"], feats["thermal"], cfg.window, gate)
    elif cfg.fusion == "add":
        fused = T.add(feats["rgb"], feats["thermal"])
    else:
        cat = T.concat([feats["rgb"], feats["thermal"]], axis=0)
        fused = nn.tokens_to_map(nn.affine(p, "fuse.cat", nn.map_to_tokens(cat)), h1, w1)
    s1 = nn.tokens_to_map(nn.norm(p, "stage1.norm", nn.map_to_tokens(fused)), h1, w1)

    maps = [s1]
    counts = [h1 * w1]
    clusters = []
    for n in (2, 3, 4):
        x = maps[-1]
        if n >= 3:
            x = stage_bridge(maps[-2], x, p[f"bridge{n}.w"], p[f"bridge{n}.b"])
        _, hx, wx = x.shape
        gh, gw = grids[n - 1]
        if cfg.downsample == "dbtc":
            pce = None
            if cfg.position == "pce":
                pce = PixelCoordEncoding(p[f"down{n}.pce.scale"], p[f"down{n}.pce.offset"])
            nxt, res = cluster_downsample(
                TokenSet.from_map(x),
                cfg.tau[n - 2],
                k=cfg.knn_k,
                ratio=cfg.ratio,
                pce=pce,
                params=_downsample_params(p, n),
                position=cfg.position,
                symmetric_tau=cfg.symmetric_tau,
                # the map repeats each of the previous stage's tokens over its cells
                m=math.ceil(cfg.ratio * counts[-1]),
            )
            tokens = nxt.tokens
            clusters.append(res)
            cell_index = regrid_index(res.assignment, hx, wx, gh, gw)
        else:
            tokens = nn.affine(p, f"down{n}.proj", nn.map_to_tokens(T.mean_pool2x2(x)))
            cell_index = None
        counts.append(tokens.shape[0])
        tokens = _stage_blocks(p, f"stage{n}", tokens, cfg.depths[n - 1], cfg.heads[n - 1])
        tokens = nn.norm(p, f"stage{n}.norm", tokens)
        if cell_index is not None:
            tokens = T.gather_rows(tokens, cell_index)
        maps.append(nn.tokens_to_map(tokens, gh, gw))

    xf = aggregate_multiscale(maps, h1, w1)
    if cfg.decoder == "euclid":
        coarse = predict(class_distance(xf, p["head.class_tokens"]))
        logits = T.scale(coarse.distances, -1.0)
    else:
        hidden = T.relu(nn.affine(p, "head.fc1", nn.map_to_tokens(xf)))
        logits = nn.tokens_to_map(nn.affine(p, "head.fc2", hidden), h1, w1)
        coarse = SegPrediction(softmax_classes(logits))
    if cfg.upsample == "logits":
        # interpolating logits keeps boundaries at sub-patch positions
        probs = softmax_classes(T.upsample_bilinear(logits, h, w, align_corners=False))
    else:
        up = T.upsample_bilinear(coarse.probs, h, w, align_corners=False)
        probs = T.div(up, T.sum(up, axis=0, keepdims=True))
    if trace is not None:
        trace.update(token_counts=counts, stage_maps=maps, clusters=clusters)
    return SegPrediction(probs, None, coarse)


# ---------------------------------------------------------------- diagnostics


def stage_token_counts(cfg: ModelConfig) -> list[int]:
    cells = [h * w for h, w in cfg.grids()]
    if cfg.downsample == "pool":
        return cells
    out = [cells[0]]
    for _ in range(3):
        out.append(math.ceil(cfg.ratio * out[-1]))
    return out


def dead_parameters(m: Model) -> dict[str, str]:
    """Parameters whose gradient is identically zero by construction for this
    config (and, where noted, at the current parameter values)."""
    cfg, p = m.config, m.params
    dead: dict[str, str] = {}
    cells = [h * w for h, w in cfg.grids()]
    counts = stage_token_counts(cfg)
    if cfg.downsample == "dbtc":
        for n in (2, 3, 4):
            dead[f"down{n}.importance.b"] = "a shift shared by all importance scores cancels in every softmax"
            if cfg.position == "pce":
                for part in ("scale", "offset"):
                    dead[f"down{n}.pce.{part}"] = "coordinates only steer discrete cluster indices"
            if cells[n - 2] == 1:
                for part in ("q.w", "q.b", "k.w"):
                    dead[f"down{n}.{part}"] = "single key: attention weights are constant"
    for n in range(1, 5):
        if counts[n - 1] == 1:
            mods = [f"stage{n}.rgb", f"stage{n}.thermal"] if n == 1 else [f"stage{n}"]
            for prefix in mods:
                for i in range(cfg.depths[n - 1]):
                    for part in ("attn.q.w", "attn.q.b", "attn.k.w"):
                        dead[f"{prefix}.block{i}.{part}"] = "single token: attention weights are constant"
    if cfg.fusion == "mif" and not np.any(p["fuse.gate.w2"].data):
        dead["fuse.gate.w1"] = "gate output layer is zero, blocking the hidden layer's gradient"
        dead["fuse.gate.b1"] = "gate output layer is zero, blocking the hidden layer's gradient"
    return {k: v for k, v in dead.items() if k in p}


# ---------------------------------------------------------------- checkpoints


def _sidecar(path) -> Path:
    return Path(str(path) + ".cfg")


def save_checkpoint(m: Model, path) -> None:
    from .config import dump_model_config

    serialize.save(path, m.state())
    _sidecar(path).write_text(dump_model_config(m.config), encoding="utf-8")


def load_checkpoint(path, cfg: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; the config comes from the sidecar
    ``<path>.cfg`` unless given.  Names and shapes must match exactly."""
    from .config import parse_config

    tensors = serialize.load(path)
    if cfg is None:
        cfg = parse_config(_sidecar(path).read_text(encoding="utf-8"))[0]
    m = build_model(cfg, seed=0)
    missing = [k for k in m.params if k not in tensors]
    extra = [k for k in tensors if k not in m.params]
    if missing or extra:
        raise ContractError(f"checkpoint does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, t in m.params.items():
        if tensors[k].shape != t.shape:
            raise ContractError(f"checkpoint tensor {k!r} has shape {tensors[k].shape}, config expects {t.shape}")
        t.data = tensors[k].copy()
    return m


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
