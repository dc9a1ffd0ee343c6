"""MS-SENet assembly: fusion block, bidirectional temporal stack, classifier.

Tensors flowing through the network are channel-last.  The fusion block
takes MFCC maps shaped ``[39, T, 1]`` (coefficient x frame x channel) or a
batch ``[B, 39, T, 1]``; the temporal stack works on ``[T, C]``/``[B, T, C]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .layers import (
    BatchNormParams,
    DropoutSpec,
    SeParams,
    batch_norm,
    dense_softmax,
    global_temporal_pool,
    relu,
    se_forward,
    se_hidden_width,
    sigmoid,
    spatial_dropout,
)
from .numerics import ConfigurationError, DimensionError, Rng, Tensor

VARIANTS = ("full", "tim_only", "avgpool_instead_of_sd", "uniform_3x3", "no_se")

# short names used in ablation tables
VARIANT_LABELS = {
    "full": "full",
    "tim_only": "tim",
    "avgpool_instead_of_sd": "wo_sd",
    "uniform_3x3": "wo_pc",
    "no_se": "wo_se",
}


@dataclass
class ModelConfig:
    n_mfcc: int = 39
    tff_filters_per_path: int = 39
    tff_kernels: list = field(default_factory=lambda: [[9, 1], [1, 11], [3, 3]])
    tff_dropout: float = 0.2
    se_ratio: int = 4
    n_tab: int = 10
    tab_filters: int = 39
    tab_kernel: int = 2
    tab_dropout: float = 0.1
    n_classes: int = 6
    variant: str = "full"

    def __post_init__(self):
        self.tff_kernels = [list(map(int, k)) for k in self.tff_kernels]
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_tab < 1:
            raise ConfigurationError("n_tab must be >= 1")
        if self.tab_kernel < 1 or self.tab_filters < 1 or self.tff_filters_per_path < 1:
            raise ConfigurationError("kernel and filter counts must be positive")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if len(self.tff_kernels) != 3:
            raise ConfigurationError("the fusion block has exactly three parallel paths")
        for kh, kw in self.tff_kernels:
            if kh % 2 == 0 or kw % 2 == 0:
                raise ConfigurationError(f"fusion kernels must be odd, got {kh}x{kw}")
        DropoutSpec(self.tff_dropout)
        DropoutSpec(self.tab_dropout)

    @property
    def dilations(self) -> list[int]:
        return [2 ** (j - 1) for j in range(1, self.n_tab + 1)]

    @property
    def path_kernels(self) -> list[tuple[int, int]]:
        if self.variant == "uniform_3x3":
            return [(3, 3)] * 3
        return [tuple(k) for k in self.tff_kernels]

    @property
    def uses_tff(self) -> bool:
        return self.variant != "tim_only"

    @property
    def fused_channels(self) -> int:
        """Width of the sequence handed to the temporal stack."""
        if not self.uses_tff:
            return self.n_mfcc
        return 3 * self.tff_filters_per_path + self.n_mfcc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field(cfg: ModelConfig) -> int:
    """Frames of history visible to one output frame of a direction's stack."""
    return 1 + 2 * sum((cfg.tab_kernel - 1) * d for d in cfg.dilations)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars (batch-norm buffers excluded)."""
    n = 0
    F = cfg.tff_filters_per_path
    if cfg.uses_tff:
        for kh, kw in cfg.path_kernels:
            n += kh * kw * F + F + 2 * F
        if cfg.variant != "no_se":
            C = 3 * F
            n += 2 * C * se_hidden_width(C, cfg.se_ratio)
    D = cfg.tab_filters
    n += cfg.fused_channels * D + D
    n += 2 * cfg.n_tab * 2 * (cfg.tab_kernel * D * D + D + 2 * D)
    n += cfg.n_tab
    n += cfg.n_classes * D + cfg.n_classes
    return n


class ModelParams:
    """Named learnable tensors plus batch-norm running statistics."""

    def __init__(self, weights: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.weights = weights
        self.buffers = buffers

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def __contains__(self, name: str) -> bool:
        return name in self.weights

    def trainable(self) -> list[Tensor]:
        return list(self.weights.values())

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.weights.values())

    def bn(self, prefix: str) -> BatchNormParams:
        return BatchNormParams(
            gamma=self.weights[prefix + ".gamma"],
            beta=self.weights[prefix + ".beta"],
            running_mean=self.buffers[prefix + ".running_mean"],
            running_var=self.buffers[prefix + ".running_var"],
        )

    def se(self, r: int) -> SeParams:
        return SeParams(self.weights["tff.se.W1"], self.weights["tff.se.W2"], r)

    def zero_grad(self):
        for t in self.weights.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def _he(rng: Rng, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(shape, np.sqrt(2.0 / fan_in)).astype(dtype), requires_grad=True)


def _glorot(rng: Rng, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(shape, -limit, limit).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_params(cfg: ModelConfig, rng: Rng, dtype=np.float32) -> ModelParams:
    w: dict[str, Tensor] = {}
    b: dict[str, np.ndarray] = {}

    def add_bn(prefix, C):
        w[prefix + ".gamma"] = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        w[prefix + ".beta"] = _zeros(C, dtype)
        b[prefix + ".running_mean"] = np.zeros(C, dtype=dtype)
        b[prefix + ".running_var"] = np.ones(C, dtype=dtype)

    F = cfg.tff_filters_per_path
    if cfg.uses_tff:
        for p, (kh, kw) in enumerate(cfg.path_kernels):
            w[f"tff.path{p}.kernel"] = _he(rng, (kh, kw, 1, F), kh * kw, dtype)
            w[f"tff.path{p}.bias"] = _zeros(F, dtype)
            add_bn(f"tff.path{p}.bn", F)
        if cfg.variant != "no_se":
            se = SeParams.init(3 * F, cfg.se_ratio, rng, dtype)
            w["tff.se.W1"] = se.W1
            w["tff.se.W2"] = se.W2
    D = cfg.tab_filters
    w["proj.kernel"] = _glorot(rng, (cfg.fused_channels, D), cfg.fused_channels, D, dtype)
    w["proj.bias"] = _zeros(D, dtype)
    k = cfg.tab_kernel
    for direction in ("fwd", "bwd"):
        for j in range(1, cfg.n_tab + 1):
            for s in (0, 1):
                prefix = f"tim.{direction}.tab{j}.sub{s}"
                w[prefix + ".kernel"] = _he(rng, (k, D, D), k * D, dtype)
                w[prefix + ".bias"] = _zeros(D, dtype)
                add_bn(prefix + ".bn", D)
    w["fusion.w"] = Tensor(np.full(cfg.n_tab, 1.0 / cfg.n_tab, dtype=dtype), requires_grad=True)
    w["head.W"] = _glorot(rng, (cfg.n_classes, D), D, cfg.n_classes, dtype)
    w["head.b"] = _zeros(cfg.n_classes, dtype)
    return ModelParams(w, b)


# ---------------------------------------------------------------- forward passes

def _batched(t: Tensor, single_ndim: int) -> tuple[Tensor, bool]:
    if t.ndim == single_ndim:
        return nx.reshape(t, (1,) + t.shape), True
    if t.ndim != single_ndim + 1:
        raise DimensionError(f"expected {single_ndim}-D input or a batch of them, got {t.shape}")
    return t, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return nx.reshape(t, t.shape[1:]) if squeeze else t


def tff_features(mfcc: Tensor, params: ModelParams, cfg: ModelConfig, rng: Rng | None,
                 training: bool) -> Tensor:
    """Fusion-block output before the skip connection: ``[..., T, 3F]``."""
    mfcc, squeeze = _batched(mfcc, 3)
    if mfcc.shape[-1] != 1 or mfcc.shape[-3] != cfg.n_mfcc:
        raise DimensionError(f"expected [{cfg.n_mfcc}, T, 1] MFCC maps, got {mfcc.shape}")
    drop = DropoutSpec(cfg.tff_dropout)
    paths = []
    for p in range(3):
        h = nx.conv2d_same(mfcc, params[f"tff.path{p}.kernel"], params[f"tff.path{p}.bias"])
        h = relu(batch_norm(h, params.bn(f"tff.path{p}.bn"), training))
        if cfg.variant == "avgpool_instead_of_sd":
            h = nx.avgpool2x2_upsample(h)
        else:
            h = spatial_dropout(h, drop, rng, training)
        paths.append(h)
    u = nx.concat(paths, axis=-1)
    if cfg.variant != "no_se":
        u, _ = se_forward(u, params.se(cfg.se_ratio))
    return _unbatch(nx.mean(u, axis=-3), squeeze)


def tff_forward(mfcc: Tensor, params: ModelParams, cfg: ModelConfig, rng: Rng | None,
                training: bool) -> Tensor:
    """Time-frequency fusion block: ``[..., 39, T, 1] -> [..., T, 3F + 39]``."""
    mfcc, squeeze = _batched(mfcc, 3)
    fused = tff_features(mfcc, params, cfg, rng, training)
    return _unbatch(nx.concat([fused, _frames_major(mfcc)], axis=-1), squeeze)


def _frames_major(mfcc: Tensor) -> Tensor:
    """``[B, 39, T, 1] -> [B, T, 39]``."""
    x = nx.reshape(mfcc, mfcc.shape[:-1])
    return nx.transpose(x, (0, 2, 1))


def tab_forward(F: Tensor, params: ModelParams, prefix: str, dilation: int, cfg: ModelConfig,
                rng: Rng | None, training: bool) -> Tensor:
    """One temporal-aware block: two causal sub-blocks, sigmoid gate on the input."""
    F, squeeze = _batched(F, 2)
    drop = DropoutSpec(cfg.tab_dropout)
    h = F
    for s in (0, 1):
        sp = f"{prefix}.sub{s}"
        h = nx.conv1d_causal_dilated(h, params[sp + ".kernel"], dilation, params[sp + ".bias"])
        h = relu(batch_norm(h, params.bn(sp + ".bn"), training))
        h = spatial_dropout(h, drop, rng, training)
    return _unbatch(nx.mul(sigmoid(h), F), squeeze)


def tab_stack(F0: Tensor, params: ModelParams, direction: str, cfg: ModelConfig,
              rng: Rng | None, training: bool) -> list[Tensor]:
    """Outputs ``F_1 .. F_n`` of one direction's TAB chain."""
    outs = []
    F = F0
    for j, d in enumerate(cfg.dilations, start=1):
        F = tab_forward(F, params, f"tim.{direction}.tab{j}", d, cfg, rng, training)
        outs.append(F)
    return outs


def input_projection(x: Tensor, params: ModelParams) -> Tensor:
    W = params["proj.kernel"]
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"temporal stack expects {W.shape[0]} channels, got {x.shape[-1]}")
    return nx.add(nx.matmul(x, W), params["proj.bias"])


def tim_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, rng: Rng | None,
                training: bool) -> tuple[Tensor, list[Tensor]]:
    """Bidirectional temporal stack with dynamic fusion.

    Returns the fused descriptor ``g_drf`` and the per-depth pooled features
    ``g_j``.  The backward direction reads the time-reversed sequence; its
    outputs are not re-reversed because only their temporal mean is used.
    """
    x, squeeze = _batched(x, 2)
    fwd = tab_stack(input_projection(x, params), params, "fwd", cfg, rng, training)
    bwd = tab_stack(input_projection(nx.flip(x, axis=1), params), params, "bwd", cfg, rng,
                    training)
    gs = [global_temporal_pool(nx.add(f, b)) for f, b in zip(fwd, bwd)]
    w = params["fusion.w"]
    g_drf = None
    for j, g in enumerate(gs):
        term = nx.mul(g, nx.index(w, slice(j, j + 1)))
        g_drf = term if g_drf is None else nx.add(g_drf, term)
    return _unbatch(g_drf, squeeze), [_unbatch(g, squeeze) for g in gs]


def forward(mfcc: Tensor, params: ModelParams, cfg: ModelConfig, rng: Rng | None = None,
            training: bool = False) -> tuple[Tensor, Tensor]:
    """Class probabilities and fused embedding for MFCC map(s) ``[..., 39, T, 1]``."""
    mfcc, squeeze = _batched(mfcc, 3)
    if cfg.uses_tff:
        x = tff_forward(mfcc, params, cfg, rng, training)
    else:
        x = _frames_major(mfcc)
    g_drf, _ = tim_forward(x, params, cfg, rng, training)
    probs = dense_softmax(g_drf, params["head.W"], params["head.b"])
    return _unbatch(probs, squeeze), _unbatch(g_drf, squeeze)


class MSSENet:
    """A configured network and its parameters."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, trained: bool = False):
        self.cfg = cfg
        self.params = params
        self.trained = trained

    def forward(self, mfcc, rng: Rng | None = None, training: bool = False):
        if training and rng is None:
            raise ConfigurationError("training-mode forward needs an Rng for dropout")
        return forward(nx.as_tensor(mfcc), self.params, self.cfg, rng, training)

    def n_parameters(self) -> int:
        return self.params.n_parameters()


def build_variant(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> MSSENet:
    """Build one of the ablation wirings named by ``cfg.variant``."""
    if cfg.variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {cfg.variant!r}")
    return MSSENet(cfg, init_params(cfg, Rng(seed), dtype))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MSSECKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MSSENet, extra: dict | None = None) -> None:
    """Write a JSON header plus a little-endian float32 blob.

    Layout: magic (8 bytes), version u32, header length u32, UTF-8 JSON
    header, then every tensor in manifest order.
    """
    manifest = []
    chunks = []
    offset = 0
    items = [("weight", k, v.data) for k, v in model.params.weights.items()]
    items += [("buffer", k, v) for k, v in model.params.buffers.items()]
    for kind, name, arr in items:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "config": model.cfg.to_dict(),
        "trained": model.trained,
        "parameters": manifest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[MSSENet, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint header")
    if len(raw) < 16:
        raise CheckpointError("bad checkpoint header: truncated")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    blob = raw[16 + hlen:]
    cfg = ModelConfig.from_dict(header["config"])
    weights, buffers = {}, {}
    for entry in header["parameters"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(blob):
            raise CheckpointError(f"checkpoint blob truncated at {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).astype(np.float32)
        arr = arr.reshape(entry["shape"])
        if entry["kind"] == "weight":
            weights[entry["name"]] = Tensor(arr, requires_grad=True)
        else:
            buffers[entry["name"]] = arr
    expected = init_params(cfg, Rng(0), np.float32)
    if set(expected.weights) != set(weights) or set(expected.buffers) != set(buffers):
        raise CheckpointError("checkpoint parameters do not match its config")
    for name, t in expected.weights.items():
        if t.shape != weights[name].shape:
            raise CheckpointError(f"parameter {name} has shape {weights[name].shape}, config implies {t.shape}")
    return MSSENet(cfg, ModelParams(weights, buffers), trained=header["trained"]), header["extra"]
