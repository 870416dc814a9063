"""Fusion model assembly, initialization, and checkpoint serialization.

A ``FusionModel`` is an input adapter (d_in -> E), a stack of inter-channel
processing layers, a global fusion block, and the affine scale/bias applied
to cosine scores by the training loss. The checkpoint format is
self-describing: magic "AFCK", a format version, a JSON header holding the
config plus an ordered tensor manifest, then raw little-endian float64
payloads in manifest order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, fields, replace
from typing import BinaryIO, Iterator

import numpy as np

from .attention import (
    AttentionState,
    HeadParams,
    LayerParams,
    NormAxis,
    global_fusion,
    inter_channel_layer,
)
from .errors import CheckpointError, ConfigError, ContractError
from .tape import NormMode, Tensor, matmul

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Shape and behavior knobs of the fusion head."""

    d_in: int = 512              # incoming per-channel embedding width
    width: int = 256             # E: working width of all layers
    heads: int = 4               # attention heads per layer
    layers: int = 4              # stacked inter-channel layers
    ffn_hidden: int = 512        # F: FFN hidden width
    mode: NormMode = "softmax"
    fusion_uses_prev: bool = True   # fusion block reuses the top layer's raw scores
    norm_axis: NormAxis = "query-rows"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_in", "width", "heads", "layers", "ffn_hidden"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.width % self.heads != 0:
            raise ConfigError(
                f"width ({self.width}) must be divisible by heads ({self.heads})")
        if self.mode not in ("softmax", "sparsemax"):
            raise ConfigError(f"mode must be softmax or sparsemax, got {self.mode!r}")
        if self.norm_axis not in ("query-rows", "key-columns"):
            raise ConfigError(f"unknown norm_axis {self.norm_axis!r}")

    @property
    def d_k(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FusionModel:
    """All trainable parameters of the fusion head plus its config."""

    def __init__(self, config: ModelConfig, adapter: Tensor,
                 layers: list[LayerParams], fusion: LayerParams,
                 loss_scale: Tensor, loss_bias: Tensor,
                 epochs_trained: int = 0):
        if adapter.shape != (config.d_in, config.width):
            raise ContractError(
                f"adapter must be {config.d_in}x{config.width}, got {adapter.shape}")
        if len(layers) != config.layers:
            raise ContractError(f"expected {config.layers} layers, got {len(layers)}")
        if loss_scale.item() <= 0.0:
            raise ContractError("loss_scale must stay positive")
        self.config = config
        self.adapter = adapter
        self.layers = layers
        self.fusion = fusion
        self.loss_scale = loss_scale
        self.loss_bias = loss_bias
        self.epochs_trained = epochs_trained

    def named_parameters(self) -> dict[str, Tensor]:
        """Ordered name -> tensor map; the order fixes checkpoint layout."""
        out: dict[str, Tensor] = {"adapter": self.adapter}

        def add_layer(prefix: str, layer: LayerParams) -> None:
            for j, head in enumerate(layer.heads):
                out[f"{prefix}.heads.{j}.w_q"] = head.w_q
                out[f"{prefix}.heads.{j}.w_k"] = head.w_k
                out[f"{prefix}.heads.{j}.w_v"] = head.w_v
            out[f"{prefix}.w_o"] = layer.w_o
            out[f"{prefix}.ffn_w1"] = layer.ffn_w1
            out[f"{prefix}.ffn_b1"] = layer.ffn_b1
            out[f"{prefix}.ffn_w2"] = layer.ffn_w2
            out[f"{prefix}.ffn_b2"] = layer.ffn_b2

        for i, layer in enumerate(self.layers):
            add_layer(f"layers.{i}", layer)
        add_layer("fusion", self.fusion)
        out["loss_scale"] = self.loss_scale
        out["loss_bias"] = self.loss_bias
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()


def expected_parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Parameter shapes implied by a config, in checkpoint order."""
    e, f, dk = config.width, config.ffn_hidden, config.d_k
    shapes: dict[str, tuple[int, int]] = {"adapter": (config.d_in, e)}

    def add_layer(prefix: str) -> None:
        for j in range(config.heads):
            for w in ("w_q", "w_k", "w_v"):
                shapes[f"{prefix}.heads.{j}.{w}"] = (e, dk)
        shapes[f"{prefix}.w_o"] = (e, e)
        shapes[f"{prefix}.ffn_w1"] = (e, f)
        shapes[f"{prefix}.ffn_b1"] = (1, f)
        shapes[f"{prefix}.ffn_w2"] = (f, e)
        shapes[f"{prefix}.ffn_b2"] = (1, e)

    for i in range(config.layers):
        add_layer(f"layers.{i}")
    add_layer("fusion")
    shapes["loss_scale"] = (1, 1)
    shapes["loss_bias"] = (1, 1)
    return shapes


def _glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_model(config: ModelConfig, seed: int,
               loss_scale: float = 10.0, loss_bias: float = -5.0) -> FusionModel:
    """Seeded init: fan-based uniform weights, zero biases, affine w=10 b=-5."""
    config.validate()
    if loss_scale <= 0.0:
        raise ConfigError("loss_scale must be positive")
    rng = np.random.default_rng(seed)
    e, f, dk = config.width, config.ffn_hidden, config.d_k

    def param(rows: int, cols: int) -> Tensor:
        return Tensor(_glorot_uniform(rng, rows, cols), requires_grad=True)

    def zeros(rows: int, cols: int) -> Tensor:
        return Tensor(np.zeros((rows, cols)), requires_grad=True)

    def make_layer() -> LayerParams:
        heads = [HeadParams(param(e, dk), param(e, dk), param(e, dk))
                 for _ in range(config.heads)]
        return LayerParams(heads=heads, w_o=param(e, e),
                           ffn_w1=param(e, f), ffn_b1=zeros(1, f),
                           ffn_w2=param(f, e), ffn_b2=zeros(1, e))

    adapter = param(config.d_in, e)
    layers = [make_layer() for _ in range(config.layers)]
    fusion = make_layer()
    w = Tensor([[loss_scale]], requires_grad=True)
    b = Tensor([[loss_bias]], requires_grad=True)
    return FusionModel(config, adapter, layers, fusion, w, b)


def forward(model: FusionModel, x, trace: list | None = None) -> Tensor:
    """Fuse a C x d_in channel matrix into a single 1 x E embedding."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if xt.rows < 1:
        raise ContractError("input needs at least one channel row")
    if xt.cols != model.config.d_in:
        raise ContractError(
            f"input width {xt.cols} != configured d_in {model.config.d_in}")
    cfg = model.config
    h = matmul(xt, model.adapter)
    state = AttentionState.zeros(cfg.heads, xt.rows)
    for layer in model.layers:
        h, state = inter_channel_layer(h, state, layer, cfg.mode, cfg.norm_axis,
                                       trace=trace)
    if not cfg.fusion_uses_prev:
        state = AttentionState.zeros(cfg.heads, xt.rows)
    return global_fusion(h, state, model.fusion, cfg.mode, cfg.norm_axis,
                         trace=trace)


def forward_with_attention(model: FusionModel, x) -> tuple[Tensor, list[list[np.ndarray]]]:
    """Forward pass that also returns normalized attention per block and head.

    The result list has one entry per attention block (layers then fusion),
    each a list of h C x C attention matrices.
    """
    trace: list = []
    fused = forward(model, x, trace=trace)
    return fused, trace


# ---------------------------------------------------------------------------
# checkpoint serialization


def _header_bytes(model: FusionModel) -> tuple[bytes, list[tuple[str, Tensor]]]:
    params = list(model.named_parameters().items())
    manifest = []
    offset = 0
    for name, t in params:
        manifest.append({"name": name, "rows": t.rows, "cols": t.cols,
                         "offset": offset})
        offset += t.data.size * 8
    header = {
        "config": model.config.to_dict(),
        "meta": {"epochs_trained": model.epochs_trained},
        "tensors": manifest,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), params


def save_model(model: FusionModel, path) -> None:
    header, params = _header_bytes(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes of {what}, "
                              f"got {len(buf)}")
    return buf


def load_model(path) -> FusionModel:
    """Rebuild a model purely from a checkpoint file (config lives inside)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"unreadable checkpoint header: {err}") from None
        try:
            config = ModelConfig.from_dict(header["config"])
            manifest = header["tensors"]
            epochs_trained = int(header.get("meta", {}).get("epochs_trained", 0))
        except (KeyError, TypeError, ConfigError) as err:
            raise CheckpointError(f"invalid checkpoint header: {err}") from None

        expected = expected_parameter_shapes(config)
        if [m["name"] for m in manifest] != list(expected):
            raise CheckpointError("checkpoint manifest does not match its config")
        arrays: dict[str, np.ndarray] = {}
        offset = 0
        for m in manifest:
            name, rows, cols = m["name"], int(m["rows"]), int(m["cols"])
            if (rows, cols) != expected[name]:
                raise CheckpointError(
                    f"tensor {name}: manifest shape {(rows, cols)} does not match "
                    f"config shape {expected[name]}")
            if int(m["offset"]) != offset:
                raise CheckpointError(f"tensor {name}: unexpected payload offset")
            raw = _read_exact(fh, rows * cols * 8, f"tensor {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
            offset += len(raw)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final tensor payload")

    def tensor(name: str) -> Tensor:
        return Tensor(arrays[name], requires_grad=True)

    def read_layer(prefix: str) -> LayerParams:
        heads = [HeadParams(tensor(f"{prefix}.heads.{j}.w_q"),
                            tensor(f"{prefix}.heads.{j}.w_k"),
                            tensor(f"{prefix}.heads.{j}.w_v"))
                 for j in range(config.heads)]
        return LayerParams(heads=heads, w_o=tensor(f"{prefix}.w_o"),
                           ffn_w1=tensor(f"{prefix}.ffn_w1"),
                           ffn_b1=tensor(f"{prefix}.ffn_b1"),
                           ffn_w2=tensor(f"{prefix}.ffn_w2"),
                           ffn_b2=tensor(f"{prefix}.ffn_b2"))

    layers = [read_layer(f"layers.{i}") for i in range(config.layers)]
    return FusionModel(config, tensor("adapter"), layers, read_layer("fusion"),
                       tensor("loss_scale"), tensor("loss_bias"),
                       epochs_trained=epochs_trained)


def snapshot_parameters(model: FusionModel) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_parameters().items()}


def restore_parameters(model: FusionModel, snapshot: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    if set(params) != set(snapshot):
        raise ContractError("snapshot does not match model parameters")
    for name, t in params.items():
        t.assign(snapshot[name])
