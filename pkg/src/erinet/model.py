"""Dual-stream ERI network: per-stream GRU -> encoder, concat, linear, sigmoid."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .layers import GATES, AttentionRecord, encoder_forward, extract_regression_attention, gru_forward

EMOTIONS = ("Adoration", "Amusement", "Anxiety", "Disgust", "Empathic Pain", "Fear", "Surprise")
MAGIC = b"ERI1"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    visual_dim: int = 546
    audio_dim: int = 1024
    gru_layers: int = 2
    hidden: int = 256
    encoder_blocks: int = 4
    heads: int = 4
    dropout: float = 0.2
    output_dim: int = 7
    ffn_mult: int = 4
    pooling: str = "token"  # "token" (regression token) or "mean" (baseline)
    seed: int = 0

    def validate(self) -> None:
        if self.visual_dim < 0 or self.audio_dim < 0:
            raise ConfigError("stream dims must be non-negative")
        if self.visual_dim == 0 and self.audio_dim == 0:
            raise ConfigError("at least one stream (visual or audio) is required")
        for name in ("gru_layers", "hidden", "output_dim", "ffn_mult", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.encoder_blocks < 0 or (self.pooling == "token" and self.encoder_blocks == 0):
            raise ConfigError("token pooling needs at least one encoder block")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.pooling not in ("token", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(s for s, d in (("video", self.visual_dim), ("audio", self.audio_dim)) if d > 0)

    def stream_dim(self, stream: str) -> int:
        return self.visual_dim if stream == "video" else self.audio_dim

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config (mirrors :func:`init_model`)."""
    H, F = cfg.hidden, cfg.hidden * cfg.ffn_mult
    total = 0
    for s in cfg.streams:
        d_in = cfg.stream_dim(s)
        for _ in range(cfg.gru_layers):
            total += 3 * (d_in * H + H * H + H)
            d_in = H
        if cfg.pooling == "token":
            total += H + cfg.encoder_blocks * (4 * H * H + 4 * H + H * F + F + F * H + H)
    return total + len(cfg.streams) * H * cfg.output_dim + cfg.output_dim


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class EriModel:
    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def astype(self, dtype) -> "EriModel":
        self.params.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def _stream(self, name, x, mask, rng):
        cfg = self.config
        h = gru_forward(x, self.params, f"{name}.gru", cfg.gru_layers, mask=mask)
        if cfg.pooling == "mean":
            return ad.masked_mean(h, mask), []
        return encoder_forward(
            h, self.params, f"{name}.encoder", cfg.encoder_blocks, cfg.heads, mask,
            dropout=cfg.dropout, rng=rng,
        )

    def forward_batch(
        self, inputs: dict[str, tuple[np.ndarray, np.ndarray]], rng: np.random.Generator | None = None
    ) -> tuple[Tensor, dict[str, list[AttentionRecord]]]:
        """Run padded batches through every stream.

        ``inputs`` maps stream name to ``(data (B, T, D), mask (B, T))``.
        ``rng`` switches on training-mode dropout.
        Returns ``(B, output_dim)`` sigmoid outputs and per-stream attention records.
        """
        pooled, records = [], {}
        dt = self.dtype
        for name in self.config.streams:
            if name not in inputs:
                raise ValueError(f"model expects a {name} stream")
            data, mask = inputs[name]
            mask = np.asarray(mask, dtype=bool)
            if data.shape[1] == 0 or not mask.any(axis=1).all():
                raise ValueError(f"{name} stream is empty for at least one sample")
            if data.shape[2] != self.config.stream_dim(name):
                raise ad.ShapeError(
                    f"{name} stream has {data.shape[2]} features, model expects {self.config.stream_dim(name)}"
                )
            vec, rec = self._stream(name, Tensor(np.asarray(data, dtype=dt)), mask, rng)
            pooled.append(vec)
            records[name] = rec
        fused = pooled[0] if len(pooled) == 1 else ad.concat(pooled, axis=1)
        logits = ad.add_bias(ad.matmul(fused, self.params["readout.w"]), self.params["readout.b"])
        return ad.sigmoid(logits), records


def init_model(config: ModelConfig) -> EriModel:
    """Xavier-uniform matrices, zero biases, unit layer-norm gains, N(0, 0.02²) tokens."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    H, F = config.hidden, config.hidden * config.ffn_mult
    for s in config.streams:
        d_in = config.stream_dim(s)
        for layer in range(config.gru_layers):
            base = f"{s}.gru.layer{layer}"
            for g in GATES:
                store.add(f"{base}.w_{g}", _xavier(rng, d_in, H))
            for g in GATES:
                store.add(f"{base}.u_{g}", _xavier(rng, H, H))
            for g in GATES:
                store.add(f"{base}.b_{g}", np.zeros(H))
            d_in = H
        if config.pooling == "token":
            enc = f"{s}.encoder"
            store.add(f"{enc}.reg_token", rng.normal(0.0, 0.02, size=H))
            for i in range(config.encoder_blocks):
                blk = f"{enc}.block{i}"
                for w in ("w_q", "w_k", "w_v", "w_o"):
                    store.add(f"{blk}.attn.{w}", _xavier(rng, H, H))
                for ln in ("ln1", "ln2"):
                    store.add(f"{blk}.{ln}.gamma", np.ones(H))
                    store.add(f"{blk}.{ln}.beta", np.zeros(H))
                store.add(f"{blk}.ffn.w1", _xavier(rng, H, F))
                store.add(f"{blk}.ffn.b1", np.zeros(F))
                store.add(f"{blk}.ffn.w2", _xavier(rng, F, H))
                store.add(f"{blk}.ffn.b2", np.zeros(H))
    n_in = H * len(config.streams)
    store.add("readout.w", _xavier(rng, n_in, config.output_dim))
    store.add("readout.b", np.zeros(config.output_dim))
    return EriModel(config, store)


def model_forward(
    model: EriModel,
    video: np.ndarray | None,
    audio: np.ndarray | None,
    masks: dict[str, np.ndarray] | None = None,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
):
    """Single-sample forward. Returns the 7 intensities, plus attention curves in infer mode."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    masks = masks or {}
    inputs = {}
    for name, arr in (("video", video), ("audio", audio)):
        if name not in model.config.streams:
            continue
        if arr is None or len(arr) == 0:
            raise ValueError(f"{name} stream is empty")
        arr = np.asarray(arr)
        m = masks.get(name)
        m = np.ones(len(arr), dtype=bool) if m is None else np.asarray(m, dtype=bool)
        inputs[name] = (arr[None], m[None])
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng(model.config.seed)
    else:
        rng = None
    out, records = model.forward_batch(inputs, rng=rng)
    if mode == "train":
        return out
    attention = {
        name: extract_regression_attention(rec, inputs[name][0].shape[1])[0]
        for name, rec in records.items() if rec
    }
    return out.data[0].copy(), attention


# ---------------------------------------------------------------- checkpoints


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(buf) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", buf.read(4))
    name = buf.read(n).decode("utf-8")
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = buf.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"checkpoint truncated inside tensor {name!r}")
    return name, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def save_checkpoint(path, model: EriModel, optimizer=None) -> None:
    """Write magic, JSON config, named f32 tensors and optional optimizer moments."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        _write_tensor(buf, name, t.data)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<I", optimizer.step_count))
        buf.write(struct.pack("<I", 2 * len(optimizer.m)))
        for name in optimizer.m:
            _write_tensor(buf, f"m/{name}", optimizer.m[name])
            _write_tensor(buf, f"v/{name}", optimizer.v[name])
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[EriModel, dict | None]:
    """Returns the model and, if present, ``{"step": int, "m": {...}, "v": {...}}``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an ERI1 checkpoint (bad magic at byte 0)")
    buf = io.BytesIO(data[4:])
    (n,) = struct.unpack("<I", buf.read(4))
    cfg = ModelConfig.from_dict(json.loads(buf.read(n).decode("utf-8")))
    (count,) = struct.unpack("<I", buf.read(4))
    store = ParamStore()
    for _ in range(count):
        name, arr = _read_tensor(buf)
        store.add(name, arr)
    model = EriModel(cfg, store)
    opt_state = None
    if buf.read(1) == b"\x01":
        step, n_t = struct.unpack("<II", buf.read(8))
        opt_state = {"step": step, "m": {}, "v": {}}
        for _ in range(n_t):
            name, arr = _read_tensor(buf)
            kind, pname = name.split("/", 1)
            opt_state[kind][pname] = arr
    return model, opt_state
