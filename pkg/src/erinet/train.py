"""L2 training with AdamW and step decay, PCC evaluation, and the ablation harness."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, StateError, Tensor
from .features import (
    Dataset,
    MIN_TRAIN_FRAMES,
    Sample,
    apply_training_filter,
    filter_valid_frames,
    parse_combo,
    select_feature_combo,
)
from .model import EMOTIONS, EriModel, ModelConfig, init_model

logger = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 10
    weight_decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    min_valid_frames: int = MIN_TRAIN_FRAMES
    dtype: str = "float32"
    best_val: bool = False

    def lr_at_epoch(self, epoch: int) -> float:
        return lr_at_epoch(epoch, self.lr0, self.decay_factor, self.decay_every)


def lr_at_epoch(epoch: int, lr0: float = 1e-4, factor: float = 0.5, every: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** (epoch // every)


# ---------------------------------------------------------------- loss / optimiser


def l2_loss(preds: Tensor, labels) -> Tensor:
    """Mean squared error over all N x 7 entries."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=preds.data.dtype)
    if preds.shape != labels.shape or preds.ndim != 2 or preds.shape[0] < 1:
        raise ad.ShapeError(f"l2_loss: predictions {preds.shape} vs labels {labels.shape}")
    diff = ad.sub(preds, Tensor(labels))
    return ad.mean_all(ad.mul(diff, diff))


def _decays(name: str, t: Tensor) -> bool:
    # matrices only: biases, layer-norm vectors and regression tokens are exempt
    return t.ndim >= 2


class AdamW:
    """Adam with decoupled weight decay: θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)."""

    def __init__(
        self,
        params: ParamStore,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.5,
        decay_filter: Callable[[str, Tensor], bool] = _decays,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def load_state(self, state: Mapping) -> None:
        self.step_count = int(state["step"])
        for n, t in self.params.items():
            self.m[n] = np.asarray(state["m"][n], dtype=t.data.dtype)
            self.v[n] = np.asarray(state["v"][n], dtype=t.data.dtype)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [n for n, t in self.params.items() if t.grad is None]
        if missing:
            raise StateError(f"no gradient for parameter(s) {missing[:3]}{'...' if len(missing) > 3 else ''}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, t in self.params.items():
            g = t.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decay_filter(name, t):
                update = update + self.weight_decay * t.data
            t.data -= (lr * update).astype(t.data.dtype)


# ---------------------------------------------------------------- metrics


def pcc(x, y, return_flag: bool = False):
    """Pearson correlation. Zero variance in either input gives 0.0 (flagged)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pcc: inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("pcc needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    degenerate = bool(sx == 0.0 or sy == 0.0)
    r = 0.0 if degenerate else float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
    return (r, degenerate) if return_flag else r


def mean_pcc(rhos) -> float:
    rhos = list(rhos)
    if len(rhos) != 7:
        raise ValueError(f"mean_pcc expects 7 per-emotion values, got {len(rhos)}")
    return float(sum(rhos) / 7)


@dataclass
class EvalReport:
    per_emotion_pcc: list[float]
    mean_pcc: float
    n_valid: int
    n_substituted: int
    predictions: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    ids: list[str] = field(repr=False)
    substituted: list[str] = field(default_factory=list)
    degenerate: list[bool] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_emotion_pcc": dict(zip(EMOTIONS, self.per_emotion_pcc)),
            "mean_pcc": self.mean_pcc,
            "n_valid": self.n_valid,
            "n_substituted": self.n_substituted,
            "substituted_ids": self.substituted,
            "degenerate_emotions": [e for e, d in zip(EMOTIONS, self.degenerate) if d],
            "predictions": {i: [float(v) for v in p] for i, p in zip(self.ids, self.predictions)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        w = max(len(e) for e in EMOTIONS)
        lines = [f"{'emotion':<{w}}  pcc"]
        lines += [f"{e:<{w}}  {r:+.4f}" for e, r in zip(EMOTIONS, self.per_emotion_pcc)]
        lines.append(f"{'mean':<{w}}  {self.mean_pcc:+.4f}")
        lines.append(f"valid={self.n_valid} substituted={self.n_substituted}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- batching


@dataclass
class Prepared:
    id: str
    streams: dict[str, np.ndarray]
    label: np.ndarray
    valid: bool


def prepare_sample(sample: Sample, combo="all") -> Prepared:
    """Apply the feature combo and drop invalid frames; maps modality to stream name."""
    sel, _ = select_feature_combo(sample, combo)
    streams = {}
    for name, seq in (("video", sel.visual), ("audio", sel.audio)):
        if seq is not None:
            streams[name] = filter_valid_frames(seq).data
    return Prepared(sample.id, streams, sample.label, sel.is_valid)


def combo_dims(dataset: Dataset, combo="all") -> dict[str, int]:
    for s in dataset:
        return select_feature_combo(s, combo)[1]
    raise EvaluationError("dataset is empty")


def collate(items: Sequence[Prepared], streams: Sequence[str]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Pad each stream to the batch's longest sequence; the mask marks real frames."""
    out = {}
    for name in streams:
        seqs = [it.streams[name] for it in items]
        tmax = max(len(s) for s in seqs)
        dim = seqs[0].shape[1]
        data = np.zeros((len(seqs), tmax, dim), dtype=np.float32)
        mask = np.zeros((len(seqs), tmax), dtype=bool)
        for i, s in enumerate(seqs):
            data[i, : len(s)] = s
            mask[i, : len(s)] = True
        out[name] = (data, mask)
    return out


def predict(model: EriModel, items: Sequence[Prepared], batch_size: int = 32, workers: int = 1) -> np.ndarray:
    """Inference-mode predictions in input order."""
    if not items:
        return np.zeros((0, model.config.output_dim))
    chunks = [items[i : i + batch_size] for i in range(0, len(items), batch_size)]

    def run(chunk):
        out, _ = model.forward_batch(collate(chunk, model.config.streams))
        return out.data.astype(np.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------- evaluation


def evaluate(model: EriModel, dataset: Dataset, combo="all", batch_size: int = 32, workers: int = 1) -> EvalReport:
    """Predict valid samples; invalid ones get the per-emotion mean of valid predictions."""
    items = [prepare_sample(s, combo) for s in dataset]
    valid = [it for it in items if it.valid]
    if not valid:
        raise EvaluationError("no valid samples to evaluate")
    preds_valid = predict(model, valid, batch_size, workers)
    fill = preds_valid.mean(axis=0)
    by_id = {it.id: p for it, p in zip(valid, preds_valid)}
    preds = np.stack([by_id.get(it.id, fill) for it in items])
    labels = np.stack([it.label for it in items])
    substituted = [it.id for it in items if not it.valid]
    for sid in substituted:
        logger.info("evaluation: %s has no valid frames, using mean prediction", sid)
    rhos, flags = [], []
    for e in range(labels.shape[1]):
        r, d = pcc(preds[:, e], labels[:, e], return_flag=True)
        rhos.append(r)
        flags.append(d)
    return EvalReport(
        per_emotion_pcc=rhos,
        mean_pcc=mean_pcc(rhos),
        n_valid=len(valid),
        n_substituted=len(substituted),
        predictions=preds,
        labels=labels,
        ids=[it.id for it in items],
        substituted=substituted,
        degenerate=flags,
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: EriModel
    optimizer: AdamW
    history: list[dict]
    best_val: float | None = None


def training_items(dataset: Dataset, cfg: TrainConfig, combo="all") -> list[Prepared]:
    train = apply_training_filter(dataset.split("train"), cfg.min_valid_frames)
    items = [prepare_sample(s, combo) for s in train]
    dropped = [it.id for it in items if not it.valid]
    if dropped:
        logger.info("skipping %d training samples with an empty stream", len(dropped))
    return [it for it in items if it.valid]


def train_model(
    model: EriModel,
    items: Sequence[Prepared],
    cfg: TrainConfig,
    val: Dataset | None = None,
    combo="all",
    optimizer: AdamW | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch training on prepared items; one history row per epoch."""
    if not items:
        raise EvaluationError("no training samples left after filtering")
    model.astype(np.dtype(cfg.dtype))
    opt = optimizer or AdamW(
        model.params, cfg.lr0, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay
    )
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    history, best, best_params = [], None, None
    streams = model.config.streams
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at_epoch(epoch)
        order = order_rng.permutation(len(items))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [items[j] for j in order[i : i + cfg.batch_size]]
            labels = np.stack([it.label for it in batch])
            model.params.zero_grads()
            with ad.Tape() as tape:
                out, _ = model.forward_batch(collate(batch, streams), rng=drop_rng)
                loss = l2_loss(out, labels)
            tape.backward(loss)
            opt.step(lr)
            losses.append(float(loss.data))
        row = {"epoch": epoch, "step": opt.step_count, "lr": lr, "train_loss": float(np.mean(losses))}
        if val is not None and len(val):
            row["val_mean_pcc"] = evaluate(model, val, combo, cfg.batch_size).mean_pcc
            if cfg.best_val and (best is None or row["val_mean_pcc"] > best):
                best = row["val_mean_pcc"]
                best_params = {n: t.data.copy() for n, t in model.params.items()}
        logger.info("epoch %d lr %.3g loss %.5f", epoch, lr, row["train_loss"])
        history.append(row)
        if on_epoch:
            on_epoch(row)
    if best_params is not None:
        for n, t in model.params.items():
            t.data = best_params[n]
    return TrainResult(model, opt, history, best)


def fit(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, combo="all", val_split: str | None = None) -> TrainResult:
    """Build a model sized for ``combo`` and train it on the dataset's train split."""
    dims = combo_dims(dataset, combo)
    cfg = replace(model_cfg, **dims)
    model = init_model(cfg)
    items = training_items(dataset, train_cfg, combo)
    val = dataset.split(val_split) if val_split else None
    return train_model(model, items, train_cfg, val, combo)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    label: str
    combo: tuple[str, ...]
    scores: list[float]

    @property
    def mean_pcc(self) -> float:
        return float(np.mean(self.scores))


def run_ablation(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    combos: Mapping[str, Sequence[str]],
    seeds: Sequence[int] = (0,),
    eval_split: str = "val",
) -> list[AblationRow]:
    """Train and evaluate one model per combo and seed, all else held fixed."""
    rows = []
    target = dataset.split(eval_split)
    for label, combo in combos.items():
        combo = tuple(sorted(parse_combo(combo)))
        scores = []
        for seed in seeds:
            res = fit(dataset, replace(model_cfg, seed=seed), replace(train_cfg, seed=seed), combo)
            scores.append(evaluate(res.model, target, combo, train_cfg.batch_size).mean_pcc)
        logger.info("ablation %-28s mean pcc %.4f", label, float(np.mean(scores)))
        rows.append(AblationRow(label, combo, scores))
    return rows


def ablation_to_json(rows: Sequence[AblationRow]) -> str:
    return json.dumps(
        [{"combination": r.label, "features": list(r.combo), "scores": r.scores, "mean_pcc": r.mean_pcc} for r in rows],
        indent=1,
    )


def ablation_to_text(rows: Sequence[AblationRow]) -> str:
    w = max([len("Combination")] + [len(r.label) for r in rows])
    lines = [f"{'Combination':<{w}}  Validation"]
    lines += [f"{r.label:<{w}}  {r.mean_pcc:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


def config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": asdict(model_cfg), "train": asdict(train_cfg)}


def attention_curves(model: EriModel, items: Sequence[Prepared], stream: str = "video", batch_size: int = 32) -> list[np.ndarray]:
    """Per-frame regression-token attention (final block, head-averaged) for each item."""
    from .layers import extract_regression_attention

    if model.config.pooling != "token":
        raise ValueError("attention curves need a regression-token model")
    curves = []
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        _, records = model.forward_batch(collate(chunk, model.config.streams))
        lengths = [len(it.streams[stream]) for it in chunk]
        curves.extend(extract_regression_attention(records[stream], lengths))
    return curves
