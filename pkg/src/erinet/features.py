"""Feature-matrix files, the dataset manifest, validity rules and ablation slicing."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FMX_MAGIC = b"FMX1"
_HEADER = struct.Struct("<4sIIB")

# fused visual layout: ResNet | AU occurrence | AU intensity
RESNET_COLS = (0, 512)
AU_OCC_COLS = (512, 529)
AU_INT_COLS = (529, 546)
VISUAL_DIM = 546
AUDIO_DIM = 1024
COMBO_PARTS = ("resnet", "au_occurrence", "au_intensity", "audio")
_PART_COLS = {"resnet": RESNET_COLS, "au_occurrence": AU_OCC_COLS, "au_intensity": AU_INT_COLS}

MIN_TRAIN_FRAMES = 50
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- FMX


def encode_feature_matrix(data: np.ndarray, valid: np.ndarray | None = None) -> bytes:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("feature matrix contains non-finite values")
    rows, cols = data.shape
    out = [_HEADER.pack(FMX_MAGIC, rows, cols, 0 if valid is None else 1)]
    out.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (rows,):
            raise ValueError(f"validity mask has shape {valid.shape}, expected ({rows},)")
        out.append(valid.astype(np.uint8).tobytes())
    return b"".join(out)


def write_feature_matrix(path, data: np.ndarray, valid: np.ndarray | None = None) -> None:
    Path(path).write_bytes(encode_feature_matrix(data, valid))


def decode_feature_matrix(raw: bytes, path="<bytes>") -> tuple[np.ndarray, np.ndarray | None]:
    if len(raw) < _HEADER.size:
        raise FormatError(path, len(raw), f"header needs {_HEADER.size} bytes")
    magic, rows, cols, has_mask = _HEADER.unpack_from(raw, 0)
    if magic != FMX_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if has_mask not in (0, 1):
        raise FormatError(path, 12, f"mask flag must be 0 or 1, got {has_mask}")
    off = _HEADER.size
    need = rows * cols * 4
    if len(raw) < off + need:
        full_rows = (len(raw) - off) // (4 * cols) if cols else 0
        raise FormatError(
            path, len(raw), f"payload truncated: header says {rows}x{cols}, found {full_rows} full rows"
        )
    data = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad.reshape(-1))[0])
        raise FormatError(path, off + 4 * first, "non-finite feature value")
    off += need
    valid = None
    if has_mask:
        if len(raw) < off + rows:
            raise FormatError(path, len(raw), f"validity mask truncated, need {rows} bytes")
        mbytes = np.frombuffer(raw, dtype=np.uint8, count=rows, offset=off)
        if (mbytes > 1).any():
            raise FormatError(path, off + int(np.argmax(mbytes > 1)), "mask bytes must be 0 or 1")
        valid = mbytes.astype(bool)
        off += rows
    if len(raw) != off:
        raise FormatError(path, off, f"{len(raw) - off} trailing bytes")
    return data.astype(np.float32), valid


def read_feature_file(path) -> tuple[np.ndarray, np.ndarray | None]:
    return decode_feature_matrix(Path(path).read_bytes(), path)


def load_feature_matrix(path) -> np.ndarray:
    return read_feature_file(path)[0]


# ---------------------------------------------------------------- sequences / samples


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    modality: str  # "visual" | "audio"
    data: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_array(cls, modality: str, data, valid=None) -> "FeatureSequence":
        data = np.asarray(data, dtype=np.float32)
        valid = np.ones(len(data), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        if valid.shape != (len(data),):
            raise ValueError(f"validity mask length {valid.shape} vs {len(data)} frames")
        return cls(modality, data, valid)

    def __len__(self) -> int:
        return len(self.data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def filter_valid_frames(seq: FeatureSequence) -> FeatureSequence:
    removed = len(seq) - seq.n_valid
    if removed == 0:
        return seq
    logger.debug("dropped %d invalid %s frames", removed, seq.modality)
    return FeatureSequence(seq.modality, seq.data[seq.valid], np.ones(seq.n_valid, dtype=bool))


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    visual: FeatureSequence | None
    audio: FeatureSequence | None
    label: np.ndarray
    split: str

    @property
    def n_valid_visual(self) -> int:
        return self.visual.n_valid if self.visual is not None else 0

    @property
    def is_valid(self) -> bool:
        """A sample is usable when every present stream has at least one valid frame."""
        for seq in (self.visual, self.audio):
            if seq is not None and seq.n_valid == 0:
                return False
        return self.visual is not None or self.audio is not None


@dataclass
class Dataset:
    samples: list[Sample]
    label_scale: str = "unit"

    def split(self, name: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.split == name], self.label_scale)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples]) if self.samples else np.zeros((0, 7))


def normalize_labels(raw, scale: str, sample_id: str = "?") -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (7,):
        raise DataError(f"sample {sample_id}: expected 7 labels, got {raw.shape}")
    if not np.isfinite(raw).all():
        raise DataError(f"sample {sample_id}: non-finite label")
    if scale == "unit":
        top = 1.0
    elif scale == "hundred":
        top = 100.0
    else:
        raise DataError(f"unknown label scale {scale!r}")
    if (raw < 0).any() or (raw > top).any():
        raise DataError(f"sample {sample_id}: label outside [0, {top:g}] for scale {scale!r}: {raw.tolist()}")
    return np.clip(raw / top, 0.0, 1.0)


def apply_training_filter(dataset: Dataset, min_frames: int = MIN_TRAIN_FRAMES) -> Dataset:
    """Drop training samples with fewer than ``min_frames`` valid visual frames.

    Only samples that carry a visual stream are judged; val/test are untouched.
    """
    kept = []
    for s in dataset.samples:
        if s.split == "train" and s.visual is not None and s.n_valid_visual < min_frames:
            logger.info("training filter: dropping %s (%d valid frames)", s.id, s.n_valid_visual)
            continue
        kept.append(s)
    return Dataset(kept, dataset.label_scale)


# ---------------------------------------------------------------- manifest


def load_manifest(path) -> Dataset:
    """Load every sample listed in a JSON manifest; paths resolve against its folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    scale = doc.get("label_scale", "unit")
    if scale not in ("unit", "hundred"):
        raise DataError(f"{path}: label_scale must be 'unit' or 'hundred', got {scale!r}")
    root = path.parent
    samples, seen = [], set()
    for rec in doc.get("samples", []):
        sid = str(rec.get("id"))
        if sid in seen:
            raise DataError(f"{path}: duplicate sample id {sid!r}")
        seen.add(sid)
        split = rec.get("split")
        if split not in SPLITS:
            raise DataError(f"{path}: sample {sid}: split must be one of {SPLITS}, got {split!r}")
        seqs = {}
        for key, modality in (("visual", "visual"), ("audio", "audio")):
            rel = rec.get(key)
            if rel is None:
                seqs[key] = None
                continue
            fpath = root / rel
            if not fpath.exists():
                raise DataError(f"{path}: sample {sid}: missing {key} file {fpath}")
            data, valid = read_feature_file(fpath)
            if modality == "audio":
                valid = None  # audio has no validity concept
            seqs[key] = FeatureSequence.from_array(modality, data, valid)
        samples.append(Sample(sid, seqs["visual"], seqs["audio"], normalize_labels(rec.get("labels"), scale, sid), split))
    return Dataset(samples, scale)


def write_manifest(path, records: list[dict], label_scale: str = "unit") -> None:
    doc = {"version": 1, "label_scale": label_scale, "samples": records}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- ablation combos


def parse_combo(value) -> frozenset[str]:
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace("+", ",").split(",") if p.strip()]
    else:
        parts = list(value)
    combo = frozenset(parts)
    if not combo:
        raise ConfigError("feature combo is empty")
    unknown = combo - set(COMBO_PARTS) - {"all"}
    if unknown:
        raise ConfigError(f"unknown feature(s) {sorted(unknown)}; choose from {COMBO_PARTS} or 'all'")
    return combo


def combo_columns(combo) -> np.ndarray:
    cols = [np.arange(*_PART_COLS[p]) for p in ("resnet", "au_occurrence", "au_intensity") if p in combo]
    return np.concatenate(cols) if cols else np.zeros(0, dtype=int)


def select_feature_combo(sample: Sample, combo) -> tuple[Sample, dict[str, int]]:
    """Slice the fused visual columns and drop unused streams.

    ``combo == {"all"}`` keeps both streams untouched, whatever their width.
    Returns the new sample and the implied ``{"visual_dim", "audio_dim"}``.
    """
    combo = parse_combo(combo)
    if combo == {"all"}:
        return sample, {
            "visual_dim": sample.visual.dim if sample.visual is not None else 0,
            "audio_dim": sample.audio.dim if sample.audio is not None else 0,
        }
    cols = combo_columns(combo)
    visual = None
    if len(cols):
        if sample.visual is None:
            raise DataError(f"sample {sample.id}: combo needs visual features but none are present")
        if sample.visual.dim != VISUAL_DIM:
            raise DataError(
                f"sample {sample.id}: combo slicing needs the {VISUAL_DIM}-column fused layout, got {sample.visual.dim}"
            )
        visual = replace(sample.visual, data=np.ascontiguousarray(sample.visual.data[:, cols]))
    audio = None
    if "audio" in combo:
        if sample.audio is None:
            raise DataError(f"sample {sample.id}: combo needs audio features but none are present")
        audio = sample.audio
    dims = {"visual_dim": len(cols), "audio_dim": audio.dim if audio is not None else 0}
    return replace(sample, visual=visual, audio=audio), dims


MODALITY_COMBOS = {
    "Only audio": ("audio",),
    "Only AU": ("au_occurrence", "au_intensity"),
    "Only ResNet18": ("resnet",),
    "ResNet18 + AU": ("resnet", "au_occurrence", "au_intensity"),
    "ResNet18 + audio": ("resnet", "audio"),
    "ResNet18 + AU + audio": ("resnet", "au_occurrence", "au_intensity", "audio"),
}

# AU variants are evaluated inside the full ResNet18 + audio model
AU_COMBOS = {
    "AU occurrence": ("resnet", "au_occurrence", "audio"),
    "AU intensity": ("resnet", "au_intensity", "audio"),
    "AU occurrence + intensity": ("resnet", "au_occurrence", "au_intensity", "audio"),
}
