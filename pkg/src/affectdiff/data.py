"""Tri-modal sequence data: portable on-disk format, preprocessing, augmentation
and a class-imbalanced synthetic generator."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from scipy.signal import lfilter

from .affd import AffdWriter, FormatError, read_payload, slice_rows

log = logging.getLogger(__name__)

MODALITIES = ("text", "audio", "video")
EMOTIONS = ("Happy", "Sad", "Angry", "Fear", "Disgust", "Surprise")
# Happy/Fear/Disgust/Surprise shares from the reference corpus; Sad/Angry split the rest.
DEFAULT_PROPORTIONS = (0.659, 0.160, 0.107, 0.019, 0.029, 0.026)
STD_EPS = 1e-6
CLAMP = 10.0


@dataclass
class ModalitySample:
    id: str
    text: np.ndarray
    audio: np.ndarray
    video: np.ndarray
    label: int
    intensities: np.ndarray | None = None

    def modality(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def replace(self, **arrays) -> "ModalitySample":
        fields = dict(id=self.id, text=self.text, audio=self.audio, video=self.video,
                      label=self.label, intensities=self.intensities)
        fields.update(arrays)
        return ModalitySample(**fields)


@dataclass
class DatasetConfig:
    text_dim: int = 300
    audio_dim: int = 74
    video_dim: int = 35
    seq_len: int = 50
    num_classes: int = 6
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    split_seed: int = 42
    stratified: bool = False
    # synthetic generator
    n_samples: int = 3292
    proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    separation: float = 1.0
    synth_seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if min(self.text_dim, self.audio_dim, self.video_dim) < 1:
            raise ValueError("modality dims must be positive")

    @property
    def dims(self) -> dict[str, int]:
        return {"text": self.text_dim, "audio": self.audio_dim, "video": self.video_dim}


@dataclass
class DropRecord:
    id: str
    reason: str


# --------------------------------------------------------------------------
# portable format


def write_dataset(path: str | Path, samples: list[ModalitySample]) -> Path:
    """Write samples as ``manifest.jsonl`` plus one AFFD file per modality."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    writers = {m: AffdWriter(path / f"{m}.affd") for m in MODALITIES}
    try:
        with open(path / "manifest.jsonl", "w") as fh:
            for s in samples:
                rec = {"id": s.id, "label": int(s.label)}
                if s.intensities is not None:
                    rec["intensities"] = [float(v) for v in np.asarray(s.intensities, dtype=np.float32)]
                for m in MODALITIES:
                    arr = np.asarray(s.modality(m), dtype=np.float32)
                    rows, dim = arr.shape
                    rec[m] = {"rows": rows, "intervals": rows, "dim": dim,
                              "offset": writers[m].append(arr)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        for w in writers.values():
            w.close()
    return path


def ingest(path: str | Path, config: DatasetConfig) -> tuple[list[ModalitySample], list[DropRecord]]:
    """Read a dataset directory, pruning misaligned or empty samples.

    A sample is dropped when any modality's interval count disagrees with its
    stored row count, when a block runs past the end of its file, or when a
    modality has no rows. NaN/Inf values are replaced by zero.
    """
    path = Path(path)
    manifest = path / "manifest.jsonl"
    if not manifest.exists():
        raise FormatError(f"no manifest.jsonl in {path}")
    payloads = {m: read_payload(path / f"{m}.affd") for m in MODALITIES}
    dims = config.dims
    samples, drops = [], []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["id"])
                label = int(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{manifest}:{lineno}: bad record ({exc})") from None
            arrays, reason = {}, None
            for m in MODALITIES:
                entry = rec.get(m)
                if entry is None:
                    raise FormatError(f"{manifest}:{lineno}: missing '{m}' entry")
                dim = int(entry.get("dim", dims[m]))
                if dim != dims[m]:
                    raise FormatError(f"{manifest}:{lineno}: {m} dim {dim} != configured {dims[m]}")
                rows = int(entry["rows"])
                intervals = int(entry.get("intervals", rows))
                if rows == 0:
                    reason = f"empty {m}"
                    break
                if intervals != rows:
                    reason = f"{m} interval count {intervals} != row count {rows}"
                    break
                block = slice_rows(payloads[m], int(entry["offset"]), rows, dim)
                if block is None:
                    reason = f"{m} block out of range"
                    break
                arrays[m] = np.nan_to_num(block, nan=0.0, posinf=0.0, neginf=0.0)
            if reason is None and not 0 <= label < config.num_classes:
                reason = f"label {label} outside [0, {config.num_classes})"
            intensities = rec.get("intensities")
            if reason is None and intensities is not None:
                intensities = np.nan_to_num(np.asarray(intensities, dtype=np.float32))
                if len(intensities) != config.num_classes:
                    reason = "intensity vector length != class count"
                elif int(np.argmax(intensities)) != label:
                    reason = "label disagrees with argmax of intensities"
            if reason is not None:
                drops.append(DropRecord(sid, reason))
                continue
            samples.append(ModalitySample(sid, arrays["text"], arrays["audio"], arrays["video"],
                                          label, intensities))
    if drops:
        log.info("ingest %s: kept %d, dropped %d", path, len(samples), len(drops))
    return samples, drops


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class NormalizationStats:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    @classmethod
    def fit(cls, samples: list[ModalitySample]) -> "NormalizationStats":
        """Per-feature statistics over every (unpadded) row of ``samples``."""
        if not samples:
            raise ValueError("cannot fit normalization stats on an empty split")
        mean, std = {}, {}
        for m in MODALITIES:
            rows = np.concatenate([s.modality(m) for s in samples], axis=0).astype(np.float64)
            mean[m] = rows.mean(axis=0)
            std[m] = rows.std(axis=0)
        return cls(mean, std)


def normalize(samples: list[ModalitySample], stats: NormalizationStats) -> list[ModalitySample]:
    out = []
    for s in samples:
        arrays = {}
        for m in MODALITIES:
            x = s.modality(m)
            if x.shape[1] != stats.mean[m].shape[0]:
                raise ValueError(f"{s.id}: {m} has {x.shape[1]} features, stats have {stats.mean[m].shape[0]}")
            z = (x - stats.mean[m]) / np.maximum(stats.std[m], STD_EPS)
            arrays[m] = np.clip(z, -CLAMP, CLAMP).astype(np.float32)
        out.append(s.replace(**arrays))
    return out


def pad_or_truncate(sample: ModalitySample, length: int) -> ModalitySample:
    arrays = {}
    for m in MODALITIES:
        x = sample.modality(m)
        if x.shape[0] >= length:
            arrays[m] = x[:length]
        else:
            pad = np.zeros((length - x.shape[0], x.shape[1]), dtype=x.dtype)
            arrays[m] = np.concatenate([x, pad], axis=0)
    return sample.replace(**arrays)


def _split_key(seed: int, sid: str) -> bytes:
    return hashlib.blake2b(f"{seed}:{sid}".encode(), digest_size=8).digest()


def split_dataset(samples: list[ModalitySample], config: DatasetConfig) -> dict[str, list[ModalitySample]]:
    """Random train/val/test partition, a pure function of the id set and split seed."""
    def allocate(group):
        group = sorted(group, key=lambda s: _split_key(config.split_seed, s.id))
        n = len(group)
        n_train = int(round(config.train_frac * n))
        n_val = int(round(config.val_frac * n))
        n_val = min(n_val, n - n_train)
        return group[:n_train], group[n_train:n_train + n_val], group[n_train + n_val:]

    if config.stratified:
        parts = {"train": [], "val": [], "test": []}
        for c in sorted({s.label for s in samples}):
            tr, va, te = allocate([s for s in samples if s.label == c])
            parts["train"] += tr
            parts["val"] += va
            parts["test"] += te
        for k in parts:
            parts[k].sort(key=lambda s: _split_key(config.split_seed, s.id))
        return parts
    tr, va, te = allocate(samples)
    return {"train": tr, "val": va, "test": te}


# --------------------------------------------------------------------------
# tensors and batches


@dataclass
class Batch:
    text: torch.Tensor
    audio: torch.Tensor
    video: torch.Tensor
    labels: torch.Tensor

    def modalities(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.text, self.audio, self.video

    def replace(self, **kw) -> "Batch":
        d = dict(text=self.text, audio=self.audio, video=self.video, labels=self.labels)
        d.update(kw)
        return Batch(**d)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.text.to(dtype), self.audio.to(dtype), self.video.to(dtype), self.labels)

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class SequenceSet:
    """A split stacked into fixed-length tensors."""

    ids: list[str]
    text: torch.Tensor
    audio: torch.Tensor
    video: torch.Tensor
    labels: torch.Tensor

    @classmethod
    def from_samples(cls, samples: list[ModalitySample], length: int) -> "SequenceSet":
        padded = [pad_or_truncate(s, length) for s in samples]

        def stack(m):
            return torch.from_numpy(np.stack([s.modality(m) for s in padded]).astype(np.float32))

        return cls([s.id for s in padded], stack("text"), stack("audio"), stack("video"),
                   torch.tensor([s.label for s in padded], dtype=torch.long))

    def __len__(self):
        return len(self.ids)

    def as_batch(self) -> Batch:
        return Batch(self.text, self.audio, self.video, self.labels)

    def batches(self, batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
        n = len(self)
        if shuffle_seed is None:
            order = torch.arange(n)
        else:
            order = torch.randperm(n, generator=torch.Generator().manual_seed(shuffle_seed))
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.text[idx], self.audio[idx], self.video[idx], self.labels[idx])


@dataclass
class PreparedData:
    train: SequenceSet
    val: SequenceSet
    test: SequenceSet
    stats: NormalizationStats
    dropped: list[DropRecord] = field(default_factory=list)


def prepare(path: str | Path, config: DatasetConfig) -> PreparedData:
    """ingest -> split -> fit stats on train -> normalize -> pad, for every split."""
    samples, drops = ingest(path, config)
    if not samples:
        raise FormatError(f"{path}: no usable samples")
    parts = split_dataset(samples, config)
    stats = NormalizationStats.fit(parts["train"])
    sets = {k: SequenceSet.from_samples(normalize(v, stats), config.seq_len) for k, v in parts.items()}
    return PreparedData(sets["train"], sets["val"], sets["test"], stats, drops)


def dataset_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    for name in ["manifest.jsonl"] + [f"{m}.affd" for m in MODALITIES]:
        with open(path / name, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationPolicy:
    frame_mask_p: float = 0.1
    noise_sigma: float = 0.01
    modality_drop_p: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        for name in ("frame_mask_p", "modality_drop_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def augment(batch: Batch, policy: AugmentationPolicy, generator: torch.Generator) -> Batch:
    """Frame masking, then audio/video Gaussian noise, then whole-modality dropout."""
    if not policy.enabled:
        return batch
    text, audio, video = batch.modalities()
    B, L = text.shape[:2]
    if policy.frame_mask_p > 0:
        keep = (torch.rand(B, L, 1, generator=generator) >= policy.frame_mask_p).to(text.dtype)
        text, audio, video = text * keep, audio * keep, video * keep
    if policy.noise_sigma > 0:
        audio = audio + policy.noise_sigma * torch.randn(audio.shape, generator=generator, dtype=audio.dtype)
        video = video + policy.noise_sigma * torch.randn(video.shape, generator=generator, dtype=video.dtype)
    if policy.modality_drop_p > 0:
        keep = (torch.rand(B, 3, generator=generator) >= policy.modality_drop_p).to(text.dtype)
        text = text * keep[:, 0, None, None]
        audio = audio * keep[:, 1, None, None]
        video = video * keep[:, 2, None, None]
    return batch.replace(text=text, audio=audio, video=video)


def stream_seed(*keys: int) -> int:
    """Counter-based seed derived from an integer key tuple."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def stream(*keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(*keys))


# --------------------------------------------------------------------------
# synthetic generator

_SIGNAL = {"text": 1.0, "audio": 0.6, "video": 0.8}
_NAN_ROW_RATE = 0.02
_N_FACTORS = 4


def generate_synthetic(path: str | Path, config: DatasetConfig, proportions=None,
                       seed: int | None = None, separation: float | None = None) -> Path:
    """Write a class-imbalanced tri-modal dataset in the portable format.

    Each class owns a random mean direction per modality whose strength ramps
    with a per-sample emotion intensity; a low-rank factor shared across the
    three modalities and AR(1) temporal noise make classes overlap. Raw
    features get arbitrary per-feature offsets and scales (one audio channel is
    very large), and video has whole rows of NaN, so preprocessing has work
    to do.
    """
    proportions = np.asarray(config.proportions if proportions is None else proportions, dtype=np.float64)
    seed = config.synth_seed if seed is None else seed
    separation = config.separation if separation is None else separation
    C = config.num_classes
    if proportions.shape != (C,):
        raise ValueError(f"proportion vector has length {proportions.size}, expected {C}")
    if np.any(proportions < 0) or abs(proportions.sum() - 1.0) > 1e-6:
        raise ValueError("proportions must be non-negative and sum to 1")
    proportions = proportions / proportions.sum()

    dims = config.dims
    struct_rng = np.random.default_rng([seed, 0])
    means, loadings, offsets, scales = {}, {}, {}, {}
    for m in MODALITIES:
        D = dims[m]
        means[m] = struct_rng.normal(size=(C, D))
        loadings[m] = struct_rng.normal(size=(D, _N_FACTORS)) * 0.5
        offsets[m] = struct_rng.normal(scale=3.0, size=D)
        scales[m] = np.exp(struct_rng.normal(scale=0.75, size=D))
    scales["audio"][0] = 100.0  # pitch-like channel on a raw Hz scale

    samples = []
    width = len(str(config.n_samples))
    for i in range(config.n_samples):
        rng = np.random.default_rng([seed, 1, i])
        label = int(rng.choice(C, p=proportions))
        rows = int(rng.integers(30, 71))
        strength = rng.beta(2.0, 2.0)
        u = rng.normal(size=_N_FACTORS)
        t = np.arange(rows)
        envelope = 1.0 + 0.3 * np.sin(2 * np.pi * t / rows + rng.uniform(0, 2 * np.pi))
        arrays = {}
        for m in MODALITIES:
            D = dims[m]
            noise = lfilter([1.0], [1.0, -0.5], rng.normal(size=(rows, D)), axis=0) * np.sqrt(0.75)
            signal = separation * _SIGNAL[m] * strength * envelope[:, None] * means[m][label] * 0.35
            x = signal + loadings[m] @ u + noise
            x = offsets[m] + scales[m] * x
            if m == "video":
                x[rng.random(rows) < _NAN_ROW_RATE] = np.nan
            arrays[m] = x.astype(np.float32)
        intens = rng.uniform(0.0, 1.5, size=C)
        intens[label] = min(3.0, intens.max() + rng.uniform(0.1, 1.5))
        samples.append(ModalitySample(f"syn{i:0{width}d}", arrays["text"], arrays["audio"],
                                      arrays["video"], label, intens.astype(np.float32)))
    return write_dataset(path, samples)
