"""Synthetic SITS datasets, image-level label derivation and on-disk formats.

Tensor file layout (little-endian)::

    b"STSR" | u32 version=1 | u32 rank | rank x u32 dims | u8 dtype | payload

dtype tags: 0=f32, 1=u16, 2=f64.  Series are stored as f32, masks as u16.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"STSR"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("uint16"): 1, np.dtype("float64"): 2}


# ---------------------------------------------------------------------------
# tensor files


def write_tensor_file(path, tensor):
    arr = np.asarray(tensor)
    if arr.ndim > 4:
        raise FormatError(f"rank {arr.ndim} > 4 not supported")
    tag = _TAG_OF.get(arr.dtype)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint16")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", tag)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rank > 4:
        raise FormatError(f"{path}: rank {rank} > 4")
    off = 12
    if len(raw) < off + 4 * rank + 1:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    tag = raw[off]
    off += 1
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPE_TAGS[tag]
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - off != n * dt.itemsize:
        raise FormatError(
            f"{path}: payload has {len(raw) - off} bytes, dims {dims} need {n * dt.itemsize}"
        )
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# labels


def derive_image_labels(mask, K, min_frac=0.01):
    """Binary presence vector of length K; entry k-1 is foreground class k.

    A class is present when it covers at least ``min_frac`` of the image.
    Background (0) never yields a label.
    """
    if not 0.0 < min_frac < 1.0:
        raise ConfigError(f"min_frac must lie in (0, 1), got {min_frac}")
    mask = np.asarray(mask)
    if mask.size and (mask.max() > K or mask.min() < 0):
        raise DataError(f"mask values must lie in 0..{K}, found {mask.min()}..{mask.max()}")
    counts = np.bincount(mask.ravel().astype(np.int64), minlength=K + 1)
    fg = counts[1:]
    # relative slack so that e.g. 1 of 100 pixels passes min_frac=0.01
    present = (fg > 0) & (fg >= min_frac * mask.size * (1 - 1e-12))
    return present.astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset types


@dataclass
class SITSSample:
    series: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] uint16 in 0..K
    image_labels: np.ndarray  # [K] uint8
    sample_id: str

    def __post_init__(self):
        if self.series.ndim != 4:
            raise DataError(f"series must be [T,C,H,W], got shape {self.series.shape}")
        if self.mask.shape != self.series.shape[2:]:
            raise DataError("mask shape must equal series spatial shape")
        if self.mask.size and int(self.mask.max()) > len(self.image_labels):
            raise DataError("mask value exceeds class count")


@dataclass
class SynthConfig:
    T: int = 12
    C: int = 4
    H: int = 16
    W: int = 16
    K: int = 4
    parcels_per_image: int = 6
    phenology_profiles: np.ndarray | None = None  # [K, T]; None -> default bumps
    noise_std: float = 0.03
    cloud_prob: float = 0.1
    seed: int = 0
    min_frac: float = 0.01
    parcel_size: tuple = (3, 7)
    background_level: float = 0.25

    def __post_init__(self):
        for name in ("T", "C", "H", "W", "K"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.H < 3 or self.W < 3:
            raise ConfigError("H and W must be >= 3 to keep a background margin")
        if self.parcels_per_image < 0:
            raise ConfigError("parcels_per_image must be >= 0")
        if not 0.0 <= self.cloud_prob < 1.0:
            raise ConfigError(f"cloud_prob must lie in [0, 1), got {self.cloud_prob}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        lo, hi = self.parcel_size
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad parcel_size {self.parcel_size}")
        if self.phenology_profiles is None:
            self.phenology_profiles = default_profiles(self.K, self.T)
        p = np.asarray(self.phenology_profiles, dtype=np.float64)
        if p.shape != (self.K, self.T):
            raise ConfigError(f"phenology_profiles must be [K, T] = {(self.K, self.T)}, got {p.shape}")
        if self.K > 1:
            d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
            if d[~np.eye(self.K, dtype=bool)].min() <= 0:
                raise ConfigError("phenology profiles must be pairwise distinct")
        self.phenology_profiles = p


def bump(T, peak, width, base=0.1, height=0.75):
    """Piecewise-linear bump: ``base`` everywhere, rising to ``height`` at ``peak``."""
    t = np.arange(T, dtype=np.float64)
    tri = np.clip(1.0 - np.abs(t - peak) / max(width, 1e-9), 0.0, 1.0)
    return base + (height - base) * tri


def default_profiles(K, T):
    width = max(T / 4.0, 1.0)
    peaks = [(k + 0.5) * T / K - 0.5 for k in range(K)]
    return np.stack([bump(T, p, width) for p in peaks])


def _channel_gains(C):
    return np.linspace(1.0, 0.6, C)


@dataclass
class DatasetManifest:
    split: str
    entries: list = field(default_factory=list)  # (sample_id, series_path, mask_path, labels)
    format_version: int = MANIFEST_VERSION
    root: Path | None = None
    K: int | None = None

    def resolve(self, rel):
        rel = Path(rel)
        return rel if rel.is_absolute() or self.root is None else self.root / rel

    def load(self, i):
        sid, sp, mp, labels = self.entries[i]
        series = read_tensor_file(self.resolve(sp))
        mask = read_tensor_file(self.resolve(mp))
        return SITSSample(series, mask, np.asarray(labels, dtype=np.uint8), sid)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        for i in range(len(self.entries)):
            yield self.load(i)


def write_manifest(path, manifest):
    path = Path(path)
    lines = [
        f"format_version={manifest.format_version}",
        f"split={manifest.split}",
    ]
    if manifest.K is not None:
        lines.append(f"K={manifest.K}")
    for sid, sp, mp, labels in manifest.entries:
        idx = ",".join(str(k + 1) for k in np.flatnonzero(labels))
        lines.append(f"id={sid}\tseries={sp}\tmask={mp}\tlabels={idx}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    path = Path(path)
    header = {}
    raw_entries = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("id="):
            kv = dict(part.split("=", 1) for part in line.split("\t"))
            missing = {"id", "series", "mask", "labels"} - kv.keys()
            if missing:
                raise FormatError(f"{path}:{ln}: missing fields {sorted(missing)}")
            idx = [int(s) for s in kv["labels"].split(",") if s]
            raw_entries.append((kv["id"], kv["series"], kv["mask"], idx))
        else:
            key, _, value = line.partition("=")
            header[key] = value
    if int(header.get("format_version", -1)) != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {header.get('format_version')}")
    K = int(header["K"]) if "K" in header else max((max(i, default=0) for *_, i in raw_entries), default=0)
    entries = []
    for sid, sp, mp, idx in raw_entries:
        labels = np.zeros(K, dtype=np.uint8)
        for k in idx:
            if not 1 <= k <= K:
                raise FormatError(f"{path}: label index {k} outside 1..{K}")
            labels[k - 1] = 1
        entries.append((sid, sp, mp, labels))
    return DatasetManifest(header.get("split", "train"), entries, MANIFEST_VERSION, path.parent, K)


# ---------------------------------------------------------------------------
# generator


_SPLIT_CODES = {"train": 0, "test": 1}


def _paint_parcels(rng, config):
    H, W = config.H, config.W
    mask = np.zeros((H, W), dtype=np.uint16)
    lo, hi = config.parcel_size
    for _ in range(config.parcels_per_image):
        ph = int(rng.integers(lo, min(hi, H - 2) + 1))
        pw = int(rng.integers(lo, min(hi, W - 2) + 1))
        r0 = int(rng.integers(1, H - 1 - ph + 1))
        c0 = int(rng.integers(1, W - 1 - pw + 1))
        mask[r0 : r0 + ph, c0 : c0 + pw] = int(rng.integers(1, config.K + 1))
    return mask


def generate_sample(config, index, split="train"):
    """Draw one sample; the stream is keyed by (seed, split, index) only."""
    rng = np.random.default_rng([config.seed, _SPLIT_CODES.get(split, 2), index])
    T, C, H, W = config.T, config.C, config.H, config.W
    mask = _paint_parcels(rng, config)
    gains = _channel_gains(C)

    # background: flat level with a weak bump at a random date
    bg_peak = rng.uniform(0, T - 1)
    top = min(config.background_level + 0.2, float(config.phenology_profiles.max()))
    bg = bump(T, bg_peak, T / 4.0, base=config.background_level, height=top)
    signal = np.broadcast_to(bg[:, None, None], (T, H, W)).copy()

    # per-class jitter within an image: shifted peak, amplitude scaled down (never above the profile max)
    t = np.arange(T, dtype=np.float64)
    for value in np.unique(mask):
        if value == 0:
            continue
        prof = config.phenology_profiles[value - 1]
        shift = rng.uniform(-0.75, 0.75)
        scale = rng.uniform(0.85, 1.0)
        base = prof.min()
        shifted = np.interp(t - shift, t, prof)
        curve = base + (shifted - base) * scale
        signal[:, mask == value] = curve[:, None]

    series = signal[:, None, :, :] * gains[None, :, None, None]
    series = series + rng.normal(0.0, config.noise_std, size=series.shape)
    cloudy = rng.random(T) < config.cloud_prob
    for ti in np.flatnonzero(cloudy):
        series[ti] = rng.normal(0.9, 0.05, size=(C, H, W))
    series = np.clip(series, 0.0, 1.0).astype(np.float32)
    labels = derive_image_labels(mask, config.K, config.min_frac)
    return SITSSample(series, mask, labels, f"{split}_{index:05d}")


def synth_dataset(config, n_samples, out_dir, split="train"):
    """Generate ``n_samples`` samples into ``out_dir/split`` and write the manifest.

    Returns the manifest; identical arguments give byte-identical files.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    out_dir = Path(out_dir)
    sub = out_dir / split
    sub.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_samples):
        s = generate_sample(config, i, split)
        sp = f"{split}/{s.sample_id}.series.stsr"
        mp = f"{split}/{s.sample_id}.mask.stsr"
        write_tensor_file(out_dir / sp, s.series)
        write_tensor_file(out_dir / mp, s.mask)
        entries.append((s.sample_id, sp, mp, s.image_labels))
    manifest = DatasetManifest(split, entries, MANIFEST_VERSION, out_dir, config.K)
    write_manifest(out_dir / f"{split}_manifest.txt", manifest)
    return manifest


def load_arrays(manifest):
    """Stack a manifest into (series [N,T,C,H,W], masks [N,H,W], labels [N,K])."""
    samples = list(manifest)
    if not samples:
        raise DataError("empty manifest")
    series = np.stack([s.series for s in samples])
    masks = np.stack([s.mask.astype(np.int64) for s in samples])
    labels = np.stack([s.image_labels for s in samples]).astype(np.float32)
    return series, masks, labels, [s.sample_id for s in samples]


def num_threads():
    v = os.environ.get("EXACT_NUM_THREADS")
    return max(int(v), 1) if v else None
