"""Feature-tensor files, manifests, balanced batching and a synthetic generator.

STDF record layout (little-endian)::

    offset  size        field
    0       4           magic b"STDF"
    4       1           version (1)
    5       1           label (0 normal, 1 abnormal)
    6       2           id length n (u16)
    8       n           id, UTF-8
    8+n     1           rank r
    9+n     4*r         dims (u32 each, all >= 1)
    9+n+4r  4*prod      float32 payload, row-major (C outermost, W innermost)

A feature file holds exactly one rank-4 record and nothing else.
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, FormatError, ManifestError

MAGIC = b"STDF"
VERSION = 1
DEFAULT_SHAPE = (192, 16, 10, 10)
NORMAL, ABNORMAL = 0, 1


@dataclass
class FeatureClip:
    tensor: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        if self.label not in (NORMAL, ABNORMAL):
            raise ContractError(f"label must be 0 or 1, got {self.label!r}")


# ---------------------------------------------------------------------------
# STDF encoding
# ---------------------------------------------------------------------------


def encode_record(array: np.ndarray, label: int = 0, ident: str = "") -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind != "f":
        raise ContractError(f"expected a floating tensor, got dtype {arr.dtype}")
    arr = arr.astype("<f4", copy=False)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"refusing to write non-finite tensor {ident!r}")
    if arr.ndim > 255 or min(arr.shape, default=1) < 1:
        raise ContractError(f"unsupported shape {arr.shape}")
    name = ident.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ContractError("id longer than 65535 bytes")
    header = MAGIC + struct.pack("<BBH", VERSION, label, len(name)) + name
    header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise FormatError(f"truncated {what}: need {n} bytes, {max(len(buf) - offset, 0)} left", offset)


def decode_header(buf: bytes, offset: int = 0) -> tuple[int, str, tuple, int]:
    """Parse a record header; returns ``(label, id, shape, payload_offset)``."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    pos = offset + 4
    _need(buf, pos, 4, "header")
    version, label, n = struct.unpack_from("<BBH", buf, pos)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", pos)
    if label not in (NORMAL, ABNORMAL):
        raise FormatError(f"invalid label {label}", pos + 1)
    pos += 4
    _need(buf, pos, n, "id")
    try:
        ident = bytes(buf[pos : pos + n]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"id is not UTF-8: {exc.reason}", pos) from None
    pos += n
    _need(buf, pos, 1, "rank")
    (rank,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    _need(buf, pos, 4 * rank, "dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError(f"dimension {i} is zero", pos + 4 * i)
    count = 1
    for d in dims:
        count *= d
    if count * 4 > sys.maxsize:
        raise FormatError(f"dims {dims} overflow the addressable payload size", pos)
    return label, ident, tuple(dims), pos + 4 * rank


def decode_record(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int, str, int]:
    """Returns ``(array, label, id, end_offset)``; the array is native float32."""
    label, ident, shape, pos = decode_header(buf, offset)
    nbytes = 4 * int(np.prod(shape, dtype=object))
    _need(buf, pos, nbytes, "payload")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
    return arr.astype(np.float32), label, ident, pos + nbytes


def write_feature_file(clip: FeatureClip, path) -> None:
    arr = np.asarray(clip.tensor)
    if arr.ndim != 4:
        raise ContractError(f"feature clips are rank 4 (C,T,H,W), got shape {arr.shape}")
    Path(path).write_bytes(encode_record(arr, clip.label, clip.id))


def read_feature_file(path) -> FeatureClip:
    buf = Path(path).read_bytes()
    arr, label, ident, end = decode_record(buf)
    if arr.ndim != 4:
        raise FormatError(f"feature files must be rank 4, got rank {arr.ndim}", 8 + len(ident.encode()))
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return FeatureClip(arr, label, ident)


def check_feature_file(path) -> tuple[int, str, tuple]:
    """Validate a file's header and size without loading the payload."""
    path = Path(path)
    size = path.stat().st_size
    with path.open("rb") as fh:
        head = fh.read(8)
        if len(head) == 8:
            (n,) = struct.unpack_from("<H", head, 6)
            head += fh.read(n + 1)
            if len(head) == 9 + n:
                head += fh.read(4 * head[-1])
    label, ident, shape, pos = decode_header(head)
    expected = pos + 4 * int(np.prod(shape, dtype=object))
    if size < expected:
        raise FormatError(f"truncated payload: file is {size} bytes, header implies {expected}", pos)
    if size > expected:
        raise FormatError(f"{size - expected} trailing bytes after payload", expected)
    return label, ident, shape


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    id: str


@dataclass
class Manifest:
    """Tab-separated ``<relative-path>\\t<label>\\t<id>`` lines, optional ``# split: ...`` header."""

    entries: list
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def by_label(self, label: int) -> list:
        return [e for e in self.entries if e.label == label]

    def load(self) -> list[FeatureClip]:
        return [read_feature_file(e.path) for e in self.entries]


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = [f"# split: {manifest.split}"]
    for e in manifest.entries:
        rel = Path(e.path).resolve().relative_to(root)
        lines.append(f"{rel.as_posix()}\t{e.label}\t{e.id}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, validate: bool = True) -> Manifest:
    """Parse a manifest; with ``validate`` every referenced file's header is checked."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    root = path.parent
    split = "train"
    entries, seen = [], set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            if key.strip() == "split":
                split = value.strip()
            continue
        parts = raw.split("\t")
        if len(parts) != 3 or parts[1] not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: expected '<path>\\t<0|1>\\t<id>'")
        rel, label, ident = parts[0], int(parts[1]), parts[2]
        if ident in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {ident!r}")
        seen.add(ident)
        entry = ManifestEntry(root / rel, label, ident)
        if validate:
            if not entry.path.is_file():
                raise ManifestError(f"{path}:{lineno}: missing file {entry.path}")
            check_feature_file(entry.path)
        entries.append(entry)
    if split not in ("train", "test"):
        raise ManifestError(f"{path}: split must be train or test, got {split!r}")
    return Manifest(entries, split)


# ---------------------------------------------------------------------------
# Pooling and batching
# ---------------------------------------------------------------------------


def pool_clip_features(clips: Sequence[np.ndarray], mode: str = "max") -> np.ndarray:
    """Merge per-clip features of one video: elementwise max (default) or mean."""
    if len(clips) == 0:
        raise ContractError("cannot pool an empty list of clips")
    arrays = [np.asarray(c) for c in clips]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ContractError(f"clips disagree in shape: {sorted({a.shape for a in arrays})}")
    if mode == "max":
        return np.maximum.reduce(arrays)
    if mode == "mean":
        return np.mean(arrays, axis=0).astype(arrays[0].dtype)
    raise ValueError(f"unknown pooling mode {mode!r}")


class BalancedSampler:
    """Batches of ``N`` normal + ``N`` abnormal entries, without replacement per epoch.

    An epoch is one pass over the smaller class; the larger class contributes
    an equally long prefix of its own shuffle. Each epoch reshuffles from
    ``(seed, epoch)`` alone, so any epoch can be regenerated independently.
    """

    def __init__(self, manifest: Manifest, batch_half: int, seed: int):
        self.normals = manifest.by_label(NORMAL)
        self.abnormals = manifest.by_label(ABNORMAL)
        if batch_half < 1:
            raise ContractError(f"batch half-size must be positive, got {batch_half}")
        short = min(len(self.normals), len(self.abnormals))
        if short < batch_half:
            raise ContractError(
                f"need at least {batch_half} clips per label, have {len(self.normals)} normal "
                f"and {len(self.abnormals)} abnormal"
            )
        self.batch_half = batch_half
        self.seed = seed
        self.steps_per_epoch = short // batch_half

    def epoch(self, index: int) -> list[list[ManifestEntry]]:
        rng = np.random.default_rng([self.seed, index])
        norm = rng.permutation(len(self.normals))
        abn = rng.permutation(len(self.abnormals))
        N = self.batch_half
        return [
            [self.normals[i] for i in norm[k * N : (k + 1) * N]]
            + [self.abnormals[i] for i in abn[k * N : (k + 1) * N]]
            for k in range(self.steps_per_epoch)
        ]


def sample_batch(manifest: Manifest, N: int, seed: int, epoch: int = 0, step: int = 0) -> list[FeatureClip]:
    """Load batch ``step`` of ``epoch``: N normal clips followed by N abnormal clips."""
    entries = BalancedSampler(manifest, N, seed).epoch(epoch)[step]
    return [read_feature_file(e.path) for e in entries]


# ---------------------------------------------------------------------------
# Synthetic temporal anomalies
# ---------------------------------------------------------------------------

# The per-channel drift pattern is a property of the synthetic "world", shared
# by every split, so it must not depend on the split seed.
DRIFT_PATTERN_SEED = 7
ANOMALY_KINDS = ("reversed_motion", "static_blob")


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the generator; defaults are the frozen fixture values."""

    smoothing: float = 1.0
    offset_std: float = 0.5
    noise_std: float = 0.1
    drift_span: float = 1.0  # ramp amplitude at the first/last frame, per unit channel gain
    band_fraction: float = 0.25
    region_fraction: float = 0.5  # side of the anomalous box relative to H and W


def _drift_gains(C: int) -> np.ndarray:
    return np.random.default_rng(DRIFT_PATTERN_SEED).standard_normal(C)


def synthetic_clip(
    rng: np.random.Generator,
    shape: tuple,
    abnormal: bool,
    kind: str = "reversed_motion",
    spec: SyntheticSpec = SyntheticSpec(),
) -> np.ndarray:
    """One clip of drifting smooth noise; abnormal clips break the drift in a box.

    Every channel pattern translates one site per frame along W while its
    level ramps linearly in time with a fixed per-channel gain. In an
    abnormal clip a box of sites in a band of channels either moves and
    ramps backwards (``reversed_motion``) or freezes at one randomly chosen
    frame (``static_blob``). Time enters only through the ordering of frames:
    a single frame drawn at a random time has the same distribution in both
    classes.
    """
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind {kind!r}; choose from {ANOMALY_KINDS}")
    C, T, H, W = shape
    field = gaussian_filter(rng.standard_normal((C, H, W)), sigma=(0, spec.smoothing, spec.smoothing), mode="wrap")
    field /= field.std() + 1e-12
    offsets = rng.normal(0.0, spec.offset_std, size=(C, 1, 1))
    gains = _drift_gains(C)
    u = np.arange(T) - (T - 1) / 2.0
    rate = spec.drift_span / max((T - 1) / 2.0, 1.0)

    clip = np.empty((C, T, H, W))
    for t in range(T):
        clip[:, t] = np.roll(field, t, axis=2) + offsets + (gains * rate * u[t])[:, None, None]

    if abnormal:
        band = slice(0, max(1, int(round(C * spec.band_fraction))))
        bh = max(1, int(round(H * spec.region_fraction)))
        bw = max(1, int(round(W * spec.region_fraction)))
        h0 = rng.integers(0, H - bh + 1)
        w0 = rng.integers(0, W - bw + 1)
        box = (band, slice(None), slice(h0, h0 + bh), slice(w0, w0 + bw))
        g = gains[band][:, None, None]
        off = offsets[band]
        if kind == "reversed_motion":
            frames = [np.roll(field[band], -t, axis=2) + off - g * rate * u[t] for t in range(T)]
        else:
            t0 = rng.integers(0, T)
            frozen = np.roll(field[band], t0, axis=2) + off + g * rate * u[t0]
            frames = [frozen] * T
        clip[box] = np.stack(frames, axis=1)[:, :, h0 : h0 + bh, w0 : w0 + bw]

    clip += rng.normal(0.0, spec.noise_std, size=clip.shape)
    return clip.astype(np.float32)


def generate_synthetic(
    out_dir,
    n_normal: int,
    n_abnormal: int,
    shape: tuple = DEFAULT_SHAPE,
    seed: int = 0,
    anomaly_kind: str = "reversed_motion",
    split: str = "train",
    spec: SyntheticSpec = SyntheticSpec(),
) -> Manifest:
    """Write ``n_normal + n_abnormal`` STDF clips and ``<split>.manifest`` under ``out_dir``.

    Clip ``i`` is drawn from its own stream seeded by ``(seed, i)``, so the
    dataset is a pure function of the arguments.
    """
    out = Path(out_dir)
    clip_dir = out / split
    clip_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    labels = [NORMAL] * n_normal + [ABNORMAL] * n_abnormal
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        arr = synthetic_clip(rng, tuple(shape), label == ABNORMAL, anomaly_kind, spec)
        ident = f"{split}-{i:05d}"
        path = clip_dir / f"{ident}.stdf"
        write_feature_file(FeatureClip(arr, label, ident), path)
        entries.append(ManifestEntry(path, label, ident))
    manifest = Manifest(entries, split)
    write_manifest(manifest, out / f"{split}.manifest")
    return manifest


def stack_clips(clips: Iterable[FeatureClip]) -> tuple[np.ndarray, np.ndarray]:
    clips = list(clips)
    return np.stack([c.tensor for c in clips]), np.array([c.label for c in clips])
