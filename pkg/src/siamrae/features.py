"""Audio ingest, log Mel filterbank features, normalization and synthetic corpora."""

from __future__ import annotations

import csv
import logging
import struct
import wave
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import SYNTH, make_rng

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("audio signal must be a non-empty 1-D array")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SegmentFeatures:
    """One phone segment: ``frames`` is a (T, F) matrix, T >= 1."""

    frames: np.ndarray
    label: str
    segment_id: str
    speaker_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"segment {self.segment_id!r}: frames must be (T, F) with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"segment {self.segment_id!r}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FbankConfig:
    win_length_s: float = 0.025
    hop_s: float = 0.010
    n_mels: int = 40
    f_min: float = 20.0
    f_max: float | None = None  # None means Nyquist
    n_fft: int | None = None  # None means next power of two >= window
    log_floor: float = 1e-10


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, segment: SegmentFeatures) -> SegmentFeatures:
        return apply_normalizer(self, segment)

    def invert(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.std + self.mean


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    segments_per_class: int = 200
    feature_dim: int = 40
    length_range: tuple[int, int] = (10, 30)
    class_separation: float = 1.0
    noise_std: float = 0.5
    seed: int = 0
    n_anchors: int = 4

    def __post_init__(self):
        t_min, t_max = self.length_range
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.segments_per_class < 1 or self.feature_dim < 1 or self.n_anchors < 2:
            raise ValueError("segments_per_class, feature_dim must be >= 1 and n_anchors >= 2")
        if t_min < 1 or t_min > t_max:
            raise ValueError(f"invalid length_range {self.length_range}")
        if self.class_separation < 0 or self.noise_std < 0:
            raise ValueError("class_separation and noise_std must be >= 0")


# --- audio -----------------------------------------------------------------


def load_wav(path: str | Path) -> AudioSignal:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            payload = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: unsupported encoding ({exc})") from exc
    except OSError as exc:
        raise DataError(f"{path}: unreadable file ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise DataError(f"{path}: unsupported encoding, sample width {8 * width} bits")
    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples, rate)


def write_wav(path: str | Path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(pcm.tobytes())


# --- filterbank ------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters, equally spaced on the Mel scale, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def compute_fbank(signal: AudioSignal, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Log Mel filterbank energies, one row per complete frame."""
    sr = signal.sample_rate
    win = int(round(cfg.win_length_s * sr))
    hop = int(round(cfg.hop_s * sr))
    x = signal.samples
    if x.size < win:
        raise DataError(f"signal of {x.size} samples is shorter than one {win}-sample window")
    n_fft = cfg.n_fft or 1 << (win - 1).bit_length()
    f_max = cfg.f_max if cfg.f_max is not None else sr / 2
    n_frames = frame_count(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg.n_mels, n_fft, sr, cfg.f_min, f_max).T
    return np.log(np.maximum(energies, cfg.log_floor))


# --- normalization ---------------------------------------------------------


def fit_normalizer(segments: Sequence[SegmentFeatures]) -> Normalizer:
    """Global per-dimension mean and population std over every frame of ``segments``.

    Fit on the training split only; columns with zero spread get ``STD_FLOOR``.
    """
    if not segments:
        raise DataError("cannot fit a normalizer on an empty segment list")
    stacked = np.concatenate([s.frames for s in segments], axis=0).astype(np.float64)
    if stacked.shape[0] < 2:
        raise DataError("normalizer needs at least 2 frames in total")
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return Normalizer(mean, std)


def apply_normalizer(normalizer: Normalizer, segment: SegmentFeatures) -> SegmentFeatures:
    if segment.feature_dim != normalizer.mean.shape[0]:
        raise DataError(
            f"segment {segment.segment_id!r} has {segment.feature_dim} features, "
            f"normalizer expects {normalizer.mean.shape[0]}"
        )
    return replace(segment, frames=(segment.frames - normalizer.mean) / normalizer.std)


# --- manifests -------------------------------------------------------------

MANIFEST_FIELDS = ("audio_id", "segment_id", "speaker_id", "phone_label", "start_seconds", "end_seconds")


@dataclass(frozen=True)
class ManifestRow:
    audio_id: str
    segment_id: str
    speaker_id: str
    phone_label: str
    start: float
    end: float
    status: str | None = None  # optional 7th column: "typical" / "disordered"


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Parse a tab-separated manifest. Blank lines and lines starting with ``#`` are skipped."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not rec or not rec[0].strip() or rec[0].startswith("#"):
                continue
            if len(rec) not in (6, 7):
                raise DataError(f"{path}:{lineno}: expected 6 or 7 fields, got {len(rec)}")
            try:
                start, end = float(rec[4]), float(rec[5])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad time span") from exc
            status = rec[6].strip() if len(rec) == 7 else None
            if status not in (None, "typical", "disordered"):
                raise DataError(f"{path}:{lineno}: status must be 'typical' or 'disordered', got {status!r}")
            rows.append(ManifestRow(rec[0], rec[1], rec[2], rec[3], start, end, status))
    return rows


def write_manifest(path: str | Path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("#" + "\t".join(MANIFEST_FIELDS) + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in rows:
            rec = [r.audio_id, r.segment_id, r.speaker_id, r.phone_label, repr(r.start), repr(r.end)]
            if r.status is not None:
                rec.append(r.status)
            w.writerow(rec)


def slice_row(row: ManifestRow, utterance: np.ndarray, hop_s: float = 0.010) -> SegmentFeatures:
    if row.end <= row.start:
        raise DataError(f"segment {row.segment_id!r}: end {row.end} <= start {row.start}")
    first = int(round(row.start / hop_s))
    last = int(round(row.end / hop_s))
    if first < 0 or last > utterance.shape[0]:
        raise DataError(
            f"segment {row.segment_id!r}: frames [{first}, {last}) outside utterance "
            f"{row.audio_id!r} of {utterance.shape[0]} frames"
        )
    if last <= first:
        raise DataError(f"segment {row.segment_id!r}: empty slice")
    return SegmentFeatures(np.array(utterance[first:last]), row.phone_label, row.segment_id, row.speaker_id)


def load_manifest(
    path: str | Path, feature_store: Mapping[str, np.ndarray], hop_s: float = 0.010
) -> list[SegmentFeatures]:
    """One segment per manifest row, in file order, sliced [start, end) at frame resolution."""
    out = []
    for row in read_manifest(path):
        try:
            utterance = feature_store[row.audio_id]
        except KeyError:
            raise DataError(f"segment {row.segment_id!r}: unknown audio id {row.audio_id!r}") from None
        out.append(slice_row(row, utterance, hop_s))
    return out


class FeatureStore(Mapping):
    """Utterance features found in a directory as ``<id>.feat`` caches or ``<id>.wav`` audio."""

    def __init__(self, root: str | Path, fbank: FbankConfig = FbankConfig()):
        self.root = Path(root)
        self.fbank = fbank
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, audio_id: str) -> np.ndarray:
        if audio_id not in self._cache:
            feat = self.root / f"{audio_id}.feat"
            wav = self.root / f"{audio_id}.wav"
            if feat.exists():
                segs = read_feature_cache(feat)
                if len(segs) != 1:
                    raise DataError(f"{feat}: expected a single utterance, found {len(segs)} records")
                self._cache[audio_id] = segs[0].frames
            elif wav.exists():
                self._cache[audio_id] = compute_fbank(load_wav(wav), self.fbank)
            else:
                raise KeyError(audio_id)
        return self._cache[audio_id]

    def __iter__(self):
        ids = {p.stem for p in self.root.iterdir() if p.suffix in (".feat", ".wav")}
        return iter(sorted(ids))

    def __len__(self):
        return sum(1 for _ in self)


# --- feature cache container -----------------------------------------------
# file: b"SRFC" | u32 record count
# record: u32 version | u32 F | u32 T | str label | str segment_id | str speaker_id | T*F float32
# str: u32 byte length + utf-8 bytes; all integers and floats little-endian.

_CACHE_MAGIC = b"SRFC"
_CACHE_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _unpack_str(buf: memoryview, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return bytes(buf[off : off + n]).decode("utf-8"), off + n


def write_feature_cache(path: str | Path, segments: Sequence[SegmentFeatures]) -> None:
    parts = [_CACHE_MAGIC, struct.pack("<I", len(segments))]
    for s in segments:
        t, f = s.frames.shape
        parts.append(struct.pack("<III", _CACHE_VERSION, f, t))
        parts += [_pack_str(s.label), _pack_str(s.segment_id), _pack_str(s.speaker_id)]
        parts.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_feature_cache(path: str | Path) -> list[SegmentFeatures]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != _CACHE_MAGIC:
        raise DataError(f"{path}: not a feature cache file")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out = []
    for _ in range(count):
        version, f, t = struct.unpack_from("<III", buf, off)
        if version != _CACHE_VERSION:
            raise DataError(f"{path}: unsupported record version {version}")
        off += 12
        label, off = _unpack_str(buf, off)
        seg_id, off = _unpack_str(buf, off)
        spk, off = _unpack_str(buf, off)
        n = 4 * t * f
        frames = np.frombuffer(buf[off : off + n], dtype="<f4").reshape(t, f).astype(np.float64)
        off += n
        out.append(SegmentFeatures(frames, label, seg_id, spk))
    return out


# --- synthetic corpora -----------------------------------------------------


@dataclass
class SynthCorpus:
    segments: list[SegmentFeatures]
    templates: np.ndarray = field(repr=False)  # (n_classes, n_anchors, F) anchor points

    def template_frames(self, cls: int, length: int) -> np.ndarray:
        return interpolate_anchors(self.templates[cls], length)


def class_label(c: int) -> str:
    return f"p{c:02d}"


def interpolate_anchors(anchors: np.ndarray, length: int) -> np.ndarray:
    """Piecewise-linear trajectory through ``anchors`` (K, F) sampled at ``length`` points on [0, 1]."""
    knots = np.linspace(0.0, 1.0, anchors.shape[0])
    times = np.linspace(0.0, 1.0, length) if length > 1 else np.zeros(1)
    return np.stack([np.interp(times, knots, anchors[:, j]) for j in range(anchors.shape[1])], axis=1)


def synth_corpus(cfg: SynthConfig) -> SynthCorpus:
    """Labelled segments: class template trajectory times ``class_separation`` plus Gaussian noise.

    Segments are ordered class-major; ids are ``c<class>_<index>``.
    """
    rng = make_rng(cfg.seed, SYNTH)
    templates = rng.standard_normal((cfg.n_classes, cfg.n_anchors, cfg.feature_dim)) * cfg.class_separation
    t_min, t_max = cfg.length_range
    segments = []
    for c in range(cfg.n_classes):
        for i in range(cfg.segments_per_class):
            length = int(rng.integers(t_min, t_max + 1))
            frames = interpolate_anchors(templates[c], length)
            frames = frames + cfg.noise_std * rng.standard_normal(frames.shape)
            segments.append(SegmentFeatures(frames, class_label(c), f"c{c:02d}_{i:04d}", f"spk{i % 10:02d}"))
    return SynthCorpus(segments, templates)
