"""Audio loading, level normalization, log-mel frames and mean pooling.

The log-mel extractor stands in for a pretrained SSL encoder: 25 ms Hann
window, 10 ms hop, 512-point magnitude spectrum, 80 triangular mel filters
over 0-8000 Hz, natural log floored at 1e-10.
"""
from __future__ import annotations

import os
import struct
import wave
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .dataset import MosDataset
from .errors import AudioError, CacheError, ChecksumError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10

CACHE_MAGIC = b"MOSF"
CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_count: int = 0

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise AudioError("waveform must be a non-empty 1-D array")
        if np.any(np.abs(s) > 1.0):
            raise AudioError("samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    frames: np.ndarray  # T x F

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError("frames must be a T x F matrix with T >= 1")
        object.__setattr__(self, "frames", f)

    @property
    def shape(self):
        return self.frames.shape


def load_wav(path: str | os.PathLike) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            nch, width, rate, nframes = (fh.getnchannels(), fh.getsampwidth(),
                                         fh.getframerate(), fh.getnframes())
            data = fh.readframes(nframes)
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioError(f"{path}: unsupported or corrupt WAV ({exc})") from None
    except OSError as exc:
        raise AudioError(f"{path}: {exc}") from None
    if nch != 1:
        raise AudioError(f"{path}: mono required, got {nch} channels")
    if width != 2:
        raise AudioError(f"{path}: 16-bit PCM required, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: {SAMPLE_RATE} Hz required, got {rate}")
    if len(data) != 2 * nframes:
        raise AudioError(f"{path}: truncated ({len(data) // 2} of {nframes} samples)")
    if nframes == 0:
        raise AudioError(f"{path}: no samples")
    pcm = np.frombuffer(data, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def write_wav(w: Waveform, path: str | os.PathLike) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with atomic_write(path, "wb") as raw:
        with wave.open(raw, "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(SAMPLE_RATE)
            fh.writeframes(pcm.tobytes())


def rms_db(samples: np.ndarray) -> float:
    return 20.0 * np.log10(np.sqrt(np.mean(np.square(samples))))


def normalize_level(w: Waveform, target_rms_db: float = -26.0) -> Waveform:
    """Scale to ``target_rms_db`` RMS, hard-clipping to [-1, 1].

    The number of clipped samples is recorded on the result's ``clip_count``.
    """
    rms = np.sqrt(np.mean(np.square(w.samples)))
    if rms == 0.0:
        raise AudioError("cannot normalize silence")
    gain = 10.0 ** (target_rms_db / 20.0) / rms
    out = w.samples * gain
    clipped = int(np.count_nonzero(np.abs(out) > 1.0))
    if clipped:
        out = np.clip(out, -1.0, 1.0)
    return Waveform(out, w.sample_rate, clipped)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sr: int = SAMPLE_RATE) -> np.ndarray:
    """(n_fft//2+1) x n_mels triangular filters evaluated at bin frequencies."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb.T


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    n = np.arange(WIN_LENGTH)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)
    win.setflags(write=False)
    return win


def n_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def logmel(w: Waveform) -> FrameFeatures:
    x = w.samples
    if x.shape[0] < WIN_LENGTH:
        raise AudioError(f"waveform shorter than one frame ({x.shape[0]} < {WIN_LENGTH} samples)")
    t = n_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:t]
    mag = np.abs(np.fft.rfft(frames * _hann(), n=N_FFT, axis=1))
    mel = mag @ mel_filterbank()
    return FrameFeatures(np.log(np.maximum(mel, LOG_FLOOR)))


def mean_pool(f: FrameFeatures) -> np.ndarray:
    return f.frames.mean(axis=0)


def extract(path: str | os.PathLike, target_rms_db: float | None = -26.0) -> FrameFeatures:
    w = load_wav(path)
    if target_rms_db is not None:
        w = normalize_level(w, target_rms_db)
    return logmel(w)


# -- feature cache -------------------------------------------------------------

def encode_features(frames: np.ndarray) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    t, f = frames.shape
    payload = frames.tobytes()
    return (CACHE_MAGIC + bytes([CACHE_VERSION]) + struct.pack("<II", t, f)
            + payload + struct.pack("<I", zlib.crc32(payload)))


def decode_features(blob: bytes, name: str = "<bytes>") -> FrameFeatures:
    if len(blob) < 13 or blob[:4] != CACHE_MAGIC:
        raise CacheError(f"{name}: not a feature cache file")
    if blob[4] != CACHE_VERSION:
        raise CacheError(f"{name}: unsupported cache version {blob[4]}")
    t, f = struct.unpack_from("<II", blob, 5)
    end = 13 + 4 * t * f
    if len(blob) != end + 4:
        raise CacheError(f"{name}: truncated cache file")
    payload = blob[13:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{name}: checksum mismatch")
    return FrameFeatures(np.frombuffer(payload, dtype="<f4").reshape(t, f).astype(np.float64))


class FeatureCache:
    """Directory of ``<utterance_id>.fea`` files."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, utterance_id: str) -> Path:
        return self.root / f"{utterance_id}.fea"

    def __contains__(self, utterance_id: str) -> bool:
        return self.path(utterance_id).is_file()

    def write(self, utterance_id: str, frames: np.ndarray) -> None:
        with atomic_write(self.path(utterance_id), "wb") as fh:
            fh.write(encode_features(frames))

    def load(self, utterance_id: str) -> FrameFeatures:
        p = self.path(utterance_id)
        try:
            blob = p.read_bytes()
        except FileNotFoundError:
            raise CacheError(f"cache miss: no features for {utterance_id!r} in {self.root}") from None
        return decode_features(blob, str(p))

    def pooled(self, d: MosDataset) -> np.ndarray:
        """N x F matrix of mean-pooled features in dataset order."""
        return np.stack([mean_pool(self.load(uid)) for uid in d.utterance_ids])

    def frames(self, d: MosDataset) -> list[FrameFeatures]:
        return [self.load(uid) for uid in d.utterance_ids]


def _up_to_date(cache_path: Path, audio_path: Path) -> bool:
    if not cache_path.is_file():
        return False
    if not audio_path.exists():
        return True
    return cache_path.stat().st_mtime_ns >= audio_path.stat().st_mtime_ns


def cache_features(d: MosDataset, out_dir: str | os.PathLike,
                   target_rms_db: float | None = -26.0, jobs: int = 1,
                   base_dir: str | os.PathLike | None = None) -> list[str]:
    """Extract and cache features for every utterance; returns ids written.

    Entries whose cache file is newer than the audio are skipped. Relative
    audio paths resolve against ``base_dir`` (default: working directory).
    """
    cache = FeatureCache(out_dir)
    base = Path(base_dir) if base_dir is not None else Path()
    todo = []
    for u in d.utterances:
        audio = base / u.audio_path
        if not _up_to_date(cache.path(u.utterance_id), audio):
            todo.append((u.utterance_id, audio))

    def work(item):
        uid, audio = item
        return uid, extract(audio, target_rms_db).frames

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(work, todo))
    else:
        results = [work(it) for it in todo]
    for uid, frames in results:
        cache.write(uid, frames)
    return [uid for uid, _ in results]
