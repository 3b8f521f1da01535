"""Acoustic front-end: MFCC extraction, energy VAD, sliding-window mean
normalization, and slicing into fixed-length training chunks.

The MFCC recipe is the minimal standard one: 25 ms Hamming-windowed frames
every 10 ms, 23 triangular mel filters, log energies, orthonormal DCT-II,
23 cepstra kept including C0. No liftering, no deltas.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft
import scipy.io.wavfile

from . import archive
from .errors import (
    AllFramesRemoved,
    InvalidSampleRate,
    UtteranceTooShort,
    WaveformTooShort,
)

CHUNK_FRAMES = 200


@dataclass
class Waveform:
    samples: np.ndarray  # 1-D float amplitudes
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise InvalidSampleRate(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, D)
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))
        if self.frames.shape[0] < 1:
            raise UtteranceTooShort("feature matrix needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Chunk:
    frames: np.ndarray  # (chunk_frames, D), a view into the source utterance
    speaker_index: int


@dataclass
class FeatureConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_ceps: int = 23
    num_filters: int = 23
    low_freq: float = 20.0
    high_freq: float | None = None  # defaults to Nyquist
    log_floor: float = 1e-10


@dataclass
class VadConfig:
    offset: float = 0.0  # keep frames with log-energy >= mean + offset
    min_keep_fraction: float = 0.1  # floor on the kept proportion (0 disables)


def read_wav(path: str) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples to [-1, 1)."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise WaveformTooShort(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise InvalidSampleRate(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    return Waveform(data.astype(np.float64) / 32768.0, int(rate))


def write_wav(path: str, w: Waveform) -> None:
    clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
    scipy.io.wavfile.write(path, w.sample_rate, (clipped * 32768.0).astype(np.int16))


def frame_signal(samples: np.ndarray, frame_len: int, frame_shift: int) -> np.ndarray:
    """Slice a signal into overlapping frames of `frame_len` every `frame_shift`."""
    n = len(samples)
    if n < frame_len:
        raise WaveformTooShort(f"signal of {n} samples is shorter than one frame ({frame_len})")
    t = 1 + (n - frame_len) // frame_shift
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(t)[:, None]
    return samples[idx]


def mel_scale(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (np.power(10.0, np.asarray(mel) / 2595.0) - 1.0)


def mel_filter_matrix(num_filters: int, n_fft: int, sample_rate: int,
                      low_freq: float, high_freq: float) -> np.ndarray:
    """Triangular mel filterbank, (num_filters, n_fft//2 + 1)."""
    mel_points = np.linspace(mel_scale(low_freq), mel_scale(high_freq), num_filters + 2)
    hz_points = inverse_mel_scale(mel_points)
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((num_filters, len(fft_freqs)))
    for i in range(num_filters):
        left, center, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        rising = (fft_freqs - left) / (center - left)
        falling = (right - fft_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_energies(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Per-frame mel filterbank energies (T, num_filters), pre-log.

    Exposed separately so the filterbank output can be checked against a
    direct DFT computation.
    """
    if w.sample_rate <= 0:
        raise InvalidSampleRate(str(w.sample_rate))
    frame_len = int(round(cfg.frame_length_ms * w.sample_rate / 1000.0))
    frame_shift = int(round(cfg.frame_shift_ms * w.sample_rate / 1000.0))
    frames = frame_signal(w.samples, frame_len, frame_shift)
    window = np.hamming(frame_len)
    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    spectrum = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    high = cfg.high_freq if cfg.high_freq is not None else w.sample_rate / 2.0
    fb = mel_filter_matrix(cfg.num_filters, n_fft, w.sample_rate, cfg.low_freq, high)
    return power @ fb.T


def extract_mfcc(w: Waveform, cfg: FeatureConfig | None = None,
                 utterance_id: str = "", speaker_id: str = "") -> FeatureMatrix:
    """Waveform -> (T, num_ceps) MFCC matrix, C0 first."""
    cfg = cfg or FeatureConfig()
    energies = mel_energies(w, cfg)
    log_mel = np.log(np.maximum(energies, cfg.log_floor))
    ceps = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]
    return FeatureMatrix(ceps, utterance_id, speaker_id)


def energy_vad(f: FeatureMatrix, cfg: VadConfig | None = None) -> FeatureMatrix:
    """Keep frames whose log-energy (C0) is at least the utterance mean plus
    an offset. If fewer than `min_keep_fraction` of the frames pass, the
    highest-energy frames are kept instead, so an utterance is never reduced
    below that floor. Row order is preserved."""
    cfg = cfg or VadConfig()
    energy = f.frames[:, 0]
    keep = energy >= energy.mean() + cfg.offset
    floor = int(np.ceil(cfg.min_keep_fraction * f.num_frames))
    if keep.sum() < floor:
        order = np.argsort(-energy, kind="stable")[:floor]
        keep = np.zeros(f.num_frames, dtype=bool)
        keep[order] = True
    if not keep.any():
        raise AllFramesRemoved(f"VAD removed all frames of {f.utterance_id!r}")
    return FeatureMatrix(f.frames[keep], f.utterance_id, f.speaker_id)


def sliding_cmn(f: FeatureMatrix, window_frames: int = 300) -> FeatureMatrix:
    """Subtract a per-dimension sliding mean over a centered window.

    Near the edges the window is shifted to stay inside the utterance, so it
    always spans min(window_frames, T) frames; with T <= window_frames every
    frame sees the global mean.
    """
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    t = f.num_frames
    csum = np.vstack([np.zeros((1, f.dim)), np.cumsum(f.frames, axis=0)])
    starts = np.clip(np.arange(t) - window_frames // 2, 0, max(0, t - window_frames))
    ends = np.minimum(t, starts + window_frames)
    means = (csum[ends] - csum[starts]) / (ends - starts)[:, None]
    return FeatureMatrix(f.frames - means, f.utterance_id, f.speaker_id)


def make_chunks(f: FeatureMatrix, speaker_index: int, rng: np.random.Generator,
                chunk_frames: int = CHUNK_FRAMES) -> list[Chunk]:
    """Slice an utterance into non-overlapping `chunk_frames`-row chunks at a
    random start offset; the returned frames are views into `f.frames`."""
    t = f.num_frames
    if t < chunk_frames:
        raise UtteranceTooShort(
            f"{f.utterance_id!r}: {t} frames < chunk size {chunk_frames}")
    n = t // chunk_frames
    offset = int(rng.integers(0, t - n * chunk_frames + 1))
    return [
        Chunk(f.frames[offset + i * chunk_frames: offset + (i + 1) * chunk_frames],
              speaker_index)
        for i in range(n)
    ]


def crop_to_duration(f: FeatureMatrix, n_frames: int,
                     rng: np.random.Generator) -> FeatureMatrix:
    """Contiguous n_frames-row slice at a seeded-random offset."""
    if f.num_frames < n_frames:
        raise UtteranceTooShort(
            f"{f.utterance_id!r}: {f.num_frames} frames < requested {n_frames}")
    offset = int(rng.integers(0, f.num_frames - n_frames + 1))
    return FeatureMatrix(f.frames[offset: offset + n_frames],
                         f.utterance_id, f.speaker_id)


def write_feature_archive(path: str, feats: list[FeatureMatrix]) -> int:
    return archive.write_records(
        path, ((f.utterance_id, f.speaker_id, f.frames) for f in feats))


def read_feature_archive(path: str, dtype=np.float32) -> list[FeatureMatrix]:
    return [
        FeatureMatrix(mat.astype(dtype, copy=False), utt, spk)
        for utt, spk, mat in archive.iter_records(path)
    ]
