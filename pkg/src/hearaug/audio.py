"""Time-domain audio buffers, PCM WAV I/O and the STFT engine.

All signals are float64 at full scale +/-1.0. Integer WAV depths are mapped
symmetrically by 2**(bits - 1), so -32768 in a 16-bit file reads as -1.0 and
a save/load round trip of integer data is bit-stable.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

PIPELINE_RATE = 16000

ENCODINGS = ("pcm16", "pcm24", "pcm32", "float32", "float64")


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported WAV content."""


class SampleRateError(ValueError):
    """Raised when a pipeline entry point receives audio at the wrong rate."""


@dataclass(frozen=True)
class AudioBuffer:
    """Multi-channel waveform.

    ``samples`` has shape ``(channels, n)``; a 1-D array is promoted to a
    single channel. The array is copied and made read-only.
    """

    samples: np.ndarray
    sample_rate: int
    channel_labels: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.array(self.samples, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got shape {data.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        labels = tuple(self.channel_labels)
        if not labels:
            labels = tuple(f"ch{i}" for i in range(data.shape[0]))
        if len(labels) != data.shape[0]:
            raise ValueError(
                f"{len(labels)} channel labels for {data.shape[0]} channels"
            )
        data.setflags(write=False)
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        object.__setattr__(self, "channel_labels", labels)

    @classmethod
    def mono(cls, x, sample_rate=PIPELINE_RATE, label="mono") -> "AudioBuffer":
        return cls(np.asarray(x, dtype=np.float64)[np.newaxis, :], sample_rate, (label,))

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, key: int | str) -> np.ndarray:
        """Return one channel by index or label."""
        if isinstance(key, str):
            try:
                key = self.channel_labels.index(key)
            except ValueError:
                raise KeyError(f"no channel labelled {key!r}") from None
        return self.samples[key]

    def select(self, keys: Sequence[int | str]) -> "AudioBuffer":
        idx = [self.channel_labels.index(k) if isinstance(k, str) else k for k in keys]
        return AudioBuffer(
            self.samples[idx], self.sample_rate, tuple(self.channel_labels[i] for i in idx)
        )

    @classmethod
    def stack(cls, buffers: Sequence["AudioBuffer"]) -> "AudioBuffer":
        rates = {b.sample_rate for b in buffers}
        if len(rates) != 1:
            raise SampleRateError(f"cannot stack buffers with rates {sorted(rates)}")
        lengths = {b.num_samples for b in buffers}
        if len(lengths) != 1:
            raise ValueError(f"cannot stack buffers with lengths {sorted(lengths)}")
        return cls(
            np.vstack([b.samples for b in buffers]),
            rates.pop(),
            tuple(lab for b in buffers for lab in b.channel_labels),
        )


def require_rate(buffer: AudioBuffer, rate: int = PIPELINE_RATE) -> AudioBuffer:
    if buffer.sample_rate != rate:
        raise SampleRateError(
            f"expected {rate} Hz audio, got {buffer.sample_rate} Hz; "
            "resample offline before running the pipeline"
        )
    return buffer


def load_wav(path, expected_rate: int | None = None, labels: Sequence[str] = ()) -> AudioBuffer:
    """Read a PCM or IEEE-float WAV file.

    Parameters
    ----------
    path : path-like
        File to read.
    expected_rate : int, optional
        If given, a file at any other rate raises :class:`SampleRateError`.
        Pipeline entry points pass 16000.
    labels : sequence of str, optional
        Channel labels for the returned buffer.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError, struct.error) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc

    # scipy returns 24-bit data left-justified in int32, so /2**31 covers both
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 2.0**15
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2.0**31
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")

    x = x.T if x.ndim == 2 else x[np.newaxis, :]
    buf = AudioBuffer(x, rate, tuple(labels))
    if expected_rate is not None:
        require_rate(buf, expected_rate)
    return buf


def _quantize(x: np.ndarray, bits: int) -> np.ndarray:
    scale = 2.0 ** (bits - 1)
    q = np.round(x * scale)
    return np.clip(q, -scale, scale - 1).astype(np.int64)


def save_wav(buffer: AudioBuffer, path, encoding: str = "pcm16") -> None:
    """Write ``buffer`` as a little-endian WAV file.

    ``encoding`` is one of ``pcm16``, ``pcm24``, ``pcm32``, ``float32`` or
    ``float64``. Integer encodings clip to the representable range.
    """
    if encoding not in ENCODINGS:
        raise ValueError(f"unknown encoding {encoding!r}; choose from {ENCODINGS}")
    x = buffer.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("buffer contains NaN or Inf samples")
    path = Path(path)
    interleaved = x.T

    if encoding == "pcm24":
        q = _quantize(interleaved, 24).astype("<i4")
        raw = q.reshape(-1).view(np.uint8).reshape(-1, 4)[:, :3]
        with wave.open(str(path), "wb") as w:
            w.setnchannels(buffer.num_channels)
            w.setsampwidth(3)
            w.setframerate(buffer.sample_rate)
            w.writeframes(raw.tobytes())
        return

    if encoding == "pcm16":
        data = _quantize(interleaved, 16).astype(np.int16)
    elif encoding == "pcm32":
        data = _quantize(interleaved, 32).astype(np.int32)
    elif encoding == "float32":
        data = interleaved.astype(np.float32)
    else:
        data = interleaved.astype(np.float64)
    if buffer.num_channels == 1:
        data = data[:, 0]
    wavfile.write(path, buffer.sample_rate, np.ascontiguousarray(data))


def energy_db(buffer: AudioBuffer, channel: int | str = 0) -> float:
    """Mean-square level of one channel in dB; ``-inf`` for digital silence."""
    x = buffer.channel(channel)
    if x.size == 0:
        raise ValueError("empty channel")
    power = float(np.mean(x * x))
    if power == 0.0:
        return -math.inf
    return 10.0 * math.log10(power)


# STFT

def sqrt_hann(n: int) -> np.ndarray:
    """Periodic square-root Hann window; its square is COLA at 50 % overlap."""
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


@dataclass(frozen=True)
class StftConfig:
    frame_size: int = 512
    hop_size: int = 256
    window: str = "sqrt-hann"

    def __post_init__(self):
        if self.window != "sqrt-hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.frame_size <= 0 or self.frame_size % 2:
            raise ValueError("frame_size must be a positive even number")
        if self.hop_size * 2 != self.frame_size:
            raise ValueError("only 50 % overlap keeps sqrt-Hann analysis/synthesis COLA")

    @property
    def num_bins(self) -> int:
        return self.frame_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.frame_size - self.hop_size

    def window_array(self) -> np.ndarray:
        return sqrt_hann(self.frame_size)

    def num_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        return 1 + math.ceil(max(padded - self.frame_size, 0) / self.hop_size)


@dataclass(frozen=True)
class Spectrogram:
    """Complex one-sided STFT, ``bins[channel, frame, bin]``."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int
    length: int
    channel_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.bins.ndim != 3:
            raise ValueError("bins must be (channel, frame, bin)")
        if self.bins.shape[2] != self.config.num_bins:
            raise ValueError(
                f"{self.bins.shape[2]} bins does not match frame size {self.config.frame_size}"
            )
        if self.bins.shape[1] != self.config.num_frames(self.length):
            raise ValueError("frame count inconsistent with signal length")
        if not self.channel_labels:
            object.__setattr__(
                self, "channel_labels", tuple(f"ch{i}" for i in range(self.bins.shape[0]))
            )

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]

    def channel(self, key: int | str) -> np.ndarray:
        if isinstance(key, str):
            key = self.channel_labels.index(key)
        return self.bins[key]

    def with_bins(self, bins: np.ndarray, labels: Sequence[str] | None = None) -> "Spectrogram":
        if bins.ndim == 2:
            bins = bins[np.newaxis]
        if labels is None:
            labels = self.channel_labels if bins.shape[0] == self.bins.shape[0] else ()
        return Spectrogram(bins, self.config, self.sample_rate, self.length, tuple(labels))


def stft(buffer: AudioBuffer, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Windowed one-sided DFT of every channel.

    The signal is padded with ``frame_size - hop_size`` zeros at the front and
    at least as many at the back, so every input sample is covered by frames
    whose squared windows sum to one.
    """
    n = buffer.num_samples
    if n < 1:
        raise ValueError("cannot transform an empty buffer")
    n_frames = cfg.num_frames(n)
    total = cfg.frame_size + (n_frames - 1) * cfg.hop_size
    x = np.zeros((buffer.num_channels, total))
    x[:, cfg.pad:cfg.pad + n] = buffer.samples
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_size, axis=1)[
        :, ::cfg.hop_size
    ]
    spec = np.fft.rfft(frames * cfg.window_array(), axis=-1)
    return Spectrogram(spec, cfg, buffer.sample_rate, n, buffer.channel_labels)


def istft(spec: Spectrogram, cfg: StftConfig | None = None) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`."""
    if cfg is not None and cfg != spec.config:
        raise ValueError("spectrogram was produced with a different STFT config")
    cfg = spec.config
    frames = np.fft.irfft(spec.bins, n=cfg.frame_size, axis=-1) * cfg.window_array()
    n_ch, n_frames, _ = frames.shape
    total = cfg.frame_size + (n_frames - 1) * cfg.hop_size
    out = np.zeros((n_ch, total))
    # two interleaved passes: frames within a pass do not overlap
    for start in range(2):
        sel = frames[:, start::2]
        if sel.shape[1] == 0:
            continue
        seg = np.zeros((n_ch, sel.shape[1] * cfg.frame_size))
        seg[:] = sel.reshape(n_ch, -1)
        offset = start * cfg.hop_size
        stop = min(offset + seg.shape[1], total)
        out[:, offset:stop] += seg[:, : stop - offset]
    return AudioBuffer(
        out[:, cfg.pad:cfg.pad + spec.length], spec.sample_rate, spec.channel_labels
    )
