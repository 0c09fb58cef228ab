"""Speech/noise mixing at an SNR defined on the outer microphone."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .audio import PIPELINE_RATE, AudioBuffer
from .augment import NoisePair

UTTERANCE_SECONDS = 3.0
SNR_RANGE = (-10.0, 25.0)
VARIANCE_GUARD = 1e-12


class SnrRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SpeechPair:
    """Own-voice recording at both microphones, with optional body noise.

    ``body_im`` is added to the IM channel unscaled.
    """

    s_om: np.ndarray
    s_im: np.ndarray
    body_im: np.ndarray | None = None
    talker_id: str = ""
    sample_rate: int = PIPELINE_RATE

    def __post_init__(self):
        s_om = np.array(self.s_om, dtype=np.float64)
        s_im = np.array(self.s_im, dtype=np.float64)
        if s_om.shape != s_im.shape or s_om.ndim != 1:
            raise ValueError("OM and IM speech must be 1-D and equally long")
        object.__setattr__(self, "s_om", s_om)
        object.__setattr__(self, "s_im", s_im)
        if self.body_im is not None:
            body = np.array(self.body_im, dtype=np.float64)
            if body.shape != s_om.shape:
                raise ValueError("body noise length differs from speech")
            object.__setattr__(self, "body_im", body)

    @classmethod
    def from_buffer(cls, buffer: AudioBuffer, talker_id: str = "") -> "SpeechPair":
        """Channels are OM, IM and optionally body noise, in that order."""
        if buffer.num_channels not in (2, 3):
            raise ValueError("speech recordings need 2 (OM, IM) or 3 (OM, IM, body) channels")
        body = buffer.samples[2] if buffer.num_channels == 3 else None
        return cls(buffer.samples[0], buffer.samples[1], body, talker_id, buffer.sample_rate)

    def __len__(self):
        return self.s_om.size


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    guarded: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean


@dataclass(frozen=True)
class MixResult:
    """Normalized noisy channels, scaled target and mixing metadata.

    ``noisy_om`` and ``noisy_im`` hold the composed channels before
    normalization; ``y_om`` and ``y_im`` after.
    """

    y_om: np.ndarray
    y_im: np.ndarray
    target: np.ndarray
    gain: float
    om_stats: NormStats
    im_stats: NormStats
    snr_db_requested: float
    snr_db_achieved: float
    noisy_om: np.ndarray
    noisy_im: np.ndarray
    sample_rate: int = PIPELINE_RATE

    def noisy_buffer(self) -> AudioBuffer:
        return AudioBuffer(np.vstack([self.y_om, self.y_im]), self.sample_rate, ("OM", "IM"))

    def target_buffer(self) -> AudioBuffer:
        return AudioBuffer.mono(self.target, self.sample_rate, "target")


def cut_utterance(x: np.ndarray, rng: np.random.Generator | None = None,
                  length_s: float = UTTERANCE_SECONDS, sample_rate: int = PIPELINE_RATE,
                  offset: int | None = None):
    """Cut or zero-pad ``x`` (last axis) to ``length_s`` seconds.

    Longer inputs yield a window starting at ``offset``, drawn uniformly
    from ``rng`` when not given. Returns ``(segment, offset)``.
    """
    x = np.asarray(x)
    n = int(round(length_s * sample_rate))
    total = x.shape[-1]
    if total <= n:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n - total)]
        return np.pad(x, pad), 0
    if offset is None:
        if rng is None:
            raise ValueError("need an rng or an explicit offset to cut")
        offset = int(rng.integers(0, total - n + 1))
    if not 0 <= offset <= total - n:
        raise ValueError(f"offset {offset} outside [0, {total - n}]")
    return x[..., offset:offset + n], offset


def snr_gain(s_om: np.ndarray, n_om: np.ndarray, target_snr_db: float) -> float:
    """Noise gain that puts the OM mixture at ``target_snr_db``."""
    e_s = float(np.dot(s_om, s_om))
    e_n = float(np.dot(n_om, n_om))
    if e_s == 0.0:
        raise ValueError("speech has zero energy")
    if e_n == 0.0:
        raise ValueError("noise has zero energy")
    return 10.0 ** (-target_snr_db / 20.0) * math.sqrt(e_s / e_n)


def mean_var_normalize(x: np.ndarray):
    """Zero-mean, unit-variance copy of ``x`` and the stats to undo it.

    A variance below 1e-12 is replaced by 1e-12 and flagged in the stats.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = float(np.mean(x))
    var = float(np.var(x))
    guarded = var < VARIANCE_GUARD
    stats = NormStats(mean, math.sqrt(max(var, VARIANCE_GUARD)), guarded)
    return stats.apply(x), stats


def scale_target(s_om: np.ndarray, om_stats: NormStats) -> np.ndarray:
    """Scale clean OM speech by the gain the noisy OM channel received.

    The noisy channel's mean shift is not applied; only its 1/std factor.
    """
    return np.asarray(s_om, dtype=np.float64) / om_stats.std


def mix(speech: SpeechPair, noise: NoisePair, target_snr_db: float,
        snr_range=SNR_RANGE) -> MixResult:
    """Compose and normalize a two-channel noisy example.

    One gain scales both noise channels, so the IM/OM noise level
    difference of ``noise`` is kept.
    """
    n_om = noise.om.samples[0]
    n_im = noise.im.samples[0]
    if not (len(speech) == n_om.size == n_im.size):
        raise ValueError(f"length mismatch: speech {len(speech)}, noise {n_om.size}")
    if speech.sample_rate != noise.om.sample_rate:
        raise ValueError("speech and noise sample rates differ")
    lo, hi = snr_range
    if not lo <= target_snr_db <= hi:
        warnings.warn(f"SNR {target_snr_db} dB outside [{lo}, {hi}] dB", SnrRangeWarning)

    g = snr_gain(speech.s_om, n_om, target_snr_db)
    gn_om = g * n_om
    gn_im = g * n_im
    noisy_om = speech.s_om + gn_om
    noisy_im = speech.s_im + gn_im
    if speech.body_im is not None:
        noisy_im = noisy_im + speech.body_im

    achieved = 10.0 * math.log10(float(np.dot(speech.s_om, speech.s_om)) / float(np.dot(gn_om, gn_om)))
    y_om, om_stats = mean_var_normalize(noisy_om)
    y_im, im_stats = mean_var_normalize(noisy_im)
    return MixResult(
        y_om=y_om,
        y_im=y_im,
        target=scale_target(speech.s_om, om_stats),
        gain=g,
        om_stats=om_stats,
        im_stats=im_stats,
        snr_db_requested=float(target_snr_db),
        snr_db_achieved=achieved,
        noisy_om=noisy_om,
        noisy_im=noisy_im,
        sample_rate=speech.sample_rate,
    )
