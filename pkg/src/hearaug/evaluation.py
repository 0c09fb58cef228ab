"""Metrics and oracle-mask baselines.

STOI follows Taal et al. (2011): 10 kHz internal rate, 15 one-third octave
bands from 150 Hz, 384 ms segments (30 frames of 256 samples, 50 %
overlap), clipping at -15 dB SDR and removal of frames more than 40 dB
below the loudest clean frame.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import resample_poly

from .audio import AudioBuffer, Spectrogram, StftConfig, istft, stft

ORACLE_CLIP = 5.0


# STOI

STOI_RATE = 10000
_FRAME = 256
_NFFT = 512
_BANDS = 15
_MIN_FREQ = 150.0
_SEGMENT = 30
_BETA_DB = -15.0
_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def _as_signal(x) -> tuple[np.ndarray, int | None]:
    if isinstance(x, AudioBuffer):
        if x.num_channels != 1:
            raise ValueError("expected a mono buffer")
        return x.samples[0], x.sample_rate
    return np.asarray(x, dtype=np.float64), None


def third_octave_matrix(fs=STOI_RATE, nfft=_NFFT, num_bands=_BANDS, min_freq=_MIN_FREQ):
    """Band-assignment matrix of shape (num_bands, nfft // 2 + 1)."""
    f = np.arange(nfft // 2 + 1) * fs / nfft
    k = np.arange(num_bands)
    lower = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    upper = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo = int(np.argmin(np.abs(f - lower[i])))
        hi = int(np.argmin(np.abs(f - upper[i])))
        obm[i, lo:hi] = 1.0
    return obm


def _stoi_window():
    # symmetric Hann without its zero end points
    return np.hanning(_FRAME + 2)[1:-1]


def _frames(x: np.ndarray) -> np.ndarray:
    hop = _FRAME // 2
    count = (x.size - _FRAME) // hop + 1
    if count < 1:
        return np.zeros((0, _FRAME))
    idx = np.arange(_FRAME)[None, :] + hop * np.arange(count)[:, None]
    return x[idx] * _stoi_window()


def _drop_silent_frames(x: np.ndarray, y: np.ndarray):
    fx, fy = _frames(x), _frames(y)
    level = 20.0 * np.log10(np.linalg.norm(fx, axis=1) + _EPS)
    keep = level > level.max() - _DYN_RANGE_DB
    fx, fy = fx[keep], fy[keep]
    hop = _FRAME // 2
    n_out = (fx.shape[0] - 1) * hop + _FRAME if fx.shape[0] else 0
    xs, ys = np.zeros(n_out), np.zeros(n_out)
    for i in range(fx.shape[0]):
        xs[i * hop:i * hop + _FRAME] += fx[i]
        ys[i * hop:i * hop + _FRAME] += fy[i]
    return xs, ys


def stoi(clean, degraded, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``clean``.

    Inputs are mono buffers or arrays at ``sample_rate`` (16 kHz by default)
    and are resampled to 10 kHz internally.
    """
    x, fs_x = _as_signal(clean)
    y, fs_y = _as_signal(degraded)
    fs = sample_rate or fs_x or fs_y or 16000
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if not np.any(x):
        raise ValueError("clean signal is silent")
    if fs != STOI_RATE:
        g = math.gcd(STOI_RATE, int(fs))
        x = resample_poly(x, STOI_RATE // g, int(fs) // g)
        y = resample_poly(y, STOI_RATE // g, int(fs) // g)

    x, y = _drop_silent_frames(x, y)
    X = np.abs(np.fft.rfft(_frames(x), _NFFT, axis=1)) ** 2
    Y = np.abs(np.fft.rfft(_frames(y), _NFFT, axis=1)) ** 2
    if X.shape[0] < _SEGMENT:
        raise ValueError(
            f"only {X.shape[0]} active frames; STOI needs at least {_SEGMENT} (about 0.4 s of speech)"
        )
    obm = third_octave_matrix()
    x_bands = np.sqrt(X @ obm.T).T  # (bands, frames)
    y_bands = np.sqrt(Y @ obm.T).T

    clip = 1.0 + 10.0 ** (-_BETA_DB / 20.0)
    scores = []
    for m in range(_SEGMENT, x_bands.shape[1] + 1):
        xs = x_bands[:, m - _SEGMENT:m]
        ys = y_bands[:, m - _SEGMENT:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yp = np.minimum(alpha * ys, xs * clip)
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + _EPS
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + _EPS
        scores.append(np.sum(xc * yc, axis=1))
    return float(np.mean(scores))


# Coherence

@dataclass(frozen=True)
class WelchConfig:
    nperseg: int = 512
    overlap: float = 0.5
    min_segments: int = 4

    @property
    def hop(self) -> int:
        return self.nperseg - int(round(self.nperseg * self.overlap))


def _welch_segments(x: np.ndarray, cfg: WelchConfig) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.nperseg)[::cfg.hop]
    frames = frames - frames.mean(axis=1, keepdims=True)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.nperseg) / cfg.nperseg)
    return np.fft.rfft(frames * win, axis=1)


def msc(x, y, cfg: WelchConfig = WelchConfig(), sample_rate: int | None = None):
    """Magnitude-squared coherence by Welch averaging.

    Returns ``(freqs, coherence)``. Bins where either auto-spectrum is zero
    get coherence 0.
    """
    a, fs_a = _as_signal(x)
    b, fs_b = _as_signal(y)
    fs = sample_rate or fs_a or fs_b or 16000
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < cfg.nperseg + (cfg.min_segments - 1) * cfg.hop:
        raise ValueError(f"input too short for {cfg.min_segments} Welch segments of {cfg.nperseg}")
    A = _welch_segments(a, cfg)
    B = _welch_segments(b, cfg)
    pxx = np.mean(np.abs(A) ** 2, axis=0)
    pyy = np.mean(np.abs(B) ** 2, axis=0)
    pxy = np.mean(A.conj() * B, axis=0)
    denom = pxx * pyy
    coh = np.zeros_like(pxx)
    ok = denom > 0
    coh[ok] = np.abs(pxy[ok]) ** 2 / denom[ok]
    freqs = np.arange(pxx.size) * fs / cfg.nperseg
    return freqs, np.clip(coh, 0.0, 1.0)


# Oracle masks

class Variant(str, enum.Enum):
    OM = "OM"
    IM = "IM"
    OM_AUX_IM = "OM+auxIM"
    OM_IM = "OM+IM"

    @property
    def filtered(self) -> tuple[int, ...]:
        """Channel indices (0 = OM, 1 = IM) that are filtered by a mask."""
        return {"OM": (0,), "IM": (1,), "OM+auxIM": (0,), "OM+IM": (0, 1)}[self.value]


@dataclass(frozen=True)
class MaskPair:
    m_om: np.ndarray | None
    m_im: np.ndarray | None
    variant: Variant
    clip_magnitude: float = ORACLE_CLIP

    def masks(self):
        return {0: self.m_om, 1: self.m_im}


def _clip(m: np.ndarray, limit: float) -> np.ndarray:
    mag = np.abs(m)
    scale = np.where(mag > limit, limit / np.maximum(mag, _EPS), 1.0)
    return m * scale


def oracle_masks(clean: Spectrogram, noisy: Spectrogram, variant, clip_magnitude: float = ORACLE_CLIP) -> MaskPair:
    """Complex oracle masks that map the noisy STFT onto the clean OM STFT.

    Single-filter variants use ``S_o / Y_m``. OM+auxIM filters only the OM,
    so its oracle coincides with the OM variant. OM+IM takes the per-bin
    minimum-norm solution of ``M_o Y_o + M_i Y_i = S_o``. Masks are clipped
    to ``clip_magnitude``; bins with zero input get a zero mask.
    """
    variant = Variant(variant)
    S = clean.bins[0]
    Y = noisy.bins
    if Y.shape[0] != 2 or Y.shape[1:] != S.shape:
        raise ValueError("need a 2-channel (OM, IM) noisy spectrogram aligned with the clean one")
    tiny = np.finfo(np.float64).tiny
    masks = {0: None, 1: None}
    if variant is Variant.OM_IM:
        power = np.abs(Y[0]) ** 2 + np.abs(Y[1]) ** 2
        for ch in (0, 1):
            masks[ch] = _clip(S * Y[ch].conj() / np.maximum(power, tiny), clip_magnitude)
    else:
        ch = variant.filtered[0]
        masks[ch] = _clip(S * Y[ch].conj() / np.maximum(np.abs(Y[ch]) ** 2, tiny), clip_magnitude)
    return MaskPair(masks[0], masks[1], variant, clip_magnitude)


def apply_masks(masks: MaskPair, noisy: Spectrogram) -> AudioBuffer:
    """Sum of masked noisy channels, resynthesized by overlap-add."""
    est = np.zeros(noisy.bins.shape[1:], dtype=complex)
    for ch in masks.variant.filtered:
        m = masks.masks()[ch]
        if m is None or m.shape != est.shape:
            raise ValueError(f"mask for channel {ch} missing or misshapen")
        est += m * noisy.bins[ch]
    out = istft(noisy.with_bins(est[np.newaxis], ("S_o_hat",)))
    return out


# Losses and SNR

def combined_l1_loss(estimate, target, cfg: StftConfig = StftConfig(),
                     time_weight: float = 1.0, freq_weight: float = 1.0) -> float:
    """Mean absolute time-domain error plus mean complex STFT error."""
    e, _ = _as_signal(estimate)
    t, _ = _as_signal(target)
    if e.shape != t.shape:
        raise ValueError("estimate and target differ in length")
    time_term = float(np.mean(np.abs(e - t)))
    E = stft(AudioBuffer.mono(e), cfg).bins
    T = stft(AudioBuffer.mono(t), cfg).bins
    freq_term = float(np.mean(np.abs(E - T)))
    return time_weight * time_term + freq_weight * freq_term


def snr_db(clean, degraded) -> float:
    """``10 log10(|clean|^2 / |degraded - clean|^2)``; ``+inf`` if identical."""
    c, _ = _as_signal(clean)
    d, _ = _as_signal(degraded)
    if c.shape != d.shape:
        raise ValueError("length mismatch")
    r = d - c
    e_r = float(np.dot(r, r))
    if e_r == 0.0:
        return math.inf
    e_c = float(np.dot(c, c))
    return -math.inf if e_c == 0.0 else 10.0 * math.log10(e_c / e_r)


# Reports

METRICS = ("stoi", "snr", "oracle")


def evaluate_pair(target: np.ndarray, y_om: np.ndarray, y_im: np.ndarray,
                  om_mean: float = 0.0, om_std: float = 1.0,
                  metrics: Sequence[str] = ("stoi", "snr"),
                  sample_rate: int = 16000, clip_magnitude: float = ORACLE_CLIP) -> dict:
    """Metrics for one generated record.

    ``y_om`` is the normalized noisy OM channel; adding back ``om_mean /
    om_std`` puts it on the same scale and offset as ``target``.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    noisy_om = y_om + om_mean / om_std
    row: dict = {}
    if "stoi" in metrics:
        row["stoi"] = stoi(target, noisy_om, sample_rate)
    if "snr" in metrics:
        row["snr_db"] = snr_db(target, noisy_om)
    if "oracle" in metrics:
        S = stft(AudioBuffer.mono(target, sample_rate))
        Y = stft(AudioBuffer(np.vstack([noisy_om, y_im]), sample_rate, ("OM", "IM")))
        for v in Variant:
            est = apply_masks(oracle_masks(S, Y, v, clip_magnitude), Y).samples[0]
            row[f"oracle_stoi_{v.value}"] = stoi(target, est, sample_rate)
    return row


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def write_report(rows: Iterable[dict], json_path, csv_path=None, meta: dict | None = None) -> None:
    rows = [{k: _json_safe(v) for k, v in r.items()} for r in rows]
    payload = {"meta": meta or {}, "records": rows}
    Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        fields = sorted({k for r in rows for k in r})
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)


def write_coherence_csv(freqs: np.ndarray, coherence: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", "msc"])
        for f, c in zip(freqs, coherence):
            w.writerow([f"{f:.3f}", f"{c:.9f}"])
