"""Synthetic stand-ins for the recorded corpora.

Speech is a harmonic source with a drifting f0, shaped by switching vowel
formants and syllabic envelopes, with occasional fricatives and pauses.
The IM copy is band-limited and boosted at low frequencies (occlusion).
RTFs come from a parametric delay + low-pass + resonance family whose
parameters depend on talker and direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, iirpeak, lfilter, sosfilt

from .audio import PIPELINE_RATE, AudioBuffer, save_wav
from .augment import substream
from .rtf import AH_TALKER, RTF_IR_LENGTH, Rtf, RtfSet, expected_grid, store_rtf_set

# (F1, F2, F3) in Hz
VOWELS = [(730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (570, 840, 2410), (300, 870, 2240)]


def _formant_sos(formants, fs):
    sos = []
    for f, bw in zip(formants, (90.0, 110.0, 170.0)):
        r = math.exp(-math.pi * bw / fs)
        theta = 2 * math.pi * f / fs
        a = [1.0, -2 * r * math.cos(theta), r * r]
        sos.append([1.0 - r, 0.0, 0.0, *a])
    return np.array(sos)


def _smooth(x, n):
    if n < 2:
        return x
    w = np.hanning(n)
    return np.convolve(x, w / w.sum(), mode="same")


def speech_like(duration: float, rng: np.random.Generator, fs: int = PIPELINE_RATE,
                f0: float = 140.0, level_db: float = -25.0) -> np.ndarray:
    """Speech-like test signal with syllabic structure, RMS at ``level_db``."""
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    f0_track = f0 * (1 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0_track) / fs
    n_harm = int(7000 // (f0 * 1.15))
    k = np.arange(1, n_harm + 1)[:, None]
    source = np.sum(np.sin(k * phase) / k, axis=0)

    voiced = np.stack([sosfilt(_formant_sos(v, fs), source) for v in VOWELS])
    voiced /= np.sqrt(np.mean(voiced**2, axis=1, keepdims=True))
    hiss = sosfilt(butter(4, [2500, 6500], "bandpass", fs=fs, output="sos"), rng.standard_normal(n))
    hiss /= np.sqrt(np.mean(hiss**2))

    # segments: vowel index, 5 = fricative, 6 = pause
    weights = np.zeros((7, n))
    envelope = np.zeros(n)
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.12, 0.32) * fs)
        u = rng.random()
        kind = 6 if u < 0.12 else 5 if u < 0.27 else int(rng.integers(len(VOWELS)))
        end = min(pos + length, n)
        weights[kind, pos:end] = 1.0
        if kind != 6:
            envelope[pos:end] = np.hanning(end - pos + 2)[1:-1] ** 0.5 * rng.uniform(0.5, 1.0)
        pos = end
    weights = np.stack([_smooth(w, int(0.01 * fs)) for w in weights])
    envelope = _smooth(envelope, int(0.02 * fs))

    x = (np.sum(weights[:5] * voiced, axis=0) + 0.3 * weights[5] * hiss) * envelope
    return x * 10 ** (level_db / 20) / np.sqrt(np.mean(x**2))


def occlusion(s_om: np.ndarray, rng: np.random.Generator, fs: int = PIPELINE_RATE) -> np.ndarray:
    """IM own-voice: low-frequency boost and band limitation of the OM signal."""
    cutoff = rng.uniform(1500, 2500)
    lp = butter(4, cutoff, "lowpass", fs=fs, output="sos")
    low = sosfilt(butter(2, 500, "lowpass", fs=fs, output="sos"), s_om)
    boost = 10 ** (rng.uniform(8, 14) / 20) - 1
    return sosfilt(lp, s_om + boost * low)


def body_noise(n: int, rng: np.random.Generator, fs: int = PIPELINE_RATE, level_db: float = -50.0) -> np.ndarray:
    """Breathing plus heartbeat thumps, low-frequency only."""
    t = np.arange(n) / fs
    breath = sosfilt(butter(2, [100, 900], "bandpass", fs=fs, output="sos"), rng.standard_normal(n))
    breath *= 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.2, 0.35) * t) ** 2
    beats = np.zeros(n)
    rate = rng.uniform(1.0, 1.3)
    for onset in np.arange(rng.uniform(0, 1 / rate), n / fs, 1 / rate):
        i = int(onset * fs)
        beats[i:i + 1] = 1.0
    thump = np.sin(2 * np.pi * 40 * np.arange(int(0.08 * fs)) / fs) * np.hanning(int(0.08 * fs))
    beats = np.convolve(beats, thump)[:n]
    x = breath / np.sqrt(np.mean(breath**2)) + 3 * beats / max(np.sqrt(np.mean(beats**2)), 1e-12)
    return x * 10 ** (level_db / 20) / np.sqrt(np.mean(x**2))


NOISE_KINDS = ("white", "pink", "babble", "machine")


def noise_like(kind: str, duration: float, rng: np.random.Generator, fs: int = PIPELINE_RATE,
               level_db: float = -30.0) -> np.ndarray:
    n = int(round(duration * fs))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        X = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / fs)
        X[1:] /= np.sqrt(f[1:])
        X[0] = 0
        x = np.fft.irfft(X, n)
    elif kind == "babble":
        x = sum(speech_like(duration, rng, fs, f0=rng.uniform(100, 230)) for _ in range(6))
    elif kind == "machine":
        t = np.arange(n) / fs
        base = rng.uniform(80, 160)
        x = sum(np.sin(2 * np.pi * h * base * t + rng.uniform(0, 6.3)) / h for h in range(1, 12))
        x = x + 0.5 * sosfilt(butter(2, [800, 4000], "bandpass", fs=fs, output="sos"), rng.standard_normal(n)) * 4
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x * 10 ** (level_db / 20) / np.sqrt(np.mean(x**2))


@dataclass(frozen=True)
class TalkerAcoustics:
    """Parameters of one synthetic talker's outer-to-inner RTF family."""

    gain_db: float = -18.0
    cutoff_hz: float = 1000.0
    resonance_hz: float = 3000.0
    resonance_q: float = 3.0
    resonance_gain: float = 1.5
    delay: int = 3

    @classmethod
    def random(cls, rng: np.random.Generator) -> "TalkerAcoustics":
        return cls(
            gain_db=rng.uniform(-24, -12),
            cutoff_hz=rng.uniform(600, 1600),
            resonance_hz=rng.uniform(2400, 4200),
            resonance_q=rng.uniform(2, 5),
            resonance_gain=rng.uniform(0.5, 3.0),
            delay=int(rng.integers(2, 5)),
        )


def synthetic_rtf(acoustics: TalkerAcoustics, direction_deg: float, talker_id: str,
                  fs: int = PIPELINE_RATE, taps: int = RTF_IR_LENGTH) -> Rtf:
    """Parametric RTF; the left-ear device faces 90 deg."""
    lateral = math.cos(math.radians(direction_deg - 90.0))
    delay = acoustics.delay + int(round(1.5 * (1 - lateral)))
    gain = 10 ** ((acoustics.gain_db + 4.0 * lateral) / 20)
    cutoff = acoustics.cutoff_hz * (1 + 0.15 * math.cos(math.radians(direction_deg)))
    x = np.zeros(taps)
    x[delay] = 1.0
    h = sosfilt(butter(2, cutoff, "lowpass", fs=fs, output="sos"), x)
    b, a = iirpeak(acoustics.resonance_hz * (1 + 0.03 * lateral), acoustics.resonance_q, fs=fs)
    h = h + acoustics.resonance_gain * lfilter(b, a, h)
    fade = np.ones(taps)
    fade[-64:] = np.hanning(128)[64:]
    return Rtf(gain * h * fade, direction_deg, talker_id, fs, taps)


def synthetic_rtf_set(talkers: dict, grid_tag: str, directions=None, fs: int = PIPELINE_RATE) -> RtfSet:
    if directions is None:
        directions = expected_grid(grid_tag)
    return RtfSet.from_rtfs(
        (synthetic_rtf(a, d, t, fs) for t, a in talkers.items() for d in directions), grid_tag
    )


def talker_ids(n: int) -> list[str]:
    return [f"T{i + 1:02d}" for i in range(n)]


def write_fixtures(out_dir, seed: int, talkers: int = 4, directions: int = 8,
                   utterances: int = 3, noises: int = 4, utterance_s: float = 4.0,
                   noise_s: float = 10.0) -> Path:
    """Write a complete synthetic corpus and return the corpus index path.

    Layout: ``speech/<talker>/<utt>.wav`` (3 channels: OM, IM, body noise),
    ``noise/<id>.wav`` (mono), ``rtf/{individual,ah-coarse,ah-fine}/`` and
    ``corpus.json``.
    """
    out = Path(out_dir)
    fs = PIPELINE_RATE
    ids = talker_ids(talkers)
    acoustics = {t: TalkerAcoustics.random(substream(seed, 10, i)) for i, t in enumerate(ids)}

    grid = [round(i * 360.0 / directions, 6) for i in range(directions)]
    rtf_paths = {}
    for tag, talker_map, dirs in (
        ("individual", acoustics, grid),
        ("ah-coarse", {AH_TALKER: TalkerAcoustics()}, None),
        ("ah-fine", {AH_TALKER: TalkerAcoustics()}, None),
    ):
        store_rtf_set(synthetic_rtf_set(talker_map, tag, dirs, fs), out / "rtf" / tag)
        rtf_paths[tag] = f"rtf/{tag}"

    speech_entries = []
    for i, t in enumerate(ids):
        rng = substream(seed, 11, i)
        f0 = rng.uniform(95, 230)
        for u in range(utterances):
            s_om = speech_like(utterance_s, rng, fs, f0=f0)
            s_im = occlusion(s_om, substream(seed, 12, i))
            body = body_noise(s_om.size, rng, fs)
            rel = f"speech/{t}/u{u:03d}.wav"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            save_wav(AudioBuffer(np.vstack([s_om, s_im, body]), fs, ("OM", "IM", "BODY")), out / rel, "float32")
            speech_entries.append({"talker_id": t, "utterance_id": f"{t}-u{u:03d}", "path": rel,
                                   "duration": utterance_s})

    noise_entries = []
    for j in range(noises):
        kind = NOISE_KINDS[j % len(NOISE_KINDS)]
        x = noise_like(kind, noise_s, substream(seed, 13, j), fs)
        rel = f"noise/n{j:03d}_{kind}.wav"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        save_wav(AudioBuffer.mono(x, fs), out / rel, "float32")
        noise_entries.append({"noise_id": f"n{j:03d}_{kind}", "path": rel, "duration": noise_s})

    index = {
        "schema": "hearaug.corpus",
        "version": 1,
        "sample_rate": fs,
        "speech": speech_entries,
        "noise": noise_entries,
        "rtf_sets": rtf_paths,
    }
    path = out / "corpus.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path
