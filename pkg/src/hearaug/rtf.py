"""Relative transfer functions between the outer and inner microphone.

Covers the measurement chain (exponential sweep, deconvolution, RTF
estimation), rendering a reference signal through an RTF, and on-disk
storage of RTF sets indexed by talker and direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import fft as sp_fft
from scipy.signal import fftconvolve
from scipy.signal.windows import hann, tukey

from .audio import AudioBuffer, SampleRateError, load_wav, save_wav

RTF_IR_LENGTH = 512
AH_TALKER = "AH"
GRID_TAGS = ("ah-coarse", "ah-fine", "individual")
GRID_STEPS = {"ah-coarse": 45.0, "ah-fine": 7.5}
INDEX_FILE = "index.json"
INDEX_SCHEMA = "hearaug.rtfset"
INDEX_VERSION = 1


class SchemaError(ValueError):
    """An on-disk index or manifest violates its schema."""


class DuplicateEntryError(SchemaError):
    pass


class MissingRtfError(KeyError):
    pass


# Sweep measurement

@dataclass(frozen=True)
class SweepSpec:
    f_start: float = 80.0
    f_end: float = 22050.0
    duration: float = 3.0
    sample_rate: int = 44100
    amplitude: float = 0.5
    fade_out: float = 0.005

    def __post_init__(self):
        if not 0 < self.f_start < self.f_end:
            raise ValueError("need 0 < f_start < f_end")
        if self.f_end > self.sample_rate / 2:
            raise ValueError(
                f"f_end {self.f_end} Hz is above Nyquist ({self.sample_rate / 2} Hz)"
            )
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 < self.amplitude <= 1:
            raise ValueError("amplitude must be in (0, 1]")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def log_ratio(self) -> float:
        return math.log(self.f_end / self.f_start)


def sweep_phase(spec: SweepSpec, t):
    """Phase in radians of the exponential sweep at time(s) ``t``."""
    T, L = spec.duration, spec.log_ratio
    return 2.0 * np.pi * spec.f_start * T / L * (np.exp(np.asarray(t) * L / T) - 1.0)


def instantaneous_frequency(spec: SweepSpec, t):
    return spec.f_start * np.exp(np.asarray(t) * spec.log_ratio / spec.duration)


def _sweep_signal(spec: SweepSpec) -> np.ndarray:
    t = np.arange(spec.num_samples) / spec.sample_rate
    x = spec.amplitude * np.sin(sweep_phase(spec, t))
    n_fade = int(round(spec.fade_out * spec.sample_rate))
    if n_fade:
        # the sweep otherwise stops mid-cycle at f_end, which leaks pre-echoes
        x[-n_fade:] *= hann(2 * n_fade, sym=False)[n_fade:]
    return x


def _inverse_spectrum(x: np.ndarray, nfft: int, regularization: float) -> np.ndarray:
    X = sp_fft.rfft(x, nfft)
    power = (X * X.conj()).real
    return X.conj() / (power + regularization * power.max())


def generate_sweep(spec: SweepSpec, regularization: float = 1e-8):
    """Exponential sine sweep and its matched inverse filter.

    Returns
    -------
    sweep : AudioBuffer
        Mono sweep whose instantaneous frequency rises from ``f_start`` to
        ``f_end``.
    inverse : ndarray, shape (2 * n,)
        Time-reversed sweep with amplitude compensation applied in the
        frequency domain (regularized inverse). ``sweep * inverse`` is a
        unit pulse at lag ``n - 1``.
    """
    x = _sweep_signal(spec)
    n = x.size
    inv = sp_fft.irfft(_inverse_spectrum(x, 2 * n, regularization), 2 * n)
    return AudioBuffer.mono(x, spec.sample_rate, "sweep"), np.roll(inv, n - 1)


def _fade_tail(h: np.ndarray, fraction: float = 0.25) -> np.ndarray:
    n = h.shape[-1]
    if fraction <= 0:
        return h
    # right half of a Tukey window: flat, then cosine taper to zero
    return h * tukey(2 * n, alpha=fraction, sym=True)[n:]


def deconvolve_ir(
    recording: AudioBuffer,
    spec: SweepSpec,
    ir_length: int = RTF_IR_LENGTH,
    regularization: float = 1e-8,
) -> np.ndarray:
    """Linear impulse response(s) from a sweep recording.

    Deconvolution is a regularized spectral division by the sweep. Harmonic
    distortion products land at negative lags and are dropped; the result
    keeps lags ``0 .. ir_length - 1`` with a tapered tail, so the acoustic
    delay of each channel is preserved. A mono recording gives a 1-D array,
    otherwise one row per channel.
    """
    if recording.sample_rate != spec.sample_rate:
        raise SampleRateError("recording and sweep sample rates differ")
    x = _sweep_signal(spec)
    if recording.num_samples < x.size:
        raise ValueError("recording is shorter than the sweep")
    y = recording.samples
    if not np.any(y):
        raise ValueError("recording is silent")
    nfft = sp_fft.next_fast_len(y.shape[1] + x.size, real=True)
    h = sp_fft.irfft(sp_fft.rfft(y, nfft, axis=-1) * _inverse_spectrum(x, nfft, regularization), nfft)
    h = _fade_tail(h[:, :ir_length], 0.125)
    return h[0] if recording.num_channels == 1 else h


# RTFs

@dataclass(frozen=True)
class Rtf:
    """Relative transfer function of one talker and direction.

    ``freq_response`` is derived from ``impulse_response`` on construction
    (``n_fft``-point DFT), so the two can never disagree.
    """

    impulse_response: np.ndarray
    direction_deg: float = 0.0
    talker_id: str = AH_TALKER
    sample_rate: int = 16000
    n_fft: int = RTF_IR_LENGTH
    freq_response: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ir = np.array(self.impulse_response, dtype=np.float64).ravel()
        if ir.size > self.n_fft:
            raise ValueError(f"impulse response has {ir.size} taps, limit is {self.n_fft}")
        if not np.all(np.isfinite(ir)):
            raise ValueError("impulse response is not finite")
        ir.setflags(write=False)
        H = np.fft.rfft(ir, self.n_fft)
        H.setflags(write=False)
        object.__setattr__(self, "impulse_response", ir)
        object.__setattr__(self, "direction_deg", _norm_direction(self.direction_deg))
        object.__setattr__(self, "freq_response", H)

    def __eq__(self, other):
        if not isinstance(other, Rtf):
            return NotImplemented
        return (
            self.direction_deg == other.direction_deg
            and self.talker_id == other.talker_id
            and self.sample_rate == other.sample_rate
            and self.n_fft == other.n_fft
            and np.array_equal(self.impulse_response, other.impulse_response)
        )

    __hash__ = None


def _norm_direction(deg: float) -> float:
    d = round(float(deg) % 360.0, 6)
    return 0.0 if d == 360.0 else d


def compute_rtf(
    ir_outer,
    ir_inner,
    regularization: float = 1e-4,
    ir_length: int = RTF_IR_LENGTH,
    direction_deg: float = 0.0,
    talker_id: str = AH_TALKER,
    sample_rate: int = 16000,
) -> Rtf:
    """Estimate the outer-to-inner RTF from two impulse responses.

    The ratio is ``H_i conj(H_o) / max(|H_o|^2, eps)`` with
    ``eps = regularization * max |H_o|^2``, evaluated on the
    ``ir_length``-point DFT grid (the STFT bin grid at the default length).
    Longer impulse responses are time-aliased onto that grid first, which
    samples their spectra exactly. Bins where the outer path is above the
    floor get the exact ratio; near-null bins are bounded.
    """
    ir_outer = np.asarray(ir_outer, dtype=np.float64).ravel()
    ir_inner = np.asarray(ir_inner, dtype=np.float64).ravel()
    if not np.any(ir_outer):
        if not np.any(ir_inner):
            raise ValueError("both impulse responses are all-zero")
        raise ValueError("outer impulse response is all-zero")
    Ho = np.fft.rfft(_fold(ir_outer, ir_length))
    Hi = np.fft.rfft(_fold(ir_inner, ir_length))
    power = (Ho * Ho.conj()).real
    floor = regularization * power.max()
    G = Hi * Ho.conj() / np.maximum(power, floor)
    g = np.fft.irfft(G, ir_length)
    return Rtf(g, direction_deg, talker_id, sample_rate, ir_length)


def _fold(h: np.ndarray, n: int) -> np.ndarray:
    pad = -h.size % n
    return np.pad(h, (0, pad)).reshape(-1, n).sum(axis=0)


def apply_rtf(reference: AudioBuffer, rtf: Rtf) -> AudioBuffer:
    """Filter a mono reference with the RTF, truncated to the input length."""
    if reference.sample_rate != rtf.sample_rate:
        raise SampleRateError(
            f"reference at {reference.sample_rate} Hz, RTF at {rtf.sample_rate} Hz"
        )
    if reference.num_channels != 1:
        raise ValueError("apply_rtf expects a mono reference")
    x = reference.samples[0]
    if not np.any(rtf.impulse_response):
        y = np.zeros_like(x)
    else:
        y = fftconvolve(x, rtf.impulse_response)[: x.size]
    return AudioBuffer(y[np.newaxis], reference.sample_rate, ("IM",))


# RTF sets

def expected_grid(tag: str) -> list[float]:
    step = GRID_STEPS[tag]
    return [_norm_direction(i * step) for i in range(int(round(360.0 / step)))]


@dataclass(frozen=True)
class RtfSet:
    entries: Mapping[tuple[str, float], Rtf]
    grid_tag: str = "individual"

    def __post_init__(self):
        if self.grid_tag not in GRID_TAGS:
            raise SchemaError(f"unknown grid tag {self.grid_tag!r}")
        if not self.entries:
            raise SchemaError("RTF set is empty")
        entries = {}
        for (talker, direction), rtf in self.entries.items():
            key = (str(talker), _norm_direction(direction))
            if key != (rtf.talker_id, rtf.direction_deg):
                raise SchemaError(f"entry key {key} does not match its RTF metadata")
            if key in entries:
                raise DuplicateEntryError(f"duplicate entry for talker {key[0]} at {key[1]} deg")
            entries[key] = rtf
        object.__setattr__(self, "entries", entries)

        rates = {r.sample_rate for r in entries.values()}
        lengths = {r.n_fft for r in entries.values()}
        if len(rates) != 1 or len(lengths) != 1:
            raise SchemaError("entries must share sample rate and IR length")

        grid = self.direction_grid
        for talker in self.talkers:
            have = sorted(d for t, d in entries if t == talker)
            if have != grid:
                raise SchemaError(f"talker {talker} does not cover the full direction grid")
        step = GRID_STEPS.get(self.grid_tag)
        if step is not None:
            off = [d for d in grid if abs(d / step - round(d / step)) > 1e-9]
            if off:
                raise SchemaError(f"directions {off} are not on the {step} deg {self.grid_tag} grid")

    @property
    def direction_grid(self) -> list[float]:
        return sorted({d for _, d in self.entries})

    @property
    def talkers(self) -> list[str]:
        return sorted({t for t, _ in self.entries})

    @property
    def sample_rate(self) -> int:
        return next(iter(self.entries.values())).sample_rate

    @property
    def ir_length(self) -> int:
        return next(iter(self.entries.values())).n_fft

    def get(self, talker_id: str, direction_deg: float) -> Rtf:
        try:
            return self.entries[(talker_id, _norm_direction(direction_deg))]
        except KeyError:
            raise MissingRtfError(
                f"no RTF for talker {talker_id!r} at {direction_deg} deg"
            ) from None

    @classmethod
    def from_rtfs(cls, rtfs: Iterable[Rtf], grid_tag: str = "individual") -> "RtfSet":
        entries = {}
        for r in rtfs:
            key = (r.talker_id, r.direction_deg)
            if key in entries:
                raise DuplicateEntryError(f"duplicate entry for talker {key[0]} at {key[1]} deg")
            entries[key] = r
        return cls(entries, grid_tag)


def _entry_file(talker: str, direction: float) -> str:
    return f"{talker}/{direction:07.3f}.wav"


def store_rtf_set(rtf_set: RtfSet, path) -> None:
    """Write an RTF set as float64 IR WAV files plus ``index.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for (talker, direction), rtf in sorted(rtf_set.entries.items()):
        rel = _entry_file(talker, direction)
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_wav(AudioBuffer.mono(rtf.impulse_response, rtf.sample_rate), root / rel, "float64")
        entries.append({
            "talker_id": talker,
            "direction_deg": direction,
            "file": rel,
            "taps": int(rtf.impulse_response.size),
        })
    index = {
        "schema": INDEX_SCHEMA,
        "version": INDEX_VERSION,
        "grid_tag": rtf_set.grid_tag,
        "sample_rate": rtf_set.sample_rate,
        "ir_length": rtf_set.ir_length,
        "entries": entries,
    }
    (root / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def _require(obj: Mapping, key: str, kind, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"{where}: field {key!r} has wrong type")
    return value


def load_rtf_set(path) -> RtfSet:
    root = Path(path)
    index_path = root / INDEX_FILE if root.is_dir() else root
    root = index_path.parent
    if not index_path.is_file():
        raise FileNotFoundError(index_path)
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{index_path}: invalid JSON ({exc})") from exc
    if not isinstance(index, dict) or index.get("schema") != INDEX_SCHEMA:
        raise SchemaError(f"{index_path}: not an RTF set index")
    if index.get("version") != INDEX_VERSION:
        raise SchemaError(f"{index_path}: unsupported version {index.get('version')!r}")
    grid_tag = _require(index, "grid_tag", str, str(index_path))
    rate = _require(index, "sample_rate", int, str(index_path))
    ir_length = _require(index, "ir_length", int, str(index_path))
    raw = _require(index, "entries", list, str(index_path))

    rtfs, seen = [], set()
    for i, e in enumerate(raw):
        where = f"{index_path} entry {i}"
        if not isinstance(e, dict):
            raise SchemaError(f"{where}: not an object")
        talker = _require(e, "talker_id", str, where)
        direction = _norm_direction(_require(e, "direction_deg", (int, float), where))
        if (talker, direction) in seen:
            raise DuplicateEntryError(f"{where}: duplicate entry for talker {talker} at {direction} deg")
        seen.add((talker, direction))
        buf = load_wav(root / _require(e, "file", str, where))
        if buf.sample_rate != rate or buf.num_channels != 1:
            raise SchemaError(f"{where}: IR file must be mono at {rate} Hz")
        rtfs.append(Rtf(buf.samples[0], direction, talker, rate, ir_length))
    return RtfSet.from_rtfs(rtfs, grid_tag)


# Selection

def select_direction(rtf_set: RtfSet, rng: np.random.Generator) -> float:
    grid = rtf_set.direction_grid
    return grid[int(rng.integers(len(grid)))]


def select_talker(
    rtf_set: RtfSet,
    mode: str,
    own_talker: str | None = None,
    rng: np.random.Generator | None = None,
    candidates: Iterable[str] | None = None,
) -> str:
    """Pick the talker whose RTFs render the IM noise.

    ``individual`` returns ``own_talker``; ``non-individual`` draws
    uniformly among the other talkers in the set, optionally restricted to
    ``candidates``.
    """
    talkers = rtf_set.talkers
    if mode == "individual":
        if own_talker not in talkers:
            raise MissingRtfError(f"own talker {own_talker!r} has no RTFs in this set")
        return own_talker
    if mode != "non-individual":
        raise ValueError(f"unknown talker mode {mode!r}")
    pool = [t for t in talkers if t != own_talker]
    if candidates is not None:
        allowed = set(candidates)
        pool = [t for t in pool if t in allowed]
    if not pool:
        raise MissingRtfError(f"no talker other than {own_talker!r} available")
    if rng is None:
        raise ValueError("non-individual selection needs an rng")
    return pool[int(rng.integers(len(pool)))]
