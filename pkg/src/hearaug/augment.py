"""Two-channel (OM, IM) noise synthesis from single-channel noise.

The outer-microphone noise is the reference recording itself. The
inner-microphone noise is either silent or the reference rendered through
an outer-to-inner RTF chosen by the augmentation method:

* ``no-im``: no external noise reaches the IM
* ``ah`` / ``ah-fine``: artificial-head RTFs, 45 deg or 7.5 deg grid
* ``non-individual``: RTFs of a talker other than the wearer
* ``individual``: the wearer's own RTFs

Noise is either a single source from a random direction or a pseudo-diffuse
field summed over every grid direction, each direction fed a circularly
delayed copy of the reference. Low-level white noise is added to the IM
channel to lower OM/IM coherence.

Every random choice is drawn into a :class:`NoiseProvenance` first and the
audio is rendered from that record, so a provenance replays exactly.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import AudioBuffer, require_rate
from .rtf import AH_TALKER, RtfSet, apply_rtf, select_direction, select_talker

MAX_DECORRELATION_DB = -60.0


class Method(str, enum.Enum):
    NO_IM_NOISE = "no-im"
    ARTIFICIAL_HEAD = "ah"
    ARTIFICIAL_HEAD_FINE = "ah-fine"
    NON_INDIVIDUAL = "non-individual"
    INDIVIDUAL = "individual"

    @property
    def grid_tag(self) -> str | None:
        return {
            Method.NO_IM_NOISE: None,
            Method.ARTIFICIAL_HEAD: "ah-coarse",
            Method.ARTIFICIAL_HEAD_FINE: "ah-fine",
            Method.NON_INDIVIDUAL: "individual",
            Method.INDIVIDUAL: "individual",
        }[self]


class SourceMode(str, enum.Enum):
    SINGLE = "single"
    DIFFUSE = "diffuse"
    RANDOM = "random"


class ShortReferenceWarning(UserWarning):
    """Diffuse shifts wrap around a reference shorter than the total delay."""


class DegenerateDiffuseWarning(UserWarning):
    """Diffuse synthesis requested for a method without IM noise."""


def substream(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, *keys)``.

    Derived through :class:`numpy.random.SeedSequence`, so the stream for a
    record does not depend on which other records exist or run first.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


@dataclass(frozen=True)
class AugmentationPolicy:
    method: Method = Method.INDIVIDUAL
    source_mode: SourceMode = SourceMode.RANDOM
    p_single: float = 0.5
    # decorrelation level: -inf with probability p_off, else uniform in dB
    decorrelation_p_off: float = 0.1
    decorrelation_min_db: float = -100.0
    decorrelation_max_db: float = MAX_DECORRELATION_DB
    diffuse_delay_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "source_mode", SourceMode(self.source_mode))
        if not 0.0 <= self.p_single <= 1.0:
            raise ValueError("p_single must be in [0, 1]")
        if not 0.0 <= self.decorrelation_p_off <= 1.0:
            raise ValueError("decorrelation_p_off must be in [0, 1]")
        if self.decorrelation_max_db > MAX_DECORRELATION_DB:
            raise ValueError(f"decorrelation level may not exceed {MAX_DECORRELATION_DB} dB")
        if self.decorrelation_min_db > self.decorrelation_max_db:
            raise ValueError("decorrelation_min_db > decorrelation_max_db")
        if self.diffuse_delay_s < 0:
            raise ValueError("diffuse_delay_s must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["source_mode"] = self.source_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return cls(**d)


@dataclass(frozen=True)
class NoiseProvenance:
    """Everything needed to re-render a noise pair from its reference."""

    method: Method
    mode: SourceMode
    talker_id: str | None = None
    directions: tuple[float, ...] = ()
    shifts: tuple[int, ...] = ()
    decorrelation_db: float = -math.inf
    noise_seed: int | None = None
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "mode", SourceMode(self.mode))
        object.__setattr__(self, "directions", tuple(float(d) for d in self.directions))
        object.__setattr__(self, "shifts", tuple(int(s) for s in self.shifts))
        object.__setattr__(self, "flags", tuple(self.flags))

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "mode": self.mode.value,
            "talker_id": self.talker_id,
            "directions": list(self.directions),
            "shifts": list(self.shifts),
            # JSON has no -inf
            "decorrelation_db": None if math.isinf(self.decorrelation_db) else self.decorrelation_db,
            "noise_seed": self.noise_seed,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseProvenance":
        d = dict(d)
        if d.get("decorrelation_db") is None:
            d["decorrelation_db"] = -math.inf
        return cls(**d)


@dataclass(frozen=True)
class NoisePair:
    om: AudioBuffer
    im: AudioBuffer
    provenance: NoiseProvenance

    def __post_init__(self):
        if self.om.num_samples != self.im.num_samples:
            raise ValueError("OM and IM noise differ in length")
        if self.om.sample_rate != self.im.sample_rate:
            raise ValueError("OM and IM noise differ in sample rate")

    def as_buffer(self) -> AudioBuffer:
        return AudioBuffer(
            np.vstack([self.om.samples, self.im.samples]), self.om.sample_rate, ("OM", "IM")
        )


# Random draws

def sample_decorrelation_level(policy: AugmentationPolicy, rng: np.random.Generator) -> float:
    if rng.random() < policy.decorrelation_p_off:
        return -math.inf
    return float(rng.uniform(policy.decorrelation_min_db, policy.decorrelation_max_db))


def sample_source_mode(policy: AugmentationPolicy, rng: np.random.Generator) -> SourceMode:
    """Resolve ``RANDOM`` to single or diffuse with P(single) = ``p_single``."""
    if policy.source_mode is not SourceMode.RANDOM:
        return policy.source_mode
    return SourceMode.SINGLE if rng.random() < policy.p_single else SourceMode.DIFFUSE


def _check_set(policy: AugmentationPolicy, rtf_set: RtfSet | None) -> None:
    tag = policy.method.grid_tag
    if tag is None:
        return
    if rtf_set is None:
        raise ValueError(f"method {policy.method.value} needs an RTF set")
    if rtf_set.grid_tag != tag:
        raise ValueError(
            f"method {policy.method.value} needs a {tag} RTF set, got {rtf_set.grid_tag}"
        )


def _rtf_talker(policy, rtf_set, own_talker, rng, talker_candidates):
    m = policy.method
    if m in (Method.ARTIFICIAL_HEAD, Method.ARTIFICIAL_HEAD_FINE):
        talkers = rtf_set.talkers
        return talkers[0] if len(talkers) == 1 else AH_TALKER
    mode = "individual" if m is Method.INDIVIDUAL else "non-individual"
    return select_talker(rtf_set, mode, own_talker, rng, talker_candidates)


def choose_single_source(
    policy: AugmentationPolicy,
    rtf_set: RtfSet | None,
    own_talker: str | None,
    rng: np.random.Generator,
    talker_candidates=None,
) -> NoiseProvenance:
    _check_set(policy, rtf_set)
    if policy.method is Method.NO_IM_NOISE:
        return NoiseProvenance(policy.method, SourceMode.SINGLE)
    direction = select_direction(rtf_set, rng)
    talker = _rtf_talker(policy, rtf_set, own_talker, rng, talker_candidates)
    level = sample_decorrelation_level(policy, rng)
    seed = int(rng.integers(2**63))
    return NoiseProvenance(policy.method, SourceMode.SINGLE, talker, (direction,), (0,), level, seed)


def choose_diffuse(
    policy: AugmentationPolicy,
    rtf_set: RtfSet | None,
    own_talker: str | None,
    rng: np.random.Generator,
    num_samples: int,
    sample_rate: int,
    talker_candidates=None,
) -> NoiseProvenance:
    _check_set(policy, rtf_set)
    if policy.method is Method.NO_IM_NOISE:
        warnings.warn("diffuse noise without IM noise is all-zero at the IM", DegenerateDiffuseWarning)
        return NoiseProvenance(policy.method, SourceMode.DIFFUSE, flags=("degenerate-diffuse",))
    grid = rtf_set.direction_grid
    talker = _rtf_talker(policy, rtf_set, own_talker, rng, talker_candidates)
    level = sample_decorrelation_level(policy, rng)
    seed = int(rng.integers(2**63))
    step = int(round(policy.diffuse_delay_s * sample_rate))
    flags = ()
    if num_samples < len(grid) * step:
        warnings.warn(
            f"reference of {num_samples} samples is shorter than {len(grid)} x {step}-sample "
            "delays; directional copies wrap around",
            ShortReferenceWarning,
        )
        flags = ("wrapped-shifts",)
    shifts = tuple((d * step) % num_samples for d in range(len(grid)))
    return NoiseProvenance(policy.method, SourceMode.DIFFUSE, talker, tuple(grid), shifts, level, seed, flags)


# Rendering

def add_decorrelation_noise(im: AudioBuffer, level_db: float, rng: np.random.Generator) -> AudioBuffer:
    """Add Gaussian white noise ``level_db`` below the energy of ``im``.

    ``-inf`` returns ``im`` unchanged. An all-zero ``im`` has no level to
    refer to and is also returned unchanged.
    """
    if level_db > MAX_DECORRELATION_DB:
        raise ValueError(f"decorrelation level {level_db} dB exceeds {MAX_DECORRELATION_DB} dB")
    if math.isinf(level_db):
        return im
    x = im.samples[0]
    e_im = float(np.dot(x, x))
    if e_im == 0.0:
        return im
    w = rng.standard_normal(x.size)
    w *= math.sqrt(10.0 ** (level_db / 10.0) * e_im / float(np.dot(w, w)))
    return AudioBuffer((x + w)[np.newaxis], im.sample_rate, im.channel_labels)


def render_noise_pair(
    reference: AudioBuffer,
    provenance: NoiseProvenance,
    rtf_set: RtfSet | None,
    span: tuple[int, int] | None = None,
) -> NoisePair:
    """Render a noise pair deterministically from its provenance.

    ``span = (start, stop)`` keeps only those output samples. Directional
    copies are built over the full reference and truncated at ``stop``
    before filtering (the RTFs are causal), and decorrelation noise is
    scaled against the IM energy inside the span.
    """
    if reference.num_channels != 1:
        raise ValueError("reference noise must be mono")
    x = reference.samples[0]
    fs = reference.sample_rate
    p = provenance
    start, stop = span if span is not None else (0, x.size)
    if not 0 <= start <= stop <= x.size:
        raise ValueError(f"span {span} outside [0, {x.size}]")

    if p.method is Method.NO_IM_NOISE:
        om = AudioBuffer.mono(x[start:stop], fs, "OM")
        im = AudioBuffer.mono(np.zeros(stop - start), fs, "IM")
        return NoisePair(om, im, p)

    if p.mode is SourceMode.SINGLE:
        om_full = x[:stop]
        im_full = apply_rtf(AudioBuffer.mono(om_full, fs), rtf_set.get(p.talker_id, p.directions[0])).samples[0]
    else:
        om_full = np.zeros(stop)
        im_full = np.zeros(stop)
        for direction, shift in zip(p.directions, p.shifts):
            shifted = AudioBuffer.mono(np.roll(x, shift)[:stop], fs)
            om_full += shifted.samples[0]
            im_full += apply_rtf(shifted, rtf_set.get(p.talker_id, direction)).samples[0]
    om = AudioBuffer.mono(om_full[start:], fs, "OM")
    im = AudioBuffer.mono(im_full[start:], fs, "IM")

    if p.noise_seed is not None:
        im = add_decorrelation_noise(im, p.decorrelation_db, np.random.default_rng(p.noise_seed))
    return NoisePair(om, im, p)


def augment_single_source(
    reference: AudioBuffer,
    policy: AugmentationPolicy,
    rtf_set: RtfSet | None,
    own_talker: str | None,
    rng: np.random.Generator,
    talker_candidates=None,
) -> NoisePair:
    """Single-source noise pair: OM is the reference, IM follows the method."""
    require_rate(reference)
    prov = choose_single_source(policy, rtf_set, own_talker, rng, talker_candidates)
    return render_noise_pair(reference, prov, rtf_set)


def synthesize_diffuse(
    reference: AudioBuffer,
    policy: AugmentationPolicy,
    rtf_set: RtfSet | None,
    own_talker: str | None,
    rng: np.random.Generator,
    talker_candidates=None,
) -> NoisePair:
    """Pseudo-diffuse noise pair summed over every direction of the grid.

    Direction ``d`` (grid index, ascending) receives the reference circularly
    delayed by ``d * diffuse_delay_s``. The OM channel is the sum of the
    delayed copies and the IM channel the sum of their RTF renders.
    """
    require_rate(reference)
    prov = choose_diffuse(
        policy, rtf_set, own_talker, rng, reference.num_samples, reference.sample_rate,
        talker_candidates,
    )
    return render_noise_pair(reference, prov, rtf_set)


def augment(
    reference: AudioBuffer,
    policy: AugmentationPolicy,
    rtf_set: RtfSet | None,
    own_talker: str | None,
    rng: np.random.Generator,
    talker_candidates=None,
) -> NoisePair:
    """Draw the source mode, then synthesize accordingly.

    ``no-im`` has no directional structure, so it always renders as a
    single source.
    """
    mode = sample_source_mode(policy, rng)
    if mode is SourceMode.DIFFUSE and policy.method is not Method.NO_IM_NOISE:
        return synthesize_diffuse(reference, policy, rtf_set, own_talker, rng, talker_candidates)
    return augment_single_source(reference, policy, rtf_set, own_talker, rng, talker_candidates)
