import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hearaug.audio import AudioBuffer, SampleRateError
from hearaug.augment import (
    AugmentationPolicy,
    DegenerateDiffuseWarning,
    Method,
    NoiseProvenance,
    ShortReferenceWarning,
    SourceMode,
    add_decorrelation_noise,
    augment,
    augment_single_source,
    render_noise_pair,
    sample_decorrelation_level,
    sample_source_mode,
    substream,
    synthesize_diffuse,
)
from hearaug.evaluation import msc
from hearaug.fixtures import TalkerAcoustics, synthetic_rtf_set
from hearaug.rtf import apply_rtf

FS = 16000
GRID8 = [0, 45, 90, 135, 180, 225, 270, 315]


@pytest.fixture(scope="module")
def rtfs():
    acoustics = {f"T{i}": TalkerAcoustics.random(np.random.default_rng(i)) for i in (1, 2)}
    return synthetic_rtf_set(acoustics, "individual", GRID8)


@pytest.fixture(scope="module")
def reference():
    return AudioBuffer.mono(np.random.default_rng(9).standard_normal(10 * FS) * 0.05)


def _policy(method="individual", mode="single", **kw):
    return AugmentationPolicy(Method(method), SourceMode(mode), **kw)


# Policy

def test_policy_bounds():
    with pytest.raises(ValueError):
        AugmentationPolicy(decorrelation_max_db=-50)
    with pytest.raises(ValueError):
        AugmentationPolicy(p_single=1.5)
    p = AugmentationPolicy()
    assert AugmentationPolicy.from_dict(p.to_dict()) == p


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_sampled_level_never_exceeds_cap(seed):
    p = AugmentationPolicy()
    rng = np.random.default_rng(seed)
    for _ in range(20):
        level = sample_decorrelation_level(p, rng)
        assert level == -math.inf or -100 <= level <= -60


def test_mode_always_single_at_p1(rng):
    p = AugmentationPolicy(p_single=1.0)
    assert all(sample_source_mode(p, rng) is SourceMode.SINGLE for _ in range(1000))


def test_mode_fraction_binomial(rng):
    p = AugmentationPolicy(p_single=0.5)
    n = 100_000
    singles = sum(sample_source_mode(p, rng) is SourceMode.SINGLE for _ in range(n))
    assert abs(singles - n / 2) < 3 * math.sqrt(n * 0.25)


def test_mode_deterministic_per_record():
    p = AugmentationPolicy()
    a = [sample_source_mode(p, substream(42, 1, i)) for i in range(50)]
    b = [sample_source_mode(p, substream(42, 1, i)) for i in range(50)]
    assert a == b


def test_substreams_independent_of_order():
    x = substream(7, 1, 3).random()
    substream(7, 1, 2).random()
    assert substream(7, 1, 3).random() == x
    assert substream(7, 1, 4).random() != x


# Single source

def test_no_im_noise_is_exact(reference, rng):
    pair = augment_single_source(reference, _policy("no-im"), None, "T1", rng)
    np.testing.assert_array_equal(pair.om.samples, reference.samples)
    assert not np.any(pair.im.samples)


def test_individual_render(reference, rtfs):
    # find a seed that draws 90 deg, then rebuild the IM by hand
    for seed in range(100):
        pair = augment_single_source(reference, _policy(), rtfs, "T1", np.random.default_rng(seed))
        if pair.provenance.directions == (90.0,):
            break
    prov = pair.provenance
    assert prov.talker_id == "T1"
    im = apply_rtf(reference, rtfs.get("T1", 90.0))
    im = add_decorrelation_noise(im, prov.decorrelation_db, np.random.default_rng(prov.noise_seed))
    np.testing.assert_array_equal(pair.im.samples, im.samples)
    np.testing.assert_array_equal(pair.om.samples, reference.samples)


def test_non_individual_picks_other_talker(reference, rtfs, rng):
    talkers = {
        augment_single_source(reference, _policy("non-individual"), rtfs, "T1", rng).provenance.talker_id
        for _ in range(30)
    }
    assert talkers == {"T2"}


def test_wrong_grid_rejected(reference, rtfs, rng):
    with pytest.raises(ValueError):
        augment_single_source(reference, _policy("ah"), rtfs, "T1", rng)


def test_rate_checked(rtfs, rng):
    with pytest.raises(SampleRateError):
        augment_single_source(AudioBuffer.mono(np.ones(100), 8000), _policy(), rtfs, "T1", rng)


def test_provenance_replays(reference, rtfs, rng):
    pair = augment(reference, _policy(mode="random"), rtfs, "T2", rng)
    restored = NoiseProvenance.from_dict(pair.provenance.to_dict())
    assert restored == pair.provenance
    again = render_noise_pair(reference, restored, rtfs)
    np.testing.assert_array_equal(again.im.samples, pair.im.samples)
    np.testing.assert_array_equal(again.om.samples, pair.om.samples)


# Diffuse

def test_single_direction_diffuse_equals_single_source(reference):
    s = synthetic_rtf_set({"T1": TalkerAcoustics()}, "individual", [90.0])
    p = _policy(decorrelation_p_off=1.0)
    single = augment_single_source(reference, p, s, "T1", np.random.default_rng(0))
    diffuse = synthesize_diffuse(reference, p, s, "T1", np.random.default_rng(0))
    np.testing.assert_array_equal(diffuse.om.samples, single.om.samples)
    np.testing.assert_array_equal(diffuse.im.samples, single.im.samples)


def test_diffuse_is_brute_force_sum(reference, rtfs, rng):
    p = _policy(mode="diffuse", decorrelation_p_off=1.0)
    pair = synthesize_diffuse(reference, p, rtfs, "T1", rng)
    assert pair.provenance.shifts == tuple(d * FS for d in range(8))
    om = np.zeros(reference.num_samples)
    im = np.zeros(reference.num_samples)
    for d, theta in enumerate(GRID8):
        shifted = AudioBuffer.mono(np.roll(reference.samples[0], d * FS))
        om += shifted.samples[0]
        im += apply_rtf(shifted, rtfs.get("T1", theta)).samples[0]
    np.testing.assert_array_equal(pair.om.samples[0], om)
    np.testing.assert_array_equal(pair.im.samples[0], im)


def test_diffuse_no_im_warns_and_is_zero(reference, rng):
    with pytest.warns(DegenerateDiffuseWarning):
        pair = synthesize_diffuse(reference, _policy("no-im", "diffuse"), None, "T1", rng)
    assert not np.any(pair.im.samples)
    assert "degenerate-diffuse" in pair.provenance.flags


def test_short_reference_wraps_with_warning(rtfs, rng):
    short = AudioBuffer.mono(np.random.default_rng(0).standard_normal(3 * FS))
    with pytest.warns(ShortReferenceWarning):
        pair = synthesize_diffuse(short, _policy(mode="diffuse"), rtfs, "T1", rng)
    assert "wrapped-shifts" in pair.provenance.flags
    assert all(0 <= s < 3 * FS for s in pair.provenance.shifts)


def test_augment_never_renders_no_im_diffuse(reference, rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pair = augment(reference, _policy("no-im", "diffuse"), None, "T1", rng)
    assert pair.provenance.mode is SourceMode.SINGLE


# Decorrelation noise

def test_level_off_returns_input(reference):
    assert add_decorrelation_noise(reference, -math.inf, np.random.default_rng(0)) is reference


def test_level_minus_60_energy_ratio(reference):
    out = add_decorrelation_noise(reference, -60.0, np.random.default_rng(0))
    w = out.samples[0] - reference.samples[0]
    ratio = np.dot(w, w) / np.dot(reference.samples[0], reference.samples[0])
    assert abs(ratio - 1e-6) <= 1e-9 * 1e-6


def test_level_above_cap_rejected(reference):
    with pytest.raises(ValueError):
        add_decorrelation_noise(reference, -50.0, np.random.default_rng(0))


def test_silent_im_untouched():
    im = AudioBuffer.mono(np.zeros(100))
    assert add_decorrelation_noise(im, -60.0, np.random.default_rng(0)) is im


def test_coherence_falls_with_level(rtfs):
    levels = [-100, -90, -80, -70, -60]
    mean_msc = np.zeros(len(levels))
    for trial in range(10):
        x = AudioBuffer.mono(np.random.default_rng(100 + trial).standard_normal(4 * FS))
        for j, level in enumerate(levels):
            prov = NoiseProvenance(Method.INDIVIDUAL, SourceMode.SINGLE, "T1", (90.0,), (0,), level, trial)
            pair = render_noise_pair(x, prov, rtfs)
            mean_msc[j] += msc(pair.om.samples[0], pair.im.samples[0])[1].mean() / 10
    assert np.all(np.diff(mean_msc) < 0)


@pytest.mark.parametrize("mode", ["single", "diffuse"])
def test_span_matches_cropped_full_render(reference, rtfs, mode):
    p = _policy(mode=mode, decorrelation_p_off=1.0)
    pair = augment(reference, p, rtfs, "T1", np.random.default_rng(3))
    part = render_noise_pair(reference, pair.provenance, rtfs, span=(512, 512 + 3 * FS))
    np.testing.assert_array_equal(part.om.samples[0], pair.om.samples[0][512:512 + 3 * FS])
    np.testing.assert_allclose(part.im.samples[0], pair.im.samples[0][512:512 + 3 * FS], atol=1e-15)


def test_span_decorrelation_is_relative_to_span(reference, rtfs):
    prov = NoiseProvenance(Method.INDIVIDUAL, SourceMode.SINGLE, "T1", (0.0,), (0,), -60.0, 5)
    clean = NoiseProvenance(Method.INDIVIDUAL, SourceMode.SINGLE, "T1", (0.0,), (0,))
    span = (1000, 9000)
    a = render_noise_pair(reference, prov, rtfs, span).im.samples[0]
    b = render_noise_pair(reference, clean, rtfs, span).im.samples[0]
    w = a - b
    assert abs(np.dot(w, w) / np.dot(b, b) - 1e-6) < 1e-12
