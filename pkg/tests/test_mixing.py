import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hearaug.audio import AudioBuffer
from hearaug.augment import Method, NoisePair, NoiseProvenance, SourceMode
from hearaug.mixing import (
    NormStats,
    SnrRangeWarning,
    SpeechPair,
    cut_utterance,
    mean_var_normalize,
    mix,
    scale_target,
    snr_gain,
)

N = 48000


def _noise(om, im, method=Method.INDIVIDUAL):
    return NoisePair(AudioBuffer.mono(om, label="OM"), AudioBuffer.mono(im, label="IM"),
                     NoiseProvenance(method, SourceMode.SINGLE))


@pytest.fixture
def example(rng):
    s_om = rng.standard_normal(N) * 0.1
    speech = SpeechPair(s_om, 2 * s_om, 1e-3 * rng.standard_normal(N), "T1")
    noise = _noise(rng.standard_normal(N) * 0.3, rng.standard_normal(N) * 0.02)
    return speech, noise


# cut_utterance

def test_cut_long_input(rng):
    x = np.arange(160000.0)
    seg, off = cut_utterance(x, rng)
    assert seg.size == N
    np.testing.assert_array_equal(seg, x[off:off + N])


def test_cut_exact_is_identity(rng):
    x = np.arange(float(N))
    seg, off = cut_utterance(x, rng)
    assert off == 0
    np.testing.assert_array_equal(seg, x)


def test_cut_short_is_zero_padded(rng):
    x = np.ones(16000)
    seg, _ = cut_utterance(x, rng)
    assert seg.size == N and not np.any(seg[16000:]) and np.all(seg[:16000] == 1)


def test_cut_multichannel_and_offset_checks():
    x = np.ones((3, 60000))
    seg, off = cut_utterance(x, offset=5)
    assert seg.shape == (3, N) and off == 5
    with pytest.raises(ValueError):
        cut_utterance(x, offset=20000)
    with pytest.raises(ValueError):
        cut_utterance(x)


# snr_gain

def test_gain_closed_forms():
    x = np.ones(100)
    assert snr_gain(x, -x, 0.0) == 1.0
    assert math.isclose(snr_gain(x, x, 10.0), 10**-0.5)
    with pytest.raises(ValueError):
        snr_gain(x, np.zeros(100), 0.0)
    with pytest.raises(ValueError):
        snr_gain(np.zeros(100), x, 0.0)


# mix

def test_composition_is_exact(example):
    speech, noise = example
    m = mix(speech, noise, 5.0)
    n_om, n_im = noise.om.samples[0], noise.im.samples[0]
    np.testing.assert_array_equal(m.noisy_om, speech.s_om + m.gain * n_om)
    np.testing.assert_array_equal(m.noisy_im, speech.s_im + m.gain * n_im + speech.body_im)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 25), st.integers(0, 2**32 - 1))
def test_achieved_snr(snr, seed):
    rng = np.random.default_rng(seed)
    speech = SpeechPair(rng.standard_normal(4000), rng.standard_normal(4000))
    noise = _noise(rng.standard_normal(4000), rng.standard_normal(4000))
    m = mix(speech, noise, snr)
    gn = m.noisy_om - speech.s_om
    achieved = 10 * math.log10(np.dot(speech.s_om, speech.s_om) / np.dot(gn, gn))
    assert abs(achieved - snr) < 1e-6
    assert abs(m.snr_db_achieved - snr) < 1e-6


def test_noise_level_difference_preserved(example):
    speech, noise = example
    m = mix(speech, noise, -3.0)
    n_om, n_im = noise.om.samples[0], noise.im.samples[0]
    before = np.dot(n_im, n_im) / np.dot(n_om, n_om)
    g = m.gain
    after = np.dot(g * n_im, g * n_im) / np.dot(g * n_om, g * n_om)
    assert math.isclose(before, after, rel_tol=1e-14)


@pytest.mark.parametrize("snr", [-10.0, 0.0, 25.0])
def test_no_im_noise_leaves_im_speech(example, snr):
    speech, noise = example
    silent = _noise(noise.om.samples[0], np.zeros(N), Method.NO_IM_NOISE)
    m = mix(speech, silent, snr)
    np.testing.assert_array_equal(m.noisy_im, speech.s_im + speech.body_im)


def test_out_of_range_snr_warns(example):
    speech, noise = example
    with pytest.warns(SnrRangeWarning):
        mix(speech, noise, 30.0)


def test_length_mismatch(example):
    speech, noise = example
    short = _noise(np.ones(10), np.ones(10))
    with pytest.raises(ValueError):
        mix(speech, short, 0.0)


def test_speech_pair_from_buffer(rng):
    b = AudioBuffer(rng.standard_normal((3, 100)), 16000)
    p = SpeechPair.from_buffer(b, "T1")
    np.testing.assert_array_equal(p.body_im, b.samples[2])
    with pytest.raises(ValueError):
        SpeechPair.from_buffer(AudioBuffer(np.ones((1, 10)), 16000))


# normalization

def test_normalized_moments(rng):
    y, stats = mean_var_normalize(3 + 2 * rng.standard_normal(N))
    assert abs(np.mean(y)) < 1e-12
    assert abs(np.var(y) - 1) < 1e-9
    assert not stats.guarded


def test_constant_input_is_guarded():
    y, stats = mean_var_normalize(np.full(100, 0.25))
    assert stats.guarded and np.all(np.isfinite(y))


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(-10, 10))
def test_normalization_inverts(seed, scale, offset):
    x = offset + scale * np.random.default_rng(seed).standard_normal(1000)
    y, stats = mean_var_normalize(x)
    back = stats.invert(y)
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-12


def test_scale_target_halves():
    np.testing.assert_array_equal(scale_target(np.array([2.0, -4.0]), NormStats(0.3, 2.0)), [1.0, -2.0])


def test_noise_free_limit(example):
    speech, noise = example
    with pytest.warns(SnrRangeWarning):
        m = mix(speech, noise, 300.0)
    # y_om = (s + g n - mu) / sigma; add back mu / sigma and the noise term vanishes
    recovered = m.y_om + m.om_stats.mean / m.om_stats.std
    np.testing.assert_allclose(recovered, m.target, atol=1e-9 * np.abs(m.target).max())


def test_target_is_scalar_multiple(example):
    speech, noise = example
    m = mix(speech, noise, 0.0)
    nz = speech.s_om != 0
    ratio = m.target[nz] / speech.s_om[nz]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-14)
