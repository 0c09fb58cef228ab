import json

import numpy as np
import pytest
from scipy.signal import fftconvolve

from hearaug.audio import AudioBuffer, load_wav, save_wav
from hearaug.augment import AugmentationPolicy, augment, substream
from hearaug.cli import (
    EXIT_AUDIO,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_SCHEMA,
    EXIT_USAGE,
    run,
)
from hearaug.dataset import load_corpus_index
from hearaug.fixtures import speech_like
from hearaug.mixing import SpeechPair, mix
from hearaug.rtf import SweepSpec, compute_rtf, deconvolve_ir, generate_sweep, load_rtf_set


@pytest.fixture
def config(corpus, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({
        "schema": "hearaug.config", "version": 1, "corpus": str(corpus),
        "split": {"train": 2, "val": 1, "test": 1}, "n_mixtures": 8,
        "policy": {"method": "individual"},
    }))
    return p


def test_fixtures_subcommand(tmp_path, capsys):
    assert run(["fixtures", "--talkers", "4", "--directions", "8", "--out", str(tmp_path / "fx")]) == EXIT_OK
    index = load_corpus_index(tmp_path / "fx/corpus.json")
    assert index.talkers == ["T01", "T02", "T03", "T04"]
    rtfs = load_rtf_set(index.resolve(index.rtf_sets["individual"]))
    assert len(rtfs.direction_grid) == 8 and rtfs.talkers == index.talkers
    assert len(load_rtf_set(index.resolve(index.rtf_sets["ah-coarse"])).direction_grid) == 8
    assert len(load_rtf_set(index.resolve(index.rtf_sets["ah-fine"])).direction_grid) == 48
    assert "4 talkers" in capsys.readouterr().out


def test_gen_dataset_twice_identical(config, tmp_path):
    for d in ("d1", "d2"):
        assert run(["gen-dataset", "--config", str(config), "--seed", "7", "--out", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "d1/manifest.json").read_bytes() == (tmp_path / "d2/manifest.json").read_bytes()


def test_gen_dataset_overrides(config, tmp_path):
    code = run(["gen-dataset", "--config", str(config), "--seed", "1", "--out", str(tmp_path / "d"),
                "--policy", "no-im", "--snr-min", "3", "--snr-max", "3", "--n-mixtures", "4"])
    assert code == EXIT_OK
    d = json.loads((tmp_path / "d/manifest.json").read_text())
    assert len(d["records"]) == 4
    assert {r["snr_db"] for r in d["records"]} == {3.0}
    assert {r["augmentation"]["method"] for r in d["records"]} == {"no-im"}


def test_eval_writes_report(config, tmp_path):
    run(["gen-dataset", "--config", str(config), "--seed", "7", "--out", str(tmp_path / "d")])
    assert run(["eval", "--manifest", str(tmp_path / "d/manifest.json"), "--metrics", "stoi,snr"]) == EXIT_OK
    report = json.loads((tmp_path / "d/report.json").read_text())
    assert len(report["records"]) == 8
    assert {"stoi", "snr_db"} <= set(report["records"][0])
    assert (tmp_path / "d/report.csv").is_file()


def test_seed_required(config, tmp_path):
    assert run(["gen-dataset", "--config", str(config), "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_usage_errors():
    assert run([]) == EXIT_USAGE
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["eval", "--manifest", "m.json", "--bogus"]) == EXIT_USAGE
    assert run(["eval", "--manifest", "m.json", "--metrics", "pesq"]) == EXIT_USAGE
    assert run(["--help"]) == 0


def test_missing_input(tmp_path):
    assert run(["eval", "--manifest", str(tmp_path / "none.json")]) == EXIT_MISSING
    assert run(["gen-dataset", "--config", str(tmp_path / "none.json"), "--seed", "1",
                "--out", str(tmp_path)]) == EXIT_MISSING


def test_schema_violation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema": "hearaug.config", "version": 99}))
    assert run(["gen-dataset", "--config", str(p), "--seed", "1", "--out", str(tmp_path)]) == EXIT_SCHEMA
    p.write_text("{not json")
    assert run(["eval", "--manifest", str(p)]) == EXIT_SCHEMA


@pytest.mark.filterwarnings("ignore::scipy.io.wavfile.WavFileWarning")
def test_audio_errors(tmp_path):
    p = tmp_path / "n.wav"
    save_wav(AudioBuffer.mono(np.zeros(100), 44100), p)
    assert run(["augment", "--noise", str(p), "--policy", "no-im", "--seed", "1",
                "--out", str(tmp_path / "o.wav")]) == EXIT_AUDIO
    (tmp_path / "bad.wav").write_bytes(b"RIFF1234WAVEjunk")
    assert run(["coherence", "--input", str(tmp_path / "bad.wav"), "--out", str(tmp_path / "c.csv")]) == EXIT_AUDIO


def test_partial_failure_exit_code(corpus, tmp_path):
    import shutil
    root = tmp_path / "corpus"
    shutil.copytree(corpus.parent, root)
    for f in (root / "noise").glob("*.wav"):
        f.write_bytes(b"")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema": "hearaug.config", "version": 1, "corpus": "corpus/corpus.json",
                               "split": {"train": 2, "val": 1, "test": 1}, "n_mixtures": 2}))
    assert run(["gen-dataset", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "d")]) == EXIT_PARTIAL


def test_sweep_matches_library(tmp_path):
    args = ["sweep", "--f-start", "100", "--f-end", "8000", "--duration", "0.5", "--rate", "16000",
            "--encoding", "float32", "--out", str(tmp_path)]
    assert run(args) == EXIT_OK
    sweep, inverse = generate_sweep(SweepSpec(100, 8000, 0.5, 16000))
    np.testing.assert_array_equal(load_wav(tmp_path / "sweep.wav").samples,
                                  sweep.samples.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(load_wav(tmp_path / "inverse.wav").samples[0], inverse)


def test_augment_matches_library(corpus, tmp_path):
    index = load_corpus_index(corpus)
    noise = index.resolve(index.noise[0].path)
    rtf_dir = index.resolve(index.rtf_sets["individual"])
    out = tmp_path / "pair.wav"
    assert run(["augment", "--noise", str(noise), "--rtf-set", str(rtf_dir), "--talker", "T02",
                "--seed", "5", "--out", str(out)]) == EXIT_OK
    pair = augment(load_wav(noise), AugmentationPolicy(), load_rtf_set(rtf_dir), "T02", substream(5))
    np.testing.assert_array_equal(load_wav(out).samples,
                                  pair.as_buffer().samples.astype(np.float32).astype(np.float64))
    prov = json.loads(out.with_suffix(".json").read_text())["provenance"]
    assert prov == json.loads(json.dumps(pair.provenance.to_dict()))


def test_augment_needs_rtf_set(corpus, tmp_path):
    index = load_corpus_index(corpus)
    noise = index.resolve(index.noise[0].path)
    assert run(["augment", "--noise", str(noise), "--seed", "1", "--out", str(tmp_path / "o.wav")]) == EXIT_USAGE


def test_mix_matches_library(tmp_path):
    rng = np.random.default_rng(0)
    s = speech_like(3.0, rng)
    speech = AudioBuffer(np.vstack([s, 0.5 * s]), 16000)
    noise = AudioBuffer(rng.standard_normal((2, s.size)) * 0.1, 16000)
    save_wav(speech, tmp_path / "s.wav", "float64")
    save_wav(noise, tmp_path / "n.wav", "float64")
    assert run(["mix", "--speech", str(tmp_path / "s.wav"), "--noise", str(tmp_path / "n.wav"),
                "--snr", "2.5", "--out", str(tmp_path / "m")]) == EXIT_OK
    meta = json.loads((tmp_path / "m/mix.json").read_text())
    from hearaug.augment import Method, NoisePair, NoiseProvenance, SourceMode
    ref = mix(SpeechPair.from_buffer(speech),
              NoisePair(AudioBuffer.mono(noise.samples[0]), AudioBuffer.mono(noise.samples[1]),
                        NoiseProvenance(Method.INDIVIDUAL, SourceMode.SINGLE)), 2.5)
    assert meta["gain"] == ref.gain
    assert abs(meta["snr_db_achieved"] - 2.5) < 1e-6
    np.testing.assert_array_equal(load_wav(tmp_path / "m/target.wav").samples[0],
                                  ref.target.astype(np.float32))


def test_coherence_csv(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(8000)
    save_wav(AudioBuffer(np.vstack([x, x]), 16000), tmp_path / "p.wav", "float32")
    assert run(["coherence", "--input", str(tmp_path / "p.wav"), "--out", str(tmp_path / "c.csv")]) == EXIT_OK
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 258
    assert float(lines[10].split(",")[1]) == pytest.approx(1.0, abs=1e-6)


def test_measure_rtf(tmp_path):
    spec = SweepSpec(80, 8000, 1.5, 16000)
    sweep = generate_sweep(spec)[0].samples[0]
    rng = np.random.default_rng(3)
    entries, expected = [], {}
    for d in (0.0, 180.0):
        ir_o = np.r_[np.zeros(5), rng.standard_normal(60) * np.exp(-np.arange(60) / 10), np.zeros(2)]
        ir_i = 0.3 * np.convolve(ir_o, [0.0, 1.0, 0.5])[:ir_o.size]
        rec = np.vstack([fftconvolve(sweep, ir_o), fftconvolve(sweep, ir_i)])
        name = f"r{int(d)}.wav"
        save_wav(AudioBuffer(rec, 16000), tmp_path / name, "float64")
        entries.append({"talker_id": "T01", "direction_deg": d, "path": name})
        h = deconvolve_ir(AudioBuffer(rec, 16000), spec, ir_length=1024)
        expected[d] = compute_rtf(h[0], h[1], direction_deg=d, talker_id="T01")
    (tmp_path / "rec.json").write_text(json.dumps({
        "schema": "hearaug.recordings", "version": 1,
        "sweep": {"f_start": 80, "f_end": 8000, "duration": 1.5, "sample_rate": 16000},
        "entries": entries,
    }))
    assert run(["measure-rtf", "--recordings", str(tmp_path / "rec.json"), "--grid", "individual",
                "--ir-length", "1024", "--out", str(tmp_path / "set")]) == EXIT_OK
    s = load_rtf_set(tmp_path / "set")
    assert s.direction_grid == [0.0, 180.0]
    for d, r in expected.items():
        assert s.get("T01", d) == r
    G = s.get("T01", 0.0).freq_response
    k = np.arange(257)
    target = 0.3 * (np.exp(-2j * np.pi * k / 512) + 0.5 * np.exp(-4j * np.pi * k / 512))
    band = slice(4, 225)
    assert np.abs(G[band] - target[band]).max() < 1e-2
