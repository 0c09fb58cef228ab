"""Command-line entry point.

Exit codes: 0 success, 1 other fatal error, 2 usage error, 3 missing input,
4 schema violation, 5 audio format or sample-rate error, 6 dataset
generated with some records failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .audio import PIPELINE_RATE, AudioBuffer, AudioFormatError, SampleRateError, load_wav, save_wav
from .augment import AugmentationPolicy, Method, NoisePair, NoiseProvenance, SourceMode, augment, substream
from .dataset import (
    PlanError,
    SplitConfig,
    build_split,
    evaluate_dataset,
    generate,
    load_corpus_index,
    plan,
)
from .evaluation import METRICS, WelchConfig, msc, write_coherence_csv, write_report
from .fixtures import write_fixtures
from .mixing import SNR_RANGE, SpeechPair, mix
from .rtf import (
    GRID_TAGS,
    MissingRtfError,
    RtfSet,
    SchemaError,
    SweepSpec,
    compute_rtf,
    deconvolve_ir,
    generate_sweep,
    load_rtf_set,
    store_rtf_set,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_AUDIO = 5
EXIT_PARTIAL = 6

CONFIG_SCHEMA = "hearaug.config"
CONFIG_VERSION = 1
RECORDINGS_SCHEMA = "hearaug.recordings"

log = logging.getLogger("hearaug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path, schema: str, version: int = 1) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict) or d.get("schema") != schema or d.get("version") != version:
        raise SchemaError(f"{path}: expected schema {schema!r} version {version}")
    return d


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sweep_spec(args) -> SweepSpec:
    return SweepSpec(f_start=args.f_start, f_end=args.f_end, duration=args.duration,
                     sample_rate=args.rate, amplitude=args.amplitude)


# Subcommands

def cmd_sweep(args) -> int:
    spec = _sweep_spec(args)
    sweep, inverse = generate_sweep(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_wav(sweep, out / "sweep.wav", args.encoding)
    save_wav(AudioBuffer.mono(inverse, spec.sample_rate, "inverse"), out / "inverse.wav", "float64")
    _write_json({"sweep": asdict(spec)}, out / "sweep.json")
    print(f"sweep: {sweep.duration:.2f} s at {spec.sample_rate} Hz -> {out}")
    return EXIT_OK


def cmd_measure_rtf(args) -> int:
    """Turn two-channel (OM, IM) sweep recordings into an RTF set."""
    d = _read_json(args.recordings, RECORDINGS_SCHEMA)
    root = Path(args.recordings).parent
    spec = SweepSpec(**d.get("sweep", {}))
    rate = int(d.get("output_rate", PIPELINE_RATE))
    rtfs = []
    for i, e in enumerate(d.get("entries", [])):
        try:
            rec = load_wav(root / e["path"], expected_rate=spec.sample_rate)
            talker, direction = e["talker_id"], float(e["direction_deg"])
        except KeyError as exc:
            raise SchemaError(f"{args.recordings} entry {i}: missing {exc}") from exc
        if rec.num_channels != 2:
            raise AudioFormatError(f"{e['path']}: need 2 channels (OM, IM)")
        irs = deconvolve_ir(rec, spec, ir_length=args.ir_length)
        if spec.sample_rate != rate:
            from scipy.signal import resample_poly
            irs = resample_poly(irs, rate, spec.sample_rate, axis=-1)
        rtfs.append(compute_rtf(irs[0], irs[1], direction_deg=direction, talker_id=talker,
                                sample_rate=rate))
    rtf_set = RtfSet.from_rtfs(rtfs, args.grid)
    store_rtf_set(rtf_set, args.out)
    print(f"measure-rtf: {len(rtfs)} RTFs, {len(rtf_set.talkers)} talker(s) -> {args.out}")
    return EXIT_OK


def _policy(args, base: dict | None = None) -> AugmentationPolicy:
    d = dict(base or {})
    if getattr(args, "policy", None):
        d["method"] = args.policy
    if getattr(args, "mode", None):
        d["source_mode"] = args.mode
    return AugmentationPolicy.from_dict(d)


def cmd_augment(args) -> int:
    policy = _policy(args)
    ref = load_wav(args.noise, expected_rate=PIPELINE_RATE)
    if ref.num_channels != 1:
        raise AudioFormatError(f"{args.noise}: reference noise must be mono")
    rtf_set = load_rtf_set(args.rtf_set) if args.rtf_set else None
    if policy.method is not Method.NO_IM_NOISE and rtf_set is None:
        raise UsageError(f"--rtf-set is required for policy {policy.method.value}")
    pair = augment(ref, policy, rtf_set, args.talker, substream(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(pair.as_buffer(), out, "float32")
    _write_json({"seed": args.seed, "policy": policy.to_dict(), "provenance": pair.provenance.to_dict()},
                out.with_suffix(".json"))
    print(f"augment: {pair.provenance.method.value}/{pair.provenance.mode.value} -> {out}")
    return EXIT_OK


def cmd_mix(args) -> int:
    speech = SpeechPair.from_buffer(load_wav(args.speech, expected_rate=PIPELINE_RATE))
    noise_buf = load_wav(args.noise, expected_rate=PIPELINE_RATE)
    if noise_buf.num_channels != 2:
        raise AudioFormatError(f"{args.noise}: noise pair must have 2 channels (OM, IM)")
    # provenance of an externally supplied pair is unknown; mix() ignores it
    fs = noise_buf.sample_rate
    noise = NoisePair(AudioBuffer.mono(noise_buf.samples[0], fs, "OM"),
                      AudioBuffer.mono(noise_buf.samples[1], fs, "IM"),
                      NoiseProvenance(Method.INDIVIDUAL, SourceMode.SINGLE))
    m = mix(speech, noise, args.snr, snr_range=(args.snr_min, args.snr_max))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_wav(m.noisy_buffer(), out / "noisy.wav", "float32")
    save_wav(m.target_buffer(), out / "target.wav", "float32")
    _write_json({
        "gain": m.gain, "snr_db_requested": m.snr_db_requested, "snr_db_achieved": m.snr_db_achieved,
        "om_stats": asdict(m.om_stats), "im_stats": asdict(m.im_stats),
    }, out / "mix.json")
    print(f"mix: SNR {m.snr_db_achieved:.3f} dB, gain {m.gain:.6g} -> {out}")
    return EXIT_OK


def _load_config(args) -> dict:
    if not args.config:
        return {}
    return _read_json(args.config, CONFIG_SCHEMA, CONFIG_VERSION)


def cmd_gen_dataset(args) -> int:
    cfg = _load_config(args)
    corpus = args.corpus or cfg.get("corpus")
    if corpus is None:
        raise UsageError("a corpus index is required (--corpus or 'corpus' in the config)")
    if args.config and not Path(corpus).is_absolute() and not args.corpus:
        corpus = Path(args.config).parent / corpus
    index = load_corpus_index(corpus)
    policy = _policy(args, cfg.get("policy"))
    split_cfg = SplitConfig.from_dict(cfg["split"]) if "split" in cfg else SplitConfig()
    split = build_split(index.talkers, split_cfg, args.seed)
    lo, hi = cfg.get("snr_range", SNR_RANGE)
    if args.snr_min is not None:
        lo = args.snr_min
    if args.snr_max is not None:
        hi = args.snr_max
    n = args.n_mixtures if args.n_mixtures is not None else cfg.get("n_mixtures", 100)
    manifest = plan(index, policy, split, n, args.seed, snr_range=(lo, hi),
                    utterance_s=cfg.get("utterance_s", 3.0))
    report = generate(manifest, args.out, workers=args.workers)
    print(f"gen-dataset: {report['n_ok']}/{report['n_records']} records -> {report['manifest']}")
    for f in report["failed"]:
        print(f"  failed {f['record_id']}: {f['error']}")
    return EXIT_PARTIAL if report["n_failed"] else EXIT_OK


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(METRICS)}")
    rows = evaluate_dataset(args.manifest, metrics)
    out = Path(args.out) if args.out else Path(args.manifest).parent / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(rows, out, out.with_suffix(".csv"),
                 meta={"manifest": str(args.manifest), "metrics": metrics, "tool_version": __version__})
    for m in metrics:
        keys = sorted({k for r in rows for k in r if k.startswith(m) or (m == "snr" and k == "snr_db")})
        for k in keys:
            vals = [r[k] for r in rows if np.isfinite(r[k])]
            if vals:
                print(f"eval: mean {k} = {np.mean(vals):.4f} over {len(vals)} records")
    print(f"eval: {len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_coherence(args) -> int:
    buf = load_wav(args.input)
    if buf.num_channels != 2:
        raise AudioFormatError(f"{args.input}: need 2 channels (OM, IM)")
    freqs, coh = msc(buf.samples[0], buf.samples[1], WelchConfig(nperseg=args.nperseg), buf.sample_rate)
    write_coherence_csv(freqs, coh, args.out)
    print(f"coherence: mean MSC {float(np.mean(coh)):.4f} -> {args.out}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    path = write_fixtures(args.out, args.seed, talkers=args.talkers, directions=args.directions,
                          utterances=args.utterances, noises=args.noises)
    # round-trip through the loaders as a self-check
    index = load_corpus_index(path)
    for rel in index.rtf_sets.values():
        load_rtf_set(index.resolve(rel))
    print(f"fixtures: {len(index.talkers)} talkers, {len(index.speech)} utterances, "
          f"{len(index.noise)} noises -> {path}")
    return EXIT_OK


# Parser

def _add_sweep_args(p):
    p.add_argument("--f-start", type=float, default=80.0)
    p.add_argument("--f-end", type=float, default=22050.0)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--rate", type=int, default=44100)
    p.add_argument("--amplitude", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hearaug", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hearaug {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep", help="write an exponential sweep and its inverse filter")
    _add_sweep_args(p)
    p.add_argument("--encoding", default="pcm24", choices=("pcm16", "pcm24", "pcm32", "float32"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("measure-rtf", help="build an RTF set from sweep recordings")
    p.add_argument("--recordings", required=True, help="recordings index (JSON)")
    p.add_argument("--grid", required=True, choices=GRID_TAGS)
    p.add_argument("--ir-length", type=int, default=4096, help="IR length at the recording rate")
    p.add_argument("--out", required=True, help="output RTF set directory")
    p.set_defaults(func=cmd_measure_rtf)

    p = sub.add_parser("augment", help="synthesize an (OM, IM) noise pair")
    p.add_argument("--noise", required=True, help="mono reference noise WAV")
    p.add_argument("--rtf-set")
    p.add_argument("--talker", help="wearer id (individual / non-individual policies)")
    p.add_argument("--policy", choices=[m.value for m in Method], default="individual")
    p.add_argument("--mode", choices=[m.value for m in SourceMode], default="random")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output 2-channel WAV")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("mix", help="mix own-voice speech with a noise pair")
    p.add_argument("--speech", required=True, help="speech WAV (OM, IM[, body])")
    p.add_argument("--noise", required=True, help="noise pair WAV (OM, IM)")
    p.add_argument("--snr", type=float, required=True, help="OM SNR in dB")
    p.add_argument("--snr-min", type=float, default=SNR_RANGE[0])
    p.add_argument("--snr-max", type=float, default=SNR_RANGE[1])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("gen-dataset", help="plan and generate a dataset")
    p.add_argument("--config", help=f"JSON config (schema {CONFIG_SCHEMA} v{CONFIG_VERSION})")
    p.add_argument("--corpus", help="corpus index; overrides the config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--n-mixtures", type=int)
    p.add_argument("--policy", choices=[m.value for m in Method])
    p.add_argument("--mode", choices=[m.value for m in SourceMode])
    p.add_argument("--snr-min", type=float)
    p.add_argument("--snr-max", type=float)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("eval", help="evaluate a generated dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="stoi,snr", help=f"comma list of {', '.join(METRICS)}")
    p.add_argument("--out", help="report JSON path (default: next to the manifest)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("coherence", help="OM/IM magnitude-squared coherence of a 2-channel WAV")
    p.add_argument("--input", required=True)
    p.add_argument("--nperseg", type=int, default=512)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_coherence)

    p = sub.add_parser("fixtures", help="write a synthetic corpus")
    p.add_argument("--talkers", type=int, default=18)
    p.add_argument("--directions", type=int, default=8)
    p.add_argument("--utterances", type=int, default=3)
    p.add_argument("--noises", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="fixtures")
    p.set_defaults(func=cmd_fixtures)
    return parser


def run(argv=None) -> int:
    """Parse ``argv``, dispatch, and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help, --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: missing input {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SchemaError, MissingRtfError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (AudioFormatError, SampleRateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUDIO
    except (PlanError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> int:
    return run(sys.argv[1:])
