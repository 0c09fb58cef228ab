"""Manifest-driven dataset generation.

``plan`` resolves every random choice (talker, utterance, cut offsets,
noise excerpt, augmentation draws, SNR) into a JSON manifest. ``generate``
renders a manifest into WAV files with no randomness of its own, so the
output is the same for any worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .audio import PIPELINE_RATE, AudioBuffer, AudioFormatError, SampleRateError, load_wav, save_wav
from .augment import (
    AugmentationPolicy,
    Method,
    NoiseProvenance,
    SourceMode,
    choose_diffuse,
    choose_single_source,
    render_noise_pair,
    sample_source_mode,
    substream,
)
from .evaluation import METRICS, evaluate_pair
from .mixing import SNR_RANGE, UTTERANCE_SECONDS, SpeechPair, cut_utterance, mix
from .rtf import MissingRtfError, RtfSet, SchemaError, load_rtf_set

log = logging.getLogger(__name__)

CORPUS_SCHEMA = "hearaug.corpus"
MANIFEST_SCHEMA = "hearaug.manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
OUTPUTS = ("y_om", "y_im", "target")
SPLIT_STREAM = 0
RECORD_STREAM = 1


class PlanError(ValueError):
    pass


# Corpus index

@dataclass(frozen=True)
class SpeechRecord:
    talker_id: str
    utterance_id: str
    path: str
    duration: float


@dataclass(frozen=True)
class NoiseRecord:
    noise_id: str
    path: str
    duration: float


@dataclass(frozen=True)
class CorpusIndex:
    speech: tuple[SpeechRecord, ...]
    noise: tuple[NoiseRecord, ...]
    rtf_sets: Mapping[str, str] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        for r in (*self.speech, *self.noise):
            if not r.duration > 0:
                raise SchemaError(f"non-positive duration for {r.path}")

    @property
    def talkers(self) -> list[str]:
        return sorted({s.talker_id for s in self.speech})

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def load_corpus_index(path) -> CorpusIndex:
    """Read a corpus index from JSON or CSV.

    CSV columns: ``kind`` (speech, noise or rtf), ``id``, ``talker_id``,
    ``path``, ``duration``. For ``rtf`` rows ``id`` is the grid tag.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    root = path.parent.resolve()
    if path.suffix.lower() == ".csv":
        speech, noise, rtf = [], [], {}
        with open(path, newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                kind = row.get("kind")
                try:
                    if kind == "speech":
                        speech.append(SpeechRecord(row["talker_id"], row["id"], row["path"], float(row["duration"])))
                    elif kind == "noise":
                        noise.append(NoiseRecord(row["id"], row["path"], float(row["duration"])))
                    elif kind == "rtf":
                        rtf[row["id"]] = row["path"]
                    else:
                        raise SchemaError(f"{path} row {i}: unknown kind {kind!r}")
                except (KeyError, TypeError, ValueError) as exc:
                    if isinstance(exc, SchemaError):
                        raise
                    raise SchemaError(f"{path} row {i}: {exc}") from exc
        return CorpusIndex(tuple(speech), tuple(noise), rtf, root)

    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict) or d.get("schema") != CORPUS_SCHEMA:
        raise SchemaError(f"{path}: not a corpus index")
    try:
        speech = tuple(SpeechRecord(e["talker_id"], e["utterance_id"], e["path"], float(e["duration"]))
                       for e in d["speech"])
        noise = tuple(NoiseRecord(e["noise_id"], e["path"], float(e["duration"])) for e in d["noise"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed entry ({exc})") from exc
    return CorpusIndex(speech, noise, dict(d.get("rtf_sets", {})), root)


# Splits

@dataclass(frozen=True)
class SplitConfig:
    train: int = 12
    val: int = 2
    test: int = 4
    explicit: Mapping[str, Sequence[str]] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitConfig":
        if all(isinstance(v, (list, tuple)) for v in d.values()):
            return cls(explicit={k: list(v) for k, v in d.items()})
        return cls(**{k: int(v) for k, v in d.items()})


def build_split(talkers: Sequence[str], cfg: SplitConfig, seed: int) -> dict[str, list[str]]:
    """Assign talkers to disjoint train/val/test sets by a seeded shuffle."""
    talkers = sorted(set(talkers))
    if cfg.explicit is not None:
        assignment = {k: sorted(v) for k, v in cfg.explicit.items()}
        seen: dict[str, str] = {}
        for split, members in assignment.items():
            for t in members:
                if t in seen:
                    raise PlanError(f"talker {t} appears in both {seen[t]} and {split}")
                if t not in talkers:
                    raise PlanError(f"talker {t} is not in the corpus")
                seen[t] = split
        return assignment
    counts = {"train": cfg.train, "val": cfg.val, "test": cfg.test}
    need = sum(counts.values())
    if need > len(talkers):
        raise PlanError(f"split needs {need} talkers, corpus has {len(talkers)}")
    order = list(substream(seed, SPLIT_STREAM).permutation(len(talkers)))
    assignment, pos = {}, 0
    for split in SPLITS:
        assignment[split] = sorted(talkers[i] for i in order[pos:pos + counts[split]])
        pos += counts[split]
    return assignment


# Manifest

@dataclass
class DatasetManifest:
    header: dict
    records: list[dict]

    def to_json(self) -> str:
        return json.dumps({"header": self.header, "records": self.records}, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict) or "header" not in d or "records" not in d:
            raise SchemaError(f"{path}: not a dataset manifest")
        header = d["header"]
        if header.get("schema") != MANIFEST_SCHEMA or header.get("version") != MANIFEST_VERSION:
            raise SchemaError(f"{path}: unsupported manifest schema/version")
        return cls(header, d["records"])

    @property
    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy.from_dict(self.header["policy"])


def _allocate(total: int, weights: Mapping[str, int]) -> dict[str, int]:
    """Split ``total`` proportionally to ``weights`` (largest remainder)."""
    wsum = sum(weights.values())
    raw = {k: total * w / wsum for k, w in weights.items()}
    out = {k: int(math.floor(v)) for k, v in raw.items()}
    rest = total - sum(out.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - out[k]), k))[:rest]:
        out[k] += 1
    return out


def _rtf_tag(policy: AugmentationPolicy) -> str | None:
    return policy.method.grid_tag


def plan(
    index: CorpusIndex,
    policy: AugmentationPolicy,
    split: Mapping[str, Sequence[str]],
    n_mixtures: int | Mapping[str, int],
    seed: int,
    snr_range=SNR_RANGE,
    utterance_s: float = UTTERANCE_SECONDS,
) -> DatasetManifest:
    """Draw every random choice for ``n_mixtures`` records.

    An integer ``n_mixtures`` is distributed over the splits in proportion
    to their talker counts; a mapping gives per-split counts.
    """
    if not index.speech:
        raise PlanError("corpus has no speech records")
    if not index.noise:
        raise PlanError("corpus has no noise records")
    lo, hi = (float(v) for v in snr_range)
    if lo > hi:
        raise PlanError("snr_range is reversed")
    fs = PIPELINE_RATE
    seg = int(round(utterance_s * fs))

    tag = _rtf_tag(policy)
    rtf_set: RtfSet | None = None
    if tag is not None:
        if tag not in index.rtf_sets:
            raise PlanError(f"corpus index has no {tag} RTF set")
        rtf_set = load_rtf_set(index.resolve(index.rtf_sets[tag]))
    warmup = rtf_set.ir_length if rtf_set is not None else 0

    by_talker: dict[str, list[SpeechRecord]] = {}
    for s in index.speech:
        by_talker.setdefault(s.talker_id, []).append(s)
    for recs in by_talker.values():
        recs.sort(key=lambda r: r.utterance_id)
    noise_recs = sorted(index.noise, key=lambda r: r.noise_id)

    split = {k: sorted(v) for k, v in split.items() if v}
    counts = (dict(n_mixtures) if isinstance(n_mixtures, Mapping)
              else _allocate(int(n_mixtures), {k: len(v) for k, v in split.items()}))
    for name in counts:
        if name not in split:
            raise PlanError(f"no talkers in split {name!r}")
        missing = [t for t in split[name] if t not in by_talker]
        if missing:
            raise PlanError(f"split {name} has talkers without speech: {missing}")
        if policy.method is Method.INDIVIDUAL:
            absent = [t for t in split[name] if t not in rtf_set.talkers]
            if absent:
                raise PlanError(f"individual policy needs RTFs for {absent}")

    records = []
    i = 0
    for name in [s for s in SPLITS if s in counts] + sorted(set(counts) - set(SPLITS)):
        talkers = split[name]
        for j in range(counts[name]):
            rng = substream(seed, RECORD_STREAM, i)
            talker = talkers[int(rng.integers(len(talkers)))]
            utt = by_talker[talker][int(rng.integers(len(by_talker[talker])))]
            n_speech = int(round(utt.duration * fs))
            speech_offset = int(rng.integers(0, n_speech - seg + 1)) if n_speech > seg else 0
            noise = noise_recs[int(rng.integers(len(noise_recs)))]
            n_noise = int(round(noise.duration * fs))

            mode = sample_source_mode(policy, rng)
            if policy.method is Method.NO_IM_NOISE:
                mode = SourceMode.SINGLE
            need = seg + warmup
            if mode is SourceMode.DIFFUSE:
                step = int(round(policy.diffuse_delay_s * fs))
                length = min(n_noise, max(need, len(rtf_set.direction_grid) * step))
            else:
                length = min(n_noise, need)
            length = max(length, need)  # shorter noise is tiled up to `need`
            # non-individual RTFs come from the same split unless it has no other talker
            candidates, extra_flags = talkers, ()
            if policy.method is Method.NON_INDIVIDUAL and not any(
                    t != talker and t in rtf_set.talkers for t in talkers):
                candidates, extra_flags = None, ("cross-split-rtf",)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    if mode is SourceMode.DIFFUSE:
                        prov = choose_diffuse(policy, rtf_set, talker, rng, length, fs, candidates)
                    else:
                        prov = choose_single_source(policy, rtf_set, talker, rng, candidates)
                except MissingRtfError as exc:
                    raise PlanError(f"record {i}: {exc.args[0]}") from exc
            if extra_flags:
                prov = replace(prov, flags=prov.flags + extra_flags)
            noise_offset = int(rng.integers(0, n_noise - length + 1)) if n_noise > length else 0
            snr = float(rng.uniform(lo, hi)) if hi > lo else lo

            records.append({
                "record_id": f"{name}-{j:05d}",
                "index": i,
                "split": name,
                "speech": {"talker_id": talker, "utterance_id": utt.utterance_id,
                           "path": str(index.resolve(utt.path)), "offset": speech_offset},
                "noise": {"noise_id": noise.noise_id, "path": str(index.resolve(noise.path)),
                          "offset": noise_offset, "length": length, "warmup": warmup},
                "augmentation": prov.to_dict(),
                "snr_db": snr,
            })
            i += 1

    header = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "tool_version": __version__,
        "master_seed": int(seed),
        "policy": policy.to_dict(),
        "split": split,
        "snr_range": [lo, hi],
        "snr_definition": "full-utterance energy at the outer microphone",
        "sample_rate": fs,
        "utterance_s": utterance_s,
        "rtf_set": str(index.resolve(index.rtf_sets[tag])) if tag else None,
        "n_records": len(records),
    }
    return DatasetManifest(header, records)


# Generation

def checksum(x: np.ndarray) -> str:
    """SHA-256 of the signal quantized to 24-bit steps (no clipping).

    The input is first cast to float32, the precision of the stored files,
    so a checksum of reloaded output matches the one recorded at write time.
    """
    x32 = np.asarray(x, dtype=np.float32).astype(np.float64)
    q = np.round(x32 * 2.0**23).astype("<i8")
    return hashlib.sha256(q.tobytes()).hexdigest()


_RTF_CACHE: dict[str, RtfSet] = {}


def _rtf_set(path: str | None) -> RtfSet | None:
    if path is None:
        return None
    if path not in _RTF_CACHE:
        _RTF_CACHE[path] = load_rtf_set(path)
    return _RTF_CACHE[path]


def load_record_inputs(record: dict, header: dict):
    """Speech pair and rendered noise pair of one planned record."""
    fs = header["sample_rate"]
    seg = int(round(header["utterance_s"] * fs))
    sp = record["speech"]
    speech_buf = load_wav(sp["path"], expected_rate=fs)
    offset = sp["offset"] if speech_buf.num_samples > seg else None
    speech_data, _ = cut_utterance(speech_buf.samples, length_s=header["utterance_s"],
                                   sample_rate=fs, offset=offset)
    speech = SpeechPair.from_buffer(AudioBuffer(speech_data, fs), sp["talker_id"])

    nz = record["noise"]
    noise_buf = load_wav(nz["path"], expected_rate=fs)
    if noise_buf.num_channels != 1:
        raise AudioFormatError(f"{nz['path']}: noise must be mono")
    x = noise_buf.samples[0]
    length = nz["length"]
    if x.size < length:
        x = np.resize(x, length)  # tile short noise
    ref = AudioBuffer.mono(x[nz["offset"]:nz["offset"] + length], fs)
    if ref.num_samples != length:
        raise AudioFormatError(f"{nz['path']}: shorter than its indexed duration")

    prov = NoiseProvenance.from_dict(record["augmentation"])
    w = nz["warmup"]
    noise = render_noise_pair(ref, prov, _rtf_set(header["rtf_set"]), span=(w, w + seg))
    return speech, noise


def render_record(record: dict, header: dict):
    """Mix one planned record. Returns a MixResult."""
    speech, noise = load_record_inputs(record, header)
    return mix(speech, noise, record["snr_db"], snr_range=header["snr_range"])


def _record_dir(out_dir: Path, record: dict) -> Path:
    return out_dir / record["split"] / record["record_id"]


def _generate_one(args):
    record, header, out_dir = args
    out_dir = Path(out_dir)
    result = {"record_id": record["record_id"]}
    try:
        m = render_record(record, header)
    except (FileNotFoundError, AudioFormatError, SampleRateError, SchemaError, MissingRtfError,
            ValueError) as exc:
        result.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return result
    rdir = _record_dir(out_dir, record)
    rdir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for name, data in (("y_om", m.y_om), ("y_im", m.y_im), ("target", m.target)):
        rel = f"{record['split']}/{record['record_id']}/{name}.wav"
        save_wav(AudioBuffer.mono(data, header["sample_rate"], name), out_dir / rel, "float32")
        outputs[name] = {"path": rel, "sha256": checksum(data)}
    result.update(
        status="ok",
        gain=m.gain,
        om_stats={"mean": m.om_stats.mean, "std": m.om_stats.std, "guarded": m.om_stats.guarded},
        im_stats={"mean": m.im_stats.mean, "std": m.im_stats.std, "guarded": m.im_stats.guarded},
        snr_db_achieved=m.snr_db_achieved,
        outputs=outputs,
    )
    return result


RESULT_FIELDS = ("status", "error", "gain", "om_stats", "im_stats", "snr_db_achieved", "outputs")


def generate(manifest: DatasetManifest, out_dir, workers: int = 1) -> dict:
    """Render every record, write ``manifest.json`` and return a report.

    Records whose inputs are missing or unreadable are marked failed; the
    rest are generated. The written manifest does not depend on
    ``workers``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [{k: v for k, v in r.items() if k not in RESULT_FIELDS} for r in manifest.records]
    jobs = [(r, manifest.header, str(out_dir)) for r in records]
    if workers <= 1 or len(jobs) <= 1:
        results = [_generate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))

    failed = []
    for rec, res in zip(records, results):
        assert rec["record_id"] == res["record_id"]
        rec.update({k: res[k] for k in RESULT_FIELDS if k in res})
        if res["status"] != "ok":
            failed.append({"record_id": rec["record_id"], "error": res["error"]})
            log.warning("record %s failed: %s", rec["record_id"], res["error"])
    done = DatasetManifest(dict(manifest.header), records)
    done.write(out_dir / "manifest.json")
    return {
        "n_records": len(records),
        "n_ok": len(records) - len(failed),
        "n_failed": len(failed),
        "failed": failed,
        "manifest": str(out_dir / "manifest.json"),
    }


def verify_outputs(manifest_path) -> list[str]:
    """Record ids whose output files are missing or fail their checksum."""
    manifest = DatasetManifest.read(manifest_path)
    root = Path(manifest_path).parent
    bad = []
    for r in manifest.records:
        if r.get("status") != "ok":
            continue
        for name in OUTPUTS:
            out = r["outputs"][name]
            p = root / out["path"]
            if not p.is_file() or checksum(load_wav(p).samples[0]) != out["sha256"]:
                bad.append(r["record_id"])
                break
    return bad


def evaluate_dataset(manifest_path, metrics: Sequence[str] = ("stoi", "snr")) -> list[dict]:
    """One metrics row per successfully generated record."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    manifest = DatasetManifest.read(manifest_path)
    root = Path(manifest_path).parent
    rows = []
    for r in manifest.records:
        if r.get("status") != "ok":
            continue
        fs = manifest.header["sample_rate"]
        sig = {n: load_wav(root / r["outputs"][n]["path"], expected_rate=fs).samples[0] for n in OUTPUTS}
        row = {"record_id": r["record_id"], "split": r["split"], "snr_db_requested": r["snr_db"],
               "method": r["augmentation"]["method"], "mode": r["augmentation"]["mode"]}
        row.update(evaluate_pair(sig["target"], sig["y_om"], sig["y_im"],
                                 r["om_stats"]["mean"], r["om_stats"]["std"], metrics, fs))
        rows.append(row)
    return rows


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
