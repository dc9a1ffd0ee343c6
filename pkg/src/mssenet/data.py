"""Corpus manifests, the synthetic stand-in corpus, and the feature cache."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import (
    DspConfig,
    MfccMatrix,
    build_mel_filterbank,
    extract_mfcc,
    load_wav,
    read_feature_record,
    write_feature_record,
    write_wav,
)
from .numerics import ConfigurationError, Rng


class ManifestError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ManifestEntry:
    path: str
    label: str
    speaker: str | None = None
    split: str | None = None

    @property
    def utterance_id(self) -> str:
        return str(Path(self.path).with_suffix("").as_posix())


@dataclass
class CorpusManifest:
    name: str
    entries: list[ManifestEntry]
    label_map: dict[str, int]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = sorted(self.label_map.values())
        if ids != list(range(len(ids))):
            raise ManifestError("class ids must be contiguous from 0")
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ManifestError(f"duplicate path {e.path}")
            seen.add(e.path)

    @property
    def n_classes(self) -> int:
        return len(self.label_map)

    @property
    def class_names(self) -> list[str]:
        return sorted(self.label_map, key=self.label_map.get)

    def labels(self) -> np.ndarray:
        return np.array([self.label_map[e.label] for e in self.entries], dtype=np.int64)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def __len__(self):
        return len(self.entries)


def load_manifest(path) -> CorpusManifest:
    """Read a ``path,label[,speaker][,split]`` CSV; relative paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "path" not in header or "label" not in header:
            raise ManifestError(f"{path}:1: header must contain 'path' and 'label', got {header}")
        for row in reader:
            line = reader.line_num
            p = (row.get("path") or "").strip()
            label = (row.get("label") or "").strip()
            if not p:
                raise ManifestError(f"{path}:{line}: empty path")
            if not label:
                raise ManifestError(f"{path}:{line}: empty label")
            if p in seen:
                raise ManifestError(f"{path}:{line}: duplicate path {p!r} (first on line {seen[p]})")
            seen[p] = line
            entries.append(ManifestEntry(p, label, (row.get("speaker") or "").strip() or None,
                                         (row.get("split") or "").strip() or None))
    if not entries:
        raise ManifestError(f"{path}: manifest has no rows")
    label_map = {lab: i for i, lab in enumerate(sorted({e.label for e in entries}))}
    return CorpusManifest(path.stem, entries, label_map, path.parent)


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "speaker"])
        for e in entries:
            w.writerow([e.path, e.label, e.speaker or ""])


# ---------------------------------------------------------------- synthetic corpus

@dataclass
class SyntheticSpec:
    """Recipe for a label-separable toy corpus.

    Class ``k`` is a sine at ``180 + 60k`` Hz with ``2 + k`` Hz vibrato and
    amplitude modulation of depth ``0.1k``; each clip gets small random
    pitch/level jitter and Gaussian noise 30 dB below the tone.
    """

    n_classes: int = 6
    clips_per_class: int = 10
    duration_s: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    vibrato_depth: float = 0.03
    am_rate_hz: float = 3.0
    noise_db: float = -30.0
    pitch_jitter: float = 0.02

    def __post_init__(self):
        if self.n_classes < 1 or self.clips_per_class < 1:
            raise ConfigurationError("need at least one class and one clip per class")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ConfigurationError("duration and sample rate must be positive")

    def recipe(self, k: int) -> dict:
        return {"f0": 180.0 + 60.0 * k, "vibrato_hz": 2.0 + k, "am_depth": min(0.1 * k, 0.9)}


def class_name(k: int) -> str:
    return f"class{k:02d}"


def synthesize_clip(spec: SyntheticSpec, k: int, rng: Rng) -> np.ndarray:
    r = spec.recipe(k)
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    f0 = r["f0"] * (1.0 + rng.uniform((), -spec.pitch_jitter, spec.pitch_jitter))
    vib_phase, am_phase, phase0 = rng.uniform(3, 0.0, 2 * np.pi)
    inst_f = f0 * (1.0 + spec.vibrato_depth * np.sin(2 * np.pi * r["vibrato_hz"] * t + vib_phase))
    phase = phase0 + 2 * np.pi * np.cumsum(inst_f) / spec.sample_rate
    envelope = 1.0 - r["am_depth"] * 0.5 * (1.0 + np.sin(2 * np.pi * spec.am_rate_hz * t + am_phase))
    level = rng.uniform((), 0.3, 0.6)
    tone = level * envelope * np.sin(phase)
    rms = np.sqrt(np.mean(tone ** 2))
    noise = rng.normal(n, rms * 10.0 ** (spec.noise_db / 20.0))
    return np.clip(tone + noise, -1.0, 1.0)


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> Path:
    """Write ``out/<class>/<clip>.wav`` plus ``out/manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    entries = []
    for k in range(spec.n_classes):
        name = class_name(k)
        (out / name).mkdir(exist_ok=True)
        for i in range(spec.clips_per_class):
            rng = Rng(spec.seed * 1_000_003 + k * 10_007 + i)
            rel = f"{name}/{i:04d}.wav"
            write_wav(out / rel, synthesize_clip(spec, k, rng), spec.sample_rate)
            entries.append(ManifestEntry(rel, name, speaker="synthetic"))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


def centroid_self_test(features: list[np.ndarray], labels) -> tuple[float, float]:
    """Nearest-centroid training accuracy on per-clip mean MFCC vectors.

    Returns ``(accuracy, min_pairwise_centroid_distance)``.
    """
    X = np.stack([np.asarray(f, dtype=np.float64).mean(axis=0) for f in features])
    y = np.asarray(labels)
    classes = np.unique(y)
    centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
    d = np.linalg.norm(X[:, None, :] - centroids[None], axis=2)
    acc = float(np.mean(classes[d.argmin(axis=1)] == y))
    cd = np.linalg.norm(centroids[:, None] - centroids[None], axis=2)
    margin = float(cd[~np.eye(len(classes), dtype=bool)].min()) if len(classes) > 1 else 0.0
    return acc, margin


# ---------------------------------------------------------------- features

def extract_features(manifest: CorpusManifest, dsp: DspConfig = DspConfig(), n_jobs: int = 1) -> list[MfccMatrix]:
    """MFCC matrices for every manifest entry, in manifest order."""
    def one(entry: ManifestEntry) -> MfccMatrix:
        u = load_wav(manifest.resolve(entry))
        fb = build_mel_filterbank(u.sample_rate, dsp.n_filters, dsp.fft_size)
        return extract_mfcc(u, fb, dsp, entry.utterance_id)

    if n_jobs == 1:
        return [one(e) for e in manifest.entries]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(e) for e in manifest.entries)


INDEX_NAME = "index.json"


@dataclass
class CacheIndex:
    root: Path
    fingerprint: str
    dsp: dict
    entries: dict[str, dict]

    def __len__(self):
        return len(self.entries)

    def load(self, utterance_id: str) -> MfccMatrix:
        e = self.entries[utterance_id]
        return read_feature_record(self.root / e["file"], utterance_id)


def open_cache(cache_dir, dsp: DspConfig) -> CacheIndex:
    """Open an existing cache, refusing it if it was built with another DSP setup."""
    root = Path(cache_dir)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise FileNotFoundError(f"no feature cache index at {index_path}")
    idx = json.loads(index_path.read_text())
    if idx["fingerprint"] != dsp.fingerprint():
        raise StaleCacheError(
            f"feature cache {root} was built with DSP settings {idx['dsp']} "
            f"(fingerprint {idx['fingerprint']}), current settings give {dsp.fingerprint()}; "
            "delete the cache or re-run extraction into a fresh directory")
    return CacheIndex(root, idx["fingerprint"], idx["dsp"], idx["entries"])


def cache_features(manifest: CorpusManifest, dsp: DspConfig, out_dir, n_jobs: int = 1) -> CacheIndex:
    """Extract every utterance to ``out_dir/features/*.msse`` and write the JSON index.

    Re-running into a cache made with the same settings is a no-op; a cache
    made with different settings raises :class:`StaleCacheError`.
    """
    root = Path(out_dir)
    if (root / INDEX_NAME).is_file():
        idx = open_cache(root, dsp)
        if set(idx.entries) == {e.utterance_id for e in manifest.entries}:
            return idx
    feats = extract_features(manifest, dsp, n_jobs)
    (root / "features").mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (entry, m) in enumerate(zip(manifest.entries, feats)):
        rel = f"features/{i:06d}.msse"
        write_feature_record(root / rel, m)
        entries[entry.utterance_id] = {
            "file": rel,
            "label": entry.label,
            "source_path": str(manifest.resolve(entry)),
            "n_frames": m.n_frames,
        }
    index = {"fingerprint": dsp.fingerprint(), "dsp": dsp.to_dict(), "entries": entries}
    (root / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True))
    return CacheIndex(root, index["fingerprint"], index["dsp"], entries)


def load_features(manifest: CorpusManifest, dsp: DspConfig = DspConfig(), cache_dir=None,
                  n_jobs: int = 1) -> list[np.ndarray]:
    """``[T, 39]`` arrays for the manifest, through the cache when one is given."""
    if cache_dir is None:
        return [m.coeffs for m in extract_features(manifest, dsp, n_jobs)]
    idx = cache_features(manifest, dsp, cache_dir, n_jobs)
    missing = [e.utterance_id for e in manifest.entries if e.utterance_id not in idx.entries]
    if missing:
        raise StaleCacheError(f"feature cache lacks {len(missing)} manifest entries, e.g. {missing[0]}")
    return [idx.load(e.utterance_id).coeffs for e in manifest.entries]
