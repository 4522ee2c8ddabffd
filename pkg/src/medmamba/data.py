"""Recording ingestion, windowing, normalization, subject-independent
splits, and synthetic task generators.

On-disk formats: a JSONL manifest with one object per recording
({"path", "subject", "label", "sample_rate_hz"}) pointing at headerless
CSV files (one row per timestep, one column per channel); generated
datasets add a ``meta.json`` with the generator parameters.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .numerics import Rng


@dataclass
class Recording:
    """One multichannel recording: values [T, C] plus metadata."""
    values: np.ndarray
    sample_rate_hz: float
    subject_id: str
    label: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"recording values must be [T, C] with T >= 1, "
                            f"got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"recording {self.subject_id!r} contains non-finite values")
        if self.label < 0:
            raise DataError(f"recording {self.subject_id!r} has negative label")


@dataclass
class WindowSet:
    """Fixed-length windows [Nw, L, C] with labels and subject ids.

    ``mean``/``std`` are the per-channel statistics that produced the
    current values (None before normalization).
    """
    windows: np.ndarray
    labels: np.ndarray
    subjects: list[str]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self) -> int:
        return self.windows.shape[0]

    def subset(self, subject_ids) -> "WindowSet":
        wanted = set(subject_ids)
        idx = [i for i, s in enumerate(self.subjects) if s in wanted]
        return WindowSet(self.windows[idx], self.labels[idx],
                         [self.subjects[i] for i in idx], self.mean, self.std)


@dataclass
class Split:
    """Disjoint subject-id sets covering the dataset."""
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def part(self, name: str) -> tuple[str, ...]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise DataError(f"unknown split part {name!r}") from None


# ---------------------------------------------------------------------------
# ingestion

def _read_recording_csv(path: Path) -> np.ndarray:
    rows = []
    width = None
    try:
        with open(path, newline="") as f:
            for lineno, row in enumerate(csv.reader(f), 1):
                if not row:
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise DataError(f"{path}:{lineno}: ragged row "
                                    f"({len(row)} cells, expected {width})")
                try:
                    rows.append([float(cell) for cell in row])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric cell") from None
    except OSError as exc:
        raise DataError(f"{path}: cannot read recording: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty recording")
    return np.asarray(rows, dtype=np.float64)


def load_recordings(manifest_path: str | Path,
                    num_classes: int | None = None) -> list[Recording]:
    """Parse a JSONL manifest and its CSV recordings, in manifest order."""
    manifest_path = Path(manifest_path)
    recordings: list[Recording] = []
    try:
        lines = manifest_path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{manifest_path}: cannot read manifest: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            rel, subject = entry["path"], str(entry["subject"])
            label = int(entry["label"])
            rate = float(entry.get("sample_rate_hz", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{manifest_path}:{lineno}: bad manifest entry: {exc}") from exc
        if num_classes is not None and not 0 <= label < num_classes:
            raise DataError(f"{manifest_path}:{lineno}: label {label} outside "
                            f"[0, {num_classes})")
        csv_path = Path(rel)
        if not csv_path.is_absolute():
            csv_path = manifest_path.parent / csv_path
        values = _read_recording_csv(csv_path)
        recordings.append(Recording(values, rate, subject, label))
    if not recordings:
        raise DataError(f"{manifest_path}: empty manifest")
    return recordings


# ---------------------------------------------------------------------------
# windowing / normalization

def window(rec: Recording, length: int, hop: int) -> list[np.ndarray]:
    """Windows starting at 0, hop, 2*hop, ...; a trailing remainder shorter
    than ``length`` is dropped. Too-short recordings yield none (warned)."""
    if hop < 1:
        raise ValueError("hop must be >= 1")
    t = rec.values.shape[0]
    if length > t:
        warnings.warn(f"recording {rec.subject_id!r}: length {t} shorter than "
                      f"window {length}; no windows produced", stacklevel=2)
        return []
    return [rec.values[start:start + length]
            for start in range(0, t - length + 1, hop)]


def build_windows(recordings: list[Recording], length: int, hop: int) -> WindowSet:
    ws, labels, subjects = [], [], []
    for rec in recordings:
        for w in window(rec, length, hop):
            ws.append(w)
            labels.append(rec.label)
            subjects.append(rec.subject_id)
    if not ws:
        raise DataError(f"no windows of length {length} could be cut")
    return WindowSet(np.stack(ws), np.asarray(labels, dtype=np.int64), subjects)


STD_FLOOR = 1e-8


def channel_stats(ws: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all windows and timesteps."""
    flat = ws.windows.reshape(-1, ws.windows.shape[-1])
    return flat.mean(axis=0), flat.std(axis=0)


def zscore(ws: WindowSet, stats_from: WindowSet) -> WindowSet:
    """Normalize per channel with statistics computed on ``stats_from``
    (the training split) only; constant channels map to zero."""
    if len(stats_from) == 0:
        raise DataError("zscore: the statistics split is empty")
    mean, std = channel_stats(stats_from)
    std = np.maximum(std, STD_FLOOR)
    return WindowSet((ws.windows - mean) / std, ws.labels, list(ws.subjects),
                     mean=mean, std=std)


def apply_stats(ws: WindowSet, mean: np.ndarray, std: np.ndarray) -> WindowSet:
    std = np.maximum(np.asarray(std, dtype=np.float64), STD_FLOOR)
    return WindowSet((ws.windows - mean) / std, ws.labels, list(ws.subjects),
                     mean=np.asarray(mean, dtype=np.float64), std=std)


# ---------------------------------------------------------------------------
# subject-independent splits

def _allocate(count: int, fractions: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment of ``count`` items."""
    raw = [count * f for f in fractions]
    base = [int(np.floor(v)) for v in raw]
    rest = count - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def subject_split(recordings: list[Recording],
                  fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  seed: int = 41, stratify_by_class: bool = True) -> Split:
    """Deterministic train/val/test partition of subject ids.

    Stratification groups subjects by their majority label (lowest label on
    ties) and apportions each group by the fractions; no subject appears in
    two parts.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    by_subject: dict[str, list[int]] = {}
    for rec in recordings:
        by_subject.setdefault(rec.subject_id, []).append(rec.label)
    subjects = sorted(by_subject)
    if len(subjects) < len(fractions):
        raise DataError(f"need at least {len(fractions)} subjects to split, "
                        f"got {len(subjects)}")

    def majority(labels: list[int]) -> int:
        vals, counts = np.unique(labels, return_counts=True)
        return int(vals[np.argmax(counts)])

    groups: dict[int, list[str]] = {}
    if stratify_by_class:
        for s in subjects:
            groups.setdefault(majority(by_subject[s]), []).append(s)
    else:
        groups[0] = list(subjects)

    rng = Rng(seed).split("subject_split")
    parts: tuple[list[str], list[str], list[str]] = ([], [], [])
    for key in sorted(groups):
        members = groups[key]
        perm = rng.split("class", key).permutation(len(members))
        shuffled = [members[i] for i in perm]
        sizes = _allocate(len(members), fractions)
        at = 0
        for part, size in zip(parts, sizes):
            part.extend(shuffled[at:at + size])
            at += size
    return Split(tuple(sorted(parts[0])), tuple(sorted(parts[1])),
                 tuple(sorted(parts[2])))


# ---------------------------------------------------------------------------
# synthetic tasks

@dataclass
class SynthDataset:
    recordings: list[Recording]
    meta: dict = field(default_factory=dict)


def synth_centralized(n_subjects: int, channels: int, length: int,
                      snr: float = 4.0, seed: int = 41,
                      windows_per_subject: int = 4) -> SynthDataset:
    """Two-class task where one channel carries all the evidence.

    The informative channel (index 0, recorded in the metadata) adds a
    class-dependent oscillation (4 cycles per window for class 0, 7 for
    class 1, random phase per subject) on top of unit Gaussian noise that
    fills every channel; the oscillation amplitude is sqrt(2 * snr).
    """
    if channels < 2:
        raise DataError("synth_centralized: need at least two channels")
    rng = Rng(seed).split("synth_centralized")
    amp = float(np.sqrt(2.0 * snr))
    t_total = windows_per_subject * length
    t_idx = np.arange(t_total)
    cycles = (4.0, 7.0)
    recordings = []
    for i in range(n_subjects):
        label = i % 2
        sub_rng = rng.split("subject", i)
        values = sub_rng.normal((t_total, channels))
        phase = sub_rng.uniform(0.0, 2.0 * np.pi)
        values[:, 0] += amp * np.sin(2.0 * np.pi * cycles[label] * t_idx / length + phase)
        recordings.append(Recording(values, 1.0, f"s{i:03d}", label))
    meta = {"kind": "centralized", "n_subjects": n_subjects, "channels": channels,
            "length": length, "snr": snr, "seed": seed,
            "windows_per_subject": windows_per_subject,
            "informative_channel": 0, "classes": 2,
            "cycles_per_window": list(cycles)}
    return SynthDataset(recordings, meta)


# Zero-sum burst inserted for the fast factor; averaging pools it away
# while any 5-sample high-pass keeps it.
BURST_PATTERN = np.array([1.0, -2.0, 2.0, -2.0, 1.0])


def synth_multiscale(n_subjects: int, channels: int, length: int, seed: int = 41,
                     windows_per_subject: int = 4, burst_amp: float = 1.5,
                     drift_amp: float = 1.2, bursts_per_window: int = 6,
                     noise_std: float = 1.0) -> SynthDataset:
    """Four-class task crossing a fast factor with a slow factor.

    Fast: presence of zero-sum 5-sample spike bursts. Slow: the sign of a
    linear drift spanning each window. label = 2 * slow + fast; both
    factors are written into every channel plus independent noise, so no
    single temporal resolution suffices.
    """
    if length < 100:
        raise DataError("synth_multiscale: window length must be >= 100")
    rng = Rng(seed).split("synth_multiscale")
    t_total = windows_per_subject * length
    ramp = np.tile((np.arange(length) / length) - 0.5, windows_per_subject)
    recordings = []
    for i in range(n_subjects):
        fast, slow = i % 2, (i // 2) % 2
        label = 2 * slow + fast
        sub_rng = rng.split("subject", i)
        base = np.zeros(t_total)
        base += (1.0 if slow else -1.0) * drift_amp * ramp
        if fast:
            for w in range(windows_per_subject):
                starts = sub_rng.split("bursts", w).integers(
                    0, length - len(BURST_PATTERN), (bursts_per_window,))
                for st in np.asarray(starts).reshape(-1):
                    lo = w * length + int(st)
                    base[lo:lo + len(BURST_PATTERN)] += burst_amp * BURST_PATTERN
        values = base[:, None] + sub_rng.normal((t_total, channels), noise_std)
        recordings.append(Recording(values, 1.0, f"s{i:03d}", label))
    meta = {"kind": "multiscale", "n_subjects": n_subjects, "channels": channels,
            "length": length, "seed": seed, "windows_per_subject": windows_per_subject,
            "burst_amp": burst_amp, "drift_amp": drift_amp,
            "bursts_per_window": bursts_per_window, "noise_std": noise_std,
            "classes": 4, "label_rule": "2*slow + fast"}
    return SynthDataset(recordings, meta)


# ---------------------------------------------------------------------------
# dataset writing

def write_dataset(ds: SynthDataset, out_dir: str | Path) -> Path:
    """Write recordings as CSVs plus manifest.jsonl and meta.json; returns
    the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as mf:
        for idx, rec in enumerate(ds.recordings):
            name = f"rec{idx:04d}.csv"
            np.savetxt(out / name, rec.values, fmt="%.17g", delimiter=",")
            mf.write(json.dumps({"path": name, "subject": rec.subject_id,
                                 "label": int(rec.label),
                                 "sample_rate_hz": rec.sample_rate_hz},
                                sort_keys=True) + "\n")
    (out / "meta.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")
    return manifest
