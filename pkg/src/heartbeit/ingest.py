"""Waveform files, label tables, patient-grouped splits and the synthetic corpus.

Canonical ECG XML::

    <ecg record_id=".." patient_id=".." rate_hz="500">
      <lead name="I" gain_mv_per_unit="0.005" n="5000">BASE64</lead>
      ...
    </ecg>

Lead text is base64 of ``n`` little-endian signed 16-bit integers; the
value in millivolts is ``raw * gain_mv_per_unit``.
"""

from __future__ import annotations

import base64
import binascii
import csv
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, LabelError, ParseError, SchemaError, SplitError
from .signal import ALL_LEADS, MEASURED_LEADS, PRECORDIAL_LEADS, EcgRecord

DEFAULT_FRACTIONS = (0.01, 0.10, 0.25, 0.50, 1.00)
DEFAULT_GAIN = 0.005


# --------------------------------------------------------------------------
# XML waveform files
# --------------------------------------------------------------------------


def parse_ecg_xml(path) -> EcgRecord:
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if root.tag != "ecg":
        raise ParseError(f"{path}: root element is <{root.tag}>, expected <ecg>")
    try:
        record_id = root.attrib["record_id"]
        patient_id = root.attrib["patient_id"]
        rate = int(root.attrib["rate_hz"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: bad <ecg> attributes: {exc}") from exc

    leads: Dict[str, np.ndarray] = {}
    for el in root.findall("lead"):
        name = el.attrib.get("name")
        if name not in ALL_LEADS:
            raise SchemaError(f"{path}: unknown lead name {name!r}")
        if name in leads:
            raise SchemaError(f"{path}: lead {name} declared twice")
        try:
            gain = float(el.attrib["gain_mv_per_unit"])
            n = int(el.attrib["n"])
            raw = base64.b64decode((el.text or "").strip(), validate=True)
        except (KeyError, ValueError, binascii.Error) as exc:
            raise ParseError(f"{path}: lead {name}: {exc}") from exc
        if len(raw) != 2 * n:
            raise SchemaError(f"{path}: lead {name} declares n={n} but carries {len(raw) // 2} samples")
        leads[name] = np.frombuffer(raw, dtype="<i2").astype(np.float64) * gain
    if not leads:
        raise SchemaError(f"{path}: no leads")
    lengths = {k: v.shape[0] for k, v in leads.items()}
    if len(set(lengths.values())) != 1:
        raise SchemaError(f"{path}: sample counts differ across leads: {lengths}")
    return EcgRecord(record_id=record_id, patient_id=patient_id, sampling_rate_hz=rate, leads=leads)


def encode_ecg_xml(record: EcgRecord, gain_mv_per_unit: float = DEFAULT_GAIN) -> bytes:
    root = ET.Element(
        "ecg",
        {"record_id": record.record_id, "patient_id": record.patient_id, "rate_hz": str(record.sampling_rate_hz)},
    )
    root.text = "\n  "
    items = list(record.leads.items())
    for i, (name, x) in enumerate(items):
        raw = np.rint(x / gain_mv_per_unit)
        if raw.size and (raw.min() < -32768 or raw.max() > 32767):
            raise ArgumentError(f"lead {name} exceeds the 16-bit range at gain {gain_mv_per_unit}")
        el = ET.SubElement(root, "lead", {"name": name, "gain_mv_per_unit": repr(gain_mv_per_unit), "n": str(x.shape[0])})
        el.text = base64.b64encode(raw.astype("<i2").tobytes()).decode("ascii")
        el.tail = "\n" if i == len(items) - 1 else "\n  "
    return b'<?xml version="1.0" encoding="utf-8"?>\n' + ET.tostring(root, encoding="utf-8") + b"\n"


def write_ecg_xml(record: EcgRecord, path, gain_mv_per_unit: float = DEFAULT_GAIN) -> None:
    Path(path).write_bytes(encode_ecg_xml(record, gain_mv_per_unit))


# --------------------------------------------------------------------------
# Labels and manifests
# --------------------------------------------------------------------------


def _parse_label(value: str, where: str) -> int:
    if value.strip() not in ("0", "1"):
        raise LabelError(f"{where}: label must be 0 or 1, got {value!r}")
    return int(value)


def load_labels(path) -> Dict[str, int]:
    labels: Dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"record_id", "label"} <= set(reader.fieldnames):
            raise LabelError(f"{path}: expected header record_id,label")
        for lineno, row in enumerate(reader, start=2):
            rid = row["record_id"]
            if rid in labels:
                raise LabelError(f"{path}:{lineno}: duplicate record_id {rid!r}")
            labels[rid] = _parse_label(row["label"], f"{path}:{lineno}")
    return labels


@dataclass(frozen=True)
class ManifestEntry:
    record_id: str
    patient_id: str
    waveform_path: str
    label: Optional[int] = None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    source_tag: str = ""
    root: Optional[Path] = None  # relative waveform paths resolve against this

    def __post_init__(self):
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise SchemaError("manifest record_ids are not unique")
        for e in self.entries:
            if e.label is not None and e.label not in (0, 1):
                raise LabelError(f"manifest: record {e.record_id} has non-binary label {e.label!r}")

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.waveform_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def labels(self) -> Dict[str, int]:
        return {e.record_id: e.label for e in self.entries if e.label is not None}

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {e.record_id: e for e in self.entries}


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "patient_id", "path", "label"])
        for e in manifest.entries:
            w.writerow([e.record_id, e.patient_id, e.waveform_path, "" if e.label is None else e.label])


def read_manifest(path, source_tag: str = "") -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"record_id", "patient_id", "path", "label"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{path}: expected header record_id,patient_id,path,label")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"].strip()
            entries.append(
                ManifestEntry(
                    row["record_id"],
                    row["patient_id"],
                    row["path"],
                    _parse_label(label, f"{path}:{lineno}") if label else None,
                )
            )
    return DatasetManifest(entries, source_tag=source_tag or path.stem, root=path.parent)


# --------------------------------------------------------------------------
# Patient-grouped splitting
# --------------------------------------------------------------------------


def _ceil_count(fraction: float, n: int) -> int:
    # round first so that e.g. 0.1 * 1600 = 160.00000000000003 is not bumped to 161
    return math.ceil(round(fraction * n, 9))


@dataclass
class SplitPlan:
    seed: int
    test_fraction: float
    fractions: List[float]
    train_ids_by_fraction: Dict[float, List[str]]
    test_ids: List[str]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "fractions": list(self.fractions),
            "train_ids_by_fraction": {repr(f): ids for f, ids in self.train_ids_by_fraction.items()},
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            seed=d["seed"],
            test_fraction=d["test_fraction"],
            fractions=[float(f) for f in d["fractions"]],
            train_ids_by_fraction={float(k): list(v) for k, v in d["train_ids_by_fraction"].items()},
            test_ids=list(d["test_ids"]),
        )


def group_shuffle_split(
    manifest: DatasetManifest,
    seed: int,
    test_fraction: float = 0.2,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> SplitPlan:
    """Split by patient, then nest the training fractions.

    Patients are shuffled once; the first ``ceil(test_fraction * P)`` form
    the test pool and each training fraction takes a prefix of the rest,
    so smaller fractions are always subsets of larger ones.
    """
    if not 0 < test_fraction < 1:
        raise ArgumentError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    fractions = sorted(float(f) for f in fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ArgumentError(f"fractions must lie in (0, 1], got {fractions}")
    patients = sorted({e.patient_id for e in manifest.entries})
    if len(patients) < 2:
        raise SplitError(f"need at least 2 distinct patients to split, got {len(patients)}")

    order = [patients[i] for i in np.random.default_rng(seed).permutation(len(patients))]
    n_test = _ceil_count(test_fraction, len(patients))
    if n_test >= len(patients):
        raise SplitError(f"test_fraction {test_fraction} leaves no training patients")
    test_patients, train_patients = set(order[:n_test]), order[n_test:]

    records_by_patient: Dict[str, List[str]] = {}
    for e in manifest.entries:
        records_by_patient.setdefault(e.patient_id, []).append(e.record_id)

    by_fraction = {}
    for f in fractions:
        chosen = train_patients[: _ceil_count(f, len(train_patients))]
        by_fraction[f] = [rid for p in chosen for rid in records_by_patient[p]]
    test_ids = [e.record_id for e in manifest.entries if e.patient_id in test_patients]
    return SplitPlan(seed, test_fraction, fractions, by_fraction, test_ids)


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

SYNTH_RATE_HZ = 500
SYNTH_SECONDS = 10
ST_LEADS = ("V1", "V2", "V3", "V4")
ST_OFFSET_S = 0.040
ST_DURATION_S = 0.080
ST_ELEVATION_MV = 0.2

# Per-lead wave amplitudes (mV) for P, Q, R, S, T.
_TEMPLATE = {
    "I": (0.10, -0.05, 0.80, -0.10, 0.25),
    "II": (0.15, -0.05, 1.10, -0.15, 0.30),
    "V1": (0.08, 0.00, 0.35, -0.90, 0.10),
    "V2": (0.08, 0.00, 0.60, -1.10, 0.35),
    "V3": (0.08, -0.05, 0.90, -0.70, 0.35),
    "V4": (0.08, -0.08, 1.20, -0.40, 0.30),
    "V5": (0.08, -0.08, 1.10, -0.25, 0.25),
    "V6": (0.08, -0.05, 0.90, -0.15, 0.20),
}
# (offset from R in s, gaussian width in s) for P, Q, R, S, T
_WAVES = ((-0.18, 0.022), (-0.028, 0.008), (0.0, 0.010), (0.030, 0.010), (0.300, 0.045))


@dataclass(frozen=True)
class SyntheticRecord:
    record: EcgRecord
    r_peaks: np.ndarray  # sample indices of QRS peaks


def synthesize_record(index: int, label: int, seed: int, noise_mv: float = 0.05) -> SyntheticRecord:
    """One synthetic 8-lead ECG; a pure function of (index, label, seed)."""
    rng = np.random.default_rng([seed, index])
    n = SYNTH_RATE_HZ * SYNTH_SECONDS
    t = np.arange(n) / SYNTH_RATE_HZ
    rr = 60.0 / rng.uniform(50.0, 100.0)
    r_times = np.arange(rng.uniform(0.25, 0.25 + rr), SYNTH_SECONDS - 0.2, rr)
    r_peaks = np.rint(r_times * SYNTH_RATE_HZ).astype(np.int64)
    # T wave moves closer to the QRS at higher rates
    t_shift = 0.300 * math.sqrt(rr) - 0.300
    st_lo = int(round(ST_OFFSET_S * SYNTH_RATE_HZ))
    st_hi = st_lo + int(round(ST_DURATION_S * SYNTH_RATE_HZ))

    global_gain = rng.uniform(0.7, 1.3)
    leads = {}
    for name in MEASURED_LEADS:
        amps = np.array(_TEMPLATE[name]) * global_gain * (1.0 + 0.15 * rng.standard_normal(5))
        amps[4] *= rng.uniform(0.6, 1.4)  # T-wave amplitude varies more than QRS
        x = np.zeros(n)
        for r in r_times:
            for (offset, width), a in zip(_WAVES, amps):
                centre = r + offset + (t_shift if offset > 0.1 else 0.0)
                lo, hi = np.searchsorted(t, [centre - 5 * width, centre + 5 * width])
                x[lo:hi] += a * np.exp(-0.5 * ((t[lo:hi] - centre) / width) ** 2)
        if label == 1 and name in ST_LEADS:
            for r in r_peaks:
                x[r + st_lo : r + st_hi] += ST_ELEVATION_MV
        wander = rng.uniform(0.05, 0.2) * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 2 * np.pi))
        x += wander + noise_mv * rng.standard_normal(n)
        leads[name] = x
    rid = f"syn{index:06d}"
    record = EcgRecord(rid, f"pt{index:06d}", SYNTH_RATE_HZ, leads, label=int(label))
    return SyntheticRecord(record, r_peaks)


def synthesize_corpus(
    n_records: int,
    positive_rate: float,
    seed: int,
    out_dir,
    noise_mv: float = 0.05,
) -> DatasetManifest:
    """Write a synthetic labeled corpus and return its manifest.

    Files written under ``out_dir``: ``records/<id>.xml``, ``manifest.csv``,
    ``labels.csv`` and ``annotations.csv`` (QRS peak sample indices).
    Exactly ``round(n_records * positive_rate)`` records are positive.
    """
    if n_records < 2:
        raise ArgumentError(f"n_records must be >= 2, got {n_records}")
    if not 0 < positive_rate < 1:
        raise ArgumentError(f"positive_rate must lie in (0, 1), got {positive_rate}")
    out_dir = Path(out_dir)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    n_pos = int(round(n_records * positive_rate))
    labels = np.zeros(n_records, dtype=np.int64)
    labels[:n_pos] = 1
    labels = np.random.default_rng(seed).permutation(labels)

    entries, annotations = [], []
    for i in range(n_records):
        syn = synthesize_record(i, int(labels[i]), seed, noise_mv=noise_mv)
        rel = f"records/{syn.record.record_id}.xml"
        write_ecg_xml(syn.record, out_dir / rel)
        entries.append(ManifestEntry(syn.record.record_id, syn.record.patient_id, rel, int(labels[i])))
        annotations.append((syn.record.record_id, " ".join(str(int(r)) for r in syn.r_peaks)))

    manifest = DatasetManifest(entries, source_tag=f"synthetic-{seed}", root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "label"])
        w.writerows((e.record_id, e.label) for e in entries)
    with open(out_dir / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "r_peaks"])
        w.writerows(annotations)
    return manifest


def read_annotations(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        return {
            row["record_id"]: np.array([int(v) for v in row["r_peaks"].split()], dtype=np.int64)
            for row in csv.DictReader(fh)
        }


def st_windows(r_peaks: Iterable[int], rate_hz: int = SYNTH_RATE_HZ) -> List[Tuple[int, int]]:
    """Sample ranges ``[start, stop)`` of the injected ST elevation."""
    lo = int(round(ST_OFFSET_S * rate_hz))
    hi = lo + int(round(ST_DURATION_S * rate_hz))
    return [(int(r) + lo, int(r) + hi) for r in r_peaks]
