"""Waveform representation, limb-lead derivation, filtering and truncation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
from scipy import signal as sps

from .errors import ArgumentError, DerivationError, FilterDesignError, IngestError, LengthError

LIMB_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF")
PRECORDIAL_LEADS = ("V1", "V2", "V3", "V4", "V5", "V6")
ALL_LEADS = LIMB_LEADS + PRECORDIAL_LEADS
# Leads that must be measured; the other four limb leads are derived.
MEASURED_LEADS = ("I", "II") + PRECORDIAL_LEADS


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EcgRecord:
    """A patient-keyed multi-lead ECG.

    Lead arrays are stored as read-only float64 millivolt arrays in
    canonical lead order, so two records built from the same data compare
    and serialize identically.
    """

    record_id: str
    patient_id: str
    sampling_rate_hz: int
    leads: Mapping[str, np.ndarray]
    label: Optional[int] = None
    acquired_at: Optional[str] = None

    def __post_init__(self):
        if int(self.sampling_rate_hz) <= 0:
            raise ArgumentError(f"sampling rate must be positive, got {self.sampling_rate_hz}")
        unknown = set(self.leads) - set(ALL_LEADS)
        if unknown:
            raise IngestError(f"unknown lead names: {sorted(unknown)}")
        leads = {name: _frozen(self.leads[name]) for name in ALL_LEADS if name in self.leads}
        lengths = {a.shape for a in leads.values()}
        if len(lengths) > 1 or any(len(s) != 1 for s in lengths):
            raise IngestError(f"record {self.record_id}: lead arrays must be 1-D and of equal length")
        if self.label is not None and self.label not in (0, 1):
            raise ArgumentError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "sampling_rate_hz", int(self.sampling_rate_hz))

    @property
    def n_samples(self) -> int:
        return next(iter(self.leads.values())).shape[0] if self.leads else 0

    def with_leads(self, leads: Mapping[str, np.ndarray]) -> "EcgRecord":
        return replace(self, leads=dict(leads))

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.patient_id == other.patient_id
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.label == other.label
            and self.acquired_at == other.acquired_at
            and list(self.leads) == list(other.leads)
            and all(np.array_equal(self.leads[k], other.leads[k]) for k in self.leads)
        )

    __hash__ = None


@dataclass(frozen=True)
class FilterSpec:
    low_cut_hz: float = 0.5
    high_cut_hz: float = 40.0
    butterworth_order: int = 3
    median_kernel_samples: int = 5
    # Off: the median filter smooths. On: its output is treated as a
    # baseline estimate and subtracted.
    median_as_baseline: bool = False
    # Mirrored samples added at each end before forward-backward filtering.
    # None extends by one period of the low cut-off, which lets the
    # high-pass transient settle outside the kept signal.
    edge_pad_samples: Optional[int] = None

    def __post_init__(self):
        if self.butterworth_order < 1:
            raise ArgumentError("butterworth_order must be positive")
        if self.median_kernel_samples < 1 or self.median_kernel_samples % 2 == 0:
            raise ArgumentError("median_kernel_samples must be an odd positive integer")
        if self.edge_pad_samples is not None and self.edge_pad_samples < 0:
            raise ArgumentError("edge_pad_samples must be non-negative")
        if not 0 < self.low_cut_hz < self.high_cut_hz:
            raise FilterDesignError(
                f"need 0 < low_cut ({self.low_cut_hz}) < high_cut ({self.high_cut_hz})"
            )


def derive_limb_leads(record: EcgRecord) -> EcgRecord:
    """Add III, aVR, aVL and aVF computed from leads I and II."""
    missing = [name for name in ("I", "II") if name not in record.leads]
    if missing:
        raise DerivationError(f"record {record.record_id}: cannot derive limb leads without {missing}")
    lead_i = record.leads["I"]
    lead_ii = record.leads["II"]
    leads = dict(record.leads)
    leads["III"] = lead_ii - lead_i
    leads["aVR"] = -(lead_i + lead_ii) / 2.0
    leads["aVL"] = lead_i - lead_ii / 2.0
    leads["aVF"] = lead_ii - lead_i / 2.0
    return record.with_leads(leads)


def design_bandpass(rate_hz: int, spec: FilterSpec) -> np.ndarray:
    """Second-order sections of the digital Butterworth bandpass."""
    nyquist = rate_hz / 2.0
    if not 0 < spec.low_cut_hz < spec.high_cut_hz < nyquist:
        raise FilterDesignError(
            f"band ({spec.low_cut_hz}, {spec.high_cut_hz}) Hz must lie inside (0, {nyquist}) Hz"
        )
    return sps.butter(
        spec.butterworth_order, [spec.low_cut_hz, spec.high_cut_hz], btype="bandpass", fs=rate_hz, output="sos"
    )


def bandpass_filter(samples, rate_hz: int, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase Butterworth bandpass (forward-backward application).

    The signal is extended by mirrored samples at each end before filtering
    (``spec.edge_pad_samples``, by default one period of the low cut-off,
    capped at the signal length); the extension is discarded afterwards.
    """
    x = np.asarray(samples, dtype=np.float64)
    sos = design_bandpass(rate_hz, spec)
    min_len = 3 * spec.butterworth_order
    if x.ndim != 1 or x.shape[0] < min_len:
        raise ArgumentError(f"need a 1-D array of at least {min_len} samples, got shape {x.shape}")
    pad = spec.edge_pad_samples
    if pad is None:
        pad = math.ceil(rate_hz / spec.low_cut_hz)
    return sps.sosfiltfilt(sos, x, padtype="even", padlen=min(pad, x.shape[0] - 1))


def median_filter(samples, kernel: int) -> np.ndarray:
    """Running median with windows shrunk symmetrically at the edges."""
    x = np.asarray(samples, dtype=np.float64)
    if kernel < 1 or kernel % 2 == 0:
        raise ArgumentError(f"median kernel must be odd and positive, got {kernel}")
    n = x.shape[0]
    if kernel > n:
        raise ArgumentError(f"kernel {kernel} longer than signal ({n} samples)")
    half = kernel // 2
    out = np.empty_like(x)
    if n >= kernel:
        windows = np.lib.stride_tricks.sliding_window_view(x, kernel)
        out[half : n - half] = np.median(windows, axis=1)
    for i in list(range(min(half, n))) + list(range(max(n - half, half), n)):
        h = min(i, n - 1 - i, half)
        out[i] = np.median(x[i - h : i + h + 1])
    return out


def truncate(record: EcgRecord, target_samples: int = 2500) -> EcgRecord:
    """Keep the leading ``target_samples`` of every lead."""
    short = {k: v.shape[0] for k, v in record.leads.items() if v.shape[0] < target_samples}
    if short:
        raise LengthError(f"record {record.record_id}: leads shorter than {target_samples}: {short}")
    if record.n_samples == target_samples:
        return record
    return record.with_leads({k: v[:target_samples] for k, v in record.leads.items()})


def _median_stage(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    smoothed = median_filter(x, spec.median_kernel_samples)
    return x - smoothed if spec.median_as_baseline else smoothed


def preprocess(record: EcgRecord, spec: FilterSpec = FilterSpec(), target_samples: int = 2500) -> EcgRecord:
    """Derive limb leads, bandpass, median filter, then truncate."""
    missing = [name for name in MEASURED_LEADS if name not in record.leads]
    if missing:
        raise IngestError(f"record {record.record_id}: missing required leads {missing}")
    derived = derive_limb_leads(record)
    filtered = {
        name: _median_stage(bandpass_filter(x, derived.sampling_rate_hz, spec), spec)
        for name, x in derived.leads.items()
    }
    return truncate(derived.with_leads(filtered), target_samples)
