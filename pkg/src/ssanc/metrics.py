"""Speech distortion, noise reduction and SNR improvement at the eardrum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import Signal, ThirdOctaveBands, load_band_importance, third_octave_power, welch_psd
from .errors import InvalidArgument

SD_FLOOR_DB = -100.0
CAP_DB = 300.0
# bands whose reference power is below this fraction of the total are dropped
SILENT_BAND_FRACTION = 1e-12


@dataclass(frozen=True)
class MetricReport:
    sd_db: float
    nr_db: float
    dsnr_db: float
    band_breakdown: np.ndarray
    n_samples: int
    flags: tuple[str, ...] = field(default=())


def _check_pair(a: Signal, b: Signal) -> None:
    if len(a) != len(b):
        raise InvalidArgument(f"signal lengths differ ({len(a)} vs {len(b)})")
    if a.sample_rate_hz != b.sample_rate_hz:
        raise InvalidArgument("sample rates differ")


def _level_db(energy: float) -> float:
    return 10.0 * math.log10(energy) if energy > 0 else -CAP_DB


def speech_distortion(
    e_s: Signal,
    target: Signal,
    bands: ThirdOctaveBands | None = None,
    segment_len: int = 512,
    overlap_fraction: float = 0.5,
) -> tuple[float, np.ndarray, tuple[str, ...]]:
    """Band-importance weighted log ratio of error PSD to target PSD.

    Returns ``(sd_db, per_band_db, flags)``. Bands above Nyquist are truncated
    there; bands where the target is silent are excluded (entry NaN) and the
    remaining weights renormalised. Each band ratio is floored at -100 dB.
    """
    _check_pair(e_s, target)
    if not np.any(target.samples):
        raise InvalidArgument("target speech is silent")
    bands = load_band_importance() if bands is None else bands
    bands = bands.clipped(target.sample_rate_hz / 2)
    eps = Signal(e_s.samples - target.samples, e_s.sample_rate_hz)
    p_eps = third_octave_power(welch_psd(eps, segment_len, overlap_fraction), bands)
    ref_psd = welch_psd(target, segment_len, overlap_fraction)
    p_ref = third_octave_power(ref_psd, bands)
    flags: list[str] = []
    active = p_ref > SILENT_BAND_FRACTION * ref_psd.total_power()
    if not np.any(active):
        raise InvalidArgument("target speech is silent in every band")
    if not np.all(active):
        flags.append("silent_bands")
    ratio_db = np.full(len(bands), np.nan)
    with np.errstate(divide="ignore"):
        ratio = np.where(active, p_eps / np.where(active, p_ref, 1.0), 0.0)
        ratio_db[active] = np.maximum(10.0 * np.log10(ratio[active]), SD_FLOOR_DB)
    if np.all(ratio_db[active] <= SD_FLOOR_DB):
        flags.append("sd_floor")
    weights = bands.importance[active] / bands.importance[active].sum()
    sd = float(np.dot(weights, ratio_db[active]))
    return sd, ratio_db, tuple(flags)


def noise_reduction(p_v: Signal, e_v: Signal) -> float:
    """``10 log10 sum p_v^2 - 10 log10 sum e_v^2``; +300 dB when ``e_v`` is silent."""
    _check_pair(p_v, e_v)
    ep = p_v.energy()
    if ep <= 0:
        raise InvalidArgument("leakage noise is silent; noise reduction undefined")
    ee = e_v.energy()
    if ee <= 0:
        return CAP_DB
    return _level_db(ep) - _level_db(ee)


def snr_improvement(e_s: Signal, e_v: Signal, p_s: Signal, p_v: Signal) -> float:
    """SNR with control minus leakage SNR; +300 dB when ``e_v`` is silent."""
    for s in (e_v, p_s, p_v):
        _check_pair(e_s, s)
    if p_v.energy() <= 0 or p_s.energy() <= 0:
        raise InvalidArgument("leakage speech or noise is silent; SNR improvement undefined")
    if e_v.energy() <= 0:
        return CAP_DB
    return (_level_db(e_s.energy()) - _level_db(e_v.energy())) - (_level_db(p_s.energy()) - _level_db(p_v.energy()))


def trim(s: Signal, n: int) -> Signal:
    return Signal(s.samples[n:], s.sample_rate_hz)


def evaluate(
    e_s: Signal,
    e_v: Signal,
    p_s: Signal,
    p_v: Signal,
    e_s_filtered: Signal,
    target: Signal,
    discard: int = 0,
    bands: ThirdOctaveBands | None = None,
) -> MetricReport:
    """All three metrics after dropping the first ``discard`` samples.

    ``e_s_filtered`` and ``target`` feed the distortion measure; the unfiltered
    components feed NR and SNR improvement.
    """
    if discard >= len(e_s):
        raise InvalidArgument(f"discarding {discard} samples leaves nothing of {len(e_s)}")
    e_s, e_v, p_s, p_v, e_f, tgt = (trim(s, discard) for s in (e_s, e_v, p_s, p_v, e_s_filtered, target))
    sd, breakdown, flags = speech_distortion(e_f, tgt, bands)
    flags = list(flags)
    nr = noise_reduction(p_v, e_v)
    dsnr = snr_improvement(e_s, e_v, p_s, p_v)
    if e_v.energy() <= 0:
        flags.append("noise_cap")
    return MetricReport(sd, nr, dsnr, breakdown, len(e_s), tuple(flags))
