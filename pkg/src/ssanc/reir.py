"""Acausal relative impulse responses identified with normalised LMS.

For channel ``k`` the filter maps the reference microphone to ``x_k``::

    x_k(n) ~ sum_{l=-L_a}^{L_h-1} h_k(l) x_ref(n - l)

Acausality is obtained by delaying the target by ``L_a`` samples and adapting a
causal ``L_a + L_h`` tap filter; tap ``j`` then corresponds to lag ``j - L_a``.
All channels share the reference regressor, so they are adapted together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConvergenceFailure, InvalidArgument
from .scenario import SceneRealization
from .structures import AcausalFir

log = logging.getLogger(__name__)

__all__ = [
    "AcausalFir",
    "LmsConfig",
    "ReirEstimate",
    "nlms_identify",
    "estimate_reirs",
    "misalignment",
    "save_reir",
    "load_reir",
]

MISALIGNMENT_FLOOR_DB = -300.0


@dataclass(frozen=True)
class LmsConfig:
    """NLMS settings.

    ``step_size`` applies for the first ``anneal_after_s`` seconds; after that
    it is multiplied by ``anneal_factor`` every ``convergence_window_s``. The
    estimate is converged once the relative change of the stacked taps over
    one window drops below ``convergence_threshold``.
    """

    step_size: float = 0.5
    probe_duration_s: float = 10.0
    convergence_window_s: float = 1.0
    convergence_threshold: float = 1e-4
    anneal_after_s: float = 2.0
    anneal_factor: float = 0.1
    regularization: float = 1e-8

    def __post_init__(self) -> None:
        if not 0 < self.step_size < 2:
            raise InvalidArgument("NLMS step size must lie in (0, 2)")
        if self.probe_duration_s <= 0 or self.convergence_window_s <= 0:
            raise InvalidArgument("durations must be positive")
        if self.convergence_threshold <= 0:
            raise InvalidArgument("convergence threshold must be positive")
        if not 0 < self.anneal_factor <= 1:
            raise InvalidArgument("anneal_factor must lie in (0, 1]")


@dataclass(frozen=True)
class ReirEstimate:
    reirs: tuple[AcausalFir, ...]
    converged_at_s: float
    final_change: float


def nlms_identify(
    reference: np.ndarray,
    targets: np.ndarray,
    L_a: int,
    L_h: int,
    cfg: LmsConfig,
    sample_rate_hz: int,
) -> ReirEstimate:
    """Adapt one ``L_a + L_h`` tap NLMS filter per target row against ``reference``.

    Raises :class:`ConvergenceFailure` when the threshold is not met within the
    available samples.
    """
    u_sig = np.asarray(reference, dtype=float)
    d_sig = np.atleast_2d(np.asarray(targets, dtype=float))
    n_taps = L_a + L_h
    if n_taps < 1:
        raise InvalidArgument("need L_a + L_h >= 1")
    N = min(u_sig.size, d_sig.shape[1], int(round(cfg.probe_duration_s * sample_rate_hz)))
    window = max(1, int(round(cfg.convergence_window_s * sample_rate_hz)))
    anneal_start = int(round(cfg.anneal_after_s * sample_rate_hz))
    if N < n_taps + window:
        raise InvalidArgument("probe too short for the requested filter length")

    W = np.zeros((d_sig.shape[0], n_taps))
    W_check = W.copy()
    u_pad = np.concatenate([np.zeros(n_taps - 1), u_sig[:N]])
    # U[n] = [u(n), u(n-1), ..., u(n - n_taps + 1)]
    U = sliding_window_view(u_pad, n_taps)[:, ::-1]
    power = np.einsum("ij,ij->i", U, U)
    # target delayed by L_a: d(n) = x_k(n - L_a)
    d_del = np.concatenate([np.zeros((d_sig.shape[0], L_a)), d_sig[:, :N]], axis=1)[:, :N].T.copy()
    mu = cfg.step_size
    change = math.inf
    for n in range(N):
        u = U[n]
        err = d_del[n] - W @ u
        W += (mu / (power[n] + cfg.regularization)) * np.outer(err, u)
        if (n + 1) % window == 0:
            change = float(np.linalg.norm(W - W_check) / max(np.linalg.norm(W), 1e-300))
            W_check = W.copy()
            if change < cfg.convergence_threshold:
                reirs = tuple(AcausalFir(row.copy(), L_a, L_h) for row in W)
                return ReirEstimate(reirs, (n + 1) / sample_rate_hz, change)
            if n + 1 >= anneal_start:
                mu *= cfg.anneal_factor
    raise ConvergenceFailure(
        f"NLMS did not converge within {N / sample_rate_hz:.2f} s (last relative change {change:.3g})",
        misalignment=change,
    )


def estimate_reirs(
    probe: SceneRealization,
    reference_channel: int,
    L_a: int,
    L_h: int,
    cfg: LmsConfig | None = None,
) -> ReirEstimate:
    """ReIRs from the reference microphone to each outer microphone and the leakage.

    ``probe`` must contain only the desired source (white-noise driven). The
    result holds K+1 filters; the last maps the reference to the eardrum
    leakage. The reference channel's own ReIR must come out as a unit impulse
    at lag 0 (within 1e-3), otherwise :class:`ConvergenceFailure` is raised.
    """
    cfg = cfg or LmsConfig()
    if not 0 <= reference_channel < probe.K:
        raise InvalidArgument(f"reference channel {reference_channel} out of range for K={probe.K}")
    if np.any(probe.x_v.samples) or np.any(probe.p_v.samples):
        raise InvalidArgument("probe scene must not contain noise sources")
    ref = probe.x_s.samples[reference_channel]
    targets = probe.stacked("speech")
    result = nlms_identify(ref, targets, L_a, L_h, cfg, probe.sample_rate_hz)
    self_reir = result.reirs[reference_channel]
    expected = AcausalFir.impulse(0, L_a, L_h)
    dev = float(np.abs(self_reir.taps - expected.taps).max())
    if dev > 1e-3:
        raise ConvergenceFailure(f"reference self-ReIR deviates from a unit impulse by {dev:.3g}", dev)
    return result


def misalignment(h_hat: AcausalFir, h_true: AcausalFir) -> float:
    """``20 log10(||h_hat - h|| / ||h||)`` over the union of both lag ranges, floored at -300 dB."""
    L_a = max(h_hat.L_a, h_true.L_a)
    L_h = max(h_hat.L_h, h_true.L_h)
    a = h_hat.reindexed(L_a, L_h).taps
    b = h_true.reindexed(L_a, L_h).taps
    ref = np.linalg.norm(b)
    if ref == 0:
        raise InvalidArgument("misalignment undefined for an all-zero reference response")
    err = np.linalg.norm(a - b)
    if err == 0:
        return MISALIGNMENT_FLOOR_DB
    return max(20.0 * math.log10(err / ref), MISALIGNMENT_FLOOR_DB)


def save_reir(path: str | Path, h: AcausalFir) -> None:
    """``L_a=<int> L_h=<int>`` header then ``lag value`` lines."""
    lines = [f"L_a={h.L_a} L_h={h.L_h}"]
    lines += [f"{lag} {v:.17g}" for lag, v in zip(h.lags, h.taps)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_reir(path: str | Path) -> AcausalFir:
    text = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not text:
        raise InvalidArgument(f"{path}: empty ReIR file")
    try:
        fields = dict(item.split("=") for item in text[0].split())
        L_a, L_h = int(fields["L_a"]), int(fields["L_h"])
    except (ValueError, KeyError) as exc:
        raise InvalidArgument(f"{path}: bad header {text[0]!r}") from exc
    taps = np.zeros(L_a + L_h)
    seen = set()
    for line in text[1:]:
        lag_s, val_s = line.split()
        lag = int(lag_s)
        if not -L_a <= lag < L_h:
            raise InvalidArgument(f"{path}: lag {lag} outside [-{L_a}, {L_h})")
        taps[lag + L_a] = float(val_s)
        seen.add(lag)
    if len(seen) != L_a + L_h:
        raise InvalidArgument(f"{path}: expected {L_a + L_h} lags, found {len(seen)}")
    return AcausalFir(taps, L_a, L_h)


def true_reirs(paths: Sequence[np.ndarray], reference_channel: int, L_a: int, L_h: int) -> list[AcausalFir]:
    """Least-squares ReIRs from known paths, for validation.

    Solves ``path_k ~ h_k * path_ref`` on the lag range by dense least squares.
    """
    ref = np.asarray(paths[reference_channel], dtype=float)
    n_taps = L_a + L_h
    out = []
    for p in paths:
        p = np.asarray(p, dtype=float)
        n = max(ref.size + n_taps - 1, p.size + L_a)
        # column j = ref delayed by j, target = p delayed by L_a
        A = np.zeros((n, n_taps))
        for j in range(n_taps):
            A[j : j + ref.size, j] = ref
        b = np.zeros(n)
        b[L_a : L_a + p.size] = p
        taps, *_ = np.linalg.lstsq(A, b, rcond=None)
        out.append(AcausalFir(taps, L_a, L_h))
    return out
