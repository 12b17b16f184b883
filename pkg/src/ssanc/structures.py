"""Stacked vectors and block-Toeplitz matrices of the constrained design.

Index conventions (zero-based) used everywhere in the package:

* stacked input ``x(n)`` = K outer-microphone windows followed by the
  leakage-estimate window, each ``[s(n), s(n-1), ..., s(n-L+1)]``;
* secondary-path block ``B[i, j] = g[i - j]`` for ``0 <= i - j < L_g``;
* ReIR block ``H_k[r, c] = h_k(r - c - L_a)`` (tap at lag ``r - c - L_a``),
  with lags running from ``-L_a`` to ``L_h - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import Signal
from .errors import InvalidArgument, OutOfRange


@dataclass(frozen=True)
class AcausalFir:
    """FIR with taps at lags ``-L_a ... L_h-1``; ``taps[0]`` is lag ``-L_a``."""

    taps: np.ndarray
    L_a: int
    L_h: int

    def __post_init__(self) -> None:
        taps = np.asarray(self.taps, dtype=float)
        if self.L_a < 0 or self.L_h < 0 or self.L_a + self.L_h < 1:
            raise InvalidArgument(f"invalid lag extents L_a={self.L_a}, L_h={self.L_h}")
        if taps.shape != (self.L_a + self.L_h,):
            raise InvalidArgument(
                f"expected {self.L_a + self.L_h} taps for L_a={self.L_a}, L_h={self.L_h}, got {taps.shape}"
            )
        if not np.all(np.isfinite(taps)):
            raise InvalidArgument("AcausalFir taps must be finite")
        object.__setattr__(self, "taps", taps)

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.L_a, self.L_h)

    def at(self, lag: int) -> float:
        if -self.L_a <= lag < self.L_h:
            return float(self.taps[lag + self.L_a])
        return 0.0

    def reindexed(self, L_a: int, L_h: int) -> "AcausalFir":
        """Same response on a different lag range (zero-pad or truncate)."""
        return AcausalFir(np.array([self.at(lag) for lag in range(-L_a, L_h)]), L_a, L_h)

    @classmethod
    def impulse(cls, lag: int, L_a: int, L_h: int, gain: float = 1.0) -> "AcausalFir":
        taps = np.zeros(L_a + L_h)
        taps[lag + L_a] = gain
        return cls(taps, L_a, L_h)


@dataclass(frozen=True)
class MultichannelSignal:
    """Channel-major sample matrix ``(channels, samples)`` at one rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if samples.ndim != 2:
            raise InvalidArgument("MultichannelSignal must be 2-D (channels, samples)")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgument("MultichannelSignal contains NaN or Inf")
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    def channel(self, k: int) -> Signal:
        return Signal(self.samples[k], self.sample_rate_hz)

    def appended(self, s: Signal) -> "MultichannelSignal":
        if s.sample_rate_hz != self.sample_rate_hz or len(s) != len(self):
            raise InvalidArgument("appended channel must match rate and length")
        return MultichannelSignal(np.vstack([self.samples, s.samples]), self.sample_rate_hz)


@dataclass(frozen=True)
class ControlFilter:
    """Stacked control filter: ``blocks[k]`` filters input channel ``k``."""

    blocks: np.ndarray

    def __post_init__(self) -> None:
        blocks = np.atleast_2d(np.asarray(self.blocks, dtype=float))
        if blocks.ndim != 2 or blocks.shape[1] == 0:
            raise InvalidArgument("ControlFilter needs (K+1, L_w) blocks with L_w > 0")
        if not np.all(np.isfinite(blocks)):
            raise InvalidArgument("ControlFilter taps must be finite")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def L_w(self) -> int:
        return self.blocks.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    @classmethod
    def from_flat(cls, w: np.ndarray, n_blocks: int) -> "ControlFilter":
        w = np.asarray(w, dtype=float)
        if w.size % n_blocks:
            raise InvalidArgument(f"length {w.size} not divisible into {n_blocks} blocks")
        return cls(w.reshape(n_blocks, -1))

    @classmethod
    def zeros(cls, n_blocks: int, L_w: int) -> "ControlFilter":
        return cls(np.zeros((n_blocks, L_w)))


@dataclass(frozen=True)
class SecondaryPathMatrix:
    """Block-diagonal convolution matrix with K+1 copies of one Toeplitz block."""

    taps: np.ndarray
    L_w: int
    K: int
    block: np.ndarray

    @property
    def L_g(self) -> int:
        return self.taps.size

    @property
    def L(self) -> int:
        return self.block.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.K + 1

    @property
    def matrix(self) -> np.ndarray:
        return scipy.linalg.block_diag(*([self.block] * self.n_blocks))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_blocks * self.L, self.n_blocks * self.L_w)

    def apply(self, w: ControlFilter | np.ndarray) -> np.ndarray:
        """``G @ w`` block by block."""
        blocks = w.blocks if isinstance(w, ControlFilter) else np.asarray(w).reshape(self.n_blocks, self.L_w)
        return (blocks @ self.block.T).reshape(-1)


def build_secondary_path_matrix(g: np.ndarray, L_w: int, K: int) -> SecondaryPathMatrix:
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or g.size < 1:
        raise InvalidArgument("secondary path needs at least one tap")
    if L_w < 1:
        raise InvalidArgument("L_w must be positive")
    if K < 0:
        raise InvalidArgument("K must be nonnegative")
    block = scipy.linalg.convolution_matrix(g, L_w, mode="full")
    if block.shape != (g.size + L_w - 1, L_w):
        raise InvalidArgument("secondary-path block does not satisfy L = L_g + L_w - 1")
    return SecondaryPathMatrix(g.copy(), int(L_w), int(K), block)


@dataclass(frozen=True)
class ReirMatrix:
    """Horizontal concatenation ``[H_1 ... H_{K+1}]`` of acausal ReIR blocks."""

    reirs: tuple[AcausalFir, ...]
    L: int
    matrix: np.ndarray

    @property
    def L_a(self) -> int:
        return self.reirs[0].L_a

    @property
    def L_h(self) -> int:
        return self.reirs[0].L_h

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def block(self, k: int) -> np.ndarray:
        return self.matrix[:, k * self.L : (k + 1) * self.L]


def build_reir_matrix(h: Sequence[AcausalFir], L: int) -> ReirMatrix:
    """Assemble ``H`` of shape ``(L_a + L_h + L - 1, (K+1) L)``."""
    if not h:
        raise InvalidArgument("need at least one ReIR")
    if L < 1:
        raise InvalidArgument("L must be positive")
    L_a, L_h = h[0].L_a, h[0].L_h
    if any(hk.L_a != L_a or hk.L_h != L_h for hk in h):
        raise InvalidArgument("all ReIRs must share L_a and L_h")
    blocks = [scipy.linalg.convolution_matrix(hk.taps, L, mode="full") for hk in h]
    return ReirMatrix(tuple(h), int(L), np.hstack(blocks))


@dataclass(frozen=True)
class SelectionVectors:
    q: np.ndarray
    delta: np.ndarray
    Delta: int


def build_selection_vectors(K: int, L: int, L_a: int, L_h: int, Delta: int) -> SelectionVectors:
    """Leakage selector ``q`` and delayed-target selector ``delta_Delta``."""
    if not 0 <= Delta <= L_h + L - 2:
        raise InvalidArgument(f"Delta={Delta} outside [0, L_h + L - 2 = {L_h + L - 2}]")
    q = np.zeros((K + 1) * L)
    q[K * L] = 1.0
    delta = np.zeros(L_a + L_h + L - 1)
    delta[L_a + Delta] = 1.0
    return SelectionVectors(q, delta, int(Delta))


def stacked_windows(channels: np.ndarray, L: int, start: int, stop: int) -> np.ndarray:
    """Rows ``x(n)`` for ``start <= n < stop``; samples before 0 read as zero.

    ``channels`` is ``(K+1, N)`` with the leakage estimate as the last row.
    """
    channels = np.atleast_2d(channels)
    n_ch, N = channels.shape
    if not 0 <= start <= stop <= N:
        raise OutOfRange(f"window range [{start}, {stop}) outside [0, {N}]")
    lo = start - (L - 1)
    pad = max(0, -lo)
    seg = channels[:, max(lo, 0) : stop]
    if pad:
        seg = np.concatenate([np.zeros((n_ch, pad)), seg], axis=1)
    # windows[c, m, i] = seg[c, m + i]; reverse i for newest-first ordering
    windows = sliding_window_view(seg, L, axis=1)[:, :, ::-1]
    return np.ascontiguousarray(windows.transpose(1, 0, 2)).reshape(stop - start, n_ch * L)


def stack_input_window(x: MultichannelSignal, p_hat: Signal, n: int, L: int) -> np.ndarray:
    """Stacked input vector at time ``n`` (requires a full history window)."""
    if n < L - 1 or n >= len(x):
        raise OutOfRange(f"n={n} needs L-1={L - 1} <= n < {len(x)}")
    channels = x.appended(p_hat).samples
    return stacked_windows(channels, L, n, n + 1)[0]
