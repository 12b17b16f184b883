"""Covariance estimation, eigenvalue-scaled regularisation and the closed-form
constrained control filter, plus an independent KKT solve used to verify it.

Objective (per sample, expectation over the stacked input ``x(n)``)::

    J(w) = E{e^2(n)} + beta * w'w,     e(n) = (q + G w)' x(n)

subject to ``H (q + G w) = delta_Delta``, relaxed with weight ``1/rho``.
With ``R = G' Phi_xx G + beta I`` and ``phi = G' Phi_xx q`` the quadratic part
is ``w'R w + 2 phi'w + const``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InsufficientData, InvalidArgument, NumericFailure
from .structures import (
    ControlFilter,
    ReirMatrix,
    SecondaryPathMatrix,
    SelectionVectors,
    stacked_windows,
)

log = logging.getLogger(__name__)

_COV_CHUNK = 2048


def estimate_covariance(channels: np.ndarray, L: int) -> np.ndarray:
    """Sample average of ``x(n) x(n)'`` over the ``N - L + 1`` full windows.

    ``channels`` is ``(K+1, N)``: the K outer microphones then the leakage
    estimate. Accumulation runs in fixed-size chunks in a fixed order.
    """
    channels = np.atleast_2d(np.asarray(channels, dtype=float))
    N = channels.shape[1]
    if N < 2 * L:
        raise InsufficientData(f"need at least 2L={2 * L} samples, got {N}")
    dim = channels.shape[0] * L
    acc = np.zeros((dim, dim))
    for start in range(L - 1, N, _COV_CHUNK):
        X = stacked_windows(channels, L, start, min(start + _COV_CHUNK, N))
        acc += X.T @ X
    acc /= N - L + 1
    return 0.5 * (acc + acc.T)


def _is_symmetric(M: np.ndarray, rtol: float = 1e-8) -> bool:
    scale = max(np.abs(M).max(), np.finfo(float).tiny)
    return bool(M.shape[0] == M.shape[1] and np.abs(M - M.T).max() <= rtol * scale)


def largest_eigenvalue(
    M: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 1000,
    block_size: int = 8,
) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by block power iteration.

    A block of ``block_size`` vectors is multiplied by ``M`` and re-orthonormalised
    each step; the top Rayleigh-Ritz value is the estimate. Iteration stops
    once it changes by less than ``tol`` relative. The fixed starting block
    makes the result deterministic.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or not _is_symmetric(M):
        raise InvalidArgument("largest_eigenvalue needs a symmetric matrix")
    n = M.shape[0]
    if n == 0:
        raise InvalidArgument("empty matrix")
    if not np.any(M):
        return 0.0
    p = min(block_size, n)
    V = np.random.default_rng(0).standard_normal((n, p))
    V, _ = np.linalg.qr(V)
    theta_old = None
    for _ in range(max_iter):
        W = M @ V
        ritz = np.linalg.eigvalsh(V.T @ W)
        theta = float(ritz[-1])
        if theta_old is not None and abs(theta - theta_old) <= tol * abs(theta):
            return max(theta, 0.0)
        theta_old = theta
        V, _ = np.linalg.qr(W)
    raise NumericFailure(f"power iteration did not converge in {max_iter} iterations")


def _cho_factor(M: np.ndarray, name: str):
    try:
        return scipy.linalg.cho_factor(M, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(M) / M.shape[0]
        log.warning("%s not positive definite; retrying with jitter %.3g", name, jitter)
        try:
            return scipy.linalg.cho_factor(M + jitter * np.eye(M.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericFailure(f"Cholesky factorisation of {name} failed", matrix=name) from exc


@dataclass(frozen=True)
class DesignSpec:
    """One optimisation instance: beta = lambda_1 / beta_divisor, rho likewise."""

    Delta: int
    L_a: int
    L_h: int
    L_w: int
    L_g: int
    beta_divisor: float
    rho_divisor: float
    reference_channel: int = 0

    @property
    def L(self) -> int:
        return self.L_g + self.L_w - 1

    def __post_init__(self) -> None:
        if self.beta_divisor <= 0 or self.rho_divisor <= 0:
            raise InvalidArgument("regularisation divisors must be positive")
        if min(self.L_w, self.L_g, self.L_h) < 1 or self.L_a < 0:
            raise InvalidArgument("filter lengths must be positive (L_a nonnegative)")
        if not 0 <= self.Delta <= self.L_h + self.L - 2:
            raise InvalidArgument(f"Delta={self.Delta} outside [0, {self.L_h + self.L - 2}]")


@dataclass(frozen=True)
class CovarianceSet:
    Phi_xx: np.ndarray
    Phi_rr: np.ndarray
    phi: np.ndarray
    beta: float
    rho: float
    lambda1: float
    n_windows: int | None = None


def secondary_quadratic(Phi_xx: np.ndarray, G: SecondaryPathMatrix) -> np.ndarray:
    """``G' Phi_xx G`` computed block-wise."""
    B = G.block
    L, nb = G.L, G.n_blocks
    if Phi_xx.shape != (nb * L, nb * L):
        raise InvalidArgument(f"Phi_xx shape {Phi_xx.shape} does not match G ({nb * L})")
    # (nb*L, nb*L) -> (nb*L, nb*L_w) -> (nb*L_w, nb*L_w)
    right = (Phi_xx.reshape(nb * L, nb, L) @ B).reshape(nb * L, nb * G.L_w)
    out = (B.T @ right.reshape(nb, L, nb * G.L_w)).reshape(nb * G.L_w, nb * G.L_w)
    return 0.5 * (out + out.T)


def covariance_set(
    Phi_xx: np.ndarray,
    G: SecondaryPathMatrix,
    sel: SelectionVectors,
    beta: float,
    rho: float = 0.0,
    GtPG: np.ndarray | None = None,
    lambda1: float | None = None,
    n_windows: int | None = None,
) -> CovarianceSet:
    if beta < 0 or rho < 0:
        raise InvalidArgument("beta and rho must be nonnegative")
    if GtPG is None:
        GtPG = secondary_quadratic(Phi_xx, G)
    if lambda1 is None:
        lambda1 = largest_eigenvalue(GtPG)
    Phi_rr = GtPG + beta * np.eye(GtPG.shape[0])
    phi = G.block.T @ (Phi_xx @ sel.q).reshape(G.n_blocks, G.L).T
    return CovarianceSet(Phi_xx, Phi_rr, phi.T.reshape(-1), beta, rho, lambda1, n_windows)


class ConstrainedSolver:
    """Factorised form of the closed-form solution for a fixed covariance set.

    Holds ``chol(Phi_rr)``, ``Y = Phi_rr^{-1} G'H'`` and ``chol(H G Y + rho I)``
    so that many target delays can be solved cheaply.
    """

    def __init__(self, cov: CovarianceSet, G: SecondaryPathMatrix, H: ReirMatrix) -> None:
        n = G.n_blocks * G.L_w
        if cov.Phi_rr.shape != (n, n):
            raise InvalidArgument(f"Phi_rr shape {cov.Phi_rr.shape} does not match G ({n})")
        if H.matrix.shape[1] != G.n_blocks * G.L:
            raise InvalidArgument("H column count does not match G row count")
        self.G, self.H, self.cov = G, H, cov
        self.A = self.hg(G, H)
        self._R = _cho_factor(cov.Phi_rr, "Phi_rr")
        self.Y = scipy.linalg.cho_solve(self._R, self.A.T)
        T = self.A @ self.Y
        self.T = 0.5 * (T + T.T)
        self._S = _cho_factor(self.T + cov.rho * np.eye(self.T.shape[0]), "H G Phi_rr^-1 G' H' + rho I")
        self._z = scipy.linalg.cho_solve(self._R, cov.phi)

    @staticmethod
    def hg(G: SecondaryPathMatrix, H: ReirMatrix) -> np.ndarray:
        """``H G`` without materialising G: block k is ``H_k @ B``."""
        return np.hstack([H.block(k) @ G.block for k in range(G.n_blocks)])

    def solve(self, sel: SelectionVectors) -> ControlFilter:
        c = sel.delta - self.H.matrix @ sel.q
        z = self._z
        # -[I - Y S^-1 A] z + Y S^-1 c
        w = -(z - self.Y @ scipy.linalg.cho_solve(self._S, self.A @ z))
        w = w + self.Y @ scipy.linalg.cho_solve(self._S, c)
        return ControlFilter.from_flat(w, self.G.n_blocks)


def solve_control_filter(
    cov: CovarianceSet, G: SecondaryPathMatrix, H: ReirMatrix, sel: SelectionVectors
) -> ControlFilter:
    """Closed-form constrained solution (both inverses by Cholesky)."""
    if sel.q.size != G.n_blocks * G.L or sel.delta.size != H.n_rows:
        raise InvalidArgument("selection vectors do not match G/H dimensions")
    return ConstrainedSolver(cov, G, H).solve(sel)


def kkt_oracle(
    cov: CovarianceSet, G: SecondaryPathMatrix, H: ReirMatrix, sel: SelectionVectors
) -> ControlFilter:
    """Solve the stationarity system of the rho-relaxed problem directly.

    ``[[Phi_rr, A'], [A, -rho I]] [w; lam] = [-phi; c]`` with ``A = H G`` built
    from the dense G and ``c = delta - H q``; one LU solve, no Schur complement.
    See ``docs/derivation.md``.
    """
    Gm = G.matrix
    n = Gm.shape[1]
    if n > 2000:
        raise InvalidArgument(f"kkt_oracle limited to (K+1)L_w <= 2000, got {n}")
    A = H.matrix @ Gm
    m = A.shape[0]
    c = sel.delta - H.matrix @ sel.q
    phi = Gm.T @ cov.Phi_xx @ sel.q
    R = Gm.T @ cov.Phi_xx @ Gm + cov.beta * np.eye(n)
    K = np.block([[R, A.T], [A, -cov.rho * np.eye(m)]])
    try:
        sol = np.linalg.solve(K, np.concatenate([-phi, c]))
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("KKT system is singular", matrix="KKT") from exc
    return ControlFilter.from_flat(sol[:n], G.n_blocks)


@dataclass(frozen=True)
class Regularizers:
    beta: float
    rho: float
    lambda1: float
    lambda_constraint: float


def compute_regularizers(
    spec: DesignSpec,
    GtPG: np.ndarray,
    A: np.ndarray,
    lambda1: float | None = None,
) -> Regularizers:
    """beta from ``lambda_max(G'Phi_xx G)``, then rho from the beta-dependent
    ``lambda_max(H G Phi_rr^{-1} G'H')``."""
    if spec.beta_divisor == 0 or spec.rho_divisor == 0:
        raise InvalidArgument("zero regularisation divisor")
    if lambda1 is None:
        lambda1 = largest_eigenvalue(GtPG)
    beta = lambda1 / spec.beta_divisor
    R = _cho_factor(GtPG + beta * np.eye(GtPG.shape[0]), "Phi_rr")
    T = A @ scipy.linalg.cho_solve(R, A.T)
    lam_c = largest_eigenvalue(0.5 * (T + T.T))
    return Regularizers(beta, lam_c / spec.rho_divisor, lambda1, lam_c)


def constraint_residual(G: SecondaryPathMatrix, H: ReirMatrix, sel: SelectionVectors, w: ControlFilter) -> np.ndarray:
    """``H (q + G w) - delta_Delta``."""
    return H.matrix @ (sel.q + G.apply(w)) - sel.delta


def relaxed_objective_gradient(
    cov: CovarianceSet, G: SecondaryPathMatrix, H: ReirMatrix, sel: SelectionVectors, w: ControlFilter
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of ``w'Rw + 2phi'w + ||Aw - c||^2 / rho``."""
    A = ConstrainedSolver.hg(G, H)
    c = sel.delta - H.matrix @ sel.q
    x = w.flat
    grad = 2.0 * (cov.Phi_rr @ x + cov.phi)
    hess = 2.0 * cov.Phi_rr
    if cov.rho > 0:
        grad = grad + 2.0 / cov.rho * A.T @ (A @ x - c)
        hess = hess + 2.0 / cov.rho * A.T @ A
    return grad, hess


def write_matrix_dump(path, M: np.ndarray) -> None:
    """Little-endian float64 payload behind a 16-byte header.

    Header: magic ``b"SSNC"``, uint32 version (1), uint32 rows, uint32 cols.
    """
    M = np.atleast_2d(np.asarray(M, dtype="<f8"))
    rows, cols = M.shape
    header = b"SSNC" + np.array([1, rows, cols], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(M.tobytes(order="C"))


def read_matrix_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != b"SSNC":
            raise InvalidArgument(f"{path}: not a matrix dump")
        version, rows, cols = np.frombuffer(header[4:], dtype="<u4")
        if version != 1:
            raise InvalidArgument(f"{path}: unsupported dump version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise InvalidArgument(f"{path}: payload has {data.size} values, header says {rows}x{cols}")
    return data.reshape(rows, cols)
