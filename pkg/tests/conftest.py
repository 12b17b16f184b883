from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from ssanc.design import covariance_set, largest_eigenvalue, secondary_quadratic
from ssanc.structures import AcausalFir, build_reir_matrix, build_secondary_path_matrix, build_selection_vectors

# lines collected by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_CONFIG = """
seed = 0
output_dir = "{out}"

[design]
L_w = 12
L_h = 8
probe_duration_s = 2.0
  [design.lms]
  convergence_window_s = 0.25
  anneal_after_s = 0.5

[sweep]
delta = [0, 3, 6]
la = [0, 2]
beta_divisors = [1e3]
rho_divisors = [1e4]

[[scene]]
id = "tiny"
duration_s = 0.5
L_g = 8
  [[scene.microphone]]
  name = "ref"
  [[scene.microphone]]
  name = "front"
  [scene.error_microphone]
  name = "eardrum"
  [scene.secondary_path]
  bulk_delay = 1
  decay_ms = 0.3
  [scene.desired]
  azimuth_deg = 0.0
  signal = {{ kind = "white" }}
  arrivals = [[[2, 1.0]], [[1, 0.8]], [[4, 0.9], [6, 0.2]]]
  [[scene.noise]]
  azimuth_deg = 60.0
  signal = {{ kind = "white", seed_offset = 3 }}
  arrivals = [[[0, 1.0]], [[3, 0.7]], [[5, 1.0]]]
"""


@pytest.fixture
def tiny_config_text(tmp_path):
    return TINY_CONFIG.format(out=(tmp_path / "out").as_posix())


@pytest.fixture
def tiny_config_path(tmp_path, tiny_config_text):
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_config_text)
    return path


@dataclass
class Instance:
    G: object
    H: object
    sel: object
    cov: object


def random_pd(rng: np.random.Generator, n: int, cond: float = 50.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    M = (Q * eig) @ Q.T
    return 0.5 * (M + M.T)


def tiny_instance(
    rng: np.random.Generator,
    K: int,
    L_w: int,
    L_g: int,
    L_a: int,
    L_h: int,
    Delta: int,
    beta_div: float = 1e3,
    rho: float = 1e-3,
) -> Instance:
    """Random positive definite covariance, random g and random acausal ReIRs."""
    g = rng.standard_normal(L_g)
    G = build_secondary_path_matrix(g, L_w, K)
    L = G.L
    reirs = [AcausalFir(rng.standard_normal(L_a + L_h), L_a, L_h) for _ in range(K + 1)]
    H = build_reir_matrix(reirs, L)
    sel = build_selection_vectors(K, L, L_a, L_h, Delta)
    Phi = random_pd(rng, (K + 1) * L)
    GtPG = secondary_quadratic(Phi, G)
    lam1 = largest_eigenvalue(GtPG)
    cov = covariance_set(Phi, G, sel, lam1 / beta_div, rho, GtPG, lam1)
    return Instance(G, H, sel, cov)
