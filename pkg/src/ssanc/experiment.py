"""Sweep orchestration: scene -> ReIRs -> constrained design -> metrics.

A run covers every combination of scenario, Delta, L_a, beta divisor and rho
divisor in the config. Expensive intermediate products are cached and shared
between sweep points:

* per scenario: the realised scene, the white-noise probe, ``G``, ``Phi_xx``,
  ``G'Phi_xx G`` and its largest eigenvalue;
* per (scenario, L_a): the identified ReIRs and ``H``;
* per (scenario, L_a, beta divisor, rho divisor): the factorised solver.

Rows come back sorted by (scenario order, Delta, L_a, beta divisor, rho
divisor) whatever order the worker pool finishes them in.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .design import (
    ConstrainedSolver,
    DesignSpec,
    compute_regularizers,
    covariance_set,
    estimate_covariance,
    largest_eigenvalue,
    secondary_quadratic,
)
from .dsp import min_phase_highpass
from .errors import ConfigError, SsancError
from .metrics import CAP_DB, SD_FLOOR_DB, evaluate
from .reir import LmsConfig, estimate_reirs
from .scenario import (
    MicSpec,
    SceneConfig,
    SecondaryPathSpec,
    SignalSpec,
    SourceSpec,
    apply_control,
    probe_scene,
    realize_scene,
)
from .structures import build_reir_matrix, build_secondary_path_matrix, build_selection_vectors

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DesignDefaults:
    """Filter lengths and fixed processing settings shared by every sweep point."""

    L_w: int
    L_h: int
    highpass_cutoff_hz: float = 100.0
    highpass_order: int = 512
    probe_duration_s: float = 10.0
    lms: LmsConfig = field(default_factory=LmsConfig)


@dataclass(frozen=True)
class SweepSpec:
    delta_list: tuple[int, ...]
    la_list: tuple[int, ...]
    beta_divisors: tuple[float, ...]
    rho_divisors: tuple[float, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    scenes: tuple[SceneConfig, ...]
    design: DesignDefaults
    sweep: SweepSpec
    output_dir: str = "results"
    seed: int = 0
    record_timing: bool = False

    @property
    def scene(self) -> SceneConfig:
        return self.scenes[0]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class ResultRow:
    scenario_id: str
    delta: int
    l_a: int
    beta_divisor: float
    rho_divisor: float
    sd_db: float
    nr_db: float
    dsnr_db: float
    solve_time_s: float
    constraint_residual: float
    flags: str = ""
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


CSV_COLUMNS = tuple(f.name for f in fields(ResultRow))


# ---------------------------------------------------------------- config parsing


def _take(table: dict, key: str, where: str, kind: type | tuple[type, ...], default: Any = ...) -> Any:
    if key not in table:
        if default is ...:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (isinstance(value, bool) and kind in (int, float)):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{where}.{key}: expected {name}, got {type(value).__name__}")
    return value


def _no_extra(table: dict, allowed: Iterable[str], where: str) -> None:
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")


def _int_list(value: Any, where: str) -> tuple[int, ...]:
    if isinstance(value, dict):
        _no_extra(value, ("start", "stop", "step"), where)
        start = _take(value, "start", where, int)
        stop = _take(value, "stop", where, int)
        step = _take(value, "step", where, int, 1)
        if step <= 0:
            raise ConfigError(f"{where}.step must be positive")
        return tuple(range(start, stop + 1, step))
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{where}: expected a list of integers or a {{start, stop, step}} table")
    return tuple(value)


def _float_list(value: Any, where: str) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{where}: expected a list of numbers")
    return tuple(float(v) for v in value)


def _vec3(value: Any, where: str) -> tuple[float, float, float]:
    if not isinstance(value, list) or len(value) != 3 or not all(isinstance(v, (int, float)) for v in value):
        raise ConfigError(f"{where}: expected [x, y, z] in metres")
    return tuple(float(v) for v in value)  # type: ignore[return-value]


def _mic(t: dict, where: str) -> MicSpec:
    _no_extra(t, ("name", "position", "extra_delay_samples", "gain"), where)
    return MicSpec(
        position=_vec3(t.get("position", [0.0, 0.0, 0.0]), f"{where}.position"),
        name=_take(t, "name", where, str, ""),
        extra_delay_samples=_take(t, "extra_delay_samples", where, float, 0.0),
        gain=_take(t, "gain", where, float, 1.0),
    )


def _signal(t: dict, where: str, base: Path) -> SignalSpec:
    _no_extra(t, ("kind", "path", "frequencies_hz", "amplitudes", "talkers", "seed_offset"), where)
    path = _take(t, "path", where, str, None)
    if path is not None and not Path(path).is_absolute():
        path = str(base / path)
    return SignalSpec(
        kind=_take(t, "kind", where, str, "white"),
        path=path,
        frequencies_hz=_float_list(t.get("frequencies_hz", []), f"{where}.frequencies_hz"),
        amplitudes=_float_list(t.get("amplitudes", []), f"{where}.amplitudes"),
        talkers=_take(t, "talkers", where, int, 6),
        seed_offset=_take(t, "seed_offset", where, int, 0),
    )


def _arrivals(value: Any, where: str) -> tuple[tuple[tuple[float, float], ...], ...]:
    try:
        out = tuple(tuple((float(d), float(g)) for d, g in mic) for mic in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected one list of [delay_samples, gain] pairs per microphone") from exc
    return out


def _source(t: dict, where: str, base: Path) -> SourceSpec:
    _no_extra(t, ("azimuth_deg", "distance_m", "elevation_deg", "level_db", "signal", "arrivals"), where)
    arrivals = t.get("arrivals")
    return SourceSpec(
        azimuth_deg=_take(t, "azimuth_deg", where, float, 0.0),
        signal=_signal(_take(t, "signal", where, dict, {}), f"{where}.signal", base),
        distance_m=_take(t, "distance_m", where, float, 2.0),
        elevation_deg=_take(t, "elevation_deg", where, float, 0.0),
        level_db=_take(t, "level_db", where, float, 0.0),
        arrivals=None if arrivals is None else _arrivals(arrivals, f"{where}.arrivals"),
    )


def _secondary(t: dict, where: str, base: Path) -> SecondaryPathSpec:
    _no_extra(t, ("kind", "bulk_delay", "decay_ms", "min_phase", "seed", "path"), where)
    path = _take(t, "path", where, str, None)
    if path is not None and not Path(path).is_absolute():
        path = str(base / path)
    return SecondaryPathSpec(
        kind=_take(t, "kind", where, str, "random"),
        bulk_delay=_take(t, "bulk_delay", where, int, 2),
        decay_ms=_take(t, "decay_ms", where, float, 5.0),
        min_phase=_take(t, "min_phase", where, bool, False),
        seed=_take(t, "seed", where, int, 0),
        path=path,
    )


_SCENE_KEYS = (
    "id",
    "sample_rate_hz",
    "duration_s",
    "target_leakage_snr_db",
    "L_g",
    "reference_channel",
    "half_width",
    "microphone",
    "error_microphone",
    "desired",
    "noise",
    "secondary_path",
)


def _scene(t: dict, where: str, base: Path) -> SceneConfig:
    _no_extra(t, _SCENE_KEYS, where)
    mics = _take(t, "microphone", where, list)
    try:
        return SceneConfig(
            microphones=tuple(_mic(m, f"{where}.microphone[{i}]") for i, m in enumerate(mics)),
            error_mic=_mic(_take(t, "error_microphone", where, dict), f"{where}.error_microphone"),
            desired=_source(_take(t, "desired", where, dict), f"{where}.desired", base),
            noises=tuple(_source(n, f"{where}.noise[{i}]", base) for i, n in enumerate(_take(t, "noise", where, list, []))),
            sample_rate_hz=_take(t, "sample_rate_hz", where, int, 16000),
            target_leakage_snr_db=_take(t, "target_leakage_snr_db", where, float, -5.0),
            secondary_path=_secondary(_take(t, "secondary_path", where, dict, {}), f"{where}.secondary_path", base),
            L_g=_take(t, "L_g", where, int),
            duration_s=_take(t, "duration_s", where, float, 3.0),
            reference_channel=_take(t, "reference_channel", where, int, 0),
            half_width=_take(t, "half_width", where, int, 16),
            id=_take(t, "id", where, str, where),
        )
    except SsancError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def _lms(t: dict, where: str) -> LmsConfig:
    names = [f.name for f in fields(LmsConfig)]
    _no_extra(t, names, where)
    kwargs = {k: _take(t, k, where, float) for k in names if k in t}
    try:
        return LmsConfig(**kwargs)
    except SsancError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from TOML text (see ``docs/config.md``)."""
    base = Path(base_dir)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    _no_extra(doc, ("seed", "output_dir", "record_timing", "design", "sweep", "scene"), "config")
    d = _take(doc, "design", "config", dict)
    _no_extra(d, ("L_w", "L_h", "highpass_cutoff_hz", "highpass_order", "probe_duration_s", "lms"), "design")
    design = DesignDefaults(
        L_w=_take(d, "L_w", "design", int),
        L_h=_take(d, "L_h", "design", int),
        highpass_cutoff_hz=_take(d, "highpass_cutoff_hz", "design", float, 100.0),
        highpass_order=_take(d, "highpass_order", "design", int, 512),
        probe_duration_s=_take(d, "probe_duration_s", "design", float, 10.0),
        lms=_lms(_take(d, "lms", "design", dict, {}), "design.lms"),
    )
    s = _take(doc, "sweep", "config", dict)
    _no_extra(s, ("delta", "la", "beta_divisors", "rho_divisors"), "sweep")
    sweep = SweepSpec(
        delta_list=_int_list(_take(s, "delta", "sweep", (list, dict)), "sweep.delta"),
        la_list=_int_list(_take(s, "la", "sweep", (list, dict)), "sweep.la"),
        beta_divisors=_float_list(_take(s, "beta_divisors", "sweep", list), "sweep.beta_divisors"),
        rho_divisors=_float_list(_take(s, "rho_divisors", "sweep", list), "sweep.rho_divisors"),
    )
    scenes = tuple(_scene(t, f"scene[{i}]", base) for i, t in enumerate(_take(doc, "scene", "config", list)))
    # relative output directories are taken from the working directory
    out_dir = _take(doc, "output_dir", "config", str, "results")
    return ExperimentConfig(
        scenes=scenes,
        design=design,
        sweep=sweep,
        output_dir=out_dir,
        seed=_take(doc, "seed", "config", int, 0),
        record_timing=_take(doc, "record_timing", "config", bool, False),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and parse a config file. I/O problems propagate as ``OSError``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config(text, path.parent)


def config_problems(cfg: ExperimentConfig) -> list[str]:
    """Every violated invariant of a parsed config (empty when valid)."""
    problems: list[str] = []
    sw, dz = cfg.sweep, cfg.design
    for name, values in (
        ("sweep.delta", sw.delta_list),
        ("sweep.la", sw.la_list),
        ("sweep.beta_divisors", sw.beta_divisors),
        ("sweep.rho_divisors", sw.rho_divisors),
    ):
        if not values:
            problems.append(f"{name} is empty")
    for name, values in (("beta_divisor", sw.beta_divisors), ("rho_divisor", sw.rho_divisors)):
        for v in values:
            if not v > 0 or not math.isfinite(v):
                problems.append(f"{name}={v:g} must be positive and finite")
    if dz.L_w < 1:
        problems.append(f"design.L_w={dz.L_w} must be positive")
    if dz.L_h < 1:
        problems.append(f"design.L_h={dz.L_h} must be positive")
    if dz.highpass_cutoff_hz <= 0:
        problems.append("design.highpass_cutoff_hz must be positive")
    if dz.highpass_order < 2 or dz.highpass_order % 2:
        problems.append(f"design.highpass_order={dz.highpass_order} must be a positive even integer")
    for la in sw.la_list:
        if la < 0:
            problems.append(f"L_a={la} must be nonnegative")
    if not cfg.scenes:
        problems.append("no [[scene]] given")
    ids = [sc.id for sc in cfg.scenes]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        problems.append(f"scene id '{dup}' used more than once")
    for sc in cfg.scenes:
        L = sc.L_g + dz.L_w - 1
        if sc.noises == ():
            problems.append(f"scene '{sc.id}': no noise sources (noise metrics undefined)")
        if dz.highpass_cutoff_hz >= sc.sample_rate_hz / 2:
            problems.append(f"scene '{sc.id}': high-pass cutoff at or above Nyquist")
        upper = dz.L_h + L - 2
        for delta in sw.delta_list:
            if not 0 <= delta <= upper:
                problems.append(
                    f"scene '{sc.id}': Delta={delta} outside [0, L_h + L - 2 = {upper}] (L = L_g + L_w - 1 = {L})"
                )
        n = sc.n_samples
        if n < 2 * L:
            problems.append(f"scene '{sc.id}': {n} samples is fewer than 2L = {2 * L}")
        if sw.delta_list and n <= L + max(sw.delta_list):
            problems.append(f"scene '{sc.id}': nothing left after discarding L + Delta samples")
        for src in (sc.desired, *sc.noises):
            if src.arrivals is not None and len(src.arrivals) != sc.K + 1:
                problems.append(f"scene '{sc.id}': explicit arrivals need K+1={sc.K + 1} microphone entries")
    return problems


def validate_config(path: str | Path) -> list[str]:
    """Validation report for a config file: parse errors or violated invariants.

    Raises ``OSError`` if the file cannot be read.
    """
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return [str(exc)]
    return config_problems(cfg)


# ---------------------------------------------------------------- execution


class _Memo:
    """Thread-safe memo table; each key is computed once under its own lock."""

    def __init__(self) -> None:
        self._values: dict[Any, Any] = {}
        self._locks: dict[Any, threading.Lock] = {}
        self._guard = threading.Lock()

    def get(self, key: Any, factory: Callable[[], Any]) -> Any:
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._values:
                try:
                    self._values[key] = (True, factory())
                except Exception as exc:  # cached so dependent points fail the same way
                    self._values[key] = (False, exc)
            ok, value = self._values[key]
        if not ok:
            raise value
        return value


@dataclass(frozen=True)
class _SceneState:
    scene: Any
    probe: Any
    G: Any
    Phi_xx: np.ndarray
    GtPG: np.ndarray
    lambda1: float
    hp: np.ndarray
    n_windows: int


@dataclass(frozen=True)
class SweepPoint:
    scene_index: int
    delta: int
    l_a: int
    beta_divisor: float
    rho_divisor: float


def sweep_points(cfg: ExperimentConfig) -> list[SweepPoint]:
    sw = cfg.sweep
    return [
        SweepPoint(i, d, la, b, r)
        for i in range(len(cfg.scenes))
        for d in sorted(set(sw.delta_list))
        for la in sorted(set(sw.la_list))
        for b in sorted(set(sw.beta_divisors))
        for r in sorted(set(sw.rho_divisors))
    ]


class ExperimentRunner:
    """Evaluates sweep points against shared caches.

    ``use_cache=False`` recomputes everything for each point (used to check
    that caching does not change results).
    """

    def __init__(self, cfg: ExperimentConfig, use_cache: bool = True) -> None:
        self.cfg = cfg
        self.use_cache = use_cache
        self._memo = _Memo()

    def _cached(self, key: Any, factory: Callable[[], Any]) -> Any:
        return self._memo.get(key, factory) if self.use_cache else factory()

    def scene_state(self, i: int) -> _SceneState:
        return self._cached(("scene", i), lambda: self._build_scene(i))

    def _build_scene(self, i: int) -> _SceneState:
        sc, dz = self.cfg.scenes[i], self.cfg.design
        log.info("realising scene '%s'", sc.id)
        scene = realize_scene(sc, self.cfg.seed)
        probe = probe_scene(sc, self.cfg.seed, dz.probe_duration_s)
        G = build_secondary_path_matrix(scene.g.taps, dz.L_w, sc.K)
        Phi = estimate_covariance(scene.stacked("mix"), G.L)
        GtPG = secondary_quadratic(Phi, G)
        lam1 = largest_eigenvalue(GtPG)
        hp = min_phase_highpass(dz.highpass_cutoff_hz, dz.highpass_order, sc.sample_rate_hz)
        return _SceneState(scene, probe, G, Phi, GtPG, lam1, hp, len(scene) - G.L + 1)

    def reir_matrix(self, i: int, L_a: int):
        def build():
            st = self.scene_state(i)
            est = estimate_reirs(st.probe, self.cfg.scenes[i].reference_channel, L_a, self.cfg.design.L_h, self.cfg.design.lms)
            log.info("scene '%s' L_a=%d: ReIRs converged after %.2f s", self.cfg.scenes[i].id, L_a, est.converged_at_s)
            return build_reir_matrix(est.reirs, st.G.L)

        return self._cached(("reir", i, L_a), build)

    def solver(self, i: int, L_a: int, beta_div: float, rho_div: float) -> ConstrainedSolver:
        def build():
            st = self.scene_state(i)
            H = self.reir_matrix(i, L_a)
            sc, dz = self.cfg.scenes[i], self.cfg.design
            spec = DesignSpec(0, L_a, dz.L_h, dz.L_w, sc.L_g, beta_div, rho_div, sc.reference_channel)
            A = ConstrainedSolver.hg(st.G, H)
            reg = compute_regularizers(spec, st.GtPG, A, st.lambda1)
            sel0 = build_selection_vectors(sc.K, st.G.L, L_a, dz.L_h, 0)
            cov = covariance_set(st.Phi_xx, st.G, sel0, reg.beta, reg.rho, st.GtPG, st.lambda1, st.n_windows)
            return ConstrainedSolver(cov, st.G, H)

        return self._cached(("solver", i, L_a, beta_div, rho_div), build)

    def evaluate_point(self, pt: SweepPoint) -> ResultRow:
        sc = self.cfg.scenes[pt.scene_index]
        nan = float("nan")
        try:
            st = self.scene_state(pt.scene_index)
            t0 = time.perf_counter()
            solver = self.solver(pt.scene_index, pt.l_a, pt.beta_divisor, pt.rho_divisor)
            sel = build_selection_vectors(sc.K, st.G.L, pt.l_a, self.cfg.design.L_h, pt.delta)
            w = solver.solve(sel)
            elapsed = time.perf_counter() - t0
            resid = solver.H.matrix @ (sel.q + st.G.apply(w)) - sel.delta
            out = apply_control(st.scene, w, st.G, st.hp, pt.delta)
            m = evaluate(
                out.e_s, out.e_v, st.scene.p_s, st.scene.p_v, out.e_s_filtered, out.target, discard=st.G.L + pt.delta
            )
            return ResultRow(
                sc.id,
                pt.delta,
                pt.l_a,
                pt.beta_divisor,
                pt.rho_divisor,
                m.sd_db,
                m.nr_db,
                m.dsnr_db,
                elapsed if self.cfg.record_timing else nan,
                float(np.abs(resid).max()),
                ";".join(m.flags),
            )
        except Exception as exc:  # one failed point must not abort the sweep
            log.error("sweep point %s failed: %s", pt, exc)
            msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
            return ResultRow(sc.id, pt.delta, pt.l_a, pt.beta_divisor, pt.rho_divisor, nan, nan, nan, nan, nan, "", msg)


def run_experiment(
    cfg: ExperimentConfig | str | Path,
    jobs: int | None = None,
    use_cache: bool = True,
    points: Sequence[SweepPoint] | None = None,
) -> list[ResultRow]:
    """Evaluate every sweep point; rows are ordered by (scenario, Delta, L_a, beta, rho)."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    problems = config_problems(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    runner = ExperimentRunner(cfg, use_cache=use_cache)
    pts = list(points) if points is not None else sweep_points(cfg)
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1:
        rows = [runner.evaluate_point(p) for p in pts]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(runner.evaluate_point, pts))
    order = {sc.id: k for k, sc in enumerate(cfg.scenes)}
    return sorted(rows, key=lambda r: (order[r.scenario_id], r.delta, r.l_a, r.beta_divisor, r.rho_divisor))


# ---------------------------------------------------------------- output


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(rows: Sequence[ResultRow], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))
    return path


def read_csv(path: str | Path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        out = []
        for rec in reader:
            kwargs: dict[str, Any] = {}
            for f in fields(ResultRow):
                raw = rec[f.name]
                kwargs[f.name] = int(raw) if f.type == "int" else float(raw) if f.type == "float" else raw
            out.append(ResultRow(**kwargs))
    return out


def _is_capped(r: ResultRow) -> bool:
    vals = (r.sd_db, r.nr_db, r.dsnr_db)
    return bool(r.flags) or any(abs(v) >= CAP_DB or v <= SD_FLOOR_DB for v in vals if math.isfinite(v))


_METRICS = (("sd_db", "SD (dB)"), ("nr_db", "NR (dB)"), ("dsnr_db", "ΔSNR (dB)"))


def _slug(*parts: Any) -> str:
    text = "_".join(str(p) for p in parts)
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in text)


def emit_plots(rows: Sequence[ResultRow], output_dir: str | Path, sample_rate_hz: float = 16000.0) -> list[Path]:
    """SVG figures: metrics vs Delta (one line per L_a) and metrics vs L_a (one line per Delta)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ssanc"
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        if not r.failed:
            groups.setdefault((r.scenario_id, r.beta_divisor, r.rho_divisor), []).append(r)
    for (sid, bd, rd), grp in groups.items():
        deltas = sorted({r.delta for r in grp})
        las = sorted({r.l_a for r in grp})
        title = f"{sid}: beta = lambda1/{bd:g}, rho divisor {rd:g}"
        if len(deltas) > 1:
            written.append(_plot_group(plt, grp, "delta", "l_a", las, title, out / f"{_slug(sid, 'delta', bd, rd)}.svg", sample_rate_hz))
        if len(las) > 1:
            shown = deltas if len(deltas) <= 6 else [deltas[round(k)] for k in np.linspace(0, len(deltas) - 1, 6)]
            sub = [r for r in grp if r.delta in shown]
            written.append(_plot_group(plt, sub, "l_a", "delta", shown, title, out / f"{_slug(sid, 'la', bd, rd)}.svg", None))
    return written


def _plot_group(plt, rows, x_attr, series_attr, series, title, path: Path, fs) -> Path:
    fig, axes = plt.subplots(3, 1, figsize=(6.4, 8.0), sharex=True)
    for ax, (metric, label) in zip(axes, _METRICS):
        for s in series:
            pts = sorted((r for r in rows if getattr(r, series_attr) == s), key=lambda r: getattr(r, x_attr))
            xs = [getattr(r, x_attr) for r in pts]
            ys = [getattr(r, metric) for r in pts]
            name = "L_a" if series_attr == "l_a" else "Δ"
            ax.plot(xs, ys, marker="o", markersize=3, label=f"{name} = {s}")
            capped = [(x, y) for x, y, r in zip(xs, ys, pts) if _is_capped(r)]
            if capped:
                cx, cy = zip(*capped)
                ax.plot(cx, cy, linestyle="none", marker="x", color="red", markersize=8, label="capped / floored")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[0].set_title(title, fontsize=9)
    axes[0].legend(fontsize=7, ncol=2)
    if x_attr == "delta":
        axes[-1].set_xlabel("Δ (samples)")
        top = axes[0].secondary_xaxis("top", functions=(lambda d: d / fs * 1000.0, lambda ms: ms * fs / 1000.0))
        top.set_xlabel("Δ (ms)")
    else:
        axes[-1].set_xlabel("L_a (samples)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_results(rows: Sequence[ResultRow], output_dir: str | Path, sample_rate_hz: float = 16000.0) -> list[Path]:
    """Write ``results.csv`` and the SVG plots; returns the written paths.

    ``OSError`` is raised if the directory cannot be created or written.
    """
    if not rows:
        raise ConfigError("no result rows to emit")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(rows, out / "results.csv")]
    return paths + emit_plots(rows, out, sample_rate_hz)
