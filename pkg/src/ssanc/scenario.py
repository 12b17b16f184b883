"""Synthetic free-field acoustic scenes for a multi-microphone hearable.

Sources sit on a circle (``distance_m``, default 2 m) at given azimuths
(0 deg = front = +x, 90 deg = left = +y). Every source-to-microphone path is a
windowed-sinc fractional delay with 1/r attenuation. Microphones may add an
extra delay and gain (used for the eardrum microphone to model ear-canal
propagation and passive attenuation). Paths can also be given directly as lists
of ``(delay_samples, gain)`` arrivals per microphone.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .dsp import ImpulseResponse, Signal, _conv, fractional_delay_fir, load_taps, minimum_phase, save_taps
from .errors import InvalidArgument
from .structures import ControlFilter, MultichannelSignal, SecondaryPathMatrix, stacked_windows

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
MIN_DISTANCE_M = 0.1
_CHUNK = 4096


@dataclass(frozen=True)
class MicSpec:
    position: tuple[float, float, float]
    name: str = ""
    extra_delay_samples: float = 0.0
    gain: float = 1.0


@dataclass(frozen=True)
class SignalSpec:
    """Source waveform: ``white``, ``multitone``, ``speech_like``, ``babble`` or ``wav``."""

    kind: str = "white"
    path: str | None = None
    frequencies_hz: tuple[float, ...] = ()
    amplitudes: tuple[float, ...] = ()
    talkers: int = 6
    seed_offset: int = 0


@dataclass(frozen=True)
class SourceSpec:
    azimuth_deg: float
    signal: SignalSpec = field(default_factory=SignalSpec)
    distance_m: float = 2.0
    elevation_deg: float = 0.0
    level_db: float = 0.0
    # optional explicit paths: one list of (delay_samples, gain) per microphone
    arrivals: tuple[tuple[tuple[float, float], ...], ...] | None = None


@dataclass(frozen=True)
class SecondaryPathSpec:
    """Loudspeaker-to-eardrum response.

    ``random``: seeded Gaussian taps with exponential decay after ``bulk_delay``
    samples, unit energy, optionally converted to minimum phase after the bulk
    delay. ``file``: taps read from a one-per-line text file.
    """

    kind: str = "random"
    bulk_delay: int = 2
    decay_ms: float = 5.0
    min_phase: bool = False
    seed: int = 0
    path: str | None = None


@dataclass(frozen=True)
class SceneConfig:
    microphones: tuple[MicSpec, ...]
    error_mic: MicSpec
    desired: SourceSpec
    noises: tuple[SourceSpec, ...] = ()
    sample_rate_hz: int = 16000
    target_leakage_snr_db: float = -5.0
    secondary_path: SecondaryPathSpec = field(default_factory=SecondaryPathSpec)
    L_g: int = 64
    duration_s: float = 3.0
    reference_channel: int = 0
    half_width: int = 16
    id: str = "scene"

    def __post_init__(self) -> None:
        if len(self.microphones) < 1:
            raise InvalidArgument("need at least one outer microphone (K >= 1)")
        if self.duration_s <= 0:
            raise InvalidArgument("duration must be positive")
        if not 0 <= self.reference_channel < len(self.microphones):
            raise InvalidArgument(f"reference channel {self.reference_channel} out of range")
        if self.L_g < 1:
            raise InvalidArgument("L_g must be positive")

    @property
    def K(self) -> int:
        return len(self.microphones)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def all_mics(self) -> tuple[MicSpec, ...]:
        return (*self.microphones, self.error_mic)


@dataclass(frozen=True)
class ScenePaths:
    desired: tuple[ImpulseResponse, ...]
    noises: tuple[tuple[ImpulseResponse, ...], ...]


@dataclass(frozen=True)
class SceneRealization:
    """Component-separated signals: ``x_*`` at the K outer mics, ``p_*`` at the eardrum."""

    x_s: MultichannelSignal
    x_v: MultichannelSignal
    p_s: Signal
    p_v: Signal
    g: ImpulseResponse
    reference_channel: int
    noise_parts: tuple[np.ndarray, ...] = ()
    x_ref_s: Signal | None = None

    @property
    def K(self) -> int:
        return self.x_s.n_channels

    @property
    def sample_rate_hz(self) -> int:
        return self.x_s.sample_rate_hz

    def __len__(self) -> int:
        return len(self.x_s)

    @property
    def p(self) -> Signal:
        return Signal(self.p_s.samples + self.p_v.samples, self.sample_rate_hz)

    def stacked(self, component: str = "mix") -> np.ndarray:
        """``(K+1, N)`` channels with the leakage appended (perfect secondary-path estimate)."""
        if component == "speech":
            return np.vstack([self.x_s.samples, self.p_s.samples])
        if component == "noise":
            return np.vstack([self.x_v.samples, self.p_v.samples])
        if component == "mix":
            return np.vstack([self.x_s.samples + self.x_v.samples, self.p_s.samples + self.p_v.samples])
        raise InvalidArgument(f"unknown component {component!r}")


def _source_position(src: SourceSpec) -> np.ndarray:
    az, el = math.radians(src.azimuth_deg), math.radians(src.elevation_deg)
    return src.distance_m * np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)])


def _arrivals_from_geometry(src: SourceSpec, mics: Sequence[MicSpec], fs: int) -> list[list[tuple[float, float]]]:
    pos = _source_position(src)
    arrivals = []
    for mic in mics:
        r = float(np.linalg.norm(pos - np.asarray(mic.position, dtype=float)))
        if r < 1e-9:
            raise InvalidArgument(f"source at {src.azimuth_deg} deg coincides with microphone {mic.name!r}")
        delay = r / SPEED_OF_SOUND * fs + mic.extra_delay_samples
        arrivals.append([(delay, mic.gain / max(r, MIN_DISTANCE_M))])
    # common per-source offset only shifts the source waveform in time
    offset = min(d for arr in arrivals for d, _ in arr)
    return [[(d - offset, gain) for d, gain in arr] for arr in arrivals]


def _path_from_arrivals(arrivals: Sequence[tuple[float, float]], half_width: int, fs: int) -> ImpulseResponse:
    if not arrivals:
        raise InvalidArgument("path needs at least one arrival")
    kernels = []
    for delay, gain in arrivals:
        if delay < 0:
            raise InvalidArgument(f"arrival delay {delay} is negative")
        kernels.append(gain * fractional_delay_fir(delay, half_width))
    taps = np.zeros(max(k.size for k in kernels))
    for k in kernels:
        taps[: k.size] += k
    return ImpulseResponse(taps, fs)


def synth_paths(cfg: SceneConfig) -> ScenePaths:
    """Paths from each source to the K outer microphones and then the eardrum."""

    def paths_for(src: SourceSpec) -> tuple[ImpulseResponse, ...]:
        if src.arrivals is not None:
            if len(src.arrivals) != cfg.K + 1:
                raise InvalidArgument(f"explicit arrivals need K+1={cfg.K + 1} entries")
            arrivals = src.arrivals
        else:
            arrivals = _arrivals_from_geometry(src, cfg.all_mics, cfg.sample_rate_hz)
        return tuple(_path_from_arrivals(a, cfg.half_width, cfg.sample_rate_hz) for a in arrivals)

    return ScenePaths(paths_for(cfg.desired), tuple(paths_for(n) for n in cfg.noises))


def synth_secondary_path(spec: SecondaryPathSpec, L_g: int, sample_rate_hz: int) -> ImpulseResponse:
    if spec.kind == "file":
        if spec.path is None:
            raise InvalidArgument("secondary path kind 'file' needs a path")
        taps = load_taps(spec.path)
        if taps.size != L_g:
            raise InvalidArgument(f"secondary path file has {taps.size} taps, L_g={L_g}")
        return ImpulseResponse(taps, sample_rate_hz)
    if spec.kind != "random":
        raise InvalidArgument(f"unknown secondary path kind {spec.kind!r}")
    if not 0 <= spec.bulk_delay < L_g:
        raise InvalidArgument(f"bulk delay {spec.bulk_delay} must be below L_g={L_g}")
    rng = np.random.default_rng([spec.seed, 0x5EC0])
    n = np.arange(L_g - spec.bulk_delay)
    tail = rng.standard_normal(n.size) * np.exp(-n / (spec.decay_ms * 1e-3 * sample_rate_hz))
    if spec.min_phase and tail.size > 1:
        tail = minimum_phase(tail)
    taps = np.concatenate([np.zeros(spec.bulk_delay), tail])
    return ImpulseResponse(taps / np.linalg.norm(taps), sample_rate_hz)


def _read_wav(path: str, fs: int) -> np.ndarray:
    rate, data = scipy.io.wavfile.read(path)
    if rate != fs:
        raise InvalidArgument(f"{path}: sample rate {rate} Hz differs from scene rate {fs} Hz")
    if data.ndim != 1:
        raise InvalidArgument(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(float) / 32768.0
    if data.dtype == np.float32 or data.dtype == np.float64:
        return data.astype(float)
    raise InvalidArgument(f"{path}: unsupported sample format {data.dtype}")


def _speech_like(rng: np.random.Generator, n: int, fs: int) -> np.ndarray:
    # spectrally tilted noise with a slow syllable-rate envelope
    x = scipy.signal.lfilter([1.0], [1.0, -0.85], rng.standard_normal(n))
    b, a = scipy.signal.butter(2, 80.0, btype="highpass", fs=fs)
    x = scipy.signal.lfilter(b, a, x)
    be, ae = scipy.signal.butter(2, 4.0, fs=fs)
    env = np.abs(scipy.signal.lfilter(be, ae, rng.standard_normal(n)))
    env = 0.2 + env / max(env.max(), 1e-12)
    return x * env


def generate_source(spec: SignalSpec, n: int, fs: int, seed: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index, spec.seed_offset])
    if spec.kind == "white":
        return rng.standard_normal(n)
    if spec.kind == "multitone":
        if not spec.frequencies_hz:
            raise InvalidArgument("multitone source needs frequencies")
        amps = spec.amplitudes or (1.0,) * len(spec.frequencies_hz)
        t = np.arange(n) / fs
        phases = rng.uniform(0, 2 * np.pi, len(spec.frequencies_hz))
        return sum(a * np.sin(2 * np.pi * f * t + ph) for f, a, ph in zip(spec.frequencies_hz, amps, phases))
    if spec.kind == "speech_like":
        return _speech_like(rng, n, fs)
    if spec.kind == "babble":
        return sum(_speech_like(np.random.default_rng([seed, index, spec.seed_offset, t]), n, fs) for t in range(spec.talkers))
    if spec.kind == "wav":
        if spec.path is None:
            raise InvalidArgument("wav source needs a path")
        data = _read_wav(spec.path, fs)
        if data.size == 0:
            raise InvalidArgument(f"{spec.path}: empty audio")
        reps = -(-n // data.size)
        return np.tile(data, reps)[:n]
    raise InvalidArgument(f"unknown source kind {spec.kind!r}")


def _propagate(src: np.ndarray, paths: Sequence[ImpulseResponse], n: int, lead: int) -> np.ndarray:
    out = np.empty((len(paths), n))
    for i, p in enumerate(paths):
        out[i] = _conv(src, p.taps)[lead : lead + n]
    return out


def noise_gains(p_s: np.ndarray, parts: Sequence[np.ndarray], target_snr_db: float, levels_db: Sequence[float]) -> np.ndarray:
    """Gains putting each noise part at its relative energy and the sum at the target SNR.

    Parts are first equalised to ``10^(level/10)`` relative energies at the
    eardrum, then scaled jointly so the summed noise meets the SNR exactly.
    """
    e_s = float(np.dot(p_s, p_s))
    if e_s <= 0:
        raise InvalidArgument("desired source is silent at the error microphone")
    energies = np.array([float(np.dot(p, p)) for p in parts])
    if np.any(energies <= 0):
        raise InvalidArgument("a noise source is silent at the error microphone")
    rel = 10.0 ** (np.asarray(levels_db, dtype=float) / 10.0)
    gains = np.sqrt(rel / rel.sum() / energies)
    total = sum(gk * p for gk, p in zip(gains, parts))
    target = e_s / 10.0 ** (target_snr_db / 10.0)
    return gains * math.sqrt(target / float(np.dot(total, total)))


def _realize(cfg: SceneConfig, seed: int, desired_signal: SignalSpec | None, with_noise: bool) -> SceneRealization:
    fs, n = cfg.sample_rate_hz, cfg.n_samples
    paths = synth_paths(cfg)
    lead = max(p.taps.size for p in paths.desired + tuple(x for ps in paths.noises for x in ps))
    desired = cfg.desired if desired_signal is None else replace(cfg.desired, signal=desired_signal)
    s = generate_source(desired.signal, n + lead, fs, seed, 0)
    comp_s = _propagate(s, paths.desired, n, lead)
    x_ref_s = Signal(comp_s[cfg.reference_channel], fs)
    if float(np.dot(comp_s[-1], comp_s[-1])) <= 0:
        raise InvalidArgument("desired source is silent at the error microphone")
    comp_v = np.zeros_like(comp_s)
    parts: list[np.ndarray] = []
    if with_noise and cfg.noises:
        raw = [
            _propagate(generate_source(src.signal, n + lead, fs, seed, i + 1), paths.noises[i], n, lead)
            for i, src in enumerate(cfg.noises)
        ]
        gains = noise_gains(comp_s[-1], [r[-1] for r in raw], cfg.target_leakage_snr_db, [src.level_db for src in cfg.noises])
        for gk, r in zip(gains, raw):
            comp_v += gk * r
            parts.append(gk * r[-1])
    elif with_noise:
        warnings.warn("scene has no noise sources; leakage noise is zero and SNR scaling skipped", stacklevel=3)
    g = synth_secondary_path(cfg.secondary_path, cfg.L_g, fs)
    return SceneRealization(
        x_s=MultichannelSignal(comp_s[:-1], fs),
        x_v=MultichannelSignal(comp_v[:-1], fs),
        p_s=Signal(comp_s[-1], fs),
        p_v=Signal(comp_v[-1], fs),
        g=g,
        reference_channel=cfg.reference_channel,
        noise_parts=tuple(parts),
        x_ref_s=x_ref_s,
    )


def realize_scene(cfg: SceneConfig, seed: int = 0) -> SceneRealization:
    """Propagate all sources and scale the noise to the target leakage SNR."""
    return _realize(cfg, seed, None, True)


def probe_scene(cfg: SceneConfig, seed: int = 0, duration_s: float = 10.0) -> SceneRealization:
    """Desired source only, driven by white noise, for ReIR identification."""
    probe_cfg = replace(cfg, duration_s=duration_s)
    return _realize(probe_cfg, seed + 7919, SignalSpec("white"), False)


def estimate_leakage(e: Signal, y: Signal, g_hat: ImpulseResponse) -> Signal:
    """``p_hat(n) = e(n) - g_hat' y(n)`` with ``y(n) = [y(n) ... y(n-L_g+1)]``, zero history."""
    if e.sample_rate_hz != y.sample_rate_hz or y.sample_rate_hz != g_hat.sample_rate_hz:
        raise InvalidArgument("estimate_leakage: sample-rate mismatch")
    if len(e) != len(y):
        raise InvalidArgument("estimate_leakage: e and y differ in length")
    anti = np.convolve(y.samples, g_hat.taps)[: len(e)]
    return Signal(e.samples - anti, e.sample_rate_hz)


@dataclass(frozen=True)
class ControlOutput:
    """Controlled components and the evaluation target.

    ``target`` is the high-passed reference speech delayed by Delta;
    ``e_s_filtered`` is ``e_s`` through the same high-pass, so the speech error
    ``e_s_filtered - target`` only contains the band of interest.
    """

    e_s: Signal
    e_v: Signal
    target: Signal
    e_s_filtered: Signal
    Delta: int


def combined_filter(w: ControlFilter, G: SecondaryPathMatrix) -> np.ndarray:
    """``q + G w`` as a flat ``(K+1) L`` vector."""
    f = G.apply(w)
    f[(G.n_blocks - 1) * G.L] += 1.0
    return f


def filter_stacked(channels: np.ndarray, f: np.ndarray, L: int) -> np.ndarray:
    """``f' x(n)`` for every n, zero history, as a batched window product."""
    N = channels.shape[1]
    out = np.empty(N)
    for start in range(0, N, _CHUNK):
        stop = min(start + _CHUNK, N)
        out[start:stop] = stacked_windows(channels, L, start, stop) @ f
    return out


def apply_control(
    scene: SceneRealization,
    w: ControlFilter,
    G: SecondaryPathMatrix,
    hp: np.ndarray,
    Delta: int,
) -> ControlOutput:
    if w.n_blocks != scene.K + 1:
        raise InvalidArgument(f"control filter has {w.n_blocks} blocks, scene needs K+1={scene.K + 1}")
    if w.n_blocks != G.n_blocks or w.L_w != G.L_w:
        raise InvalidArgument("control filter and secondary-path matrix disagree on dimensions")
    if not np.allclose(G.taps, scene.g.taps[: G.L_g]) or G.L_g != len(scene.g):
        raise InvalidArgument("secondary-path matrix was not built from the scene's secondary path")
    fs, N = scene.sample_rate_hz, len(scene)
    f = combined_filter(w, G)
    e_s = filter_stacked(scene.stacked("speech"), f, G.L)
    e_v = filter_stacked(scene.stacked("noise"), f, G.L)
    ref = scene.x_s.samples[scene.reference_channel]
    hp = np.asarray(hp, dtype=float)
    delayed = np.concatenate([np.zeros(Delta), ref])[:N]
    target = np.convolve(delayed, hp)[:N]
    e_s_hp = np.convolve(e_s, hp)[:N]
    return ControlOutput(Signal(e_s, fs), Signal(e_v, fs), Signal(target, fs), Signal(e_s_hp, fs), int(Delta))


@dataclass(frozen=True)
class ClosedLoopResult:
    e: np.ndarray
    y: np.ndarray
    p_hat: np.ndarray


def simulate_closed_loop(
    x_outer: np.ndarray,
    p: np.ndarray,
    w: ControlFilter,
    g: np.ndarray,
    g_hat: np.ndarray,
) -> ClosedLoopResult:
    """Sample-by-sample loop: loudspeaker drive from outer mics and the leakage estimate.

    ``y(n) = sum_k w_k' x_k(n) + w_{K+1}' p_hat(n)``, ``e(n) = p(n) + g' y(n)`` and
    ``p_hat(n) = e(n) - g_hat' y(n)``. The instantaneous dependence of ``p_hat(n)``
    on ``y(n)`` (through ``g_0`` and ``g_hat_0``) is resolved exactly.
    """
    x_outer = np.atleast_2d(np.asarray(x_outer, dtype=float))
    K, N = x_outer.shape
    if w.n_blocks != K + 1:
        raise InvalidArgument("control filter block count must be K+1")
    g = np.asarray(g, dtype=float)
    g_hat = np.asarray(g_hat, dtype=float)
    L_w = w.L_w
    Lg = max(g.size, g_hat.size)
    g_full = np.zeros(Lg)
    g_full[: g.size] = g
    gh_full = np.zeros(Lg)
    gh_full[: g_hat.size] = g_hat
    a = w.blocks[K, 0]
    gamma = g_full[0] - gh_full[0]
    denom = 1.0 - a * gamma
    if abs(denom) < 1e-12:
        raise InvalidArgument("closed loop has an algebraic singularity (w_{K+1,0} * (g_0 - g_hat_0) = 1)")
    # outer-microphone contribution is open-loop
    y_open = sum(np.convolve(x_outer[k], w.blocks[k])[:N] for k in range(K))
    pad = max(L_w, Lg)
    y = np.zeros(N + pad)
    p_hat = np.zeros(N + pad)
    e = np.zeros(N)
    w_leak_rev = w.blocks[K][::-1]
    g_rev = g_full[::-1]
    gh_rev = gh_full[::-1]
    for n in range(N):
        i = n + pad
        # contributions of past samples only
        y_past = float(np.dot(w_leak_rev[:-1], p_hat[i - L_w + 1 : i])) if L_w > 1 else 0.0
        anti_past = float(np.dot(g_rev[:-1], y[i - Lg + 1 : i])) if Lg > 1 else 0.0
        est_past = float(np.dot(gh_rev[:-1], y[i - Lg + 1 : i])) if Lg > 1 else 0.0
        y_rest = y_open[n] + y_past
        b = p[n] + anti_past - est_past
        y[i] = (y_rest + a * b) / denom
        e[n] = p[n] + anti_past + g_full[0] * y[i]
        p_hat[i] = e[n] - est_past - gh_full[0] * y[i]
    return ClosedLoopResult(e, y[pad:], p_hat[pad:])


def save_impulse_response(path: str | Path, ir: ImpulseResponse) -> None:
    save_taps(path, ir.taps, header=f"sample_rate_hz={ir.sample_rate_hz}")


def load_impulse_response(path: str | Path, sample_rate_hz: int | None = None) -> ImpulseResponse:
    rate = sample_rate_hz
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") and "sample_rate_hz=" in line:
            rate = int(line.split("sample_rate_hz=")[1].split()[0])
            break
    if rate is None:
        raise InvalidArgument(f"{path}: no sample rate in header and none given")
    return ImpulseResponse(load_taps(path), rate)
