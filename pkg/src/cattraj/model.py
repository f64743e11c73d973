"""Physical model description: system operators, drive waveforms, weights.

The environment drive is a superposition ``c_alpha |alpha> + c_beta |beta>``
of two continuous-mode coherent states described by square-integrable
complex amplitude functions ``alpha(t)``, ``beta(t)`` supported on ``[0, T]``.
Everything in this module is immutable after validation and can be shared
freely between workers.

Units: hbar = 1, the coupling operator carries 1/sqrt(time), waveform
amplitudes carry 1/sqrt(time), so ``|alpha(t)|^2`` is a photon flux.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteWaveform, NormalizationViolation
from .linalg import cmatrix, cvector

__all__ = [
    "Waveform",
    "SystemModel",
    "DriveSpec",
    "GridSpec",
    "overlap",
    "log_overlap",
    "discretize",
    "validate",
    "load_model_file",
    "waveform_from_config",
    "drive_from_config",
    "complex_from_pair",
    "pair_from_complex",
]

HERMITICITY_TOL = 1e-12


def complex_from_pair(value) -> complex:
    """Read a complex number stored as ``[re, im]`` (a bare real is accepted)."""
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ConfigError(f"expected [re, im] pair, got {value!r}")


def pair_from_complex(z: complex) -> list:
    return [float(np.real(z)), float(np.imag(z))]


def _matrix_from_nested(value) -> np.ndarray:
    """Read a matrix stored as nested [re, im] pairs."""
    try:
        return cmatrix([[complex_from_pair(x) for x in row] for row in value])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad matrix entry: {exc}") from exc


@dataclass(frozen=True)
class Waveform:
    """One drive amplitude ``w(t)`` on the horizon ``[0, T]``.

    ``w(t) = 0`` for ``t >= T`` by convention, which makes all tail overlap
    products finite.  Waveforms are built through the preset constructors
    (:meth:`constant`, :meth:`gaussian_pulse`, :meth:`exponential`,
    :meth:`chirp`) or from sample arrays with linear interpolation
    (:meth:`sampled`).

    Attributes
    ----------
    horizon : float
        Support length T > 0.
    kind : str
        Preset name, used for serialization.
    params : dict
        Preset parameters, serializable as JSON.
    quad_step : float
        Default quadrature step for integrals over this waveform.
    """

    horizon: float
    kind: str
    params: dict
    _fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    quad_step: float = 0.0

    def __post_init__(self):
        if not (self.horizon > 0.0) or not math.isfinite(self.horizon):
            raise ConfigError(f"waveform horizon must be positive, got {self.horizon}")
        if self.quad_step <= 0.0:
            object.__setattr__(self, "quad_step", self.horizon / 1024.0)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = (t >= 0.0) & (t <= self.horizon)
        values = np.where(inside, self._fn(np.where(inside, t, 0.0)), 0.0 + 0.0j)
        if not np.all(np.isfinite(values)):
            raise NonFiniteWaveform(f"waveform '{self.kind}' evaluated to a non-finite value")
        return values if values.ndim else complex(values)

    def squared_norm(self, t0: float = 0.0, t1: float | None = None) -> float:
        """Flux integral ``int |w(t)|^2 dt`` over ``[t0, t1]`` (default full horizon)."""
        t1 = self.horizon if t1 is None else t1
        value = _simpson(lambda t: np.abs(self(t)) ** 2, t0, t1, self.quad_step)
        return float(np.real(value))

    # -- preset constructors -------------------------------------------------

    @classmethod
    def constant(cls, amplitude: complex, horizon: float) -> "Waveform":
        a = complex(amplitude)
        return cls(horizon, "constant", {"amplitude": pair_from_complex(a)},
                   lambda t: np.full_like(t, a, dtype=complex))

    @classmethod
    def gaussian_pulse(cls, amplitude: complex, center: float, width: float,
                       horizon: float) -> "Waveform":
        a = complex(amplitude)
        return cls(horizon, "gaussian",
                   {"amplitude": pair_from_complex(a), "center": center, "width": width},
                   lambda t: a * np.exp(-((t - center) ** 2) / (2.0 * width ** 2)))

    @classmethod
    def exponential(cls, amplitude: complex, rate: float, horizon: float) -> "Waveform":
        a = complex(amplitude)
        return cls(horizon, "exponential",
                   {"amplitude": pair_from_complex(a), "rate": rate},
                   lambda t: a * np.exp(-rate * t))

    @classmethod
    def chirp(cls, amplitude: complex, omega0: float, sweep: float,
              horizon: float) -> "Waveform":
        """Constant-magnitude drive with linearly swept phase
        ``a * exp(i (omega0 t + sweep t^2 / 2))``."""
        a = complex(amplitude)
        return cls(horizon, "chirp",
                   {"amplitude": pair_from_complex(a), "omega0": omega0, "sweep": sweep},
                   lambda t: a * np.exp(1j * (omega0 * t + 0.5 * sweep * t * t)))

    @classmethod
    def sampled(cls, values: Sequence[complex], horizon: float) -> "Waveform":
        """Uniformly sampled waveform on [0, horizon), linearly interpolated.

        ``values[j]`` is the amplitude at ``t = j * horizon / len(values)``;
        the last segment interpolates toward 0 at the horizon.
        """
        vals = cvector(values)
        n = len(vals)
        ts = np.arange(n + 1) * (horizon / n)
        vals_ext = np.concatenate([vals, [0.0 + 0.0j]])

        def fn(t):
            re = np.interp(t, ts, vals_ext.real)
            im = np.interp(t, ts, vals_ext.imag)
            return re + 1j * im

        return cls(horizon, "sampled",
                   {"values": [pair_from_complex(v) for v in vals]},
                   fn, quad_step=horizon / n / 4.0)

    def to_config(self) -> dict:
        cfg = {"preset": self.kind, "horizon": self.horizon}
        cfg.update(self.params)
        return cfg


def waveform_from_config(cfg: dict) -> Waveform:
    """Build a waveform from its JSON description."""
    if not isinstance(cfg, dict) or "preset" not in cfg:
        raise ConfigError(f"waveform config must carry a 'preset' field, got {cfg!r}")
    kind = cfg["preset"]
    try:
        horizon = float(cfg["horizon"])
        if kind == "constant":
            return Waveform.constant(complex_from_pair(cfg["amplitude"]), horizon)
        if kind == "gaussian":
            return Waveform.gaussian_pulse(complex_from_pair(cfg["amplitude"]),
                                           float(cfg["center"]), float(cfg["width"]), horizon)
        if kind == "exponential":
            return Waveform.exponential(complex_from_pair(cfg["amplitude"]),
                                        float(cfg["rate"]), horizon)
        if kind == "chirp":
            return Waveform.chirp(complex_from_pair(cfg["amplitude"]),
                                  float(cfg["omega0"]), float(cfg["sweep"]), horizon)
        if kind == "sampled":
            return Waveform.sampled([complex_from_pair(v) for v in cfg["values"]], horizon)
    except KeyError as exc:
        raise ConfigError(f"waveform preset '{kind}' is missing field {exc}") from exc
    raise ConfigError(f"unknown waveform preset '{kind}'")


@dataclass(frozen=True)
class SystemModel:
    """Finite-dimensional system: Hamiltonian H (Hermitian) and coupling L."""

    dim: int
    hamiltonian: np.ndarray
    coupling: np.ndarray

    def __post_init__(self):
        h = cmatrix(self.hamiltonian)
        l = cmatrix(self.coupling)
        if h.shape != (self.dim, self.dim) or l.shape != (self.dim, self.dim):
            raise ConfigError(f"operators must be {self.dim}x{self.dim}, got {h.shape}, {l.shape}")
        if np.max(np.abs(h - h.conj().T)) > HERMITICITY_TOL * max(1.0, np.max(np.abs(h))):
            raise ConfigError("hamiltonian is not Hermitian")
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "coupling", l)


@dataclass(frozen=True)
class GridSpec:
    """Uniform time grid: step ``tau`` and number of collisions/steps."""

    tau: float
    steps: int

    def __post_init__(self):
        if not (self.tau > 0.0) or self.steps < 0:
            raise ConfigError(f"invalid grid: tau={self.tau}, steps={self.steps}")

    @classmethod
    def from_horizon(cls, tau: float, horizon: float) -> "GridSpec":
        steps = int(math.ceil(horizon / tau - 1e-12))
        return cls(tau, steps)

    @property
    def horizon(self) -> float:
        return self.tau * self.steps

    def times(self) -> np.ndarray:
        """Left endpoints ``j * tau`` for j = 0 .. steps-1."""
        return np.arange(self.steps) * self.tau


@dataclass(frozen=True)
class DriveSpec:
    """Superposition weights and the two drive waveforms.

    The weights must satisfy
    ``|c_a|^2 + 2 Re(c_a conj(c_b) <beta|alpha>) + |c_b|^2 = 1``
    where ``<beta|alpha>`` is the full-horizon field overlap.  Use
    :meth:`superposition` to build normalized weights from any raw pair.
    """

    c_alpha: complex
    c_beta: complex
    alpha: Waveform
    beta: Waveform

    @classmethod
    def coherent(cls, alpha: Waveform) -> "DriveSpec":
        """Single coherent drive (c_beta = 0); beta kept as a zero waveform."""
        return cls(1.0 + 0.0j, 0.0 + 0.0j, alpha, Waveform.constant(0.0, alpha.horizon))

    @classmethod
    def superposition(cls, alpha: Waveform, beta: Waveform,
                      w_alpha: complex = 1.0, w_beta: complex = 1.0) -> "DriveSpec":
        """Normalize raw weights against the field overlap and build the spec."""
        ov = overlap(alpha, beta, 0.0, max(alpha.horizon, beta.horizon))
        w_alpha = complex(w_alpha)
        w_beta = complex(w_beta)
        norm2 = (abs(w_alpha) ** 2 + abs(w_beta) ** 2
                 + 2.0 * np.real(w_alpha * np.conj(w_beta) * ov))
        if norm2 <= 1e-14:
            raise ConfigError("superposition weights have (numerically) zero norm")
        scale = 1.0 / math.sqrt(norm2)
        return cls(w_alpha * scale, w_beta * scale, alpha, beta)

    @classmethod
    def even_cat(cls, alpha: Waveform) -> "DriveSpec":
        """Equal-weight superposition of ``alpha`` and ``-alpha``."""
        cfg = alpha.to_config()
        if "amplitude" in cfg:
            cfg["amplitude"] = pair_from_complex(-complex_from_pair(cfg["amplitude"]))
        elif "values" in cfg:
            cfg["values"] = [pair_from_complex(-complex_from_pair(v)) for v in cfg["values"]]
        else:
            raise ConfigError(f"cannot negate waveform preset '{alpha.kind}'")
        return cls.superposition(alpha, waveform_from_config(cfg), 1.0, 1.0)


def _simpson(fn: Callable[[np.ndarray], np.ndarray], t0: float, t1: float,
             max_step: float) -> complex:
    """Composite Simpson rule for a complex integrand on [t0, t1]."""
    if t1 <= t0:
        return 0.0 + 0.0j
    n = max(2, int(math.ceil((t1 - t0) / max_step)))
    if n % 2:
        n += 1
    ts = np.linspace(t0, t1, n + 1)
    vals = np.asarray(fn(ts), dtype=complex)
    h = (t1 - t0) / n
    weights = np.ones(n + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return complex(h / 3.0 * np.sum(weights * vals))


def log_overlap(alpha: Waveform, beta: Waveform, t0: float, t1: float,
                max_step: float | None = None) -> complex:
    """Log of the coherent-state overlap on [t0, t1].

    Returns ``-1/2 int_{t0}^{t1} (|alpha|^2 + |beta|^2 - 2 alpha conj(beta)) dt``
    so that ``exp`` of it is ``<beta|alpha>`` restricted to the interval.
    The log-domain form avoids underflow for strongly distinguishable
    waveforms and never wraps the accumulated phase.
    """
    if not (0.0 <= t0 <= t1):
        raise ValueError(f"need 0 <= t0 <= t1, got t0={t0}, t1={t1}")
    step = min(alpha.quad_step, beta.quad_step)
    if max_step is not None:
        step = min(step, max_step)

    def integrand(t):
        va = np.asarray(alpha(t), dtype=complex)
        vb = np.asarray(beta(t), dtype=complex)
        return np.abs(va) ** 2 + np.abs(vb) ** 2 - 2.0 * va * np.conj(vb)

    return -0.5 * _simpson(integrand, t0, t1, step)


def overlap(alpha: Waveform, beta: Waveform, t0: float, t1: float,
            max_step: float | None = None) -> complex:
    """Coherent-state overlap ``<beta|alpha>`` restricted to ``[t0, t1]``."""
    return complex(np.exp(log_overlap(alpha, beta, t0, t1, max_step)))


def discretize(w: Waveform, grid: GridSpec) -> np.ndarray:
    """Slot amplitudes ``w(j * tau)`` (left endpoint) for every collision slot."""
    if grid.steps == 0:
        return np.zeros(0, dtype=complex)
    return np.asarray(w(grid.times()), dtype=complex)


def validate(spec: DriveSpec, tol: float = 1e-10) -> None:
    """Check the drive-spec normalization and both waveform invariants.

    Raises
    ------
    NormalizationViolation
        If the weight constraint fails beyond ``tol``; the exception carries
        the residual.
    NonFiniteWaveform
        If either waveform evaluates to a non-finite value on its horizon.
    """
    horizon = max(spec.alpha.horizon, spec.beta.horizon)
    for w in (spec.alpha, spec.beta):
        probe = w(np.linspace(0.0, horizon, 257))  # raises NonFiniteWaveform
        if not np.all(np.isfinite(probe)):
            raise NonFiniteWaveform("waveform evaluation produced non-finite values")
        if not math.isfinite(w.squared_norm()):
            raise NonFiniteWaveform("waveform flux integral is not finite")
    ov = overlap(spec.alpha, spec.beta, 0.0, horizon)
    norm = (abs(spec.c_alpha) ** 2 + abs(spec.c_beta) ** 2
            + 2.0 * np.real(spec.c_alpha * np.conj(spec.c_beta) * ov))
    residual = abs(norm - 1.0)
    if residual > tol:
        raise NormalizationViolation(residual)


def drive_from_config(cfg: dict) -> DriveSpec:
    """Build a DriveSpec from its JSON description.

    With ``"normalize": true`` (the default) the configured weights are
    rescaled to satisfy the normalization constraint; otherwise they are
    taken verbatim and validated.
    """
    try:
        alpha = waveform_from_config(cfg["alpha"])
        c_alpha = complex_from_pair(cfg.get("c_alpha", [1.0, 0.0]))
        if "beta" in cfg:
            beta = waveform_from_config(cfg["beta"])
            c_beta = complex_from_pair(cfg.get("c_beta", [0.0, 0.0]))
        else:
            beta = Waveform.constant(0.0, alpha.horizon)
            c_beta = 0.0 + 0.0j
    except KeyError as exc:
        raise ConfigError(f"drive config is missing field {exc}") from exc
    if cfg.get("normalize", True):
        spec = DriveSpec.superposition(alpha, beta, c_alpha, c_beta)
    else:
        spec = DriveSpec(c_alpha, c_beta, alpha, beta)
    validate(spec)
    return spec


def load_model_file(path) -> tuple[SystemModel, np.ndarray]:
    """Read a system model JSON file.

    Schema::

        {
          "dim": 2,
          "hamiltonian": [[[re, im], ...], ...],
          "coupling":    [[[re, im], ...], ...],
          "initial_state": [[re, im], ...]
        }

    Returns the model and the normalized initial state vector.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model file {path} is not valid JSON: {exc}") from exc
    try:
        dim = int(raw["dim"])
        model = SystemModel(dim, _matrix_from_nested(raw["hamiltonian"]),
                            _matrix_from_nested(raw["coupling"]))
        psi0 = cvector([complex_from_pair(v) for v in raw["initial_state"]])
    except KeyError as exc:
        raise ConfigError(f"model file {path} is missing field {exc}") from exc
    if psi0.shape != (dim,):
        raise ConfigError(f"initial state must have length {dim}, got {psi0.shape}")
    nrm = np.linalg.norm(psi0)
    if nrm < 1e-12:
        raise ConfigError("initial state has zero norm")
    return model, psi0 / nrm
