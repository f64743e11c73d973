"""Closed-form single-mode cavity oracle.

For a damped cavity (``H = omega0 a'a``, ``L = sqrt(Gamma) a``) starting in
a coherent state ``|u>``, the record-averaged state stays a combination of
coherent-state projectors whose amplitudes ``f_t`` (alpha branch) and
``g_t`` (beta branch) solve a linear damped-driven ODE.  Conditioning on a
measurement record only multiplies the four blocks by scalar stochastic
coefficients ``G``; the coherent amplitudes themselves stay deterministic.
This module provides those closed forms plus a truncated Fock-space
realization so the scalar oracle can be compared pathwise against the
generic operator-space integrators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import JumpAtZeroIntensity, NegativeIntensity, TruncationTooSmall
from .model import DriveSpec, GridSpec, SystemModel, Waveform, _simpson
from .sme import JUMP_INTENSITY_TOL

__all__ = [
    "CavityParams",
    "GCoefficients",
    "annihilation",
    "cavity_system_model",
    "coherent_fock",
    "coherent_overlap",
    "amplitudes",
    "amplitude_table",
    "apriori_state",
    "conditional_state",
    "counting_intensities",
    "g_counting_step",
    "g_homodyne_step",
]


@dataclass(frozen=True)
class CavityParams:
    """Cavity frequency, damping rate, initial amplitude, Fock truncation."""

    omega0: float
    gamma: float
    u: complex
    n_max: int = 30

    def __post_init__(self):
        if self.omega0 <= 0 or self.gamma <= 0 or self.n_max < 1:
            raise ValueError(f"invalid cavity parameters: {self}")

    @property
    def decay(self) -> complex:
        """Complex damping exponent ``i omega0 + Gamma / 2``."""
        return 1j * self.omega0 + 0.5 * self.gamma


def annihilation(n_max: int) -> np.ndarray:
    """Truncated annihilation operator on ``n_max + 1`` Fock levels."""
    a = np.zeros((n_max + 1, n_max + 1), dtype=complex)
    ns = np.arange(1, n_max + 1)
    a[ns - 1, ns] = np.sqrt(ns)
    return a


def cavity_system_model(params: CavityParams) -> SystemModel:
    """Fock-space SystemModel realizing the cavity."""
    a = annihilation(params.n_max)
    return SystemModel(params.n_max + 1,
                       params.omega0 * (a.conj().T @ a),
                       math.sqrt(params.gamma) * a)


def coherent_fock(v: complex, n_max: int, tail_tol: float = 1e-12) -> np.ndarray:
    """Coherent state ``|v>`` in the truncated Fock basis.

    Entries ``exp(-|v|^2/2) v^n / sqrt(n!)`` are built in log domain and
    renormalized after truncation.  Raises :class:`TruncationTooSmall` when
    the discarded Poisson tail exceeds ``tail_tol``.
    """
    v = complex(v)
    if v == 0.0:
        vec = np.zeros(n_max + 1, dtype=complex)
        vec[0] = 1.0
        return vec
    ns = np.arange(n_max + 1)
    # log |entry| = -|v|^2/2 + n log|v| - log(n!)/2; phase handled separately
    log_mag = -0.5 * abs(v) ** 2 + ns * math.log(abs(v)) - 0.5 * np.array(
        [math.lgamma(n + 1) for n in ns])
    phase = np.exp(1j * ns * np.angle(v))
    vec = np.exp(log_mag) * phase
    captured = float(np.sum(np.abs(vec) ** 2))
    if 1.0 - captured > tail_tol:
        raise TruncationTooSmall(
            f"n_max={n_max} keeps only {captured:.15f} of |v|={abs(v):.3f} coherent state")
    return vec / math.sqrt(captured)


def coherent_overlap(w: complex, v: complex) -> complex:
    """Closed-form coherent overlap ``<w|v> = exp(-(|w|^2+|v|^2-2 conj(w) v)/2)``."""
    return complex(np.exp(-0.5 * (abs(w) ** 2 + abs(v) ** 2 - 2.0 * np.conj(w) * v)))


def amplitudes(params: CavityParams, alpha: Waveform, beta: Waveform,
               t: float) -> tuple[complex, complex]:
    """Branch amplitudes at time ``t``.

    ``f_t = exp(-decay t) (u - sqrt(Gamma) int_0^t exp(decay s) alpha_s ds)``
    and the same for ``g_t`` with ``beta``; integrals by composite Simpson.
    """
    lam = params.decay
    root = math.sqrt(params.gamma)

    def driven(w: Waveform) -> complex:
        if t <= 0.0:
            return complex(params.u)
        integral = _simpson(lambda s: np.exp(lam * s) * np.asarray(w(s), dtype=complex),
                            0.0, t, w.quad_step)
        return complex(np.exp(-lam * t) * (params.u - root * integral))

    return driven(alpha), driven(beta)


def amplitude_table(params: CavityParams, alpha: Waveform, beta: Waveform,
                    grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Precompute ``f`` and ``g`` on all grid points ``0 .. steps``.

    The driving integral is accumulated with a cumulative Simpson rule
    (three-point rule per grid cell), giving O(tau^4) accuracy at O(1)
    per-step lookup cost during trajectory replay.
    """
    lam = params.decay
    root = math.sqrt(params.gamma)
    n = grid.steps
    ts = np.arange(n + 1) * grid.tau

    def cumulative(w: Waveform) -> np.ndarray:
        vals = np.zeros(n + 1, dtype=complex)
        acc = 0.0 + 0.0j
        for j in range(n):
            t0, t1 = ts[j], ts[j + 1]
            tm = 0.5 * (t0 + t1)
            f0 = np.exp(lam * t0) * complex(w(t0))
            fm = np.exp(lam * tm) * complex(w(tm))
            f1 = np.exp(lam * t1) * complex(w(t1))
            acc += (t1 - t0) / 6.0 * (f0 + 4.0 * fm + f1)
            vals[j + 1] = acc
        return vals

    f = np.exp(-lam * ts) * (params.u - root * cumulative(alpha))
    g = np.exp(-lam * ts) * (params.u - root * cumulative(beta))
    return f, g


@dataclass
class GCoefficients:
    """Scalar stochastic weights of the four cavity blocks.

    Carries the trajectory constants (superposition weights and full-horizon
    field overlap) needed to assemble intensities and states.
    """

    g_aa: complex
    g_ab: complex
    g_ba: complex
    g_bb: complex
    c_alpha: complex
    c_beta: complex
    field_overlap: complex
    t: float = 0.0

    @classmethod
    def initial(cls, spec: DriveSpec, field_overlap: complex) -> "GCoefficients":
        return cls(1.0 + 0.0j, 1.0 + 0.0j, 1.0 + 0.0j, 1.0 + 0.0j,
                   spec.c_alpha, spec.c_beta, field_overlap)

    def assembled_trace(self) -> complex:
        cacb = self.c_alpha * np.conj(self.c_beta)
        ov = self.field_overlap
        return (abs(self.c_alpha) ** 2 * self.g_aa + cacb * ov * self.g_ab
                + np.conj(cacb) * np.conj(ov) * self.g_ba
                + abs(self.c_beta) ** 2 * self.g_bb)


def conditional_state(params: CavityParams, g: GCoefficients, f_t: complex,
                      g_t: complex) -> np.ndarray:
    """Assemble the Fock-space conditional state from the scalar oracle."""
    fv = coherent_fock(f_t, params.n_max)
    gv = coherent_fock(g_t, params.n_max)
    ov_fg = coherent_overlap(g_t, f_t)  # <g|f>
    cacb = g.c_alpha * np.conj(g.c_beta)
    ov = g.field_overlap
    rho = (abs(g.c_alpha) ** 2 * g.g_aa * np.outer(fv, fv.conj())
           + cacb * (ov / ov_fg) * g.g_ab * np.outer(fv, gv.conj())
           + np.conj(cacb) * (np.conj(ov) / np.conj(ov_fg)) * g.g_ba * np.outer(gv, fv.conj())
           + abs(g.c_beta) ** 2 * g.g_bb * np.outer(gv, gv.conj()))
    return rho / np.trace(rho).real


def apriori_state(params: CavityParams, spec: DriveSpec, t: float,
                  field_overlap: complex | None = None) -> np.ndarray:
    """Record-averaged cavity state at time ``t`` in the truncated Fock basis."""
    from .model import overlap as field_ov

    horizon = max(spec.alpha.horizon, spec.beta.horizon)
    if not 0.0 <= t <= horizon:
        raise ValueError(f"t={t} outside the drive horizon [0, {horizon}]")
    if field_overlap is None:
        field_overlap = field_ov(spec.alpha, spec.beta, 0.0, horizon)
    f_t, g_t = amplitudes(params, spec.alpha, spec.beta, t)
    g = GCoefficients.initial(spec, field_overlap)
    return conditional_state(params, g, f_t, g_t)


def _kick_gains(params: CavityParams, f_t: complex, g_t: complex,
                a_t: complex, b_t: complex) -> tuple[complex, complex]:
    """Scalar images ``sqrt(Gamma) f + a`` of the operator kicks on each branch."""
    root = math.sqrt(params.gamma)
    return root * f_t + a_t, root * g_t + b_t


def counting_intensities(params: CavityParams, g: GCoefficients, f_t: complex,
                         g_t: complex, a_t: complex,
                         b_t: complex) -> tuple[complex, complex, complex, complex, float]:
    """Block click intensities and the assembled ``nu`` of the scalar oracle.

    ``nu_aa = |sqrt(Gamma) f + a|^2 G_aa`` and the mixed / beta-beta
    analogues, the mixed blocks carrying the field overlap.
    """
    ka, kb = _kick_gains(params, f_t, g_t, a_t, b_t)
    ov = g.field_overlap
    nu_aa = abs(ka) ** 2 * g.g_aa
    nu_ab = ka * np.conj(kb) * g.g_ab * ov
    nu_ba = np.conj(ka) * kb * g.g_ba * np.conj(ov)
    nu_bb = abs(kb) ** 2 * g.g_bb
    cacb = g.c_alpha * np.conj(g.c_beta)
    nu = (abs(g.c_alpha) ** 2 * nu_aa + cacb * nu_ab
          + np.conj(cacb) * nu_ba + abs(g.c_beta) ** 2 * nu_bb)
    if abs(nu.imag) > 1e-9 * max(1.0, abs(nu)):
        raise NegativeIntensity(f"cavity intensity is not real: {nu}")
    return nu_aa, nu_ab, nu_ba, nu_bb, float(nu.real)


def _decay_exponents(params: CavityParams, f_vals, g_vals, a_t: complex,
                     b_t: complex, dt: float) -> tuple[complex, ...]:
    """Integrated per-block decay ``int (sqrt(G) f + a)(sqrt(G) g + b)* ds``.

    ``f_vals`` / ``g_vals`` hold the branch amplitudes at the quadrature
    nodes of one step: (left,), (left, right), or (left, mid, right); the
    integral uses the matching left / trapezoid / Simpson rule.  Between
    kicks each ``G`` block decays by ``exp(-I)`` of its exponent, the exact
    scalar image of the no-click propagators.
    """
    def rate(fv, gv):
        ka, kb = _kick_gains(params, fv, gv, a_t, b_t)
        return np.array([abs(ka) ** 2, ka * np.conj(kb),
                         np.conj(ka) * kb, abs(kb) ** 2])

    nodes = [rate(fv, gv) for fv, gv in zip(f_vals, g_vals)]
    if len(nodes) == 1:
        integral = nodes[0] * dt
    elif len(nodes) == 2:
        integral = 0.5 * dt * (nodes[0] + nodes[1])
    elif len(nodes) == 3:
        integral = dt / 6.0 * (nodes[0] + 4.0 * nodes[1] + nodes[2])
    else:
        raise ValueError("expected 1 to 3 quadrature nodes per step")
    return tuple(integral)


def _renormalized_g(g: GCoefficients, blocks, t: float) -> GCoefficients:
    out = GCoefficients(*blocks, g.c_alpha, g.c_beta, g.field_overlap, t)
    tr = out.assembled_trace()
    if not tr.real > 0.0:
        raise NegativeIntensity(f"cavity trace {tr} lost positivity")
    out.g_aa /= tr.real
    out.g_ab /= tr.real
    out.g_ba /= tr.real
    out.g_bb /= tr.real
    return out


def g_counting_step(params: CavityParams, g: GCoefficients, f_t: complex,
                    g_t: complex, a_t: complex, b_t: complex, dt: float,
                    rng=None, outcome: int | None = None,
                    f_nodes=None, g_nodes=None) -> tuple[GCoefficients, int]:
    """One step of the scalar counting oracle.

    A click multiplies each ``G`` block by its intensity rate over the
    assembled ``nu`` (the scalar image of the operator jump maps); a
    no-click interval decays each block by the exponential of its
    integrated rate, the structure ``dG = (rate/nu - G)(dn - nu dt)``
    written multiplicatively.  ``f_nodes`` / ``g_nodes`` may supply branch
    amplitudes at (left, [mid,] right) quadrature nodes for an accurate
    rate integral; left-endpoint is used otherwise.  The assembled trace is
    renormalized to 1.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    nu_aa, nu_ab, nu_ba, nu_bb, nu = counting_intensities(params, g, f_t, g_t, a_t, b_t)
    if outcome is None:
        p_click = min(max(nu * dt, 0.0), 1.0)
        dn = 1 if rng.random() < p_click else 0
    else:
        dn = int(outcome)
    ov = g.field_overlap
    exps = _decay_exponents(params, f_nodes or (f_t,), g_nodes or (g_t,),
                            a_t, b_t, dt)
    if dn:
        if nu <= JUMP_INTENSITY_TOL:
            raise JumpAtZeroIntensity(f"cavity click demanded at intensity {nu}")
        # jump at the start of the interval (intensity rates over nu, with
        # the mixed-block overlap factors removed), decay across it
        blocks = (nu_aa / nu, nu_ab / (ov * nu), nu_ba / (np.conj(ov) * nu), nu_bb / nu)
    else:
        blocks = (g.g_aa, g.g_ab, g.g_ba, g.g_bb)
    new = tuple(gb * np.exp(-ex) for gb, ex in zip(blocks, exps))
    return _renormalized_g(g, new, g.t + dt), dn


def g_homodyne_step(params: CavityParams, g: GCoefficients, f_t: complex,
                    g_t: complex, a_t: complex, b_t: complex, dt: float,
                    rng=None, noise: str = "wiener", dq: float | None = None,
                    f_nodes=None, g_nodes=None) -> tuple[GCoefficients, float]:
    """One step of the scalar homodyne oracle.

    Implements ``dG = (gain - G mu)(dq - mu dt)`` multiplicatively: each
    block is kicked by ``(1 + dq k_left)(1 + dq conj(k_right))`` with the
    scalar kick gains, then decayed by its integrated no-click exponent,
    then the assembled trace is renormalized.

    Returns the new coefficients and the realized ``dq``.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    ka, kb = _kick_gains(params, f_t, g_t, a_t, b_t)
    ov = g.field_overlap
    mu_aa = 2.0 * np.real(ka) * g.g_aa
    mu_ab = (ka + np.conj(kb)) * g.g_ab * ov
    mu_ba = (np.conj(ka) + kb) * g.g_ba * np.conj(ov)
    mu_bb = 2.0 * np.real(kb) * g.g_bb
    cacb = g.c_alpha * np.conj(g.c_beta)
    mu = float((abs(g.c_alpha) ** 2 * mu_aa + cacb * mu_ab
                + np.conj(cacb) * mu_ba + abs(g.c_beta) ** 2 * mu_bb).real)
    if dq is None:
        if noise == "wiener":
            dq = mu * dt + rng.standard_normal() * math.sqrt(dt)
        elif noise == "binary":
            p_plus = min(max(0.5 * (1.0 + mu * math.sqrt(dt)), 0.0), 1.0)
            dq = math.sqrt(dt) if rng.random() < p_plus else -math.sqrt(dt)
        else:
            raise ValueError(f"unknown noise mode '{noise}'")
    kicks = ((1.0 + dq * ka) * np.conj(1.0 + dq * ka),
             (1.0 + dq * ka) * np.conj(1.0 + dq * kb),
             np.conj(1.0 + dq * ka) * (1.0 + dq * kb),
             (1.0 + dq * kb) * np.conj(1.0 + dq * kb))
    exps = _decay_exponents(params, f_nodes or (f_t,), g_nodes or (g_t,),
                            a_t, b_t, dt)
    blocks = (g.g_aa, g.g_ab, g.g_ba, g.g_bb)
    new = tuple(gb * kick * np.exp(-ex)
                for gb, kick, ex in zip(blocks, kicks, exps))
    return _renormalized_g(g, new, g.t + dt), float(dq)
