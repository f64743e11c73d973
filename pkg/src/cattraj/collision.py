"""Discrete repeated-interaction (collision) engine.

The environment is a chain of qubits hitting the system one per time slot
of length ``tau``; after each collision the outgoing qubit is measured,
either in its energy basis (photon counting, outcomes 0/1) or in the
``sigma_x`` basis (homodyne, outcomes +1/-1).  For a drive in a
superposition of two coherent states the conditional system state is
carried by two branch vectors ``psi`` (alpha branch) and ``phi`` (beta
branch) plus the tail overlap of the not-yet-collided slots; the full
conditional density operator is a derived view
(:func:`conditional_density`).

Branch vectors evolve un-normalized in the sense that their relative
norms and phases follow the raw first-order Kraus recurrences; a common
positive rescale is extracted every step into a running log-weight so that
arbitrarily long records neither underflow nor overflow.  The rescale is a
pure bookkeeping gauge: every physical quantity (conditional density,
trajectory probability, outcome statistics) is invariant under it.

A brute-force oracle (:func:`exact_chain`) simulates the entire qubit
chain with exact collision unitaries and exact qubit coherent states, and
is used to validate the recurrences at small slot counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionOverflow, GridExhausted, ZeroNorm
from .linalg import matexp
from .model import DriveSpec, GridSpec, SystemModel, discretize, log_overlap
from .rng import trajectory_rng

__all__ = [
    "BranchState",
    "KrausPair",
    "MeasurementRecord",
    "kraus_counting",
    "kraus_homodyne",
    "step",
    "run_trajectory",
    "run_coherent_trajectory",
    "record_probability",
    "conditional_density",
    "exact_chain",
    "exact_chain_probability",
    "run_ensemble",
]

SCHEMES = ("counting", "homodyne")

# Outcome labels per scheme, in sampling order (first entry drawn when the
# uniform falls below its conditional probability).
_OUTCOMES = {"counting": (1, 0), "homodyne": (1, -1)}


@dataclass(frozen=True)
class BranchState:
    """Conditional branch vectors after ``time_index`` collisions.

    ``log_tail_overlap`` is the log of the product of slot overlaps
    ``<beta_k|alpha_k>`` over all slots ``k >= time_index`` that have not
    collided yet; it weights the interference block of the conditional
    density operator.
    """

    time_index: int
    psi: np.ndarray
    phi: np.ndarray
    log_tail_overlap: complex

    @classmethod
    def initial(cls, psi0: np.ndarray, spec: DriveSpec, grid: GridSpec) -> "BranchState":
        psi0 = np.asarray(psi0, dtype=complex)
        # The tail covers every slot that has not collided, including slots
        # beyond the simulated grid when the drive outlives it.
        t_end = max(grid.horizon, spec.alpha.horizon, spec.beta.horizon)
        tail = log_overlap(spec.alpha, spec.beta, 0.0, t_end, max_step=grid.tau / 4.0)
        return cls(0, psi0.copy(), psi0.copy(), tail)


@dataclass(frozen=True)
class KrausPair:
    """First-order counting Kraus maps for one slot: no-click and click."""

    m0: np.ndarray
    m1: np.ndarray
    tau: float


@dataclass
class MeasurementRecord:
    """Outcome sequence of one trajectory plus probability bookkeeping.

    ``log_weight`` accumulates ``log Tr rho_j``, the log-probability of the
    realized record, one conditional factor per completed collision.
    ``clamped`` counts steps on which the sampling probability had to be
    clipped into [0, 1] (possible for large amplitudes at coarse tau).
    """

    scheme: str
    tau: float
    outcomes: list = field(default_factory=list)
    log_weight: float = 0.0
    clamped: int = 0

    def append(self, outcome: int, weight_ratio: float, clamped: bool) -> None:
        self.outcomes.append(outcome)
        self.log_weight += math.log(weight_ratio)
        if clamped:
            self.clamped += 1


def kraus_counting(model: SystemModel, a_j: complex, tau: float) -> KrausPair:
    """Counting Kraus pair for slot amplitude ``a_j``.

    ``M0 = 1 - (i H + L'L/2 + L' a + |a|^2/2) tau`` (no click) and
    ``M1 = (L + a) sqrt(tau)`` (click), both truncated at first order.
    Completeness ``M0'M0 + M1'M1 = 1`` then holds up to O(tau^2).
    """
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    h = model.hamiltonian
    l = model.coupling
    eye = np.eye(model.dim, dtype=complex)
    drift = 1j * h + 0.5 * (l.conj().T @ l) + a_j * l.conj().T + 0.5 * abs(a_j) ** 2 * eye
    m0 = eye - tau * drift
    m1 = math.sqrt(tau) * (l + a_j * eye)
    return KrausPair(m0, m1, tau)


def kraus_homodyne(model: SystemModel, a_j: complex, tau: float, zeta: int) -> np.ndarray:
    """Homodyne Kraus map for slot amplitude ``a_j`` and outcome ``zeta``.

    ``R_zeta = [1 - (i H + L'L/2 + L' a + |a|^2/2) tau + (L + a) zeta sqrt(tau)] / sqrt(2)``.
    """
    if zeta not in (-1, 1):
        raise ValueError(f"zeta must be +1 or -1, got {zeta}")
    pair = kraus_counting(model, a_j, tau)
    return (pair.m0 + zeta * pair.m1) / math.sqrt(2.0)


def _norm2(v: np.ndarray) -> float:
    return np.vdot(v, v).real


def _slot_overlap_factor(a_j: complex, b_j: complex, tau: float) -> complex:
    """First-order slot overlap ``<b_j|a_j> = 1 - (|a|^2 + |b|^2 - 2 a conj(b)) tau / 2``.

    Kept at the same truncation order as the Kraus maps so the tail-overlap
    telescoping stays consistent along a trajectory.
    """
    return 1.0 - 0.5 * (abs(a_j) ** 2 + abs(b_j) ** 2 - 2.0 * a_j * np.conj(b_j)) * tau


def _branch_weight(ca2: float, cacb: complex, cb2: float, tail: complex,
                   psi: np.ndarray, phi: np.ndarray) -> float:
    """Unnormalized weight Tr rho for branch vectors and tail overlap."""
    w = ca2 * _norm2(psi) + 2.0 * np.real(cacb * tail * np.vdot(phi, psi)) + cb2 * _norm2(phi)
    return float(w)


def _sample_binary(w_first: float, w_second: float, rng) -> tuple[int, bool]:
    """Pick index 0/1 with probability proportional to the two weights.

    Returns (index, whether the probability had to be clamped into [0, 1]).
    """
    total = w_first + w_second
    if not total > 0.0:
        raise ZeroNorm(f"total outcome weight {total} is not positive")
    p_first = w_first / total
    clamped = p_first < 0.0 or p_first > 1.0
    if clamped:
        p_first = min(max(p_first, 0.0), 1.0)
    idx = 0 if rng.random() < p_first else 1
    return idx, clamped


def step(branch: BranchState, spec: DriveSpec, model: SystemModel, grid: GridSpec,
         scheme: str, rng, record: MeasurementRecord | None = None,
         outcome: int | None = None) -> tuple[BranchState, int]:
    """Advance one collision: build slot Kraus maps, sample, update branches.

    With ``outcome`` given the step replays that outcome instead of
    sampling (``rng`` may then be None).  When a ``record`` is supplied the
    outcome and the conditional weight ratio are appended to it.

    Returns the post-collision branch state and the realized outcome.
    """
    j = branch.time_index
    if j >= grid.steps:
        raise GridExhausted(f"collision {j} requested on a grid of {grid.steps} slots")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}'")
    a_j = complex(spec.alpha(j * grid.tau))
    b_j = complex(spec.beta(j * grid.tau))

    s_j = _slot_overlap_factor(a_j, b_j, grid.tau)
    if abs(s_j) < 1e-300:
        raise ZeroNorm("slot overlap factor vanished; tau is far too coarse")
    tail_next = branch.log_tail_overlap - np.log(s_j)
    k_next = np.exp(tail_next)

    ca2 = abs(spec.c_alpha) ** 2
    cb2 = abs(spec.c_beta) ** 2
    cacb = spec.c_alpha * np.conj(spec.c_beta)

    if scheme == "counting":
        pair_a = kraus_counting(model, a_j, grid.tau)
        pair_b = kraus_counting(model, b_j, grid.tau)
        candidates = ((pair_a.m1 @ branch.psi, pair_b.m1 @ branch.phi),
                      (pair_a.m0 @ branch.psi, pair_b.m0 @ branch.phi))
    else:
        candidates = tuple(
            (kraus_homodyne(model, a_j, grid.tau, z) @ branch.psi,
             kraus_homodyne(model, b_j, grid.tau, z) @ branch.phi)
            for z in (1, -1))

    weights = [_branch_weight(ca2, cacb, cb2, k_next, psi, phi)
               for psi, phi in candidates]
    labels = _OUTCOMES[scheme]

    clamped = False
    if outcome is None:
        idx, clamped = _sample_binary(weights[0], weights[1], rng)
    else:
        if outcome not in labels:
            raise ValueError(f"outcome {outcome} invalid for scheme '{scheme}'")
        idx = labels.index(outcome)
        if not weights[idx] > 0.0:
            raise ZeroNorm(f"replayed outcome {outcome} has non-positive weight {weights[idx]}")
    chosen = labels[idx]
    w = weights[idx]

    # Common positive rescale of both branches; physically inert, keeps the
    # stored quadratic form at 1 so log_weight is the only scale carrier.
    scale = 1.0 / math.sqrt(w)
    psi_next = candidates[idx][0] * scale
    phi_next = candidates[idx][1] * scale

    if record is not None:
        # w is Tr rho_{j+1} / Tr rho_j, the conditional record probability.
        record.append(chosen, w, clamped)

    return BranchState(j + 1, psi_next, phi_next, tail_next), chosen


def run_trajectory(spec: DriveSpec, model: SystemModel, psi0: np.ndarray,
                   grid: GridSpec, scheme: str, seed: int,
                   trajectory_index: int = 0,
                   with_history: bool = True) -> tuple[MeasurementRecord, list]:
    """Run one full trajectory; deterministic given (seed, trajectory_index).

    Returns the measurement record and, unless disabled, the list of branch
    states after 0, 1, ..., steps collisions.
    """
    rng = trajectory_rng(seed, trajectory_index)
    record = MeasurementRecord(scheme, grid.tau)
    branch = BranchState.initial(psi0, spec, grid)
    history = [branch] if with_history else []
    for _ in range(grid.steps):
        branch, _ = step(branch, spec, model, grid, scheme, rng, record=record)
        if with_history:
            history.append(branch)
    return record, history if with_history else [branch]


def run_coherent_trajectory(alpha, model: SystemModel, psi0: np.ndarray,
                            grid: GridSpec, scheme: str, seed: int,
                            trajectory_index: int = 0) -> tuple[MeasurementRecord, list]:
    """Single-coherent-drive trajectory evolving one conditional vector.

    This is the dedicated single-branch path (drive ``|alpha>`` only); for a
    shared seed it reproduces the superposition engine at ``c_beta = 0``
    bit for bit.
    """
    rng = trajectory_rng(seed, trajectory_index)
    record = MeasurementRecord(scheme, grid.tau)
    psi = np.asarray(psi0, dtype=complex).copy()
    history = [psi]
    labels = _OUTCOMES[scheme]
    for j in range(grid.steps):
        a_j = complex(alpha(j * grid.tau))
        if scheme == "counting":
            pair = kraus_counting(model, a_j, grid.tau)
            candidates = (pair.m1 @ psi, pair.m0 @ psi)
        else:
            candidates = tuple(kraus_homodyne(model, a_j, grid.tau, z) @ psi
                               for z in (1, -1))
        weights = [_norm2(v) for v in candidates]
        idx, clamped = _sample_binary(weights[0], weights[1], rng)
        w = weights[idx]
        psi = candidates[idx] * (1.0 / math.sqrt(w))
        record.append(labels[idx], w, clamped)
        history.append(psi)
    return record, history


def record_probability(spec: DriveSpec, model: SystemModel, psi0: np.ndarray,
                       grid: GridSpec, record: MeasurementRecord) -> float:
    """Probability the recurrence engine assigns to a fixed outcome record."""
    branch = BranchState.initial(psi0, spec, grid)
    replay = MeasurementRecord(record.scheme, grid.tau)
    for j in range(grid.steps):
        branch, _ = step(branch, spec, model, grid, record.scheme, None,
                         record=replay, outcome=record.outcomes[j])
    return math.exp(replay.log_weight)


def conditional_density(branch: BranchState, spec: DriveSpec, tau: float | None = None):
    """Four-block conditional density view of a branch state.

    Returns an :class:`cattraj.sme.ConditionalDensity` whose blocks are
    ``rho_aa = |psi><psi| / Tr rho``, ``rho_ab = K_j |psi><phi| / Tr rho``,
    ``rho_bb = |phi><phi| / Tr rho`` with ``K_j`` the tail overlap; the
    weighted assembly has unit trace.
    """
    from .sme import ConditionalDensity  # local import avoids a cycle at import time

    tail = np.exp(branch.log_tail_overlap)
    w = _branch_weight(abs(spec.c_alpha) ** 2,
                       spec.c_alpha * np.conj(spec.c_beta),
                       abs(spec.c_beta) ** 2, tail, branch.psi, branch.phi)
    if not w > 0.0:
        raise ZeroNorm(f"branch state has non-positive total weight {w}")
    rho_aa = np.outer(branch.psi, branch.psi.conj()) / w
    rho_ab = tail * np.outer(branch.psi, branch.phi.conj()) / w
    rho_bb = np.outer(branch.phi, branch.phi.conj()) / w
    t = branch.time_index * tau if tau is not None else float(branch.time_index)
    return ConditionalDensity(rho_aa, rho_ab, rho_bb, spec.c_alpha, spec.c_beta, t)


# ---------------------------------------------------------------------------
# Exact chain oracle
# ---------------------------------------------------------------------------

def _qubit_coherent(a: complex, tau: float) -> np.ndarray:
    """Exact qubit coherent state exp(sqrt(tau)(a s+ - conj(a) s-)) |0>."""
    r = abs(a) * math.sqrt(tau)
    if r == 0.0:
        return np.array([1.0, 0.0], dtype=complex)
    return np.array([math.cos(r), (a / abs(a)) * math.sin(r)], dtype=complex)


def _collision_unitary(model: SystemModel, tau: float) -> np.ndarray:
    """Exact two-body collision unitary on (qubit x system)."""
    d = model.dim
    sp = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)  # |1><0|
    sm = sp.conj().T
    h_slot = (np.kron(np.eye(2, dtype=complex), model.hamiltonian)
              + (1j / math.sqrt(tau)) * (np.kron(sp, model.coupling)
                                         - np.kron(sm, model.coupling.conj().T)))
    return matexp(h_slot, scale=-1j * tau)


@dataclass
class ExactChain:
    """Full chain-plus-system state for brute-force validation runs."""

    n_qubits: int
    dim: int
    joint_state: np.ndarray  # shape (2,)*n_qubits + (dim,)
    collision_index: int = 0

    @classmethod
    def initial(cls, spec: DriveSpec, model: SystemModel, psi0: np.ndarray,
                grid: GridSpec, max_qubits: int = 10) -> "ExactChain":
        n = grid.steps
        if n > max_qubits:
            raise DimensionOverflow(f"{n} chain qubits exceed the maximum {max_qubits}")
        alphas = discretize(spec.alpha, grid)
        betas = discretize(spec.beta, grid)
        branch_a = np.array([1.0 + 0.0j])
        branch_b = np.array([1.0 + 0.0j])
        for k in range(n):
            branch_a = np.kron(branch_a, _qubit_coherent(alphas[k], grid.tau))
            branch_b = np.kron(branch_b, _qubit_coherent(betas[k], grid.tau))
        psi0 = np.asarray(psi0, dtype=complex)
        joint = (spec.c_alpha * np.kron(branch_a, psi0)
                 + spec.c_beta * np.kron(branch_b, psi0))
        nrm = np.linalg.norm(joint)
        if nrm < 1e-150:
            raise ZeroNorm("exact chain initial state has zero norm")
        joint = (joint / nrm).reshape((2,) * n + (model.dim,))
        return cls(n, model.dim, joint)

    def apply_collision(self, v_slot: np.ndarray) -> None:
        """Apply the two-body unitary to (qubit collision_index, system)."""
        k = self.collision_index
        n = self.n_qubits
        vr = v_slot.reshape(2, self.dim, 2, self.dim)
        out = np.tensordot(vr, self.joint_state, axes=([2, 3], [k, n]))
        # tensordot puts the two fresh axes first; restore chain order.
        self.joint_state = np.moveaxis(out, [0, 1], [k, n])

    def measure(self, scheme: str, outcome: int) -> float:
        """Project qubit ``collision_index`` on the recorded outcome.

        Renormalizes the surviving component and returns its probability.
        """
        k = self.collision_index
        idx0 = (slice(None),) * k + (0,)
        idx1 = (slice(None),) * k + (1,)
        c0 = self.joint_state[idx0]
        c1 = self.joint_state[idx1]
        if scheme == "counting":
            comp = c1 if outcome == 1 else c0
            p = float(np.sum(np.abs(comp) ** 2))
            new = np.zeros_like(self.joint_state)
            new[idx1 if outcome == 1 else idx0] = comp
        elif scheme == "homodyne":
            sgn = 1.0 if outcome == 1 else -1.0
            comp = (c0 + sgn * c1) / math.sqrt(2.0)
            p = float(np.sum(np.abs(comp) ** 2))
            new = np.zeros_like(self.joint_state)
            new[idx0] = comp / math.sqrt(2.0)
            new[idx1] = sgn * comp / math.sqrt(2.0)
        else:
            raise ValueError(f"unknown scheme '{scheme}'")
        if p <= 0.0:
            # impossible outcome: probability 0, state left untouched
            self.collision_index += 1
            return 0.0
        self.joint_state = new / math.sqrt(p)
        self.collision_index += 1
        return p

    def reduced_system_state(self) -> np.ndarray:
        """Partial trace over all chain qubits."""
        m = self.joint_state.reshape(-1, self.dim)
        return m.T @ m.conj()

    def reduced_field_state(self) -> np.ndarray:
        """Conditional state of the not-yet-collided qubits (diagnostic).

        Traces out the system and every already-measured qubit; unit trace
        whenever the joint state is normalized.
        """
        j = self.collision_index
        done = 2 ** j
        rest = 2 ** (self.n_qubits - j)
        m = self.joint_state.reshape(done, rest, self.dim)
        return np.einsum("aeb,afb->ef", m, m.conj())


def exact_chain(spec: DriveSpec, model: SystemModel, psi0: np.ndarray,
                grid: GridSpec, scheme: str, record: MeasurementRecord,
                max_qubits: int = 10) -> tuple[float, np.ndarray]:
    """Brute-force joint probability of ``record`` and the final system state.

    Builds the exact entangled chain state, applies the exact collision
    unitary slot by slot, and projects on the recorded outcomes.
    """
    if len(record.outcomes) != grid.steps:
        raise ValueError(f"record length {len(record.outcomes)} != grid steps {grid.steps}")
    chain = ExactChain.initial(spec, model, psi0, grid, max_qubits=max_qubits)
    v_slot = _collision_unitary(model, grid.tau)
    prob = 1.0
    for outcome in record.outcomes:
        chain.apply_collision(v_slot)
        p = chain.measure(scheme, outcome)
        prob *= p
        if prob == 0.0:
            break
    return prob, chain.reduced_system_state()


def exact_chain_probability(spec: DriveSpec, model: SystemModel, psi0: np.ndarray,
                            grid: GridSpec, scheme: str, outcomes,
                            max_qubits: int = 10) -> float:
    """Convenience wrapper taking a bare outcome sequence."""
    rec = MeasurementRecord(scheme, grid.tau, outcomes=list(outcomes))
    prob, _ = exact_chain(spec, model, psi0, grid, scheme, rec, max_qubits=max_qubits)
    return prob


# ---------------------------------------------------------------------------
# Batched ensemble runner
# ---------------------------------------------------------------------------

@dataclass
class CollisionEnsemble:
    """Lock-step ensemble results at the requested snapshot indices.

    Attributes
    ----------
    snapshot_steps : ndarray of int
        Collision counts at which snapshots were taken (0 = initial state).
    times : ndarray
        Physical times of the snapshots.
    states : ndarray, shape (n_snapshots, n_traj, d, d)
        Assembled conditional density of every trajectory at every snapshot.
    outcomes : ndarray, shape (n_traj, steps)
        Full outcome sequences.
    log_weights : ndarray, shape (n_traj,)
        Final record log-probabilities.
    weight_ratios : ndarray, shape (n_traj, steps)
        Per-step conditional probability of the realized outcome.
    clamped : ndarray of int, shape (n_traj,)
        Number of clamped sampling probabilities per trajectory.
    """

    snapshot_steps: np.ndarray
    times: np.ndarray
    states: np.ndarray
    outcomes: np.ndarray
    log_weights: np.ndarray
    weight_ratios: np.ndarray
    clamped: np.ndarray


def _assemble_batch(psi: np.ndarray, phi: np.ndarray, tail: complex,
                    ca2: float, cacb: complex, cb2: float) -> np.ndarray:
    """Assembled conditional density for a (n_traj, d) batch of branches."""
    aa = np.einsum("mi,mj->mij", psi, psi.conj())
    ab = np.einsum("mi,mj->mij", psi, phi.conj())
    bb = np.einsum("mi,mj->mij", phi, phi.conj())
    raw = ca2 * aa + cacb * tail * ab + np.conj(cacb * tail) * ab.conj().transpose(0, 2, 1) + cb2 * bb
    tr = np.einsum("mii->m", raw).real
    return raw / tr[:, None, None]


def run_ensemble(spec: DriveSpec, model: SystemModel, psi0: np.ndarray,
                 grid: GridSpec, scheme: str, master_seed: int,
                 n_traj: int, snapshot_steps=None,
                 first_index: int = 0) -> CollisionEnsemble:
    """Run ``n_traj`` trajectories in lock step.

    Trajectory ``i`` consumes the same Philox stream
    ``(master_seed, first_index + i)`` as :func:`run_trajectory`, one
    uniform per collision, so the ensemble is reproducible for any batching
    or worker layout.
    """
    n = grid.steps
    d = model.dim
    if snapshot_steps is None:
        snapshot_steps = np.arange(n + 1)
    snapshot_steps = np.asarray(snapshot_steps, dtype=int)
    snap_set = {int(s): i for i, s in enumerate(snapshot_steps)}

    alphas = discretize(spec.alpha, grid)
    betas = discretize(spec.beta, grid)
    ca2 = abs(spec.c_alpha) ** 2
    cb2 = abs(spec.c_beta) ** 2
    cacb = spec.c_alpha * np.conj(spec.c_beta)

    # Tail overlaps are drive properties, identical across trajectories.
    slot_factors = np.array([_slot_overlap_factor(alphas[j], betas[j], grid.tau)
                             for j in range(n)], dtype=complex)
    tails = np.empty(n + 1, dtype=complex)
    t_end = max(grid.horizon, spec.alpha.horizon, spec.beta.horizon)
    tails[0] = log_overlap(spec.alpha, spec.beta, 0.0, t_end, max_step=grid.tau / 4.0)
    for j in range(n):
        tails[j + 1] = tails[j] - np.log(slot_factors[j])

    uniforms = np.empty((n_traj, n))
    for i in range(n_traj):
        uniforms[i] = trajectory_rng(master_seed, first_index + i).random(n)

    psi0 = np.asarray(psi0, dtype=complex)
    psi = np.tile(psi0, (n_traj, 1))
    phi = psi.copy()

    states = np.empty((len(snapshot_steps), n_traj, d, d), dtype=complex)
    outcomes = np.empty((n_traj, n), dtype=np.int8)
    ratios = np.empty((n_traj, n))
    log_weights = np.zeros(n_traj)
    clamped = np.zeros(n_traj, dtype=int)

    if 0 in snap_set:
        states[snap_set[0]] = _assemble_batch(psi, phi, np.exp(tails[0]), ca2, cacb, cb2)

    labels = _OUTCOMES[scheme]
    for j in range(n):
        k_next = np.exp(tails[j + 1])
        if scheme == "counting":
            pa = kraus_counting(model, complex(alphas[j]), grid.tau)
            pb = kraus_counting(model, complex(betas[j]), grid.tau)
            ops = ((pa.m1, pb.m1), (pa.m0, pb.m0))
        else:
            ops = tuple((kraus_homodyne(model, complex(alphas[j]), grid.tau, z),
                         kraus_homodyne(model, complex(betas[j]), grid.tau, z))
                        for z in (1, -1))
        cand = []
        weights = []
        for ma, mb in ops:
            pn = np.einsum("ij,mj->mi", ma, psi)
            fn = np.einsum("ij,mj->mi", mb, phi)
            na = np.einsum("mi,mi->m", pn.conj(), pn).real
            nb = np.einsum("mi,mi->m", fn.conj(), fn).real
            ip = np.einsum("mi,mi->m", fn.conj(), pn)
            w = ca2 * na + 2.0 * np.real(cacb * k_next * ip) + cb2 * nb
            cand.append((pn, fn))
            weights.append(w)
        total = weights[0] + weights[1]
        if np.any(total <= 0.0):
            raise ZeroNorm("total outcome weight vanished in ensemble step")
        p_first = weights[0] / total
        clip = (p_first < 0.0) | (p_first > 1.0)
        clamped += clip
        p_first = np.clip(p_first, 0.0, 1.0)
        pick_first = uniforms[:, j] < p_first

        w_sel = np.where(pick_first, weights[0], weights[1])
        ratios[:, j] = w_sel
        log_weights += np.log(w_sel)
        outcomes[:, j] = np.where(pick_first, labels[0], labels[1])

        scale = (1.0 / np.sqrt(w_sel))[:, None]
        psi = np.where(pick_first[:, None], cand[0][0], cand[1][0]) * scale
        phi = np.where(pick_first[:, None], cand[0][1], cand[1][1]) * scale

        if j + 1 in snap_set:
            states[snap_set[j + 1]] = _assemble_batch(psi, phi, k_next, ca2, cacb, cb2)

    return CollisionEnsemble(snapshot_steps, snapshot_steps * grid.tau, states,
                             outcomes, log_weights, ratios, clamped)
