import itertools

import numpy as np
import pytest
import scipy.stats

from cattraj import collision, sme
from cattraj.errors import DimensionOverflow, GridExhausted, ZeroNorm
from cattraj.linalg import purity, trace_distance
from cattraj.model import DriveSpec, GridSpec, SystemModel, Waveform, overlap

from conftest import SIGMA_MINUS, SIGMA_Z


def zero_qubit():
    z = np.zeros((2, 2), dtype=complex)
    return SystemModel(2, z, z)


class TestKrausMaps:
    def test_counting_trivial_model(self):
        pair = collision.kraus_counting(zero_qubit(), 0.0, 0.05)
        assert np.array_equal(pair.m0, np.eye(2))
        assert np.array_equal(pair.m1, np.zeros((2, 2)))

    def test_counting_vacuum_forms(self, qubit):
        tau = 0.02
        pair = collision.kraus_counting(qubit, 0.0, tau)
        ldl = SIGMA_MINUS.conj().T @ SIGMA_MINUS
        want_m0 = np.eye(2) - tau * (0.5j * SIGMA_Z + 0.5 * ldl)
        assert np.allclose(pair.m0, want_m0)
        assert np.allclose(pair.m1, np.sqrt(tau) * SIGMA_MINUS)

    def test_counting_completeness_residual(self, qubit):
        tau = 0.01
        pair = collision.kraus_counting(qubit, 1.0, tau)
        res = np.linalg.norm(pair.m0.conj().T @ pair.m0
                             + pair.m1.conj().T @ pair.m1 - np.eye(2))
        assert res <= 5.0 * tau ** 2

    def test_homodyne_trivial_model(self):
        r = collision.kraus_homodyne(zero_qubit(), 0.0, 0.05, 1)
        assert np.allclose(r, np.eye(2) / np.sqrt(2.0))

    def test_homodyne_difference_identity(self, qubit):
        tau = 0.01
        a = 0.5
        rp = collision.kraus_homodyne(qubit, a, tau, 1)
        rm = collision.kraus_homodyne(qubit, a, tau, -1)
        want = np.sqrt(2.0 * tau) * (SIGMA_MINUS + a * np.eye(2))
        assert np.max(np.abs(rp - rm - want)) <= 1e-14

    def test_homodyne_completeness_residual(self, qubit):
        tau = 0.01
        rp = collision.kraus_homodyne(qubit, 0.5, tau, 1)
        rm = collision.kraus_homodyne(qubit, 0.5, tau, -1)
        res = np.linalg.norm(rp.conj().T @ rp + rm.conj().T @ rm - np.eye(2))
        assert res <= 5.0 * tau ** 1.5


class TestStep:
    @pytest.mark.parametrize("scheme", ["counting", "homodyne"])
    def test_coherent_reduction_bitwise(self, qubit, scheme):
        """With c_beta = 0 the superposition engine and the dedicated
        single-branch path produce bit-identical records and vectors."""
        psi0 = np.array([0.6, 0.8], dtype=complex)
        alpha = Waveform.gaussian_pulse(1.2, 0.5, 0.2, 1.0)
        grid = GridSpec(0.01, 100)
        spec = DriveSpec.coherent(alpha)
        rec_s, hist_s = collision.run_trajectory(spec, qubit, psi0, grid, scheme, seed=5)
        rec_c, hist_c = collision.run_coherent_trajectory(alpha, qubit, psi0, grid,
                                                          scheme, seed=5)
        assert rec_s.outcomes == rec_c.outcomes
        assert rec_s.log_weight == rec_c.log_weight
        for branch, psi in zip(hist_s, hist_c):
            assert np.array_equal(branch.psi, psi)

    def test_grid_exhausted(self, qubit, excited, cat_drive):
        grid = GridSpec(0.1, 1)
        branch = collision.BranchState.initial(excited, cat_drive, grid)
        branch, _ = collision.step(branch, cat_drive, qubit, grid, "counting", None,
                                   outcome=0)
        with pytest.raises(GridExhausted):
            collision.step(branch, cat_drive, qubit, grid, "counting", None, outcome=0)

    def test_counting_clicks_poisson(self):
        """L = 0, coherent drive: click counts follow Poisson(|a|^2 T)."""
        m = zero_qubit()
        a, T, tau = 1.0, 1.0, 1e-3
        spec = DriveSpec.coherent(Waveform.constant(a, T))
        grid = GridSpec.from_horizon(tau, T)
        psi0 = np.array([1.0, 0.0], dtype=complex)
        n_traj = 2000
        ens = collision.run_ensemble(spec, m, psi0, grid, "counting", 314,
                                     n_traj, snapshot_steps=[grid.steps])
        counts = (ens.outcomes > 0.5).sum(axis=1)
        mean = abs(a) ** 2 * T
        kmax = int(scipy.stats.poisson.ppf(0.999, mean)) + 1
        observed = np.bincount(counts, minlength=kmax + 1)[:kmax + 1].astype(float)
        expected = scipy.stats.poisson.pmf(np.arange(kmax + 1), mean) * n_traj
        expected[-1] += n_traj - expected.sum()  # fold the tail into the last bin
        observed[-1] += n_traj - observed.sum()
        keep = expected >= 5.0
        chi2, p = scipy.stats.chisquare(observed[keep], expected[keep] *
                                        observed[keep].sum() / expected[keep].sum())
        assert p > 0.01

    def test_log_weight_matches_per_step_probabilities(self, qubit, excited, cat_drive):
        grid = GridSpec(0.02, 50)
        rec, _ = collision.run_trajectory(cat_drive, qubit, excited, grid,
                                          "counting", seed=17)
        # replay the same outcomes and accumulate the stored weight ratios
        replay = collision.MeasurementRecord("counting", grid.tau)
        branch = collision.BranchState.initial(excited, cat_drive, grid)
        log_p = 0.0
        for outcome in rec.outcomes:
            before = replay.log_weight
            branch, _ = collision.step(branch, cat_drive, qubit, grid, "counting",
                                       None, record=replay, outcome=outcome)
            log_p += replay.log_weight - before
        assert log_p == pytest.approx(rec.log_weight, abs=1e-12)

    def test_determinism(self, qubit, excited, cat_drive):
        grid = GridSpec(0.02, 50)
        rec1, hist1 = collision.run_trajectory(cat_drive, qubit, excited, grid,
                                               "homodyne", seed=23)
        rec2, hist2 = collision.run_trajectory(cat_drive, qubit, excited, grid,
                                               "homodyne", seed=23)
        assert rec1.outcomes == rec2.outcomes
        assert np.array_equal(hist1[-1].psi, hist2[-1].psi)

    def test_empty_grid(self, qubit, excited, cat_drive):
        grid = GridSpec(0.1, 0)
        rec, hist = collision.run_trajectory(cat_drive, qubit, excited, grid,
                                             "counting", seed=1)
        assert rec.outcomes == []
        assert rec.log_weight == 0.0


class TestConditionalDensity:
    def test_initial_pure_state(self, qubit, excited, cat_drive):
        grid = GridSpec(0.01, 10)
        branch = collision.BranchState.initial(excited, cat_drive, grid)
        cond = collision.conditional_density(branch, cat_drive, grid.tau)
        assert np.allclose(cond.assembled(), np.outer(excited, excited.conj()))

    def test_structure_along_trajectory(self, qubit, cat_drive):
        psi0 = np.array([0.6, 0.8], dtype=complex)
        grid = GridSpec(0.02, 60)
        rng_outcomes = np.random.default_rng(4)
        branch = collision.BranchState.initial(psi0, cat_drive, grid)
        for j in range(grid.steps):
            cond = collision.conditional_density(branch, cat_drive, grid.tau)
            rho = cond.assembled()
            assert abs(np.trace(rho) - 1.0) <= 1e-10
            assert np.max(np.abs(rho - rho.conj().T)) <= 1e-12
            assert np.array_equal(cond.rho_ba, cond.rho_ab.conj().T)
            assert purity(cond.rho_aa) == pytest.approx(1.0, abs=1e-10)
            assert purity(cond.rho_bb) == pytest.approx(1.0, abs=1e-10)
            branch, _ = collision.step(branch, cat_drive, qubit, grid, "counting",
                                       None, outcome=int(rng_outcomes.random() < 0.1))

    def test_swap_symmetry(self, qubit):
        """Exchanging (c_alpha, alpha) with (c_beta, beta) leaves the
        assembled state invariant for identical outcome sequences."""
        alpha = Waveform.constant(0.8, 1.0)
        beta = Waveform.gaussian_pulse(-0.5, 0.5, 0.2, 1.0)
        spec = DriveSpec.superposition(alpha, beta, 1.0, 0.6)
        swapped = DriveSpec(spec.c_beta, spec.c_alpha, beta, alpha)
        psi0 = np.array([0.28, 0.96], dtype=complex)
        grid = GridSpec(0.02, 50)
        outcomes = (np.random.default_rng(9).random(50) < 0.05).astype(int)
        b1 = collision.BranchState.initial(psi0, spec, grid)
        b2 = collision.BranchState.initial(psi0, swapped, grid)
        for eta in outcomes:
            b1, _ = collision.step(b1, spec, qubit, grid, "counting", None,
                                   outcome=int(eta))
            b2, _ = collision.step(b2, swapped, qubit, grid, "counting", None,
                                   outcome=int(eta))
        rho1 = collision.conditional_density(b1, spec, grid.tau).assembled()
        rho2 = collision.conditional_density(b2, swapped, grid.tau).assembled()
        assert np.max(np.abs(rho1 - rho2)) <= 1e-12

    def test_zero_norm_raises(self, cat_drive):
        branch = collision.BranchState(0, np.zeros(2, dtype=complex),
                                       np.zeros(2, dtype=complex), 0.0 + 0.0j)
        with pytest.raises(ZeroNorm):
            collision.conditional_density(branch, cat_drive)


class TestExactChain:
    def test_single_slot_trivial(self):
        m = zero_qubit()
        spec = DriveSpec.coherent(Waveform.constant(0.0, 0.1))
        grid = GridSpec(0.1, 1)
        psi0 = np.array([1.0, 0.0], dtype=complex)
        rec = collision.MeasurementRecord("counting", 0.1, outcomes=[0])
        p, rho = collision.exact_chain(spec, m, psi0, grid, "counting", rec)
        assert p == pytest.approx(1.0, abs=1e-14)
        assert np.allclose(rho, np.diag([1.0, 0.0]))

    def test_single_slot_click_rate_order(self, qubit, excited):
        """p(1) from the chain and nu*tau from the recurrence differ at O(tau^2)."""
        gaps = []
        for tau in (0.04, 0.02, 0.01):
            spec = DriveSpec.coherent(Waveform.constant(0.7, tau))
            grid = GridSpec(tau, 1)
            rec = collision.MeasurementRecord("counting", tau, outcomes=[1])
            p_exact, _ = collision.exact_chain(spec, qubit, excited, grid,
                                               "counting", rec)
            p_rec = collision.record_probability(spec, qubit, excited, grid, rec)
            gaps.append(abs(p_exact - p_rec))
        slope = np.polyfit(np.log([0.04, 0.02, 0.01]), np.log(gaps), 1)[0]
        assert slope >= 1.8

    @pytest.mark.parametrize("scheme", ["counting", "homodyne"])
    def test_record_completeness(self, qubit, excited, scheme):
        tau, n = 0.03, 5
        grid = GridSpec(tau, n)
        spec = DriveSpec.even_cat(Waveform.constant(0.5, grid.horizon))
        labels = (0, 1) if scheme == "counting" else (-1, 1)
        total = 0.0
        for outcomes in itertools.product(labels, repeat=n):
            rec = collision.MeasurementRecord(scheme, tau, outcomes=list(outcomes))
            p, _ = collision.exact_chain(spec, qubit, excited, grid, scheme, rec)
            total += p
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_reduced_field_state_diagnostic(self, qubit, excited):
        grid = GridSpec(0.05, 4)
        spec = DriveSpec.even_cat(Waveform.constant(0.6, grid.horizon))
        chain = collision.ExactChain.initial(spec, qubit, excited, grid)
        v = collision._collision_unitary(qubit, grid.tau)
        chain.apply_collision(v)
        chain.measure("counting", 0)
        field = chain.reduced_field_state()
        assert np.trace(field).real == pytest.approx(1.0, abs=1e-10)
        assert np.max(np.abs(field - field.conj().T)) <= 1e-12
        assert np.linalg.eigvalsh(field)[0] >= -1e-12

    def test_qubit_limit(self, qubit, excited):
        grid = GridSpec(0.01, 12)
        spec = DriveSpec.even_cat(Waveform.constant(0.5, grid.horizon))
        rec = collision.MeasurementRecord("counting", 0.01, outcomes=[0] * 12)
        with pytest.raises(DimensionOverflow):
            collision.exact_chain(spec, qubit, excited, grid, "counting", rec,
                                  max_qubits=10)


class TestEnsemble:
    def test_matches_sequential_trajectories(self, qubit, cat_drive):
        psi0 = np.array([0.6, 0.8], dtype=complex)
        grid = GridSpec(0.01, 100)
        ens = collision.run_ensemble(cat_drive, qubit, psi0, grid, "counting", 99, 6,
                                     snapshot_steps=[grid.steps])
        for i in range(6):
            rec, hist = collision.run_trajectory(cat_drive, qubit, psi0, grid,
                                                 "counting", 99, trajectory_index=i)
            assert list(ens.outcomes[i]) == rec.outcomes
            assert ens.log_weights[i] == pytest.approx(rec.log_weight, abs=1e-12)
            cond = collision.conditional_density(hist[-1], cat_drive, grid.tau)
            assert trace_distance(ens.states[0, i], cond.assembled()) <= 1e-12

    def test_chunking_invariance(self, qubit, excited, cat_drive):
        grid = GridSpec(0.02, 50)
        whole = collision.run_ensemble(cat_drive, qubit, excited, grid, "homodyne",
                                       7, 8, snapshot_steps=[50])
        first = collision.run_ensemble(cat_drive, qubit, excited, grid, "homodyne",
                                       7, 3, snapshot_steps=[50])
        second = collision.run_ensemble(cat_drive, qubit, excited, grid, "homodyne",
                                        7, 5, snapshot_steps=[50], first_index=3)
        assert np.array_equal(np.concatenate([first.outcomes, second.outcomes]),
                              whole.outcomes)
        assert np.array_equal(np.concatenate([first.states, second.states], axis=1),
                              whole.states)


class TestIntensityLimits:
    def test_click_rate_matches_jump_intensity(self, qubit):
        """Collision click weight over tau converges to the SME intensity."""
        r = np.random.default_rng(3)
        psi = r.normal(size=2) + 1j * r.normal(size=2)
        phi = r.normal(size=2) + 1j * r.normal(size=2)
        alpha = Waveform.constant(0.9, 1.0)
        beta = Waveform.constant(-0.3 + 0.2j, 1.0)
        spec = DriveSpec.superposition(alpha, beta)
        branch = collision.BranchState(0, psi, phi, np.log(0.7 + 0.1j))
        cond = collision.conditional_density(branch, spec, 0.01)
        nu = sme.jump_intensities(qubit, cond, 0.9, -0.3 + 0.2j)[-1]
        tail = np.exp(branch.log_tail_overlap)
        tr_rho = collision._branch_weight(abs(spec.c_alpha) ** 2,
                                          spec.c_alpha * np.conj(spec.c_beta),
                                          abs(spec.c_beta) ** 2, tail, psi, phi)

        def click_weight(tau):
            rec = collision.MeasurementRecord("counting", tau)
            collision.step(branch, spec, qubit, GridSpec(tau, 1), "counting", None,
                           record=rec, outcome=1)
            return np.exp(rec.log_weight) / (tau * tr_rho)

        richardson = 2.0 * click_weight(1e-3) - click_weight(2e-3)
        assert richardson == pytest.approx(nu, rel=1e-5)

    def test_homodyne_bias_matches_mu(self, qubit):
        r = np.random.default_rng(3)
        psi = r.normal(size=2) + 1j * r.normal(size=2)
        phi = r.normal(size=2) + 1j * r.normal(size=2)
        alpha = Waveform.constant(0.9, 1.0)
        beta = Waveform.constant(-0.3 + 0.2j, 1.0)
        spec = DriveSpec.superposition(alpha, beta)
        branch = collision.BranchState(0, psi, phi, np.log(0.7 + 0.1j))
        cond = collision.conditional_density(branch, spec, 0.01)
        mu = sme.diffusive_intensities(qubit, cond, 0.9, -0.3 + 0.2j)[-1]

        def bias(tau):
            ws = {}
            for zeta in (1, -1):
                rec = collision.MeasurementRecord("homodyne", tau)
                collision.step(branch, spec, qubit, GridSpec(tau, 1), "homodyne",
                               None, record=rec, outcome=zeta)
                ws[zeta] = np.exp(rec.log_weight)
            p_plus = ws[1] / (ws[1] + ws[-1])
            return (2.0 * p_plus - 1.0) / np.sqrt(tau)

        richardson = 2.0 * bias(5e-5) - bias(1e-4)
        assert richardson == pytest.approx(mu, rel=1e-4, abs=1e-6)
