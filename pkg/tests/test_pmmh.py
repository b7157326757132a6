import numpy as np
import pytest
from scipy import stats

from rmlsmc.delta_pf import CoupledFkModel
from rmlsmc.fk import FeynmanKacModel
from rmlsmc.models import HmmProblem, ou_level_loglik
from rmlsmc.pmmh import (AdaptiveProposal, HmmPmmhTarget, PmmhInitError, ThetaOnly,
                         adapt_proposal, estimates_at_checkpoints, is_estimate,
                         is_estimate_subsampled, jump_chain_section,
                         load_corrections, load_jump_chain, record_terms,
                         run_corrections, run_pmmh, save_corrections,
                         save_jump_chain)
from rmlsmc.rmlmc import LevelDistribution
from rmlsmc.util import stream

from conftest import OU_THETA, assert_within_se


# ---------------------------------------------------------------------------
# stubs

class FlatPrior:
    def __init__(self, lo=-1e9, hi=1e9):
        self.lo, self.hi = lo, hi

    def logpdf(self, theta):
        return 0.0 if np.all((theta >= self.lo) & (theta <= self.hi)) else -np.inf

    def sample(self, rng):
        return np.array([0.0])


class DeterministicLikModel(FeynmanKacModel):
    """Frozen kernel, constant potential c: filter output is deterministic."""

    def __init__(self, c, n_steps=4):
        self.c, self.n_steps, self.state_dim = c, n_steps, 1

    def sample_initial(self, shape, rng):
        return np.zeros(shape + (1,))

    def sample_step(self, t, x_prev, rng):
        return x_prev

    def log_potential(self, t, x, history=None):
        if self.c <= 0:
            return np.full(x.shape[:-1], -np.inf)
        return np.full(x.shape[:-1], np.log(self.c))


class GridTarget:
    """3-point theta grid with deterministic likelihoods (enumerable chain)."""

    def __init__(self, liks):
        self.liks = liks
        self.prior = FlatPrior(-0.5, len(liks) - 0.5)

    def model(self, theta):
        return DeterministicLikModel(self.liks[int(round(theta[0]))] ** (1 / 5),
                                     n_steps=4)


class UniformGridProposal:
    def __init__(self, n_points):
        self.n = n_points

    def propose(self, theta, rng):
        return np.array([float(rng.integers(0, self.n))])

    def log_q(self, a, b):
        return 0.0


class OffSupportProposal:
    def propose(self, theta, rng):
        rng.random()
        return theta + 100.0

    def log_q(self, a, b):
        return 0.0


# ---------------------------------------------------------------------------
# proposal adaptation

def test_adapt_proposal_constant_history_gives_jitter_only():
    cov = adapt_proposal(np.tile([1.0, 2.0], (5, 1)), lam=1e-6)
    np.testing.assert_allclose(cov, 1e-6 * np.eye(2), atol=1e-18)


def test_adapt_proposal_two_point_arithmetic():
    cov = adapt_proposal(np.array([[0.0, 0.0], [2.0, 0.0]]), lam=1e-6)
    expected = (2.38 ** 2 / 2) * np.array([[2.0, 0.0], [0.0, 0.0]]) + 1e-6 * np.eye(2)
    np.testing.assert_allclose(cov, expected, rtol=1e-12)


def test_adapt_proposal_needs_two_samples():
    with pytest.raises(ValueError):
        adapt_proposal(np.array([[1.0, 2.0]]))


def test_adaptive_proposal_tracks_running_covariance():
    rng = stream(50)
    prop = AdaptiveProposal(2, lam=1e-6)
    history = rng.standard_normal((200, 2)) @ np.array([[1.0, 0.0], [0.5, 0.2]])
    for row in history:
        prop.observe(row)
    expected = adapt_proposal(history, lam=1e-6)
    np.testing.assert_allclose(prop._chol @ prop._chol.T, expected, rtol=1e-8)
    prop.freeze()
    prop.observe(np.array([100.0, 100.0]))
    np.testing.assert_allclose(prop._chol @ prop._chol.T, expected, rtol=1e-8)


# ---------------------------------------------------------------------------
# the chain itself

def test_equal_estimates_and_priors_accept_every_proposal():
    target = GridTarget([2.0, 2.0, 2.0])
    res = run_pmmh(target, 1, 300, stream(51), eps=0.0,
                   proposal=UniformGridProposal(3), init_theta=np.array([0.0]))
    assert res.n_accepted - 1 == 300


def test_proposal_outside_prior_support_rejected_and_holding_grows():
    target = GridTarget([2.0, 2.0, 2.0])
    res = run_pmmh(target, 1, 50, stream(52), eps=1e-6,
                   proposal=OffSupportProposal(), init_theta=np.array([1.0]))
    assert len(res.jump_chain) == 1
    assert res.jump_chain[0].holding == 50
    assert res.iter_model_cost.sum() == 0.0  # no filter runs for dead proposals


def test_init_requires_positive_prior():
    target = GridTarget([1.0, 1.0, 1.0])
    with pytest.raises(PmmhInitError):
        run_pmmh(target, 1, 10, stream(53), proposal=UniformGridProposal(3),
                 init_theta=np.array([7.0]))


def test_detailed_balance_on_three_point_grid():
    # stationary law Pi(theta) ~ prior * (V(theta) + eps), V deterministic
    liks = np.array([1.0, 2.0, 0.5])
    eps = 0.25
    target = GridTarget(liks)
    res = run_pmmh(target, 1, 60_000, stream(54), eps=eps,
                   proposal=UniformGridProposal(3), init_theta=np.array([0.0]))
    occupancy = np.zeros(3)
    for state in res.jump_chain:
        occupancy[int(round(state.theta[0]))] += state.holding
    expected = (liks + eps) / (liks + eps).sum() * occupancy.sum()
    assert stats.chisquare(occupancy, expected).pvalue > 0.001


def test_eps_guard_survives_zero_likelihood_proposals():
    # half the grid has V = 0: with eps > 0 the chain still runs and visits it
    liks = np.array([1.0, 0.0])
    target = GridTarget(liks)
    res = run_pmmh(target, 1, 4000, stream(55), eps=0.5,
                   proposal=UniformGridProposal(2), init_theta=np.array([0.0]))
    occupancy = np.zeros(2)
    for state in res.jump_chain:
        occupancy[int(round(state.theta[0]))] += state.holding
    assert occupancy[1] > 0  # accepted with probability ~ eps/(V0+eps)
    expected = (liks + 0.5) / (liks + 0.5).sum() * occupancy.sum()
    assert stats.chisquare(occupancy, expected).pvalue > 0.001


def test_acceptance_rate_on_ou_lands_in_band(ou_prob):
    res = run_pmmh(HmmPmmhTarget(ou_prob, 0), 20, 3000, stream(56), eps=1e-6,
                   proposal=AdaptiveProposal(2, init_cov=np.eye(2) * 0.01),
                   adapt_until=1500)
    post = [s for s in res.jump_chain if s.start_iter > 1500]
    window_rate = len(post) / 1500
    assert 0.05 <= window_rate <= 0.5


# ---------------------------------------------------------------------------
# corrections and estimators

@pytest.fixture(scope="module")
def small_run(ou_prob):
    res = run_pmmh(HmmPmmhTarget(ou_prob, 0), 10, 800, stream(57), eps=1e-6,
                   proposal=AdaptiveProposal(2, init_cov=np.eye(2) * 0.01),
                   adapt_until=400)
    dist = LevelDistribution.geometric(1.5, 4)
    records = run_corrections(res.jump_chain, ou_prob, dist, 10, 1e-6, seed=57)
    return res, records


def test_correction_record_weight_scaling(small_run, ou_prob):
    res, records = small_run
    state = res.jump_chain[0]
    rec = records[0]
    denom = np.exp(state.log_sum_v) + 1e-6
    np.testing.assert_allclose(rec.w0, np.exp(state.log_v) / denom, rtol=1e-10)
    assert rec.p_level == LevelDistribution.geometric(1.5, 4).mass(rec.level)
    n = rec.log_coupled_v.shape[0]
    assert np.all(rec.wl[:n] >= 0) and np.all(rec.wl[n:] <= 0)
    assert rec.holding == state.holding


def test_corrections_deterministic_and_order_independent(small_run, ou_prob):
    res, records = small_run
    dist = LevelDistribution.geometric(1.5, 4)
    again = run_corrections(res.jump_chain, ou_prob, dist, 10, 1e-6, seed=57,
                            workers=2)
    for a, b in zip(records, again):
        assert a.level == b.level
        np.testing.assert_array_equal(a.wl, b.wl)
        np.testing.assert_array_equal(a.base_paths, b.base_paths)


def test_constant_functional_recovers_constant(small_run):
    _, records = small_run

    def f(theta, path):
        return 3.25

    assert is_estimate(records, f) == pytest.approx(3.25, rel=1e-12)


def test_jump_chain_equivalence_with_per_iteration_assembly(small_run):
    # reference: loop raw iterations, adding the covering block's terms once each
    _, records = small_run
    f = ThetaOnly(lambda theta: theta[0] + 0.1 * theta[1] ** 2)
    numer = 0.0
    denom = 0.0
    spans = {}
    for rec in records:
        spans[rec.index] = (rec.start_iter, rec.start_iter + rec.holding - 1,
                            record_terms(rec, f))
    total_iters = max(hi for _, hi, _ in spans.values())
    for it in range(1, total_iters + 1):
        for lo, hi, (n_k, d_k) in spans.values():
            if lo <= it <= hi:
                numer += n_k
                denom += d_k
                break
    assert is_estimate(records, f) == pytest.approx(numer / denom, rel=1e-12)


def test_checkpoint_cut_at_full_length_matches_is_estimate(small_run):
    _, records = small_run
    f = ThetaOnly(lambda theta: theta)
    total = sum(r.holding for r in records)
    ests = estimates_at_checkpoints(records, f, [total // 3, total])
    np.testing.assert_allclose(ests[-1], is_estimate(records, f), rtol=1e-12)


def test_correction_mean_matches_kalman_telescope(ou_prob, ou_data):
    # conditional on theta: E[Delta_L(1)/p_L] = level-Lmax minus level-0 likelihood
    from rmlsmc.delta_pf import delta_batch_estimates
    dist = LevelDistribution.geometric(1.5, 4)
    truth = (np.exp(ou_level_loglik(OU_THETA, ou_data, 4))
             - np.exp(ou_level_loglik(OU_THETA, ou_data, 0)))
    rng = stream(58)
    n = 20_000
    levels = dist.sample_batch(rng, n)
    vals = np.empty(n)
    for level in np.unique(levels):
        rows = np.flatnonzero(levels == level)
        deltas = delta_batch_estimates(ou_prob.coupled_model(OU_THETA, int(level)),
                                       20, rows.size, rng)
        vals[rows] = deltas / dist.mass(int(level))
    se = vals.std(ddof=1) / np.sqrt(n)
    assert_within_se(vals.mean(), truth, se, 4, "correction telescope")


def test_identical_coupling_reduces_to_coarse_average(ou_prob, ou_data):
    class IdenticalOuLegs(CoupledFkModel):
        def __init__(self, problem, theta, n_steps):
            self.inner = problem.level_model(theta, 0)
            self.n_steps, self.base_dim, self.state_dim = n_steps, 1, 2
            self.variant = "average"
            self.grid_fine = type("G", (), {"steps": 2})()

        def sample_initial(self, shape, rng):
            x = self.inner.sample_initial(shape, rng)
            return np.concatenate([x, x], axis=-1)

        def sample_step(self, t, x_prev, rng):
            x = self.inner.sample_step(t, x_prev[..., :1], rng)
            return np.concatenate([x, x], axis=-1)

        def log_potential_pair(self, t, x, history=None):
            lg = self.inner.log_potential(t, x[..., :1])
            return lg, lg.copy()

    class IdenticalCouplingProblem(HmmProblem):
        def coupled_model(self, theta, level, variant="average"):
            return IdenticalOuLegs(self, theta, self.n_steps)

    stub = IdenticalCouplingProblem(ou_prob.diffusion, ou_prob.obs_model,
                                    ou_prob.observations, ou_prob.x0, ou_prob.prior)
    res = run_pmmh(HmmPmmhTarget(stub, 0), 8, 300, stream(59), eps=1e-6,
                   proposal=AdaptiveProposal(2, init_cov=np.eye(2) * 0.01))
    dist = LevelDistribution.geometric(1.5, 3)
    records = run_corrections(res.jump_chain, stub, dist, 8, 1e-6, seed=59)
    # fine and coarse legs cancel exactly: zero net correction per record
    for r in records:
        n = r.log_coupled_v.shape[0]
        np.testing.assert_array_equal(r.wl[:n] + r.wl[n:], np.zeros(n))
    f = ThetaOnly(lambda theta: theta[0])
    # coarse-only weighted posterior average
    numer = sum(r.holding * r.w0.sum() * r.theta[0] for r in records)
    denom = sum(r.holding * r.w0.sum() for r in records)
    assert is_estimate(records, f) == pytest.approx(numer / denom, rel=1e-10)


def test_subsampled_equals_full_for_single_particle(ou_prob):
    res = run_pmmh(HmmPmmhTarget(ou_prob, 0), 1, 300, stream(60), eps=1e-6,
                   proposal=AdaptiveProposal(2, init_cov=np.eye(2) * 0.01))
    dist = LevelDistribution.geometric(1.5, 3)
    records = run_corrections(res.jump_chain, ou_prob, dist, 1, 1e-6, seed=60)

    class TerminalF:
        theta_only = False

        def __call__(self, theta, path):
            return path[-1, 0]

    f = TerminalF()
    full = is_estimate(records, f)
    sub = is_estimate_subsampled(records, f, stream(61))
    assert sub == pytest.approx(full, rel=1e-12)


def test_subsampled_equals_full_for_theta_only_f(small_run):
    _, records = small_run
    f = ThetaOnly(lambda theta: theta)
    np.testing.assert_allclose(is_estimate_subsampled(records, f, stream(62)),
                               is_estimate(records, f), rtol=1e-12)


def test_jump_chain_section_arithmetic():
    from rmlsmc.pmmh import JumpState

    def state(idx, start, hold):
        return JumpState(index=idx, start_iter=start, holding=hold,
                         theta=np.array([float(idx)]), log_v=np.zeros(1),
                         log_sum_v=0.0, paths=np.zeros((1, 2, 1)))

    chain = [state(0, 1, 3), state(1, 4, 2), state(2, 6, 5)]
    section = jump_chain_section(chain, first_iter=2, last_iter=9, thin=3)
    # retained raw iterations: 2, 5, 8 -> one per block
    assert [s.holding for s in section] == [1, 1, 1]
    assert [s.start_iter for s in section] == [1, 2, 3]
    full = jump_chain_section(chain, 1, 10, 1)
    assert [s.holding for s in full] == [3, 2, 5]


def test_singleton_level_distribution_corrections(small_run, ou_prob):
    res, _ = small_run
    dist = LevelDistribution.geometric(1.5, l_max=1)
    records = run_corrections(res.jump_chain[:5], ou_prob, dist, 10, 1e-6, seed=63)
    assert all(r.level == 1 and r.p_level == 1.0 for r in records)


def test_corrections_rerun_from_saved_chain_with_new_distribution(small_run, ou_prob,
                                                                  tmp_path):
    # phase 2 can be re-run against a stored phase-1 chain
    res, _ = small_run
    path = tmp_path / "chain.jsonl"
    save_jump_chain(path, res)
    chain, _ = load_jump_chain(path)
    dist = LevelDistribution.log_adjusted(1.0, 2.0, 5)
    records = run_corrections(chain, ou_prob, dist, 10, 1e-6, seed=64)
    assert len(records) == len(res.jump_chain)
    assert {r.level for r in records} <= set(range(1, 6))
    f = ThetaOnly(lambda theta: theta)
    assert np.all(np.isfinite(is_estimate(records, f)))


def test_checkpoint_files_roundtrip(small_run, tmp_path):
    res, records = small_run
    chain_path = tmp_path / "chain.jsonl"
    corr_path = tmp_path / "corr.jsonl"
    save_jump_chain(chain_path, res)
    save_corrections(corr_path, records)
    chain, meta = load_jump_chain(chain_path)
    loaded = load_corrections(corr_path)
    assert meta["n_iters"] == res.n_iters
    assert len(chain) == len(res.jump_chain)
    np.testing.assert_allclose(chain[0].paths, res.jump_chain[0].paths)
    f = ThetaOnly(lambda theta: theta)
    np.testing.assert_allclose(is_estimate(loaded, f), is_estimate(records, f),
                               rtol=1e-12)
