import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_differences
from mbf import fisher
from mbf.convergence import (
    assumption_metrics,
    output_jacobian_blocks,
    run_exact_mbf,
    suggest_damping_and_lr,
    theorem_instance,
    verify_linear_rate,
)
from mbf.errors import DivergenceError, TheoremPreconditionError
from mbf.nn import LayerSpec, NetworkSpec, Params, forward, init_params, mlp


def linear_net(d):
    return NetworkSpec((LayerSpec.dense(d, 1, bias=False),), "squared_error")


def fd_output_jacobian(params, spec, X):
    def outputs(w):
        return forward(Params.from_flat(spec, w), spec, X)[0][:, 0]

    w = params.flat()
    return np.stack([central_differences(lambda v: outputs(v)[i], w) for i in range(len(X))])


def gram_oracle(J, partition, mode):
    mins = []
    for idx in partition.global_blocks():
        s = np.linalg.svd(J[:, idx], compute_uv=False)
        n, p = J[:, idx].shape
        if mode == "sample" and p < n:
            mins.append(0.0)
        else:
            mins.append(s.min() ** 2)
    return min(mins)


class TestAssumptionMetrics:
    def test_orthogonal_rows(self):
        spec = linear_net(3)
        p = Params([np.ones((3, 1))], [None])
        X = np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
        m = assumption_metrics(spec, p, X)
        assert m.lam0 == pytest.approx(4.0, rel=1e-12)
        assert m.K == 1
        assert m.warnings == []

    def test_duplicate_sample_is_degenerate(self):
        spec = linear_net(3)
        p = Params([np.ones((3, 1))], [None])
        X = np.array([[1.0, 2.0, 0.5], [1.0, 2.0, 0.5]])
        m = assumption_metrics(spec, p, X)
        assert abs(m.lam0) <= 1e-12
        assert any("degenerate" in w for w in m.warnings)

    @pytest.mark.parametrize("mode", ["sample", "auto", "param"])
    def test_matches_svd_of_jacobian(self, mode):
        spec, p, X, _ = theorem_instance((8, 9, 1), n=8, seed=3)
        part = fisher.partition_network(spec, shared_fc_threshold=np.inf)
        _, blocks = output_jacobian_blocks(p, spec, X)
        J = np.concatenate(blocks, axis=1)
        m = assumption_metrics(spec, p, X, gram=mode)
        if mode == "param":
            expected = min(np.linalg.eigvalsh(J[:, i].T @ J[:, i])[0] for i in part.global_blocks())
        else:
            expected = gram_oracle(J, part, mode)
        assert abs(m.lam0 - expected) <= 1e-10 * max(1.0, abs(expected))

    def test_jacobian_matches_finite_differences(self):
        spec, p, X, _ = theorem_instance((3, 4, 1), n=6, seed=1)
        _, blocks = output_jacobian_blocks(p, spec, X)
        J = np.concatenate(blocks, axis=1)
        np.testing.assert_allclose(J, fd_output_jacobian(p, spec, X), rtol=1e-6, atol=1e-8)

    def test_block_count(self):
        spec, p, X, _ = theorem_instance((4, 8, 1), n=5)
        assert assumption_metrics(spec, p, X).K == 9

    def test_multi_output_rejected(self):
        spec = mlp([2, 3, 2], "tanh")
        with pytest.raises(TheoremPreconditionError):
            assumption_metrics(spec, init_params(spec, 0), np.zeros((4, 2)))

    def test_unknown_mode(self):
        spec, p, X, _ = theorem_instance(n=3)
        with pytest.raises(ValueError):
            assumption_metrics(spec, p, X, gram="both")


class TestSuggestion:
    def test_four_blocks(self):
        lam, lr = suggest_damping_and_lr(2.0, 10, 4)
        assert lam == pytest.approx(4 * 2.0 / 90)
        assert lr == pytest.approx(2.0 / 4.5 ** 2, rel=1e-12)
        assert lr == pytest.approx(0.098765, abs=1e-6)

    def test_three_blocks(self):
        _, lr = suggest_damping_and_lr(1.0, 7, 3)
        cross = 0.5 * np.sqrt(3) / 2
        numerator = 3 - 2 * cross - 1
        assert numerator == pytest.approx(1.13397, abs=1e-5)
        assert lr == pytest.approx(numerator / (3 + cross) ** 2, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-6, 1e3), st.integers(1, 1000), st.integers(3, 200))
    def test_default_damping_is_scale_free(self, lam0, n, K):
        lam, lr = suggest_damping_and_lr(lam0, n, K)
        _, ref = suggest_damping_and_lr(1.0, 1, K)
        assert lam == pytest.approx(4 * lam0 / (9 * n))
        assert lr == pytest.approx(ref, rel=1e-12)
        assert 0 < lr < 1

    @pytest.mark.parametrize("args", [(1.0, 5, 2), (0.0, 5, 4), (1.0, 5, 4, 0.6)])
    def test_rejects(self, args):
        with pytest.raises(TheoremPreconditionError):
            suggest_damping_and_lr(*args)

    def test_too_much_damping(self):
        with pytest.raises(TheoremPreconditionError):
            suggest_damping_and_lr(1.0, 5, 4, lam=10.0)


class TestVerifyLinearRate:
    def test_examples(self):
        assert verify_linear_rate([1.0, 0.5, 0.25], 0.5) == (True, None)
        assert verify_linear_rate([1.0, 0.5, 0.3], 0.5) == (False, 2)
        assert verify_linear_rate([1.0, 0.5, 0.3], 0.5, slack=0.06) == (True, None)

    def test_flat_residual_fails_at_three(self):
        res = [1.0, 0.9, 0.81, 1.0, 0.5]
        assert verify_linear_rate(res, 0.1) == (False, 3)

    def test_exact_geometric_passes(self):
        res = [2.0 * 0.7 ** k for k in range(30)]
        assert verify_linear_rate(res, 0.3, slack=1e-9 * res[0])[0]

    @pytest.mark.parametrize("lr", [0.0, 1.0, -0.1])
    def test_lr_range(self, lr):
        with pytest.raises(ValueError):
            verify_linear_rate([1.0], lr)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0.01, 0.99), st.floats(1e-3, 1e3))
    def test_invariant_under_scaling(self, res, lr, c):
        a = verify_linear_rate(res, lr)
        b = verify_linear_rate([c * r for r in res], lr)
        if a != b:
            # only ties at the float boundary may flip
            k = (a[1] if a[1] is not None else b[1])
            assert res[k] == pytest.approx((1 - lr) ** k * res[0], rel=1e-12)


class TestRun:
    def test_doubling_r0_keeps_verdict(self):
        spec, p, X, y = theorem_instance(n=4)
        u0, _ = output_jacobian_blocks(p, spec, X)
        verdicts = []
        for scale in (1.0, np.sqrt(2.0)):
            rep = run_exact_mbf(spec, p, X, u0 + scale * (y - u0), lam=1e-4, lr=0.05, k_max=40)
            verdicts.append(verify_linear_rate(rep, 0.05, 1e-9 * rep.residuals[0])[0])
        assert verdicts[0] == verdicts[1]

    def test_gram_floors(self):
        spec, p, X, y = theorem_instance(n=4)
        rep = run_exact_mbf(spec, p, X, y, lam=1e-4, lr=0.05, k_max=2)
        assert rep.gram_floor == pytest.approx(4 * rep.lam0 / 9)
        assert rep.gram_floor_sqrt == pytest.approx(4 * np.sqrt(rep.lam0) / 9)

    def test_fixed_point(self):
        spec, p, X, _ = theorem_instance(n=6, target_noise=0.0)
        u0, _ = output_jacobian_blocks(p, spec, X)
        rep = run_exact_mbf(spec, p, X, u0, lam=0.1, lr=0.1, k_max=5)
        assert len(rep.residuals) == 6
        assert np.all(rep.residuals == 0.0)
        np.testing.assert_array_equal(rep.w_drift, 0.0)
        assert rep.in_hypothesis and rep.bound_satisfied

    def test_report_shapes(self):
        spec, p, X, y = theorem_instance(n=4)
        rep = run_exact_mbf(spec, p, X, y, lam=0.1, lr=0.05, k_max=7)
        for arr in (rep.residuals, rep.j_drift, rep.w_drift, rep.gram_min, rep.monitor_tripped):
            assert len(arr) == 8
        assert rep.j_drift[0] == 0.0 and rep.w_drift[0] == 0.0
        assert len(rep.rows()) == 8 and rep.rows()[0][2] == rep.residuals[0]
        assert rep.drift_threshold == pytest.approx(0.5 / 3 * np.sqrt(rep.lam0))

    def test_compliant_instance_converges(self):
        spec, p, X, y = theorem_instance((4, 8, 1), n=4, seed=0)
        m = assumption_metrics(spec, p, X)
        lam, lr = suggest_damping_and_lr(m.lam0, 4, m.K)
        rep = run_exact_mbf(spec, p, X, y, lam, min(lr, 0.05), 100, lam0=m.lam0)
        assert rep.in_hypothesis
        assert rep.bound_satisfied
        assert np.all(np.diff(rep.residuals) <= 1e-15)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raised(self):
        spec, p, X, y = theorem_instance(n=4, target_noise=1.0)
        with pytest.raises(DivergenceError):
            run_exact_mbf(spec, p, X, 1e300 * np.sign(y), lam=1e-3, lr=1e5, k_max=50)

    def test_instance_is_seeded(self):
        a = theorem_instance(seed=4)
        b = theorem_instance(seed=4)
        np.testing.assert_array_equal(a[2], b[2])
        np.testing.assert_array_equal(a[3], b[3])
        np.testing.assert_array_equal(a[1].flat(), b[1].flat())
