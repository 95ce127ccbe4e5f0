import numpy as np
import pytest

from amgarena import attacks as atk
from amgarena import numerics as nm
from amgarena import oracle as oc
from amgarena.errors import BoundaryLostError, InvalidInputError


def rng(seed=0):
    return np.random.default_rng(seed)


def threshold_oracle_net(cut=0.5, sharpness=1000.0):
    """1-d logits: class 1 iff x > cut."""
    net = nm.make_dense_net(rng(0), 1, [], 2)
    net.layers[0].weight[...] = np.array([[-sharpness, sharpness]])
    net.layers[0].bias[...] = np.array([sharpness * cut, -sharpness * cut])
    return net


def hyperplane_net(w, b, sharpness=200.0):
    """2-class linear net whose boundary is w . x + b = 0 (class 1 above)."""
    w = np.asarray(w, dtype=np.float64)
    net = nm.make_dense_net(rng(0), w.size, [], 2)
    net.layers[0].weight[...] = np.stack([-sharpness * w, sharpness * w]).T
    net.layers[0].bias[...] = np.array([-sharpness * b, sharpness * b])
    return net


def make_session(net, x_c, target, budget):
    return oc.QuerySession(oc.Oracle(net), x_c, target, budget)


class TestBinarySearch:
    def test_analytic_threshold(self):
        net = threshold_oracle_net(0.5)
        s = make_session(net, np.zeros(1), target=1, budget=100)
        z = atk.binary_search_boundary(s, np.array([1.0]), np.array([0.0]),
                                       tol=1e-3)
        assert 0.5 < z[0] <= 0.501

    def test_immediate_convergence(self):
        net = threshold_oracle_net(0.5)
        s = make_session(net, np.zeros(1), target=1, budget=100)
        x_adv = np.array([0.5005])
        z = atk.binary_search_boundary(s, x_adv, np.array([0.5001]), tol=1e-3)
        assert s.used <= 2
        np.testing.assert_array_equal(z, x_adv)

    def test_result_is_adversarial(self):
        net = threshold_oracle_net(0.31)
        for seed in range(10):
            r = rng(seed)
            lo = r.uniform(0.0, 0.3)
            hi = r.uniform(0.35, 1.0)
            s = make_session(net, np.zeros(1), target=1, budget=100)
            z = atk.binary_search_boundary(s, np.array([hi]), np.array([lo]),
                                           tol=1e-3)
            probe = make_session(net, np.zeros(1), target=1, budget=10)
            assert probe.psi(z) > 0

    def test_query_count_bound(self):
        net = threshold_oracle_net(0.5)
        s = make_session(net, np.zeros(1), target=1, budget=100)
        atk.binary_search_boundary(s, np.array([1.0]), np.array([0.0]),
                                   tol=1e-3)
        assert s.used <= int(np.ceil(np.log2(1 / 1e-3))) + 1

    def test_boundary_lost(self):
        net = threshold_oracle_net(0.5)
        s = make_session(net, np.zeros(1), target=1, budget=100)
        with pytest.raises(BoundaryLostError):
            atk.binary_search_boundary(s, np.array([0.2]), np.array([0.1]),
                                       tol=1e-3)


class TestEstimateGradient:
    def test_all_positive_returns_mean_direction(self):
        # constant-positive oracle: centered estimate would vanish, so the
        # raw signed mean is returned
        w = np.ones(8) / np.sqrt(8)
        net = hyperplane_net(w, 10.0)  # everything in [0,1] is class 1
        x = np.full(8, 0.5)
        s = make_session(net, np.zeros(8), target=1, budget=100)
        r = rng(3)
        est = atk.estimate_gradient(s, x, delta=0.01, num_eval=20, rng=r)
        r2 = rng(3)
        u = atk.sample_sphere(r2, 20, 8)
        pts = np.clip(x[None, :] + 0.01 * u, 0, 1)
        u = (pts - x[None, :]) / 0.01
        np.testing.assert_allclose(est, u.mean(axis=0), atol=1e-12)

    def test_all_flipped_norm_shrinks_like_inverse_sqrt(self):
        w = np.ones(8) / np.sqrt(8)
        net = hyperplane_net(w, -10.0)  # nothing is class 1: phi = -1
        x = np.full(8, 0.5)
        norms = {10: [], 1000: []}
        for seed in range(100):
            for b in (10, 1000):
                s = make_session(net, np.zeros(8), target=1, budget=2000)
                est = atk.estimate_gradient(s, x, 0.01, b, rng(seed * 7 + b))
                norms[b].append(np.linalg.norm(est))
        ratio = np.mean(norms[10]) / np.mean(norms[1000])
        expected = np.sqrt(1000 / 10)
        assert np.mean(norms[1000]) < np.mean(norms[10])
        assert expected / 2 < ratio < expected * 2

    def test_alignment_improves_with_num_eval(self):
        dims = 8
        w = np.ones(dims) / np.sqrt(dims)
        wins = 0
        for seed in range(100):
            r = rng(seed)
            x = np.full(dims, 0.5)  # exactly on the boundary w.(x-0.5)=0
            net = hyperplane_net(w, -float(w @ x))
            cosines = {}
            for b in (10, 1000):
                s = make_session(net, np.zeros(dims), target=1, budget=2000)
                est = atk.estimate_gradient(s, x, 0.05, b,
                                            rng(seed * 31 + b))
                cosines[b] = float(
                    est @ w / (np.linalg.norm(est) * np.linalg.norm(w)))
            if cosines[1000] > cosines[10]:
                wins += 1
        assert wins >= 95

    def test_zero_eval_rejected(self):
        net = threshold_oracle_net()
        s = make_session(net, np.zeros(1), target=1, budget=10)
        with pytest.raises(InvalidInputError):
            atk.estimate_gradient(s, np.array([0.6]), 0.01, 0, rng())


class TestHsja:
    def test_zero_budget_identity(self):
        net = threshold_oracle_net(0.5)
        s = make_session(net, np.zeros(1), target=1, budget=0)
        state = atk.init_attack_state(np.array([1.0]), np.array([0.0]))
        before = state.x_b.copy()
        atk.hsja_iterate(s, state, atk.HsjaKnobs(), rng())
        np.testing.assert_array_equal(state.x_b, before)
        assert s.used == 0

    def test_best_distance_monotone_and_budget_exact(self):
        dims = 6
        r = rng(5)
        w = r.standard_normal(dims)
        w /= np.linalg.norm(w)
        x_c = np.full(dims, 0.5) - 0.2 * w
        x_g = np.full(dims, 0.5) + 0.2 * w
        net = hyperplane_net(w, -float(w @ np.full(dims, 0.5)))
        s = oc.QuerySession(oc.Oracle(net), x_c, target=1, budget=400,
                            x_g=x_g)
        state = atk.init_attack_state(x_g, x_c)
        atk.hsja_iterate(s, state, atk.HsjaKnobs(num_eval_base=10), rng(6))
        assert s.used == 400
        curve = s.trace.best_curve()
        assert np.all(np.diff(curve) <= 1e-12)
        assert state.d <= state.g

    def test_converges_near_hyperplane_distance(self):
        dims = 10
        r = rng(7)
        w = r.standard_normal(dims)
        w /= np.linalg.norm(w)
        center = np.full(dims, 0.5)
        net = hyperplane_net(w, -float(w @ center))
        x_c = np.clip(center - 0.15 * w + 0.02 * r.standard_normal(dims), 0, 1)
        x_g = np.clip(center + 0.18 * w, 0, 1)
        rho = abs(w @ x_c - w @ center)  # distance of x_c to the boundary
        s = oc.QuerySession(oc.Oracle(net), x_c, target=1, budget=3000,
                            x_g=x_g)
        state = atk.init_attack_state(x_g, x_c)
        atk.hsja_iterate(s, state, atk.HsjaKnobs(num_eval_base=30), rng(8))
        assert s.true_best_dist <= 1.10 * rho


class TestPerlin:
    def test_deterministic(self):
        a = atk.perlin_field((8, 8), 2, rng(11))
        b = atk.perlin_field((8, 8), 2, rng(11))
        np.testing.assert_array_equal(a, b)

    def test_range(self):
        for seed in range(5):
            f = atk.perlin_field((16, 16), 4, rng(seed))
            assert f.min() >= -1.0 and f.max() <= 1.0

    def test_adjacent_smoothness(self):
        f = atk.perlin_field((8, 8), 2, rng(12))
        horiz = np.abs(np.diff(f, axis=1)).max()
        assert horiz < 1.0

    def test_1d_field(self):
        f = atk.perlin_field((32,), 4, rng(13))
        assert f.shape == (32,) and f.min() >= -1 and f.max() <= 1


class TestBagsSteps:
    def _state(self, seed=20, dims=16):
        r = rng(seed)
        x_c = r.uniform(0.3, 0.7, size=dims)
        x_g = r.uniform(0.3, 0.7, size=dims)
        return atk.init_attack_state(x_g, x_c)

    def test_orthogonality(self):
        state = self._state()
        knobs = atk.BagsKnobs(orth_step=0.1, mask_bias=0.0, perlin_bias=0.0)
        cand = atk.bags_orthogonal_step(state, knobs, rng(21))
        step = cand - state.x_t
        v = state.x_c - state.x_t
        # interior points: no clipping, so orthogonality is exact
        assert abs(float(np.ravel(step) @ np.ravel(v))) < 1e-6

    def test_step_norm(self):
        state = self._state(22)
        knobs = atk.BagsKnobs(orth_step=0.25, mask_bias=0.0, perlin_bias=0.0)
        cand = atk.bags_orthogonal_step(state, knobs, rng(23))
        norm = np.linalg.norm(cand - state.x_t)
        assert abs(norm - 0.25 * state.d) < 1e-6

    def test_full_mask_bias_respects_support(self):
        r = rng(24)
        x_c = r.uniform(0.3, 0.7, size=(1, 8, 8))
        x_g = x_c.copy()
        x_g[0, :4, :] = r.uniform(0.3, 0.7, size=(4, 8))  # differ on top half
        state = atk.init_attack_state(x_g, x_c)
        knobs = atk.BagsKnobs(orth_step=0.1, mask_bias=1.0, perlin_bias=0.0)
        cand = atk.bags_orthogonal_step(state, knobs, rng(25))
        step = cand - state.x_t
        np.testing.assert_allclose(step[0, 4:, :], 0.0, atol=1e-12)

    def test_source_step_lambda_one(self):
        x_s = np.array([0.4, 0.4])
        x_c = np.array([0.6, 0.6])
        out = atk.bags_source_step(x_s, x_c, 1.0, c=0.1)
        eps = 0.3 * 0.1
        np.testing.assert_allclose(out, x_s + eps * (x_c - x_s))

    def test_source_step_lambda_zero(self):
        x_s = np.array([0.4, 0.4])
        x_c = np.array([0.6, 0.6])
        out = atk.bags_source_step(x_s, x_c, 0.0, c=0.1)
        eps = 1.3 * 0.1
        np.testing.assert_allclose(out, x_s + eps * (x_c - x_s))

    def test_source_step_contracts_distance(self):
        x_s = np.array([0.2, 0.8])
        x_c = np.array([0.7, 0.3])
        lam, c = 0.5, 0.2
        eps = (1.3 - lam) * c
        out = atk.bags_source_step(x_s, x_c, lam, c)
        d_before = np.linalg.norm(x_s - x_c)
        d_after = np.linalg.norm(out - x_c)
        np.testing.assert_allclose(d_after, (1 - eps) * d_before, atol=1e-12)


class TestBagsIterate:
    def test_accepted_candidates_are_positive_and_budget_exact(self):
        dims = 8
        r = rng(30)
        w = r.standard_normal(dims)
        w /= np.linalg.norm(w)
        center = np.full(dims, 0.5)
        net = hyperplane_net(w, -float(w @ center))
        x_c = np.clip(center - 0.15 * w, 0, 1)
        x_g = np.clip(center + 0.15 * w, 0, 1)
        s = oc.QuerySession(oc.Oracle(net), x_c, target=1, budget=301,
                            x_g=x_g)
        state = atk.init_attack_state(x_g, x_c)
        atk.bags_iterate(s, state, atk.BagsKnobs(), rng(31))
        assert s.used == 301
        # the adopted walk point always answered +1
        probe = oc.QuerySession(oc.Oracle(net), x_c, target=1, budget=10)
        assert probe.psi(state.x_b) > 0
        curve = s.trace.best_curve()
        assert np.all(np.diff(curve) <= 1e-12)


class TestRunAttack:
    def test_trace_length_equals_budget(self):
        dims = 6
        r = rng(40)
        w = r.standard_normal(dims)
        w /= np.linalg.norm(w)
        center = np.full(dims, 0.5)
        net = hyperplane_net(w, -float(w @ center))
        x_c = np.clip(center - 0.1 * w, 0, 1)
        x_g = np.clip(center + 0.1 * w, 0, 1)
        for kind in ("hsja", "bags"):
            s = oc.QuerySession(oc.Oracle(net), x_c, target=1, budget=200,
                                x_g=x_g)
            trace, _ = atk.run_attack(kind, s, x_g, x_c, rng=rng(41))
            assert len(trace.adv_rows()) == 200
            curve = trace.best_curve()
            assert np.all(np.diff(curve) <= 1e-12)

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            atk.run_attack("nope", None, None, None)
