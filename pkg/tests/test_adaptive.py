import numpy as np
import pytest
from scipy import stats

from amgarena import adaptive as ad
from amgarena.errors import InvalidInputError, InvalidSpecError


def rng(seed=0):
    return np.random.default_rng(seed)


def small_policy(seed=0, obs_dim=2, act=((0.0, 1.0),), hidden=3):
    return ad.GaussianPolicy(obs_dim, act, rng(seed), hidden=hidden)


class TestGaussianPolicy:
    def test_zero_spread_returns_squashed_mean(self):
        p = small_policy(1)
        p.log_std[...] = ad.LOG_STD_MIN  # effectively deterministic
        obs = np.array([0.3, -0.2])
        action, _, logp = p.sample(obs, rng(2))
        np.testing.assert_allclose(action, p.mean_action(obs), atol=1e-3)
        assert np.isfinite(logp)

    def test_empirical_mean_matches_squashed_mean(self):
        p = small_policy(3)
        # zero the output layer so the raw mean sits at the squash center,
        # where tanh is odd and the squashing adds no bias
        p.net.layers[-1].weight[...] = 0.0
        p.net.layers[-1].bias[...] = 0.0
        p.log_std[...] = np.log(0.05)
        obs = np.array([0.5, 0.5])
        r = rng(4)
        draws = np.array([p.sample(obs, r)[0][0] for _ in range(10000)])
        se = draws.std() / np.sqrt(len(draws))
        assert abs(draws.mean() - p.mean_action(obs)[0]) <= 3 * se

    def test_actions_within_bounds(self):
        p = small_policy(5, act=((0.2, 0.8),))
        p.log_std[...] = 1.0
        r = rng(6)
        for _ in range(200):
            a, _, _ = p.sample(np.array([0.1, 0.9]), r)
            assert 0.2 <= a[0] <= 0.8

    def test_bounds_validation(self):
        with pytest.raises(InvalidInputError):
            ad.GaussianPolicy(2, ((1.0, 0.0),), rng(7))

    def test_copy_independent(self):
        p = small_policy(8)
        q = p.copy()
        q.log_std += 1.0
        assert not np.allclose(p.log_std, q.log_std)


class TestReinforce:
    def _episodes(self, p, seed, n=3, steps=5):
        r = rng(seed)
        eps = []
        for _ in range(n):
            obs = r.uniform(-1, 1, size=(steps, p.obs_dim))
            draws = np.stack([p.sample(o, r)[1] for o in obs])
            rewards = r.uniform(-1, 1, size=steps)
            eps.append(ad.EpisodeBatchItem(obs, draws, rewards))
        return eps

    def test_zero_advantage_keeps_parameters(self):
        p = small_policy(10)
        episodes = self._episodes(p, 11)
        for ep in episodes:
            ep.rewards[...] = 0.0
        before = [q.copy() for q in p.parameters()]
        trainer = ad.ReinforceTrainer(lr=0.1)
        trainer.baseline = 0.0
        trainer.initialized = True
        trainer.update(p, episodes)
        for b, a in zip(before, p.parameters()):
            np.testing.assert_array_equal(b, a)

    def test_gradient_matches_finite_differences(self):
        p = small_policy(12)
        n_params = sum(q.size for q in p.parameters())
        assert n_params <= 50
        episodes = self._episodes(p, 13)
        baseline = 0.2
        _, grads = ad.policy_objective_and_grad(p, episodes, baseline)
        params = p.parameters()
        eps = 1e-6
        for pi, param in enumerate(params):
            it = np.nditer(param, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                old = param[idx]
                param[idx] = old + eps
                up, _ = ad.policy_objective_and_grad(p, episodes, baseline)
                param[idx] = old - eps
                dn, _ = ad.policy_objective_and_grad(p, episodes, baseline)
                param[idx] = old
                num = (up - dn) / (2 * eps)
                ana = grads[pi][idx]
                denom = max(abs(num), 1e-4)
                assert abs(ana - num) / denom < 1e-3, (pi, idx)
                it.iternext()

    def test_bandit_reward_curve_improves(self):
        # one-step continuous bandit: reward = -|action - 0.7|
        correlations = []
        for seed in range(5):
            p = ad.GaussianPolicy(1, ((0.0, 1.0),), rng(seed), hidden=8,
                                  gamma=0.9)
            trainer = ad.ReinforceTrainer(lr=0.05)
            r = rng(100 + seed)
            curve = []
            obs = np.zeros((1, 1))
            for _ in range(150):
                episodes = []
                for _ in range(16):
                    action, draw, _ = p.sample(obs[0], r)
                    reward = -abs(action[0] - 0.7)
                    episodes.append(ad.EpisodeBatchItem(
                        obs, draw[None, :], np.array([reward])))
                info = trainer.update(p, episodes)
                curve.append(info["mean_return"])
            rho = stats.spearmanr(np.arange(len(curve)), curve).statistic
            correlations.append(rho)
        assert all(rho > 0.8 for rho in correlations), correlations

    def test_nan_gradient_skipped(self):
        p = small_policy(14)
        episodes = self._episodes(p, 15)
        episodes[0].rewards[0] = np.nan
        before = [q.copy() for q in p.parameters()]
        info = ad.reinforce_update(p, episodes, lr=0.1)
        assert info["skipped"]
        for b, a in zip(before, p.parameters()):
            np.testing.assert_array_equal(b, a)


class TestObservation:
    def _tracker(self, kind="bags", g=10.0):
        return ad.ProgressTracker(budget=100, g=g, dim=784, attack_kind=kind)

    def test_episode_start_location_is_one(self):
        tr = self._tracker()
        obs = ad.build_adversary_observation(tr)
        assert obs[4] == 1.0  # d/g at start

    def test_stagnation_zeroes_slope(self):
        tr = self._tracker()
        for _ in range(10):
            tr.note_iteration(d_after=5.0, reduction=0.0)
        obs = ad.build_adversary_observation(tr)
        assert obs[5] == 0.0

    def test_all_fields_in_unit_interval(self):
        tr = self._tracker("hsja")
        r = rng(16)
        d = tr.g
        for step in range(50):
            n = r.uniform(0, 0.4)
            d = max(d - n, 0.1)
            tr.note_queries(r.integers(1, 30), r.integers(0, 10),
                            [r.random() < 0.3])
            tr.note_iteration(d, n, jumps=int(r.integers(1, 6)),
                              eval_count=int(r.integers(1, 50)))
            obs = ad.build_adversary_observation(tr)
            assert obs.shape == (8,)
            assert np.all(obs >= 0.0) and np.all(obs <= 1.0)


class TestRewards:
    def test_bags_r2_zero_when_no_reduction(self):
        spec = ad.RewardSpec("adversary", "bags", "R2")
        ctx = ad.RewardContext(n=0.0, x=3, g=10.0)
        assert ad.compute_reward(spec, ctx) == 0.0

    def test_defender_r5_is_h_minus_z(self):
        spec = ad.RewardSpec("defender", "bags", "R5")
        ctx = ad.RewardContext(h=0.8, z=0.3)
        assert abs(ad.compute_reward(spec, ctx) - 0.5) < 1e-12

    def test_bags_r3_zero_at_start(self):
        spec = ad.RewardSpec("adversary", "bags", "R3")
        ctx = ad.RewardContext(d=10.0, g=10.0, n=0.0)
        assert ad.compute_reward(spec, ctx) == 0.0

    def test_benign_branch(self):
        spec = ad.RewardSpec("defender", "hsja", "R2")
        good = ad.RewardContext(h=0.2, benign=True, correct=True)
        bad = ad.RewardContext(h=0.2, benign=True, correct=False)
        assert abs(ad.compute_reward(spec, good) - 0.8) < 1e-12
        assert ad.compute_reward(spec, bad) == -1.0

    def test_missing_field_rejected(self):
        spec = ad.RewardSpec("adversary", "hsja", "R3")
        with pytest.raises(InvalidSpecError):
            ad.compute_reward(spec, ad.RewardContext(n=1.0))

    def test_invalid_variant_rejected(self):
        with pytest.raises(InvalidSpecError):
            ad.RewardSpec("defender", "bags", "R8")

    def test_default_variants(self):
        assert ad.RewardSpec("adversary", "bags").variant == "R7"
        assert ad.RewardSpec("defender", "hsja").variant == "R2"


class TestEvasionReward:
    def test_example(self):
        assert ad.evasion_reward([0, 0, 1]) == 2.0

    def test_defender_mirror(self):
        assert ad.interception_reward([0, 0, 1]) == 1.0

    def test_zero_sum_identity(self):
        r = rng(17)
        for _ in range(20):
            alphas = r.integers(0, 2, size=r.integers(1, 50))
            total = ad.evasion_reward(alphas) + ad.interception_reward(alphas)
            assert total == len(alphas)
