import numpy as np
import pytest

from amgarena import embedding as emb
from amgarena.datasets import load_digits28


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def digits():
    data = load_digits28()
    return data.subset(np.arange(500))


@pytest.fixture(scope="module")
def trained_encoder(digits):
    return emb.train_contrastive(digits, epochs=3, rng=rng(1), lr=0.02)


class TestEmbed:
    def test_output_dim(self, trained_encoder, digits):
        e = emb.embed(trained_encoder, digits.inputs[0])
        assert e.shape == (64,)

    def test_identical_inputs_distance_zero(self, trained_encoder, digits):
        a = emb.embed(trained_encoder, digits.inputs[3])
        b = emb.embed(trained_encoder, digits.inputs[3].copy())
        assert np.linalg.norm(a - b) == 0.0

    def test_deterministic_repeated_calls(self, trained_encoder, digits):
        x = digits.inputs[7]
        np.testing.assert_array_equal(emb.embed(trained_encoder, x),
                                      emb.embed(trained_encoder, x))

    def test_batch_matches_single(self, trained_encoder, digits):
        xs = digits.inputs[:4]
        batch = emb.embed_batch(trained_encoder, xs)
        for i in range(4):
            np.testing.assert_allclose(batch[i],
                                       emb.embed(trained_encoder, xs[i]))


class TestContrastiveQuality:
    def test_positive_pairs_closer_than_negative(self, trained_encoder):
        held = load_digits28().subset(np.arange(500, 700))
        r = rng(2)
        pos, neg = [], []
        for i in range(100):
            x = held.inputs[i]
            noisy = np.clip(x + r.normal(0, 0.05, x.shape), 0, 1)
            other = held.inputs[(i + 37) % len(held)]
            ex = emb.embed(trained_encoder, x)
            pos.append(np.linalg.norm(ex - emb.embed(trained_encoder, noisy)))
            neg.append(np.linalg.norm(ex - emb.embed(trained_encoder, other)))
        assert np.median(pos) < np.median(neg)

    def test_noisy_copy_closer_than_random_image(self, trained_encoder):
        held = load_digits28().subset(np.arange(700, 1000))
        r = rng(3)
        wins = 0
        trials = 200
        for t in range(trials):
            i = int(r.integers(0, len(held)))
            j = int(r.integers(0, len(held) - 1))
            j = j + 1 if j >= i else j
            x = held.inputs[i]
            noisy = np.clip(x + r.normal(0, 0.05, x.shape), 0, 1)
            ex = emb.embed(trained_encoder, x)
            d_noisy = np.linalg.norm(ex - emb.embed(trained_encoder, noisy))
            d_other = np.linalg.norm(ex - emb.embed(trained_encoder, held.inputs[j]))
            wins += int(d_noisy < d_other)
        assert wins >= 0.9 * trials


def _synthetic_attack_run(digits, seed, length=40):
    """Interpolation walk between two images plus small jitter, the shape
    of queries a boundary-following attack emits."""
    r = rng(seed)
    i, j = r.choice(len(digits), size=2, replace=False)
    a, b = digits.inputs[i], digits.inputs[j]
    run = []
    t = 0.9
    for _ in range(length):
        t = max(0.05, t - r.uniform(0.0, 0.04))
        q = b + t * (a - b) + r.normal(0, 0.01, a.shape)
        run.append(np.clip(q, 0, 1))
    return run


class TestDefenderObservation:
    def test_empty_queue_baseline(self, digits):
        enc = emb.make_observation_encoder(rng(4))
        q = digits.inputs[0]
        obs1 = emb.defender_observation(enc, q, [])
        obs2 = emb.defender_observation(enc, digits.inputs[1], [])
        assert obs1.shape == (64,)
        # all-zero difference stack regardless of the query
        np.testing.assert_array_equal(obs1, obs2)

    def test_query_equal_to_newest_gives_zero_channel(self, digits):
        q = digits.inputs[0]
        stack = emb.difference_stack(q, [q, digits.inputs[1]])
        np.testing.assert_array_equal(stack[0], 0.0)
        assert np.abs(stack[1]).max() > 0

    def test_output_dim(self, digits):
        enc = emb.make_observation_encoder(rng(5))
        obs = emb.defender_observation(enc, digits.inputs[0],
                                       [digits.inputs[1]])
        assert obs.shape == (64,)

    def test_queue_is_zero_padded(self, digits):
        stack = emb.difference_stack(digits.inputs[0], [digits.inputs[1]])
        np.testing.assert_array_equal(stack[1:], 0.0)


class TestTripletTraining:
    def test_triplet_property_on_held_out_runs(self, digits):
        train_runs = [_synthetic_attack_run(digits, s) for s in range(8)]
        benign = [digits.inputs[i] for i in range(60, 120)]
        enc = emb.train_observation_encoder(train_runs, benign, epochs=3,
                                            rng=rng(6), lr=0.02)
        held_runs = [_synthetic_attack_run(digits, 100 + s) for s in range(4)]
        r = rng(7)
        good = 0
        total = 0
        for run in held_runs:
            pooled = [emb.pool_stack(q) for q in run]
            for t in range(5, len(run) - 1):
                queue = list(reversed(pooled[t - 5:t]))
                anchor = emb.embed(enc, emb.difference_stack(
                    pooled[t], queue, pooled=True))
                pos = emb.embed(enc, emb.difference_stack(
                    pooled[t + 1], queue, pooled=True))
                neg_img = emb.pool_stack(
                    digits.inputs[int(r.integers(120, 200))])
                neg = emb.embed(enc, emb.difference_stack(
                    neg_img, queue, pooled=True))
                good += int(np.linalg.norm(anchor - pos)
                            < np.linalg.norm(anchor - neg))
                total += 1
        assert good / total >= 0.70
