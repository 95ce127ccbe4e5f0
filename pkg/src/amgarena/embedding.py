"""Learned similarity space and defender observation builder.

Two small convolutional encoders:

* the similarity encoder maps single queries to 64-dim vectors so that a
  query and its augmented/noised copy land close while distinct images land
  far (contrastive loss, euclidean margin);
* the observation encoder maps the stack of differences between a query
  and the recent flagged queries to the 64-dim vector the defender policy
  reads (triplet loss over consecutive-attack / benign contrasts).

Both are frozen after training; everything downstream is deterministic
given weights and inputs.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .errors import InvalidInputError, TrainingDivergedError

EMBED_DIM = 64
QUEUE_CHANNELS = 25
OBS_POOL = 4  # spatial reduction applied to queue stacks before encoding
CONTRASTIVE_MARGIN = 1.0
TRIPLET_MARGIN = 0.2


def make_similarity_encoder(rng, in_shape=(1, 28, 28)):
    """Conv/conv/dense trunk emitting 64-dim embeddings."""
    c, h, w = in_shape
    flat = 16 * (h // 4) * (w // 4)
    layers = [
        nm.Conv2d(nm._uniform_init(rng, (8, c, 3, 3), c * 9),
                  nm._uniform_init(rng, (8,), c * 9), "relu", pool=2),
        nm.Conv2d(nm._uniform_init(rng, (16, 8, 3, 3), 72),
                  nm._uniform_init(rng, (16,), 72), "relu", pool=2),
        nm.Dense(nm._uniform_init(rng, (flat, EMBED_DIM), flat),
                 nm._uniform_init(rng, (EMBED_DIM,), flat), "none"),
    ]
    return nm.Network(layers, EMBED_DIM, in_shape)


def make_observation_encoder(rng, spatial=7):
    """Encoder over pooled (25, s, s) difference stacks."""
    fan = QUEUE_CHANNELS * 9
    flat = 16 * spatial * spatial
    layers = [
        nm.Conv2d(nm._uniform_init(rng, (16, QUEUE_CHANNELS, 3, 3), fan),
                  nm._uniform_init(rng, (16,), fan), "relu", pool=1),
        nm.Dense(nm._uniform_init(rng, (flat, EMBED_DIM), flat),
                 nm._uniform_init(rng, (EMBED_DIM,), flat), "none"),
    ]
    return nm.Network(layers, EMBED_DIM, (QUEUE_CHANNELS, spatial, spatial))


def embed(encoder, x):
    """Deterministic 64-dim embedding of a single input."""
    out = nm.forward(encoder, x)
    if not np.all(np.isfinite(out)):
        raise InvalidInputError("non-finite embedding")
    return out


def embed_batch(encoder, xs):
    return nm.forward(encoder, np.asarray(xs, dtype=np.float64))


def _pair_grad(e1, e2, similar, margin=CONTRASTIVE_MARGIN):
    """Contrastive loss and gradients for one embedded pair."""
    diff = e1 - e2
    dist = float(np.linalg.norm(diff))
    if similar:
        return dist * dist, 2 * diff, -2 * diff
    slack = margin - dist
    if slack <= 0 or dist == 0:
        return 0.0, np.zeros_like(e1), np.zeros_like(e2)
    g = -2 * slack * diff / dist
    return slack * slack, g, -g


def default_augmenter(x, rng):
    """Gaussian-noise positive pairs; keeps inputs inside the pixel box."""
    return np.clip(x + rng.normal(0.0, 0.05, size=x.shape), 0.0, 1.0)


def train_contrastive(data, augmenter=None, epochs=5, rng=None, lr=0.02,
                      batch_pairs=32, encoder=None, loss_log=None):
    """Fit the similarity encoder on positive/negative pairs from ``data``.

    Positives pair an image with its augmented or noised copy; negatives
    pair two distinct images. Returns the trained encoder.
    """
    if len(data) == 0:
        raise InvalidInputError("empty dataset")
    rng = rng or np.random.default_rng(0)
    augmenter = augmenter or default_augmenter
    sample_shape = data.inputs.shape[1:]
    if encoder is None:
        encoder = make_similarity_encoder(rng, sample_shape)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_pairs):
            idx = order[start:start + batch_pairs]
            lefts, rights, sims = [], [], []
            for i in idx:
                if rng.random() < 0.5:
                    lefts.append(data.inputs[i])
                    rights.append(augmenter(data.inputs[i], rng))
                    sims.append(True)
                else:
                    j = int(rng.integers(0, n - 1))
                    j = j + 1 if j >= i else j
                    lefts.append(data.inputs[i])
                    rights.append(data.inputs[j])
                    sims.append(False)
            loss = _pair_step(encoder, np.stack(lefts), np.stack(rights),
                              sims, lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"contrastive loss diverged at epoch {epoch}", epoch)
            losses.append(loss)
        if loss_log is not None:
            loss_log.append(float(np.mean(losses)))
    return encoder


def _pair_step(encoder, lefts, rights, sims, lr):
    b = len(sims)
    cache = []
    emb = nm.forward(encoder, np.concatenate([lefts, rights]), cache)
    e1, e2 = emb[:b], emb[b:]
    demb = np.zeros_like(emb)
    total = 0.0
    for i, similar in enumerate(sims):
        loss, g1, g2 = _pair_grad(e1[i], e2[i], similar)
        total += loss
        demb[i] = g1
        demb[b + i] = g2
    grads, _ = nm.backward(encoder, cache, demb / b)
    for layer, g in zip(encoder.layers, grads):
        layer.weight -= lr * g[0]
        layer.bias -= lr * g[1]
    return total / b


def pool_stack(x, factor=OBS_POOL):
    """Area-average downsampling of (C, H, W) or (H, W) inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def difference_stack(query, adv_queue, pooled=False):
    """(25, s, s) stack of (k_i - query), newest first, zero padded."""
    q = pool_stack(query) if not pooled else np.asarray(query)
    c, h, w = q.shape if q.ndim == 3 else (1,) + q.shape
    stack = np.zeros((QUEUE_CHANNELS, h, w), dtype=np.float64)
    for i, k in enumerate(adv_queue):
        if i >= QUEUE_CHANNELS:
            break
        ki = pool_stack(k) if not pooled else np.asarray(k)
        stack[i] = (ki - q).reshape(h, w)
    return stack


def defender_observation(obs_encoder, query, adv_queue):
    """64-dim observation for the defender policy.

    ``adv_queue`` holds the most recent flagged queries, newest first; with
    fewer than 25 entries the missing difference channels stay zero, and an
    empty queue therefore maps to the encoder's fixed baseline embedding.
    """
    stack = difference_stack(query, adv_queue)
    return embed(obs_encoder, stack)


def train_observation_encoder(attack_runs, benign_images, epochs=4,
                              rng=None, lr=0.02, batch_triplets=24,
                              encoder=None, loss_log=None):
    """Fit the observation encoder with triplet loss.

    ``attack_runs`` is a list of query sequences, each the chronological
    adversarial queries of one recorded attack episode. For a queue built
    from a run's recent queries, the observation of the next attack query
    is the positive and the observation of a random benign image is the
    negative.
    """
    rng = rng or np.random.default_rng(0)
    pooled_runs = [[pool_stack(q) for q in run] for run in attack_runs]
    pooled_benign = [pool_stack(b) for b in benign_images]
    spatial = pooled_benign[0].shape[-1]
    if encoder is None:
        encoder = make_observation_encoder(rng, spatial)
    triples = []
    for run in pooled_runs:
        for t in range(1, len(run) - 1):
            triples.append((run, t))
    if not triples:
        raise InvalidInputError("attack runs too short for triplets")
    for epoch in range(epochs):
        order = rng.permutation(len(triples))
        losses = []
        for start in range(0, len(order), batch_triplets):
            batch = [triples[i] for i in order[start:start + batch_triplets]]
            loss = _triplet_step(encoder, batch, pooled_benign, rng, lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"triplet loss diverged at epoch {epoch}", epoch)
            losses.append(loss)
        if loss_log is not None:
            loss_log.append(float(np.mean(losses)))
    return encoder


def _queue_before(run, t, size=QUEUE_CHANNELS):
    start = max(0, t - size)
    return list(reversed(run[start:t]))


def _triplet_step(encoder, batch, pooled_benign, rng, lr):
    stacks = []
    for run, t in batch:
        queue = _queue_before(run, t)
        stacks.append(difference_stack(run[t], queue, pooled=True))
        stacks.append(difference_stack(run[t + 1], queue, pooled=True))
        neg = pooled_benign[int(rng.integers(0, len(pooled_benign)))]
        stacks.append(difference_stack(neg, queue, pooled=True))
    cache = []
    emb = nm.forward(encoder, np.stack(stacks), cache)
    demb = np.zeros_like(emb)
    total = 0.0
    nb = len(batch)
    for i in range(nb):
        a, p, n = emb[3 * i], emb[3 * i + 1], emb[3 * i + 2]
        d_ap = a - p
        d_an = a - n
        loss = float(d_ap @ d_ap - d_an @ d_an) + TRIPLET_MARGIN
        if loss > 0:
            total += loss
            demb[3 * i] = 2 * (d_ap - d_an)
            demb[3 * i + 1] = -2 * d_ap
            demb[3 * i + 2] = 2 * d_an
    grads, _ = nm.backward(encoder, cache, demb / nb)
    for layer, g in zip(encoder.layers, grads):
        layer.weight -= lr * g[0]
        layer.bias -= lr * g[1]
    return total / nb
