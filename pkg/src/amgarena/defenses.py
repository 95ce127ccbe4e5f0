"""Active stateful defenses.

The hypersphere defense embeds every query and flags it when it falls
within radius sigma of the last flagged query in the learned similarity
space; flagged queries are answered with the runner-up class instead of
being rejected. Sigma is fixed for the vanilla variant and emitted
per-query by a policy for the adaptive variant. A quantize-and-hash
fingerprint store provides the comparison baseline.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import embedding as emb
from .errors import InvalidInputError
from .oracle import decide, second_choice

BLACKLIGHT_QUANT = 0.05
BLACKLIGHT_WINDOW = 20
BLACKLIGHT_TOP_K = 50
BLACKLIGHT_MATCH = 25
_HASH_MULT = np.uint64(1099511628211)


def respond(probs, alpha):
    """Truthful argmax for alpha 0, runner-up misdirection for alpha 1."""
    return second_choice(probs) if alpha == 1 else decide(probs)


@dataclass
class DefenseCalibration:
    """Benign-embedding statistics shared by all defense instances.

    Distances are normalized by the 95th percentile of benign pairwise
    distances so a radius in [0, 1] is meaningful; the seed threshold is
    the 99th percentile of the chosen novelty score over the same set.
    """

    norm_scale: float
    centroid: np.ndarray
    seed_threshold: float
    nn_seed_threshold: float
    embeddings: np.ndarray

    @classmethod
    def build(cls, encoder, benign_inputs, batch=256):
        embs = []
        for start in range(0, len(benign_inputs), batch):
            embs.append(emb.embed_batch(encoder,
                                        benign_inputs[start:start + batch]))
        embs = np.concatenate(embs)
        diff = embs[:, None, :] - embs[None, :, :]
        pair = np.sqrt((diff ** 2).sum(-1))
        iu = np.triu_indices(len(embs), k=1)
        norm_scale = float(np.percentile(pair[iu], 95))
        if norm_scale <= 0:
            raise InvalidInputError("degenerate benign calibration set")
        centroid = embs.mean(axis=0)
        center_d = np.linalg.norm(embs - centroid, axis=1)
        seed_threshold = float(np.percentile(center_d, 99))
        nn = pair + np.diag(np.full(len(embs), np.inf))
        nn_seed_threshold = float(np.percentile(nn.min(axis=1), 99))
        return cls(norm_scale, centroid, seed_threshold, nn_seed_threshold,
                   embs)


class StatefulDefense:
    """Hypersphere-confinement misdirection over a learned similarity space.

    ``policy`` switches the radius from the fixed vanilla value to a
    per-query action computed from the defender observation. Per-episode
    logs (sigma, normalized distance, observations, raw policy draws) feed
    the reward bookkeeping and the policy trainer.
    """

    def __init__(self, encoder, calibration, sigma=0.3, policy=None,
                 obs_encoder=None, stochastic=False, queue_len=25,
                 benign_len=100, seed_rule="centroid", rng=None):
        if seed_rule not in ("centroid", "nearest"):
            raise InvalidInputError(f"unknown seed rule {seed_rule!r}")
        if policy is not None and obs_encoder is None:
            raise InvalidInputError("adaptive defense needs an obs encoder")
        self.encoder = encoder
        self.calibration = calibration
        self.sigma = float(sigma)
        self.policy = policy
        self.obs_encoder = obs_encoder
        self.stochastic = stochastic
        self.queue_len = queue_len
        self.benign_len = benign_len
        self.seed_rule = seed_rule
        self.rng = rng or np.random.default_rng(0)
        self.begin_episode()

    def begin_episode(self):
        self.adv_queue = deque(maxlen=self.queue_len)  # (raw, pooled, emb)
        self.benign_queue = deque(maxlen=self.benign_len)
        self.sigma_log = []
        self.z_log = []
        self.obs_log = []
        self.draw_log = []
        self.alpha_log = []

    @property
    def k0(self):
        return self.adv_queue[0][0] if self.adv_queue else None

    def last_sigma(self):
        return self.sigma_log[-1] if self.sigma_log else float("nan")

    def _seed_score(self, e):
        cal = self.calibration
        if self.seed_rule == "centroid":
            return float(np.linalg.norm(e - cal.centroid)), cal.seed_threshold
        d = np.linalg.norm(cal.embeddings - e, axis=1)
        return float(d.min()), cal.nn_seed_threshold

    def _sigma_for(self, pooled_query):
        if self.policy is None:
            self.obs_log.append(None)
            self.draw_log.append(None)
            return self.sigma
        queue = [entry[1] for entry in self.adv_queue]
        stack = emb.difference_stack(pooled_query, queue, pooled=True)
        obs = emb.embed(self.obs_encoder, stack)
        if self.stochastic:
            action, raw, _ = self.policy.sample(obs, self.rng)
        else:
            action = self.policy.mean_action(obs)
            raw = None
        self.obs_log.append(obs)
        self.draw_log.append(raw)
        return float(action[0])

    def _process_embedded(self, x, e):
        pooled = emb.pool_stack(x)
        sigma = self._sigma_for(pooled)
        self.sigma_log.append(sigma)
        if not self.adv_queue:
            score, threshold = self._seed_score(e)
            self.z_log.append(1.0)
            if score > threshold:
                self.adv_queue.appendleft((np.array(x, copy=True), pooled, e))
            else:
                self.benign_queue.append(e)
            self.alpha_log.append(0)
            return 0
        z = float(np.linalg.norm(e - self.adv_queue[0][2]))
        z = min(z / self.calibration.norm_scale, 1.0)
        self.z_log.append(z)
        if z < sigma:
            self.adv_queue.appendleft((np.array(x, copy=True), pooled, e))
            self.alpha_log.append(1)
            return 1
        self.benign_queue.append(e)
        self.alpha_log.append(0)
        return 0

    def process(self, x):
        return self._process_embedded(x, emb.embed(self.encoder, x))

    def process_batch(self, xs):
        es = emb.embed_batch(self.encoder, xs)
        return np.array([self._process_embedded(xs[i], es[i])
                         for i in range(len(xs))], dtype=np.int64)


def blacklight_fingerprint(x, quant_step=BLACKLIGHT_QUANT,
                           window=BLACKLIGHT_WINDOW, top_k=BLACKLIGHT_TOP_K):
    """Quantize, hash every sliding pixel window, keep the smallest hashes.

    Returns a sorted array of ``top_k`` 64-bit hash values.
    """
    flat = np.ravel(np.asarray(x, dtype=np.float64))
    if window > flat.size:
        raise InvalidInputError("window longer than the flattened input")
    if quant_step <= 0:
        raise InvalidInputError("quant_step must be positive")
    q = np.round(flat / quant_step).astype(np.uint64)
    n = flat.size - window + 1
    h = np.zeros(n, dtype=np.uint64)
    for j in range(window):
        h = h * _HASH_MULT + q[j:j + n] + np.uint64(0x9E3779B9)
    k = min(top_k, n)
    fp = np.partition(h, k - 1)[:k]
    return np.sort(fp)


@dataclass
class FingerprintStore:
    """Rolling store of per-query fingerprints with an any-match rule."""

    quant_step: float = BLACKLIGHT_QUANT
    window: int = BLACKLIGHT_WINDOW
    top_k: int = BLACKLIGHT_TOP_K
    match_threshold: int = BLACKLIGHT_MATCH
    max_history: int = 2000
    history: deque = field(default_factory=deque)
    alpha_log: list = field(default_factory=list)

    def begin_episode(self):
        self.history = deque()
        self.alpha_log = []

    def last_sigma(self):
        return float("nan")

    def detect(self, x):
        """Flag when any stored fingerprint shares enough hashes; always
        appends the new fingerprint to the history."""
        fp = blacklight_fingerprint(x, self.quant_step, self.window,
                                    self.top_k)
        alpha = 0
        if self.history:
            stored = np.stack(self.history)
            matches = np.isin(stored, fp).sum(axis=1)
            if int(matches.max()) >= self.match_threshold:
                alpha = 1
        self.history.append(fp)
        if len(self.history) > self.max_history:
            self.history.popleft()
        self.alpha_log.append(alpha)
        return alpha

    def process(self, x):
        return self.detect(x)

    def process_batch(self, xs):
        return np.array([self.detect(x) for x in xs], dtype=np.int64)
