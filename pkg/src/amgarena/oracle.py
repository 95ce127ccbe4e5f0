"""The queryable black box: frozen model, decision rule, query log.

Only hard labels leave this module. A defense handle, when present, is
consulted on every query; a flag of 1 swaps the answer for the runner-up
class. ``QuerySession`` wraps an oracle for one attack episode and owns the
query budget, the per-query trace and the best-candidate bookkeeping, so
attack engines cannot violate the accounting or the best-so-far invariants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import InvalidInputError


def decide(probs):
    """Index of the highest-probability class; ties go to the lowest index."""
    return int(np.argmax(probs))


def second_choice(probs):
    """Index of the runner-up class; ties go to the lowest remaining index."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size < 2:
        raise InvalidInputError("second_choice needs at least two classes")
    masked = probs.copy()
    masked[int(np.argmax(probs))] = -np.inf
    return int(np.argmax(masked))


def psi(decision, target):
    """+1 when the decision hits the target class, -1 otherwise."""
    return 1 if decision == target else -1


def query_hash(x):
    """64-bit content hash of the 8-bit quantized pixels, for dedup stats."""
    q = np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
    return int.from_bytes(
        hashlib.blake2b(q.tobytes(), digest_size=8).digest(), "big")


@dataclass
class QueryRecord:
    hash: int
    step: int
    source: str  # "adversarial" | "benign"
    decision: int
    alpha: int


@dataclass
class QueryLog:
    entries: list = field(default_factory=list)
    counter: int = 0

    def append(self, x, source, decision, alpha):
        self.entries.append(
            QueryRecord(query_hash(x), self.counter, source, decision, alpha))
        self.counter += 1


class Oracle:
    """Frozen network behind a hard-label interface with optional defense."""

    def __init__(self, net, defense=None, log_hashes=False):
        self.net = net
        self.defense = defense
        self.log = QueryLog()
        self.log_hashes = log_hashes
        self.counter = 0

    def _respond(self, probs, alpha):
        return second_choice(probs) if alpha == 1 else decide(probs)

    def submit_query(self, x, source="adversarial"):
        """Answer one query: decision after any active-defense override."""
        probs = nm.softmax(nm.forward(self.net, x))
        alpha = self.defense.process(x) if self.defense is not None else 0
        decision = self._respond(probs, alpha)
        self._log(x, source, decision, alpha)
        return decision

    def submit_with_truth(self, x, source="adversarial"):
        """Decision plus ground-truth argmax (arena-side bookkeeping only)."""
        probs = nm.softmax(nm.forward(self.net, x))
        alpha = self.defense.process(x) if self.defense is not None else 0
        decision = self._respond(probs, alpha)
        self._log(x, source, decision, alpha)
        return decision, decide(probs), alpha

    def submit_batch_with_truth(self, xs, source="adversarial"):
        """Vectorized submission of independent queries, answered in order.

        Equivalent to sequential :meth:`submit_with_truth` calls; the model
        forward pass and any defense embedding are batched for speed while
        the defense state still updates one query at a time.
        """
        logits = nm.forward(self.net, xs)
        probs = nm.softmax(logits)
        if self.defense is not None:
            alphas = self.defense.process_batch(xs)
        else:
            alphas = np.zeros(len(xs), dtype=np.int64)
        decisions = np.empty(len(xs), dtype=np.int64)
        truths = probs.argmax(axis=-1)
        for i in range(len(xs)):
            decisions[i] = self._respond(probs[i], alphas[i])
            self._log(xs[i], source, int(decisions[i]), int(alphas[i]))
        return decisions, truths, alphas

    def _log(self, x, source, decision, alpha):
        if self.log_hashes:
            self.log.append(x, source, decision, alpha)
        else:
            self.log.entries.append(
                QueryRecord(0, self.log.counter, source, decision, alpha))
            self.log.counter += 1
        self.counter += 1


@dataclass
class TraceRow:
    source: str
    alpha: int
    decision: int
    psi: int
    best_dist: float
    sigma: float
    correct: int = -1  # benign rows: 1/0 after defense; -1 for attack rows
    raw_correct: int = -1  # benign rows: 1/0 under the bare model


@dataclass
class EpisodeTrace:
    """Chronological per-query record of one adversarial episode."""

    rows: list = field(default_factory=list)
    gap: float = 0.0
    final_dist: float = float("inf")
    success: bool = False
    budget: int = 0
    knob_log: list = field(default_factory=list)

    def adv_rows(self):
        return [r for r in self.rows if r.source == "adversarial"]

    def benign_rows(self):
        return [r for r in self.rows if r.source == "benign"]

    def best_curve(self):
        return np.array([r.best_dist for r in self.adv_rows()])

    def alphas(self):
        return np.array([r.alpha for r in self.adv_rows()])

    def dist_at(self, budget_cut):
        curve = self.best_curve()
        if len(curve) == 0:
            return self.gap
        value = curve[min(budget_cut, len(curve)) - 1]
        return float(value) if np.isfinite(value) else self.gap


class QuerySession:
    """Budgeted oracle view for one attack episode.

    Tracks two best-so-far candidates: the attacker's belief (driven by the
    possibly-misdirected responses, exposed to the attack engine) and the
    ground truth (driven by the bare model, recorded in the trace and used
    by all metrics). Optional hooks apply evasive transforms to outgoing
    queries and interleave chance-scheduled benign traffic.
    """

    def __init__(self, oracle, x_c, target, budget, transform=None,
                 interleave=None, sigma_source=None, x_g=None):
        self.oracle = oracle
        self.x_c = np.asarray(x_c, dtype=np.float64)
        self.target = int(target)
        self.budget = int(budget)
        self.used = 0
        self.transform = transform
        self.interleave = interleave
        self.sigma_source = sigma_source
        self.trace = EpisodeTrace(budget=budget)
        self.best_dist = float("inf")
        self.best_x = None
        self.true_best_dist = float("inf")
        self.true_best_x = None
        if x_g is not None:
            # the starting sample is adversarial by precondition and is
            # held by the attacker without spending a query
            gap = float(np.linalg.norm(np.ravel(x_g) - np.ravel(self.x_c)))
            self.best_dist = gap
            self.best_x = np.array(x_g, copy=True)
            self.true_best_dist = gap
            self.true_best_x = np.array(x_g, copy=True)

    @property
    def remaining(self):
        return self.budget - self.used

    def _sigma(self):
        if self.sigma_source is None:
            return float("nan")
        return self.sigma_source()

    def _account(self, x, decision, truth, alpha):
        dist = float(np.linalg.norm(np.ravel(x) - np.ravel(self.x_c)))
        p = psi(decision, self.target)
        if p > 0 and dist < self.best_dist:
            self.best_dist = dist
            self.best_x = np.array(x, copy=True)
        if truth == self.target and dist < self.true_best_dist:
            self.true_best_dist = dist
            self.true_best_x = np.array(x, copy=True)
        self.trace.rows.append(TraceRow(
            "adversarial", int(alpha), int(decision), p,
            self.true_best_dist, self._sigma()))
        return p

    def psi(self, x):
        """Submit one attack query; returns the +/-1 success indicator."""
        if self.remaining <= 0:
            raise InvalidInputError("query budget exhausted")
        sent = self.transform(x) if self.transform is not None else x
        decision, truth, alpha = self.oracle.submit_with_truth(
            sent, "adversarial")
        self.used += 1
        p = self._account(x, decision, truth, alpha)
        if self.interleave is not None:
            self.interleave(self)
        return p

    def psi_batch(self, xs):
        """Submit a batch of attack queries; returns +/-1 per query."""
        n = len(xs)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if n > self.remaining:
            raise InvalidInputError("query budget exhausted")
        sent = xs
        if self.transform is not None:
            sent = np.stack([self.transform(x) for x in xs])
        decisions, truths, alphas = self.oracle.submit_batch_with_truth(
            sent, "adversarial")
        self.used += n
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = self._account(xs[i], int(decisions[i]), int(truths[i]),
                                   int(alphas[i]))
        if self.interleave is not None:
            self.interleave(self)
        return out

    def finalize(self, gap):
        t = self.trace
        t.gap = float(gap)
        t.final_dist = self.true_best_dist if np.isfinite(self.true_best_dist) else float(gap)
        return t
