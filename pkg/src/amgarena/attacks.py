"""Decision-based attack engines.

Two engines over the hard-label session interface:

* ``hsja``: repeated cycles of boundary bisection, Monte Carlo normal
  estimation from sign queries, and a geometric jump along the estimate.
* ``bags``: a guided random walk along the boundary, alternating a noise
  step orthogonal to the source direction (biased by a smooth field and a
  difference mask) with a step toward the original sample whose size reacts
  to the recent success rate.

Both engines spend their query budget exactly and only ever promote
candidates the oracle answered positively.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (BoundaryLostError, DegenerateDirectionError,
                     InvalidInputError)

MAX_ESTIMATION_QUERIES = 1000
LAMBDA_WINDOW = 30
MAX_JUMP_HALVINGS = 12


@dataclass
class HsjaKnobs:
    """Scale factors on the three schedule bases of the hop-skip engine."""

    delta_scale: float = 1.0
    num_eval_base: float = 100.0
    jump_scale: float = 1.0

    RANGES = {"delta_scale": (0.05, 10.0),
              "num_eval_base": (5.0, 400.0),
              "jump_scale": (0.05, 10.0)}

    def clamped(self):
        return HsjaKnobs(*(float(np.clip(getattr(self, k), *b))
                           for k, b in self.RANGES.items()))


@dataclass
class BagsKnobs:
    """Step sizes and direction biases of the boundary-walk engine."""

    orth_step: float = 0.3
    source_step_c: float = 0.1
    mask_bias: float = 0.5
    perlin_bias: float = 0.3

    RANGES = {"orth_step": (0.01, 1.5),
              "source_step_c": (0.001, 0.5),
              "mask_bias": (0.0, 1.0),
              "perlin_bias": (0.0, 1.0)}

    def clamped(self):
        return BagsKnobs(*(float(np.clip(getattr(self, k), *b))
                           for k, b in self.RANGES.items()))


@dataclass
class AttackState:
    """Per-episode attack bookkeeping shared by both engines."""

    x_g: np.ndarray
    x_c: np.ndarray
    x_t: np.ndarray
    x_b: np.ndarray
    d: float
    g: float
    t: int = 0
    # per-iteration scratch used by observation builders and rewards
    last_grad: np.ndarray | None = None
    last_delta: float = 0.0
    last_xi: float = 0.0
    last_eval_count: int = 0
    last_jumps: int = 0
    last_reduction: float = 0.0
    success_window: deque = field(
        default_factory=lambda: deque(maxlen=LAMBDA_WINDOW))

    @property
    def lambda_n(self):
        if not self.success_window:
            return 1.0
        return float(np.mean(self.success_window))


def init_attack_state(x_g, x_c):
    x_g = np.asarray(x_g, dtype=np.float64)
    x_c = np.asarray(x_c, dtype=np.float64)
    g = float(np.linalg.norm(np.ravel(x_g) - np.ravel(x_c)))
    return AttackState(x_g=x_g, x_c=x_c, x_t=x_g.copy(), x_b=x_g.copy(),
                       d=g, g=g)


def _sync_best(state, session):
    if session.best_x is not None and session.best_dist < state.d:
        state.d = float(session.best_dist)
        state.x_b = session.best_x


def binary_search_boundary(session, x_adv, x_non, tol=1e-3):
    """Bisect the segment [x_non, x_adv] down to a positive boundary point.

    ``tol`` is relative to the segment length, so the returned point is
    within ``tol * |x_adv - x_non|`` of the crossing. Costs at most
    ``ceil(log2(1/tol)) + 1`` queries.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_non = np.asarray(x_non, dtype=np.float64)
    if tol <= 0 or tol >= 1:
        raise InvalidInputError("tol must lie in (0, 1)")
    if session.psi(x_adv) < 0:
        raise BoundaryLostError("positive endpoint no longer adversarial")
    if float(np.linalg.norm(np.ravel(x_adv) - np.ravel(x_non))) <= tol:
        return x_adv
    lo, hi = 0.0, 1.0  # interpolation weight toward x_adv
    while hi - lo > tol and session.remaining > 0:
        mid = 0.5 * (lo + hi)
        point = x_non + mid * (x_adv - x_non)
        if session.psi(point) > 0:
            hi = mid
        else:
            lo = mid
    return x_non + hi * (x_adv - x_non)


def sample_sphere(rng, count, dim):
    """I.i.d. draws from the uniform distribution on the unit sphere."""
    u = rng.standard_normal((count, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u


def estimate_gradient(session, x_t, delta, num_eval, rng,
                      return_raw=False):
    """Monte Carlo boundary-normal estimate from sign queries.

    Averages ``phi_b * u_b`` over sphere directions ``u_b``, where
    ``phi_b`` is the +/-1 answer at ``x_t + delta * u_b``. When the answers
    disagree, the mean answer is subtracted first (baseline variance
    reduction); when they all agree the raw signed mean is kept, since the
    centered estimate would vanish identically.
    """
    if num_eval < 1:
        raise InvalidInputError("num_eval must be at least 1")
    if delta <= 0:
        raise InvalidInputError("delta must be positive")
    x_t = np.asarray(x_t, dtype=np.float64)
    shape = x_t.shape
    flat = np.ravel(x_t)
    u = sample_sphere(rng, num_eval, flat.size)
    points = np.clip(flat[None, :] + delta * u, 0.0, 1.0)
    u = (points - flat[None, :]) / delta  # account for box clipping
    phis = session.psi_batch(points.reshape((num_eval,) + shape)).astype(np.float64)
    raw = (phis[:, None] * u).mean(axis=0)
    if np.all(phis == phis[0]):
        est = raw
    else:
        est = ((phis - phis.mean())[:, None] * u).mean(axis=0)
    if return_raw:
        return est.reshape(shape), raw.reshape(shape)
    return est.reshape(shape)


def hsja_iterate(session, state, knobs, rng, controller=None,
                 bs_tol=None):
    """Run boundary-bisect / estimate / jump cycles until budget exhaustion.

    ``controller``, when given, is called once per iteration with the state
    and returns the knobs to use for that iteration (the adaptive hook).
    Returns the updated state; the best candidate only ever improves.
    """
    dim = state.x_c.size
    if bs_tol is None:
        bs_tol = max(1.0 / (dim * np.sqrt(dim)), 1e-5)
    x_tilde = state.x_t
    while session.remaining > 0:
        state.t += 1
        if controller is not None:
            knobs = controller(state).clamped()
        d_before = state.d
        # stage 1: pull the current candidate back to the boundary
        try:
            x_t = binary_search_boundary(session, x_tilde, state.x_c, bs_tol)
        except BoundaryLostError:
            # the defense flipped our anchor; fall back to the best known
            # candidate (or the starting sample) and try again
            x_tilde = session.best_x if session.best_x is not None else state.x_g
            _sync_best(state, session)
            if session.remaining <= 0:
                break
            continue
        _sync_best(state, session)
        if session.remaining <= 0:
            break
        dist = float(np.linalg.norm(np.ravel(x_t) - np.ravel(state.x_c)))
        # stage 2: estimate the boundary normal
        delta_t = knobs.delta_scale * dist / dim
        if delta_t <= 0:
            delta_t = 1e-6
        num_eval = int(min(knobs.num_eval_base * np.sqrt(state.t),
                           MAX_ESTIMATION_QUERIES, session.remaining))
        if num_eval < 1:
            break
        grad = estimate_gradient(session, x_t, delta_t, num_eval, rng)
        state.last_grad = grad
        state.last_delta = delta_t
        state.last_eval_count = num_eval
        norm = float(np.linalg.norm(np.ravel(grad)))
        if norm <= 0:
            direction = sample_sphere(rng, 1, dim)[0].reshape(x_t.shape)
        else:
            direction = grad / norm
        # stage 3: geometric jump, halving until back on the target side
        xi = knobs.jump_scale * dist / np.sqrt(state.t)
        state.last_xi = xi
        jumps = 0
        x_next = None
        while session.remaining > 0 and jumps < MAX_JUMP_HALVINGS:
            jumps += 1
            cand = np.clip(x_t + xi * direction, 0.0, 1.0)
            if session.psi(cand) > 0:
                x_next = cand
                break
            xi *= 0.5
        state.last_jumps = jumps
        _sync_best(state, session)
        x_tilde = x_next if x_next is not None else state.x_b
        state.x_t = x_tilde
        state.last_reduction = max(d_before - state.d, 0.0)
    _sync_best(state, session)
    state.x_t = state.x_b
    return state


def perlin_field(shape, grid_cells, rng):
    """Smooth value-noise field in [-1, 1], bilinear between lattice nodes."""
    if grid_cells < 1:
        raise InvalidInputError("grid_cells must be at least 1")
    shape = tuple(shape)
    if len(shape) == 1:
        nodes = rng.uniform(-1.0, 1.0, size=grid_cells + 1)
        pos = np.linspace(0.0, grid_cells, shape[0])
        i0 = np.minimum(pos.astype(int), grid_cells - 1)
        frac = pos - i0
        return nodes[i0] * (1 - frac) + nodes[i0 + 1] * frac
    h, w = shape[-2], shape[-1]
    nodes = rng.uniform(-1.0, 1.0, size=(grid_cells + 1, grid_cells + 1))
    ys = np.linspace(0.0, grid_cells, h)
    xs = np.linspace(0.0, grid_cells, w)
    yi = np.minimum(ys.astype(int), grid_cells - 1)
    xi = np.minimum(xs.astype(int), grid_cells - 1)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]
    n00 = nodes[np.ix_(yi, xi)]
    n01 = nodes[np.ix_(yi, xi + 1)]
    n10 = nodes[np.ix_(yi + 1, xi)]
    n11 = nodes[np.ix_(yi + 1, xi + 1)]
    plane = (n00 * (1 - fy) * (1 - fx) + n01 * (1 - fy) * fx
             + n10 * fy * (1 - fx) + n11 * fy * fx)
    return np.broadcast_to(plane, shape).copy()


def _difference_mask(x_g, x_c):
    mask = np.abs(x_g - x_c)
    peak = mask.max()
    return mask / peak if peak > 0 else np.ones_like(mask)


def bags_orthogonal_step(state, knobs, rng, grid_cells=4, max_retries=5):
    """Propose a masked noise step orthogonal to the source direction.

    The direction is a convex blend of white noise and a smooth field,
    attenuated toward the support of ``|x_g - x_c|`` by the mask bias, then
    projected orthogonal to ``x_c - x_t`` and scaled to ``orth_step * d``.
    """
    x_t, x_c = state.x_t, state.x_c
    v = np.ravel(x_c - x_t)
    v_norm = float(np.linalg.norm(v))
    mask = _difference_mask(state.x_g, x_c)
    blend_mask = (1.0 - knobs.mask_bias) + knobs.mask_bias * mask
    for _ in range(max_retries):
        white = rng.standard_normal(x_t.shape)
        if knobs.perlin_bias > 0:
            smooth = perlin_field(x_t.shape, grid_cells, rng)
            direction = ((1.0 - knobs.perlin_bias) * white
                         + knobs.perlin_bias * smooth)
        else:
            direction = white
        direction = direction * blend_mask
        flat = np.ravel(direction)
        if v_norm > 0:
            flat = flat - (flat @ v) / (v_norm * v_norm) * v
        norm = float(np.linalg.norm(flat))
        if norm > 1e-12:
            step = flat.reshape(x_t.shape) * (knobs.orth_step * state.d / norm)
            return np.clip(x_t + step, 0.0, 1.0)
    raise DegenerateDirectionError("orthogonal direction collapsed to zero")


def bags_source_step(x_s, x_c, lambda_n, c):
    """Step from ``x_s`` toward ``x_c`` sized by the recent success rate."""
    eps = (1.3 - min(lambda_n, 1.0)) * c
    return np.clip(x_s + eps * (x_c - x_s), 0.0, 1.0)


def bags_iterate(session, state, knobs, rng, controller=None, grid_cells=4):
    """Alternate orthogonal and source proposals until budget exhaustion.

    Each proposal is queried separately and adopted as the walk point only
    on a positive answer; every answer feeds the success-rate window that
    drives the source step size.
    """
    while session.remaining > 0:
        state.t += 1
        if controller is not None:
            knobs = controller(state).clamped()
        d_before = state.d
        try:
            cand = bags_orthogonal_step(state, knobs, rng, grid_cells)
        except DegenerateDirectionError:
            cand = None
        if cand is not None:
            p = session.psi(cand)
            state.success_window.append(1 if p > 0 else 0)
            if p > 0:
                state.x_t = cand
            _sync_best(state, session)
        if session.remaining <= 0:
            break
        cand2 = bags_source_step(state.x_t, state.x_c, state.lambda_n,
                                 knobs.source_step_c)
        p2 = session.psi(cand2)
        state.success_window.append(1 if p2 > 0 else 0)
        if p2 > 0:
            state.x_t = cand2
        _sync_best(state, session)
        state.last_reduction = max(d_before - state.d, 0.0)
    state.x_t = state.x_b
    return state


ENGINES = {}


def _register(name):
    def wrap(fn):
        ENGINES[name] = fn
        return fn
    return wrap


_register("hsja")(hsja_iterate)
_register("bags")(bags_iterate)


def default_knobs(kind):
    if kind == "hsja":
        return HsjaKnobs()
    if kind == "bags":
        return BagsKnobs()
    raise InvalidInputError(f"unknown attack kind {kind!r}")


def run_attack(kind, session, x_g, x_c, knobs=None, rng=None,
               controller=None):
    """Drive one full attack episode and return its trace.

    The session must have been built for the same original sample and
    target class; the starting sample must answer positively before the
    loop starts (verified by the caller via endpoint sampling).
    """
    if kind not in ENGINES:
        raise InvalidInputError(f"unknown attack kind {kind!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    state = init_attack_state(x_g, x_c)
    if knobs is None:
        knobs = default_knobs(kind)
    ENGINES[kind](session, state, knobs, rng, controller=controller)
    trace = session.finalize(state.g)
    return trace, state
