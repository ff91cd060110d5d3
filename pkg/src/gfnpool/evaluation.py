"""Exact and sampled evaluation of terminal-state distributions.

Includes the L1/KL/Jeffrey metrics, top-K reward summaries, the normalized
(product-of-)reward targets, the effective target an aggregated sampler
actually draws from when its inputs are imperfect, the Jeffrey-divergence
bound checker for that gap, and the exact KL-gradient identity check for
the contrastive criterion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .envs.base import Environment, StateKey
from .envs.space import CHILD_ILLEGAL, CHILD_STOP, StateSpace
from .errors import EnumerationGuardError, NumericError, RewardSupportError
from .losses import cb_loss_batch
from .policy import (
    ForwardPolicy,
    TrajectoryBatch,
    apply_log_pf_grad,
    masked_log_softmax,
    replay_log_pb,
    replay_log_pf,
    sample_batch,
)

DEFAULT_TRAJ_GUARD = 1_000_000


@dataclass
class DistributionTable:
    """Terminal-state probabilities with a provenance tag."""

    probs: dict[StateKey, float]
    provenance: str

    def total(self) -> float:
        return float(sum(self.probs.values()))


def l1(p: DistributionTable, q: DistributionTable) -> float:
    keys = set(p.probs) | set(q.probs)
    return float(sum(abs(p.probs.get(k, 0.0) - q.probs.get(k, 0.0)) for k in keys))


def kl(p: DistributionTable, q: DistributionTable) -> float:
    out = 0.0
    for k, pv in p.probs.items():
        if pv <= 0.0:
            continue
        qv = q.probs.get(k, 0.0)
        if qv <= 0.0:
            warnings.warn(f"KL support violation at {k!r}; returning inf", stacklevel=2)
            return float("inf")
        out += pv * np.log(pv / qv)
    return float(out)


def jeffrey(p: DistributionTable, q: DistributionTable) -> float:
    return kl(p, q) + kl(q, p)


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(a - m).sum()))


# ---------------------------------------------------------------------------
# terminal distributions


def exact_pT(policy: ForwardPolicy, space: StateSpace) -> DistributionTable:
    """Exact terminal marginal of the policy, by pushing unit mass through the
    DAG level by level (equals the sum over all trajectories)."""
    space.require_complete()
    mass = np.zeros(space.n_states)
    mass[space.root] = 1.0
    p_term = np.zeros(space.n_states)
    for lv in space.levels():
        rows = space.children_rows(lv)
        legal = rows != CHILD_ILLEGAL
        _, p = masked_log_softmax(policy.logits_rows(space, lv), legal)
        contrib = mass[lv][:, None] * p
        p_term[lv] += np.where(rows == CHILD_STOP, contrib, 0.0).sum(axis=1)
        interior = rows >= 0
        np.add.at(mass, rows[interior], contrib[interior])
    term = space.terminal_indices()
    return DistributionTable(
        {space.keys[i]: float(p_term[i]) for i in term}, provenance="exact-dp"
    )


def sampled_pT(
    policy: ForwardPolicy,
    space: StateSpace,
    n: int,
    rng: np.random.Generator,
    chunk: int = 8192,
) -> DistributionTable:
    """Empirical terminal frequencies over n on-policy draws."""
    counts: dict[int, int] = {}
    left = n
    while left > 0:
        b = min(chunk, left)
        tb = sample_batch(policy, space, b, epsilon=0.0, rng=rng, compute_rewards=False)
        for i in tb.terminal_idx():
            counts[int(i)] = counts.get(int(i), 0) + 1
        left -= b
    return DistributionTable(
        {space.keys[i]: c / n for i, c in counts.items()}, provenance=f"sampled({n})"
    )


def product_log_rewards(
    envs: list[Environment], space: StateSpace, weights=None
) -> np.ndarray:
    """Unnormalized sum_n w_n log R_n(x) per state index (nan off-support)."""
    space.require_complete()
    w = np.ones(len(envs)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(envs),) or np.any(w <= 0):
        raise ValueError("need one positive weight per reward")
    term = space.terminal_indices()
    out = np.full(space.n_states, np.nan)
    out[term] = 0.0
    for wn, env in zip(w, envs):
        out[term] += wn * np.array([env.log_reward(space.keys[i]) for i in term])
    return out


def reward_table(envs: list[Environment], space: StateSpace, weights=None) -> DistributionTable:
    """Normalized (weighted) product of rewards over enumerated terminals -
    the ground-truth target for every L1 figure."""
    log_r = product_log_rewards(envs, space, weights)
    term = space.terminal_indices()
    vals = log_r[term]
    z = _logsumexp(vals)
    if z == -np.inf:
        raise RewardSupportError("product reward vanishes on every terminal state")
    if not np.isfinite(z):
        raise NumericError("product reward overflows; rewards are not normalizable")
    probs = np.exp(vals - z)
    return DistributionTable(
        {space.keys[i]: float(p) for i, p in zip(term, probs)}, provenance="reward-normalized"
    )


def topk_avg_log_reward(source, space: StateSpace, log_r: np.ndarray, k: int, sample_budget: int = 1_000_000) -> float:
    """Mean log-reward of the K best-scoring samples, multiplicity counted.

    `source` is either an array of sampled terminal state indices or a
    DistributionTable; for a table the statistic is the infinite-sample
    limit of the same quantity at `sample_budget` draws (slots filled by
    expected counts in decreasing reward order).
    """
    if isinstance(source, DistributionTable):
        idx = np.array([space.index[key] for key in source.probs])
        expect = np.array(list(source.probs.values())) * sample_budget
        order = np.argsort(log_r[idx])[::-1]
        take = np.minimum(expect[order], np.maximum(0.0, k - np.concatenate([[0.0], np.cumsum(expect[order])[:-1]])))
        return float(np.sum(take * log_r[idx][order]) / k)
    samples = np.asarray(source)
    if samples.size < k:
        raise ValueError(f"need at least {k} samples, got {samples.size}")
    vals = log_r[samples]
    return float(np.mean(np.sort(vals)[-k:]))


# ---------------------------------------------------------------------------
# trajectory enumeration


def count_trajectories(space: StateSpace) -> int:
    """Number of complete trajectories, by path-count dynamic programming."""
    space.require_complete()
    paths = np.zeros(space.n_states, dtype=np.float64)
    paths[space.root] = 1.0
    for lv in space.levels():
        rows = space.children_rows(lv)
        interior = rows >= 0
        np.add.at(
            paths,
            rows[interior],
            np.broadcast_to(paths[lv][:, None], rows.shape)[interior],
        )
    return int(round(paths[space.terminal_indices()].sum()))


def enumerate_trajectory_batches(
    space: StateSpace, chunk: int = 4096, guard: int = DEFAULT_TRAJ_GUARD
):
    """Yield every complete trajectory, packed into TrajectoryBatch chunks.

    Depth-first over the enumerated DAG; raises if the trajectory count
    exceeds the guard (callers fall back to sampled evaluation).
    """
    space.require_complete()
    total = count_trajectories(space)
    if total > guard:
        raise EnumerationGuardError(f"{total} trajectories exceed the guard of {guard}")
    horizon = space.env.max_traj_len
    buf_states, buf_actions = [], []

    def flush():
        b = len(buf_actions)
        states = np.full((b, horizon), -1, dtype=np.int64)
        actions = np.full((b, horizon), -1, dtype=np.int64)
        lengths = np.zeros(b, dtype=np.int64)
        for r, (ss, aa) in enumerate(zip(buf_states, buf_actions)):
            lengths[r] = len(aa)
            states[r, : len(ss)] = ss
            actions[r, : len(aa)] = aa
        tb = TrajectoryBatch(
            states, actions, lengths, np.zeros((b, horizon)), np.zeros((b, horizon)), None
        )
        buf_states.clear()
        buf_actions.clear()
        return tb

    def rec(i: int, states: list, actions: list):
        rows = space.children_rows(np.array([i]))[0]
        for a in range(space.arity):
            code = rows[a]
            if code == CHILD_ILLEGAL:
                continue
            if code == CHILD_STOP:
                buf_states.append(states[:])
                buf_actions.append(actions + [a])
            else:
                yield from rec(int(code), states + [int(code)], actions + [a])
            if len(buf_actions) >= chunk:
                yield flush()

    yield from rec(space.root, [space.root], [])
    if buf_actions:
        yield flush()


def effective_target(
    local_policies: list[ForwardPolicy],
    space: StateSpace,
    guard: int = DEFAULT_TRAJ_GUARD,
) -> DistributionTable:
    """Distribution the aggregation-balanced global model actually samples:
    pi_hat(x) proportional to the backward-policy expectation of the product
    of local trajectory ratios, by exact trajectory enumeration."""
    n_local = len(local_policies)
    terms: dict[int, list[float]] = {}
    for tb in enumerate_trajectory_batches(space, guard=guard):
        pb = replay_log_pb(space, tb)
        s = np.zeros(tb.batch_size)
        for pol in local_policies:
            s += replay_log_pf(pol, space, tb)
        logw = s + (1.0 - n_local) * pb
        for i, lw in zip(tb.terminal_idx(), logw):
            terms.setdefault(int(i), []).append(float(lw))
    log_mass = {i: _logsumexp(np.array(v)) for i, v in terms.items()}
    z = _logsumexp(np.array(list(log_mass.values())))
    return DistributionTable(
        {space.keys[i]: float(np.exp(v - z)) for i, v in log_mass.items()},
        provenance="effective-target",
    )


# ---------------------------------------------------------------------------
# theorem checkers


@dataclass
class BoundCheckResult:
    alphas: np.ndarray
    betas: np.ndarray
    jeffrey: float
    bound: float
    holds: bool
    degenerate: bool


def robustness_bound_check(
    local_policies: list[ForwardPolicy],
    client_envs: list[Environment],
    space: StateSpace,
    guard: int = DEFAULT_TRAJ_GUARD,
) -> BoundCheckResult:
    """Check the Jeffrey-divergence bound between the product target and the
    effective aggregated target against per-client trajectory-ratio extrema."""
    if len(local_policies) != len(client_envs):
        raise ValueError("need one environment per local policy")
    n = len(local_policies)
    log_pi = []
    term = space.terminal_indices()
    for env in client_envs:
        arr = np.full(space.n_states, np.nan)
        vals = np.array([env.log_reward(space.keys[i]) for i in term])
        arr[term] = vals - _logsumexp(vals)
        log_pi.append(arr)
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for tb in enumerate_trajectory_batches(space, guard=guard):
        pb = replay_log_pb(space, tb)
        tix = tb.terminal_idx()
        for i, pol in enumerate(local_policies):
            ratio = replay_log_pf(pol, space, tb) - pb - log_pi[i][tix]
            lo[i] = min(lo[i], ratio.min())
            hi[i] = max(hi[i], ratio.max())
    alphas = 1.0 - np.exp(lo)
    betas = np.exp(hi) - 1.0
    degenerate = bool(np.any(~np.isfinite(lo)) or np.any(np.exp(lo) <= 0.0))
    bound = float("inf") if degenerate else float(np.sum(hi - lo))
    pi = reward_table(client_envs, space)
    pi_hat = effective_target(local_policies, space, guard=guard)
    dj = jeffrey(pi, pi_hat)
    return BoundCheckResult(alphas, betas, dj, bound, holds=dj <= bound + 1e-9, degenerate=degenerate)


def cb_kl_gradient_identity_check(
    policy: ForwardPolicy, space: StateSpace, max_trajectories: int = 300
) -> float:
    """Max elementwise gap between the exact gradient of KL(p_F || reward-
    tilted backward) and one quarter of the exact pair-expected contrastive
    gradient. Both sides are computed by full enumeration."""
    total = count_trajectories(space)
    if total > max_trajectories:
        raise EnumerationGuardError(
            f"{total} trajectories is too many for the exact pair expectation"
        )
    batches = list(enumerate_trajectory_batches(space, chunk=total))
    tb = batches[0] if len(batches) == 1 else _concat_batches(batches)
    tb.log_reward = space.log_rewards(tb.terminal_idx())
    pf, cache = replay_log_pf(policy, space, tb, want_cache=True)
    pb = replay_log_pb(space, tb)
    p_tau = np.exp(pf)
    ell = pf - pb - tb.log_reward
    lhs = np.zeros(policy.n_params)
    apply_log_pf_grad(policy, space, cache, p_tau * ell, lhs)
    rep = np.repeat(np.arange(tb.batch_size), tb.batch_size)
    til = np.tile(np.arange(tb.batch_size), tb.batch_size)
    _, grads = cb_loss_batch(
        policy,
        space,
        tb.subset(rep),
        tb.subset(til),
        pair_weights=p_tau[rep] * p_tau[til],
    )
    rhs = grads["policy"] / 4.0
    return float(np.max(np.abs(lhs - rhs)))


def _concat_batches(batches: list[TrajectoryBatch]) -> TrajectoryBatch:
    return TrajectoryBatch(
        np.concatenate([b.states for b in batches]),
        np.concatenate([b.actions for b in batches]),
        np.concatenate([b.lengths for b in batches]),
        np.concatenate([b.log_pf for b in batches]),
        np.concatenate([b.log_pb for b in batches]),
        None,
    )


# ---------------------------------------------------------------------------
# noisy-reward wrapper


class NoisyRewardEnv(Environment):
    """Base environment with frozen i.i.d. Gaussian offsets on the terminal
    log-rewards. Structure (and therefore the fingerprint) is unchanged."""

    def __init__(self, base: Environment, offsets: dict):
        self.base = base
        self.offsets = offsets
        self.kind = base.kind
        self.all_states_terminal = base.all_states_terminal

    @property
    def max_arity(self):
        return self.base.max_arity

    @property
    def max_traj_len(self):
        return self.base.max_traj_len

    @property
    def feature_dim(self):
        return self.base.feature_dim

    def initial_key(self):
        return self.base.initial_key()

    def validate_key(self, s):
        self.base.validate_key(s)

    def children(self, s):
        return self.base.children(s)

    def parents(self, s):
        return self.base.parents(s)

    def is_terminal(self, s):
        return self.base.is_terminal(s)

    def featurize(self, s):
        return self.base.featurize(s)

    def n_states_estimate(self):
        return self.base.n_states_estimate()

    def structure(self):
        return self.base.structure()

    def log_reward(self, s):
        return self.base.log_reward(s) + self.offsets[s]


def noisy_reward_wrap(
    env: Environment, sigma2: float, rng: np.random.Generator, guard: int | None = None
) -> NoisyRewardEnv:
    """Materialize one Gaussian log-reward offset per terminal state."""
    space = StateSpace.enumerated(env) if guard is None else StateSpace.enumerated(env, guard)
    sd = float(np.sqrt(sigma2))
    offsets = {
        space.keys[i]: float(rng.normal(0.0, sd)) if sd > 0 else 0.0
        for i in space.terminal_indices()
    }
    return NoisyRewardEnv(env, offsets)
