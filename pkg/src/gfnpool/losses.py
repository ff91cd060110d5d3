"""Balance criteria as differentiable scalar losses.

Every loss recomputes log-probabilities from the policy's current
parameters (never from values cached at sampling time), returns the batch
loss value, and accumulates analytic gradients for whichever parameter
blocks the criterion trains:

  TB   squared trajectory-balance violation; trains policy + log Z
  DB   edgewise detailed balance with boundary terms; trains policy + flow
  DBC  DB specialized to graphs where every state is terminal; policy only
  CB   squared contrast between two trajectories' violations; policy only
  VL   squared deviation of the violation from the batch mean; policy only
  AB   squared mismatch between the global and the pooled local trajectory
       ratios; trains the global policy only and never touches any reward
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs.space import CHILD_ILLEGAL, StateSpace
from .errors import RewardSupportError, UnsupportedLossError
from .nn import MlpSpec, mlp_backward, mlp_forward, mlp_init
from .policy import (
    ForwardPolicy,
    Trajectory,
    TrajectoryBatch,
    apply_log_pf_grad,
    masked_log_softmax,
    replay_log_pb,
    replay_log_pf,
    trajectories_to_batch,
)

LOSS_KINDS = ("TB", "DB", "DBC", "CB", "VL", "AB")


@dataclass(frozen=True)
class LossSpec:
    """Which balance criterion to train with, and its hyperparameters."""

    kind: str
    logz_lr: float = 1e-1  # learning rate override for log Z (TB only)
    epsilon: float = 0.1  # exploration-mixture weight while sampling
    weights: tuple[float, ...] | None = None  # pooling weights (AB only)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.logz_lr <= 0:
            raise ValueError("logz_lr must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.weights is not None and any(w <= 0 for w in self.weights):
            raise ValueError("pooling weights must be positive")


# ---------------------------------------------------------------------------
# state-flow backends for the DB loss


class TabularFlow:
    """log F(s) stored per enumerated state."""

    backend = "tabular"
    no_decay = True

    def __init__(self, space: StateSpace, values: np.ndarray | None = None):
        space.require_complete()
        self.values = np.zeros(space.n_states) if values is None else np.asarray(values, dtype=np.float64)

    @property
    def n_params(self) -> int:
        return self.values.size

    def get_params(self) -> np.ndarray:
        return self.values.copy()

    def set_params(self, flat: np.ndarray) -> None:
        self.values = flat.copy()

    def log_flow(self, space, idx) -> np.ndarray:
        return self.values[idx]

    def accumulate_dflow(self, space, idx, dv, grad_flat) -> None:
        np.add.at(grad_flat, idx, dv)


class MlpFlow:
    """log F(s) as a scalar-output MLP mirroring the policy architecture."""

    backend = "mlp"
    no_decay = False

    def __init__(self, spec: MlpSpec, params: np.ndarray):
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)

    @classmethod
    def create(cls, env, hidden: tuple[int, ...], rng: np.random.Generator) -> "MlpFlow":
        spec = MlpSpec((env.feature_dim, *hidden, 1))
        return cls(spec, mlp_init(spec, rng))

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, flat: np.ndarray) -> None:
        self.params = flat.copy()

    def log_flow(self, space, idx) -> np.ndarray:
        out, _ = mlp_forward(self.spec, self.params, space.features(idx))
        return out[:, 0]

    def accumulate_dflow(self, space, idx, dv, grad_flat) -> None:
        _, cache = mlp_forward(self.spec, self.params, space.features(idx))
        grad, _ = mlp_backward(self.spec, self.params, cache, dv[:, None])
        grad_flat += grad


# ---------------------------------------------------------------------------
# helpers


def _require_rewards(tb: TrajectoryBatch) -> np.ndarray:
    if tb.log_reward is None:
        raise RewardSupportError("trajectory batch carries no terminal rewards")
    if not np.all(np.isfinite(tb.log_reward)):
        raise RewardSupportError("zero or non-finite reward at a terminal state")
    return tb.log_reward


def tb_violations(policy: ForwardPolicy, space: StateSpace, tb: TrajectoryBatch, logz: float = 0.0):
    """Signed trajectory-balance violations log p_F + log Z - log p_B - log R,
    recomputed under current parameters. Returns (violations, pf_cache)."""
    log_r = _require_rewards(tb)
    pf, cache = replay_log_pf(policy, space, tb, want_cache=True)
    pb = replay_log_pb(space, tb)
    return logz + pf - pb - log_r, cache


def _pair_weights(n: int, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("pair weights must match the pair count")
    return w


# ---------------------------------------------------------------------------
# batch losses (training path)


def tb_loss_batch(policy, space, tb, logz: float):
    """Mean squared TB violation; gradients for the policy and log Z."""
    v, cache = tb_violations(policy, space, tb, logz)
    n = tb.batch_size
    grad = np.zeros(policy.n_params)
    apply_log_pf_grad(policy, space, cache, 2.0 * v / n, grad)
    return float(np.mean(v**2)), {"policy": grad, "logz": float(np.mean(2.0 * v))}


def cb_loss_batch(policy, space, tb1, tb2, pair_weights=None):
    """Weighted squared contrast of TB violations between paired trajectories
    (log Z cancels, so none is needed)."""
    if tb1.batch_size != tb2.batch_size:
        raise ValueError("pair batches must have equal size")
    v1, c1 = tb_violations(policy, space, tb1)
    v2, c2 = tb_violations(policy, space, tb2)
    w = _pair_weights(tb1.batch_size, pair_weights)
    a = v1 - v2
    grad = np.zeros(policy.n_params)
    apply_log_pf_grad(policy, space, c1, 2.0 * w * a, grad)
    apply_log_pf_grad(policy, space, c2, -2.0 * w * a, grad)
    return float(np.sum(w * a**2)), {"policy": grad}


def vl_loss_batch(policy, space, tb):
    """Mean squared deviation of the TB violation from the batch mean (the
    batch mean estimates the inner expectation)."""
    if tb.batch_size < 2:
        raise ValueError("variance loss needs a batch of at least 2 trajectories")
    v, cache = tb_violations(policy, space, tb)
    d = v - v.mean()
    n = tb.batch_size
    grad = np.zeros(policy.n_params)
    # d(mean d^2)/dtheta = (2/n) sum_k d_k dV_k since the deviations sum to 0
    apply_log_pf_grad(policy, space, cache, 2.0 * d / n, grad)
    return float(np.mean(d**2)), {"policy": grad}


def db_loss_batch(policy, flow, space, tb):
    """Mean squared detailed-balance violation over every transition in the
    batch, boundary terms included."""
    log_r = _require_rewards(tb)
    total = int(tb.lengths.sum())
    grad_p = np.zeros(policy.n_params)
    grad_f = np.zeros(flow.n_params)
    sq = 0.0
    for t in range(tb.horizon):
        sel = np.flatnonzero(t < tb.lengths)
        if sel.size == 0:
            break
        s = tb.states[sel, t]
        a = tb.actions[sel, t]
        rows = space.children_rows(s)
        legal = rows != CHILD_ILLEGAL
        logits, bc = policy.logits_rows(space, s, want_cache=True)
        logp, p = masked_log_softmax(logits, legal)
        lp_a = logp[np.arange(sel.size), a]
        lf_s = flow.log_flow(space, s)
        is_stop = tb.lengths[sel] == t + 1
        viol = np.empty(sel.size)
        if np.any(~is_stop):
            nxt = tb.states[sel[~is_stop], t + 1]
            viol[~is_stop] = (
                lp_a[~is_stop]
                + np.log(space.nparents(nxt))
                + lf_s[~is_stop]
                - flow.log_flow(space, nxt)
            )
        viol[is_stop] = lf_s[is_stop] + lp_a[is_stop] - log_r[sel[is_stop]]
        sq += float(np.sum(viol**2))
        coeff = 2.0 * viol / total
        dl = -p * coeff[:, None]
        dl[np.arange(sel.size), a] += coeff
        policy.accumulate_dlogits(space, s, dl, grad_p, cache=bc)
        flow.accumulate_dflow(space, s, coeff, grad_f)
        if np.any(~is_stop):
            flow.accumulate_dflow(space, nxt, -coeff[~is_stop], grad_f)
    return sq / total, {"policy": grad_p, "flow": grad_f}


def dbc_loss_batch(policy, space, tb):
    """Flow-free detailed balance for graphs where every state is terminal:
    squared log violation of R(s') p_B(s|s') p_F(sf|s) = R(s) p_F(s'|s) p_F(sf|s'),
    averaged over the batch's interior transitions."""
    env = space.env
    if not getattr(env, "all_states_terminal", False):
        raise UnsupportedLossError(
            f"DBC requires every state to be terminal; {env.kind} is not such an environment"
        )
    stop = env.stop_action
    interior = int((tb.lengths - 1).sum())
    if interior == 0:
        raise UnsupportedLossError("batch contains no interior transitions")
    grad = np.zeros(policy.n_params)
    sq = 0.0
    for t in range(tb.horizon - 1):
        sel = np.flatnonzero(t + 1 < tb.lengths)
        if sel.size == 0:
            break
        s = tb.states[sel, t]
        a = tb.actions[sel, t]
        nxt = tb.states[sel, t + 1]
        rows_s = space.children_rows(s)
        logits_s, bc_s = policy.logits_rows(space, s, want_cache=True)
        logp_s, p_s = masked_log_softmax(logits_s, rows_s != CHILD_ILLEGAL)
        rows_n = space.children_rows(nxt)
        logits_n, bc_n = policy.logits_rows(space, nxt, want_cache=True)
        logp_n, p_n = masked_log_softmax(logits_n, rows_n != CHILD_ILLEGAL)
        rr = np.arange(sel.size)
        viol = (
            space.log_rewards(nxt)
            - np.log(space.nparents(nxt))
            + logp_s[rr, stop]
            - space.log_rewards(s)
            - logp_s[rr, a]
            - logp_n[rr, stop]
        )
        sq += float(np.sum(viol**2))
        coeff = 2.0 * viol / interior
        # d/dlogits(s) of [logp(stop|s) - logp(a|s)]: the softmax terms cancel
        dl_s = np.zeros_like(p_s)
        dl_s[rr, stop] += coeff
        dl_s[rr, a] -= coeff
        policy.accumulate_dlogits(space, s, dl_s, grad, cache=bc_s)
        dl_n = p_n * coeff[:, None]
        dl_n[rr, stop] -= coeff
        policy.accumulate_dlogits(space, nxt, dl_n, grad, cache=bc_n)
    return sq / interior, {"policy": grad}


def ab_loss_batch(policy, space, tb1, tb2, local_policies, weights=None, pair_weights=None):
    """Squared mismatch between the global trajectory-ratio contrast and the
    pooled local contrasts. Local policies carry no gradient; no reward is
    ever evaluated."""
    if not local_policies:
        raise ValueError("aggregation needs at least one local policy")
    if tb1.batch_size != tb2.batch_size:
        raise ValueError("pair batches must have equal size")
    n_local = len(local_policies)
    omega = np.ones(n_local) if weights is None else np.asarray(weights, dtype=np.float64)
    if omega.shape != (n_local,) or np.any(omega <= 0):
        raise ValueError("need one positive pooling weight per local policy")
    pb1, pb2 = replay_log_pb(space, tb1), replay_log_pb(space, tb2)
    pf1, c1 = replay_log_pf(policy, space, tb1, want_cache=True)
    pf2, c2 = replay_log_pf(policy, space, tb2, want_cache=True)
    delta_global = (pf1 - pb1) - (pf2 - pb2)
    pooled = np.zeros(tb1.batch_size)
    for w, local in zip(omega, local_policies):
        lf1 = replay_log_pf(local, space, tb1)
        lf2 = replay_log_pf(local, space, tb2)
        pooled += w * ((lf1 - pb1) - (lf2 - pb2))
    a = delta_global - pooled
    w = _pair_weights(tb1.batch_size, pair_weights)
    grad = np.zeros(policy.n_params)
    apply_log_pf_grad(policy, space, c1, 2.0 * w * a, grad)
    apply_log_pf_grad(policy, space, c2, -2.0 * w * a, grad)
    return float(np.sum(w * a**2)), {"policy": grad}


# ---------------------------------------------------------------------------
# single-instance forms


def tb_loss(policy, space, traj: Trajectory, logz: float):
    return tb_loss_batch(policy, space, trajectories_to_batch(space, [traj]), logz)


def cb_loss(policy, space, traj: Trajectory, traj2: Trajectory):
    return cb_loss_batch(
        policy,
        space,
        trajectories_to_batch(space, [traj]),
        trajectories_to_batch(space, [traj2]),
        pair_weights=np.ones(1),
    )


def vl_loss(policy, space, trajs: list[Trajectory]):
    return vl_loss_batch(policy, space, trajectories_to_batch(space, trajs))


def ab_loss(policy, space, traj, traj2, local_policies, weights=None):
    return ab_loss_batch(
        policy,
        space,
        trajectories_to_batch(space, [traj], with_rewards=False),
        trajectories_to_batch(space, [traj2], with_rewards=False),
        local_policies,
        weights,
        pair_weights=np.ones(1),
    )


def db_loss(policy, flow, space, s, action: int, s_next):
    """Detailed-balance loss of one edge; `s_next` is None for the stop edge."""
    i = np.array([space.lookup(s)])
    rows = space.children_rows(i)
    logits, bc = policy.logits_rows(space, i, want_cache=True)
    logp, p = masked_log_softmax(logits, rows != CHILD_ILLEGAL)
    lf_s = flow.log_flow(space, i)
    if s_next is None:
        viol = float(lf_s[0] + logp[0, action] - space.log_rewards(i)[0])
    else:
        j = np.array([space.lookup(s_next)])
        viol = float(
            logp[0, action]
            + np.log(space.nparents(j)[0])
            + lf_s[0]
            - flow.log_flow(space, j)[0]
        )
    grad_p = np.zeros(policy.n_params)
    grad_f = np.zeros(flow.n_params)
    dl = -p * (2.0 * viol)
    dl[0, action] += 2.0 * viol
    policy.accumulate_dlogits(space, i, dl, grad_p, cache=bc)
    flow.accumulate_dflow(space, i, np.array([2.0 * viol]), grad_f)
    if s_next is not None:
        flow.accumulate_dflow(space, j, np.array([-2.0 * viol]), grad_f)
    return viol**2, {"policy": grad_p, "flow": grad_f}


def dbc_loss(policy, space, s, action: int, s_next):
    """Flow-free detailed balance for one interior edge of an all-terminal graph."""
    env = space.env
    if not getattr(env, "all_states_terminal", False):
        raise UnsupportedLossError(
            f"DBC requires every state to be terminal; {env.kind} is not such an environment"
        )
    stop = env.stop_action
    i = np.array([space.lookup(s)])
    j = np.array([space.lookup(s_next)])
    rows_s = space.children_rows(i)
    logits_s, bc_s = policy.logits_rows(space, i, want_cache=True)
    logp_s, p_s = masked_log_softmax(logits_s, rows_s != CHILD_ILLEGAL)
    rows_n = space.children_rows(j)
    logits_n, bc_n = policy.logits_rows(space, j, want_cache=True)
    logp_n, p_n = masked_log_softmax(logits_n, rows_n != CHILD_ILLEGAL)
    viol = float(
        space.log_rewards(j)[0]
        - np.log(space.nparents(j)[0])
        + logp_s[0, stop]
        - space.log_rewards(i)[0]
        - logp_s[0, action]
        - logp_n[0, stop]
    )
    grad = np.zeros(policy.n_params)
    dl_s = np.zeros_like(p_s)
    dl_s[0, stop] += 2.0 * viol
    dl_s[0, action] -= 2.0 * viol
    policy.accumulate_dlogits(space, i, dl_s, grad, cache=bc_s)
    dl_n = p_n * (2.0 * viol)
    dl_n[0, stop] -= 2.0 * viol
    policy.accumulate_dlogits(space, j, dl_n, grad, cache=bc_n)
    return viol**2, {"policy": grad}
