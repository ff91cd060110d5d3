"""Server side: train a global sampler from frozen client snapshots via the
aggregating-balance criterion, plus the parameter-averaging and factorized
categorical baselines.

`aggregate_ab` receives snapshots and (optionally) a precomputed evaluation
target; it has no access to any reward function, and its sampler never
computes terminal rewards. That is the single-communication-round contract:
the bytes exchanged are exactly the snapshots.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass
from math import lgamma

import numpy as np

from . import evaluation
from .envs.base import Environment
from .envs.space import DEFAULT_STATE_GUARD, StateSpace
from .errors import EnumerationGuardError, NumericError, SnapshotError, UnsupportedLossError
from .losses import ab_loss_batch
from .nn import AdamWState, ParamGroup, adamw_step
from .policy import (
    ForwardPolicy,
    MlpPolicy,
    ProductPolicy,
    TabularPolicy,
    load_snapshot,
    sample_batch,
    save_snapshot,
)


@dataclass(frozen=True)
class AggregateConfig:
    epochs: int
    batch: int
    seed: int
    epsilon: float = 0.5  # half on-policy, half uniform while pairing
    lr: float = 3e-3
    weight_decay: float = 1e-4
    backend: str = "tabular"
    hidden: tuple[int, ...] = (64, 64)
    weights: tuple[float, ...] | None = None
    eval_every: int = 100
    eval_mode: str = "auto"
    eval_samples: int = 100_000
    clip_norm: float | None = None
    state_guard: int = DEFAULT_STATE_GUARD

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 2:
            raise ValueError("need epochs >= 1 and batch >= 2")
        if self.backend not in ("tabular", "mlp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.weights is not None and any(w <= 0 for w in self.weights):
            raise ValueError("pooling weights must be positive")


@dataclass
class AggregateResult:
    snapshot: bytes
    metrics: list[dict]
    policy: ForwardPolicy
    space: StateSpace


def load_local_policies(env: Environment, snapshots: list[bytes], space: StateSpace) -> list[ForwardPolicy]:
    if not snapshots:
        raise SnapshotError("aggregation needs at least one client snapshot")
    return [load_snapshot(blob, env, space)[0] for blob in snapshots]


def aggregate_ab(
    env: Environment,
    snapshots: list[bytes],
    cfg: AggregateConfig,
    eval_target: evaluation.DistributionTable | None = None,
) -> AggregateResult:
    """Train a fresh global policy by minimizing the aggregating-balance loss
    over trajectory pairs from the exploration mixture. Local rewards are
    never evaluated; `eval_target`, if given, only feeds the L1 probes."""
    try:
        space = StateSpace.enumerated(env, cfg.state_guard)
    except EnumerationGuardError:
        if cfg.backend == "tabular":
            raise
        space = StateSpace(env, guard=cfg.state_guard)
    locals_ = load_local_policies(env, snapshots, space)
    if cfg.weights is not None and len(cfg.weights) != len(locals_):
        raise ValueError("need one pooling weight per snapshot")
    train_ss, eval_ss, init_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    rng = np.random.default_rng(train_ss)
    eval_rng = np.random.default_rng(eval_ss)
    if cfg.backend == "tabular":
        policy: ForwardPolicy = TabularPolicy(space)
    else:
        policy = MlpPolicy.create(env, cfg.hidden, np.random.default_rng(init_ss))
    opt = AdamWState(
        [ParamGroup("policy", policy.n_params, weight_decay=0.0 if policy.no_decay else cfg.weight_decay)],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
    )
    half = cfg.batch // 2
    metrics: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        tb = sample_batch(policy, space, 2 * half, cfg.epsilon, rng, compute_rewards=False)
        loss, grads = ab_loss_batch(
            policy,
            space,
            tb.subset(slice(0, half)),
            tb.subset(slice(half, 2 * half)),
            locals_,
            cfg.weights,
        )
        if not np.isfinite(loss):
            raise NumericError(f"non-finite aggregation loss at epoch {epoch}")
        policy.set_params(adamw_step(opt, policy.get_params(), grads["policy"]))
        l1_val = float("nan")
        if cfg.eval_every and eval_target is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            if cfg.eval_mode == "sampled" or (cfg.eval_mode == "auto" and not space.complete):
                approx = evaluation.sampled_pT(policy, space, cfg.eval_samples, eval_rng)
            else:
                approx = evaluation.exact_pT(policy, space)
            l1_val = evaluation.l1(approx, eval_target)
        metrics.append(
            {"epoch": epoch, "loss": float(loss), "l1": l1_val, "wall_ms": (time.perf_counter() - t0) * 1e3}
        )
    meta = {
        "role": "global",
        "n_locals": len(locals_),
        "weights": list(cfg.weights) if cfg.weights else [1.0] * len(locals_),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }
    return AggregateResult(save_snapshot(policy, env, meta=meta), metrics, policy, space)


# ---------------------------------------------------------------------------
# single-round parameter averaging baseline


def fedavg_average(snapshots: list[bytes]) -> bytes:
    """Element-wise mean of snapshot parameters (identical architectures
    required). A correctness-free baseline; metadata marks its provenance."""
    if not snapshots:
        raise SnapshotError("nothing to average")
    docs = [json.loads(b.decode()) for b in snapshots]
    head = docs[0]
    for d in docs[1:]:
        for key in ("version", "env_fingerprint", "backend", "arch", "backward"):
            if d.get(key) != head.get(key):
                raise SnapshotError(f"snapshot mismatch on {key!r}; cannot average")
    stacks = [np.frombuffer(base64.b64decode(d["params_b64"]), dtype="<f8") for d in docs]
    if len({s.size for s in stacks}) != 1:
        raise SnapshotError("parameter payload sizes differ")
    mean = np.mean(np.stack(stacks), axis=0)
    doc = dict(head)
    doc["params_b64"] = base64.b64encode(mean.astype("<f8").tobytes()).decode()
    doc["meta"] = {"baseline": "fedavg", "n_locals": len(docs)}
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def naive_policy_product(local_policies: list[ForwardPolicy]) -> ProductPolicy:
    """Per-state renormalized product of the local action distributions - the
    diagnostic negative control (it does not sample the product target)."""
    return ProductPolicy(local_policies)


# ---------------------------------------------------------------------------
# factorized categorical variational baseline


@dataclass
class PcviParams:
    """Named simplex blocks of a factorized categorical fit."""

    kind: str
    blocks: dict[str, np.ndarray]


def _normalize_block(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 1:
        return arr / arr.sum()
    return arr / arr.sum(axis=1, keepdims=True)


def pcvi_fit(
    policy: ForwardPolicy,
    space: StateSpace,
    n_samples: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
    chunk: int = 8192,
) -> PcviParams:
    """Closed-form fit of the per-environment categorical family to on-policy
    samples (empirical frequencies with Laplace smoothing)."""
    env = space.env
    keys = []
    left = n_samples
    while left > 0:
        b = min(chunk, left)
        tb = sample_batch(policy, space, b, epsilon=0.0, rng=rng, compute_rewards=False)
        keys.extend(space.keys[i] for i in tb.terminal_idx())
        left -= b
    if env.kind == "grid":
        side = env.side
        cx, cy = np.full(side, alpha), np.full(side, alpha)
        for x, y in keys:
            cx[x] += 1
            cy[y] += 1
        return PcviParams("grid", {"x": _normalize_block(cx), "y": _normalize_block(cy)})
    if env.kind == "multiset":
        counts = np.full(env.dict_size, alpha)
        for c in keys:
            counts += np.asarray(c, dtype=np.float64)
        return PcviParams("multiset", {"items": _normalize_block(counts)})
    if env.kind == "sequence":
        s_max, n_tok = env.max_len, env.num_tokens
        length = np.full(s_max + 1, alpha)
        toks = {f"tokens_{L}": np.full((L, n_tok), alpha) for L in range(1, s_max + 1)}
        for seq in keys:
            length[len(seq)] += 1
            if seq:
                block = toks[f"tokens_{len(seq)}"]
                for i, u in enumerate(seq):
                    block[i, u] += 1
        blocks = {"length": _normalize_block(length)}
        blocks.update({name: _normalize_block(b) for name, b in toks.items()})
        return PcviParams("sequence", blocks)
    raise UnsupportedLossError(
        f"no factorized categorical family for {env.kind}; its support is not a product space"
    )


def pcvi_pool(params: list[PcviParams]) -> PcviParams:
    """Element-wise product of matching blocks, renormalized per simplex."""
    if not params:
        raise ValueError("nothing to pool")
    head = params[0]
    for p in params[1:]:
        if p.kind != head.kind or set(p.blocks) != set(head.blocks):
            raise ValueError("PCVI parameter families do not match")
        for name, block in p.blocks.items():
            if block.shape != head.blocks[name].shape:
                raise ValueError(f"block {name!r} shape mismatch")
    out = {}
    for name in head.blocks:
        prod = np.ones_like(head.blocks[name])
        for p in params:
            prod = prod * p.blocks[name]
        out[name] = _normalize_block(prod)
    return PcviParams(head.kind, out)


def pcvi_distribution(params: PcviParams, space: StateSpace) -> evaluation.DistributionTable:
    """Terminal distribution implied by the factorized parameters."""
    env = space.env
    if params.kind != env.kind:
        raise ValueError(f"parameters for {params.kind!r} applied to {env.kind!r}")
    probs: dict = {}
    term = space.terminal_indices()
    if env.kind == "grid":
        px, py = params.blocks["x"], params.blocks["y"]
        for i in term:
            x, y = space.keys[i]
            probs[space.keys[i]] = float(px[x] * py[y])
    elif env.kind == "multiset":
        phi = np.log(params.blocks["items"])
        s = env.target_size
        for i in term:
            c = np.asarray(space.keys[i], dtype=np.float64)
            log_coef = lgamma(s + 1) - sum(lgamma(v + 1) for v in c)
            probs[space.keys[i]] = float(np.exp(log_coef + float(c @ phi)))
    else:  # sequence
        theta = params.blocks["length"]
        for i in term:
            seq = space.keys[i]
            q = theta[len(seq)]
            if seq:
                block = params.blocks[f"tokens_{len(seq)}"]
                for pos, u in enumerate(seq):
                    q *= block[pos, u]
            probs[space.keys[i]] = float(q)
    return evaluation.DistributionTable(probs, provenance="pcvi")


def pcvi_write(params: PcviParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"kind {params.kind}\n")
        for name, block in params.blocks.items():
            shape = "x".join(str(d) for d in block.shape)
            fh.write(f"block {name} {shape}\n")
            fh.write(" ".join(repr(float(v)) for v in block.ravel()) + "\n")


def pcvi_read(path) -> PcviParams:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("kind "):
        raise ValueError("malformed PCVI parameter file")
    kind = lines[0].split(" ", 1)[1]
    blocks: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].startswith("block "):
            raise ValueError(f"expected a block header at line {i + 1}")
        _, name, shape = lines[i].split(" ")
        dims = tuple(int(d) for d in shape.split("x"))
        vals = np.array([float(v) for v in lines[i + 1].split()])
        blocks[name] = vals.reshape(dims)
        i += 2
    return PcviParams(kind, blocks)
