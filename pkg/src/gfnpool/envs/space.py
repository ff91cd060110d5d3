"""Integer-indexed view of an environment's state DAG.

States are assigned dense indices as they are discovered, and per-state
rows (children, parent counts, terminal flags, features, cached rewards)
live in flat numpy arrays so that trajectory sampling, log-probability
replay, and exact dynamic programs all run as batched array operations.

`StateSpace.enumerated` walks the whole graph breadth-first; because every
environment is a graded DAG, discovery order is then a topological order
(index i's depth never exceeds index i+1's).
"""

from __future__ import annotations

import numpy as np

from ..errors import EnumerationGuardError
from .base import Environment, StateKey

CHILD_ILLEGAL = -1
CHILD_STOP = -2

DEFAULT_STATE_GUARD = 5_000_000


class StateSpace:
    def __init__(self, env: Environment, guard: int = DEFAULT_STATE_GUARD):
        self.env = env
        self.guard = int(guard)
        self.arity = env.max_arity
        self.keys: list[StateKey] = []
        self.index: dict[StateKey, int] = {}
        cap = 256
        self._children = np.full((cap, self.arity), CHILD_ILLEGAL, dtype=np.int64)
        self._expanded = np.zeros(cap, dtype=bool)
        self._nparents = np.zeros(cap, dtype=np.int64)
        self._terminal = np.zeros(cap, dtype=bool)
        self._depth = np.zeros(cap, dtype=np.int64)
        self._logr = np.full(cap, np.nan)
        fd = env.feature_dim
        self._feats = np.zeros((cap, fd)) if fd else None
        self.complete = False
        self._initial = env.initial_key()
        self.root = self._register(self._initial, depth=0)

    # -- registration ------------------------------------------------------

    def _grow(self, need: int) -> None:
        cap = self._children.shape[0]
        if need <= cap:
            return
        new = max(need, cap * 2)
        pad = new - cap
        self._children = np.concatenate(
            [self._children, np.full((pad, self.arity), CHILD_ILLEGAL, dtype=np.int64)]
        )
        self._expanded = np.concatenate([self._expanded, np.zeros(pad, dtype=bool)])
        self._nparents = np.concatenate([self._nparents, np.zeros(pad, dtype=np.int64)])
        self._terminal = np.concatenate([self._terminal, np.zeros(pad, dtype=bool)])
        self._depth = np.concatenate([self._depth, np.zeros(pad, dtype=np.int64)])
        self._logr = np.concatenate([self._logr, np.full(pad, np.nan)])
        if self._feats is not None:
            self._feats = np.concatenate([self._feats, np.zeros((pad, self._feats.shape[1]))])

    def _register(self, key: StateKey, depth: int) -> int:
        idx = self.index.get(key)
        if idx is not None:
            return idx
        idx = len(self.keys)
        if idx >= self.guard:
            raise EnumerationGuardError(
                f"{self.env.kind} state space exceeds guard of {self.guard}"
            )
        self._grow(idx + 1)
        self.keys.append(key)
        self.index[key] = idx
        self._nparents[idx] = 0 if key == self._initial else len(self.env.parents(key))
        self._terminal[idx] = self.env.is_terminal(key)
        self._depth[idx] = depth
        if self._feats is not None:
            self._feats[idx] = self.env.featurize(key)
        return idx

    def lookup(self, key: StateKey) -> int:
        """Index of a state, registering it if new (validates via env)."""
        idx = self.index.get(key)
        if idx is not None:
            return idx
        self.env.validate_key(key)
        depth = 0 if key == self._initial else self._depth_of(key)
        return self._register(key, depth)

    def _depth_of(self, key: StateKey) -> int:
        parent, _ = self.env.parents(key)[0]
        pidx = self.index.get(parent)
        if pidx is not None:
            return int(self._depth[pidx]) + 1
        return self._depth_of(parent) + 1

    def _expand(self, idx: int) -> None:
        depth = int(self._depth[idx]) + 1
        for action, child, is_stop in self.env.children(self.keys[idx]):
            self._children[idx, action] = (
                CHILD_STOP if is_stop else self._register(child, depth)
            )
        self._expanded[idx] = True

    # -- vectorized accessors ------------------------------------------------

    @property
    def n_states(self) -> int:
        return len(self.keys)

    def children_rows(self, idx: np.ndarray) -> np.ndarray:
        """(batch, arity) child codes; CHILD_STOP marks the sink, CHILD_ILLEGAL a masked slot."""
        pending = np.asarray(idx)[~self._expanded[idx]]
        for i in np.unique(pending):
            self._expand(int(i))
        return self._children[idx]

    def nparents(self, idx) -> np.ndarray:
        return self._nparents[idx]

    def terminal_mask(self, idx) -> np.ndarray:
        return self._terminal[idx]

    def depth(self, idx) -> np.ndarray:
        return self._depth[idx]

    def features(self, idx) -> np.ndarray:
        if self._feats is None:
            return self.env.featurize(self.keys[0])  # raises the env's error
        return self._feats[idx]

    def log_rewards(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        missing = idx[np.isnan(self._logr[idx])]
        for i in np.unique(missing):
            self._logr[i] = self.env.log_reward(self.keys[int(i)])
        return self._logr[idx]

    # -- enumeration ---------------------------------------------------------

    @classmethod
    def enumerated(cls, env: Environment, guard: int = DEFAULT_STATE_GUARD) -> "StateSpace":
        est = env.n_states_estimate()
        if est > guard:
            raise EnumerationGuardError(
                f"{env.kind} has ~{est} states, above the guard of {guard}"
            )
        space = cls(env, guard=guard)
        i = 0
        while i < space.n_states:
            space._expand(i)
            i += 1
        space.complete = True
        return space

    def require_complete(self) -> None:
        if not self.complete:
            raise EnumerationGuardError("operation requires a fully enumerated state space")

    def terminal_indices(self) -> np.ndarray:
        self.require_complete()
        return np.flatnonzero(self._terminal[: self.n_states])

    def levels(self) -> list[np.ndarray]:
        """State indices grouped by depth, ascending (a topological layering)."""
        self.require_complete()
        d = self._depth[: self.n_states]
        return [np.flatnonzero(d == lv) for lv in range(int(d.max()) + 1)]
