"""Token sequences up to a maximum length; appending may halt early via a
terminating action, and the log-reward couples position and token scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import MalformedStateError, NoParentsError
from .base import Environment, StateKey


@dataclass(frozen=True)
class SequenceEnv(Environment):
    pos_scores: tuple[float, ...]  # one score per position, length = max_len
    token_scores: tuple[float, ...]  # one score per token

    kind = "sequence"
    all_states_terminal = True

    def __post_init__(self):
        if len(self.pos_scores) < 1:
            raise ValueError("max length must be >= 1")
        if len(self.token_scores) < 1:
            raise ValueError("token set must be non-empty")
        if not (np.all(np.isfinite(self.pos_scores)) and np.all(np.isfinite(self.token_scores))):
            raise ValueError("scores must be finite")

    @property
    def max_len(self) -> int:
        return len(self.pos_scores)

    @property
    def num_tokens(self) -> int:
        return len(self.token_scores)

    @property
    def max_arity(self) -> int:
        return self.num_tokens + 1

    @property
    def max_traj_len(self) -> int:
        return self.max_len + 1

    def initial_key(self) -> StateKey:
        return ()

    def validate_key(self, s: StateKey) -> None:
        if (
            not isinstance(s, tuple)
            or len(s) > self.max_len
            or not all(isinstance(u, int) and 0 <= u < self.num_tokens for u in s)
        ):
            raise MalformedStateError(f"not a token sequence: {s!r}")

    def children(self, s: StateKey) -> list:
        self.validate_key(s)
        out = []
        if len(s) < self.max_len:
            out.extend((u, s + (u,), False) for u in range(self.num_tokens))
        out.append((self.stop_action, None, True))
        return out

    def parents(self, s: StateKey) -> list:
        self.validate_key(s)
        if not s:
            raise NoParentsError("empty sequence has no parents")
        return [(s[:-1], s[-1])]

    def is_terminal(self, s: StateKey) -> bool:
        self.validate_key(s)
        return True

    def log_reward(self, s: StateKey) -> float:
        self.validate_key(s)
        return float(sum(self.pos_scores[i] * self.token_scores[u] for i, u in enumerate(s)))

    @property
    def feature_dim(self) -> int:
        # per-position one-hot over tokens plus a blank symbol, then length
        return self.max_len * (self.num_tokens + 1) + 1

    def featurize(self, s: StateKey) -> np.ndarray:
        self.validate_key(s)
        width = self.num_tokens + 1
        out = np.zeros(self.feature_dim)
        for i in range(self.max_len):
            sym = s[i] if i < len(s) else self.num_tokens  # blank beyond length
            out[i * width + sym] = 1.0
        out[-1] = len(s) / self.max_len
        return out

    def n_states_estimate(self) -> int:
        return sum(self.num_tokens**k for k in range(self.max_len + 1))

    def structure(self) -> dict:
        return {"kind": self.kind, "max_len": self.max_len, "num_tokens": self.num_tokens}
