"""Common contract for sampling environments.

Every environment is a graded DAG: the initial state has depth 0 and every
non-stop transition increases depth by exactly 1. All concrete environments
here satisfy this, and the breadth-first enumerator in `space.py` relies on
it to produce a topological order.

States are identified by canonical hashable keys. Keys of equal states are
identical Python objects under `==`, and canonicalization is idempotent.
"""

from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod

import numpy as np

from ..errors import UnsupportedFeaturizationError

StateKey = tuple

# children() reports each transition as (action_id, child_key, is_stop);
# stop transitions lead to the absorbing sink and carry child_key None.
Transition = "tuple[int, StateKey | None, bool]"


class Environment(ABC):
    """Immutable state DAG with per-terminal rewards."""

    kind: str = "abstract"
    all_states_terminal: bool = False  # True when every state has a stop edge

    @property
    @abstractmethod
    def max_arity(self) -> int:
        """Width of the action head; the stop action is the last slot."""

    @property
    def stop_action(self) -> int:
        return self.max_arity - 1

    @property
    @abstractmethod
    def max_traj_len(self) -> int:
        """Hard upper bound on transitions per trajectory (cycle guard)."""

    @abstractmethod
    def initial_key(self) -> StateKey: ...

    @abstractmethod
    def validate_key(self, s: StateKey) -> None:
        """Raise MalformedStateError if `s` is not a reachable state."""

    @abstractmethod
    def children(self, s: StateKey) -> list:
        """All legal transitions from `s` as (action_id, child, is_stop)."""

    @abstractmethod
    def parents(self, s: StateKey) -> list:
        """Exact inverse of children: all (parent, action_id) into `s`."""

    @abstractmethod
    def is_terminal(self, s: StateKey) -> bool: ...

    @abstractmethod
    def log_reward(self, s: StateKey) -> float: ...

    @property
    def feature_dim(self) -> int | None:
        """Feature vector length, or None if the env has no featurization."""
        return None

    def featurize(self, s: StateKey) -> np.ndarray:
        raise UnsupportedFeaturizationError(
            f"{self.kind} environment has no feature encoding; use the tabular backend"
        )

    @abstractmethod
    def n_states_estimate(self) -> int:
        """Exact reachable-state count from the closed form for this env."""

    @abstractmethod
    def structure(self) -> dict:
        """DAG-defining fields only (no reward parameters, no data)."""

    def fingerprint(self) -> str:
        """Digest of the DAG structure.

        Clients share the state graph but not the reward, so snapshots from
        clients with different reward parameters must still match.
        """
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return f"{self.kind}:{hashlib.sha256(blob).hexdigest()[:16]}"


def log_sigmoid(z: float) -> float:
    if z >= 0:
        return -np.log1p(np.exp(-z))
    return z - np.log1p(np.exp(z))
