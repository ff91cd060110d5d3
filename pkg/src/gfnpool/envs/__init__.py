from .base import Environment, StateKey, log_sigmoid
from .grid import GridEnv
from .multiset import MultisetEnv
from .sequence import SequenceEnv
from .phylo import (
    PhyloEnv,
    encode_tree,
    jc69_transition,
    num_forests,
    num_topologies,
    parse_tree,
    random_topology,
    read_sites,
    simulate_sites,
    split_sites,
    write_sites,
)
from .space import CHILD_ILLEGAL, CHILD_STOP, DEFAULT_STATE_GUARD, StateSpace

__all__ = [
    "Environment",
    "StateKey",
    "log_sigmoid",
    "GridEnv",
    "MultisetEnv",
    "SequenceEnv",
    "PhyloEnv",
    "encode_tree",
    "parse_tree",
    "jc69_transition",
    "num_forests",
    "num_topologies",
    "random_topology",
    "simulate_sites",
    "split_sites",
    "read_sites",
    "write_sites",
    "StateSpace",
    "CHILD_ILLEGAL",
    "CHILD_STOP",
    "DEFAULT_STATE_GUARD",
]
