import functools
import itertools

import numpy as np
import pytest

from rlt2qap.instance import evaluate_objective


@functools.lru_cache(maxsize=None)
def all_perms(m):
    return np.array(list(itertools.permutations(range(m))), dtype=np.int64).reshape(-1, m)


def brute_qap(inst):
    """Exhaustive optimum and an optimal permutation."""
    n = inst.n
    P = all_perms(n)
    vals = (inst.flow[None] * inst.dist[P[:, :, None], P[:, None, :]]).sum(axis=(1, 2))
    vals += inst.linear[np.arange(n), P].sum(axis=1)
    k = int(np.argmin(vals))
    assert evaluate_objective(inst, P[k]) == vals[k]
    return int(vals[k]), tuple(P[k].tolist())


def brute_lap(cost):
    m = cost.shape[0]
    return cost[np.arange(m), all_perms(m)].sum(axis=1).min()


@pytest.fixture(scope="session")
def brute():
    return brute_qap
