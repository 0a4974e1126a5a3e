"""Random loss inputs shared by the loss tests and the acceptance suite."""

import numpy as np

from cdslab import losses as L
from cdslab.network import TapOutputs
from cdslab.tensor import Tensor

ORACLE_INSTANCES = 120


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def unit(rng, rows, d):
    z = rng.normal(size=(rows, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_taps(rng, rows, classes, dim, heads, stages=2):
    final = rng.normal(size=(rows, classes)) * 2
    aux = [rng.normal(size=(rows, classes)) * 2 for _ in range(heads)]
    emb = [unit(rng, rows, dim) for _ in range(heads)]
    feats = [rng.normal(size=(rows, 2, 2, 2)) for _ in range(stages)]
    taps = TapOutputs(t64(final), [t64(f) for f in feats], [t64(a) for a in aux], [t64(e) for e in emb])
    return taps, dict(final=final, aux=aux, emb=emb, feats=feats)


def random_weights(rng):
    return L.LossWeights(*(float(v) for v in rng.uniform(0, 1.5, size=5)),
                         tau=float(rng.uniform(0.1, 1.0)), T=float(rng.uniform(0.5, 5)))


def instances(count=ORACLE_INSTANCES):
    """Small shapes: 2N <= 8, D <= 8, C <= 5."""
    for i in range(count):
        rng = np.random.default_rng([7, i])
        yield rng, int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(2, 6))
