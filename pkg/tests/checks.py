"""Measurements shared by the unit tests and the acceptance suite."""
from __future__ import annotations

import numpy as np

from macnet import tensor as T
from macnet.gridworld import generate_scene
from macnet.mac import MacConfig, MacNetwork
from macnet.tensor import Tape

from oracles import central_difference, relative_error


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data = rng.normal(scale=scale, size=p.shape)


def end_to_end_gradient_errors(share_weights=True, **opts) -> dict[str, float]:
    """Relative error per parameter tensor for d=8, p=2, a 3x3 grid and a 3-word question."""
    cfg = MacConfig(d=8, p=2, grid_size=3, share_weights=share_weights, **opts)
    net = MacNetwork(cfg, n_words=5, n_answers=4, seed=0)
    rng = np.random.default_rng(9)
    randomize(net, rng, scale=0.3)
    tokens, scenes = np.array([[1, 3, 2]]), [generate_scene(rng, 3, 3)]

    def value():
        return T.cross_entropy(net(tokens, scenes)[0], [2]).item()

    with Tape() as tape:
        loss = T.cross_entropy(net(tokens, scenes)[0], [2])
    grads = tape.backward(loss)
    named = list(net.named_parameters())
    numeric = central_difference(value, [p.data for _, p in named])
    return {name: relative_error(grads.of(p), n) for (name, p), n in zip(named, numeric)}
