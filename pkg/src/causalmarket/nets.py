"""Small MLP plumbing shared by the transformation networks.

A depth-d MLP is d affine layers with tanh between them (none after the
last). Depth 1 is a single affine map. Grouped variants keep one weight set
per group (used for the per-stock prediction heads).
"""

import numpy as np

from . import autodiff as ad


def mlp_sizes(n_in: int, n_out: int, hidden: int, depth: int) -> list[int]:
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if depth == 1:
        return [n_in, n_out]
    return [n_in] + [hidden] * (depth - 1) + [n_out]


def init_mlp(store: ad.ParamStore, rng: np.random.Generator, prefix: str, sizes: list[int]) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"{prefix}.w{i}", ad.xavier_uniform(rng, (a, b), a, b))
        store.add(f"{prefix}.b{i}", np.zeros(b))


def apply_mlp(x: ad.Node, p: ad.ParamView, prefix: str, depth: int) -> ad.Node:
    h = x
    for i in range(depth):
        h = ad.affine(h, p(f"{prefix}.w{i}"), p(f"{prefix}.b{i}"))
        if i < depth - 1:
            h = ad.tanh(h)
    return h


def init_grouped_mlp(
    store: ad.ParamStore, rng: np.random.Generator, prefix: str, n_groups: int, sizes: list[int]
) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"{prefix}.w{i}", ad.xavier_uniform(rng, (n_groups, a, b), a, b))
        store.add(f"{prefix}.b{i}", np.zeros((n_groups, b)))


def apply_grouped_mlp(x: ad.Node, p: ad.ParamView, prefix: str, depth: int) -> ad.Node:
    h = x
    for i in range(depth):
        h = ad.grouped_affine(h, p(f"{prefix}.w{i}"), p(f"{prefix}.b{i}"))
        if i < depth - 1:
            h = ad.tanh(h)
    return h
