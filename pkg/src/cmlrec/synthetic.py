"""Synthetic interaction generators with planted structure.

The planted-cluster generator builds users with split interests: each user
draws from 2-3 preferred item clusters plus uniform noise. A single-point
metric model has to park such a user between its clusters, while
history-adaptive translations can move toward the candidate's cluster, so
the generator separates the model families by design.
"""
from __future__ import annotations

import numpy as np

from .datasets import InteractionDataset, SplitDataset, split_dataset


def planted_clusters(
    num_users: int = 500,
    num_items: int = 300,
    n_clusters: int = 10,
    interactions_per_user: int = 30,
    noise: float = 0.1,
    seed: int = 0,
) -> InteractionDataset:
    """Interaction set with ``n_clusters`` contiguous item blocks.

    Every user prefers 2 or 3 clusters with random mixture weights; each of
    the ``interactions_per_user`` draws picks a uniform item from a preferred
    cluster, or with probability ``noise`` a uniform item from the whole
    catalog. Duplicate draws collapse, so per-user counts land slightly
    below the nominal number.
    """
    if num_items % n_clusters != 0:
        raise ValueError("num_items must be divisible by n_clusters")
    if not 0 <= noise <= 1:
        raise ValueError(f"noise must be in [0, 1], got {noise}")
    gen = np.random.default_rng(seed)
    cluster_size = num_items // n_clusters
    pairs: set[tuple[int, int]] = set()
    for u in range(num_users):
        n_pref = int(gen.integers(2, 4))
        prefs = gen.choice(n_clusters, size=n_pref, replace=False)
        weights = gen.dirichlet(np.ones(n_pref) * 2.0)
        for _ in range(interactions_per_user):
            if gen.random() < noise:
                v = int(gen.integers(num_items))
            else:
                c = int(prefs[gen.choice(n_pref, p=weights)])
                v = c * cluster_size + int(gen.integers(cluster_size))
            pairs.add((u, v))
    user_keys = [f"u{u}" for u in range(num_users)]
    item_keys = [f"i{v}" for v in range(num_items)]
    return InteractionDataset.from_pairs(num_users, num_items, sorted(pairs), user_keys, item_keys)


def planted_split(
    num_users: int = 500,
    num_items: int = 300,
    n_clusters: int = 10,
    interactions_per_user: int = 30,
    noise: float = 0.1,
    seed: int = 0,
) -> SplitDataset:
    """Planted-cluster dataset already split 80/10/10 with the same seed."""
    ds = planted_clusters(num_users, num_items, n_clusters, interactions_per_user, noise, seed)
    return split_dataset(ds, seed=seed)
