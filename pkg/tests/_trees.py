"""Random tree-structured spaces and data for tests."""

import numpy as np

from addtree.kernels import Interaction, _is_ancestor, build_add_tree
from addtree.space import parse_spec, sample_uniform


def random_tree_dict(rng, max_depth=4, max_dim=3, max_children=3, min_dim=0):
    """Nested spec document with globally unique variable names."""
    counter = [0]

    def vertex(depth):
        dim = int(rng.integers(min_dim, max_dim + 1))
        cont = []
        for _ in range(dim):
            lo = float(rng.uniform(-2, 1))
            cont.append({"name": f"v{counter[0]}", "low": lo, "high": lo + float(rng.uniform(0.5, 3))})
            counter[0] += 1
        node = {"continuous": cont}
        if depth + 1 < max_depth and rng.random() < 0.7:
            k = int(rng.integers(2, max_children + 1))
            node["children"] = {str(j): vertex(depth + 1) for j in range(k)}
        return node

    while True:
        doc = vertex(0)
        if counter[0] > 0:
            return doc
        counter[0] = 0


def random_spec(rng, **kw):
    return parse_spec(random_tree_dict(rng, **kw))


def two_leaf_spec(rng, root_dim=None):
    root_dim = int(rng.integers(0, 3)) if root_dim is None else root_dim
    names = iter(f"v{i}" for i in range(100))

    def block(d):
        return [{"name": next(names), "low": 0.0, "high": 1.0} for _ in range(d)]

    return parse_spec({
        "continuous": block(root_dim),
        "children": {
            "a": {"continuous": block(int(rng.integers(1, 4)))},
            "b": {"continuous": block(int(rng.integers(1, 4)))},
        },
    })


def random_interactions(spec, rng):
    verts = spec.block_vertices
    return [Interaction(u, w, float(rng.uniform(-2, 1))) for u in verts for w in verts
            if u != w and _is_ancestor(spec, u, w)]


def random_kernel(spec, rng, interactions=False, tie=None):
    inter = random_interactions(spec, rng) if interactions else ()
    return build_add_tree(spec, init="random", rng=rng, interactions=inter, tie=tie)


def random_points(spec, rng, n):
    return [sample_uniform(spec, rng) for _ in range(n)]
