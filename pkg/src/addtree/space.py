"""Tree-structured (conditional) parameter spaces.

A space is a rooted tree. Every vertex owns a (possibly empty) box of
continuous variables, and the outgoing edges of a vertex form one
categorical variable whose settings are the edge labels. A point selects one
root-to-leaf path through its categorical choices and only carries values for
the vertices on that path.

Vertices are numbered in breadth-first order, children visited in the order
they are declared. That ordering fixes the layout of the flat tag-slot
encoding produced by :func:`linearize`.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from os import PathLike
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "ContinuousBlock",
    "Vertex",
    "TreeSpec",
    "StructuredPoint",
    "SpecError",
    "PointError",
    "parse_spec",
    "load_spec",
    "spec_to_dict",
    "dimensions",
    "linearize",
    "delinearize",
    "sample_uniform",
    "shared_prefix",
    "is_sentinel",
]


class SpecError(ValueError):
    """Raised for malformed tree-space documents."""


class PointError(ValueError):
    """Raised when a point does not belong to a space."""


@dataclass(frozen=True)
class ContinuousBlock:
    names: tuple[str, ...] = ()
    lows: np.ndarray = field(default_factory=lambda: np.zeros(0))
    highs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        lows = np.asarray(self.lows, dtype=float).reshape(-1)
        highs = np.asarray(self.highs, dtype=float).reshape(-1)
        names = tuple(self.names)
        if not (len(names) == lows.size == highs.size):
            raise SpecError("block names, lows and highs must have equal length")
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate variable names in block: {names}")
        if not (np.all(np.isfinite(lows)) and np.all(np.isfinite(highs))):
            raise SpecError("block bounds must be finite")
        if np.any(lows >= highs):
            raise SpecError(f"empty or inverted bounds in block {names}")
        lows.setflags(write=False)
        highs.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def widths(self) -> np.ndarray:
        return self.highs - self.lows

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lows - tol) and np.all(x <= self.highs + tol))

    def __eq__(self, other):
        if not isinstance(other, ContinuousBlock):
            return NotImplemented
        return (
            self.names == other.names
            and np.array_equal(self.lows, other.lows)
            and np.array_equal(self.highs, other.highs)
        )

    def __hash__(self):
        return hash((self.names, self.lows.tobytes(), self.highs.tobytes()))


@dataclass(frozen=True)
class Vertex:
    id: int
    block: ContinuousBlock
    children: Mapping[str, int]
    parent: int | None = None
    label: str | None = None  # edge label leading into this vertex
    name: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def dim(self) -> int:
        return self.block.dim


class TreeSpec:
    """A validated tree-structured parameter space.

    Use :func:`parse_spec` or :func:`load_spec` to build one from a document.
    Instances are immutable and hashable by identity of their content.
    """

    def __init__(self, vertices: Sequence[Vertex]):
        self.vertices: tuple[Vertex, ...] = tuple(vertices)
        self.root = 0
        self._check()
        leaves = [v.id for v in self.vertices if v.is_leaf]
        paths = []
        for leaf in leaves:
            path = [leaf]
            while self.vertices[path[-1]].parent is not None:
                path.append(self.vertices[path[-1]].parent)
            paths.append(tuple(reversed(path)))
        self.paths: tuple[tuple[int, ...], ...] = tuple(paths)
        self.leaves: tuple[int, ...] = tuple(leaves)
        self._leaf_index = {leaf: i for i, leaf in enumerate(leaves)}
        self._on_path = np.zeros((len(paths), len(self.vertices)), dtype=bool)
        for i, path in enumerate(paths):
            self._on_path[i, list(path)] = True
        self._on_path.setflags(write=False)
        self._names = {}
        for v in self.vertices:
            for j, name in enumerate(v.block.names):
                self._names.setdefault(name, []).append((v.id, j))
        # Sibling rank of each vertex: position among its parent's children.
        self._rank = [0] * len(self.vertices)
        for v in self.vertices:
            for r, child in enumerate(v.children.values()):
                self._rank[child] = r

    def _check(self):
        for i, v in enumerate(self.vertices):
            if v.id != i:
                raise SpecError("vertex ids must be consecutive BFS indices")
            for child in v.children.values():
                if child <= v.id:
                    raise SpecError("child BFS index must exceed its parent's")
                if self.vertices[child].parent != v.id:
                    raise SpecError("inconsistent parent links")

    # -- basic queries -------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def depths(self) -> tuple[int, ...]:
        """Number of vertices on each root-to-leaf path."""
        return tuple(len(p) for p in self.paths)

    @property
    def block_vertices(self) -> tuple[int, ...]:
        """Vertices carrying a nonempty continuous block, in BFS order."""
        return tuple(v.id for v in self.vertices if v.dim > 0)

    @property
    def branching_vertices(self) -> tuple[int, ...]:
        return tuple(v.id for v in self.vertices if v.children)

    def rank(self, vid: int) -> int:
        return self._rank[vid]

    def on_path(self, path_index: int, vid: int) -> bool:
        return bool(self._on_path[path_index, vid])

    @property
    def membership(self) -> np.ndarray:
        """Boolean matrix ``(n_paths, n_vertices)`` of path membership."""
        return self._on_path

    def path_of_leaf(self, leaf: int) -> int:
        return self._leaf_index[leaf]

    def path_labels(self, path_index: int) -> tuple[str, ...]:
        """Edge labels chosen along a path, from the root downwards."""
        return tuple(self.vertices[v].label for v in self.paths[path_index][1:])

    def path_from_labels(self, labels: Sequence[str]) -> int:
        vid = self.root
        for label in labels:
            try:
                vid = self.vertices[vid].children[label]
            except KeyError:
                raise PointError(
                    f"label {label!r} is not a child of vertex {vid}"
                ) from None
        if not self.vertices[vid].is_leaf:
            raise PointError(f"labels {list(labels)} stop before a leaf")
        return self._leaf_index[vid]

    def variable_names(self, path_index: int | None = None) -> list[str]:
        vids = range(self.n_vertices) if path_index is None else self.paths[path_index]
        return [n for v in vids for n in self.vertices[v].block.names]

    def anchor(self, path_index: int) -> int | None:
        """Shallowest block-carrying vertex on a path, or None."""
        for v in self.paths[path_index]:
            if self.vertices[v].dim > 0:
                return v
        return None

    # -- point construction --------------------------------------------------

    def point(self, path: int | Sequence[str], params: Mapping[str, float]) -> StructuredPoint:
        """Build a point from a path (index or edge labels) and named values."""
        path_index = path if isinstance(path, (int, np.integer)) else self.path_from_labels(path)
        path_index = int(path_index)
        choices = {}
        values = {}
        names_needed = set()
        for a, b in zip(self.paths[path_index][:-1], self.paths[path_index][1:]):
            choices[a] = self.vertices[b].label
        for v in self.paths[path_index]:
            block = self.vertices[v].block
            if block.dim:
                names_needed.update(block.names)
                try:
                    values[v] = np.array([float(params[n]) for n in block.names])
                except KeyError as exc:
                    raise PointError(f"missing value for {exc.args[0]!r}") from None
        extra = set(params) - names_needed
        if extra:
            raise PointError(f"values given for off-path variables: {sorted(extra)}")
        p = StructuredPoint(choices, values)
        self.validate(p)
        return p

    def to_params(self, p: StructuredPoint) -> dict[str, float]:
        out = {}
        for vid, x in sorted(p.values.items()):
            for name, value in zip(self.vertices[vid].block.names, x):
                out[name] = float(value)
        return out

    def path_index(self, p: StructuredPoint) -> int:
        """Index of the root-to-leaf path selected by a point's choices."""
        vid = self.root
        while self.vertices[vid].children:
            try:
                label = p.choices[vid]
                vid = self.vertices[vid].children[label]
            except KeyError:
                raise PointError(f"no valid choice recorded at vertex {vid}") from None
        return self._leaf_index[vid]

    def validate(self, p: StructuredPoint, tol: float = 0.0) -> int:
        """Check a point against the space and return its path index."""
        i = self.path_index(p)
        path = self.paths[i]
        branching = {v for v in path if self.vertices[v].children}
        if set(p.choices) != branching:
            raise PointError("choices must cover exactly the on-path branching vertices")
        expected = {v for v in path if self.vertices[v].dim}
        if set(p.values) != expected:
            raise PointError(
                f"values must cover exactly on-path block vertices {sorted(expected)}, "
                f"got {sorted(p.values)}"
            )
        for v in expected:
            block = self.vertices[v].block
            x = p.values[v]
            if x.shape != (block.dim,):
                raise PointError(f"vertex {v} expects {block.dim} values, got {x.shape}")
            if not block.contains(x, tol):
                raise PointError(f"values {x} at vertex {v} lie outside the block bounds")
        return i

    # -- equality ------------------------------------------------------------

    def _key(self):
        return tuple(
            (v.block, tuple(v.children.items()), v.name) for v in self.vertices
        )

    def __eq__(self, other):
        if not isinstance(other, TreeSpec):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return (
            f"TreeSpec(n_vertices={self.n_vertices}, n_paths={self.n_paths}, "
            f"ambient_dim={dimensions(self)[0]})"
        )


class StructuredPoint:
    """A point of a tree-structured space.

    Parameters
    ----------
    choices : mapping of int to str
        Selected child label at each on-path branching vertex.
    values : mapping of int to array-like
        Continuous values for each on-path vertex with a nonempty block.
    """

    __slots__ = ("choices", "values")

    def __init__(self, choices: Mapping[int, str], values: Mapping[int, Any]):
        self.choices = {int(k): str(v) for k, v in choices.items()}
        vals = {}
        for k, v in values.items():
            arr = np.array(v, dtype=float).reshape(-1)
            arr.setflags(write=False)
            vals[int(k)] = arr
        self.values = vals

    def __eq__(self, other):
        if not isinstance(other, StructuredPoint):
            return NotImplemented
        return (
            self.choices == other.choices
            and self.values.keys() == other.values.keys()
            and all(np.array_equal(self.values[k], other.values[k]) for k in self.values)
        )

    def __hash__(self):
        return hash(
            (
                tuple(sorted(self.choices.items())),
                tuple((k, self.values[k].tobytes()) for k in sorted(self.values)),
            )
        )

    def __repr__(self):
        vals = {k: v.tolist() for k, v in sorted(self.values.items())}
        return f"StructuredPoint(choices={self.choices}, values={vals})"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_VERTEX_KEYS = {"name", "continuous", "children"}
_VAR_KEYS = {"name", "low", "high"}


def _parse_block(raw) -> ContinuousBlock:
    if raw is None:
        return ContinuousBlock()
    if not isinstance(raw, list):
        raise SpecError("'continuous' must be a list of {name, low, high} objects")
    names, lows, highs = [], [], []
    for var in raw:
        if not isinstance(var, dict):
            raise SpecError("continuous variables must be objects")
        unknown = set(var) - _VAR_KEYS
        if unknown:
            raise SpecError(f"unknown variable fields: {sorted(unknown)}")
        try:
            names.append(str(var["name"]))
            lows.append(float(var["low"]))
            highs.append(float(var["high"]))
        except KeyError as exc:
            raise SpecError(f"variable is missing {exc.args[0]!r}") from None
        except (TypeError, ValueError):
            raise SpecError(f"non-numeric bounds for variable {var.get('name')!r}") from None
    return ContinuousBlock(tuple(names), np.array(lows), np.array(highs))


def _check_vertex_obj(obj, where):
    if not isinstance(obj, dict):
        raise SpecError(f"vertex at {where} must be an object")
    unknown = set(obj) - _VERTEX_KEYS
    if unknown:
        raise SpecError(f"unknown fields at {where}: {sorted(unknown)}")
    children = obj.get("children") or {}
    if isinstance(children, list):
        # JSON objects cannot hold duplicate keys, so the list form
        # [[label, vertex], ...] is how repeated labels reach us.
        pairs = children
    elif isinstance(children, dict):
        pairs = list(children.items())
    else:
        raise SpecError(f"'children' at {where} must be an object")
    labels = [str(p[0]) for p in pairs]
    if len(set(labels)) != len(labels):
        raise SpecError(f"duplicate child labels at {where}: {labels}")
    return [(str(label), child) for label, child in pairs]


def _build(raw_vertices, child_lists, root_key) -> TreeSpec:
    """BFS over a keyed vertex table, assigning ids and checking tree shape."""
    order = []
    parent_of = {root_key: None}
    label_of = {root_key: None}
    queue = deque([root_key])
    while queue:
        key = queue.popleft()
        order.append(key)
        for label, child in child_lists[key]:
            if child not in raw_vertices:
                raise SpecError(f"unknown child vertex {child!r}")
            if child in parent_of:
                raise SpecError(f"vertex {child!r} has several parents or lies on a cycle")
            parent_of[child] = key
            label_of[child] = label
            queue.append(child)
    unreachable = set(raw_vertices) - set(order)
    if unreachable:
        raise SpecError(f"vertices not reachable from the root: {sorted(map(str, unreachable))}")
    ids = {key: i for i, key in enumerate(order)}
    vertices = []
    used_names: set[str] = set()
    for key in order:
        obj = raw_vertices[key]
        block = _parse_block(obj.get("continuous"))
        clash = used_names.intersection(block.names)
        if clash:
            raise SpecError(f"variable names must be unique in the space: {sorted(clash)}")
        used_names.update(block.names)
        vertices.append(
            Vertex(
                id=ids[key],
                block=block,
                children={label: ids[c] for label, c in child_lists[key]},
                parent=None if parent_of[key] is None else ids[parent_of[key]],
                label=label_of[key],
                name=obj.get("name"),
            )
        )
    return TreeSpec(vertices)


def _unique_keys(pairs):
    keys = [k for k, _ in pairs]
    dup = {k for k in keys if keys.count(k) > 1}
    if dup:
        raise SpecError(f"duplicate keys (child labels or fields): {sorted(dup)}")
    return dict(pairs)


def parse_spec(source) -> TreeSpec:
    """Parse a tree-space document.

    ``source`` is JSON text or an already-decoded object. Two layouts are
    accepted. The nested layout is a vertex object (optionally wrapped as
    ``{"root": {...}}``) whose ``children`` map labels to nested vertex
    objects. The flat layout ``{"root": key, "vertices": {key: vertex}}``
    refers to children by key.

    Raises
    ------
    SpecError
        On duplicate labels, cycles, vertices with several parents, empty or
        inverted bounds, and unknown fields.
    """
    if isinstance(source, (str, bytes)):
        try:
            source = json.loads(source, object_pairs_hook=_unique_keys)
        except json.JSONDecodeError as exc:
            raise SpecError(f"invalid JSON: {exc}") from None
    if not isinstance(source, dict):
        raise SpecError("a tree space document must be an object")

    if "vertices" in source:
        unknown = set(source) - {"root", "vertices"}
        if unknown:
            raise SpecError(f"unknown top-level fields: {sorted(unknown)}")
        table = source["vertices"]
        if not isinstance(table, dict) or source.get("root") not in table:
            raise SpecError("flat layout needs a 'vertices' table containing 'root'")
        child_lists = {}
        for key, obj in table.items():
            pairs = _check_vertex_obj(obj, key)
            for _, child in pairs:
                if not isinstance(child, (str, int)):
                    raise SpecError("flat layout children must be vertex keys")
            child_lists[key] = [(label, str(child)) for label, child in pairs]
        return _build({str(k): v for k, v in table.items()}, child_lists, str(source["root"]))

    if set(source) == {"root"}:
        source = source["root"]
    table = {}
    child_lists = {}
    stack = [((), source)]
    while stack:
        key, obj = stack.pop()
        pairs = _check_vertex_obj(obj, "/" + "/".join(key))
        table[key] = obj
        child_lists[key] = [(label, key + (label,)) for label, _ in pairs]
        for label, child in pairs:
            stack.append((key + (label,), child))
    return _build(table, child_lists, ())


def load_spec(path: str | PathLike) -> TreeSpec:
    with open(path) as fh:
        return parse_spec(fh.read())


def spec_to_dict(spec: TreeSpec) -> dict:
    """Nested-layout document for a space (inverse of :func:`parse_spec`)."""

    def vertex(vid):
        v = spec.vertices[vid]
        out = {}
        if v.name is not None:
            out["name"] = v.name
        out["continuous"] = [
            {"name": n, "low": float(lo), "high": float(hi)}
            for n, lo, hi in zip(v.block.names, v.block.lows, v.block.highs)
        ]
        if v.children:
            out["children"] = {label: vertex(c) for label, c in v.children.items()}
        return out

    return vertex(spec.root)


# ---------------------------------------------------------------------------
# Dimensions and structure
# ---------------------------------------------------------------------------


def dimensions(spec: TreeSpec) -> tuple[int, list[int]]:
    """Ambient dimension and effective dimension of every leaf.

    The ambient dimension counts every continuous variable plus one per
    categorical variable (each branching vertex). The effective dimension of
    a leaf is the continuous dimension summed along its path.
    """
    ambient = sum(v.dim for v in spec.vertices) + len(spec.branching_vertices)
    effective = [sum(spec.vertices[v].dim for v in path) for path in spec.paths]
    return ambient, effective


def shared_prefix(spec: TreeSpec, path_i: int, path_j: int) -> list[int]:
    """Vertices from the root down to the lowest common ancestor of two leaves."""
    a, b = spec.paths[path_i], spec.paths[path_j]
    out = []
    for u, v in zip(a, b):
        if u != v:
            break
        out.append(u)
    return out


# ---------------------------------------------------------------------------
# Linear tag-slot encoding
# ---------------------------------------------------------------------------


def _sentinel(uid: int, vid: int, n_vertices: int, on_path: bool) -> float:
    # Negative, hence disjoint from sibling ranks; odd/even codes keep
    # on-path block-less vertices distinguishable from off-path ones.
    code = uid * n_vertices + vid
    return -float(2 * code + (2 if on_path else 1))


def is_sentinel(tag: float) -> bool:
    return tag < 0


def slot_layout(spec: TreeSpec) -> list[tuple[int, int]]:
    """``(tag_slot, first_value_slot)`` for every vertex in BFS order."""
    out, pos = [], 0
    for v in spec.vertices:
        out.append((pos, pos + 1))
        pos += 1 + v.dim
    return out


def linearize(spec: TreeSpec, p: StructuredPoint, uid: int = 0) -> np.ndarray:
    """Flat BFS tag-slot vector of a point.

    Each vertex contributes its tag followed by its values. On-path vertices
    with a block carry their sibling rank and their values. Off-path and
    block-less vertices carry a negative sentinel unique to ``(uid, vertex)``;
    off-path values are NaN.
    """
    if uid < 0:
        raise ValueError("uid must be non-negative")
    i = spec.validate(p)
    n_slots = spec.n_vertices + sum(v.dim for v in spec.vertices)
    out = np.full(n_slots, np.nan)
    for v, (tag_pos, start) in zip(spec.vertices, slot_layout(spec)):
        on = spec.on_path(i, v.id)
        if on and v.dim:
            out[tag_pos] = spec.rank(v.id)
            out[start : start + v.dim] = p.values[v.id]
        else:
            out[tag_pos] = _sentinel(uid, v.id, spec.n_vertices, on)
    return out


def delinearize(spec: TreeSpec, lp) -> StructuredPoint:
    """Inverse of :func:`linearize` (the uid is discarded)."""
    lp = np.asarray(lp, dtype=float).reshape(-1)
    n_slots = spec.n_vertices + sum(v.dim for v in spec.vertices)
    if lp.size != n_slots:
        raise PointError(f"expected {n_slots} slots, got {lp.size}")
    on = np.zeros(spec.n_vertices, dtype=bool)
    values = {}
    for v, (tag_pos, start) in zip(spec.vertices, slot_layout(spec)):
        tag = lp[tag_pos]
        if not np.isfinite(tag):
            raise PointError(f"non-finite tag at vertex {v.id}")
        if tag >= 0:
            if not v.dim or tag != spec.rank(v.id):
                raise PointError(f"tag {tag} inconsistent with vertex {v.id}")
            on[v.id] = True
            values[v.id] = lp[start : start + v.dim].copy()
        elif int(-tag) % 2 == 0:
            on[v.id] = True
    matches = [i for i in range(spec.n_paths) if np.array_equal(spec.membership[i], on)]
    if len(matches) != 1:
        raise PointError("slots are inconsistent with every path")
    path = spec.paths[matches[0]]
    choices = {a: spec.vertices[b].label for a, b in zip(path[:-1], path[1:])}
    p = StructuredPoint(choices, values)
    spec.validate(p)
    return p


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_uniform(spec: TreeSpec, rng: np.random.Generator) -> StructuredPoint:
    """Uniform categorical choices down the tree, uniform values in each box."""
    vid = spec.root
    choices, values = {}, {}
    while True:
        v = spec.vertices[vid]
        if v.dim:
            values[vid] = rng.uniform(v.block.lows, v.block.highs)
        if not v.children:
            break
        labels = list(v.children)
        label = labels[int(rng.integers(len(labels)))]
        choices[vid] = label
        vid = v.children[label]
    return StructuredPoint(choices, values)
