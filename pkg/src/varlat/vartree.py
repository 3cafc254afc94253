"""Variance trees over a dynamic call tree, and factor ranking.

Every root invocation is one sample. Inside a sample, invocations are
collapsed into a calling-context tree keyed by :data:`NodePath` (the chain of
``(func_id, site_tag)`` pairs from the root), summing repeated calls of the
same child within one parent. For a parent path P the columns are P's child
paths plus P's body, and each row sums to P's duration, so

    Var(P) = sum_i Var(X_i) + 2 sum_{i<j} Cov(X_i, X_j)

holds exactly on every row set. The tree applies this recursively from the
root; all matrices inside one tree share the full set of root samples (a path
that is absent from a sample contributes zeros), which makes every
contribution a share of the same root variance.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .metrics import covariance_matrix
from .tracefmt import Forest, FunctionRegistry, Invocation

BODY = -1

NodePath = tuple  # tuple[tuple[int, int], ...]


class InsufficientSamplesError(ValueError):
    pass


class UnknownNodeError(KeyError):
    pass


def body_path(parent: NodePath) -> NodePath:
    return parent + ((BODY, 0),)


def is_body(path: NodePath) -> bool:
    return path[-1][0] == BODY


def root_path(func_id: int) -> NodePath:
    return ((func_id, 0),)


@dataclass(frozen=True)
class SelectionParams:
    k: int = 5
    d: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"d must be in [0, 1], got {self.d}")


def _collapse(inv: Invocation, path: NodePath, out: dict) -> None:
    out[path] = out.get(path, 0) + inv.duration
    for child in inv.children:
        _collapse(child, path + ((child.func_id, child.site_tag),), out)


class RootSamples:
    """Collapsed per-sample path durations for one root function."""

    def __init__(self, invocations: Sequence[Invocation], root_func: int):
        self.root_func = root_func
        self.root = root_path(root_func)
        self.samples: list[dict] = []
        for inv in invocations:
            out: dict = {}
            _collapse(inv, self.root, out)
            self.samples.append(out)
        self._children: dict = defaultdict(set)
        for s in self.samples:
            for path in s:
                if len(path) > 1:
                    self._children[path[:-1]].add(path)

    @classmethod
    def from_forest(cls, forest: Forest, root_func: int) -> "RootSamples":
        invs = []
        for tid in sorted(forest):
            for inv in forest[tid]:
                if inv.func_id == root_func:
                    invs.append((inv.start_ns, tid, inv))
        invs.sort(key=lambda t: (t[0], t[1]))
        return cls([inv for _, _, inv in invs], root_func)

    def __len__(self) -> int:
        return len(self.samples)

    def children(self, path: NodePath) -> list:
        return sorted(self._children.get(path, ()))

    def observed(self, path: NodePath) -> bool:
        return any(path in s for s in self.samples)

    def durations(self, path: NodePath) -> np.ndarray:
        return np.array([s.get(path, 0) for s in self.samples], dtype=np.float64)


@dataclass
class SampleMatrix:
    node: NodePath
    columns: list
    values: np.ndarray
    rows: list = field(default_factory=list)

    @property
    def parent_durations(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def column(self, path: NodePath) -> np.ndarray:
        return self.values[:, self.columns.index(path)]


def build_sample_matrix(source, parent: NodePath, fill_absent: bool = False) -> SampleMatrix:
    """Per-sample child durations (plus body) of ``parent``.

    ``source`` is a :class:`Forest` or a precomputed :class:`RootSamples`.
    Samples in which ``parent`` never ran contribute no row, unless
    ``fill_absent`` is set, in which case they contribute a row of zeros.
    """
    parent = tuple(tuple(p) for p in parent)
    if isinstance(source, RootSamples):
        rs = source
        if rs.root_func != parent[0][0]:
            raise UnknownNodeError(f"path does not start at root {rs.root_func}")
    else:
        rs = RootSamples.from_forest(source, parent[0][0])
    kids = rs.children(parent)
    columns = kids + [body_path(parent)]
    rows, data = [], []
    for i, s in enumerate(rs.samples):
        total = s.get(parent)
        if total is None:
            if not fill_absent:
                continue
            total = 0
        cells = [s.get(c, 0) for c in kids]
        cells.append(total - sum(cells))
        rows.append(i)
        data.append(cells)
    observed = any(parent in s for s in rs.samples)
    if not observed:
        raise UnknownNodeError(f"path {parent} never observed")
    if len(rows) < 2:
        raise InsufficientSamplesError(
            f"insufficient samples: {len(rows)} for {parent} (need at least 2)"
        )
    return SampleMatrix(parent, columns, np.array(data, dtype=np.float64), rows)


@dataclass
class VarianceNode:
    kind: str  # "var" or "cov"
    parent: NodePath
    paths: tuple
    value: float
    contribution: float


def decompose_variance(matrix: SampleMatrix, root_variance: float | None = None) -> list[VarianceNode]:
    """Var term per column and Cov term per unordered column pair.

    A Cov node's ``value`` is the covariance itself; its ``contribution`` is
    its share of the root variance, ``2 * Cov / Var(root)``. When
    ``root_variance`` is omitted the parent is treated as the root.
    """
    C = covariance_matrix(matrix.values)
    if root_variance is None:
        root_variance = float(np.var(matrix.parent_durations))
    scale = 1.0 / root_variance if root_variance > 0 else 0.0
    cols = matrix.columns
    nodes = []
    for i, ci in enumerate(cols):
        v = max(float(C[i, i]), 0.0)
        nodes.append(VarianceNode("var", matrix.node, (ci,), v, v * scale))
    for i in range(len(cols)):
        for j in range(i + 1, len(cols)):
            v = float(C[i, j])
            nodes.append(VarianceNode("cov", matrix.node, (cols[i], cols[j]), v, 2.0 * v * scale))
    return nodes


@dataclass
class Heights:
    paths: dict
    funcs: dict
    graph: int

    def of(self, unit) -> int:
        func, body = unit
        if body:
            return 0
        return self.funcs.get(func, 0)


def compute_heights(source, root_func: int | None = None, expand: Iterable[int] | None = None) -> Heights:
    """Heights of the observed call tree: leaves are 0, parents 1 + max(child).

    ``source`` is a Forest or a list of invocations. With ``root_func`` only
    top-level invocations of that function are considered. With ``expand``,
    children of functions outside that set are ignored, so unexpanded
    functions get the provisional height 0.
    """
    if isinstance(source, dict):
        invs = [inv for tid in sorted(source) for inv in source[tid]]
    else:
        invs = list(source)
    if root_func is not None:
        invs = [inv for inv in invs if inv.func_id == root_func]
    expand = None if expand is None else set(expand)
    paths: dict = {}
    funcs: dict = {}

    def visit(inv: Invocation, path: NodePath) -> int:
        h = 0
        if expand is None or inv.func_id in expand:
            for c in inv.children:
                h = max(h, 1 + visit(c, path + ((c.func_id, c.site_tag),)))
        if h > paths.get(path, -1):
            paths[path] = h
        if h > funcs.get(inv.func_id, -1):
            funcs[inv.func_id] = h
        return h

    graph = 0
    for inv in invs:
        graph = max(graph, visit(inv, root_path(inv.func_id)))
    return Heights(paths, funcs, graph)


def _unit(path: NodePath) -> tuple:
    if is_body(path):
        return (path[-2][0], True)
    return (path[-1][0], False)


@dataclass
class Factor:
    kind: str  # "var" or "cov"
    units: tuple  # ((func_id, is_body),) or a sorted pair
    total_value: float = 0.0
    contribution: float = 0.0
    height: int = 0
    specificity: int = 0
    score: float = 0.0
    sites: int = 0
    label: str = ""

    @property
    def is_variance(self) -> bool:
        return self.kind == "var"

    @property
    def func_id(self) -> int | None:
        if self.kind == "var" and not self.units[0][1]:
            return self.units[0][0]
        return None

    @property
    def key(self) -> tuple:
        return (self.kind, self.units)


def unit_name(unit, registry: FunctionRegistry | None = None) -> str:
    func, body = unit
    name = registry.name(func) if registry is not None else f"f{func}"
    return f"body({name})" if body else name


def factor_label(kind: str, units, registry: FunctionRegistry | None = None) -> str:
    names = ",".join(unit_name(u, registry) for u in units)
    return f"{'Var' if kind == 'var' else 'Cov'}({names})"


@dataclass
class VarianceTree:
    root: NodePath
    n_samples: int
    root_variance: float
    nodes: dict  # parent path -> list[VarianceNode]
    heights: Heights
    registry: FunctionRegistry | None = None
    samples: RootSamples | None = None

    def all_nodes(self) -> list[VarianceNode]:
        return [n for parent in self.nodes for n in self.nodes[parent]]

    def decomposed_funcs(self) -> set:
        return {p[-1][0] for p in self.nodes}

    def body_share(self, func_id: int) -> float | None:
        """Fraction of ``func_id``'s variance carried by its body term, over all its sites."""
        total = body = 0.0
        for parent, nodes in self.nodes.items():
            if parent[-1][0] != func_id:
                continue
            for n in nodes:
                if n.kind == "var" and is_body(n.paths[0]):
                    body += n.value
            total += float(np.var(self.samples.durations(parent))) if self.samples else 0.0
        if total <= 0:
            return None
        return body / total


def build_tree(
    source,
    root_func: int,
    expand: Iterable[int] | None = None,
    registry: FunctionRegistry | None = None,
) -> VarianceTree:
    """Decompose the root's variance recursively.

    Only paths whose function is in ``expand`` are broken down (all paths
    with observed children when ``expand`` is None).
    """
    rs = source if isinstance(source, RootSamples) else RootSamples.from_forest(source, root_func)
    if len(rs) < 2:
        raise InsufficientSamplesError(
            f"insufficient samples: {len(rs)} root invocations (need at least 2)"
        )
    expand_set = None if expand is None else set(expand)
    root_var = float(np.var(rs.durations(rs.root)))
    nodes: dict = {}
    queue = [rs.root]
    while queue:
        path = queue.pop(0)
        if expand_set is not None and path[-1][0] not in expand_set:
            continue
        if not rs.children(path):
            continue
        m = build_sample_matrix(rs, path, fill_absent=True)
        nodes[path] = decompose_variance(m, root_var)
        queue.extend(c for c in m.columns if not is_body(c))
    invs = _root_invocations(source, root_func)
    heights = compute_heights(invs, root_func, expand_set) if invs is not None else _heights_from_nodes(rs.root, nodes)
    return VarianceTree(rs.root, len(rs), root_var, nodes, heights, registry, rs)


def _root_invocations(source, root_func):
    if isinstance(source, RootSamples):
        return None
    return [inv for tid in sorted(source) for inv in source[tid] if inv.func_id == root_func]


def _heights_from_nodes(root: NodePath, nodes: dict) -> Heights:
    paths: dict = {}
    funcs: dict = {}

    def visit(path):
        h = 0
        for n in nodes.get(path, ()):
            if n.kind == "var" and not is_body(n.paths[0]):
                h = max(h, 1 + visit(n.paths[0]))
        paths[path] = max(paths.get(path, 0), h)
        funcs[path[-1][0]] = max(funcs.get(path[-1][0], 0), h)
        return h

    return Heights(paths, funcs, visit(root))


def aggregate_factors(tree: VarianceTree | Iterable[VarianceNode], heights: Heights | None = None,
                      registry: FunctionRegistry | None = None) -> list[Factor]:
    """Sum node values per function (or function pair) over all call sites and score them.

    ``score = (H - height)^2 * total_value`` with H the call-graph height and,
    for a covariance factor, height the larger of its two functions' heights.
    """
    if isinstance(tree, VarianceTree):
        nodes = tree.all_nodes()
        heights = heights or tree.heights
        registry = registry or tree.registry
    else:
        nodes = list(tree)
        if heights is None:
            raise ValueError("heights are required when passing bare nodes")
    acc: dict = {}
    for n in nodes:
        units = tuple(sorted(_unit(p) for p in n.paths))
        key = (n.kind, units)
        f = acc.get(key)
        if f is None:
            f = acc[key] = Factor(n.kind, units)
        f.total_value += n.value
        f.contribution += n.contribution
        f.sites += 1
    out = []
    for f in acc.values():
        f.height = max(heights.of(u) for u in f.units)
        f.specificity = (heights.graph - f.height) ** 2
        f.score = f.specificity * f.total_value
        f.label = factor_label(f.kind, f.units, registry)
        out.append(f)
    return rank(out)


def rank(factors: Iterable[Factor]) -> list[Factor]:
    """Descending score; ties by higher contribution, then label."""
    return sorted(factors, key=lambda f: (-f.score, -f.contribution, f.label))


def select_factors(tree, params: SelectionParams) -> list[Factor]:
    """Take the k highest-scoring factors, keeping those with contribution >= d."""
    factors = aggregate_factors(tree) if isinstance(tree, VarianceTree) else rank(tree)
    return [f for f in factors[: params.k] if f.contribution >= params.d]


def factor_record(f: Factor) -> dict:
    return {
        "identity": f.label,
        "kind": f.kind,
        "total_value": f.total_value,
        "contribution": f.contribution,
        "height": f.height,
        "specificity": f.specificity,
        "score": f.score,
    }


def report(tree: VarianceTree, factors: Sequence[Factor]) -> dict:
    reg = tree.registry
    root_name = reg.name(tree.root[0][0]) if reg is not None else f"f{tree.root[0][0]}"
    return {
        "root": root_name,
        "n_samples": tree.n_samples,
        "root_variance_ns2": tree.root_variance,
        "factors": [factor_record(f) for f in factors],
    }


REPORT_COLUMNS = ["identity", "kind", "total_value", "contribution", "height", "specificity", "score"]


def report_csv(rep: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rep["factors"]:
        w.writerow(row)
    return buf.getvalue()


def analyze(forest: Forest, registry: FunctionRegistry, root: int | str, params: SelectionParams,
            expand: Iterable[int] | None = None) -> tuple[VarianceTree, list[Factor]]:
    root_id = registry.id_of(root) if isinstance(root, str) else root
    tree = build_tree(forest, root_id, expand=expand, registry=registry)
    return tree, select_factors(tree, params)
