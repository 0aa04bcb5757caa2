"""
Exact Finite Filtration Engine
Uniform trees with adapted and predictable processes, brackets, stochastic integrals and stopping times
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from components.errors import (
    EnumerationLimitError,
    NotMartingaleError,
    ShapeMismatchError,
    TreeStructureError,
)

logger = logging.getLogger(__name__)

PROBABILITY_TOL = 1e-14
MARTINGALE_TOL = 1e-12
DEGENERATE_VARIANCE = 1e-28
ENUMERATION_LIMIT = 250_000

Node = Tuple[int, int]


class ProcessKind(Enum):
    ADAPTED = "adapted"
    PREDICTABLE = "predictable"


@dataclass(frozen=True, eq=False)
class TreeFiltration:
    """Uniform tree of depth T and branching B; level k holds B**k nodes.

    Node j at level k has children j*B + b, b = 0..B-1. ``probabilities[k]``
    has shape (B**k, B) and holds the transition probabilities out of level k.
    """
    depth: int
    branching: int
    probabilities: Tuple[np.ndarray, ...]
    dt: Optional[float] = None

    def __post_init__(self):
        if self.depth < 1:
            raise TreeStructureError(f"depth must be >= 1, got {self.depth}")
        if self.branching < 2:
            raise TreeStructureError(f"branching must be >= 2, got {self.branching}")
        if len(self.probabilities) != self.depth:
            raise TreeStructureError(
                f"expected {self.depth} probability levels, got {len(self.probabilities)}"
            )
        probs = []
        for k, level in enumerate(self.probabilities):
            level = np.asarray(level, dtype=float)
            if level.shape != (self.branching ** k, self.branching):
                raise TreeStructureError(
                    f"level {k}: probability table has shape {level.shape}, "
                    f"expected {(self.branching ** k, self.branching)}"
                )
            if np.any(level <= 0.0):
                j = int(np.argwhere(level <= 0.0)[0][0])
                raise TreeStructureError(f"non-positive transition probability at node {(k, j)}")
            sums = level.sum(axis=1)
            bad = np.abs(sums - 1.0) > PROBABILITY_TOL * self.branching
            if np.any(bad):
                j = int(np.argmax(bad))
                raise TreeStructureError(f"probabilities at node {(k, j)} sum to {sums[j]!r}")
            level.setflags(write=False)
            probs.append(level)
        object.__setattr__(self, "probabilities", tuple(probs))
        if self.dt is None:
            object.__setattr__(self, "dt", 1.0 / self.depth)

    def level_size(self, k: int) -> int:
        return self.branching ** k

    @property
    def n_leaves(self) -> int:
        return self.branching ** self.depth

    @property
    def node_count(self) -> int:
        return sum(self.level_size(k) for k in range(self.depth + 1))

    def nodes(self) -> Iterator[Node]:
        for k in range(self.depth + 1):
            for j in range(self.level_size(k)):
                yield (k, j)

    def children(self, node: Node) -> List[Tuple[Node, float]]:
        """Ordered child list with transition probabilities"""
        k, j = node
        if k >= self.depth:
            return []
        return [((k + 1, j * self.branching + b), float(self.probabilities[k][j, b]))
                for b in range(self.branching)]

    def expand(self, values: np.ndarray) -> np.ndarray:
        """Copy level-k node values onto their children at level k+1"""
        return np.repeat(values, self.branching, axis=0)

    def average(self, child_values: np.ndarray, k: int) -> np.ndarray:
        """Probability-weighted child average E[x_{k+1} | F_k]"""
        nk = self.level_size(k)
        grouped = child_values.reshape((nk, self.branching) + child_values.shape[1:])
        return np.einsum("jb,jb...->j...", self.probabilities[k], grouped)

    @cached_property
    def _node_probabilities(self) -> Tuple[np.ndarray, ...]:
        levels = [np.ones(1)]
        for k in range(self.depth):
            levels.append((levels[-1][:, None] * self.probabilities[k]).reshape(-1))
        return tuple(levels)

    def node_probabilities(self, k: int) -> np.ndarray:
        return self._node_probabilities[k]

    def leaf_probabilities(self) -> np.ndarray:
        return self._node_probabilities[self.depth]

    def expectation(self, leaf_values: np.ndarray) -> Any:
        return np.tensordot(self.leaf_probabilities(), leaf_values, axes=(0, 0))

    @cached_property
    def path_nodes(self) -> np.ndarray:
        """(n_leaves, T+1) array: node index at each level along every root-to-leaf path"""
        leaves = np.arange(self.n_leaves)
        return np.stack(
            [leaves // self.branching ** (self.depth - k) for k in range(self.depth + 1)], axis=1
        )

    def times(self) -> np.ndarray:
        return np.arange(self.depth + 1) * self.dt

    def to_graph(self) -> nx.DiGraph:
        G = nx.DiGraph()
        for node in self.nodes():
            G.add_node(node, level=node[0])
            for child, prob in self.children(node):
                G.add_edge(node, child, probability=prob)
        return G

    @classmethod
    def uniform(cls, depth: int, branching: int, dt: Optional[float] = None) -> "TreeFiltration":
        probs = tuple(np.full((branching ** k, branching), 1.0 / branching) for k in range(depth))
        return cls(depth=depth, branching=branching, probabilities=probs, dt=dt)


@dataclass(frozen=True, eq=False)
class TreeProcess:
    """One value per node; predictable processes carry levels 0..T-1 only"""
    tree: TreeFiltration
    values: Tuple[np.ndarray, ...]
    kind: ProcessKind = ProcessKind.ADAPTED

    def __post_init__(self):
        n_levels = self.tree.depth + (1 if self.kind == ProcessKind.ADAPTED else 0)
        if len(self.values) != n_levels:
            raise ShapeMismatchError(
                f"{self.kind.value} process needs {n_levels} levels, got {len(self.values)}"
            )
        arrays = tuple(np.asarray(v) for v in self.values)
        entry = arrays[0].shape[1:] if arrays[0].ndim else None
        for k, arr in enumerate(arrays):
            if arr.ndim == 0 or arr.shape[0] != self.tree.level_size(k):
                raise ShapeMismatchError(
                    f"level {k} holds {arr.shape[:1]} nodes, expected {self.tree.level_size(k)}"
                )
            if arr.shape[1:] != entry:
                raise ShapeMismatchError(f"level {k} entry shape {arr.shape[1:]} differs from {entry}")
        object.__setattr__(self, "values", arrays)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values[0].shape[1:]

    @property
    def terminal(self) -> np.ndarray:
        if self.kind != ProcessKind.ADAPTED:
            raise ShapeMismatchError("predictable processes have no terminal level")
        return self.values[-1]

    @property
    def is_complex(self) -> bool:
        return any(np.iscomplexobj(v) for v in self.values)

    @classmethod
    def constant(cls, tree: TreeFiltration, value: Any,
                 kind: ProcessKind = ProcessKind.ADAPTED) -> "TreeProcess":
        value = np.asarray(value)
        n_levels = tree.depth + (1 if kind == ProcessKind.ADAPTED else 0)
        return cls(tree, tuple(np.broadcast_to(value, (tree.level_size(k),) + value.shape).copy()
                               for k in range(n_levels)), kind)

    @classmethod
    def from_function(cls, tree: TreeFiltration, fn: Callable[[int], np.ndarray],
                      kind: ProcessKind = ProcessKind.ADAPTED) -> "TreeProcess":
        n_levels = tree.depth + (1 if kind == ProcessKind.ADAPTED else 0)
        return cls(tree, tuple(np.asarray(fn(k)) for k in range(n_levels)), kind)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TreeProcess":
        return TreeProcess(self.tree, tuple(fn(v) for v in self.values), self.kind)

    def predictable(self) -> "TreeProcess":
        """Left values X_{k} driving the step k -> k+1"""
        if self.kind == ProcessKind.PREDICTABLE:
            return self
        return TreeProcess(self.tree, self.values[:-1], ProcessKind.PREDICTABLE)

    def along_paths(self) -> np.ndarray:
        """(n_leaves, levels, *shape) view of the process along every path"""
        paths = self.tree.path_nodes
        return np.stack([v[paths[:, k]] for k, v in enumerate(self.values)], axis=1)

    def magnitude(self) -> "TreeProcess":
        """Euclidean norm of each entry (operator 2-norm for matrices)"""
        return self.map(lambda v: _entry_norm(v))

    def running_max(self) -> "TreeProcess":
        levels = [_entry_norm(self.values[0])]
        for k in range(1, len(self.values)):
            levels.append(np.maximum(self.tree.expand(levels[-1]), _entry_norm(self.values[k])))
        return TreeProcess(self.tree, tuple(levels), self.kind)

    def _combine(self, other: Any, op: Callable) -> "TreeProcess":
        if isinstance(other, TreeProcess):
            if other.kind != self.kind or other.tree.depth != self.tree.depth:
                raise ShapeMismatchError("processes must share tree and kind")
            return TreeProcess(self.tree, tuple(op(a, b) for a, b in zip(self.values, other.values)), self.kind)
        return TreeProcess(self.tree, tuple(op(a, other) for a in self.values), self.kind)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)


def _entry_norm(values: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        return np.abs(values)
    if values.ndim == 2:
        return np.linalg.norm(values, axis=1)
    return np.linalg.norm(values, ord=2, axis=(1, 2))


def _broadcast_product(a: np.ndarray, b: np.ndarray, lead: int) -> np.ndarray:
    """Elementwise product of per-node entries where either side may be scalar-valued"""
    sa, sb = a.shape[lead:], b.shape[lead:]
    if sa != sb and sa and sb:
        raise ShapeMismatchError(f"cannot multiply entries of shape {sa} and {sb}")
    if len(sa) < len(sb):
        a = a.reshape(a.shape + (1,) * len(sb))
    elif len(sb) < len(sa):
        b = b.reshape(b.shape + (1,) * len(sa))
    return a * b


@dataclass(frozen=True, eq=False)
class TreeMartingale:
    """Adapted process with the martingale property, plus its increments and brackets"""
    base: TreeProcess
    tol: float = MARTINGALE_TOL

    def __post_init__(self):
        if self.base.kind != ProcessKind.ADAPTED:
            raise NotMartingaleError("martingale base must be adapted")
        tree = self.base.tree
        scale = max(1.0, max(float(np.max(np.abs(v))) if v.size else 0.0 for v in self.base.values))
        for k in range(tree.depth):
            gap = np.abs(tree.average(self.base.values[k + 1], k) - self.base.values[k])
            if gap.size and np.max(gap) > self.tol * scale:
                j = int(np.unravel_index(np.argmax(gap), gap.shape)[0])
                raise NotMartingaleError(
                    f"martingale property fails at node {(k, j)} by {float(np.max(gap)):.3e}", node=(k, j)
                )

    @property
    def tree(self) -> TreeFiltration:
        return self.base.tree

    @property
    def values(self) -> Tuple[np.ndarray, ...]:
        return self.base.values

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.base.shape

    @property
    def initial(self) -> np.ndarray:
        return self.base.values[0][0]

    @property
    def terminal(self) -> np.ndarray:
        return self.base.terminal

    @cached_property
    def increments(self) -> Tuple[np.ndarray, ...]:
        """Per level k, array (B**k, B, *shape) of child value minus parent value"""
        tree = self.tree
        out = []
        for k in range(tree.depth):
            child = self.base.values[k + 1].reshape((tree.level_size(k), tree.branching) + self.shape)
            out.append(child - self.base.values[k][:, None])
        return tuple(out)

    @cached_property
    def step_bracket(self) -> TreeProcess:
        """Predictable conditional second moment E[|dM|^2 | F_k]"""
        tree = self.tree
        levels = []
        for k, inc in enumerate(self.increments):
            sq = np.abs(inc) ** 2
            sq = sq.reshape(sq.shape[:2] + (-1,)).sum(axis=2)
            levels.append(np.einsum("jb,jb->j", tree.probabilities[k], sq))
        return TreeProcess(tree, tuple(levels), ProcessKind.PREDICTABLE)

    @cached_property
    def bracket(self) -> TreeProcess:
        """Predictable bracket <M>, cumulated; level k value is known at level k-1"""
        return cumulate(self.step_bracket)

    @cached_property
    def optional_bracket(self) -> TreeProcess:
        """Pathwise [M] = sum of squared increments"""
        tree = self.tree
        levels = [np.zeros(1)]
        for inc in self.increments:
            sq = np.abs(inc) ** 2
            sq = sq.reshape(sq.shape[:2] + (-1,)).sum(axis=2).reshape(-1)
            levels.append(tree.expand(levels[-1]) + sq)
        return TreeProcess(tree, tuple(levels))

    def remaining_bracket(self) -> TreeProcess:
        """Node-wise E[<M>_T - <M>_{t(v)} | v] by backward recursion"""
        tree = self.tree
        step = self.step_bracket.values
        levels = [None] * (tree.depth + 1)
        levels[tree.depth] = np.zeros(tree.n_leaves)
        for k in range(tree.depth - 1, -1, -1):
            levels[k] = step[k] + tree.average(levels[k + 1], k)
        return TreeProcess(tree, tuple(levels))

    def scaled(self, c: Any) -> "TreeMartingale":
        return TreeMartingale(self.base * c, self.tol)

    def minus_initial(self) -> "TreeMartingale":
        return TreeMartingale(self.base - self.initial, self.tol)

    def __add__(self, other: "TreeMartingale") -> "TreeMartingale":
        return TreeMartingale(self.base + other.base, max(self.tol, other.tol))

    def __sub__(self, other: "TreeMartingale") -> "TreeMartingale":
        return TreeMartingale(self.base - other.base, max(self.tol, other.tol))

    @classmethod
    def from_increments(cls, tree: TreeFiltration, increments: Sequence[np.ndarray],
                        initial: Any = 0.0, tol: float = MARTINGALE_TOL) -> "TreeMartingale":
        initial = np.asarray(initial)
        levels = [np.broadcast_to(initial, (1,) + initial.shape).astype(np.result_type(initial, float))]
        for k, inc in enumerate(increments):
            inc = np.asarray(inc)
            flat = inc.reshape((tree.level_size(k + 1),) + inc.shape[2:])
            levels.append(tree.expand(levels[-1]) + flat)
        return cls(TreeProcess(tree, tuple(levels)), tol)

    @classmethod
    def from_terminal(cls, tree: TreeFiltration, leaf_values: np.ndarray,
                      tol: float = MARTINGALE_TOL) -> "TreeMartingale":
        return cls(conditional_expectation(leaf_values, tree=tree), tol)

    @classmethod
    def zero(cls, tree: TreeFiltration, shape: Tuple[int, ...] = ()) -> "TreeMartingale":
        return cls(TreeProcess.constant(tree, np.zeros(shape)))


def cumulate(step: TreeProcess) -> TreeProcess:
    """Turn a predictable step process into its adapted running sum starting at 0"""
    tree = step.tree
    levels = [np.zeros((1,) + step.shape, dtype=step.values[0].dtype)]
    for k in range(tree.depth):
        levels.append(tree.expand(levels[-1] + step.values[k]))
    return TreeProcess(tree, tuple(levels))


@dataclass(frozen=True, eq=False)
class TreeStoppingTime:
    """Stop flags per node; a path stops at its first flagged node"""
    tree: TreeFiltration
    flags: Tuple[np.ndarray, ...]

    def __post_init__(self):
        tree = self.tree
        if len(self.flags) != tree.depth + 1:
            raise ShapeMismatchError(f"stopping time needs {tree.depth + 1} flag levels")
        flags = tuple(np.asarray(f, dtype=bool).reshape(tree.level_size(k)) for k, f in enumerate(self.flags))
        object.__setattr__(self, "flags", flags)
        if not np.all(self.reached(tree.depth)):
            leaf = int(np.argmin(self.reached(tree.depth)))
            raise TreeStructureError(f"path to leaf {leaf} never stops")

    @cached_property
    def _reached(self) -> Tuple[np.ndarray, ...]:
        levels = [self.flags[0].copy()]
        for k in range(1, self.tree.depth + 1):
            levels.append(self.tree.expand(levels[-1]) | self.flags[k])
        return tuple(levels)

    def reached(self, k: int) -> np.ndarray:
        """Boolean per level-k node: tau <= k"""
        return self._reached[k]

    def stops_at(self, k: int) -> np.ndarray:
        """Boolean per level-k node: tau == k"""
        if k == 0:
            return self._reached[0]
        return self._reached[k] & ~self.tree.expand(self._reached[k - 1])

    def stopping_nodes(self) -> List[Node]:
        return [(k, int(j)) for k in range(self.tree.depth + 1) for j in np.flatnonzero(self.stops_at(k))]

    def stop_levels(self) -> np.ndarray:
        """Per-leaf stopping level"""
        reached = np.stack([r[self.tree.path_nodes[:, k]] for k, r in enumerate(self._reached)], axis=1)
        return np.argmax(reached, axis=1)

    def value_at(self, process: TreeProcess) -> np.ndarray:
        """Per-leaf X_tau"""
        paths = process.along_paths()
        return paths[np.arange(self.tree.n_leaves), self.stop_levels()]

    @classmethod
    def deterministic(cls, tree: TreeFiltration, level: int) -> "TreeStoppingTime":
        return cls(tree, tuple(np.full(tree.level_size(k), k == level) for k in range(tree.depth + 1)))

    @classmethod
    def from_nodes(cls, tree: TreeFiltration, nodes: Sequence[Node]) -> "TreeStoppingTime":
        flags = [np.zeros(tree.level_size(k), dtype=bool) for k in range(tree.depth + 1)]
        for k, j in nodes:
            flags[k][j] = True
        flags[tree.depth][:] = True
        return cls(tree, tuple(flags))

    @classmethod
    def hitting(cls, process: TreeProcess, predicate: Callable[[np.ndarray], np.ndarray]) -> "TreeStoppingTime":
        """First level where the predicate fires, else the horizon"""
        tree = process.tree
        flags = [np.asarray(predicate(process.values[k]), dtype=bool) for k in range(tree.depth + 1)]
        flags[tree.depth] = np.ones(tree.n_leaves, dtype=bool)
        return cls(tree, tuple(flags))


def stopped(process: TreeProcess, tau: TreeStoppingTime) -> TreeProcess:
    """The stopped process X^tau"""
    tree = process.tree
    levels = [process.values[0]]
    for k in range(tree.depth):
        frozen = tree.expand(tau.reached(k)).reshape((-1,) + (1,) * len(process.shape))
        levels.append(np.where(frozen, tree.expand(levels[-1]), process.values[k + 1]))
    return TreeProcess(tree, tuple(levels))


def _leaf_values(x: Union[TreeProcess, TreeMartingale, np.ndarray], tree: Optional[TreeFiltration]):
    if isinstance(x, TreeMartingale):
        x = x.base
    if isinstance(x, TreeProcess):
        return x.tree, x.terminal
    if tree is None:
        raise ShapeMismatchError("a raw terminal array needs the tree it lives on")
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[0] != tree.n_leaves:
        raise ShapeMismatchError(f"terminal array has {x.shape[:1]} entries, tree has {tree.n_leaves} leaves")
    return tree, x


def conditional_expectation(x: Union[TreeProcess, TreeMartingale, np.ndarray],
                            at: Union[None, int, TreeStoppingTime] = None,
                            tree: Optional[TreeFiltration] = None) -> TreeProcess:
    """E[x_T | F_{k ∧ at}] for every level k, by exact backward recursion.

    With ``at=None`` the result is the full martingale closing x_T; with a level
    or stopping time it is that martingale stopped there.
    """
    tree, leaves = _leaf_values(x, tree)
    dtype = np.result_type(leaves, float)
    levels = [None] * (tree.depth + 1)
    levels[tree.depth] = leaves.astype(dtype)
    for k in range(tree.depth - 1, -1, -1):
        levels[k] = tree.average(levels[k + 1], k)
    closed = TreeProcess(tree, tuple(levels))
    if at is None:
        return closed
    if isinstance(at, (int, np.integer)):
        if not 0 <= at <= tree.depth:
            raise ShapeMismatchError(f"level {at} outside 0..{tree.depth}")
        at = TreeStoppingTime.deterministic(tree, int(at))
    return stopped(closed, at)


def stochastic_integral(h: TreeProcess, m: TreeMartingale) -> TreeMartingale:
    """(h∘M)_v = sum over the path to v of h(parent)·dM; adapted h is used through its left values"""
    h = h.predictable()
    tree = m.tree
    if h.tree.depth != tree.depth or h.tree.branching != tree.branching:
        raise ShapeMismatchError("integrand and integrator live on different trees")
    levels = None
    for k, inc in enumerate(m.increments):
        step = _broadcast_product(h.values[k][:, None], inc, 2)
        if levels is None:
            levels = [np.zeros((1,) + step.shape[2:], dtype=step.dtype)]
        levels.append(tree.expand(levels[-1]) + step.reshape((-1,) + step.shape[2:]))
    return TreeMartingale(TreeProcess(tree, tuple(levels)), m.tol)


def step_covariation(x: TreeMartingale, y: TreeMartingale) -> TreeProcess:
    """Predictable E[dX dY | F_k] per node (bilinear, no conjugation)"""
    tree = x.tree
    levels = []
    for k, (dx, dy) in enumerate(zip(x.increments, y.increments)):
        prod = _broadcast_product(dx, dy, 2)
        levels.append(np.einsum("jb,jb...->j...", tree.probabilities[k], prod))
    return TreeProcess(tree, tuple(levels), ProcessKind.PREDICTABLE)


def covariation(x: TreeMartingale, y: TreeMartingale) -> TreeProcess:
    """Predictable bracket <X, Y> cumulated along paths"""
    if x.tree.depth != y.tree.depth or x.tree.branching != y.tree.branching:
        raise ShapeMismatchError("martingales live on different trees")
    return cumulate(step_covariation(x, y))


@dataclass
class KWDecomposition:
    z: TreeProcess
    n_perp: TreeMartingale
    degenerate_nodes: List[Node] = field(default_factory=list)


def kw_decompose(n: TreeMartingale, m: TreeMartingale,
                 degenerate_variance: float = DEGENERATE_VARIANCE) -> KWDecomposition:
    """n = n_0 + z∘m + n_perp with <m, n_perp> = 0; z = 0 where m does not move"""
    if m.shape != ():
        raise ShapeMismatchError("kw_decompose projects against a scalar martingale")
    tree = m.tree
    z_levels, perp_incs, degenerate = [], [], []
    for k, (dn, dm) in enumerate(zip(n.increments, m.increments)):
        var = np.einsum("jb,jb->j", tree.probabilities[k], np.abs(dm) ** 2)
        cov = np.einsum("jb,jb...->j...", tree.probabilities[k], _broadcast_product(dn, dm, 2))
        ok = var > degenerate_variance
        safe = np.where(ok, var, 1.0).reshape((-1,) + (1,) * len(n.shape))
        z = np.where(ok.reshape(safe.shape), cov / safe, 0.0)
        degenerate.extend((k, int(j)) for j in np.flatnonzero(~ok))
        z_levels.append(z)
        perp_incs.append(dn - _broadcast_product(z[:, None], dm, 2))
    if degenerate:
        logger.debug(f"kw_decompose: {len(degenerate)} degenerate nodes set to z=0")
    z_proc = TreeProcess(tree, tuple(z_levels), ProcessKind.PREDICTABLE)
    n_perp = TreeMartingale.from_increments(tree, perp_incs, np.zeros(n.shape), tol=max(n.tol, m.tol))
    return KWDecomposition(z=z_proc, n_perp=n_perp, degenerate_nodes=degenerate)


def sup_over_stopping_times(g: Union[TreeProcess, Sequence[np.ndarray]]) -> float:
    """sup over stopping times of the ess-sup of a node-wise conditional functional = max over nodes"""
    levels = g.values if isinstance(g, TreeProcess) else g
    return float(max(np.max(np.real(v)) for v in levels if np.size(v)))


def count_stopping_times(depth: int, branching: int) -> int:
    count = 1
    for _ in range(depth):
        count = 1 + count ** branching
    return count


def enumerate_stopping_times(tree: TreeFiltration,
                             limit: int = ENUMERATION_LIMIT) -> Iterator[TreeStoppingTime]:
    """Every stopping time of the tree, as an exhaustive oracle for small trees"""
    total = count_stopping_times(tree.depth, tree.branching)
    if total > limit:
        raise EnumerationLimitError(
            f"tree (depth={tree.depth}, branching={tree.branching}) has {total} stopping times > {limit}"
        )

    def subtree(k: int, j: int) -> List[List[Node]]:
        options = [[(k, j)]]
        if k < tree.depth:
            parts = [subtree(k + 1, j * tree.branching + b) for b in range(tree.branching)]
            for combo in itertools.product(*parts):
                options.append([node for part in combo for node in part])
        return options

    for nodes in subtree(0, 0):
        yield TreeStoppingTime.from_nodes(tree, nodes)


def sup_by_enumeration(tree: TreeFiltration,
                       conditional: Callable[[TreeStoppingTime], np.ndarray],
                       limit: int = ENUMERATION_LIMIT) -> float:
    """max over all stopping times of the ess-sup of a per-leaf F_tau-measurable functional"""
    best = -np.inf
    for tau in enumerate_stopping_times(tree, limit):
        best = max(best, float(np.max(np.real(conditional(tau)))))
    return best


# ---------------------------------------------------------------------------
# Construction, corpora and documents
# ---------------------------------------------------------------------------

TREE_GENERATORS = ("uniform", "random", "coin")


def random_tree(rng: np.random.Generator, depth: int, branching: int,
                generator: str = "random", dt: Optional[float] = None) -> TreeFiltration:
    if generator == "uniform":
        return TreeFiltration.uniform(depth, branching, dt)
    if generator == "coin":
        if branching != 2:
            raise TreeStructureError("coin trees are binary")
        return TreeFiltration.uniform(depth, 2, dt)
    if generator == "random":
        probs = []
        for k in range(depth):
            raw = rng.uniform(0.2, 1.0, size=(branching ** k, branching))
            probs.append(raw / raw.sum(axis=1, keepdims=True))
        return TreeFiltration(depth, branching, tuple(probs), dt)
    raise TreeStructureError(f"Unknown tree generator '{generator}'. Known: {', '.join(TREE_GENERATORS)}")


def random_martingale(tree: TreeFiltration, rng: np.random.Generator, scale: float = 1.0,
                      shape: Tuple[int, ...] = (), initial: Any = 0.0) -> TreeMartingale:
    """Centered Gaussian increments at every node"""
    incs = []
    for k in range(tree.depth):
        raw = rng.normal(size=(tree.level_size(k), tree.branching) + shape) * scale
        incs.append(raw - tree.average(raw.reshape((-1,) + shape), k)[:, None])
    return TreeMartingale.from_increments(tree, incs, np.broadcast_to(np.asarray(initial, float), shape))


def coin_martingale(depth: int = 1, step: float = 1.0) -> TreeMartingale:
    """Symmetric ±step walk on the fair binary tree"""
    tree = TreeFiltration.uniform(depth, 2)
    incs = [np.tile([step, -step], (tree.level_size(k), 1)) for k in range(depth)]
    return TreeMartingale.from_increments(tree, incs)


def random_predictable(tree: TreeFiltration, rng: np.random.Generator, low: float = -1.0,
                       high: float = 1.0, shape: Tuple[int, ...] = ()) -> TreeProcess:
    return TreeProcess.from_function(
        tree, lambda k: rng.uniform(low, high, size=(tree.level_size(k),) + shape), ProcessKind.PREDICTABLE
    )


def random_adapted(tree: TreeFiltration, rng: np.random.Generator, low: float = -1.0,
                   high: float = 1.0, shape: Tuple[int, ...] = ()) -> TreeProcess:
    return TreeProcess.from_function(
        tree, lambda k: rng.uniform(low, high, size=(tree.level_size(k),) + shape)
    )


@dataclass
class CorpusMember:
    corpus_id: str
    tree: TreeFiltration
    martingale: TreeMartingale


def seeded_corpus(n: int, depth: int, branching: int, seed: int,
                  generator: str = "random", scale: float = 1.0,
                  vary_depth: bool = False) -> List[CorpusMember]:
    """Deterministic corpus of random trees, each with a random scalar martingale.

    With ``vary_depth`` member depths cycle through 1..depth.
    """
    streams = np.random.SeedSequence(seed).spawn(n)
    members = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        d = 1 + i % depth if vary_depth else depth
        tree = random_tree(rng, d, branching, generator)
        members.append(CorpusMember(f"seed{seed}-{i}", tree, random_martingale(tree, rng, scale)))
    return members


def _node_id(node: Node) -> str:
    return f"{node[0]}:{node[1]}"


def tree_to_document(tree: TreeFiltration, martingale: Optional[TreeMartingale] = None) -> Dict[str, Any]:
    """JSON-ready document {depth, branching, dt, nodes, increments, initial}"""
    nodes = []
    for k, j in tree.nodes():
        entry = {"id": _node_id((k, j)), "parent": _node_id((k - 1, j // tree.branching)) if k else None}
        if k < tree.depth:
            entry["probabilities"] = tree.probabilities[k][j].tolist()
        nodes.append(entry)
    doc: Dict[str, Any] = {"depth": tree.depth, "branching": tree.branching, "dt": tree.dt, "nodes": nodes}
    if martingale is not None:
        if martingale.shape != () or np.iscomplexobj(martingale.terminal):
            raise ShapeMismatchError("only real scalar martingales are serialized")
        doc["initial"] = float(martingale.initial)
        doc["increments"] = {
            _node_id((k, j)): martingale.increments[k][j].tolist()
            for k in range(tree.depth) for j in range(tree.level_size(k))
        }
    return doc


def tree_from_document(doc: Dict[str, Any]) -> Tuple[TreeFiltration, Optional[TreeMartingale]]:
    """Rebuild and validate a tree document; rejects non-arborescences and non-uniform fan-out"""
    try:
        depth, branching = int(doc["depth"]), int(doc["branching"])
        nodes = doc["nodes"]
    except (KeyError, TypeError, ValueError) as e:
        raise TreeStructureError(f"malformed tree document: {e}")
    G = nx.DiGraph()
    for entry in nodes:
        G.add_node(entry["id"], probabilities=entry.get("probabilities"))
        if entry.get("parent") is not None:
            G.add_edge(entry["parent"], entry["id"])
    if G.number_of_nodes() == 0 or not nx.is_arborescence(G):
        raise TreeStructureError("tree document is not a rooted tree (one root, one parent per node)")
    probs = [np.zeros((branching ** k, branching)) for k in range(depth)]
    for node_id in G.nodes:
        try:
            k, j = (int(part) for part in str(node_id).split(":"))
        except ValueError:
            raise TreeStructureError(f"node id '{node_id}' is not of the form level:index")
        if k > depth or j >= branching ** k:
            raise TreeStructureError(f"node {node_id} outside a depth-{depth} tree")
        children = sorted(G.successors(node_id), key=lambda c: int(str(c).split(":")[1]))
        if k < depth:
            expected = [_node_id((k + 1, j * branching + b)) for b in range(branching)]
            if children != expected:
                raise TreeStructureError(f"node {node_id} must have children {expected}, has {children}")
            row = G.nodes[node_id].get("probabilities")
            if row is None or len(row) != branching:
                raise TreeStructureError(f"node {node_id} needs {branching} transition probabilities")
            probs[k][j] = row
        elif children:
            raise TreeStructureError(f"leaf {node_id} has children")
    if G.number_of_nodes() != sum(branching ** k for k in range(depth + 1)):
        raise TreeStructureError("tree document is missing nodes")
    tree = TreeFiltration(depth, branching, tuple(probs), doc.get("dt"))
    martingale = None
    if "increments" in doc:
        incs = [np.array([doc["increments"][_node_id((k, j))] for j in range(tree.level_size(k))], dtype=float)
                for k in range(depth)]
        martingale = TreeMartingale.from_increments(tree, incs, float(doc.get("initial", 0.0)))
    return tree, martingale
