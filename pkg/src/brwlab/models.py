"""Model zoo: the graph and rate families the library ships with.

Every constructor returns an immutable :class:`BrwModel`: a rate matrix over
a finite vertex window together with a root, per-vertex tags, a flag row
marking the truncation frontier, and enough provenance to rebuild the model
from a JSON document. Projection maps between models are first-class and
carry their own verification.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .ratematrix import ContractError, RateMatrix

__all__ = [
    "BrwModel",
    "ModelSpec",
    "OscillatingSequence",
    "PieceSpec",
    "ProjectionMap",
    "ProjectionReport",
    "MODEL_REGISTRY",
    "build_single_site",
    "build_regular_tree",
    "build_tree_with_lines",
    "build_star_of_lines",
    "build_bpve",
    "build_oscillating_sequence",
    "build_feedback_line",
    "build_example_finally",
    "build_periodic_tree_like",
    "build_from_spec",
    "dump_model_spec",
    "load_model_spec",
    "make_model_spec",
    "model_from_matrix",
    "project_onto_classes",
    "verify_projection",
]


# ---------------------------------------------------------------------------
# model specs (JSON round-trip) and the model record itself

@dataclass(frozen=True)
class ModelSpec:
    """Constructor name plus everything needed to rebuild the model.

    ``parameters`` holds the intrinsic parameters, ``truncation`` the window
    sizes; both stick to JSON-native types so a spec survives a round trip
    through text losslessly.
    """

    constructor: str
    parameters: dict
    truncation: dict


_SPEC_FIELDS = ("constructor", "parameters", "truncation")

# which keyword of each constructor describes the truncation window
_TRUNCATION_KEYS = {
    "single_site": (),
    "regular_tree": ("depth",),
    "tree_with_lines": ("tree_depth", "line_depth"),
    "star_of_lines": ("line_depth",),
    "bpve": ("length",),
    "feedback_line": ("length",),
    "example_finally": ("half_length",),
    "periodic_tree_like": ("depth",),
}


def make_model_spec(constructor: str, **kwargs) -> ModelSpec:
    """Split keyword arguments into intrinsic parameters and truncation."""
    if constructor not in _TRUNCATION_KEYS:
        raise ContractError(f"unknown constructor {constructor!r}")
    trunc = {}
    for key in _TRUNCATION_KEYS[constructor]:
        if key not in kwargs:
            raise ContractError(f"{constructor} spec is missing truncation key {key!r}")
        trunc[key] = kwargs.pop(key)
    return ModelSpec(constructor=constructor, parameters=kwargs, truncation=trunc)


def dump_model_spec(spec: ModelSpec) -> str:
    payload = {"constructor": spec.constructor, "parameters": spec.parameters, "truncation": spec.truncation}
    return json.dumps(payload, indent=2, sort_keys=True)


def load_model_spec(text: str) -> ModelSpec:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"model spec is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ContractError("model spec must be a JSON object")
    missing = [k for k in _SPEC_FIELDS if k not in payload]
    if missing:
        raise ContractError(f"model spec is missing fields {missing}")
    extra = set(payload) - set(_SPEC_FIELDS)
    if extra:
        raise ContractError(f"model spec has unknown fields {sorted(extra)}")
    return ModelSpec(payload["constructor"], payload["parameters"], payload["truncation"])


@dataclass(frozen=True, eq=False, repr=False)
class BrwModel:
    """A rate matrix with a root, per-vertex tags, and a truncation frontier.

    ``boundary`` marks vertices whose rows are incomplete because the window
    was cut there; analysis passes use it to exclude frontier rows. ``meta``
    carries constructor-specific derived data (coordinate arrays, validated
    bounds) and is treated as read-only.
    """

    matrix: RateMatrix
    root: int
    labels: tuple[str, ...]
    boundary: np.ndarray
    provenance: ModelSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        V = self.matrix.vertex_count
        if not (0 <= self.root < V):
            raise ContractError(f"root {self.root} outside window of size {V}")
        if len(self.labels) != V:
            raise ContractError("labels must tag every vertex")
        if self.boundary.shape != (V,) or self.boundary.dtype != np.bool_:
            raise ContractError("boundary must be a boolean flag per vertex")
        if self.boundary[self.root]:
            raise ContractError("root must not lie on the truncation frontier")
        self.boundary.flags.writeable = False

    @property
    def vertex_count(self) -> int:
        return self.matrix.vertex_count

    def __repr__(self) -> str:  # the default would print every label
        return f"BrwModel({self.provenance.constructor}, vertices={self.vertex_count}, root={self.root})"


def model_from_matrix(
    matrix: RateMatrix,
    root: int = 0,
    labels=None,
    boundary: np.ndarray | None = None,
    name: str = "custom",
    parameters: dict | None = None,
) -> BrwModel:
    """Wrap a bare rate matrix as a model; handy for ad-hoc windows."""
    V = matrix.vertex_count
    if labels is None:
        labels = tuple(f"vertex {i}" for i in range(V))
    if boundary is None:
        boundary = np.zeros(V, dtype=bool)
    spec = ModelSpec("custom", dict(parameters or {}, name=name), {})
    return BrwModel(matrix, root, tuple(labels), np.asarray(boundary, dtype=bool).copy(), spec)


# ---------------------------------------------------------------------------
# elementary constructors

def build_single_site(loop_rate: float) -> BrwModel:
    """One vertex with a loop; the universal one-point projection target."""
    loop_rate = float(loop_rate)
    if not (math.isfinite(loop_rate) and loop_rate > 0):
        raise ContractError("loop_rate must be positive and finite")
    spec = make_model_spec("single_site", loop_rate=loop_rate)
    K = RateMatrix.from_edges(1, [(0, 0, loop_rate)])
    return BrwModel(K, 0, ("origin",), np.zeros(1, dtype=bool), spec)


def _tree_levels(d: int, depth: int):
    """Level bookkeeping for a rooted tree where the root has d children
    and every later vertex d - 1; returns (V, level_start, level_size)."""
    level_start = [0, 1]
    level_size = [1, d]
    for _ in range(2, depth + 1):
        level_size.append(level_size[-1] * (d - 1))
        level_start.append(level_start[-1] + level_size[-2])
    return level_start[-1] + level_size[-1], level_start, level_size


def _tree_adjacency(d: int, depth: int):
    """Parent/child arrays for the rooted d-regular tree truncated at depth."""
    V, level_start, level_size = _tree_levels(d, depth)
    parents = [np.zeros(d, dtype=np.int64)]
    children = [np.arange(1, 1 + d, dtype=np.int64)]
    for l in range(2, depth + 1):
        prev = np.arange(level_start[l - 1], level_start[l - 1] + level_size[l - 1], dtype=np.int64)
        parents.append(np.repeat(prev, d - 1))
        children.append(np.arange(level_start[l], level_start[l] + level_size[l], dtype=np.int64))
    depth_of = np.empty(V, dtype=np.int64)
    for l in range(depth + 1):
        depth_of[level_start[l] : level_start[l] + level_size[l]] = l
    return V, np.concatenate(parents), np.concatenate(children), depth_of


def build_regular_tree(d: int, depth: int) -> BrwModel:
    """Adjacency rates on the degree-d tree, truncated at the given depth.

    The root has d neighbours, interior vertices d, leaves 1; leaves are
    flagged as the truncation frontier.
    """
    if d < 3:
        raise ContractError("degree d must be at least 3")
    if depth < 1:
        raise ContractError("depth must be at least 1")
    V, pa, ch, depth_of = _tree_adjacency(d, depth)
    src = np.concatenate([pa, ch])
    dst = np.concatenate([ch, pa])
    K = RateMatrix.from_arrays(V, src, dst, np.ones(src.size))
    names = [f"depth {l}" for l in range(depth + 1)]
    labels = tuple(names[l] for l in depth_of.tolist())
    depth_of.flags.writeable = False
    spec = make_model_spec("regular_tree", d=d, depth=depth)
    return BrwModel(K, 0, labels, depth_of == depth, spec, meta={"depth_of": depth_of})


def build_tree_with_lines(d: int, tree_depth: int, line_depth: int) -> BrwModel:
    """The degree-d tree with a two-sided line grafted onto every tree vertex.

    Tree vertices keep their adjacency edges and gain one neighbour on each
    side of their line; line ends and tree leaves form the frontier.
    """
    if d < 3:
        raise ContractError("degree d must be at least 3")
    if tree_depth < 1 or line_depth < 1:
        raise ContractError("tree_depth and line_depth must be at least 1")
    T, pa, ch, tdepth = _tree_adjacency(d, tree_depth)
    L = line_depth
    V = T * (1 + 2 * L)
    base = T + 2 * L * np.arange(T, dtype=np.int64)  # each tree vertex owns one block

    tree_ids = np.arange(T, dtype=np.int64)
    plus_first = base
    minus_first = base + L
    seg_src = [pa, tree_ids, tree_ids]
    seg_dst = [ch, plus_first, minus_first]
    if L > 1:
        j = np.arange(L - 1, dtype=np.int64)
        plus_all = (base[:, None] + j[None, :]).ravel()
        minus_all = (base[:, None] + L + j[None, :]).ravel()
        seg_src += [plus_all, minus_all]
        seg_dst += [plus_all + 1, minus_all + 1]
    s = np.concatenate(seg_src)
    t = np.concatenate(seg_dst)
    src = np.concatenate([s, t])
    dst = np.concatenate([t, s])
    K = RateMatrix.from_arrays(V, src, dst, np.ones(src.size))

    offset = np.zeros(V, dtype=np.int64)
    owner = np.empty(V, dtype=np.int64)
    owner[:T] = tree_ids
    block = np.arange(2 * L, dtype=np.int64)
    off_pattern = np.concatenate([block[:L] + 1, -(block[:L] + 1)])
    for tvx in range(T):
        lo = T + 2 * L * tvx
        offset[lo : lo + 2 * L] = off_pattern
        owner[lo : lo + 2 * L] = tvx
    tree_depth_of = tdepth[owner]
    boundary = (tree_depth_of == tree_depth) & (offset == 0)
    boundary |= np.abs(offset) == L
    labels = tuple(
        f"tree depth {k}" if m == 0 else f"tree depth {k}, line {m:+d}"
        for k, m in zip(tree_depth_of.tolist(), offset.tolist())
    )
    for arr in (offset, owner, tree_depth_of):
        arr.flags.writeable = False
    spec = make_model_spec("tree_with_lines", d=d, tree_depth=tree_depth, line_depth=line_depth)
    meta = {"line_offset": offset, "tree_vertex": owner, "tree_depth_of": tree_depth_of}
    return BrwModel(K, 0, labels, boundary, spec, meta=meta)


def build_star_of_lines(d: int, line_depth: int) -> BrwModel:
    """d one-sided rays of the given length joined at a common origin."""
    if d < 2:
        raise ContractError("ray count d must be at least 2")
    if line_depth < 1:
        raise ContractError("line_depth must be at least 1")
    L = line_depth
    V = 1 + d * L
    ray = np.repeat(np.arange(d, dtype=np.int64), L)
    pos = np.tile(np.arange(1, L + 1, dtype=np.int64), d)
    ids = 1 + np.arange(d * L, dtype=np.int64)
    prev = np.where(pos == 1, 0, ids - 1)
    src = np.concatenate([prev, ids])
    dst = np.concatenate([ids, prev])
    K = RateMatrix.from_arrays(V, src, dst, np.ones(src.size))
    labels = ("origin",) + tuple(f"ray {r} depth {p}" for r, p in zip(ray.tolist(), pos.tolist()))
    boundary = np.zeros(V, dtype=bool)
    boundary[1:] = pos == L
    ray_of = np.concatenate([[-1], ray])
    depth_of = np.concatenate([[0], pos])
    for arr in (ray_of, depth_of):
        arr.flags.writeable = False
    spec = make_model_spec("star_of_lines", d=d, line_depth=line_depth)
    return BrwModel(K, 0, labels, boundary, spec, meta={"ray": ray_of, "ray_depth": depth_of})


# ---------------------------------------------------------------------------
# one-dimensional families with position-dependent rates

def build_bpve(rate_sequence, length: int | None = None) -> BrwModel:
    """Oriented path 0 -> 1 -> ... -> length with per-edge rates.

    The rate sequence supplies the edge rates in order; the final vertex has
    no outgoing edge and is flagged as frontier.
    """
    rates = np.asarray(list(rate_sequence), dtype=np.float64)
    if length is None:
        length = rates.size
    if length < 1:
        raise ContractError("length must be at least 1")
    if rates.size < length:
        raise ContractError(f"need {length} rates, got {rates.size}")
    rates = rates[:length]
    if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
        raise ContractError("all rates must be positive and finite")
    V = length + 1
    n = np.arange(length, dtype=np.int64)
    K = RateMatrix.from_arrays(V, n, n + 1, rates)
    labels = tuple(f"offset {i}" for i in range(V))
    boundary = np.zeros(V, dtype=bool)
    boundary[-1] = True
    held = rates.copy()
    held.flags.writeable = False
    spec = make_model_spec("bpve", rate_sequence=[float(r) for r in rates], length=int(length))
    return BrwModel(K, 0, labels, boundary, spec, meta={"rates": held})


@dataclass(frozen=True, eq=False)
class OscillatingSequence:
    """A deterministic rate sequence of 1s and 2s in ever-longer runs.

    ``checkpoints`` lists the run boundaries; ``rates[i]`` is 1.0 on runs
    that start after an odd-numbered checkpoint and 2.0 on the others.
    Indices at or below the first checkpoint carry rate 2, so the sequence
    opens with a maximal-rate run.
    """

    rates: np.ndarray
    checkpoints: tuple[int, ...]

    def __len__(self) -> int:
        return self.rates.size


def build_oscillating_sequence(target_length: int) -> OscillatingSequence:
    """Rate sequence whose running geometric mean oscillates forever.

    Run lengths follow a fixed recursion: the checkpoint list starts at 1
    and each next checkpoint multiplies the previous one by a ceiling factor
    chosen so the geometric mean swings back across fixed levels.
    """
    if target_length < 2:
        raise ContractError("target_length must be at least 2")
    cps = [1]
    m = 2
    while cps[-1] < target_length:
        if m % 2 == 0:
            mult = math.ceil(math.log(2.0) / math.log1p(1.0 / m))
        else:
            mult = math.ceil(1.0 / math.log(2.0 - 1.0 / m))
        cps.append(mult * cps[-1])
        m += 1
    rates = np.empty(target_length, dtype=np.float64)
    rates[: cps[0] + 1] = 2.0
    for j in range(len(cps) - 1):
        lo, hi = cps[j] + 1, cps[j + 1] + 1
        rates[lo:hi] = 1.0 if j % 2 == 0 else 2.0
    rates.flags.writeable = False
    return OscillatingSequence(rates=rates, checkpoints=tuple(cps))


def _log_forward_products(rates: np.ndarray) -> np.ndarray:
    """log of the running products prod_{j<i} rates[j], index 0..len."""
    return np.concatenate([[0.0], np.cumsum(np.log(rates))])


def _default_epsilon(rates: np.ndarray, count: int, q: float = 0.25) -> np.ndarray:
    """Geometric return-rate recipe: eps_i = q^(i+2) * delta^(i+1) / prod_{j<i} k_j.

    Chosen so the weighted return mass sums to q^2/(1-q) regardless of the
    forward rates.
    """
    delta = float(rates.min())
    lp = _log_forward_products(rates)
    i = np.arange(count, dtype=np.float64)
    eps = np.exp((i + 2) * math.log(q) + (i + 1) * math.log(delta) - lp[:count])
    return eps


def _weighted_return_mass(rates: np.ndarray, eps: np.ndarray) -> float:
    """beta = sum_i eps_i * (prod_{j<i} k_j) / delta^(i+1), in log space."""
    delta = float(rates.min())
    lp = _log_forward_products(rates)
    total = 0.0
    for i, e in enumerate(eps):
        if e == 0.0:
            continue
        total += math.exp(math.log(e) + lp[i] - (i + 1) * math.log(delta))
    return total


def build_feedback_line(rate_sequence, epsilon_sequence=None, length: int | None = None) -> BrwModel:
    """Oriented path with per-vertex return edges back to 0.

    Every vertex n sends rate eps_n back to the origin, making the window
    irreducible. The weighted return mass beta must stay below one, which
    keeps the total generation mass within a constant factor of the bare
    forward product; beta and delta (the minimal forward rate) are stored
    under ``meta``.
    """
    rates = np.asarray(list(rate_sequence), dtype=np.float64)
    if length is None:
        length = rates.size
    if length < 1:
        raise ContractError("length must be at least 1")
    if rates.size < length:
        raise ContractError(f"need {length} forward rates, got {rates.size}")
    rates = rates[:length]
    if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
        raise ContractError("forward rates must be positive and finite")
    V = length + 1
    given_eps = epsilon_sequence is not None
    if given_eps:
        eps = np.asarray(list(epsilon_sequence), dtype=np.float64)
        if eps.size != V:
            raise ContractError(f"need one return rate per vertex ({V}), got {eps.size}")
        if not np.all(np.isfinite(eps)) or np.any(eps <= 0):
            raise ContractError("return rates must be positive and finite")
    else:
        eps = _default_epsilon(rates, V)
        if np.any(eps <= 0):
            raise ContractError("default return-rate recipe underflows on this window; pass epsilon_sequence")
    beta = _weighted_return_mass(rates, eps)
    if not beta < 1.0:
        raise ContractError(f"weighted return mass must stay below one, got beta={beta}")
    n = np.arange(length, dtype=np.int64)
    src = np.concatenate([n, np.arange(V, dtype=np.int64)])
    dst = np.concatenate([n + 1, np.zeros(V, dtype=np.int64)])
    val = np.concatenate([rates, eps])
    K = RateMatrix.from_arrays(V, src, dst, val)
    labels = tuple(f"offset {i}" for i in range(V))
    boundary = np.zeros(V, dtype=bool)
    boundary[-1] = True
    spec = make_model_spec(
        "feedback_line",
        rate_sequence=[float(r) for r in rates],
        epsilon_sequence=[float(e) for e in eps] if given_eps else None,
        length=int(length),
    )
    held_eps = eps.copy()
    held_eps.flags.writeable = False
    meta = {"beta": float(beta), "delta": float(rates.min()), "epsilon": held_eps}
    return BrwModel(K, 0, labels, boundary, spec, meta=meta)


def build_example_finally(half_length: int, epsilon_schedule=None) -> BrwModel:
    """Two-sided window around 0 whose left rates mirror the right ones.

    Forward rates on the right come from the oscillating sequence; the left
    edge rate at distance n is 3 minus the right one, so the two products
    multiply to 2^n exactly. Optional return edges to the origin keep the
    window irreducible; their weighted mass on each side must stay below
    1/3. An all-zero schedule is accepted and flagged as reducible.
    """
    if half_length < 2:
        raise ContractError("half_length must be at least 2")
    L = half_length
    osc = build_oscillating_sequence(L)
    fwd = osc.rates
    mir = 3.0 - fwd
    if not np.all(fwd * mir == 2.0):
        raise ContractError("mirrored rate products drifted off 2; rates must be 1s and 2s")

    V = 2 * L + 1
    root = L  # vertex id of offset 0

    def vid(offsets):
        return offsets + L

    given = epsilon_schedule is not None
    if given:
        eps = np.asarray(list(epsilon_schedule), dtype=np.float64)
        if eps.size != L + 1:
            raise ContractError(f"need one return rate per offset 0..{L}, got {eps.size}")
        if not np.all(np.isfinite(eps)) or np.any(eps < 0):
            raise ContractError("return rates must be finite and >= 0")
        reducible = bool(np.all(eps == 0.0))
        if not reducible and np.any(eps == 0.0):
            raise ContractError("return schedule must be all-zero or all-positive")
        eps_plus = eps
        eps_minus = eps
    else:
        reducible = False
        eps_plus = _default_epsilon(fwd, L + 1)
        eps_minus = _default_epsilon(mir, L + 1)
        if np.any(eps_plus <= 0) or np.any(eps_minus <= 0):
            raise ContractError("default return-rate recipe underflows on this window; pass epsilon_schedule")

    if reducible:
        beta_plus = beta_minus = 0.0
    else:
        beta_plus = _weighted_return_mass(fwd, eps_plus)
        beta_minus = _weighted_return_mass(mir, eps_minus)
        if not (beta_plus < 1.0 / 3.0 and beta_minus < 1.0 / 3.0):
            raise ContractError(
                f"weighted return mass must stay below 1/3 on each side, got {beta_plus} and {beta_minus}"
            )

    n = np.arange(L, dtype=np.int64)
    seg_src = [vid(n), vid(-n)]
    seg_dst = [vid(n + 1), vid(-n - 1)]
    seg_val = [fwd, mir]
    if not reducible:
        pos = np.arange(L + 1, dtype=np.int64)  # offsets 0..L return to the origin
        neg = np.arange(1, L + 1, dtype=np.int64)
        seg_src += [vid(pos), vid(-neg)]
        seg_dst += [np.full(L + 1, root, dtype=np.int64), np.full(L, root, dtype=np.int64)]
        seg_val += [eps_plus, eps_minus[1:]]
    K = RateMatrix.from_arrays(V, np.concatenate(seg_src), np.concatenate(seg_dst), np.concatenate(seg_val))
    labels = tuple(f"offset {i - L}" for i in range(V))
    boundary = np.zeros(V, dtype=bool)
    boundary[0] = boundary[-1] = True
    spec = make_model_spec(
        "example_finally",
        epsilon_schedule=[float(e) for e in epsilon_schedule] if given else None,
        half_length=int(L),
    )
    meta = {
        "beta_plus": float(beta_plus),
        "beta_minus": float(beta_minus),
        "reducible": reducible,
        "checkpoints": osc.checkpoints,
        "forward_rates": fwd,
        "mirror_rates": mir,
    }
    return BrwModel(K, root, labels, boundary, spec, meta=meta)


# ---------------------------------------------------------------------------
# periodic tree-like models built from labeled pieces

@dataclass(frozen=True, eq=False)
class PieceSpec:
    """One reusable building block plus its outgoing identification maps.

    ``glue`` maps a neighbour label to (own vertex, neighbour piece vertex)
    pairs; each pair identifies the two vertices when a copy of the
    neighbour piece is attached. Maps must be injective.
    """

    label: object
    matrix: RateMatrix
    glue: dict = field(default_factory=dict)

    def __post_init__(self):
        ncomp, _ = csgraph.connected_components(self.matrix.csr, directed=True, connection="strong")
        if ncomp != 1:
            raise ContractError(f"piece {self.label!r} must be strongly connected")
        for other, pairs in self.glue.items():
            own = [u for u, _ in pairs]
            tgt = [v for _, v in pairs]
            if len(set(own)) != len(own) or len(set(tgt)) != len(tgt):
                raise ContractError(f"glue map {self.label!r} -> {other!r} must be injective")
            if any(not (0 <= u < self.matrix.vertex_count) for u in own):
                raise ContractError(f"glue map {self.label!r} -> {other!r} references a vertex outside the piece")


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:  # keep the smallest id as representative
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_periodic_tree_like(label_graph, pieces, root_label, depth: int) -> BrwModel:
    """Unfold a finite label graph into a depth-limited tree of glued pieces.

    Each node of the unfolding carries a copy of its label's piece; for every
    label edge (i, j) the node gets a child labeled j, and the glue map
    identifies the declared vertex pairs between the two copies. Identified
    vertices are merged; when two copies both define a rate on the same
    merged pair the values must agree, otherwise the spec is rejected.
    Vertices whose merged class lies entirely in deepest-level pieces form
    the frontier.
    """
    labels_list, edge_list = label_graph
    labels_list = list(labels_list)
    edge_list = [tuple(e) for e in edge_list]
    if depth < 1:
        raise ContractError("depth must be at least 1")
    if len(set(labels_list)) != len(labels_list):
        raise ContractError("duplicate labels in label graph")
    lab_index = {lab: i for i, lab in enumerate(labels_list)}
    if len(set(edge_list)) != len(edge_list):
        raise ContractError("duplicate edges in label graph")
    for i, j in edge_list:
        if i not in lab_index or j not in lab_index:
            raise ContractError(f"label edge ({i!r}, {j!r}) references an unknown label")
    if root_label not in lab_index:
        raise ContractError(f"unknown root label {root_label!r}")

    if len(labels_list) > 1:
        li = np.array([lab_index[i] for i, _ in edge_list], dtype=np.int64)
        lj = np.array([lab_index[j] for _, j in edge_list], dtype=np.int64)
        adj = sp.csr_matrix((np.ones(len(edge_list)), (li, lj)), shape=(len(labels_list),) * 2)
        ncomp, _ = csgraph.connected_components(adj, directed=True, connection="strong")
        if ncomp != 1:
            raise ContractError("label graph must be strongly connected")

    piece_by_label = {}
    for ps in pieces:
        if ps.label not in lab_index:
            raise ContractError(f"piece for unknown label {ps.label!r}")
        if ps.label in piece_by_label:
            raise ContractError(f"duplicate piece for label {ps.label!r}")
        piece_by_label[ps.label] = ps
    missing = [lab for lab in labels_list if lab not in piece_by_label]
    if missing:
        raise ContractError(f"labels without pieces: {missing}")

    out_edges = {lab: [j for (i, j) in edge_list if i == lab] for lab in labels_list}
    for lab, ps in piece_by_label.items():
        for other, pairs in ps.glue.items():
            if other not in out_edges[lab]:
                raise ContractError(f"glue map {lab!r} -> {other!r} has no matching label edge")
            size_other = piece_by_label[other].matrix.vertex_count
            if any(not (0 <= v < size_other) for _, v in pairs):
                raise ContractError(f"glue map {lab!r} -> {other!r} references a vertex outside the piece")

    # breadth-first unfolding into a tree of piece copies
    nodes = [(root_label, 0)]  # (label, depth)
    node_children: list[list[tuple[int, object]]] = [[]]
    offsets = [0]
    total = piece_by_label[root_label].matrix.vertex_count
    head = 0
    while head < len(nodes):
        lab, dl = nodes[head]
        if dl < depth:
            for child_lab in out_edges[lab]:
                nid = len(nodes)
                nodes.append((child_lab, dl + 1))
                node_children.append([])
                node_children[head].append((nid, child_lab))
                offsets.append(total)
                total += piece_by_label[child_lab].matrix.vertex_count
        head += 1

    uf = _UnionFind(total)
    for nid, (lab, _) in enumerate(nodes):
        glue = piece_by_label[lab].glue
        for cid, child_lab in node_children[nid]:
            for u, v in glue.get(child_lab, ()):
                uf.union(offsets[nid] + u, offsets[cid] + v)

    # compact class ids, ordered by smallest member
    class_of = np.empty(total, dtype=np.int64)
    class_ids: dict[int, int] = {}
    for g in range(total):
        r = uf.find(g)
        if r not in class_ids:
            class_ids[r] = len(class_ids)
        class_of[g] = class_ids[r]
    V = len(class_ids)

    class_min_depth = np.full(V, np.iinfo(np.int64).max, dtype=np.int64)
    class_size = np.zeros(V, dtype=np.int64)
    rep_member = np.full(V, total, dtype=np.int64)
    for nid, (lab, dl) in enumerate(nodes):
        size = piece_by_label[lab].matrix.vertex_count
        for u in range(size):
            c = class_of[offsets[nid] + u]
            class_min_depth[c] = min(class_min_depth[c], dl)
            class_size[c] += 1
            rep_member[c] = min(rep_member[c], offsets[nid] + u)

    rates: dict[tuple[int, int], float] = {}
    for nid, (lab, _) in enumerate(nodes):
        K_piece = piece_by_label[lab].matrix
        for u, targets, vals in K_piece.rows():
            cu = class_of[offsets[nid] + u]
            for v, r in zip(targets.tolist(), vals.tolist()):
                key = (cu, int(class_of[offsets[nid] + v]))
                old = rates.get(key)
                if old is None:
                    rates[key] = r
                elif old != r:
                    raise ContractError(
                        f"identified pair {key} carries conflicting rates {old} and {r}"
                    )

    keys = sorted(rates)
    src = np.array([k[0] for k in keys], dtype=np.int64)
    dst = np.array([k[1] for k in keys], dtype=np.int64)
    val = np.array([rates[k] for k in keys], dtype=np.float64)
    K = RateMatrix.from_arrays(V, src, dst, val)

    boundary = class_min_depth == depth
    root_vertex = int(class_of[0])
    out_labels = []
    member_node = np.empty(V, dtype=np.int64)
    for nid, (lab, _) in enumerate(nodes):
        size = piece_by_label[lab].matrix.vertex_count
        for u in range(size):
            g = offsets[nid] + u
            if rep_member[class_of[g]] == g:
                member_node[class_of[g]] = nid
    for c in range(V):
        nid = int(member_node[c])
        lab, _ = nodes[nid]
        out_labels.append(f"piece {lab} node {nid} vertex {int(rep_member[c] - offsets[nid])}")

    piece_params = []
    for lab in labels_list:
        ps = piece_by_label[lab]
        coo = ps.matrix.csr.tocoo()
        piece_params.append(
            {
                "label": lab,
                "vertex_count": ps.matrix.vertex_count,
                "edges": [[int(u), int(v), float(r)] for u, v, r in zip(coo.row, coo.col, coo.data)],
                "glue": [
                    {"to": other, "pairs": [[int(u), int(v)] for u, v in pairs]}
                    for other, pairs in sorted(ps.glue.items(), key=lambda kv: str(kv[0]))
                ],
            }
        )
    spec = make_model_spec(
        "periodic_tree_like",
        labels=labels_list,
        label_edges=[[i, j] for i, j in edge_list],
        pieces=piece_params,
        root_label=root_label,
        depth=int(depth),
    )
    for arr in (class_min_depth, class_size):
        arr.flags.writeable = False
    meta = {
        "node_count": len(nodes),
        "merge_multiplicity": int(class_size.max()) if V else 0,
        "merged_vertices": int(total - V),
        "class_min_depth": class_min_depth,
        "class_size": class_size,
    }
    return BrwModel(K, root_vertex, tuple(out_labels), boundary, spec, meta=meta)


def _build_periodic_from_params(labels, label_edges, pieces, root_label, depth):
    specs = []
    for p in pieces:
        K = RateMatrix.from_edges(p["vertex_count"], [(u, v, r) for u, v, r in p["edges"]])
        glue = {g["to"]: tuple((int(u), int(v)) for u, v in g["pairs"]) for g in p.get("glue", [])}
        specs.append(PieceSpec(label=p["label"], matrix=K, glue=glue))
    edge_tuples = [tuple(e) for e in label_edges]
    return build_periodic_tree_like((list(labels), edge_tuples), specs, root_label, depth)


# ---------------------------------------------------------------------------
# projections

@dataclass(frozen=True, eq=False)
class ProjectionMap:
    """Vertex assignment from a source model onto a target model."""

    source_model: BrwModel
    target_model: BrwModel
    assignment: np.ndarray

    def __post_init__(self):
        g = np.ascontiguousarray(self.assignment, dtype=np.int64)
        if g.shape != (self.source_model.vertex_count,):
            raise ContractError("assignment must name a target for every source vertex")
        if g.size and (g.min() < 0 or g.max() >= self.target_model.vertex_count):
            raise ContractError("assignment value outside the target window")
        g.flags.writeable = False
        object.__setattr__(self, "assignment", g)


@dataclass(frozen=True)
class ProjectionReport:
    """Outcome of checking a projection's defining identities.

    ``fiber_violations`` lists rows where summing source rates over a fiber
    disagrees with the target rate; ``excluded_rows`` are frontier rows that
    were skipped. The mass section compares per-generation masses between
    matched vertices, skipping pairs close enough to a frontier or a
    violating row that truncation could have leaked into the compared mass.
    """

    valid: bool
    fiber_violations: tuple
    excluded_rows: tuple
    mass_horizon: int
    mass_checked_pairs: int
    mass_max_residual: float
    mass_violations: tuple


def _distance_to_set(K: RateMatrix, members: np.ndarray, cap: int) -> np.ndarray:
    """Forward-path distance from each vertex to the member set, capped."""
    V = K.vertex_count
    dist = np.full(V, cap, dtype=np.int64)
    frontier = members.astype(bool).copy()
    dist[frontier] = 0
    for step in range(1, cap):
        if not frontier.any():
            break
        reach = K.csr.dot(frontier.astype(np.float64)) > 0.0
        fresh = reach & (dist == cap)
        if not fresh.any():
            break
        dist[fresh] = step
        frontier = fresh
    return dist


def verify_projection(
    p: ProjectionMap,
    horizon: int = 16,
    tol: float = 1e-12,
    mass_rtol: float = 1e-9,
) -> ProjectionReport:
    """Check the fiber-sum identity row by row, then the mass identity by level.

    Frontier rows are excluded from the row check and reported. The
    per-generation mass comparison only covers vertices far enough from any
    frontier or violating row that the truncation cannot have leaked into
    the compared masses.
    """
    src_m = p.source_model
    tgt_m = p.target_model
    g = p.assignment
    Vs, Vt = src_m.vertex_count, tgt_m.vertex_count

    cover = np.bincount(g, minlength=Vt)
    if np.any(cover == 0):
        raise ContractError(f"assignment must cover the target window; {int((cover == 0).sum())} vertices unassigned")

    # fiber sums: sum_z over g(z) = y of k_xz, one sparse product
    S = sp.csr_matrix((np.ones(Vs), (np.arange(Vs), g)), shape=(Vs, Vt))
    fiber = src_m.matrix.csr.dot(S)
    want = tgt_m.matrix.csr[g]
    diff = (fiber - want).tocoo()
    bad_rows = np.zeros(Vs, dtype=bool)
    violations = []
    for x, y, d in zip(diff.row, diff.col, diff.data):
        if abs(d) > tol and not src_m.boundary[x]:
            violations.append((int(x), int(y), float(fiber[x, y]), float(want[x, y])))
            bad_rows[x] = True
    violations.sort()

    # mass identity by induction, away from frontier and violating rows
    excluded = src_m.boundary | bad_rows
    cap = horizon + 1
    dist_src = _distance_to_set(src_m.matrix, excluded, cap)
    dist_tgt = _distance_to_set(tgt_m.matrix, tgt_m.boundary, cap)
    vs = np.ones(Vs)
    vt = np.ones(Vt)
    checked = 0
    max_residual = 0.0
    mass_violations = []
    for n in range(1, horizon + 1):
        vs = src_m.matrix.csr.dot(vs)
        vt = tgt_m.matrix.csr.dot(vt)
        ok = (dist_src >= n) & (dist_tgt[g] >= n)
        if not ok.any():
            continue
        lhs = vs[ok]
        rhs = vt[g[ok]]
        resid = np.abs(lhs - rhs)
        scale = np.maximum(1.0, np.abs(rhs))
        checked += int(ok.sum())
        max_residual = max(max_residual, float(resid.max()))
        over = resid > mass_rtol * scale
        if over.any():
            xs = np.flatnonzero(ok)[over]
            for x in xs[:20]:
                mass_violations.append((n, int(x), float(vs[x]), float(vt[g[x]])))

    return ProjectionReport(
        valid=not violations and not mass_violations,
        fiber_violations=tuple(violations),
        excluded_rows=tuple(int(x) for x in np.flatnonzero(src_m.boundary)),
        mass_horizon=horizon,
        mass_checked_pairs=checked,
        mass_max_residual=max_residual,
        mass_violations=tuple(mass_violations),
    )


def project_onto_classes(model: BrwModel, keys) -> ProjectionMap:
    """Quotient a model by a per-vertex key, building the target from
    representative rows.

    Vertices sharing a key collapse to one target vertex; the target rate
    row is the fiber sum taken from each class's first interior member (or
    first member if the whole class is frontier). The returned map should
    still be run through :func:`verify_projection`: the construction does
    not itself prove the fiber sums agree across a class.
    """
    V = model.vertex_count
    keys = list(keys)
    if len(keys) != V:
        raise ContractError("need one class key per vertex")
    class_of = np.empty(V, dtype=np.int64)
    order: dict[object, int] = {}
    for x, key in enumerate(keys):
        if key not in order:
            order[key] = len(order)
        class_of[x] = order[key]
    C = len(order)

    first = np.full(C, -1, dtype=np.int64)
    interior_rep = np.full(C, -1, dtype=np.int64)
    for x in range(V):
        c = class_of[x]
        if first[c] < 0:
            first[c] = x
        if interior_rep[c] < 0 and not model.boundary[x]:
            interior_rep[c] = x
    all_boundary = interior_rep < 0
    # take the first interior member's row where one exists
    rep = np.where(interior_rep >= 0, interior_rep, first)

    S = sp.csr_matrix((np.ones(V), (np.arange(V), class_of)), shape=(V, C))
    target_rows = model.matrix.csr[rep].dot(S).tocoo()
    K = RateMatrix.from_arrays(C, target_rows.row.astype(np.int64), target_rows.col.astype(np.int64), target_rows.data)

    key_by_class = [None] * C
    for key, c in order.items():
        key_by_class[c] = key
    labels = tuple(f"class {key_by_class[c]}" for c in range(C))
    root_class = int(class_of[model.root])
    spec = ModelSpec("projected", {"of": model.provenance.constructor, "classes": C}, {})
    counts = np.bincount(class_of, minlength=C)
    counts.flags.writeable = False
    target = BrwModel(
        K,
        root_class,
        labels,
        all_boundary,
        spec,
        meta={"class_size": counts, "representative": rep, "class_key": tuple(key_by_class)},
    )
    return ProjectionMap(source_model=model, target_model=target, assignment=class_of)


# registry of spec-buildable constructors
MODEL_REGISTRY = {
    "single_site": build_single_site,
    "regular_tree": build_regular_tree,
    "tree_with_lines": build_tree_with_lines,
    "star_of_lines": build_star_of_lines,
    "bpve": build_bpve,
    "feedback_line": build_feedback_line,
    "example_finally": build_example_finally,
    "periodic_tree_like": _build_periodic_from_params,
}


def build_from_spec(spec: ModelSpec) -> BrwModel:
    """Rebuild a model from its spec; inverse of reading ``model.provenance``."""
    if spec.constructor not in MODEL_REGISTRY:
        raise ContractError(f"unknown constructor {spec.constructor!r}")
    overlap = set(spec.parameters) & set(spec.truncation)
    if overlap:
        raise ContractError(f"parameters and truncation overlap on {sorted(overlap)}")
    kwargs = dict(spec.parameters)
    kwargs.update(spec.truncation)
    return MODEL_REGISTRY[spec.constructor](**kwargs)
