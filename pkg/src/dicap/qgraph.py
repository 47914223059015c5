"""Q-graph extraction and single-letter feedback-capacity bounds.

Pipeline: a small recurrent net learns the belief q_t ~ p(s_t | y^t) from
rollouts with logged channel states, its outputs are clustered into graph
nodes, and the modal node transition per output symbol defines a
deterministic graph f_Q(q, y).  The graph then yields an upper bound
sup I(X,S;Y|Q) over input laws P(x | s, q) evaluated under the stationary
distribution of the joint (S, Q) chain.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .channels import ChannelSpec, Rollout, kernel
from .clustering import kmeans
from .nn import MlpParams, mlp_forward, one_hot


class QGraphError(ValueError):
    pass


class NotInPQ(QGraphError):
    """The input law induces a reducible (S, Q) chain; it is not a feasible point."""


# ---------------------------------------------------------------------------
# belief network


class QNet:
    """q_t = softmax(MLP([q_{t-1}, onehot(y_t)])), with q_0 the zero vector."""

    def __init__(self, n_states: int, n_y: int, rng: np.random.Generator, fc: tuple = (32,)):
        self.n_states, self.n_y = n_states, n_y
        self.net = MlpParams.init([n_states + n_y, *fc, n_states], rng, name="qnet")

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def named_params(self) -> dict:
        return {p.name: p for p in self.params}

    def initial(self, lanes: int) -> np.ndarray:
        return np.zeros((lanes, self.n_states))

    def step(self, q_prev, y) -> Tensor:
        inp = ad.concat([ad.constant(q_prev), one_hot(y, self.n_y)], axis=-1)
        return ad.softmax(mlp_forward(self.net, inp), axis=-1)

    def sequence(self, ys, q0) -> Tensor:
        """Beliefs (steps, lanes, |S|) over a time-major output stream."""
        q = ad.constant(q0)
        out = []
        for t in range(len(ys)):
            q = self.step(q, ys[t])
            out.append(q)
        return ad.stack(out, axis=0)

    def run(self, ys, q0=None) -> np.ndarray:
        q = self.initial(ys.shape[1]) if q0 is None else q0
        return self.sequence(ys, q).value


def cross_entropy(q: Tensor, states) -> Tensor:
    """-mean_t log q_{t, s_t}."""
    q = ad.constant(q)
    states = np.asarray(states, dtype=np.int64)
    return ad.neg(ad.mean(ad.log(ad.gather(q, states))))


@dataclass
class QNetConfig:
    lanes: int = 64
    seg_len: int = 50
    iterations: int = 400
    lr: float = 5e-3
    fc: tuple = (32,)
    clip_norm: float = 5.0

    def __post_init__(self):
        if min(self.lanes, self.seg_len, self.iterations) < 1:
            raise ValueError("lanes, seg_len and iterations must be positive")
        self.fc = tuple(self.fc)


def train_qnet(spec: ChannelSpec, policy, cfg: QNetConfig, feedback: bool, seed: int = 0) -> tuple[QNet, list[float]]:
    """Fit the belief net by cross-entropy against the logged channel states."""
    if spec.memoryless or spec.n_outputs == "continuous":
        raise QGraphError(f"{spec.kind}: no latent state to supervise")
    rng = np.random.default_rng(seed)
    net_rng, roll_rng = (np.random.default_rng(s) for s in rng.integers(2**63, size=2))
    qnet = QNet(spec.n_states, spec.n_outputs, net_rng, fc=cfg.fc)
    opt = ad.Adam(qnet.params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    rollout = Rollout(spec, policy, cfg.lanes, feedback, roll_rng)
    q = qnet.initial(cfg.lanes)
    losses = []
    for _ in range(cfg.iterations):
        tr = rollout.segment(cfg.seg_len).traj
        with Tape() as tape:
            qs = qnet.sequence(tr.y, q)
            loss = cross_entropy(qs, tr.s)
        opt.step(ad.backward(tape, loss, qnet.params))
        q = qs.value[-1]
        losses.append(loss.item())
    return qnet, losses


# ---------------------------------------------------------------------------
# graphs


@dataclass
class QGraph:
    """Deterministic labeled graph: ``succ[i, y]`` is the node entered from i on y."""

    succ: np.ndarray  # (nodes, |Y|) int
    centroids: np.ndarray  # (nodes, |S|)
    purity: float = 1.0
    counts: np.ndarray | None = None  # (nodes, nodes, |Y|) observed transitions

    def __post_init__(self):
        self.succ = np.asarray(self.succ, dtype=np.int64)
        if self.succ.ndim != 2 or np.any(self.succ < 0) or np.any(self.succ >= self.n_nodes):
            raise QGraphError("successor table must map every (node, y) to a node")

    @property
    def n_nodes(self) -> int:
        return self.succ.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.succ.shape[1]

    @property
    def adjacency(self) -> np.ndarray:
        """M[i, j, y] = 1 iff the edge labeled y leads from i to j."""
        m = np.zeros((self.n_nodes, self.n_nodes, self.n_outputs), dtype=np.int64)
        for i in range(self.n_nodes):
            for y in range(self.n_outputs):
                m[i, self.succ[i, y], y] = 1
        return m

    def is_deterministic_complete(self) -> bool:
        return bool(np.all(self.adjacency.sum(axis=1) == 1))

    def reachable(self, start: int = 0) -> set[int]:
        seen, todo = {start}, [start]
        while todo:
            i = todo.pop()
            for j in self.succ[i]:
                if int(j) not in seen:
                    seen.add(int(j))
                    todo.append(int(j))
        return seen

    def to_json(self) -> str:
        edges = [[i, int(self.succ[i, y]), y] for i in range(self.n_nodes) for y in range(self.n_outputs)]
        return json.dumps(
            {
                "nodes": [{"id": i, "centroid": [float(v) for v in c]} for i, c in enumerate(self.centroids)],
                "edges": edges,
                "purity": self.purity,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "QGraph":
        d = json.loads(text)
        n = len(d["nodes"])
        ny = 1 + max(e[2] for e in d["edges"])
        succ = np.full((n, ny), -1)
        for i, j, y in d["edges"]:
            if succ[i, y] != -1:
                raise QGraphError(f"node {i} has two edges labeled {y}")
            succ[i, y] = j
        cents = np.array([node["centroid"] for node in d["nodes"]])
        return cls(succ, cents, d.get("purity", 1.0))

    def to_dot(self) -> str:
        lines = ["digraph qgraph {"]
        for i, c in enumerate(self.centroids):
            label = ", ".join(f"{v:.3f}" for v in c)
            lines.append(f'  q{i} [label="q{i}\\n({label})"];')
        for i in range(self.n_nodes):
            for y in range(self.n_outputs):
                lines.append(f'  q{i} -> q{int(self.succ[i, y])} [label="{y}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def trivial_graph(n_outputs: int, n_states: int = 1) -> QGraph:
    return QGraph(np.zeros((1, n_outputs), dtype=np.int64), np.full((1, n_states), 1.0 / n_states))


def graph_from_beliefs(
    qs: np.ndarray, ys: np.ndarray, k: int, seed: int = 0, burn: int = 100, restarts: int = 10, ny: int | None = None
) -> QGraph:
    """Cluster beliefs (steps, lanes, |S|) and take modal transitions per (node, y).

    ``ny`` is the output alphabet size; by default it is inferred from ``ys``.
    """
    steps, lanes, _ = qs.shape
    if steps <= burn + 1:
        raise QGraphError("trajectory too short for the burn-in")
    pts = qs[burn:].reshape(-1, qs.shape[-1])
    res = kmeans(pts, k, seed=seed, restarts=restarts)
    labels = res.labels.reshape(steps - burn, lanes)
    if ny is None:
        ny = int(ys.max()) + 1 if ys.size else 1
    counts = np.zeros((k, k, ny), dtype=np.int64)
    # node at t-1, output y_t, node at t
    np.add.at(counts, (labels[:-1].ravel(), labels[1:].ravel(), ys[burn + 1 :].ravel()), 1)
    return _modal_graph(counts, res.centroids)


def _modal_graph(counts: np.ndarray, centroids: np.ndarray) -> QGraph:
    k, _, ny = counts.shape
    succ = np.zeros((k, ny), dtype=np.int64)
    for i in range(k):
        for y in range(ny):
            col = counts[i, :, y]
            if col.sum() == 0:
                raise QGraphError(
                    f"edge (node {i}, y={y}) never observed; increase the trajectory length n"
                )
            succ[i, y] = int(np.argmax(col))
    total = counts.sum()
    purity = float(counts.max(axis=1).sum() / total) if total else 1.0
    return QGraph(succ, centroids, purity, counts)


def extract_qgraph(qnet: QNet, spec: ChannelSpec, policy, n: int, k: int, seed: int = 0, feedback: bool = True, lanes: int = 10) -> QGraph:
    """Roll out ``n`` steps (split over lanes), run the belief net, cluster into ``k`` nodes."""
    if n < 100_000:
        raise QGraphError("extraction needs n >= 1e5 steps")
    qs, ys = belief_rollout(qnet, spec, policy, n, seed, feedback, lanes)
    return graph_from_beliefs(qs, ys, k, seed=seed, ny=spec.n_outputs)


def belief_rollout(qnet: QNet, spec: ChannelSpec, policy, n: int, seed: int, feedback: bool, lanes: int = 10):
    rng = np.random.default_rng(seed)
    steps = -(-n // lanes)
    tr = Rollout(spec, policy, lanes, feedback, rng).segment(steps).traj
    return qnet.run(tr.y), tr.y


def select_qgraph(qs, ys, k_max: int, seed: int = 0, purity_target: float = 0.99, k_min: int = 2, ny: int | None = None):
    """Smallest k in [k_min, k_max] whose modal-transition purity reaches the target.

    Returns (graph, table) where table lists (k, purity) for every k tried;
    if no k reaches the target the purest graph is returned.
    """
    table, best = [], None
    for k in range(k_min, k_max + 1):
        try:
            g = graph_from_beliefs(qs, ys, k, seed=seed, ny=ny)
        except (QGraphError, ValueError) as exc:
            table.append((k, float("nan"), str(exc)))
            continue
        table.append((k, g.purity, ""))
        if best is None or g.purity > best.purity:
            best = g
        if g.purity >= purity_target:
            return g, table
    if best is None:
        raise QGraphError("no k produced a complete graph")
    return best, table


# ---------------------------------------------------------------------------
# stationary chain and bound


def joint_transition(spec: ChannelSpec, graph: QGraph, pxsq: np.ndarray) -> np.ndarray:
    """P[(s,q), (s',q')] for the chain driven by P(x | s, q), the kernel and f_Q."""
    K = kernel(spec)  # [s, x, y, s']
    nS, nX, nY, _ = K.shape
    nQ = graph.n_nodes
    if graph.n_outputs != nY:
        raise QGraphError("graph labels do not match the output alphabet")
    pxsq = np.asarray(pxsq, dtype=np.float64)
    if pxsq.shape != (nS, nQ, nX):
        raise QGraphError(f"P(x|s,q) must have shape {(nS, nQ, nX)}")
    if np.any(pxsq < -1e-12) or np.any(np.abs(pxsq.sum(-1) - 1) > 1e-9):
        raise QGraphError("P(x|s,q) rows must lie on the simplex")
    # T[s, q, y, s'] = sum_x P(x|s,q) K[s,x,y,s']
    T = np.einsum("sqx,sxyt->sqyt", pxsq, K)
    P = np.zeros((nS, nQ, nS, nQ))
    for q in range(nQ):
        for y in range(nY):
            P[:, q, :, graph.succ[q, y]] += T[:, q, y, :]
    return P.reshape(nS * nQ, nS * nQ)


def stationary_vector(P: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Unique stationary distribution of a row-stochastic matrix.

    Raises :class:`NotInPQ` if the chain has more than one closed class.
    """
    n = P.shape[0]
    _, comp = connected_components(P > 0, directed=True, connection="strong")
    closed = set()
    for c in np.unique(comp):
        members = comp == c
        if P[np.ix_(members, ~members)].sum() <= 0:
            closed.add(int(c))
    if len(closed) != 1:
        raise NotInPQ(f"chain has {len(closed)} closed classes; stationary law not unique")
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    for _ in range(1000):
        nxt = pi @ P
        if np.abs(nxt - pi).max() <= tol:
            break
        # averaging damps oscillation of periodic chains
        pi = 0.5 * (pi + nxt)
    return pi


def stationary_joint(spec: ChannelSpec, graph: QGraph, pxsq) -> np.ndarray:
    """pi[s, q] of the joint (S, Q) chain."""
    P = joint_transition(spec, graph, pxsq)
    return stationary_vector(P).reshape(kernel(spec).shape[0], graph.n_nodes)


def conditional_mi(spec: ChannelSpec, graph: QGraph, pxsq, pi=None) -> float:
    """I(X,S;Y|Q) in nats under the stationary pi(s, q)."""
    W = kernel(spec).sum(axis=3)  # [s, x, y]
    pxsq = np.asarray(pxsq, dtype=np.float64)
    if pi is None:
        pi = stationary_joint(spec, graph, pxsq)
    # joint[s, q, x, y] = pi(s,q) P(x|s,q) W(y|x,s)
    joint = pi[:, :, None, None] * pxsq[:, :, :, None] * W[:, None, :, :]
    pyq = joint.sum(axis=(0, 2))  # [q, y]
    pq = pyq.sum(axis=1)
    py_given_q = np.divide(pyq, pq[:, None], out=np.zeros_like(pyq), where=pq[:, None] > 0)
    ratio = np.divide(W[:, None, :, :], py_given_q[None, :, None, :], out=np.ones_like(joint), where=joint > 0)
    with np.errstate(divide="ignore"):
        logs = np.where(joint > 0, np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
    return float(np.sum(joint * logs))


@dataclass
class BoundConfig:
    restarts: int = 20
    step_start: float = 0.1
    step_min: float = 1e-3
    tol: float = 1e-6  # nats
    max_sweeps: int = 500


@dataclass
class BoundResult:
    c_ub: float  # bits
    pxsq: np.ndarray
    pi: np.ndarray
    c_lb_proxy: float | None = None  # bits
    restarts: list[float] = field(default_factory=list)

    @property
    def gap(self) -> float | None:
        return None if self.c_lb_proxy is None else self.c_ub - self.c_lb_proxy

    def as_dict(self) -> dict:
        return {
            "c_ub_bits": self.c_ub,
            "c_lb_proxy_bits": self.c_lb_proxy,
            "gap_bits": self.gap,
            "p_x_given_s_q": self.pxsq.tolist(),
            "pi_s_q": self.pi.tolist(),
        }


def _objective(spec, graph, pxsq) -> float:
    try:
        return conditional_mi(spec, graph, pxsq)
    except NotInPQ:
        return -math.inf


def _row_moves(row: np.ndarray, step: float):
    m = len(row)
    for a in range(m):
        for b in range(m):
            if a != b and row[b] > 0:
                d = min(step, row[b])
                new = row.copy()
                new[a] += d
                new[b] -= d
                yield new


def _ascend(spec, graph, pxsq, cfg: BoundConfig) -> tuple[float, np.ndarray]:
    best = _objective(spec, graph, pxsq)
    nS, nQ, _ = pxsq.shape
    step = cfg.step_start
    while step >= cfg.step_min:
        for _ in range(cfg.max_sweeps):
            start = best
            for s in range(nS):
                for q in range(nQ):
                    for cand in _row_moves(pxsq[s, q], step):
                        trial = pxsq.copy()
                        trial[s, q] = cand
                        v = _objective(spec, graph, trial)
                        if v > best:
                            best, pxsq = v, trial
            if best - start < cfg.tol:
                break
        step /= 2
    return best, pxsq


def qgraph_bound(
    spec: ChannelSpec, graph: QGraph, cfg: BoundConfig | None = None, seed: int = 0, c_lb_proxy: float | None = None
) -> BoundResult:
    """Upper bound max_{P(x|s,q)} I(X,S;Y|Q) by multi-restart coordinate ascent."""
    cfg = cfg or BoundConfig()
    K = kernel(spec)
    nS, nX, nY, _ = K.shape
    rng = np.random.default_rng(seed)
    results = []
    for r in range(cfg.restarts):
        start = np.full((nS, graph.n_nodes, nX), 1.0 / nX) if r == 0 else rng.dirichlet(np.ones(nX), size=(nS, graph.n_nodes))
        val, px = _ascend(spec, graph, start, cfg)
        results.append((val, r, px))
    feasible = [t for t in results if math.isfinite(t[0])]
    if not feasible:
        raise QGraphError("no input law with an irreducible (S, Q) chain was found")
    # max value; ties go to the lowest restart index
    val, _, px = max(feasible, key=lambda t: (t[0], -t[1]))
    pi = stationary_joint(spec, graph, px)
    ub = val / math.log(2)
    if ub > math.log2(nY) + 1e-9:
        raise QGraphError("bound exceeds log2|Y|; inconsistent inputs")
    return BoundResult(ub, px, pi, c_lb_proxy, [t[0] / math.log(2) for t in results])


@dataclass
class PipelineResult:
    graph: QGraph
    table: list  # (k, purity, error) per k tried
    bound: BoundResult
    qnet: QNet | None = None
    qnet_losses: list = field(default_factory=list)


def qgraph_pipeline(
    spec: ChannelSpec,
    policy,
    feedback: bool,
    qnet_cfg: QNetConfig | None = None,
    bound_cfg: BoundConfig | None = None,
    n_extract: int = 100_000,
    k_min: int = 2,
    k_max: int = 6,
    purity: float = 0.99,
    seed: int = 0,
    c_lb_proxy: float | None = None,
) -> PipelineResult:
    """Belief net, graph extraction and upper bound for a fixed input policy.

    Memoryless channels skip the first two stages and use the one-node graph.
    """
    if spec.memoryless:
        graph = trivial_graph(spec.n_outputs)
        return PipelineResult(graph, [(1, 1.0, "")], qgraph_bound(spec, graph, bound_cfg, seed, c_lb_proxy))
    qnet, losses = train_qnet(spec, policy, qnet_cfg or QNetConfig(), feedback, seed=seed + 1)
    qs, ys = belief_rollout(qnet, spec, policy, n_extract, seed + 2, feedback)
    graph, table = select_qgraph(qs, ys, k_max, seed=seed, purity_target=purity, k_min=k_min, ny=spec.n_outputs)
    bound = qgraph_bound(spec, graph, bound_cfg, seed=seed, c_lb_proxy=c_lb_proxy)
    return PipelineResult(graph, table, bound, qnet, losses)


# ---------------------------------------------------------------------------
# graph pooling count


@dataclass
class GraphCount:
    m: int
    n_outputs: int
    value: Fraction  # m^{m|Y|} / m!
    log_value: float
    log_bound: float  # m ln m

    @property
    def holds(self) -> bool:
        # log-space comparison; the slack covers rounding at the m=1 equality
        return self.log_value >= self.log_bound - 1e-12


def count_qgraphs(m: int, n_outputs: int) -> GraphCount:
    if m < 1 or n_outputs < 2:
        raise ValueError("need m >= 1 and |Y| >= 2")
    value = Fraction(m ** (m * n_outputs), math.factorial(m))
    log_value = m * n_outputs * math.log(m) - math.lgamma(m + 1)
    return GraphCount(m, n_outputs, value, log_value, m * math.log(m))
