"""Sampleable channel kernels and exact-capacity oracles.

Finite-state channels are described by a single kernel tensor
``K[s, x, y, s'] = P(y, s' | x, s)``: ``s`` is the state entering the output
law at time ``t`` and ``s'`` the state after the output is produced.  The
optimizers only ever *sample* from it; the oracles and the Q-graph bound
computation read it directly.
"""

from __future__ import annotations

import csv
import math
from functools import lru_cache
from dataclasses import dataclass, field, replace

import numpy as np

KINDS = ("bsc", "z", "s", "ge", "ising", "trapdoor", "nost", "post", "awgn")


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    kind: str
    p: float = 0.5
    eta: float = 0.0
    b: float = 0.1
    g: float = 0.3
    p_good: float = 0.1
    p_bad: float = 0.4
    sigma: float = 1.0
    points: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ChannelError(f"unknown channel kind {self.kind!r}")
        for name in ("p", "eta", "b", "g", "p_good", "p_bad"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ChannelError(f"{self.kind}: {name}={v} outside [0, 1]")
        if self.kind == "awgn":
            if not self.sigma > 0:
                raise ChannelError("awgn: sigma must be positive")
            if len(self.points) < 2:
                raise ChannelError("awgn: need at least two constellation points")

    # constructors -----------------------------------------------------
    @classmethod
    def bsc(cls, p):
        return cls("bsc", p=p)

    @classmethod
    def z_channel(cls, p):
        return cls("z", p=p)

    @classmethod
    def s_channel(cls, p):
        return cls("s", p=p)

    @classmethod
    def gilbert_elliott(cls, b, g, p_good=0.1, p_bad=0.4):
        return cls("ge", b=b, g=g, p_good=p_good, p_bad=p_bad)

    @classmethod
    def ising(cls):
        return cls("ising")

    @classmethod
    def trapdoor(cls):
        return cls("trapdoor")

    @classmethod
    def nost(cls, p, eta):
        return cls("nost", p=p, eta=eta)

    @classmethod
    def post(cls, p):
        return cls("post", p=p)

    @classmethod
    def awgn(cls, sigma, points):
        return cls("awgn", sigma=sigma, points=tuple(points))

    # alphabets --------------------------------------------------------
    @property
    def n_inputs(self) -> int:
        return len(self.points) if self.kind == "awgn" else 2

    @property
    def n_outputs(self):
        return "continuous" if self.kind == "awgn" else 2

    @property
    def n_states(self) -> int:
        return 1 if self.kind in ("bsc", "z", "s", "awgn") else 2

    @property
    def memoryless(self) -> bool:
        return self.n_states == 1

    @property
    def unifilar(self) -> bool:
        """State is a deterministic function of (state, input, output)."""
        if self.kind == "nost":
            return self.eta in (0.0, 1.0)
        return self.kind in ("ising", "trapdoor", "post") or self.memoryless

    def with_params(self, **kw) -> "ChannelSpec":
        return replace(self, **kw)


def _z_law(p):
    # rows x, cols y
    return np.array([[1.0, 0.0], [p, 1.0 - p]])


def _s_law(p):
    return np.array([[1.0 - p, p], [0.0, 1.0]])


def _bsc_law(p):
    return np.array([[1.0 - p, p], [p, 1.0 - p]])


def kernel(spec: ChannelSpec) -> np.ndarray:
    """Return ``K[s, x, y, s'] = P(y, s' | x, s)`` for finite-output channels (read-only)."""
    return _kernel(spec)


@lru_cache(maxsize=256)
def _kernel(spec: ChannelSpec) -> np.ndarray:
    K = _build_kernel(spec)
    K.setflags(write=False)
    return K


def _build_kernel(spec: ChannelSpec) -> np.ndarray:
    k = spec.kind
    if k == "awgn":
        raise ChannelError("awgn has a continuous output; no finite kernel")
    if k in ("bsc", "z", "s"):
        law = {"bsc": _bsc_law, "z": _z_law, "s": _s_law}[k](spec.p)
        return law[None, :, :, None].copy()
    K = np.zeros((2, 2, 2, 2))
    if k == "ge":
        trans = np.array([[1 - spec.b, spec.b], [spec.g, 1 - spec.g]])
        for s, flip in enumerate((spec.p_good, spec.p_bad)):
            K[s] = _bsc_law(flip)[:, :, None] * trans[s][None, None, :]
        return K
    p = 0.5 if k in ("ising", "trapdoor") else spec.p
    laws = (_z_law(p), _s_law(p))
    eta = 0.0 if k == "post" else spec.eta
    for s in range(2):
        for x in range(2):
            for y in range(2):
                py = laws[s][x, y]
                if k == "ising":
                    K[s, x, y, x] += py
                elif k == "trapdoor":
                    K[s, x, y, s ^ x ^ y] += py
                else:  # nost / post: next state is a Z_eta corruption of y
                    if y == 0:
                        K[s, x, y, 0] += py
                    else:
                        K[s, x, y, 0] += py * eta
                        K[s, x, y, 1] += py * (1 - eta)
    return K


def output_law(spec: ChannelSpec) -> np.ndarray:
    """``W[s, x, y] = P(y | x, s)``."""
    return kernel(spec).sum(axis=3)


def initial_state_pmf(spec: ChannelSpec) -> np.ndarray:
    if spec.n_states == 1:
        return np.ones(1)
    if spec.kind == "ge":
        tot = spec.b + spec.g
        return np.array([spec.g / tot, spec.b / tot]) if tot > 0 else np.array([1.0, 0.0])
    return np.full(2, 0.5)


def initial_states(spec: ChannelSpec, batch: int, rng: np.random.Generator) -> np.ndarray:
    pmf = initial_state_pmf(spec)
    return rng.choice(len(pmf), size=batch, p=pmf)


def channel_step(spec: ChannelSpec, state, x, rng: np.random.Generator):
    """Draw ``y`` and the next state.  Works on scalars or equal-shape arrays."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x))
    state = np.broadcast_to(np.atleast_1d(np.asarray(state)), x.shape)
    if np.any((x < 0) | (x >= spec.n_inputs)):
        raise ChannelError(f"{spec.kind}: input symbol outside alphabet")
    if spec.kind == "awgn":
        pts = np.asarray(spec.points)
        noise = rng.standard_normal(x.shape)
        if np.iscomplexobj(pts):
            # box-constrained complex input: independent noise per component
            noise = noise + 1j * rng.standard_normal(x.shape)
        y = pts[x] + spec.sigma * noise
        return (y[0], state[0]) if scalar else (y, state.copy())
    if np.any((state < 0) | (state >= spec.n_states)):
        raise ChannelError(f"{spec.kind}: invalid channel state")
    K = kernel(spec)
    rows = K[state, x].reshape(x.shape + (-1,))
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random(x.shape + (1,))
    idx = np.minimum((u >= cdf).sum(axis=-1), rows.shape[-1] - 1)
    y, s_next = np.divmod(idx, spec.n_states)
    if scalar:
        return int(y[0]), int(s_next[0])
    return y, s_next


def next_state(spec: ChannelSpec, state, x, y, rng: np.random.Generator | None = None):
    """State evolution given an observed output (sampled when not unifilar)."""
    K = kernel(spec)
    row = K[state, x, y]
    tot = row.sum()
    if tot <= 0:
        raise ChannelError(f"{spec.kind}: output {y} impossible from state {state}, input {x}")
    row = row / tot
    if np.count_nonzero(row) == 1:
        return int(np.argmax(row))
    rng = rng or np.random.default_rng()
    return int(rng.choice(len(row), p=row))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Time-major arrays: ``x[t, lane]``; ``pmf[t, lane, :]``.

    ``s`` holds the latent channel state after step t.  It is logged for the
    oracles and the Q-graph supervision only; the optimizers never read it.
    """

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    pmf: np.ndarray
    logp: np.ndarray
    y_ref: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("y", "s", "pmf", "logp", "y_ref"):
            if getattr(self, name).shape[0] != n:
                raise ChannelError(f"trajectory field {name} has mismatched length")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def lanes(self) -> int:
        return self.x.shape[1]

    def to_csv(self, path, lane: int = 0) -> None:
        k = self.pmf.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "s"] + [f"p_{i}" for i in range(k)])
            for t in range(len(self)):
                w.writerow(
                    [t + 1, int(self.x[t, lane]), self.y[t, lane], int(self.s[t, lane])]
                    + [repr(float(v)) for v in self.pmf[t, lane]]
                )


class FixedPolicy:
    """I.i.d. inputs from a fixed PMF (the same for every lane and step)."""

    def __init__(self, pmf):
        self.pmf = np.asarray(pmf, dtype=np.float64)

    def reset(self, batch: int) -> None:
        self.batch = batch

    def step(self, x_prev, y_prev) -> np.ndarray:
        return np.broadcast_to(self.pmf, (len(x_prev), len(self.pmf)))


def check_simplex(p: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ChannelError("policy emitted a vector outside the probability simplex")


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), p.shape[-1] - 1)


@dataclass
class Segment:
    """A rollout chunk plus what is needed to replay the policy over it."""

    traj: Trajectory
    x_prev0: np.ndarray
    y_prev0: np.ndarray
    policy_state0: object
    t0: int


class Rollout:
    """Stateful multi-lane rollout: consecutive segments continue one process.

    Channel state, previous symbols and the policy's recurrent state persist
    across :meth:`segment` calls.  ``policy`` exposes ``reset(batch)`` and
    ``step(x_prev, y_prev) -> (batch, |X|)``; a previous symbol of -1 means
    "no symbol yet".  Without feedback the policy always receives -1 for
    ``y_prev``.
    """

    def __init__(self, spec: ChannelSpec, policy, lanes: int, feedback: bool, rng: np.random.Generator, state=None):
        self.spec, self.policy, self.lanes, self.feedback, self.rng = spec, policy, lanes, feedback, rng
        self.s = initial_states(spec, lanes, rng) if state is None else np.asarray(state).copy()
        policy.reset(lanes)
        self.x_prev = np.full(lanes, -1)
        self.y_prev = np.full(lanes, -1)
        self.t = 0

    def segment(self, n: int) -> Segment:
        if n < 1:
            raise ChannelError("trajectory length must be >= 1")
        spec, rng, lanes = self.spec, self.rng, self.lanes
        continuous = spec.n_outputs == "continuous"
        snap = getattr(self.policy, "state", None)
        start = Segment(None, self.x_prev.copy(), self.y_prev.copy(), snap, self.t)
        null = np.full(lanes, -1)
        if continuous:
            ydt = np.complex128 if np.iscomplexobj(np.asarray(spec.points)) else np.float64
        else:
            ydt = np.int64
        xs = np.zeros((n, lanes), dtype=np.int64)
        ys = np.zeros((n, lanes), dtype=ydt)
        ss = np.zeros((n, lanes), dtype=np.int64)
        pm = np.zeros((n, lanes, spec.n_inputs))
        lp = np.zeros((n, lanes))
        rows = np.arange(lanes)
        x_prev, y_prev, s = self.x_prev, self.y_prev, self.s
        for t in range(n):
            # continuous outputs are never fed back as symbols
            fb = y_prev if (self.feedback and not continuous) else null
            p = np.asarray(self.policy.step(x_prev, fb))
            check_simplex(p)
            x = sample_categorical(p, rng)
            y, s = channel_step(spec, s, x, rng)
            xs[t], ys[t], ss[t], pm[t] = x, y, s, p
            lp[t] = np.log(p[rows, x])
            x_prev, y_prev = x, (null if continuous else y)
        self.x_prev, self.y_prev, self.s = x_prev, y_prev, s
        self.t += n
        if continuous:
            y_ref = np.zeros((n, lanes))
        else:
            y_ref = rng.integers(0, spec.n_outputs, size=(n, lanes))
        start.traj = Trajectory(xs, ys, ss, pm, lp, y_ref)
        return start


def sample_trajectory(
    spec: ChannelSpec,
    policy,
    n: int,
    feedback: bool,
    rng: np.random.Generator,
    batch: int = 1,
    state=None,
) -> Trajectory:
    """Roll ``policy`` through the channel for ``n`` steps on ``batch`` lanes."""
    return Rollout(spec, policy, batch, feedback, rng, state).segment(n).traj


# ---------------------------------------------------------------------------
# oracles


def h2(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def mutual_information(law: np.ndarray, px: np.ndarray) -> float:
    """I(X;Y) in bits for a memoryless law ``law[x, y]`` and input PMF ``px``."""
    px = np.asarray(px, dtype=np.float64)
    py = px @ law
    joint = px[:, None] * law
    mask = joint > 0
    ratio = law[mask] / np.broadcast_to(py[None, :], law.shape)[mask]
    return float(np.sum(joint[mask] * np.log2(ratio)))


def z_capacity(p: float) -> float:
    if p >= 1.0:
        return 0.0
    return math.log2(1.0 + (1.0 - p) * p ** (p / (1.0 - p)))


def z_optimal_input(p: float) -> float:
    """Capacity-achieving P(X=1) for the Z-channel with input 0 noiseless."""
    if p >= 1.0:
        return 0.0
    return 1.0 / ((1.0 - p) * (1.0 + 2.0 ** (h2(p) / (1.0 - p))))


def ge_entropy_rate(
    spec: ChannelSpec, n: int = 1_000_000, seed: int = 0, lanes: int = 100
) -> tuple[float, float]:
    """Entropy rate (bits) of the GE noise process and its Monte-Carlo std error.

    Simulates the noise on ``lanes`` independent chains and averages
    -log2 p(z_t | z^{t-1}) obtained from the forward filter on the
    Good/Bad belief.
    """
    rng = np.random.default_rng(seed)
    steps = max(1, n // lanes)
    trans = np.array([[1 - spec.b, spec.b], [spec.g, 1 - spec.g]])
    flip = np.array([spec.p_good, spec.p_bad])
    s = initial_states(spec, lanes, rng)
    belief = np.tile(initial_state_pmf(spec), (lanes, 1))
    burn = steps // 10
    total = np.zeros(lanes)
    for t in range(steps):
        z = (rng.random(lanes) < flip[s]).astype(np.int64)
        pz1 = belief @ flip
        pz = np.where(z == 1, pz1, 1.0 - pz1)
        if t >= burn:
            total -= np.log2(pz)
        like = np.where(z[:, None] == 1, flip[None, :], 1.0 - flip[None, :])
        post = belief * like
        post /= post.sum(axis=1, keepdims=True)
        belief = post @ trans
        s = np.where(rng.random(lanes) < trans[s, 1], 1, 0)
    per_lane = total / (steps - burn)
    return float(per_lane.mean()), float(per_lane.std(ddof=1) / math.sqrt(lanes))


def iid_di_rate(
    spec: ChannelSpec, pmf, n: int = 200_000, seed: int = 0, lanes: int = 50
) -> tuple[float, float]:
    """DI rate (bits) of i.i.d. inputs ``pmf`` through a finite-state channel.

    Forward filters on the channel state give -log p(y_t | y^{t-1}) and
    -log p(y_t | x^t, y^{t-1}); their difference is averaged along a
    simulated trajectory.  Returns (rate, standard error over lanes).
    """
    K = kernel(spec)
    pmf = np.asarray(pmf, dtype=np.float64)
    W = K.sum(axis=3)  # [s, x, y]
    rng = np.random.default_rng(seed)
    steps = max(2, n // lanes)
    burn = steps // 10
    s = initial_states(spec, lanes, rng)
    b_y = np.tile(initial_state_pmf(spec), (lanes, 1))  # p(s_t | y^{t-1})
    b_xy = b_y.copy()  # p(s_t | x^{t-1}, y^{t-1})
    rows = np.arange(lanes)
    total = np.zeros(lanes)
    for t in range(steps):
        x = sample_categorical(np.broadcast_to(pmf, (lanes, len(pmf))), rng)
        y, s = channel_step(spec, s, x, rng)
        # p(y | y^{t-1}) = sum_s b(s) sum_x pmf(x) W(y|x,s)
        wy = np.einsum("x,sxy->sy", pmf, W)[:, y].T  # (lanes, S)
        py = (b_y * wy).sum(1)
        wxy = W[:, x, y].T  # (lanes, S)
        pxy = (b_xy * wxy).sum(1)
        if t >= burn:
            total += np.log2(pxy) - np.log2(py)
        # posterior over (s, s') then marginalize to the next state
        ky = np.einsum("x,sxyt->syt", pmf, K)[:, y, :].transpose(1, 0, 2)  # (lanes, S, S')
        b_y = np.einsum("ls,lst->lt", b_y, ky)
        b_y /= b_y.sum(1, keepdims=True)
        kxy = K[:, x, y, :].transpose(1, 0, 2)
        b_xy = np.einsum("ls,lst->lt", b_xy, kxy)
        b_xy /= b_xy.sum(1, keepdims=True)
    per_lane = total / (steps - burn)
    return float(per_lane.mean()), float(per_lane.std(ddof=1) / math.sqrt(lanes))


def exact_capacity_oracle(spec: ChannelSpec, feedback: bool = False, **kw):
    """Capacity in bits when a closed form (or consistent oracle) exists, else None."""
    k = spec.kind
    if k == "bsc":
        return 1.0 - h2(spec.p)
    if k in ("z", "s"):
        return z_capacity(spec.p)
    if k == "post" or (k == "nost" and spec.eta == 0.0):
        return z_capacity(spec.p)
    if k == "trapdoor" and feedback:
        return math.log2((1.0 + math.sqrt(5.0)) / 2.0)
    if k == "ge":
        rate, _ = ge_entropy_rate(spec, **kw)
        return 1.0 - rate
    return None


def grid_capacity(law: np.ndarray, step: float = 1e-3) -> tuple[float, float]:
    """Brute-force binary-input capacity: max over P(X=1) on a grid."""
    qs = np.arange(0.0, 1.0 + step / 2, step)
    vals = [mutual_information(law, np.array([1 - q, q])) for q in qs]
    i = int(np.argmax(vals))
    return vals[i], float(qs[i])
