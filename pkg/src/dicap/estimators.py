"""Donsker-Varadhan estimators: DINE for directed information, MINE for MI.

All quantities are nats internally; :class:`EstimateReport` converts to bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import LstmParams, MlpParams, lstm_sequence, mlp_forward, one_hot

LN2 = math.log(2.0)


class EstimatorError(ValueError):
    pass


def dv_kl_loss(f_p, f_q) -> Tensor:
    """Donsker-Varadhan value mean_P(f) - log mean_Q(exp f), log-sum-exp stabilized."""
    f_p, f_q = ad.constant(f_p), ad.constant(f_q)
    if f_p.size == 0 or f_q.size == 0:
        raise EstimatorError("dv_kl_loss needs non-empty sample sets")
    flat_q = ad.reshape(f_q, (-1,))
    return ad.sub(ad.mean(f_p), ad.sub(ad.logsumexp(flat_q), math.log(flat_q.size)))


@dataclass
class KlFit:
    potential: MlpParams
    estimate: float  # nats, DV value on the training samples

    def evaluate(self, feat_p, feat_q) -> float:
        """DV value (nats) of the frozen potential on new samples."""
        fp = mlp_forward(self.potential, feat_p)[..., 0]
        fq = mlp_forward(self.potential, feat_q)[..., 0]
        return dv_kl_loss(fp, fq).item()


def train_dv_kl(
    feat_p,
    feat_q,
    rng: np.random.Generator,
    fc: tuple = (8,),
    iterations: int = 200,
    lr: float = 1e-2,
) -> KlFit:
    """Fit a DV potential by full-batch ascent; features are (n, d) arrays."""
    feat_p = np.asarray(feat_p, dtype=np.float64)
    feat_q = np.asarray(feat_q, dtype=np.float64)
    if feat_p.ndim == 1:
        feat_p, feat_q = feat_p[:, None], feat_q[:, None]
    if len(feat_p) == 0 or len(feat_q) == 0:
        raise EstimatorError("train_dv_kl needs non-empty sample sets")
    net = MlpParams.init([feat_p.shape[1], *fc, 1], rng, name="dv")
    opt = ad.Adam(net.params, lr=lr, maximize=True)
    for _ in range(iterations):
        with ad.Tape() as tape:
            val = dv_kl_loss(mlp_forward(net, feat_p)[..., 0], mlp_forward(net, feat_q)[..., 0])
        opt.step(ad.backward(tape, val, net.params))
    fit = KlFit(net, 0.0)
    fit.estimate = fit.evaluate(feat_p, feat_q)
    return fit


@dataclass
class EstimateReport:
    """DV estimates in bits.  ``di`` is defined as ``d_xy - d_y``."""

    d_y: float
    d_xy: float
    n: int
    seed: int | None = None
    stderr: float = float("nan")

    @property
    def di(self) -> float:
        return self.d_xy - self.d_y

    @classmethod
    def from_nats(cls, d_y: float, d_xy: float, **kw) -> "EstimateReport":
        return cls(d_y / LN2, d_xy / LN2, **kw)

    def as_dict(self) -> dict:
        return {
            "d_y_bits": self.d_y,
            "d_xy_bits": self.d_xy,
            "di_bits": self.di,
            "n": self.n,
            "seed": self.seed,
            "stderr_bits": self.stderr,
        }


# ---------------------------------------------------------------------------
# DINE


@dataclass
class DineState:
    """Recurrent state carried between consecutive segments of one trajectory."""

    h_y: np.ndarray
    c_y: np.ndarray
    h_xy: np.ndarray
    c_xy: np.ndarray
    x_last: np.ndarray
    y_last: np.ndarray


@dataclass
class DineOutput:
    gy_real: Tensor  # (steps, lanes)
    gy_ref: Tensor
    gxy_real: Tensor
    gxy_ref: Tensor
    state: DineState


class DineModel:
    """Two recurrent DV potentials.

    The y-net sees y^{t-1} through its LSTM trunk and scores the final symbol
    (real y_t or reference y~_t) with an MLP head; the xy-net sees
    (x^{t-1}, y^{t-1}) and scores (x_t, y_t) or (x_t, y~_t).
    """

    def __init__(self, n_x: int, n_y: int, rng: np.random.Generator, hidden: int = 64, fc: tuple = (64, 64)):
        self.n_x, self.n_y = n_x, n_y
        self.lstm_y = LstmParams.init(n_y, hidden, rng, "dine.y.lstm")
        self.head_y = MlpParams.init([hidden + n_y, *fc, 1], rng, name="dine.y.head")
        self.lstm_xy = LstmParams.init(n_x + n_y, hidden, rng, "dine.xy.lstm")
        self.head_xy = MlpParams.init([hidden + n_x + n_y, *fc, 1], rng, name="dine.xy.head")

    @property
    def params_y(self) -> list[Tensor]:
        return self.lstm_y.params + self.head_y.params

    @property
    def params_xy(self) -> list[Tensor]:
        return self.lstm_xy.params + self.head_xy.params

    @property
    def params(self) -> list[Tensor]:
        return self.params_y + self.params_xy

    def named_params(self, prefix: str = "dine") -> dict:
        out = {}
        for tag, group in (("y", self.params_y), ("xy", self.params_xy)):
            for i, p in enumerate(group):
                out[p.name or f"{prefix}.{tag}.{i}"] = p
        return out

    def zero_state(self, lanes: int) -> DineState:
        hy = self.lstm_y.hidden_dim
        hxy = self.lstm_xy.hidden_dim
        null = np.full(lanes, -1)
        return DineState(
            np.zeros((lanes, hy)), np.zeros((lanes, hy)), np.zeros((lanes, hxy)), np.zeros((lanes, hxy)), null, null
        )

    def forward(self, x, y, y_ref, state: DineState | None = None) -> DineOutput:
        """Evaluate both potentials on a time-major segment ``x[t, lane]``."""
        x, y, y_ref = np.asarray(x), np.asarray(y), np.asarray(y_ref)
        if x.shape != y.shape or y.shape != y_ref.shape or x.ndim != 2:
            raise ShapeError("dine forward", x.shape, y.shape, y_ref.shape)
        steps, lanes = x.shape
        if state is None:
            state = self.zero_state(lanes)
        ox, oy, oref = one_hot(x, self.n_x), one_hot(y, self.n_y), one_hot(y_ref, self.n_y)
        # trunk inputs at step t are the symbols of step t-1
        prev_y = np.concatenate([one_hot(state.y_last, self.n_y)[None], oy[:-1]], axis=0)
        prev_x = np.concatenate([one_hot(state.x_last, self.n_x)[None], ox[:-1]], axis=0)

        hs_y, (hy, cy) = lstm_sequence(self.lstm_y, prev_y, (Tensor(state.h_y), Tensor(state.c_y)))
        hs_xy, (hxy, cxy) = lstm_sequence(
            self.lstm_xy, np.concatenate([prev_x, prev_y], axis=-1), (Tensor(state.h_xy), Tensor(state.c_xy))
        )
        sym_y = np.stack([oy, oref])  # (2, steps, lanes, n_y)
        hy2 = ad.stack([hs_y, hs_y])
        gy = mlp_forward(self.head_y, ad.concat([hy2, sym_y], axis=-1))
        sym_xy = np.stack([np.concatenate([ox, oy], -1), np.concatenate([ox, oref], -1)])
        hxy2 = ad.stack([hs_xy, hs_xy])
        gxy = mlp_forward(self.head_xy, ad.concat([hxy2, sym_xy], axis=-1))

        new_state = DineState(hy.value, cy.value, hxy.value, cxy.value, x[-1].copy(), y[-1].copy())
        return DineOutput(gy[0, ..., 0], gy[1, ..., 0], gxy[0, ..., 0], gxy[1, ..., 0], new_state)

    def recenter(self, out: DineOutput, warmup: int = 0) -> None:
        """Shift each head's output bias by its reference log-normalizer.

        DV values are invariant to adding a constant to a potential, so this
        leaves both estimates unchanged while pinning the constant: after it,
        log mean exp(g(reference)) is about 0 and g itself approximates the
        log density ratio, which gives the reward proxy its intended scale.
        """
        for head, ref in ((self.head_y, out.gy_ref), (self.head_xy, out.gxy_ref)):
            v = ref.value[warmup:].ravel()
            m = v.max()
            head.biases[-1].value = head.biases[-1].value - (m + math.log(np.mean(np.exp(v - m))))


def dine_losses(out: DineOutput, warmup: int = 0) -> tuple[Tensor, Tensor]:
    """(D_Y, D_{Y||X}) DV values in nats from one forward pass; the first
    ``warmup`` steps are excluded from every mean."""
    steps = out.gy_real.shape[0]
    if warmup >= steps:
        raise EstimatorError("warm-up covers the whole trajectory")
    w = slice(warmup, None)
    d_y = dv_kl_loss(out.gy_real[w], out.gy_ref[w])
    d_xy = dv_kl_loss(out.gxy_real[w], out.gxy_ref[w])
    return d_y, d_xy


def trajectory_dine_losses(traj, model: DineModel, state: DineState | None = None, warmup: int = 0):
    if not (traj.x.shape == traj.y.shape == traj.y_ref.shape):
        raise EstimatorError("trajectory fields have mismatched lengths")
    out = model.forward(traj.x, traj.y, traj.y_ref, state)
    return dine_losses(out, warmup) + (out,)


def reward_proxy(out: DineOutput, t: int | None = None):
    """Per-step reward g_xy(y_t | x^t, y^{t-1}) - g_y(y_t | y^{t-1}), in nats."""
    r = out.gxy_real.value - out.gy_real.value
    return r if t is None else r[t]


# ---------------------------------------------------------------------------
# MINE


class MineModel:
    """Feed-forward critic g(x, y) on feature vectors."""

    def __init__(self, dim_x: int, dim_y: int, rng: np.random.Generator, fc: tuple = (64, 64)):
        self.dim_x, self.dim_y = dim_x, dim_y
        self.net = MlpParams.init([dim_x + dim_y, *fc, 1], rng, name="mine")

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def named_params(self) -> dict:
        return {p.name: p for p in self.params}

    def score(self, xf, yf) -> Tensor:
        xf, yf = np.asarray(xf, dtype=np.float64), np.asarray(yf, dtype=np.float64)
        if xf.ndim == 1:
            xf = xf[:, None]
        if yf.ndim == 1:
            yf = yf[:, None]
        return mlp_forward(self.net, np.concatenate([xf, yf], axis=-1))[..., 0]


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random single n-cycle: sigma(i) != i for every i."""
    if n < 2:
        raise EstimatorError("a derangement needs at least two samples")
    perm = rng.permutation(n)
    sigma = np.empty(n, dtype=np.int64)
    sigma[perm] = np.roll(perm, -1)
    return sigma


def mine_loss(model: MineModel, xf, yf, negatives: np.ndarray) -> tuple[Tensor, Tensor]:
    """DV MI estimate (nats) with joint pairs vs. (x_t, y_{sigma(t)}).

    Returns the estimate and the joint-pair scores g(x_t, y_t).
    """
    xf, yf = np.asarray(xf, dtype=np.float64), np.asarray(yf, dtype=np.float64)
    if len(xf) < 2:
        raise EstimatorError("MINE needs a batch of at least two pairs")
    joint = model.score(xf, yf)
    marg = model.score(xf, yf[negatives])
    return dv_kl_loss(joint, marg), joint


@dataclass
class MineReport:
    mi: float  # bits
    n: int
    seed: int | None = None
    stderr: float = float("nan")

    def as_dict(self) -> dict:
        return {"mi_bits": self.mi, "n": self.n, "seed": self.seed, "stderr_bits": self.stderr}


def mine_estimate(model: MineModel, xf, yf, rng: np.random.Generator, blocks: int = 10) -> tuple[float, float]:
    """Frozen-critic MINE value in bits plus a batch-means standard error."""
    n = len(xf)
    val, _ = mine_loss(model, xf, yf, derangement(n, rng))
    parts = []
    for idx in np.array_split(np.arange(n), blocks):
        if len(idx) >= 2:
            v, _ = mine_loss(model, xf[idx], yf[idx], derangement(len(idx), rng))
            parts.append(v.item())
    se = float(np.std(parts, ddof=1) / math.sqrt(len(parts))) / LN2 if len(parts) > 1 else float("nan")
    return val.item() / LN2, se


def block_stderr(out: DineOutput, warmup: int, blocks: int = 10) -> float:
    """Batch-means standard error (bits) of the DI estimate over lane blocks."""
    lanes = out.gy_real.shape[1]
    w = slice(warmup, None)
    vals = []
    if lanes >= blocks:
        groups = np.array_split(np.arange(lanes), blocks)
        pick = [(w, g) for g in groups]
    else:
        steps = np.arange(warmup, out.gy_real.shape[0])
        pick = [(chunk, slice(None)) for chunk in np.array_split(steps, blocks)]
    for tsel, lsel in pick:
        def dv(real, ref):
            a = real.value[tsel][:, lsel].ravel()
            b = ref.value[tsel][:, lsel].ravel()
            m = b.max()
            return a.mean() - (m + math.log(np.mean(np.exp(b - m))))

        vals.append(dv(out.gxy_real, out.gxy_ref) - dv(out.gy_real, out.gy_ref))
    return float(np.std(vals, ddof=1) / math.sqrt(len(vals))) / LN2


def mc_evaluate(
    model: DineModel,
    channel,
    policy,
    n_eval: int,
    feedback: bool,
    seed: int = 0,
    lanes: int = 20,
    warmup_frac: float = 0.1,
) -> EstimateReport:
    """Frozen-parameter DINE evaluation on a fresh rollout of ``n_eval`` steps.

    The rollout is split across ``lanes`` independent stretches of the same
    stationary process; the first ``warmup_frac`` of each stretch is dropped.
    """
    from .channels import sample_trajectory

    if n_eval < 10_000:
        raise EstimatorError("n_eval must be at least 1e4")
    rng = np.random.default_rng(seed)
    steps = -(-n_eval // lanes)
    traj = sample_trajectory(channel, policy, steps, feedback, rng, batch=lanes)
    out = model.forward(traj.x, traj.y, traj.y_ref)
    warmup = int(warmup_frac * steps)
    d_y, d_xy = dine_losses(out, warmup)
    return EstimateReport.from_nats(
        d_y.item(), d_xy.item(), n=(steps - warmup) * lanes, seed=seed, stderr=block_stderr(out, warmup)
    )
