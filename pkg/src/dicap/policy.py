"""Input-distribution optimization.

Two routes are provided:

* :func:`train_di` alternates DINE updates with a truncated policy-gradient
  step on a recurrent PMF generator (channels with memory, with or without
  feedback);
* :func:`train_mi` handles memoryless channels with a softmax-parameterized
  PMF, a MINE critic and the closed-form score-function gradient
  :func:`mi_policy_gradient`.
"""

from __future__ import annotations

import math
import time
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericOverflowError, Tape, Tensor
from .channels import ChannelSpec, FixedPolicy, Rollout, check_simplex, channel_step, mutual_information, output_law
from .clustering import kmeans
from .estimators import (
    LN2,
    DineModel,
    EstimateReport,
    EstimatorError,
    MineModel,
    MineReport,
    dine_losses,
    derangement,
    mc_evaluate,
    mine_estimate,
    mine_loss,
    reward_proxy,
)
from .nn import LstmParams, MlpParams, lstm_sequence, lstm_step, mlp_forward, one_hot, softmax_pmf


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# generator


class PmfGenerator:
    """Recurrent map (x_{t-1}, y_{t-1}, S_{t-1}) -> S_t -> p_t = softmax(FC(S_t)).

    With ``feedback=False`` the LSTM input is the previous channel input only,
    so the emitted PMFs cannot depend on the outputs.  The output layer starts
    at zero, which makes an untrained generator emit the uniform PMF.
    """

    def __init__(self, n_x: int, n_y: int, feedback: bool, rng: np.random.Generator, hidden: int = 32, fc: tuple = (32,)):
        self.n_x, self.n_y, self.feedback = n_x, n_y, feedback
        in_dim = n_x + (n_y if feedback else 0)
        self.lstm = LstmParams.init(in_dim, hidden, rng, "gen.lstm")
        self.head = MlpParams.init([hidden, *fc, n_x], rng, name="gen.head")
        self.head.weights[-1].value = np.zeros_like(self.head.weights[-1].value)

    @property
    def params(self) -> list[Tensor]:
        return self.lstm.params + self.head.params

    def named_params(self) -> dict:
        return {p.name: p for p in self.params}

    def zero_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros((batch, self.lstm.hidden_dim))
        return z, z.copy()

    def inputs(self, x_prev, y_prev) -> np.ndarray:
        feats = one_hot(x_prev, self.n_x)
        if self.feedback:
            feats = np.concatenate([feats, one_hot(y_prev, self.n_y)], axis=-1)
        return feats

    def logits_sequence(self, x_prev, y_prev, state) -> Tensor:
        """Logits (steps, batch, |X|) for time-major previous-symbol streams."""
        h, c = state
        hs, _ = lstm_sequence(self.lstm, self.inputs(x_prev, y_prev), (Tensor(h), Tensor(c)))
        return mlp_forward(self.head, hs)


def pmf_step(gen: PmfGenerator, x_prev, y_prev, state):
    """Advance the generator one step; returns (p_t, new_state) as arrays."""
    x_prev = np.asarray(x_prev)
    h, c = state
    h, c = lstm_step(gen.lstm, gen.inputs(x_prev, y_prev), (Tensor(h), Tensor(c)))
    p = softmax_pmf(mlp_forward(gen.head, h).value)
    return p, (h.value, c.value)


def mix_uniform(p, eps: float):
    return (1.0 - eps) * p + eps / p.shape[-1]


class GeneratorPolicy:
    """Adapter that lets a :class:`PmfGenerator` drive a :class:`Rollout`."""

    def __init__(self, gen: PmfGenerator, eps: float = 0.0):
        self.gen, self.eps = gen, eps
        self.state = None

    def reset(self, batch: int) -> None:
        self.state = self.gen.zero_state(batch)

    def step(self, x_prev, y_prev) -> np.ndarray:
        p, self.state = pmf_step(self.gen, x_prev, y_prev, self.state)
        return mix_uniform(p, self.eps) if self.eps else p


# ---------------------------------------------------------------------------
# objectives


def q_hat(r, i_hat: float, t: int, horizon: int) -> float:
    """Truncated value sum_{i=t}^{t+T-1} r_i - I_hat (0-based ``t``)."""
    r = np.asarray(r, dtype=np.float64)
    if t < 0 or horizon < 1 or t + horizon > len(r):
        raise ValueError(f"horizon overflow: t={t}, T={horizon}, n={len(r)}")
    return float(r[t : t + horizon].sum() - i_hat)


def q_hat_all(r, i_hat: float, horizon: int, per_step: bool = False) -> np.ndarray:
    """All Q estimates for t = 0 .. n-T-1 via prefix sums; ``r`` may carry lane axes.

    ``per_step=True`` subtracts the estimate from every summand instead of once.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    if n <= horizon:
        raise ValueError(f"need n > T (n={n}, T={horizon})")
    csum = np.concatenate([np.zeros((1,) + r.shape[1:]), np.cumsum(r, axis=0)])
    return csum[horizon : n] - csum[: n - horizon] - (horizon * i_hat if per_step else i_hat)


def policy_objective(logp: Tensor, r, i_hat: float, horizon: int, per_step: bool = False) -> Tensor:
    """J = 1/(n-T) sum_{t<n-T} log p_t(x_t) Q_t (averaged over lanes).

    ``logp`` is a taped (n,) or (n, lanes) tensor; ``r`` and ``i_hat`` are
    plain arrays so no gradient flows into the estimator.
    """
    n = logp.shape[0]
    if n <= horizon:
        raise ValueError(f"need n > T (n={n}, T={horizon})")
    q = q_hat_all(r, i_hat, horizon, per_step)
    return ad.mean(ad.mul(logp[: n - horizon], q))


def mi_policy_gradient(x, g, i_hat: float, phi) -> np.ndarray:
    """(1/n) sum_t (e_{x_t} - softmax(phi)) (g_t - I_hat)."""
    phi = np.asarray(phi, dtype=np.float64)
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(g, dtype=np.float64) - i_hat
    p = softmax_pmf(phi)
    e = np.bincount(x, weights=w, minlength=len(phi))
    return (e - p * w.sum()) / len(x)


def mine_policy_objective(phi: Tensor, x, g, i_hat: float) -> Tensor:
    """(1/n) sum_t log softmax(phi)[x_t] (g_t - I_hat); its gradient is Lemma-1's."""
    x = np.asarray(x, dtype=np.int64)
    logp = ad.log_softmax(phi)
    picked = ad.gather(ad.reshape(logp, (1, -1)) * np.ones((len(x), 1)), x)
    return ad.mean(ad.mul(picked, np.asarray(g, dtype=np.float64) - i_hat))


# ---------------------------------------------------------------------------
# DI training


@dataclass
class PolicyGradConfig:
    lanes: int = 64
    seg_len: int = 50  # n: steps per trajectory segment
    horizon: int = 10  # T
    ratio: int = 3
    iterations: int = 1500
    lr_dine: float = 1e-3
    lr_policy: float = 1e-3
    eval_len: int = 100_000
    eval_lanes: int = 20
    explore_eps: float = 0.01
    # < 0 keeps explore_eps fixed; otherwise eps moves linearly to this value
    explore_eps_final: float = -1.0
    warmup_frac: float = 0.1
    plateau_window: int = 200
    plateau_tol: float = 1e-3
    dine_hidden: int = 64
    dine_fc: tuple = (64, 64)
    gen_hidden: int = 32
    gen_fc: tuple = (32,)
    clip_norm: float = 5.0
    # "once": sum(r_i) - I_hat as written; "per_step": sum(r_i - I_hat)
    baseline: str = "once"
    # DINE-only updates on the unmixed final policy before evaluation
    refit_iters: int = 0

    def __post_init__(self):
        if self.baseline not in ("once", "per_step"):
            raise ValueError(f"baseline must be 'once' or 'per_step', got {self.baseline!r}")
        if not 1 <= self.horizon <= self.seg_len // 2:
            raise ValueError(f"need 1 <= T <= n/2 (T={self.horizon}, n={self.seg_len})")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        for name in ("lanes", "iterations", "eval_len", "eval_lanes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.refit_iters < 0:
            raise ValueError("refit_iters must be >= 0")
        if not 0.0 <= self.explore_eps < 1.0:
            raise ValueError("explore_eps must lie in [0, 1)")
        if self.explore_eps_final >= 1.0:
            raise ValueError("explore_eps_final must be < 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        self.dine_fc = tuple(self.dine_fc)
        self.gen_fc = tuple(self.gen_fc)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["dine_fc"] = list(self.dine_fc)
        d["gen_fc"] = list(self.gen_fc)
        return d


@dataclass
class TrainResult:
    status: str  # "ok" or "failed"
    report: EstimateReport | None
    generator: PmfGenerator | None
    dine: DineModel
    curve: list[dict] = field(default_factory=list)
    iterations: int = 0
    stopped: str = ""
    diagnostic: dict = field(default_factory=dict)
    wall_s: float = 0.0


def _discrete_alphabets(spec: ChannelSpec) -> tuple[int, int]:
    if spec.n_outputs == "continuous":
        raise ValueError("DINE training needs a finite output alphabet")
    return spec.n_inputs, spec.n_outputs


def _assert_isolated(grads: dict, allowed: list[Tensor], what: str) -> None:
    ids = {id(p) for p in allowed}
    stray = [t.name for t in grads if id(t) not in ids]
    if stray:
        raise TrainingError(f"{what} gradient reached foreign parameters: {stray}")


def _ascent_grads(root: Tensor, tape: Tape, params: list[Tensor], what: str) -> dict:
    reached = ad.backward(tape, root)
    _assert_isolated(reached, params, what)
    return {p: reached.get(p, np.zeros(p.shape)) for p in params}


class _Plateau:
    """Relative change of consecutive windowed means below ``tol``."""

    def __init__(self, window: int, tol: float):
        self.window, self.tol = window, tol
        self.values: list[float] = []

    def update(self, v: float) -> bool:
        self.values.append(v)
        w = self.window
        if len(self.values) < 2 * w:
            return False
        prev = float(np.mean(self.values[-2 * w : -w]))
        cur = float(np.mean(self.values[-w:]))
        return abs(cur - prev) <= self.tol * max(abs(prev), 1e-12)


class _DineTrainer:
    """DINE parameters, their optimizers and the carried recurrent state."""

    def __init__(self, model: DineModel, cfg: PolicyGradConfig, lanes: int):
        self.model, self.cfg = model, cfg
        self.opt_y = _adam(model.params_y, cfg.lr_dine, cfg.clip_norm)
        self.opt_xy = _adam(model.params_xy, cfg.lr_dine, cfg.clip_norm)
        self.state = model.zero_state(lanes)
        self.cold = True

    def warmup(self, steps: int) -> int:
        # only the first segment starts from a cold recurrent state
        w = int(self.cfg.warmup_frac * steps) if self.cold else 0
        self.cold = False
        return w

    def update(self, seg) -> tuple[float, float]:
        tr = seg.traj
        warm = self.warmup(len(tr))
        with Tape() as tape:
            out = self.model.forward(tr.x, tr.y, tr.y_ref, self.state)
            d_y, d_xy = dine_losses(out, warm)
            total = ad.add(d_y, d_xy)
        # the two potentials share no parameters, so ascending the sum
        # ascends each DV bound on its own parameter set
        grads = _ascent_grads(total, tape, self.model.params, "DINE")
        self.opt_y.step([grads[p] for p in self.model.params_y])
        self.opt_xy.step([grads[p] for p in self.model.params_xy])
        vals = d_y.item(), d_xy.item()
        if not all(map(math.isfinite, vals)):
            raise NumericOverflowError("dine_loss")
        self.model.recenter(out, warm)
        self.state = out.state
        return vals

    def score(self, seg):
        tr = seg.traj
        warm = self.warmup(len(tr))
        out = self.model.forward(tr.x, tr.y, tr.y_ref, self.state)
        d_y, d_xy = dine_losses(out, warm)
        self.state = out.state
        return out, d_y.item(), d_xy.item(), warm


def _adam(params, lr, clip):
    return ad.Adam(params, lr=lr, maximize=True, clip_norm=clip)


def explore_schedule(cfg: PolicyGradConfig, it: int) -> float:
    """Mixing weight at iteration ``it`` (1-based)."""
    if cfg.explore_eps_final < 0 or cfg.iterations == 1:
        return cfg.explore_eps
    frac = (it - 1) / (cfg.iterations - 1)
    return cfg.explore_eps + frac * (cfg.explore_eps_final - cfg.explore_eps)


def _policy_update(gen: PmfGenerator, opt, seg, out, i_hat: float, warm: int, cfg: PolicyGradConfig, eps: float) -> None:
    tr = seg.traj
    n = len(tr)
    x_prev = np.concatenate([seg.x_prev0[None], tr.x[:-1]], axis=0)
    if gen.feedback:
        y_prev = np.concatenate([seg.y_prev0[None], tr.y[:-1]], axis=0)
    else:
        y_prev = np.full_like(x_prev, -1)
    r = reward_proxy(out)[warm:]
    with Tape() as tape:
        logits = gen.logits_sequence(x_prev, y_prev, seg.policy_state0)
        probs = ad.softmax(logits[warm:])
        if eps:
            probs = ad.add(ad.mul(probs, 1.0 - eps), eps / gen.n_x)
        logp = ad.gather(ad.log(probs), tr.x[warm:])
        j = policy_objective(logp, r, i_hat, min(cfg.horizon, (n - warm) // 2), cfg.baseline == "per_step")
    grads = _ascent_grads(j, tape, gen.params, "policy")
    opt.step(grads)


def train_di(spec: ChannelSpec, cfg: PolicyGradConfig, feedback: bool, seed: int = 0, log=None) -> TrainResult:
    """Alternating DINE / policy-gradient optimization of the DI rate.

    Each iteration draws ``ratio`` fresh segments for DINE updates and one for
    the policy update, all continuing the same multi-lane rollout.  Training
    stops on the iteration cap or a plateau of the windowed DI estimate.
    Optionally DINE alone is then refit for ``refit_iters`` updates on the
    unmixed policy, and a frozen Monte-Carlo evaluation of ``eval_len`` steps
    produces the report.
    """
    n_x, n_y = _discrete_alphabets(spec)
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    net_rng, roll_rng = (np.random.default_rng(s) for s in rng.integers(2**63, size=2))
    dine = DineModel(n_x, n_y, net_rng, hidden=cfg.dine_hidden, fc=cfg.dine_fc)
    gen = PmfGenerator(n_x, n_y, feedback, net_rng, hidden=cfg.gen_hidden, fc=cfg.gen_fc)
    opt = _adam(gen.params, cfg.lr_policy, cfg.clip_norm)
    trainer = _DineTrainer(dine, cfg, cfg.lanes)
    rollout = Rollout(spec, GeneratorPolicy(gen, cfg.explore_eps), cfg.lanes, feedback, roll_rng)
    plateau = _Plateau(cfg.plateau_window, cfg.plateau_tol)
    curve: list[dict] = []
    stopped = "iterations"
    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            rollout.policy.eps = explore_schedule(cfg, it)
            for _ in range(cfg.ratio):
                d_y, d_xy = trainer.update(rollout.segment(cfg.seg_len))
            seg = rollout.segment(cfg.seg_len)
            out, s_y, s_xy, warm = trainer.score(seg)
            i_hat = s_xy - s_y
            if not math.isfinite(i_hat):
                raise NumericOverflowError("dine_loss")
            _policy_update(gen, opt, seg, out, i_hat, warm, cfg, rollout.policy.eps)
            row = {"iter": it, "d_y_bits": d_y / LN2, "d_xy_bits": d_xy / LN2, "di_bits": i_hat / LN2}
            curve.append(row)
            if log is not None:
                log(row)
            if plateau.update(row["di_bits"]):
                stopped = "plateau"
                break
        # the rollout continues with exploration switched off
        rollout.policy.eps = 0.0
        for _ in range(cfg.refit_iters):
            trainer.update(rollout.segment(cfg.seg_len))
    except (NumericOverflowError, FloatingPointError) as exc:
        return TrainResult(
            "failed", None, gen, dine, curve, it, "diverged",
            {"iteration": it, "error": str(exc), "last": curve[-1] if curve else None},
            time.perf_counter() - t_start,
        )
    report = mc_evaluate(
        dine, spec, GeneratorPolicy(gen), cfg.eval_len, feedback,
        seed=int(rng.integers(2**31)), lanes=cfg.eval_lanes, warmup_frac=cfg.warmup_frac,
    )
    report.seed = seed
    return TrainResult("ok", report, gen, dine, curve, it, stopped, {}, time.perf_counter() - t_start)


def train_dine(spec: ChannelSpec, policy, cfg: PolicyGradConfig, feedback: bool, seed: int = 0, log=None) -> TrainResult:
    """Estimation only: train DINE on rollouts of a fixed ``policy``."""
    n_x, n_y = _discrete_alphabets(spec)
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    net_rng, roll_rng = (np.random.default_rng(s) for s in rng.integers(2**63, size=2))
    dine = DineModel(n_x, n_y, net_rng, hidden=cfg.dine_hidden, fc=cfg.dine_fc)
    trainer = _DineTrainer(dine, cfg, cfg.lanes)
    rollout = Rollout(spec, policy, cfg.lanes, feedback, roll_rng)
    plateau = _Plateau(cfg.plateau_window, cfg.plateau_tol)
    curve: list[dict] = []
    stopped = "iterations"
    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            d_y, d_xy = trainer.update(rollout.segment(cfg.seg_len))
            row = {"iter": it, "d_y_bits": d_y / LN2, "d_xy_bits": d_xy / LN2, "di_bits": (d_xy - d_y) / LN2}
            curve.append(row)
            if log is not None:
                log(row)
            if plateau.update(row["di_bits"]):
                stopped = "plateau"
                break
    except (NumericOverflowError, FloatingPointError) as exc:
        return TrainResult(
            "failed", None, None, dine, curve, it, "diverged",
            {"iteration": it, "error": str(exc)}, time.perf_counter() - t_start,
        )
    report = mc_evaluate(
        dine, spec, policy, cfg.eval_len, feedback,
        seed=int(rng.integers(2**31)), lanes=cfg.eval_lanes, warmup_frac=cfg.warmup_frac,
    )
    report.seed = seed
    return TrainResult("ok", report, None, dine, curve, it, stopped, {}, time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# memoryless route (MINE + closed-form gradient)


@dataclass
class MiTrainConfig:
    batch: int = 2000
    iterations: int = 1500
    ratio: int = 3
    lr_critic: float = 2e-3
    lr_phi: float = 2e-2
    eval_n: int = 100_000
    critic_fc: tuple = (64, 64)
    clip_norm: float = 5.0
    plateau_window: int = 200
    plateau_tol: float = 1e-3
    # the reported phi is the running mean over this trailing fraction of iterations
    average_frac: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.average_frac < 1.0:
            raise ValueError("average_frac must lie in [0, 1)")
        if self.batch < 2:
            raise ValueError("batch must hold at least two pairs")
        if self.ratio < 1 or self.iterations < 1:
            raise ValueError("ratio and iterations must be positive")
        self.critic_fc = tuple(self.critic_fc)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["critic_fc"] = list(self.critic_fc)
        return d


@dataclass
class MiTrainResult:
    status: str
    report: MineReport | None
    pmf: np.ndarray
    phi: np.ndarray
    critic: MineModel
    curve: list[dict] = field(default_factory=list)
    iterations: int = 0
    stopped: str = ""
    diagnostic: dict = field(default_factory=dict)
    wall_s: float = 0.0


def features(spec: ChannelSpec, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Critic inputs.  Inputs are always one-hot symbol indices.  AWGN
    outputs are scaled to unit output power (invertible, so MI is unchanged)
    and complex outputs become (Re, Im) pairs."""
    x, y = np.asarray(x), np.asarray(y)
    if spec.n_outputs != "continuous":
        return one_hot(x, spec.n_inputs), one_hot(y, spec.n_outputs)
    pts = np.asarray(spec.points)
    peak = float(np.max(np.maximum(np.abs(pts.real), np.abs(pts.imag))))
    yv = y / math.sqrt(peak**2 + spec.sigma**2)
    # a scalar amplitude input forces the critic to learn a sharp ridge y ~ x,
    # which it underfits at high SNR and biases the PMF gradient
    xf = one_hot(x, len(pts))
    if np.iscomplexobj(pts):
        return xf, np.stack([yv.real, yv.imag], -1)
    return xf, np.real(yv)[:, None]


def _draw(spec, pmf, n, rng):
    x = rng.choice(len(pmf), size=n, p=pmf)
    y, _ = channel_step(spec, np.zeros(n, dtype=np.int64), x, rng)
    return x, y


def train_mi(spec: ChannelSpec, cfg: MiTrainConfig, seed: int = 0, phi0=None, log=None) -> MiTrainResult:
    """Capacity of a memoryless channel: p = softmax(phi), MINE critic, Lemma-1 ascent."""
    if not spec.memoryless:
        raise ValueError(f"{spec.kind} has memory; use train_di")
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    m = spec.n_inputs
    phi = np.zeros(m) if phi0 is None else np.asarray(phi0, dtype=np.float64).copy()
    xf0, yf0 = features(spec, np.zeros(1, dtype=np.int64), _draw(spec, np.full(m, 1 / m), 1, rng)[1])
    critic = MineModel(xf0.shape[-1], yf0.shape[-1], rng, fc=cfg.critic_fc)
    opt_c = _adam(critic.params, cfg.lr_critic, cfg.clip_norm)
    phi_t = ad.parameter(phi, "phi")
    opt_phi = _adam([phi_t], cfg.lr_phi, None)
    law = output_law(spec)[0] if spec.n_outputs != "continuous" else None
    plateau = _Plateau(cfg.plateau_window, cfg.plateau_tol)
    curve: list[dict] = []
    stopped = "iterations"
    it = 0
    avg_from = int((1.0 - cfg.average_frac) * cfg.iterations) if cfg.average_frac else cfg.iterations
    phi_sum, phi_cnt = np.zeros(m), 0
    try:
        for it in range(1, cfg.iterations + 1):
            pmf = softmax_pmf(phi_t.value)
            for _ in range(cfg.ratio):
                x, y = _draw(spec, pmf, cfg.batch, rng)
                xf, yf = features(spec, x, y)
                with Tape() as tape:
                    est, _ = mine_loss(critic, xf, yf, derangement(cfg.batch, rng))
                opt_c.step(_ascent_grads(est, tape, critic.params, "MINE critic"))
            x, y = _draw(spec, pmf, cfg.batch, rng)
            xf, yf = features(spec, x, y)
            est, g = mine_loss(critic, xf, yf, derangement(cfg.batch, rng))
            i_hat = est.item()
            if not math.isfinite(i_hat):
                raise NumericOverflowError("mine_loss")
            opt_phi.step([mi_policy_gradient(x, g.value, i_hat, phi_t.value)])
            if it > avg_from:
                phi_sum += phi_t.value
                phi_cnt += 1
            row = {"iter": it, "mi_bits": i_hat / LN2}
            if law is not None:
                row["exact_mi_bits"] = mutual_information(law, softmax_pmf(phi_t.value))
            curve.append(row)
            if log is not None:
                log(row)
            if plateau.update(row["mi_bits"]):
                stopped = "plateau"
                break
    except (NumericOverflowError, FloatingPointError) as exc:
        return MiTrainResult(
            "failed", None, softmax_pmf(phi_t.value), phi_t.value.copy(), critic, curve, it, "diverged",
            {"iteration": it, "error": str(exc)}, time.perf_counter() - t_start,
        )
    phi = phi_sum / phi_cnt if phi_cnt else phi_t.value.copy()
    pmf = softmax_pmf(phi)
    x, y = _draw(spec, pmf, cfg.eval_n, rng)
    xf, yf = features(spec, x, y)
    mi, se = mine_estimate(critic, xf, yf, rng)
    return MiTrainResult(
        "ok", MineReport(mi, cfg.eval_n, seed, se), pmf, phi, critic, curve, it, stopped, {},
        time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# analysis


@dataclass
class PmfClusters:
    centroids: np.ndarray  # (k, |X|)
    labels: np.ndarray  # (steps,)
    inertia: float
    # (cluster_t, x_t, y_t, s_t) -> Counter of cluster_{t+1}
    transitions: dict

    def modal_table(self) -> dict:
        return {key: cnt.most_common(1)[0][0] for key, cnt in self.transitions.items()}

    def purity(self) -> float:
        tot = sum(sum(c.values()) for c in self.transitions.values())
        top = sum(c.most_common(1)[0][1] for c in self.transitions.values())
        return top / tot if tot else 1.0


def cluster_learned_pmf(traj, k: int, seed: int = 0, lane: int = 0, restarts: int = 10) -> PmfClusters:
    """k-means on the emitted PMFs of one lane plus the cluster transition table."""
    pmf = traj.pmf[:, lane]
    res = kmeans(pmf, k, seed=seed, restarts=restarts)
    x, y, s = traj.x[:, lane], traj.y[:, lane], traj.s[:, lane]
    table: dict = defaultdict(Counter)
    for t in range(len(pmf) - 1):
        table[(int(res.labels[t]), int(x[t]), int(y[t]), int(s[t]))][int(res.labels[t + 1])] += 1
    return PmfClusters(res.centroids, res.labels, res.inertia, dict(table))


def generator_trajectory(spec: ChannelSpec, gen: PmfGenerator, n: int, seed: int = 0, lanes: int = 1):
    """Evaluation rollout (no exploration) of a trained generator."""
    rng = np.random.default_rng(seed)
    return Rollout(spec, GeneratorPolicy(gen), lanes, gen.feedback, rng).segment(n).traj


__all__ = [
    "PmfGenerator",
    "GeneratorPolicy",
    "PolicyGradConfig",
    "MiTrainConfig",
    "TrainResult",
    "MiTrainResult",
    "TrainingError",
    "pmf_step",
    "q_hat",
    "q_hat_all",
    "policy_objective",
    "mi_policy_gradient",
    "mine_policy_objective",
    "train_di",
    "train_dine",
    "train_mi",
    "features",
    "cluster_learned_pmf",
    "generator_trajectory",
    "FixedPolicy",
    "check_simplex",
]
