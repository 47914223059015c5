"""Probabilistic shaping of PAM/QAM inputs on the peak-limited AWGN channel.

SNR is the peak ratio A^2 / sigma^2 in dB, with sigma the noise standard
deviation per real dimension.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, roots_hermite

from .channels import ChannelSpec
from .policy import MiTrainConfig, train_mi


@dataclass(frozen=True)
class Constellation:
    kind: str  # "pam" or "qam"
    points: np.ndarray
    amplitude: float

    @property
    def order(self) -> int:
        return len(self.points)

    @property
    def is_complex(self) -> bool:
        return self.kind == "qam"

    @property
    def side(self) -> int:
        """PAM order of each real component."""
        return math.isqrt(self.order) if self.is_complex else self.order


def pam_points(k: int, amplitude: float) -> np.ndarray:
    return np.linspace(-amplitude, amplitude, k)


def make_constellation(kind: str, k: int, amplitude: float = 1.0) -> Constellation:
    kind = kind.lower()
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    if kind == "pam":
        if k < 2:
            raise ValueError("PAM needs k >= 2")
        return Constellation("pam", pam_points(k, amplitude), amplitude)
    if kind == "qam":
        side = math.isqrt(k)
        if k < 4 or side * side != k:
            raise ValueError(f"QAM order must be a perfect square >= 4, got {k}")
        axis = pam_points(side, amplitude)
        # index a*side + b is the point axis[a] + 1j*axis[b]
        pts = (axis[:, None] + 1j * axis[None, :]).ravel()
        return Constellation("qam", pts, amplitude)
    raise ValueError(f"unknown constellation kind {kind!r}")


def sigma_for_snr(snr_db: float, amplitude: float = 1.0) -> float:
    return amplitude / 10.0 ** (snr_db / 20.0)


def entropy_bits(pmf) -> float:
    p = np.asarray(pmf, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _gh_mi_real(points, pmf, sigma, order) -> float:
    t, w = roots_hermite(order)
    pts = np.asarray(points, dtype=np.float64)
    pmf = np.asarray(pmf, dtype=np.float64)
    keep = pmf > 0
    pts_k, p_k = pts[keep], pmf[keep]
    noise = sigma * math.sqrt(2.0) * t  # y - x_i at the nodes
    # log [phi(y - x_i) / sum_l p_l phi(y - x_l)] = -logsumexp_l(log p_l - ((y-x_l)^2 - (y-x_i)^2) / (2 sigma^2))
    y = pts_k[:, None] + noise[None, :]  # (i, node)
    d = (y[:, :, None] - pts_k[None, None, :]) ** 2 - noise[None, :, None] ** 2
    lr = -logsumexp(np.log(p_k)[None, None, :] - d / (2 * sigma**2), axis=-1)
    return float(np.sum(p_k[:, None] * w[None, :] * lr) / math.sqrt(math.pi) / math.log(2))


def _gh_mi_complex(points, pmf, sigma, order) -> float:
    t, w = roots_hermite(order)
    pts = np.asarray(points, dtype=np.complex128)
    pmf = np.asarray(pmf, dtype=np.float64)
    keep = pmf > 0
    pts_k, p_k = pts[keep], pmf[keep]
    noise = (sigma * math.sqrt(2.0) * (t[:, None] + 1j * t[None, :])).ravel()
    ww = (w[:, None] * w[None, :]).ravel() / math.pi
    y = pts_k[:, None] + noise[None, :]
    d = np.abs(y[:, :, None] - pts_k[None, None, :]) ** 2 - np.abs(noise)[None, :, None] ** 2
    lr = -logsumexp(np.log(p_k)[None, None, :] - d / (2 * sigma**2), axis=-1)
    return float(np.sum(p_k[:, None] * ww[None, :] * lr) / math.log(2))


def product_factors(const: Constellation, pmf, tol: float = 1e-12):
    """(p_re, p_im) if the QAM PMF is an outer product of its marginals, else None."""
    side = const.side
    P = np.asarray(pmf, dtype=np.float64).reshape(side, side)
    a, b = P.sum(axis=1), P.sum(axis=0)
    if np.abs(P - np.outer(a, b)).max() <= tol:
        return a, b
    return None


def gauss_hermite_mi(const: Constellation, pmf, sigma: float, order: int = 64, factorize: bool = True) -> float:
    """I(X; X + N) in bits by Gauss-Hermite quadrature.

    QAM PMFs that factorize over the two axes are evaluated as a sum of two
    1-D integrals; otherwise a 2-D tensor rule is used.  ``factorize=False``
    forces the 2-D rule.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if order < 20:
        raise ValueError("quadrature order must be >= 20")
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape != (const.order,) or np.any(pmf < 0) or abs(pmf.sum() - 1) > 1e-9:
        raise ValueError("pmf must be a distribution over the constellation points")
    if not const.is_complex:
        val = _gh_mi_real(const.points, pmf, sigma, order)
    else:
        axis = pam_points(const.side, const.amplitude)
        factors = product_factors(const, pmf) if factorize else None
        if factors is not None:
            val = _gh_mi_real(axis, factors[0], sigma, order) + _gh_mi_real(axis, factors[1], sigma, order)
        else:
            val = _gh_mi_complex(const.points, pmf, sigma, order)
    # quadrature rounding can leave the value a hair outside its exact range
    return float(min(max(val, 0.0), entropy_bits(pmf), math.log2(const.order)))


@dataclass
class ShapingResult:
    snr_db: float
    pmf: np.ndarray
    mi_mine: float  # bits
    mi_uniform: float  # bits, quadrature
    mi_learned: float  # bits, quadrature of the learned PMF
    points: np.ndarray

    def as_dict(self) -> dict:
        pts = self.points
        coords = [[float(p.real), float(p.imag)] for p in pts] if np.iscomplexobj(pts) else [float(p) for p in pts]
        return {
            "snr_db": self.snr_db,
            "mi_mine_bits": self.mi_mine,
            "mi_uniform_bits": self.mi_uniform,
            "mi_learned_quadrature_bits": self.mi_learned,
            "pmf": [float(v) for v in self.pmf],
            "points": coords,
        }


def run_shaping(
    kind: str,
    k: int,
    snr_grid_db,
    cfg: MiTrainConfig | None = None,
    seed: int = 0,
    amplitude: float = 1.0,
    order: int = 64,
    log=None,
) -> list[ShapingResult]:
    """Learn a PMF per SNR with the MINE route and score it by quadrature."""
    cfg = cfg or MiTrainConfig()
    const = make_constellation(kind, k, amplitude)
    uniform = np.full(k, 1.0 / k)
    out = []
    for i, snr in enumerate(snr_grid_db):
        sigma = sigma_for_snr(snr, amplitude)
        spec = ChannelSpec.awgn(sigma, const.points)
        res = train_mi(spec, cfg, seed=seed + i)
        if res.status != "ok":
            raise RuntimeError(f"shaping diverged at {snr} dB: {res.diagnostic}")
        r = ShapingResult(
            float(snr),
            res.pmf,
            res.report.mi,
            gauss_hermite_mi(const, uniform, sigma, order),
            gauss_hermite_mi(const, res.pmf, sigma, order),
            const.points,
        )
        out.append(r)
        if log is not None:
            log(r)
    return out


def write_shaping_csv(results: list[ShapingResult], path) -> None:
    k = len(results[0].pmf)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db", "mi_mine_bits", "mi_uniform_bits", "mi_learned_quadrature_bits"] + [f"p_{i}" for i in range(k)])
        for r in results:
            w.writerow([repr(r.snr_db), repr(r.mi_mine), repr(r.mi_uniform), repr(r.mi_learned)] + [repr(float(v)) for v in r.pmf])


def write_qam_json(results: list[ShapingResult], path) -> None:
    payload = []
    for r in results:
        payload.append(
            {
                "snr_db": r.snr_db,
                "points": [{"re": float(p.real), "im": float(p.imag), "p": float(q)} for p, q in zip(r.points, r.pmf)],
            }
        )
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
