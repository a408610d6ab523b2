"""Dual-beta interest modelling.

Beta density and distribution function, per-user two-component EM, the
Kolmogorov-Smirnov goodness-of-fit check, and strong/weak labelling of
interactions from the fitted posteriors.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, psi, zeta

from .dataio import Dataset

STRONG_THRESHOLD = 0.5
_FPMIN = 1e-300
_CF_EPS = 1e-16
_CF_MAXIT = 20000


class BetaDomainError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    pass


class FitRejected(Exception):
    """EM refused to fit a user; the user keeps an all-weak assignment."""


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)) or self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"Beta shapes must be finite and positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class DualBetaModel:
    pi: float
    strong: BetaParams
    weak: BetaParams

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"mixing weight must lie in [0, 1], got {self.pi}")

    def pdf(self, x) -> np.ndarray:
        return self.pi * beta_pdf(x, self.strong) + (1.0 - self.pi) * beta_pdf(x, self.weak)

    def cdf(self, x) -> np.ndarray:
        return self.pi * beta_cdf(x, self.strong) + (1.0 - self.pi) * beta_cdf(x, self.weak)

    def posterior(self, x) -> np.ndarray:
        """Probability that each value came from the strong component."""
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(divide="ignore"):
            ls = np.log(self.pi) + beta_logpdf(x, self.strong.alpha, self.strong.beta)
            lw = np.log1p(-self.pi) + beta_logpdf(x, self.weak.alpha, self.weak.beta)
        return np.exp(ls - np.logaddexp(ls, lw))

    def log_likelihood(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(divide="ignore"):
            ls = np.log(self.pi) + beta_logpdf(x, self.strong.alpha, self.strong.beta)
            lw = np.log1p(-self.pi) + beta_logpdf(x, self.weak.alpha, self.weak.beta)
        return float(np.sum(np.logaddexp(ls, lw)))


ESTIMATORS = ("weighted_mle", "weighted_moments", "paper_closed_form")


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    log_lik_tol: float = 1e-6
    init_strong_fraction: float = 0.40
    min_samples: int = 5
    param_floor: float = 1e-3
    param_ceiling: float = 1e3
    estimator: str = "weighted_mle"
    init_seed: int | None = None

    def __post_init__(self):
        if not 0.0 < self.init_strong_fraction < 1.0:
            raise ValueError("init_strong_fraction must lie in (0, 1)")
        if not 0.0 < self.param_floor < self.param_ceiling:
            raise ValueError("need 0 < param_floor < param_ceiling")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")


# --------------------------------------------------------------------- numerics


def beta_logpdf(x, a, b) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def betaln(a, b):
    return gammaln(a) + gammaln(b) - gammaln(np.add(a, b))


def beta_pdf(x, params: BetaParams):
    """Beta density evaluated in log space; ``x`` must lie strictly inside (0, 1)."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any((arr <= 0.0) | (arr >= 1.0)) or np.any(np.isnan(arr)):
        raise BetaDomainError("beta_pdf is defined on the open interval (0, 1)")
    out = np.exp(beta_logpdf(arr, params.alpha, params.beta))
    return float(out) if out.ndim == 0 else out


def _betacf(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Continued fraction for I_x(a, b), modified Lentz, vectorized with per-entry freezing."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _FPMIN, _FPMIN, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, _CF_MAXIT + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return h
        aa_, bb_, xx = a[idx], b[idx], x[idx]
        cc, dd = c[idx], d[idx]
        m2 = 2.0 * m
        num = m * (bb_ - m) * xx / ((qam[idx] + m2) * (aa_ + m2))
        dd = 1.0 + num * dd
        dd = np.where(np.abs(dd) < _FPMIN, _FPMIN, dd)
        cc = 1.0 + num / cc
        cc = np.where(np.abs(cc) < _FPMIN, _FPMIN, cc)
        dd = 1.0 / dd
        hh = h[idx] * dd * cc
        num = -(aa_ + m) * (qab[idx] + m) * xx / ((aa_ + m2) * (qap[idx] + m2))
        dd = 1.0 + num * dd
        dd = np.where(np.abs(dd) < _FPMIN, _FPMIN, dd)
        cc = 1.0 + num / cc
        cc = np.where(np.abs(cc) < _FPMIN, _FPMIN, cc)
        dd = 1.0 / dd
        delta = dd * cc
        hh = hh * delta
        h[idx], c[idx], d[idx] = hh, cc, dd
        active[idx[np.abs(delta - 1.0) < _CF_EPS]] = False
    raise ConvergenceError(f"incomplete beta continued fraction did not converge in {_CF_MAXIT} iterations")


def betainc(a, b, x) -> np.ndarray:
    """Regularized incomplete beta I_x(a, b), broadcasting over all arguments."""
    a, b, x = np.broadcast_arrays(np.asarray(a, dtype=np.float64),
                                  np.asarray(b, dtype=np.float64),
                                  np.asarray(x, dtype=np.float64))
    shape = x.shape
    a, b, x = a.ravel().copy(), b.ravel().copy(), x.ravel().copy()
    if np.any(a <= 0) or np.any(b <= 0):
        raise BetaDomainError("shape parameters must be positive")
    if np.any((x < 0) | (x > 1)) or np.any(np.isnan(x)):
        raise BetaDomainError("beta_cdf argument must lie in [0, 1]")
    out = np.empty_like(x)
    lo = x <= 0.0
    hi = x >= 1.0
    out[lo] = 0.0
    out[hi] = 1.0
    mid = ~(lo | hi)
    if np.any(mid):
        am, bm, xm = a[mid], b[mid], x[mid]
        log_front = am * np.log(xm) + bm * np.log1p(-xm) - betaln(am, bm)
        direct = xm < (am + 1.0) / (am + bm + 2.0)
        res = np.empty_like(xm)
        if np.any(direct):
            k = direct
            res[k] = np.exp(log_front[k]) * _betacf(am[k], bm[k], xm[k]) / am[k]
        if np.any(~direct):
            k = ~direct
            res[k] = 1.0 - np.exp(log_front[k]) * _betacf(bm[k], am[k], 1.0 - xm[k]) / bm[k]
        out[mid] = res
    out = np.clip(out, 0.0, 1.0).reshape(shape)
    return out


def beta_cdf(x, params: BetaParams):
    out = betainc(params.alpha, params.beta, x)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- EM


def _moments(x: np.ndarray, w: np.ndarray) -> tuple[float, float] | None:
    sw = w.sum()
    if sw <= 0:
        return None
    m = float(np.dot(w, x) / sw)
    v = float(np.dot(w, (x - m) ** 2) / sw)
    if not (0.0 < m < 1.0) or v <= 0.0:
        return None
    common = m * (1.0 - m) / v - 1.0
    if common <= 0.0:
        return None
    return m * common, (1.0 - m) * common


def _closed_form(x: np.ndarray, w: np.ndarray) -> tuple[float, float] | None:
    s_log = float(np.dot(w, np.log(x)))
    s_log1m = float(np.dot(w, np.log1p(-x)))
    denom = -s_log + s_log1m
    if denom == 0.0 or s_log == 0.0:
        return None
    a = s_log / denom
    b = a * s_log1m / s_log
    if not (math.isfinite(a) and math.isfinite(b)) or a <= 0 or b <= 0:
        return None
    return a, b


def _weighted_mle(x: np.ndarray, w: np.ndarray, start: tuple[float, float],
                  floor: float, ceiling: float) -> tuple[float, float] | None:
    """Newton iterations on the weighted Beta score equations in log-parameters."""
    sw = w.sum()
    if sw <= 0:
        return None
    g1 = float(np.dot(w, np.log(x)) / sw)
    g2 = float(np.dot(w, np.log1p(-x)) / sw)
    la, lb = math.log(start[0]), math.log(start[1])
    lo, hi = math.log(floor), math.log(ceiling)
    for _ in range(100):
        a, b = math.exp(la), math.exp(lb)
        pab = psi(a + b)
        f1 = psi(a) - pab - g1
        f2 = psi(b) - pab - g2
        tab = zeta(2.0, a + b)
        # Jacobian w.r.t. (log a, log b)
        j11 = (zeta(2.0, a) - tab) * a
        j12 = -tab * b
        j21 = -tab * a
        j22 = (zeta(2.0, b) - tab) * b
        det = j11 * j22 - j12 * j21
        if det == 0 or not math.isfinite(det):
            return None
        da = (f1 * j22 - f2 * j12) / det
        db = (j11 * f2 - j21 * f1) / det
        step = max(abs(da), abs(db))
        if step > 1.0:
            da, db = da / step, db / step
        la = min(max(la - da, lo), hi)
        lb = min(max(lb - db, lo), hi)
        if step < 1e-12:
            break
    a, b = math.exp(la), math.exp(lb)
    if not (math.isfinite(a) and math.isfinite(b)):
        return None
    return a, b


def _weighted_ll(x: np.ndarray, w: np.ndarray, ab: tuple[float, float]) -> float:
    return float(np.dot(w, beta_logpdf(x, ab[0], ab[1])))


def _no_worse(x: np.ndarray, w: np.ndarray, previous: tuple[float, float],
              proposal: tuple[float, float]) -> tuple[float, float]:
    """Backtrack from ``proposal`` toward ``previous`` in log-space until the weighted
    log-likelihood does not drop. Clamping at the box edges can make the Newton
    result worse than the starting point, which would break EM ascent."""
    base = _weighted_ll(x, w, previous)
    lp = np.log(previous)
    step = np.log(proposal) - lp
    for _ in range(40):
        cand = tuple(np.exp(lp + step).tolist())
        if _weighted_ll(x, w, cand) >= base:
            return cand
        step = step / 2
    return previous


def _fallback_moments(x: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Moment estimate that always yields something, using a variance floor."""
    sw = w.sum()
    if sw <= 0:
        w = np.ones_like(x)
        sw = float(len(x))
    m = min(max(float(np.dot(w, x) / sw), 1e-6), 1.0 - 1e-6)
    v = float(np.dot(w, (x - m) ** 2) / sw)
    v = min(max(v, 1e-10), m * (1.0 - m) * 0.999)
    common = m * (1.0 - m) / v - 1.0
    return m * common, (1.0 - m) * common


def _m_step(x: np.ndarray, w: np.ndarray, config: EmConfig,
            previous: BetaParams | None) -> tuple[BetaParams, bool]:
    """Estimate one component; returns (params, used_fallback)."""
    est = None
    fallback = False
    if config.estimator == "paper_closed_form":
        est = _closed_form(x, w)
    elif config.estimator == "weighted_moments":
        est = _moments(x, w)
    else:
        if previous is not None:
            start = (previous.alpha, previous.beta)
        else:
            start = _moments(x, w) or _fallback_moments(x, w)
        start = tuple(min(max(s, config.param_floor), config.param_ceiling) for s in start)
        est = _weighted_mle(x, w, start, config.param_floor, config.param_ceiling)
        if est is not None and previous is not None:
            est = _no_worse(x, w, (previous.alpha, previous.beta), est)
    if est is None:
        fallback = True
        est = _moments(x, w)
        if est is None:
            if previous is not None and w.sum() <= 1e-12:
                return previous, True
            est = _fallback_moments(x, w)
    a, b = (min(max(float(v), config.param_floor), config.param_ceiling) for v in est)
    return BetaParams(a, b), fallback


@dataclass
class EmTrace:
    model: DualBetaModel
    gamma: np.ndarray
    log_likelihoods: list[float]
    pis: list[float]
    gammas_mean: list[float]
    converged: bool
    n_iter: int
    fallback_used: bool


def _initial_strong_mask(x: np.ndarray, config: EmConfig) -> np.ndarray:
    n = len(x)
    k = min(max(1, int(math.ceil(config.init_strong_fraction * n))), n - 1)
    if config.init_seed is None:
        order = np.lexsort((np.arange(n), -x))
    else:
        # random tie-breaking among equal playtimes
        jitter = np.random.default_rng(config.init_seed).random(n)
        order = np.lexsort((jitter, -x))
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def em_fit_trace(playtimes: Sequence[float], config: EmConfig | None = None) -> EmTrace:
    config = config or EmConfig()
    x = np.asarray(playtimes, dtype=np.float64).ravel()
    if len(x) < max(config.min_samples, 2):
        raise FitRejected(f"{len(x)} samples < min_samples={config.min_samples}")
    if np.any((x <= 0.0) | (x >= 1.0)):
        raise BetaDomainError("EM input must lie strictly inside (0, 1)")
    if np.ptp(x) == 0.0:
        raise FitRejected("degenerate sample: all playtimes identical")

    gamma = _initial_strong_mask(x, config).astype(np.float64)
    strong, fb1 = _m_step(x, gamma, config, None)
    weak, fb2 = _m_step(x, 1.0 - gamma, config, None)
    pi = float(gamma.mean())
    model = DualBetaModel(pi, strong, weak)
    fallback_used = fb1 or fb2
    lls = [model.log_likelihood(x)]
    pis = [pi]
    gmeans = [pi]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        gamma = model.posterior(x)
        strong, fb1 = _m_step(x, gamma, config, model.strong)
        weak, fb2 = _m_step(x, 1.0 - gamma, config, model.weak)
        fallback_used = fallback_used or fb1 or fb2
        pi = float(gamma.mean())
        model = DualBetaModel(pi, strong, weak)
        ll = model.log_likelihood(x)
        pis.append(pi)
        gmeans.append(float(gamma.mean()))
        delta = ll - lls[-1]
        lls.append(ll)
        if abs(delta) < config.log_lik_tol * max(1.0, abs(ll)):
            converged = True
            break
    gamma = model.posterior(x)
    return EmTrace(model, gamma, lls, pis, gmeans, converged, it, fallback_used)


def em_fit(playtimes: Sequence[float], config: EmConfig | None = None) -> tuple[DualBetaModel, np.ndarray]:
    """Fit a two-component Beta mixture to one user's normalized playtimes.

    Returns the model and the strong-component posterior of every sample.
    Raises :class:`FitRejected` for too few or degenerate samples.
    """
    trace = em_fit_trace(playtimes, config)
    return trace.model, trace.gamma


# --------------------------------------------------------------------------- KS


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov distribution, P(K > lam)."""
    if lam <= 0.0:
        return 1.0
    if lam < 1.18:
        # theta-function form converges fast for small arguments
        y = math.exp(-(math.pi ** 2) / (8.0 * lam * lam))
        s = sum(y ** ((2 * k - 1) ** 2) for k in range(1, 8))
        return min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / lam * s))
    total = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < 1e-17:
            break
    return min(1.0, max(0.0, 2.0 * total))


def ks_statistic(samples, cdf) -> float:
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(x)
    f = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_test(samples, model: DualBetaModel | BetaParams) -> tuple[float, float]:
    """Two-sided one-sample KS test against the fitted mixture (or a single Beta)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("ks_test needs at least one sample")
    if isinstance(model, BetaParams):
        cdf = lambda v: beta_cdf(v, model)  # noqa: E731
    else:
        cdf = model.cdf
    d = ks_statistic(samples, cdf)
    sqrt_n = math.sqrt(samples.size)
    p = kolmogorov_sf((sqrt_n + 0.12 + 0.11 / sqrt_n) * d)
    return d, p


# --------------------------------------------------------------- classification


@dataclass
class UserFit:
    user_id: int
    model: DualBetaModel | None
    n_samples: int
    converged: bool = False
    ks_stat: float = float("nan")
    p_value: float = float("nan")
    rejected: str | None = None

    @property
    def ok(self) -> bool:
        return self.model is not None and self.p_value > 0.05


@dataclass(eq=False)
class InterestAssignment:
    """Strong-interest posterior for every row of the dataset it was built from."""

    users: np.ndarray
    items: np.ndarray
    gamma: np.ndarray
    playtime_norm: np.ndarray | None = None

    @property
    def strong(self) -> np.ndarray:
        return self.gamma > STRONG_THRESHOLD

    @property
    def labels(self) -> list[str]:
        return ["strong" if s else "weak" for s in self.strong]

    def __len__(self):
        return len(self.gamma)

    def to_tsv(self, path, user_ids: Sequence[str] | None = None, item_ids: Sequence[str] | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            for u, i, g, s in zip(self.users, self.items, self.gamma, self.strong):
                uid = user_ids[u] if user_ids is not None else u
                iid = item_ids[i] if item_ids is not None else i
                fh.write(f"{uid}\t{iid}\t{float(g)!r}\t{'strong' if s else 'weak'}\n")

    @classmethod
    def from_tsv(cls, path, dataset: Dataset) -> InterestAssignment:
        """Read gammas back and align them with ``dataset`` rows."""
        ulook, ilook = dataset.user_lookup(), dataset.item_lookup()
        lookup = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
                lookup[(ulook[parts[0]], ilook[parts[1]])] = float(parts[2])
        gamma = np.asarray([lookup.get((int(u), int(i)), 0.0) for u, i in zip(dataset.users, dataset.items)])
        return cls(dataset.users.copy(), dataset.items.copy(), gamma, dataset.playtime_norm)


def classify_interactions(dataset: Dataset, models: Mapping[int, DualBetaModel | None]) -> InterestAssignment:
    """Posterior strong-interest probability per interaction.

    Zero-playtime rows and users without a model get gamma = 0.
    """
    if dataset.playtime_norm is None:
        raise ValueError("dataset must be normalized before classification")
    gamma = np.zeros(len(dataset), dtype=np.float64)
    for u in range(dataset.num_users):
        model = models.get(u)
        if model is None:
            continue
        rows = dataset.rows_of(u)
        rows = rows[dataset.playtime_raw[rows] > 0]
        if rows.size:
            gamma[rows] = model.posterior(dataset.playtime_norm[rows])
    return InterestAssignment(dataset.users.copy(), dataset.items.copy(), gamma, dataset.playtime_norm)


def fit_user(dataset: Dataset, user: int, config: EmConfig) -> UserFit:
    rows = dataset.rows_of(user)
    rows = rows[dataset.playtime_raw[rows] > 0]
    x = dataset.playtime_norm[rows]
    try:
        trace = em_fit_trace(x, config)
    except FitRejected as exc:
        return UserFit(user, None, len(x), rejected=str(exc))
    d, p = ks_test(x, trace.model)
    return UserFit(user, trace.model, len(x), trace.converged, d, p)


def fit_users(dataset: Dataset, config: EmConfig | None = None, min_interactions: int = 1,
              threads: int = 1) -> dict[int, UserFit]:
    config = config or EmConfig()
    if dataset.playtime_norm is None:
        raise ValueError("dataset must be normalized before fitting")
    counts = np.bincount(dataset.users, minlength=dataset.num_users)
    users = [u for u in range(dataset.num_users) if counts[u] >= max(1, min_interactions)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(lambda u: fit_user(dataset, u, config), users))
    else:
        fits = [fit_user(dataset, u, config) for u in users]
    return {f.user_id: f for f in fits}


@dataclass
class FitReport:
    users_attempted: int
    users_fit_ok: int
    mean_ks_statistic: float
    mean_p_value: float
    mean_strong: BetaParams | None
    mean_weak: BetaParams | None
    mean_pi: float = float("nan")

    @property
    def success_rate(self) -> float:
        return self.users_fit_ok / self.users_attempted if self.users_attempted else float("nan")

    def to_dict(self) -> dict:
        def bp(p):
            return None if p is None else {"alpha": p.alpha, "beta": p.beta}
        return {
            "users_attempted": self.users_attempted,
            "users_fit_ok": self.users_fit_ok,
            "success_rate": self.success_rate,
            "mean_ks_statistic": self.mean_ks_statistic,
            "mean_p_value": self.mean_p_value,
            "mean_pi": self.mean_pi,
            "mean_strong": bp(self.mean_strong),
            "mean_weak": bp(self.mean_weak),
        }


def summarize(fits: Mapping[int, UserFit]) -> FitReport:
    fitted = [f for f in fits.values() if f.model is not None]
    nan = float("nan")
    if not fitted:
        return FitReport(len(fits), 0, nan, nan, None, None)
    return FitReport(
        users_attempted=len(fits),
        users_fit_ok=sum(f.ok for f in fitted),
        mean_ks_statistic=float(np.mean([f.ks_stat for f in fitted])),
        mean_p_value=float(np.mean([f.p_value for f in fitted])),
        mean_strong=BetaParams(float(np.mean([f.model.strong.alpha for f in fitted])),
                               float(np.mean([f.model.strong.beta for f in fitted]))),
        mean_weak=BetaParams(float(np.mean([f.model.weak.alpha for f in fitted])),
                             float(np.mean([f.model.weak.beta for f in fitted]))),
        mean_pi=float(np.mean([f.model.pi for f in fitted])),
    )


def fit_population(dataset: Dataset, config: EmConfig | None = None, min_interactions: int = 10,
                   threads: int = 1) -> FitReport:
    return summarize(fit_users(dataset, config, min_interactions, threads))


def write_models_jsonl(path, fits: Mapping[int, UserFit], user_ids: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(fits):
            f = fits[u]
            m = f.model
            row = {
                "user_id": user_ids[u] if user_ids is not None else u,
                "pi": m.pi if m else None,
                "alpha_s": m.strong.alpha if m else None,
                "beta_s": m.strong.beta if m else None,
                "alpha_w": m.weak.alpha if m else None,
                "beta_w": m.weak.beta if m else None,
                "converged": f.converged,
                "ks_stat": None if math.isnan(f.ks_stat) else f.ks_stat,
                "p_value": None if math.isnan(f.p_value) else f.p_value,
            }
            fh.write(json.dumps(row) + "\n")


def read_models_jsonl(path, user_lookup: Mapping[str, int] | None = None) -> dict[int, DualBetaModel | None]:
    models: dict[int, DualBetaModel | None] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        uid = row["user_id"]
        u = user_lookup[str(uid)] if user_lookup is not None else int(uid)
        if row["pi"] is None:
            models[u] = None
        else:
            models[u] = DualBetaModel(row["pi"], BetaParams(row["alpha_s"], row["beta_s"]),
                                      BetaParams(row["alpha_w"], row["beta_w"]))
    return models
