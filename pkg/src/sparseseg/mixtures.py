"""Two-component gamma, beta and beta-by-gamma mixtures fitted by EM.

Component 0 of a fitted :class:`MixtureModel` is always the *reliable* one:
the lower-mean component (lower uncertainty, or smaller spectrum distance).
Joint samples are ``(n, 2)`` arrays with the uncertainty in column 0 and
the normalized spectrum distance in column 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

BETA_CLAMP = 1e-6
SHAPE_MIN, SHAPE_MAX = 1e-4, 1e4
MIN_SAMPLES = 20
DEFAULT_EM_ITERATIONS = 50
KINDS = ("gamma", "beta", "joint")


class MixtureFitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# special functions

_DIGAMMA_SERIES = (-1 / 12, 1 / 120, -1 / 252, 1 / 240, -1 / 132, 691 / 32760, -1 / 12)
_TRIGAMMA_SERIES = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)


def digamma(x):
    """psi(x) for x > 0: shift up to x >= 6 by recurrence, then the asymptotic series."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    x = x.copy()
    acc = np.zeros_like(x)
    small = x < 6.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 6.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in reversed(_DIGAMMA_SERIES):
        series = (series + coef) * inv2
    out = acc + np.log(x) - 0.5 / x + series
    return float(out) if out.ndim == 0 else out


def trigamma(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("trigamma is only defined here for x > 0")
    x = x.copy()
    acc = np.zeros_like(x)
    small = x < 6.0
    while np.any(small):
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
        small = x < 6.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for coef in reversed(_TRIGAMMA_SERIES):
        series = (series + coef) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# components


def _clip_shape(v: float) -> float:
    return float(min(max(v, SHAPE_MIN), SHAPE_MAX))


@dataclass(frozen=True)
class GammaParams:
    a: float  # shape
    b: float  # rate

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"invalid gamma parameters {self}")

    kind = "gamma"

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, -np.inf)
        ok = x > 0
        xo = x[ok]
        out[ok] = self.a * math.log(self.b) + (self.a - 1) * np.log(xo) - self.b * xo - math.lgamma(self.a)
        return out

    def mean(self) -> float:
        return self.a / self.b

    def as_dict(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"invalid beta parameters {self}")

    kind = "beta"

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, -np.inf)
        ok = (x > 0) & (x < 1)
        xo = x[ok]
        lnorm = math.lgamma(self.a + self.b) - math.lgamma(self.a) - math.lgamma(self.b)
        out[ok] = lnorm + (self.a - 1) * np.log(xo) + (self.b - 1) * np.log1p(-xo)
        return out

    def mean(self) -> float:
        return self.a / (self.a + self.b)

    def as_dict(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class JointParams:
    """Beta on the spectrum coordinate times gamma on the uncertainty coordinate."""

    beta_a: float
    beta_b: float
    gamma_c: float
    gamma_d: float

    def __post_init__(self):
        BetaParams(self.beta_a, self.beta_b)
        GammaParams(self.gamma_c, self.gamma_d)

    kind = "joint"

    @property
    def beta(self) -> BetaParams:
        return BetaParams(self.beta_a, self.beta_b)

    @property
    def gamma(self) -> GammaParams:
        return GammaParams(self.gamma_c, self.gamma_d)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
        return self.gamma.logpdf(x[:, 0]) + self.beta.logpdf(x[:, 1])

    def mean(self) -> tuple[float, float]:
        return self.gamma.mean(), self.beta.mean()

    def as_dict(self) -> dict:
        return {"beta_a": self.beta_a, "beta_b": self.beta_b, "gamma_c": self.gamma_c, "gamma_d": self.gamma_d}


ComponentParams = GammaParams | BetaParams | JointParams


def component_pdf(params: ComponentParams, x) -> np.ndarray | float:
    """Density; zero outside the support (see :func:`in_support`)."""
    scalar = np.ndim(x) == 0 or (params.kind == "joint" and np.ndim(x) == 1)
    out = np.exp(params.logpdf(x))
    return float(out.reshape(-1)[0]) if scalar else out


def in_support(kind: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "gamma":
        return x > 0
    if kind == "beta":
        return (x > 0) & (x < 1)
    x = x.reshape(-1, 2)
    return (x[:, 0] > 0) & (x[:, 1] > 0) & (x[:, 1] < 1)


# ---------------------------------------------------------------------------
# weighted maximum likelihood


def _gamma_mom(x, w) -> GammaParams:
    m = float(np.average(x, weights=w))
    v = float(np.average((x - m) ** 2, weights=w))
    v = max(v, 1e-12 * max(m * m, 1e-300))
    return GammaParams(_clip_shape(m * m / v), _clip_shape(m * m / v) / m)


def _beta_mom(x, w) -> BetaParams:
    m = float(np.average(x, weights=w))
    v = float(np.average((x - m) ** 2, weights=w))
    common = m * (1 - m) / max(v, 1e-300) - 1.0
    if not common > 0:
        return BetaParams(1.0, 1.0)
    return BetaParams(_clip_shape(m * common), _clip_shape((1 - m) * common))


def _gamma_mle(x, w) -> GammaParams:
    """Solve log(a) - psi(a) = log(mean) - mean(log) by safeguarded Newton; b = a / mean."""
    sw = w.sum()
    m = float(w @ x / sw)
    s = math.log(m) - float(w @ np.log(x) / sw)
    if not s > 0:
        return GammaParams(SHAPE_MAX, SHAPE_MAX / m)

    def g(a):
        return math.log(a) - digamma(a) - s

    lo, hi = SHAPE_MIN, SHAPE_MAX
    if g(hi) > 0:
        a = hi
    elif g(lo) < 0:
        a = lo
    else:
        a = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
        a = min(max(a, lo), hi)
        for _ in range(100):
            ga = g(a)
            if ga > 0:
                lo = a
            else:
                hi = a
            step = ga / (1.0 / a - trigamma(a))
            nxt = a - step
            if not lo < nxt < hi:
                nxt = 0.5 * (lo + hi)
            if abs(nxt - a) <= 1e-12 * a:
                a = nxt
                break
            a = nxt
    return GammaParams(a, a / m)


def _beta_objective(a, b, g1, g2):
    return (a - 1) * g1 + (b - 1) * g2 - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


def _beta_mle(x, w) -> BetaParams:
    """Newton on the two digamma stationarity equations, with backtracking."""
    sw = w.sum()
    g1 = float(w @ np.log(x) / sw)
    g2 = float(w @ np.log1p(-x) / sw)
    start = _beta_mom(x, w)
    a, b = start.a, start.b
    f = _beta_objective(a, b, g1, g2)
    for _ in range(200):
        pab = digamma(a + b)
        grad = np.array([g1 - digamma(a) + pab, g2 - digamma(b) + pab])
        if np.max(np.abs(grad)) < 1e-12:
            break
        tab = trigamma(a + b)
        H = np.array([[tab - trigamma(a), tab], [tab, tab - trigamma(b)]])
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise MixtureFitError("singular Hessian in beta fit") from None
        t = 1.0
        while t > 1e-12:
            na, nb = a + t * step[0], b + t * step[1]
            if SHAPE_MIN <= na <= SHAPE_MAX and SHAPE_MIN <= nb <= SHAPE_MAX:
                nf = _beta_objective(na, nb, g1, g2)
                if nf >= f - 1e-15 * abs(f):
                    break
            t *= 0.5
        else:
            break
        if abs(na - a) <= 1e-13 * a and abs(nb - b) <= 1e-13 * b:
            a, b, f = na, nb, nf
            break
        a, b, f = na, nb, nf
    if not (math.isfinite(a) and math.isfinite(b)):
        raise MixtureFitError("beta Newton diverged")
    return BetaParams(a, b)


def _fit_component(kind: str, x: np.ndarray, w: np.ndarray, mle: bool = True) -> ComponentParams:
    if kind == "gamma":
        return _gamma_mle(x, w) if mle else _gamma_mom(x, w)
    if kind == "beta":
        return _beta_mle(x, w) if mle else _beta_mom(x, w)
    gp = _fit_component("gamma", x[:, 0], w, mle)
    bp = _fit_component("beta", x[:, 1], w, mle)
    return JointParams(bp.a, bp.b, gp.a, gp.b)


# ---------------------------------------------------------------------------
# mixtures


@dataclass(frozen=True)
class FitDiagnostics:
    log_likelihood_trace: list[float]
    iterations_run: int
    converged: bool
    fallbacks: int = 0
    samples_used: int = 0

    def is_monotone(self, slack: float = 1e-9) -> bool:
        tr = self.log_likelihood_trace
        return all(b >= a - slack * max(1.0, abs(a)) for a, b in zip(tr, tr[1:]))


@dataclass(frozen=True)
class MixtureModel:
    weights: tuple[float, float]
    components: tuple  # (reliable, unreliable)
    kind: str
    diagnostics: FitDiagnostics | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mixture kind {self.kind!r}")
        w1, w2 = self.weights
        if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")
        if any(c.kind != self.kind for c in self.components):
            raise ValueError("component kinds do not match mixture kind")

    def swapped(self) -> "MixtureModel":
        return MixtureModel((self.weights[1], self.weights[0]), self.components[::-1], self.kind, self.diagnostics)

    def log_likelihood(self, x) -> float:
        lp = _weighted_logpdfs(self, x)
        return float(np.sum(np.logaddexp(lp[:, 0], lp[:, 1])))

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "weights": list(self.weights),
            "reliable": self.components[0].as_dict(),
            "unreliable": self.components[1].as_dict(),
        }
        if self.diagnostics is not None:
            tr = self.diagnostics.log_likelihood_trace
            d["diagnostics"] = {
                "iterations": self.diagnostics.iterations_run,
                "converged": self.diagnostics.converged,
                "final_log_likelihood": tr[-1] if tr else None,
                "log_likelihood_trace": tr,
                "fallbacks": self.diagnostics.fallbacks,
                "samples_used": self.diagnostics.samples_used,
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        make = {"gamma": GammaParams, "beta": BetaParams, "joint": JointParams}[d["kind"]]
        comps = (make(**d["reliable"]), make(**d["unreliable"]))
        diag = None
        if "diagnostics" in d:
            dd = d["diagnostics"]
            diag = FitDiagnostics(list(dd["log_likelihood_trace"]), dd["iterations"], dd["converged"],
                                  dd.get("fallbacks", 0), dd.get("samples_used", 0))
        return cls(tuple(d["weights"]), comps, d["kind"], diag)


def prepare_samples(kind: str, x) -> np.ndarray:
    """Cast and clamp beta coordinates sitting exactly on {0, 1} inward by 1e-6."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "joint":
        x = x.reshape(-1, 2).copy()
        col = x[:, 1]
        col[col == 0.0] = BETA_CLAMP
        col[col == 1.0] = 1.0 - BETA_CLAMP
        return x
    x = x.reshape(-1).copy()
    if kind == "beta":
        x[x == 0.0] = BETA_CLAMP
        x[x == 1.0] = 1.0 - BETA_CLAMP
    return x


def _weighted_logpdfs(model: MixtureModel, x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lw = np.log(np.asarray(model.weights, dtype=np.float64))
    return np.column_stack([lw[j] + model.components[j].logpdf(x) for j in range(2)])


def posterior_from_densities(weights, p1, p2) -> np.ndarray:
    """``r_j = w_j p_j / sum_k w_k p_k``; rows where both densities vanish are NaN."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    num1, num2 = weights[0] * p1, weights[1] * p2
    tot = num1 + num2
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.column_stack([np.atleast_1d(num1 / tot), np.atleast_1d(num2 / tot)])
    r[np.atleast_1d(tot) == 0] = np.nan
    return r


def responsibilities(model: MixtureModel, x) -> np.ndarray:
    """(n, 2) posterior component probabilities; NaN rows when both densities are zero."""
    x = prepare_samples(model.kind, x)
    lp = _weighted_logpdfs(model, x)
    tot = np.logaddexp(lp[:, 0], lp[:, 1])
    with np.errstate(invalid="ignore"):
        r = np.exp(lp - tot[:, None])
    r[~np.isfinite(tot)] = np.nan
    return r


def reliable_posterior(model: MixtureModel, x) -> np.ndarray:
    return responsibilities(model, x)[:, 0]


def _reliability_key(comp):
    m = comp.mean()
    return m if isinstance(m, tuple) else (m,)


def order_reliable_first(model: MixtureModel) -> MixtureModel:
    k0, k1 = _reliability_key(model.components[0]), _reliability_key(model.components[1])
    return model.swapped() if k1 < k0 else model


def _expected_complete(comp, x, r) -> float:
    lp = comp.logpdf(x)
    mask = r > 0
    return float(np.sum(r[mask] * lp[mask]))


def _initial_model(kind: str, x: np.ndarray) -> MixtureModel:
    key = x if kind != "joint" else x[:, 0]
    order = np.argsort(key, kind="stable")
    half = len(x) // 2
    comps = []
    for part in (order[:half], order[half:]):
        xs = x[part]
        comps.append(_fit_component(kind, xs, np.ones(len(xs)), mle=False))
    return MixtureModel((0.5, 0.5), tuple(comps), kind)


def fit_mixture_em(samples, kind: str, iterations: int = DEFAULT_EM_ITERATIONS,
                   tol: float = 1e-10) -> tuple[MixtureModel, FitDiagnostics]:
    """Two-component EM with exact weighted-MLE M-steps.

    Initialised by a median split with method-of-moments halves.  A component
    update that would lower its expected complete log-likelihood (e.g. after
    a Newton failure and moment fallback) is rejected, which keeps the
    log-likelihood trace non-decreasing.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown mixture kind {kind!r}")
    x = prepare_samples(kind, samples)
    x = x[in_support(kind, x)]
    if len(x) < MIN_SAMPLES:
        raise MixtureFitError(f"need at least {MIN_SAMPLES} samples in support, got {len(x)}")
    if len(np.unique(x, axis=0)) < 2:
        raise MixtureFitError("fewer than 2 distinct samples")
    model = _initial_model(kind, x)
    trace = [model.log_likelihood(x)]
    fallbacks = 0
    it = 0
    converged = False
    for it in range(1, iterations + 1):
        r = responsibilities(model, x)
        weights = r.mean(axis=0)
        weights = weights / weights.sum()
        comps = []
        for j in range(2):
            old = model.components[j]
            if r[:, j].sum() <= 1e-300:
                comps.append(old)
                continue
            try:
                new = _fit_component(kind, x, r[:, j])
            except (MixtureFitError, ValueError, ZeroDivisionError, OverflowError):
                fallbacks += 1
                try:
                    new = _fit_component(kind, x, r[:, j], mle=False)
                except (ValueError, ZeroDivisionError, OverflowError):
                    new = old
            if _expected_complete(new, x, r[:, j]) < _expected_complete(old, x, r[:, j]):
                new = old
            comps.append(new)
        w = (float(weights[0]), 1.0 - float(weights[0]))
        model = MixtureModel(w, tuple(comps), kind)
        trace.append(model.log_likelihood(x))
        if abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(trace[-1])):
            converged = True
            break
    diag = FitDiagnostics(trace, it, converged, fallbacks, len(x))
    model = order_reliable_first(MixtureModel(model.weights, model.components, kind, diag))
    return model, diag
