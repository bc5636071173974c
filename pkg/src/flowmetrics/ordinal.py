"""Proportional-odds (ordered logit) regression by maximum likelihood.

The model: P(Y <= k | x) = sigmoid(theta_k - x.w) with shared weights w
and strictly increasing cutpoints theta_1 < ... < theta_{K-1}. The
log-likelihood is maximized by damped Newton iteration with a
step-halving line search and an optional tiny ridge on w. Cutpoint
ordering is enforced by optimizing the first cutpoint plus log-gaps
(theta_k = theta_1 + sum of exponentials), so every iterate is feasible.

Fitting starts from the closed-form intercept-only solution (cutpoints at
the empirical cumulative logits), which is also the exact MLE when the
design matrix carries no information.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

__all__ = ["OrderedLogit", "DegenerateLabelsError", "loglik_and_gradient"]


class DegenerateLabelsError(ValueError):
    """Labels do not span the declared levels (or collapse to one category)."""


def _softplus(x):
    return np.logaddexp(0.0, x)


def _thresholds_from_gaps(a: np.ndarray) -> np.ndarray:
    """theta_1 = a_0; theta_k = a_0 + sum_{m<k} exp(a_m)."""
    if len(a) == 1:
        return a.copy()
    return np.concatenate(([a[0]], a[0] + np.cumsum(np.exp(a[1:]))))


def _gaps_from_thresholds(theta: np.ndarray) -> np.ndarray:
    if len(theta) == 1:
        return theta.copy()
    return np.concatenate(([theta[0]], np.log(np.diff(theta))))


def _log_interval_prob(u: np.ndarray, l: np.ndarray, c: np.ndarray, k_levels: int) -> np.ndarray:
    """log[sigmoid(u) - sigmoid(l)] with stable boundary handling.

    u, l are the upper/lower cut arguments per observation; boundary
    categories use the one-sided forms (l = -inf, u = +inf never enter a
    subtraction).
    """
    logp = np.empty_like(u)
    bottom = c == 0
    top = c == k_levels - 1
    mid = ~(bottom | top)
    logp[bottom] = -_softplus(-u[bottom])
    logp[top] = -_softplus(l[top])
    if np.any(mid):
        um, lm = u[mid], l[mid]
        # log(e^u - e^l) - softplus(u) - softplus(l), with u > l
        logp[mid] = um + np.log1p(-np.exp(lm - um)) - _softplus(um) - _softplus(lm)
    return logp


def loglik_and_gradient(
    w: np.ndarray,
    a: np.ndarray,
    X: np.ndarray,
    y_idx: np.ndarray,
    k_levels: int,
    ridge: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Penalized log-likelihood and its analytic gradient in (w, gap) space."""
    ll, grad_w, grad_theta, _ = _derivs(w, a, X, y_idx, k_levels, ridge, want_hessian=False)
    grad_a = _theta_grad_to_gaps(grad_theta, a)
    return ll, np.concatenate([grad_w, grad_a])


def _theta_grad_to_gaps(grad_theta: np.ndarray, a: np.ndarray) -> np.ndarray:
    grad_a = np.empty_like(grad_theta)
    grad_a[0] = grad_theta.sum()
    if len(a) > 1:
        tails = np.cumsum(grad_theta[::-1])[::-1]
        grad_a[1:] = np.exp(a[1:]) * tails[1:]
    return grad_a


def _derivs(w, a, X, y_idx, k_levels, ridge, want_hessian=True):
    """Core derivatives of the penalized log-likelihood.

    Returns (ll, grad_w, grad_theta, hessian-in-(w,a)-space or None).
    """
    n, p = X.shape
    theta = _thresholds_from_gaps(a)
    eta = X @ w

    upper = np.where(y_idx < k_levels - 1, theta[np.minimum(y_idx, k_levels - 2)] - eta, np.inf)
    lower = np.where(y_idx > 0, theta[np.maximum(y_idx - 1, 0)] - eta, -np.inf)

    logp = _log_interval_prob(upper, lower, y_idx, k_levels)
    ll = float(logp.sum()) - 0.5 * ridge * float(w @ w)

    prob = np.exp(logp)
    prob = np.maximum(prob, 1e-300)
    su = expit(upper)
    sl = expit(lower)
    fu = np.where(np.isfinite(upper), su * (1.0 - su), 0.0)
    fl = np.where(np.isfinite(lower), sl * (1.0 - sl), 0.0)
    A = fu / prob
    B = fl / prob

    grad_w = X.T @ (B - A) - ridge * w
    grad_theta = np.zeros(k_levels - 1)
    has_upper = y_idx < k_levels - 1
    has_lower = y_idx > 0
    np.add.at(grad_theta, y_idx[has_upper], A[has_upper])
    np.subtract.at(grad_theta, y_idx[has_lower] - 1, B[has_lower])

    if not want_hessian:
        return ll, grad_w, grad_theta, None

    fpu = np.where(np.isfinite(upper), fu * (1.0 - 2.0 * su), 0.0)
    fpl = np.where(np.isfinite(lower), fl * (1.0 - 2.0 * sl), 0.0)
    s_uu = fpu / prob - A * A
    s_ul = A * B
    s_ll = -fpl / prob - B * B

    h_eta = s_uu + 2.0 * s_ul + s_ll
    H_ww = X.T @ (X * h_eta[:, None]) - ridge * np.eye(p)

    m = k_levels - 1
    H_wt = np.zeros((p, m))
    H_tt = np.zeros((m, m))
    cu = y_idx[has_upper]
    cl = y_idx[has_lower] - 1
    # d2/d eta d theta
    wc_u = -(s_uu + s_ul)
    wc_l = -(s_ul + s_ll)
    for j in range(p):
        np.add.at(H_wt[j], cu, X[has_upper, j] * wc_u[has_upper])
        np.add.at(H_wt[j], cl, X[has_lower, j] * wc_l[has_lower])
    np.add.at(H_tt, (cu, cu), s_uu[has_upper])
    np.add.at(H_tt, (cl, cl), s_ll[has_lower])
    both = has_upper & has_lower
    cb = y_idx[both]
    np.add.at(H_tt, (cb, cb - 1), s_ul[both])
    np.add.at(H_tt, (cb - 1, cb), s_ul[both])

    # Chain rule theta(a): J[k, 0] = 1, J[k, m] = exp(a_m) for 1 <= m <= k.
    J = np.zeros((m, m))
    J[:, 0] = 1.0
    for col in range(1, m):
        J[col:, col] = np.exp(a[col])
    H_wa = H_wt @ J
    H_aa = J.T @ H_tt @ J
    if m > 1:
        tails = np.cumsum(grad_theta[::-1])[::-1]
        H_aa[np.arange(1, m), np.arange(1, m)] += np.exp(a[1:]) * tails[1:]

    H = np.block([[H_ww, H_wa], [H_wa.T, H_aa]])
    return ll, grad_w, grad_theta, H


class OrderedLogit(BaseEstimator):
    """Proportional-odds ordinal regression with a damped-Newton solver.

    Parameters
    ----------
    max_iter : Newton iteration budget.
    tol : convergence threshold on the gradient max-norm.
    ridge : tiny L2 penalty on the weights for numerical stability. The
        reported log-likelihood and AIC are unpenalized.
    standardize : z-score columns with training statistics before fitting.
        Coefficients are reported in both standardized and raw units.
    levels : explicit ordered category labels; inferred from y when None.

    Attributes (after fit)
    ----------
    coef_, thresholds_ : raw-unit weights and cutpoints.
    coef_std_, thresholds_std_ : standardized-unit counterparts.
    levels_, loglik_, aic_, converged_, n_iter_, separation_detected_.
    """

    def __init__(self, max_iter=200, tol=1e-8, ridge=1e-8, standardize=True, levels=None):
        self.max_iter = max_iter
        self.tol = tol
        self.ridge = ridge
        self.standardize = standardize
        self.levels = levels

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(X)):
            raise ValueError("design matrix contains non-finite entries")
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different numbers of rows")

        if self.levels is None:
            levels = np.unique(y)
        else:
            levels = np.asarray(sorted(self.levels), dtype=float)
        if len(levels) < 2:
            raise DegenerateLabelsError("need at least two distinct categories")
        level_index = {lv: k for k, lv in enumerate(levels)}
        try:
            y_idx = np.array([level_index[v] for v in y], dtype=int)
        except KeyError as exc:
            raise DegenerateLabelsError(f"label {exc.args[0]} not in declared levels") from exc
        counts = np.bincount(y_idx, minlength=len(levels))
        if np.any(counts == 0):
            missing = [float(levels[k]) for k in np.where(counts == 0)[0]]
            raise DegenerateLabelsError(f"categories absent from y: {missing}")

        n, p = X.shape
        K = len(levels)
        if n <= p + K - 1:
            raise ValueError(f"need n > p + K - 1 ({p + K - 1}) rows to fit; got {n}")

        if self.standardize:
            mean = X.mean(axis=0)
            scale = X.std(axis=0)
            scale = np.where(scale == 0.0, 1.0, scale)
        else:
            mean = np.zeros(p)
            scale = np.ones(p)
        Xs = (X - mean) / scale

        # Closed-form intercept-only start: cutpoints at cumulative logits.
        cum = np.cumsum(counts)[:-1] / n
        theta0 = np.log(cum / (1.0 - cum))
        w = np.zeros(p)
        a = _gaps_from_thresholds(theta0)

        ll, grad_w, grad_theta, H = _derivs(w, a, Xs, y_idx, K, self.ridge)
        grad = np.concatenate([grad_w, _theta_grad_to_gaps(grad_theta, a)])
        n_iter = 0
        converged = bool(np.max(np.abs(grad)) < self.tol)

        while not converged and n_iter < self.max_iter:
            n_iter += 1
            step = self._newton_step(H, grad)
            # Step-halving line search on the penalized likelihood.
            t = 1.0
            improved = False
            for _ in range(40):
                w_new = w + t * step[:p]
                a_new = a + t * step[p:]
                ll_new = self._loglik_at(w_new, a_new, Xs, y_idx, K)
                if ll_new >= ll - 1e-12:
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
            w, a, ll = w_new, a_new, ll_new
            ll, grad_w, grad_theta, H = _derivs(w, a, Xs, y_idx, K, self.ridge)
            grad = np.concatenate([grad_w, _theta_grad_to_gaps(grad_theta, a)])
            converged = bool(np.max(np.abs(grad)) < self.tol)

        theta = _thresholds_from_gaps(a)
        self.levels_ = levels
        self.mean_ = mean
        self.scale_ = scale
        self.coef_std_ = w
        self.thresholds_std_ = theta
        self.coef_ = w / scale
        self.thresholds_ = theta + float(self.coef_ @ mean)
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.grad_max_norm_ = float(np.max(np.abs(grad)))
        # Standardized weights beyond ~15 only arise when the ridge is the
        # sole force stopping divergence, i.e. (quasi-)separated data.
        self.separation_detected_ = bool(np.max(np.abs(w), initial=0.0) > 15.0)
        self.loglik_ = self.loglik(X, y)
        self.n_params_ = p + K - 1
        self.aic_ = 2.0 * self.n_params_ - 2.0 * self.loglik_
        return self

    def _loglik_at(self, w, a, Xs, y_idx, K):
        theta = _thresholds_from_gaps(a)
        eta = Xs @ w
        upper = np.where(y_idx < K - 1, theta[np.minimum(y_idx, K - 2)] - eta, np.inf)
        lower = np.where(y_idx > 0, theta[np.maximum(y_idx - 1, 0)] - eta, -np.inf)
        logp = _log_interval_prob(upper, lower, y_idx, K)
        return float(logp.sum()) - 0.5 * self.ridge * float(w @ w)

    @staticmethod
    def _newton_step(H, grad):
        """Solve -H step = grad, adding Levenberg damping until definite."""
        M = -H
        lam = 0.0
        eye = np.eye(M.shape[0])
        for _ in range(60):
            try:
                L = np.linalg.cholesky(M + lam * eye)
            except np.linalg.LinAlgError:
                lam = max(2.0 * lam, 1e-8)
                continue
            z = np.linalg.solve(L, grad)
            return np.linalg.solve(L.T, z)
        # Pathological curvature: fall back to gradient ascent.
        return grad / max(np.max(np.abs(grad)), 1.0)

    # -- inference ----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise RuntimeError("model is not fitted")

    def _cumulative(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        eta = X @ self.coef_
        return expit(self.thresholds_[None, :] - eta[:, None])

    def predict_proba(self, X) -> np.ndarray:
        """Category probabilities as adjacent differences of the cumulative
        logits; rows sum to 1 within accumulation precision."""
        self._check_fitted()
        cum = self._cumulative(X)
        ones = np.ones((cum.shape[0], 1))
        return np.diff(np.hstack([np.zeros_like(ones), cum, ones]), axis=1)

    def predict(self, X) -> np.ndarray:
        """Most probable level; ties break toward the lower category."""
        proba = self.predict_proba(X)
        return self.levels_[np.argmax(proba, axis=1)]

    def loglik(self, X, y) -> float:
        """Exact (unpenalized) proportional-odds log-likelihood of (X, y)."""
        self._check_fitted()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float)
        level_index = {lv: k for k, lv in enumerate(self.levels_)}
        y_idx = np.array([level_index[v] for v in y], dtype=int)
        K = len(self.levels_)
        eta = X @ self.coef_
        theta = self.thresholds_
        upper = np.where(y_idx < K - 1, theta[np.minimum(y_idx, K - 2)] - eta, np.inf)
        lower = np.where(y_idx > 0, theta[np.maximum(y_idx - 1, 0)] - eta, -np.inf)
        return float(_log_interval_prob(upper, lower, y_idx, K).sum())

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        self._check_fitted()
        return {
            "levels": self.levels_.tolist(),
            "coef": self.coef_.tolist(),
            "thresholds": self.thresholds_.tolist(),
            "coef_std": self.coef_std_.tolist(),
            "thresholds_std": self.thresholds_std_.tolist(),
            "standardization": {"mean": self.mean_.tolist(), "scale": self.scale_.tolist()},
            "loglik": self.loglik_,
            "aic": self.aic_,
            "n_params": self.n_params_,
            "converged": self.converged_,
            "n_iter": self.n_iter_,
            "grad_max_norm": self.grad_max_norm_,
            "separation_detected": self.separation_detected_,
            "ridge": self.ridge,
            "standardize": self.standardize,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json_dict(cls, d: dict) -> "OrderedLogit":
        model = cls(ridge=d["ridge"], standardize=d["standardize"])
        model.levels_ = np.array(d["levels"], dtype=float)
        model.coef_ = np.array(d["coef"], dtype=float)
        model.thresholds_ = np.array(d["thresholds"], dtype=float)
        model.coef_std_ = np.array(d["coef_std"], dtype=float)
        model.thresholds_std_ = np.array(d["thresholds_std"], dtype=float)
        model.mean_ = np.array(d["standardization"]["mean"], dtype=float)
        model.scale_ = np.array(d["standardization"]["scale"], dtype=float)
        model.loglik_ = d["loglik"]
        model.aic_ = d["aic"]
        model.n_params_ = d["n_params"]
        model.converged_ = d["converged"]
        model.n_iter_ = d["n_iter"]
        model.grad_max_norm_ = d["grad_max_norm"]
        model.separation_detected_ = d["separation_detected"]
        return model

    @classmethod
    def load(cls, path: str | Path) -> "OrderedLogit":
        return cls.from_json_dict(json.loads(Path(path).read_text("utf-8")))
