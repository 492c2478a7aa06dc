"""Ensemble regressors for lattice-constant prediction.

Two model families are provided: bootstrap ensembles of RBF-kernel epsilon-SVR
estimators (dual solved by pairwise SMO-style decomposition) and bootstrap
ensembles of LASSO estimators (cyclic coordinate descent, per-resample penalty
chosen by 10-fold cross-validation). Ensemble spread (population standard
deviation of member predictions) is reported as the prediction uncertainty.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

DEFAULT_GAMMA_GRID = tuple(float(2.0**k) for k in range(-8, 4))
DEFAULT_COST_GRID = tuple(float(2.0**k) for k in range(-2, 9))
DEFAULT_ENSEMBLE_SIZES = (10, 20, 30, 40, 50, 75, 100)
DEFAULT_EPSILON = 0.1          # tube width in standardized target units
DEFAULT_LASSO_TOL = 1e-8
DEFAULT_SVR_TOL = 1e-3
_TAU = 1e-12


class TooFewSamples(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ConstantTarget(ValueError):
    pass


class NonConvergence(Warning):
    """The SMO loop hit its iteration cap; the best iterate was returned."""


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class SvrHyperParams:
    gamma: float
    cost: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if min(self.gamma, self.cost, self.epsilon) <= 0:
            raise ValueError("gamma, cost, and epsilon must all be positive")


@dataclass(frozen=True)
class PredictionWithUncertainty:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be nonnegative")


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Standardizer":
        x_mean = X.mean(axis=0)
        x_scale = X.std(axis=0)
        x_scale[x_scale == 0.0] = 1.0
        y_scale = float(y.std()) or 1.0
        return cls(x_mean=x_mean, x_scale=x_scale, y_mean=float(y.mean()), y_scale=y_scale)

    def x(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale

    def y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def y_inverse(self, u) -> np.ndarray:
        return np.asarray(u, dtype=float) * self.y_scale + self.y_mean


@dataclass
class SvrEstimator:
    beta: np.ndarray          # dual coefficients on the support rows
    bias: float
    support: np.ndarray       # standardized support vectors, (m, p)
    params: SvrHyperParams

    def predict(self, Z: np.ndarray) -> np.ndarray:
        if len(self.beta) == 0:
            return np.full(len(Z), self.bias)
        return _rbf_kernel(Z, self.support, self.params.gamma) @ self.beta + self.bias


@dataclass
class LassoEstimator:
    coef: np.ndarray
    intercept: float
    lam: float

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.coef + self.intercept


@dataclass
class EnsembleModel:
    kind: str                               # esvr | elasso
    estimators: list
    standardization: Standardizer
    seed: int
    extra: dict = dataclass_field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.standardization.x_mean)


# --- splitting and metrics ---------------------------------------------------------


def train_test_split(X, y, cfg: SplitConfig):
    """Seeded permutation split; returns X_train, X_test, y_train, y_test."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(X)
    if len(y) != n:
        raise DimensionMismatch(f"X has {n} rows but y has {len(y)}")
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    n_train = int(math.floor(cfg.train_fraction * n + 1e-9))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    train, test = perm[:n_train], perm[n_train:]
    return X[train], X[test], y[train], y[test]


def r2(y_true, y_pred) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if len(y_true) != len(y_pred):
        raise DimensionMismatch("y_true and y_pred lengths differ")
    if len(y_true) < 2:
        raise TooFewSamples("r2 needs at least 2 samples")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantTarget("r2 undefined for a constant target")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


# --- epsilon-SVR via SMO -----------------------------------------------------------


def _rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def _smo_epsilon_svr(K, y, cost, epsilon, tol, max_iter):
    """Solve the epsilon-SVR dual by maximal-violating-pair decomposition.

    Works on the doubled variable vector (upper-tube and lower-tube
    multipliers); stops when the maximum KKT violation drops to ``tol``.
    Returns (beta, bias, n_iterations, converged).
    """
    n = len(y)
    sign = np.concatenate([np.ones(n), -np.ones(n)])
    alpha = np.zeros(2 * n)
    G = np.concatenate([epsilon - y, epsilon + y])
    K2 = np.vstack([K, K])  # row p is the kernel row of sample p mod n

    iterations = 0
    converged = False
    while iterations < max_iter:
        minus_yg = -sign * G
        up = ((alpha < cost) & (sign > 0)) | ((alpha > 0) & (sign < 0))
        low = ((alpha < cost) & (sign < 0)) | ((alpha > 0) & (sign > 0))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.argmax(np.where(up, minus_yg, -np.inf)))
        j = int(np.argmin(np.where(low, minus_yg, np.inf)))
        if minus_yg[i] - minus_yg[j] <= tol:
            converged = True
            break

        ii, jj = i % n, j % n
        si, sj = sign[i], sign[j]
        quad = K[ii, ii] + K[jj, jj] - 2.0 * K[ii, jj]
        if quad <= 0.0:
            quad = _TAU
        old_i, old_j = alpha[i], alpha[j]
        if si != sj:
            delta = (-G[i] - G[j]) / quad
            diff = old_i - old_j
            ai, aj = old_i + delta, old_j + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            else:
                if ai < 0:
                    ai, aj = 0.0, -diff
            if diff > 0:
                if ai > cost:
                    ai, aj = cost, cost - diff
            else:
                if aj > cost:
                    aj, ai = cost, cost + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = old_i + old_j
            ai, aj = old_i - delta, old_j + delta
            if total > cost:
                if ai > cost:
                    ai, aj = cost, total - cost
            else:
                if aj < 0:
                    aj, ai = 0.0, total
            if total > cost:
                if aj > cost:
                    aj, ai = cost, total - cost
            else:
                if ai < 0:
                    ai, aj = 0.0, total
        d_i, d_j = ai - old_i, aj - old_j
        if d_i == 0.0 and d_j == 0.0:
            converged = True  # numerically stalled at the optimum
            break
        alpha[i], alpha[j] = ai, aj
        G += sign * (si * K2[:, ii]) * d_i + sign * (sj * K2[:, jj]) * d_j
        iterations += 1

    minus_yg = -sign * G
    free = (alpha > 0.0) & (alpha < cost)
    if free.any():
        bias = float(np.mean(minus_yg[free]))
    else:
        up = ((alpha < cost) & (sign > 0)) | ((alpha > 0) & (sign < 0))
        low = ((alpha < cost) & (sign < 0)) | ((alpha > 0) & (sign > 0))
        hi = np.max(minus_yg[up]) if up.any() else 0.0
        lo = np.min(minus_yg[low]) if low.any() else 0.0
        bias = float((hi + lo) / 2.0)
    beta = alpha[:n] - alpha[n:]
    return beta, bias, iterations, converged


def fit_svr(
    X: np.ndarray,
    y: np.ndarray,
    hp: SvrHyperParams,
    tol: float = DEFAULT_SVR_TOL,
    max_iter: int | None = None,
) -> SvrEstimator:
    """Fit one epsilon-SVR on standardized inputs."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if max_iter is None:
        max_iter = max(40_000, 400 * n)
    K = _rbf_kernel(X, X, hp.gamma)
    beta, bias, iterations, converged = _smo_epsilon_svr(
        K, y, hp.cost, hp.epsilon, tol, max_iter
    )
    if not converged:
        warnings.warn(
            f"SMO stopped after {iterations} iterations without reaching tol={tol}",
            NonConvergence,
        )
    keep = np.abs(beta) > 1e-12
    return SvrEstimator(beta=beta[keep], bias=bias, support=X[keep], params=hp)


def train_esvr(
    X,
    y,
    gamma_grid=DEFAULT_GAMMA_GRID,
    cost_grid=DEFAULT_COST_GRID,
    ensemble_sizes=DEFAULT_ENSEMBLE_SIZES,
    validation=None,
    val_fraction: float = 0.25,
    resample: str = "bootstrap",
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
    tol: float = DEFAULT_SVR_TOL,
) -> EnsembleModel:
    """Train a bagged epsilon-SVR ensemble with per-estimator grid search.

    Each estimator trains on a bootstrap resample; its (gamma, cost) pair is
    chosen by grid search scored on that estimator's out-of-bag samples. The
    ensemble size is then chosen from ``ensemble_sizes`` by maximum R-squared
    on the validation data: a split carved from the training set by default,
    or any (X, y) pair passed as ``validation`` (pass the test set to mimic
    protocols that select on test performance).
    """
    if not gamma_grid or not cost_grid or not ensemble_sizes:
        raise ValueError("gamma_grid, cost_grid, and ensemble_sizes must be non-empty")
    if resample not in ("bootstrap", "full"):
        raise ValueError(f"unknown resample mode {resample!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) != len(y):
        raise DimensionMismatch("X and y lengths differ")
    if len(X) < 2:
        raise TooFewSamples("need at least 2 training samples")

    std = Standardizer.fit(X, y)
    Z, u = std.x(X), std.y(y)

    if validation is None:
        carve_rng = np.random.default_rng(seed)
        perm = carve_rng.permutation(len(Z))
        n_val = max(2, round(val_fraction * len(Z)))
        if len(Z) - n_val < 2:
            # too few samples to carve a holdout; validate on the training data
            Z_fit, u_fit, Z_val, y_val = Z, u, Z, y
        else:
            val_idx, fit_idx = perm[:n_val], perm[n_val:]
            Z_fit, u_fit = Z[fit_idx], u[fit_idx]
            Z_val, y_val = Z[val_idx], y[val_idx]
    else:
        X_val, y_val = validation
        Z_fit, u_fit = Z, u
        Z_val = std.x(np.asarray(X_val, dtype=float))
        y_val = np.asarray(y_val, dtype=float)

    sizes = sorted(set(int(s) for s in ensemble_sizes))
    if sizes[0] < 1:
        raise ValueError("ensemble sizes must be positive")
    m_max = sizes[-1]
    children = np.random.SeedSequence(seed).spawn(m_max)
    n_fit = len(Z_fit)

    estimators = []
    for b in range(m_max):
        rng = np.random.default_rng(children[b])
        if resample == "bootstrap":
            picks = rng.integers(0, n_fit, n_fit)
        else:
            picks = np.arange(n_fit)
        oob = np.setdiff1d(np.arange(n_fit), np.unique(picks))
        Zb, ub = Z_fit[picks], u_fit[picks]
        Z_score = Z_fit[oob] if len(oob) else Z_fit
        u_score = u_fit[oob] if len(oob) else u_fit

        best = None
        for gamma in gamma_grid:
            for cost in cost_grid:
                est = fit_svr(Zb, ub, SvrHyperParams(gamma, cost, epsilon), tol=tol)
                mse = float(np.mean((est.predict(Z_score) - u_score) ** 2))
                if best is None or mse < best[0]:
                    best = (mse, est)
        estimators.append(best[1])

    member_preds = np.vstack([est.predict(Z_val) for est in estimators])
    cumulative = np.cumsum(member_preds, axis=0) / np.arange(1, m_max + 1)[:, None]
    best_size, best_r2 = sizes[0], -np.inf
    for size in sizes:
        score = r2(y_val, std.y_inverse(cumulative[size - 1]))
        if score > best_r2:
            best_size, best_r2 = size, score
    return EnsembleModel(
        kind="esvr",
        estimators=estimators[:best_size],
        standardization=std,
        seed=seed,
        extra={"ensemble_size": best_size, "validation_r2": best_r2,
               "resample": resample},
    )


# --- LASSO via cyclic coordinate descent ---------------------------------------------


def _soft_threshold(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def _lasso_cd(gram, corr, diag, lam, tol, max_iter, w0=None):
    """Minimize (1/2n)||y - Xw||^2 + lam*||w||_1 given Gram = X'X/n, corr = X'y/n.

    The sweep loop runs on plain Python floats; for the handful of features
    used here that is severalfold faster than numpy scalar indexing.
    """
    p = len(corr)
    gram_rows = [[float(v) for v in row] for row in np.asarray(gram)]
    corr_list = [float(v) for v in corr]
    diag_list = [float(v) for v in diag]
    w = [0.0] * p if w0 is None else [float(v) for v in w0]
    gw = [sum(gram_rows[i][j] * w[j] for j in range(p)) for i in range(p)]
    for _ in range(max_iter):
        biggest = 0.0
        for j in range(p):
            dj = diag_list[j]
            if dj <= 0.0:
                continue
            rho = corr_list[j] - gw[j] + dj * w[j]
            new = _soft_threshold(rho, lam) / dj
            delta = new - w[j]
            if delta != 0.0:
                col = gram_rows[j]
                for i in range(p):
                    gw[i] += col[i] * delta
                w[j] = new
                if -delta > biggest:
                    biggest = -delta
                elif delta > biggest:
                    biggest = delta
        if biggest <= tol:
            break
    return np.asarray(w)


def fit_lasso(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = DEFAULT_LASSO_TOL,
    max_iter: int = 100_000,
):
    """Fit one LASSO by cyclic coordinate descent; returns (coef, intercept)."""
    if lam < 0:
        raise ValueError(f"penalty must be nonnegative, got {lam}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc / n
    corr = Xc.T @ yc / n
    w = _lasso_cd(gram, corr, np.diag(gram).copy(), lam, tol, max_iter)
    intercept = y_mean - float(x_mean @ w)
    return w, intercept


def lasso_lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty that zeroes every coefficient: max|X'(y - mean(y))| / n."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    return float(np.max(np.abs(Xc.T @ yc)) / len(y))


def train_elasso(
    X,
    y,
    B: int = 1000,
    folds: int = 10,
    lambda_grid=None,
    seed: int = 0,
    tol: float = DEFAULT_LASSO_TOL,
) -> EnsembleModel:
    """Train a bootstrap LASSO ensemble.

    Each of the ``B`` resamples carries its own penalty, chosen to minimize
    mean squared error under ``folds``-fold cross-validation over a 50-point
    logarithmic grid below that resample's shutoff penalty (or over
    ``lambda_grid`` when given).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) != len(y):
        raise DimensionMismatch("X and y lengths differ")
    n = len(y)
    if n < folds:
        raise TooFewSamples(f"need at least {folds} samples for {folds}-fold CV, got {n}")
    if B < 1:
        raise ValueError("B must be at least 1")

    std = Standardizer.fit(X, y)
    Z, u = std.x(X), std.y(y)
    children = np.random.SeedSequence(seed).spawn(B)

    estimators = []
    for b in range(B):
        rng = np.random.default_rng(children[b])
        picks = rng.integers(0, n, n)
        Zb, ub = Z[picks], u[picks]
        if lambda_grid is None:
            lam_max = lasso_lambda_max(Zb, ub)
            if lam_max <= 0:
                lam_max = 1e-8
            grid = np.geomspace(lam_max, lam_max * 1e-4, 50)
        else:
            grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]

        fold_ids = rng.permutation(n) % folds
        cv_errors = np.zeros(len(grid))
        for fold in range(folds):
            val_mask = fold_ids == fold
            Zt, ut = Zb[~val_mask], ub[~val_mask]
            Zv, uv = Zb[val_mask], ub[val_mask]
            nt = len(ut)
            xm, ym = Zt.mean(axis=0), float(ut.mean())
            Xc, yc = Zt - xm, ut - ym
            gram = Xc.T @ Xc / nt
            corr = Xc.T @ yc / nt
            diag = np.diag(gram).copy()
            w = None
            for g_idx, lam in enumerate(grid):
                # scoring fits ride the warm-started path; loose tolerance and a
                # small sweep cap keep ill-conditioned resamples from stalling
                w = _lasso_cd(gram, corr, diag, lam, max(tol, 1e-6), 300, w0=w)
                pred = (Zv - xm) @ w + ym
                cv_errors[g_idx] += float(np.mean((pred - uv) ** 2))
        best_idx = int(np.argmin(cv_errors))
        best_lam = float(grid[best_idx])
        xm, ym = Zb.mean(axis=0), float(ub.mean())
        Xc, yc = Zb - xm, ub - ym
        gram = Xc.T @ Xc / n
        corr = Xc.T @ yc / n
        diag = np.diag(gram).copy()
        w = None
        for lam in grid[: best_idx + 1]:
            w = _lasso_cd(gram, corr, diag, float(lam), max(tol, 1e-6), 300, w0=w)
        w = _lasso_cd(gram, corr, diag, best_lam, tol, 5_000, w0=w)
        intercept = ym - float(xm @ w)
        estimators.append(LassoEstimator(coef=w, intercept=intercept, lam=best_lam))

    return EnsembleModel(
        kind="elasso",
        estimators=estimators,
        standardization=std,
        seed=seed,
        extra={"bootstrap_count": B, "folds": folds},
    )


# --- prediction and persistence -------------------------------------------------------


def predict(model: EnsembleModel, x) -> PredictionWithUncertainty:
    """Ensemble mean and population spread for one feature vector, in angstrom."""
    vector = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    if vector.ndim != 1 or len(vector) != model.n_features:
        raise DimensionMismatch(
            f"expected a vector of length {model.n_features}, got shape {vector.shape}"
        )
    means, stds = predict_batch(model, vector[None, :])
    return PredictionWithUncertainty(mean=float(means[0]), std=float(stds[0]))


def predict_batch(model: EnsembleModel, X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"expected shape (n, {model.n_features}), got {X.shape}"
        )
    Z = model.standardization.x(X)
    member = np.vstack([est.predict(Z) for est in model.estimators])
    raw = model.standardization.y_inverse(member)
    return raw.mean(axis=0), raw.std(axis=0, ddof=0)


def save_model(model: EnsembleModel, path) -> None:
    std = model.standardization
    payload = {
        "kind": model.kind,
        "seed": model.seed,
        "extra": model.extra,
        "standardization": {
            "x_mean": std.x_mean.tolist(),
            "x_scale": std.x_scale.tolist(),
            "y_mean": std.y_mean,
            "y_scale": std.y_scale,
        },
        "estimators": [_estimator_to_dict(model.kind, est) for est in model.estimators],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def load_model(path) -> EnsembleModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    std = Standardizer(
        x_mean=np.asarray(payload["standardization"]["x_mean"], dtype=float),
        x_scale=np.asarray(payload["standardization"]["x_scale"], dtype=float),
        y_mean=float(payload["standardization"]["y_mean"]),
        y_scale=float(payload["standardization"]["y_scale"]),
    )
    kind = payload["kind"]
    estimators = [_estimator_from_dict(kind, blob) for blob in payload["estimators"]]
    return EnsembleModel(
        kind=kind,
        estimators=estimators,
        standardization=std,
        seed=int(payload["seed"]),
        extra=dict(payload.get("extra", {})),
    )


def _estimator_to_dict(kind: str, est) -> dict:
    if kind == "esvr":
        return {
            "gamma": est.params.gamma,
            "cost": est.params.cost,
            "epsilon": est.params.epsilon,
            "bias": est.bias,
            "beta": est.beta.tolist(),
            "support": est.support.tolist(),
        }
    if kind == "elasso":
        return {"coef": est.coef.tolist(), "intercept": est.intercept, "lambda": est.lam}
    raise ValueError(f"unknown model kind {kind!r}")


def _estimator_from_dict(kind: str, blob: dict):
    if kind == "esvr":
        return SvrEstimator(
            beta=np.asarray(blob["beta"], dtype=float),
            bias=float(blob["bias"]),
            support=np.asarray(blob["support"], dtype=float),
            params=SvrHyperParams(
                gamma=float(blob["gamma"]), cost=float(blob["cost"]),
                epsilon=float(blob["epsilon"]),
            ),
        )
    if kind == "elasso":
        return LassoEstimator(
            coef=np.asarray(blob["coef"], dtype=float),
            intercept=float(blob["intercept"]),
            lam=float(blob["lambda"]),
        )
    raise ValueError(f"unknown model kind {kind!r}")
