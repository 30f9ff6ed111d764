"""PCA with Hotelling T2 / Q-residual diagnostics and score-based masking."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .hypercube import ClassMask, Hypercube, Label
from .preprocess import SNV_MC, MC_ONLY, PreprocessSpec


class PcaError(ValueError):
    pass


class DegenerateMaskWarning(UserWarning):
    pass


def jackson_mudholkar(theta1: float, theta2: float, theta3: float,
                      alpha: float) -> float:
    """Q-residual limit from the power sums of the residual eigenvalues."""
    z = stats.norm.ppf(alpha)
    h0 = 1.0 - 2.0 * theta1 * theta3 / (3.0 * theta2 ** 2)
    term = (z * np.sqrt(2.0 * theta2 * h0 ** 2) / theta1
            + 1.0 + theta2 * h0 * (h0 - 1.0) / theta1 ** 2)
    return float(theta1 * term ** (1.0 / h0))


def residual_thetas(eigvals) -> tuple[float, float, float]:
    lam = np.clip(np.asarray(eigvals, dtype=float), 0.0, None)
    return float(lam.sum()), float((lam ** 2).sum()), float((lam ** 3).sum())


def box_q_limit(theta1: float, theta2: float, alpha: float) -> float:
    """Scaled chi-square approximation g * chi2(h) of the Q distribution."""
    g = theta2 / theta1
    h = theta1 ** 2 / theta2
    return float(g * stats.chi2.ppf(alpha, h))


def q_limit_from_thetas(thetas, alpha: float, q_train=None) -> float:
    """Jackson-Mudholkar Q limit.

    Falls back to the scaled chi-square form when the Jackson-Mudholkar
    expansion is invalid (h0 <= 0, which happens when one residual
    eigenvalue dominates), and to the empirical quantile of the training
    Q values when the residuals vanish.
    """
    t1, t2, t3 = thetas
    lim = np.nan
    if t1 > 1e-12 and t2 > 0:
        h0 = 1.0 - 2.0 * t1 * t3 / (3.0 * t2 ** 2)
        if h0 > 0:
            with np.errstate(invalid="ignore"):
                lim = jackson_mudholkar(t1, t2, t3, alpha)
        if not np.isfinite(lim) or lim <= 0:
            lim = box_q_limit(t1, t2, alpha)
    if not np.isfinite(lim) or lim <= 0:
        if q_train is not None and len(q_train):
            lim = float(np.quantile(q_train, alpha))
        lim = max(float(np.nan_to_num(lim)), np.finfo(float).tiny)
    return lim


def t2_limit(n_pc: int, n: int, alpha: float) -> float:
    if n <= n_pc:
        raise PcaError(f"T2 limit needs more rows ({n}) than PCs ({n_pc})")
    return float(n_pc * (n - 1) / (n - n_pc) * stats.f.ppf(alpha, n_pc, n - n_pc))


@dataclass(frozen=True, eq=False)
class PcaModel:
    preprocess: PreprocessSpec
    loadings: np.ndarray        # bands x n_pc, orthonormal columns
    variances: np.ndarray       # per-PC score variance
    residual_eigvals: np.ndarray
    n_train: int
    t2_limit_999: float
    q_limit_999: float

    @property
    def n_pc(self) -> int:
        return self.loadings.shape[1]

    @property
    def means(self):
        return self.preprocess.means

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.variances.sum() + self.residual_eigvals.sum()
        return self.variances / total


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # largest-magnitude element of each loading made positive
    rows = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[rows, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def fit_pca(X, n_pc: int, spec: PreprocessSpec = MC_ONLY,
            alpha: float = 0.999) -> PcaModel:
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    if n_pc < 1 or n_pc > min(n - 1, m):
        raise PcaError(f"n_pc={n_pc} not in 1..{min(n - 1, m)} for a {n}x{m} matrix")
    spec, Xt = spec.fit_transform(X)
    _, s, Vt = np.linalg.svd(Xt, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(1.0, np.abs(Xt).max()):
        raise PcaError("degenerate matrix: rank 0 after preprocessing")
    P = _fix_signs(Vt[:n_pc].T)
    eig = s ** 2 / (n - 1)
    model = PcaModel(spec, P, eig[:n_pc], eig[n_pc:], n, np.nan, np.nan)
    q_train = q_residuals(model, X)
    t2l = t2_limit(n_pc, n, alpha)
    ql = q_limit_from_thetas(residual_thetas(eig[n_pc:]), alpha, q_train)
    return PcaModel(spec, P, eig[:n_pc], eig[n_pc:], n, t2l, ql)


def _project(model: PcaModel, X):
    Xt = model.preprocess.transform(X)
    return Xt, Xt @ model.loadings


def scores(model: PcaModel, X) -> np.ndarray:
    return _project(model, X)[1]


def q_residuals(model: PcaModel, X) -> np.ndarray:
    Xt, T = _project(model, X)
    E = Xt - T @ model.loadings.T
    return np.einsum("ij,ij->i", E, E)


def hotelling_t2(model: PcaModel, X) -> np.ndarray:
    T = scores(model, X)
    return (T ** 2 / model.variances).sum(axis=1)


def confidence_limits(model: PcaModel, alpha: float = 0.999) -> tuple[float, float]:
    t2 = t2_limit(model.n_pc, model.n_train, alpha)
    q = q_limit_from_thetas(residual_thetas(model.residual_eigvals), alpha)
    return t2, q


def screen_outliers(X, n_pc: int, spec: PreprocessSpec = MC_ONLY,
                    alpha: float = 0.999) -> np.ndarray:
    """Indices of rows inside both the T2 and Q limits of a PCA fitted on X."""
    model = fit_pca(X, n_pc, spec, alpha)
    inside = ((hotelling_t2(model, X) <= model.t2_limit_999)
              & (q_residuals(model, X) <= model.q_limit_999))
    return np.flatnonzero(inside)


def otsu_threshold(values, bins: int = 256) -> float | None:
    """Otsu's threshold on a 1-D sample; None if the histogram is degenerate."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        return None
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1
    k = int(np.argmax(between))
    if between[k] <= 0:
        return None
    # empty bins leave the criterion flat; take the middle of that plateau
    j = k
    while j + 1 < between.size and between[j + 1] == between[k]:
        j += 1
    return float((edges[k + 1] + edges[j + 1]) / 2)


def mask_by_score(hc: Hypercube, exclusion: ClassMask | None = None,
                  spec: PreprocessSpec = SNV_MC, n_pc: int = 3, pc_index: int = 0,
                  threshold: float | None = None, polarity: str = "auto") -> ClassMask:
    """Split non-excluded pixels into TARGET/BACKGROUND along one PC score.

    ``polarity`` is ``"above"`` (scores above the threshold are TARGET),
    ``"below"``, or ``"auto"`` (the smaller side is TARGET).
    """
    if polarity not in ("auto", "above", "below"):
        raise PcaError(f"unknown polarity {polarity!r}")
    labels = np.full(hc.data.shape[:2], Label.BACKGROUND, dtype=np.uint8)
    if exclusion is not None:
        labels[exclusion.labels == Label.EXCLUDED] = Label.EXCLUDED
    sel = labels.ravel() != Label.EXCLUDED
    X = hc.spectra()[sel]
    n_pc = min(n_pc, X.shape[0] - 1, X.shape[1])
    try:
        model = fit_pca(X, n_pc, spec)
        s = scores(model, X)[:, pc_index]
    except (PcaError, ValueError):
        s = np.zeros(X.shape[0])
    thr = threshold if threshold is not None else otsu_threshold(s)
    if thr is None:
        warnings.warn("score histogram is degenerate; a manual threshold is required",
                      DegenerateMaskWarning, stacklevel=2)
        return ClassMask(labels)
    above = s > thr
    if polarity == "auto":
        target = above if above.sum() <= (~above).sum() else ~above
    else:
        target = above if polarity == "above" else ~above
    flat = labels.ravel()
    idx = np.flatnonzero(sel)
    flat[idx[target]] = Label.TARGET
    return ClassMask(flat.reshape(labels.shape))
