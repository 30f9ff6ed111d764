"""Row-wise spectral preprocessing and column mean centering.

A :class:`PreprocessSpec` is an ordered list of steps. Row-wise steps need
no fitting; ``MEAN_CENTER`` learns column means on the training matrix and
reuses them unchanged for every later matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import savgol_filter


class PreprocessError(ValueError):
    pass


def _as2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise PreprocessError(f"expected a 2-D spectra matrix, got shape {X.shape}")
    return X


def snv(X) -> np.ndarray:
    """Standard normal variate: each row to mean 0, sample std 1."""
    X = _as2d(X)
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, ddof=1, keepdims=True)
    bad = np.flatnonzero(~(sd[:, 0] > 0))
    if bad.size:
        raise PreprocessError(f"row {int(bad[0])} has zero standard deviation")
    return (X - mu) / sd


def detrend(X, order: int = 2) -> np.ndarray:
    """Subtract the least-squares polynomial trend (vs band index) of each row."""
    X = _as2d(X)
    n = X.shape[1]
    if n <= order:
        raise PreprocessError(f"rows of length {n} too short for order {order}")
    # centred abscissa keeps the Vandermonde matrix well conditioned
    u = np.arange(n) - (n - 1) / 2.0
    V = np.vander(u, order + 1)
    coef, *_ = np.linalg.lstsq(V, X.T, rcond=None)
    return X - (V @ coef).T


def savgol_derivative(X, deriv_order: int = 1, window: int = 15,
                      poly_order: int = 2, delta: float = 1.0) -> np.ndarray:
    """Savitzky-Golay derivative along each row.

    Edge points are evaluated from a polynomial fitted to the outermost
    full window.
    """
    X = _as2d(X)
    if deriv_order not in (1, 2):
        raise PreprocessError("deriv_order must be 1 or 2")
    if window % 2 == 0 or window < 3:
        raise PreprocessError(f"window must be odd and >= 3, got {window}")
    if window > X.shape[1]:
        raise PreprocessError(f"window {window} longer than rows ({X.shape[1]})")
    if poly_order >= window:
        raise PreprocessError("poly_order must be smaller than window")
    if deriv_order > poly_order:
        raise PreprocessError("deriv_order cannot exceed poly_order")
    return savgol_filter(X, window, poly_order, deriv=deriv_order, delta=delta,
                         axis=1, mode="interp")


def fit_mean_center(X_train) -> np.ndarray:
    return _as2d(X_train).mean(axis=0)


def apply_mean_center(X, means) -> np.ndarray:
    X = _as2d(X)
    means = np.asarray(means, dtype=float)
    if means.shape != (X.shape[1],):
        raise PreprocessError(
            f"{means.size} column means for {X.shape[1]} columns")
    return X - means


# ------------------------------------------------------------------ pipeline

STEP_NAMES = ("SNV", "DETREND", "SAVGOL_DERIV", "MEAN_CENTER")


@dataclass(frozen=True)
class Step:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in STEP_NAMES:
            raise PreprocessError(f"unknown preprocessing step {self.name!r}")


@dataclass(frozen=True, eq=False)
class PreprocessSpec:
    steps: tuple[Step, ...] = ()
    means: np.ndarray | None = None

    def __post_init__(self):
        steps = tuple(s if isinstance(s, Step) else Step(*s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        names = [s.name for s in steps]
        if "MEAN_CENTER" in names and names.index("MEAN_CENTER") != len(names) - 1:
            raise PreprocessError("MEAN_CENTER must be the final step")
        if names.count("MEAN_CENTER") > 1:
            raise PreprocessError("MEAN_CENTER may appear only once")

    @property
    def centers(self) -> bool:
        return bool(self.steps) and self.steps[-1].name == "MEAN_CENTER"

    @property
    def fitted(self) -> bool:
        return not self.centers or self.means is not None

    @property
    def label(self) -> str:
        parts = []
        for s in self.steps:
            if s.name == "SAVGOL_DERIV":
                parts.append(f"D{s.params.get('deriv_order', 1)}")
            elif s.name == "MEAN_CENTER":
                parts.append("MC")
            else:
                parts.append(s.name)
        return "+".join(parts) or "none"

    def transform_rows(self, X) -> np.ndarray:
        """Apply the row-wise steps only (everything before MEAN_CENTER)."""
        X = _as2d(X)
        for s in self.steps:
            if s.name == "SNV":
                X = snv(X)
            elif s.name == "DETREND":
                X = detrend(X, **s.params)
            elif s.name == "SAVGOL_DERIV":
                X = savgol_derivative(X, **s.params)
        return X

    def fit(self, X_train) -> "PreprocessSpec":
        if not self.centers:
            return replace(self, means=None)
        return replace(self, means=fit_mean_center(self.transform_rows(X_train)))

    def fit_transform(self, X_train) -> tuple["PreprocessSpec", np.ndarray]:
        Xr = self.transform_rows(X_train)
        if not self.centers:
            return replace(self, means=None), Xr
        means = fit_mean_center(Xr)
        return replace(self, means=means), apply_mean_center(Xr, means)

    def transform(self, X) -> np.ndarray:
        if not self.fitted:
            raise PreprocessError("pipeline has MEAN_CENTER but was never fitted")
        Xr = self.transform_rows(X)
        return apply_mean_center(Xr, self.means) if self.centers else Xr

    def to_dict(self) -> dict:
        return {
            "steps": [{"name": s.name, "params": dict(s.params)} for s in self.steps],
            "means": None if self.means is None else [float(m) for m in self.means],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessSpec":
        means = d.get("means")
        return cls(tuple(Step(s["name"], dict(s.get("params", {}))) for s in d["steps"]),
                   None if means is None else np.asarray(means, dtype=float))


def apply_pipeline(spec: PreprocessSpec, X) -> np.ndarray:
    return spec.transform(X)


MEAN_CENTER = Step("MEAN_CENTER")
SNV_MC = PreprocessSpec((Step("SNV"), MEAN_CENTER))
DETREND_MC = PreprocessSpec((Step("DETREND", {"order": 2}), MEAN_CENTER))
D1_MC = PreprocessSpec((Step("SAVGOL_DERIV", {"deriv_order": 1, "window": 15,
                                              "poly_order": 2}), MEAN_CENTER))
D2_MC = PreprocessSpec((Step("SAVGOL_DERIV", {"deriv_order": 2, "window": 15,
                                              "poly_order": 2}), MEAN_CENTER))
MC_ONLY = PreprocessSpec((MEAN_CENTER,))

PRESETS = {"snv": SNV_MC, "detrend": DETREND_MC, "d1": D1_MC, "d2": D2_MC, "mc": MC_ONLY}
