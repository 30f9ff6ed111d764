"""PLS2 / PLS-DA by NIPALS, Soft PLS-DA assignment and sparse (Lasso) variant.

The sparse fit soft-thresholds every NIPALS weight vector so that exactly
``k_per_lv`` variables stay active on each latent variable. Class
assignment accepts a sample for class *c* only if its Q residual is inside
the model limit and its predicted ``y_c`` lies inside the class
acceptability range; a sample accepted by zero or several classes is
not assigned (NA).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .detect import PredictionImage
from .hypercube import BandSet, ClassMask, Hypercube, Label, STANDARD_WAVELENGTHS
from .metrics import confusion_from_codes, derive_stats
from .pca import q_limit_from_thetas
from .preprocess import PreprocessSpec, SNV_MC
from .sampling import FoldPlan, SpectraTable, TARGET_CLASS

log = logging.getLogger(__name__)

NA = "NA"
MODEL_FORMAT = "hsipest.softplsda"
MODEL_VERSION = 1

SELECTION_1_NM = ((1220, 1295), (1370, 1410), (1420, 1480))
SELECTION_2_NM = SELECTION_1_NM + ((980, 1070), (1330, 1350))
DEFAULT_K_GRID = tuple(range(5, 136, 5)) + (137,)
DEFAULT_LV_RANGE = tuple(range(1, 11))


class PlsError(ValueError):
    pass


def selection_1(wavelengths=STANDARD_WAVELENGTHS) -> BandSet:
    return BandSet.from_intervals(SELECTION_1_NM, wavelengths)


def selection_2(wavelengths=STANDARD_WAVELENGTHS) -> BandSet:
    return BandSet.from_intervals(SELECTION_2_NM, wavelengths)


# ------------------------------------------------------------------ NIPALS

def soft_threshold_top_k(w: np.ndarray, k: int | None):
    """Soft-threshold ``w`` so that its ``k`` largest-magnitude entries survive.

    The threshold is the (k+1)-th largest magnitude; equal magnitudes
    favour lower indices. Returns the thresholded vector (not normalised)
    and the sorted indices of the retained entries.
    """
    n = w.size
    if k is None or k >= n:
        return w.copy(), np.arange(n)
    if k < 1:
        raise PlsError(f"k_per_lv must be >= 1, got {k}")
    order = np.argsort(-np.abs(w), kind="stable")
    keep = np.sort(order[:k])
    delta = abs(w[order[k]])
    out = np.zeros_like(w)
    out[keep] = np.sign(w[keep]) * (np.abs(w[keep]) - delta)
    return out, keep


@dataclass
class _Path:
    W: np.ndarray
    P: np.ndarray
    C: np.ndarray        # y loadings, K x A
    T: np.ndarray
    thetas: list         # residual (theta1, theta2, theta3) after each LV
    keeps: list


def _nipals(X: np.ndarray, Y: np.ndarray, n_lv: int, k: int | None = None,
            tol: float = 1e-10, max_iter: int = 500) -> _Path:
    """NIPALS PLS2 on centred X (n x m) and Y (n x K) with X and Y deflation.

    With ``k`` set, each weight vector is soft-thresholded to its ``k``
    largest entries inside the inner loop.
    """
    X = X.copy()
    Y = Y.copy()
    n, m = X.shape
    K = Y.shape[1]
    W = np.zeros((m, n_lv))
    P = np.zeros((m, n_lv))
    C = np.zeros((K, n_lv))
    T = np.zeros((n, n_lv))
    G = X.T @ X
    thetas, keeps = [], []
    dense = k is None or k >= m
    for a in range(n_lv):
        if not np.any(Y):
            raise PlsError(f"Y fully explained before LV {a + 1}")
        # the NIPALS fixed point without thresholding is the leading singular
        # pair of X'Y; taking it directly also copes with near-tied singular
        # values, where the power iteration stalls
        U, _, Vt = np.linalg.svd(X.T @ Y, full_matrices=False)
        if dense:
            w, keep = U[:, 0].copy(), np.arange(m)
            j = int(np.argmax(np.abs(w)))
            w *= np.sign(w[j]) / np.linalg.norm(w)
            iters = 1
        else:
            u = Y @ Vt[0]
            iters = max_iter
        t_old = None
        for _ in range(iters):
            if not dense:
                w, keep = soft_threshold_top_k(X.T @ u, k)
                nw = np.linalg.norm(w)
                if nw == 0:
                    raise PlsError(f"zero weight vector at LV {a + 1}")
                w /= nw
            t = X @ w
            tt = t @ t
            if tt == 0:
                raise PlsError(f"zero score vector at LV {a + 1} (n_lv exceeds rank)")
            c = Y.T @ t / tt
            cc = c @ c
            if cc == 0:
                raise PlsError(f"Y loadings vanish at LV {a + 1}")
            if dense:
                break
            u = Y @ c / cc
            if t_old is not None and np.linalg.norm(t - t_old) <= tol * np.linalg.norm(t):
                break
            t_old = t
        else:
            raise PlsError(f"NIPALS did not converge in {max_iter} iterations at LV {a + 1}")
        p = X.T @ t / tt
        X -= np.outer(t, p)
        Y -= np.outer(t, c)
        # X_a' X_a = X_{a-1}' X_{a-1} - (t't) p p'
        G = G - tt * np.outer(p, p)
        Gc = G / max(n - 1, 1)
        thetas.append((float(np.trace(Gc)), float((Gc * Gc).sum()),
                       float((Gc * (Gc @ Gc)).sum())))
        W[:, a], P[:, a], C[:, a], T[:, a] = w, p, c, t
        keeps.append(keep)
    return _Path(W, P, C, T, thetas, keeps)


def _rotation(W: np.ndarray, P: np.ndarray) -> np.ndarray:
    return W @ np.linalg.inv(P.T @ W)


# ------------------------------------------------------------------ models

@dataclass(frozen=True, eq=False)
class PlsModel:
    preprocess: PreprocessSpec
    W: np.ndarray
    P: np.ndarray
    C: np.ndarray
    B: np.ndarray
    y_mean: np.ndarray
    resid_thetas: tuple
    q_train: np.ndarray
    classes: tuple = ()
    class_stats: dict = field(default_factory=dict)
    sparsity: tuple = ()           # per-LV retained indices; () when dense
    k_per_lv: int | None = None
    wavelengths: np.ndarray | None = None

    @property
    def n_lv(self) -> int:
        return self.W.shape[1]

    @property
    def n_bands(self) -> int:
        return self.W.shape[0]

    @property
    def rotation(self) -> np.ndarray:
        return _rotation(self.W, self.P)

    def predict(self, X) -> np.ndarray:
        return self.preprocess.transform(X) @ self.B + self.y_mean

    def predict_with_q(self, X) -> tuple[np.ndarray, np.ndarray]:
        Xt = self.preprocess.transform(X)
        T = Xt @ self.rotation
        E = Xt - T @ self.P.T
        return Xt @ self.B + self.y_mean, np.einsum("ij,ij->i", E, E)


def _one_hot(labels, classes) -> np.ndarray:
    labels = np.asarray(labels).astype(str)
    return (labels[:, None] == np.asarray(classes, dtype=str)[None, :]).astype(float)


def _class_stats(Yhat: np.ndarray, Y: np.ndarray) -> dict:
    K = Y.shape[1]
    st = {"mu_in": np.zeros(K), "sd_in": np.zeros(K), "mu_out": np.zeros(K),
          "sd_out": np.zeros(K)}
    for c in range(K):
        inside = Y[:, c] == 1
        a, b = Yhat[inside, c], Yhat[~inside, c]
        st["mu_in"][c] = a.mean() if a.size else np.nan
        st["sd_in"][c] = a.std(ddof=1) if a.size > 1 else 0.0
        st["mu_out"][c] = b.mean() if b.size else np.nan
        st["sd_out"][c] = b.std(ddof=1) if b.size > 1 else 0.0
    return st


def _is_one_hot(Y) -> bool:
    return bool(np.isin(Y, (0.0, 1.0)).all() and np.allclose(Y.sum(axis=1), 1.0))


def _build(spec, path: _Path, a: int, y_mean, Y, q_fn, classes, k, wavelengths,
           sparse: bool) -> PlsModel:
    W, P, C = path.W[:, :a], path.P[:, :a], path.C[:, :a]
    R = _rotation(W, P)
    B = R @ C.T
    Yhat = path.T[:, :a] @ C.T + y_mean
    st = _class_stats(Yhat, Y) if classes else {}
    return PlsModel(spec, W, P, C, B, y_mean, path.thetas[a - 1], q_fn(a),
                    tuple(classes), st,
                    tuple(path.keeps[:a]) if sparse else (), k if sparse else None,
                    None if wavelengths is None else np.asarray(wavelengths, float))


def _fit(X, Y, n_lv, spec, k, classes, wavelengths) -> PlsModel:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise PlsError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if classes is None and _is_one_hot(Y) and Y.shape[1] > 1:
        classes = tuple(str(i) for i in range(Y.shape[1]))
    spec, Xt = spec.fit_transform(X)
    y_mean = Y.mean(axis=0)
    Yc = Y - y_mean
    path = _nipals(Xt, Yc, n_lv, k)
    E = Xt - path.T @ path.P.T
    q = np.einsum("ij,ij->i", E, E)
    return _build(spec, path, n_lv, y_mean, Y, lambda a: q, classes or (), k,
                  wavelengths, sparse=k is not None)


def fit_pls2(X, Y_dummy, n_lv: int, spec: PreprocessSpec = SNV_MC, classes=None,
             wavelengths=None) -> PlsModel:
    return _fit(X, Y_dummy, n_lv, spec, None, classes, wavelengths)


def fit_sparse_pls2(X, Y_dummy, n_lv: int, k_per_lv: int,
                    spec: PreprocessSpec = SNV_MC, classes=None,
                    wavelengths=None) -> PlsModel:
    m = np.asarray(X).shape[1]
    if not 1 <= k_per_lv <= m:
        raise PlsError(f"k_per_lv={k_per_lv} outside 1..{m}")
    return _fit(X, Y_dummy, n_lv, spec, int(k_per_lv), classes, wavelengths)


# ------------------------------------------------------------ Soft PLS-DA

def gaussian_crossing(mu_a, sd_a, mu_b, sd_b) -> float:
    """Point between the means where the two normal densities are equal."""
    lo, hi = min(mu_a, mu_b), max(mu_a, mu_b)
    A = 1.0 / (2 * sd_a ** 2) - 1.0 / (2 * sd_b ** 2)
    Bq = -mu_a / sd_a ** 2 + mu_b / sd_b ** 2
    Cq = mu_a ** 2 / (2 * sd_a ** 2) - mu_b ** 2 / (2 * sd_b ** 2) + math.log(sd_a / sd_b)
    if abs(A) < 1e-12 * max(1.0 / sd_a ** 2, 1.0 / sd_b ** 2):
        roots = [-Cq / Bq] if Bq != 0 else []
    else:
        disc = Bq * Bq - 4 * A * Cq
        roots = [] if disc < 0 else [(-Bq + s * math.sqrt(disc)) / (2 * A) for s in (1, -1)]
    inside = [r for r in roots if lo <= r <= hi]
    if inside:
        mid = (lo + hi) / 2
        return float(min(inside, key=lambda r: abs(r - mid)))
    return float((mu_a * sd_b + mu_b * sd_a) / (sd_a + sd_b))


@dataclass(frozen=True, eq=False)
class SoftPlsdaModel:
    pls: PlsModel
    t_lower: np.ndarray
    t_upper: np.ndarray
    q_limit_999: float
    alpha: float = 0.999
    z_upper: float = float("nan")

    @property
    def classes(self) -> tuple:
        return self.pls.classes

    @property
    def sparsity(self) -> tuple:
        return self.pls.sparsity

    def assign_codes(self, X) -> np.ndarray:
        """Class index per row, -1 for not assigned."""
        yhat, q = self.pls.predict_with_q(X)
        return _assign_from(yhat, q, self.t_lower, self.t_upper, self.q_limit_999)


def _assign_from(yhat, q, lo, hi, qlim) -> np.ndarray:
    ok = (q <= qlim)[:, None] & (yhat >= lo) & (yhat <= hi)
    n_pass = ok.sum(axis=1)
    return np.where(n_pass == 1, np.argmax(ok, axis=1), -1)


def _limits(st, alpha, z_upper):
    K = len(st["mu_in"])
    lo, hi = np.zeros(K), np.zeros(K)
    for c in range(K):
        if not st["sd_in"][c] > 0 or not st["sd_out"][c] > 0:
            raise PlsError(f"degenerate class {c}: zero spread of predicted y")
        lo[c] = gaussian_crossing(st["mu_out"][c], st["sd_out"][c],
                                  st["mu_in"][c], st["sd_in"][c])
        hi[c] = st["mu_in"][c] + z_upper * st["sd_in"][c]
    return lo, hi


def soft_limits(model: PlsModel, alpha: float = 0.999,
                z_upper: float | None = None) -> SoftPlsdaModel:
    if not model.classes:
        raise PlsError("soft limits need a class-coded model")
    z = float(stats.norm.ppf(alpha)) if z_upper is None else float(z_upper)
    lo, hi = _limits(model.class_stats, alpha, z)
    qlim = q_limit_from_thetas(model.resid_thetas, alpha, model.q_train)
    return SoftPlsdaModel(model, lo, hi, qlim, alpha, z)


def assign(model: SoftPlsdaModel, X) -> np.ndarray:
    codes = model.assign_codes(X)
    names = np.array(list(model.classes) + [NA], dtype=object)
    return names[codes]


def fit_softplsda(X, labels, n_lv: int, spec: PreprocessSpec = SNV_MC,
                  k_per_lv: int | None = None, alpha: float = 0.999,
                  classes=None, wavelengths=None) -> SoftPlsdaModel:
    classes = tuple(sorted(set(np.asarray(labels).astype(str)))) if classes is None else tuple(classes)
    Y = _one_hot(labels, classes)
    if k_per_lv is None:
        pls = fit_pls2(X, Y, n_lv, spec, classes, wavelengths)
    else:
        pls = fit_sparse_pls2(X, Y, n_lv, k_per_lv, spec, classes, wavelengths)
    return soft_limits(pls, alpha)


# ------------------------------------------------------------- grid search

@dataclass
class GridResult:
    cells: list     # dicts: spec, n_lv, k_per_lv, n_selected_cv (union over folds), stats, counts
    chosen: dict

    def write_csv(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        cols = ["preprocess", "n_lv", "k_per_lv", "n_selected_cv", "SENS", "SPEC", "EFF",
                "PREC", "F1", "TP", "FP", "TN", "FN", "NA_target", "NA_background", "chosen"]
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in self.cells:
                st = c["stats"]
                row = [c["preprocess"], c["n_lv"], c["k_per_lv"], c["n_selected_cv"]]
                row += ["" if st[s] is None else f"{100 * st[s]:.4f}"
                        for s in ("SENS", "SPEC", "EFF", "PREC", "F1")]
                row += [getattr(c["counts"], f) for f in
                        ("TP", "FP", "TN", "FN", "NA_target", "NA_background")]
                row.append(int(c is self.chosen))
                w.writerow(row)
        return p


def _cell_key(c):
    eff = c["stats"]["EFF"] or 0.0
    # round away float noise so exact ties fall through to the parsimony keys
    return (-round(eff, 12), c["n_lv"], c["k_per_lv"], c["spec_rank"])


def grid_search(train: SpectraTable, folds: FoldPlan,
                specs: Sequence[PreprocessSpec] = (SNV_MC,),
                lv_range: Sequence[int] = DEFAULT_LV_RANGE,
                k_grid: Sequence[int] | None = DEFAULT_K_GRID,
                alpha: float = 0.999, target_class: str = TARGET_CLASS,
                refit: bool = True):
    """Cross-validated grid over (preprocessing, LVs, variables per LV).

    Out-of-fold assignments are pooled per cell and scored by efficiency.
    The best cell (ties: fewer LVs, then fewer variables) is refitted on the
    whole training set. ``k_grid=None`` runs the dense Soft PLS-DA grid.
    Returns ``(GridResult, SoftPlsdaModel | None)``.
    """
    X = np.asarray(train.X, dtype=float)
    labels = np.asarray(train.y).astype(str)
    classes = tuple(sorted(set(labels)))
    if target_class not in classes:
        raise PlsError(f"target class {target_class!r} absent from training labels")
    ti = classes.index(target_class)
    Y = _one_hot(labels, classes)
    truth_target = labels == target_class
    m = X.shape[1]
    ks = [None] if k_grid is None else sorted({min(int(k), m) for k in k_grid})
    lvs = sorted({int(a) for a in lv_range})
    if not specs or not lvs or not ks:
        raise PlsError("empty grid")
    if len(folds.folds) != len(X):
        raise PlsError(f"fold plan covers {len(folds.folds)} rows, table has {len(X)}")
    max_lv = max(lvs)
    z = float(stats.norm.ppf(alpha))
    cells = []
    for si, spec in enumerate(specs):
        Xr = spec.transform_rows(X)
        for k in ks:
            k_eff = None if k is None or k >= m else k
            codes = {a: np.full(len(X), -2) for a in lvs}
            nsel = {a: set() for a in lvs}
            for f in range(folds.n_folds):
                tr, te = folds.split(f)
                means = Xr[tr].mean(axis=0) if spec.centers else np.zeros(m)
                Xtr, Xte = Xr[tr] - means, Xr[te] - means
                ym = Y[tr].mean(axis=0)
                path = _nipals(Xtr, Y[tr] - ym, max_lv, k_eff)
                R = _rotation(path.W, path.P)
                Tte = Xte @ R
                Etr, Ete = Xtr.copy(), Xte.copy()
                for a in range(1, max_lv + 1):
                    Etr -= np.outer(path.T[:, a - 1], path.P[:, a - 1])
                    Ete -= np.outer(Tte[:, a - 1], path.P[:, a - 1])
                    if a not in codes:
                        continue
                    C = path.C[:, :a]
                    yhat_tr = path.T[:, :a] @ C.T + ym
                    st = _class_stats(yhat_tr, Y[tr])
                    lo, hi = _limits(st, alpha, z)
                    q_tr = np.einsum("ij,ij->i", Etr, Etr)
                    qlim = q_limit_from_thetas(path.thetas[a - 1], alpha, q_tr)
                    yhat = Tte[:, :a] @ C.T + ym
                    q = np.einsum("ij,ij->i", Ete, Ete)
                    codes[a][te] = _assign_from(yhat, q, lo, hi, qlim)
                    for kk in path.keeps[:a]:
                        nsel[a].update(int(i) for i in kk)
            for a in lvs:
                cc = codes[a]
                counts = confusion_from_codes(cc == ti, cc == -1, truth_target)
                cells.append({
                    "preprocess": spec.label, "spec_rank": si, "spec": spec,
                    "n_lv": a, "k_per_lv": m if k is None else k,
                    "n_selected_cv": len(nsel[a]), "counts": counts,
                    "stats": derive_stats(counts)})
            log.debug("grid %s k=%s done", spec.label, k)
    chosen = min(cells, key=_cell_key)
    result = GridResult(cells, chosen)
    model = None
    if refit:
        k = chosen["k_per_lv"]
        model = fit_softplsda(X, labels, chosen["n_lv"], chosen["spec"],
                              None if k >= m else k, alpha, classes, train.wavelengths)
    return result, model


def selected_bands(model, wavelengths=None) -> BandSet:
    pls = model.pls if isinstance(model, SoftPlsdaModel) else model
    if not pls.sparsity:
        bs = BandSet.full(pls.n_bands)
    else:
        bs = BandSet(tuple(sorted({int(i) for kk in pls.sparsity for i in kk})))
    wl = wavelengths if wavelengths is not None else pls.wavelengths
    if wl is not None:
        bs = BandSet(bs.indices, tuple(bs.describe(wl)))
    return bs


def predict_image(model: SoftPlsdaModel, hc: Hypercube, exclusion: ClassMask | None = None,
                  target_class: str = TARGET_CLASS, model_id: str = "softplsda",
                  chunk: int = 65536) -> PredictionImage:
    """Assign every non-excluded pixel; excluded pixels stay EXCLUDED."""
    X = hc.spectra()
    out = np.full(X.shape[0], Label.EXCLUDED, dtype=np.uint8)
    sel = (np.ones(X.shape[0], bool) if exclusion is None
           else exclusion.labels.ravel() != Label.EXCLUDED)
    idx = np.flatnonzero(sel)
    ti = list(model.classes).index(target_class)
    for s in range(0, len(idx), chunk):
        part = idx[s:s + chunk]
        codes = model.assign_codes(X[part])
        out[part] = np.where(codes == -1, Label.NOT_ASSIGNED,
                             np.where(codes == ti, Label.TARGET, Label.BACKGROUND))
    return PredictionImage(out.reshape(hc.height, hc.width), hc.image_id, model_id)


# ------------------------------------------------------------------ files

def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def model_to_dict(model: SoftPlsdaModel) -> dict:
    p = model.pls
    return {
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "classes": list(p.classes),
        "wavelengths": _arr(p.wavelengths),
        "preprocess": p.preprocess.to_dict(),
        "n_lv": p.n_lv, "k_per_lv": p.k_per_lv,
        "W": _arr(p.W), "P": _arr(p.P), "C": _arr(p.C), "B": _arr(p.B),
        "y_mean": _arr(p.y_mean),
        "resid_thetas": list(p.resid_thetas),
        "q_train": _arr(p.q_train),
        "class_stats": {k: _arr(v) for k, v in p.class_stats.items()},
        "sparsity": [list(map(int, s)) for s in p.sparsity],
        "t_lower": _arr(model.t_lower), "t_upper": _arr(model.t_upper),
        "q_limit": model.q_limit_999, "alpha": model.alpha, "z_upper": model.z_upper,
    }


def model_from_dict(d: dict) -> SoftPlsdaModel:
    if d.get("format") != MODEL_FORMAT:
        raise PlsError(f"not a Soft PLS-DA model file (format={d.get('format')!r})")
    if d.get("version") != MODEL_VERSION:
        raise PlsError(f"unsupported model version {d.get('version')}")
    a = lambda key: None if d[key] is None else np.asarray(d[key], dtype=float)
    pls = PlsModel(
        PreprocessSpec.from_dict(d["preprocess"]), a("W"), a("P"), a("C"), a("B"),
        a("y_mean"), tuple(d["resid_thetas"]), a("q_train"), tuple(d["classes"]),
        {k: np.asarray(v, dtype=float) for k, v in d["class_stats"].items()},
        tuple(np.asarray(s, dtype=int) for s in d["sparsity"]), d["k_per_lv"],
        a("wavelengths"))
    return SoftPlsdaModel(pls, a("t_lower"), a("t_upper"), float(d["q_limit"]),
                          float(d["alpha"]), float(d["z_upper"]))


def save_model(model: SoftPlsdaModel, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(model_to_dict(model)))
    return p


def load_model(path) -> SoftPlsdaModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def write_regression_vector(model: SoftPlsdaModel, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    pls = model.pls
    wl = pls.wavelengths if pls.wavelengths is not None else np.arange(pls.n_bands)
    sel = set(selected_bands(model).indices)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band", "wavelength_nm"] + [f"b_{c}" for c in pls.classes] + ["selected"])
        for i in range(pls.n_bands):
            w.writerow([i, f"{wl[i]:g}"] + [repr(float(v)) for v in pls.B[i]]
                       + [int(i in sel)])
    return p
