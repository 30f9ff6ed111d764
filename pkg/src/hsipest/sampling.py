"""Representative-spectrum selection, dataset assembly and CV fold plans."""
from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hypercube import ClassMask, Hypercube, Label
from .pca import fit_pca, hotelling_t2, q_residuals, scores
from .preprocess import MC_ONLY

TARGET_CLASS = "BMSB"
BACKGROUND_CLASS = "BACKGROUND"
GROUPS = ("G1", "G2", "G3", "G4", "G5")
TRAIN_GROUPS = ("G1", "G2", "G3")
TEST_GROUPS = ("G4", "G5")


class SamplingError(ValueError):
    pass


def kennard_stone(points, k: int) -> np.ndarray:
    """Kennard-Stone maximin selection; returns indices in pick order.

    Starts from the farthest pair, then repeatedly adds the point whose
    distance to the nearest selected point is largest. Ties go to the
    lowest index.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 2:
        raise SamplingError("Kennard-Stone needs at least two points")
    if k > n or k < 1:
        raise SamplingError(f"cannot select {k} of {n} points")
    sq = np.einsum("ij,ij->i", X, X)
    best, pair = -1.0, (0, 1)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        rows = np.arange(start, stop)
        d[np.tril(np.ones_like(d, dtype=bool), k=start)] = -np.inf
        flat = int(np.argmax(d))
        if d.flat[flat] > best:
            best = d.flat[flat]
            pair = (int(rows[flat // n]), int(flat % n))
    if k == 1:
        return np.array([pair[0]])
    selected = [pair[0], pair[1]]
    mind = np.minimum(((X - X[pair[0]]) ** 2).sum(axis=1),
                      ((X - X[pair[1]]) ** 2).sum(axis=1))
    mind[selected] = -np.inf
    while len(selected) < k:
        j = int(np.argmax(mind))
        selected.append(j)
        mind = np.minimum(mind, ((X - X[j]) ** 2).sum(axis=1))
        mind[selected] = -np.inf
    return np.array(selected)


@dataclass(frozen=True, eq=False)
class SpectraTable:
    X: np.ndarray
    y: np.ndarray            # class name per row
    image_id: np.ndarray
    px: np.ndarray
    py: np.ndarray
    background: np.ndarray
    group: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self):
        n = len(self.X)
        for name in ("y", "image_id", "px", "py", "background", "group"):
            if len(getattr(self, name)) != n:
                raise SamplingError(f"field {name} has {len(getattr(self, name))} rows, X has {n}")
        if np.asarray(self.X).ndim != 2 or np.asarray(self.X).shape[1] != len(self.wavelengths):
            raise SamplingError("X columns must match the wavelength axis")

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "SpectraTable":
        idx = np.asarray(idx)
        return SpectraTable(self.X[idx], self.y[idx], self.image_id[idx], self.px[idx],
                            self.py[idx], self.background[idx], self.group[idx],
                            self.wavelengths)

    @classmethod
    def concat(cls, tables) -> "SpectraTable":
        tables = list(tables)
        if not tables:
            raise SamplingError("nothing to concatenate")
        f = lambda name: np.concatenate([getattr(t, name) for t in tables])
        return cls(f("X"), f("y"), f("image_id"), f("px"), f("py"), f("background"),
                   f("group"), tables[0].wavelengths)

    def equals(self, other: "SpectraTable") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in
                   ("X", "y", "image_id", "px", "py", "background", "group", "wavelengths"))


def select_representative(hc: Hypercube, mask: ClassMask, class_label: Label,
                          n: int = 200, n_pc: int = 3, alpha: float = 0.999,
                          class_name: str | None = None) -> SpectraTable:
    """Pick ``n`` representative raw spectra of one mask class from one image.

    PCA (mean centred) on the class pixels, T2/Q screening at ``alpha``,
    PCA refit on the kept pixels, Kennard-Stone in score space.
    """
    ys, xs = np.nonzero(mask.labels == class_label)
    X = hc.data[ys, xs].astype(float)
    name = class_name or (TARGET_CLASS if class_label == Label.TARGET else BACKGROUND_CLASS)
    if len(X) < 2:
        raise SamplingError(f"image {hc.image_id!r}: {len(X)} pixels of class {name}")
    k_pc = min(n_pc, len(X) - 1, X.shape[1])
    kept = np.arange(len(X))
    first = fit_pca(X, k_pc, MC_ONLY, alpha)
    inside = ((hotelling_t2(first, X) <= first.t2_limit_999)
              & (q_residuals(first, X) <= first.q_limit_999))
    kept = kept[inside]
    if len(kept) <= n:
        if len(kept) < n:
            warnings.warn(f"image {hc.image_id!r}: only {len(kept)} {name} spectra "
                          f"after screening, selecting all", stacklevel=2)
        order = kept
    else:
        k_pc = min(n_pc, len(kept) - 1, X.shape[1])
        second = fit_pca(X[kept], k_pc, MC_ONLY, alpha)
        order = kept[kennard_stone(scores(second, X[kept]), n)]
    m = len(order)
    meta = hc.meta
    return SpectraTable(
        X[order], np.full(m, name, dtype=object),
        np.full(m, hc.image_id, dtype=object), xs[order], ys[order],
        np.full(m, meta.get("background", ""), dtype=object),
        np.full(m, meta.get("group", ""), dtype=object), hc.wavelengths.copy())


def assemble_table(images, n: int = 200, n_pc: int = 3, alpha: float = 0.999) -> SpectraTable:
    """Representative spectra of both classes for every (cube, mask) pair.

    Rows are ordered by (image id, class name, Kennard-Stone rank).
    """
    parts = []
    for hc, mask in sorted(images, key=lambda p: p[0].image_id):
        per_class = [(BACKGROUND_CLASS, Label.BACKGROUND), (TARGET_CLASS, Label.TARGET)]
        for name, lab in sorted(per_class):
            parts.append(select_representative(hc, mask, lab, n, n_pc, alpha, name))
    return SpectraTable.concat(parts)


def split_by_group(table: SpectraTable, train_groups=TRAIN_GROUPS,
                   test_groups=TEST_GROUPS) -> tuple[SpectraTable, SpectraTable]:
    """Partition rows by bug group.

    With an empty ``test_groups`` every row goes to training.
    """
    train_groups, test_groups = set(train_groups), set(test_groups)
    for g in train_groups | test_groups:
        if g not in GROUPS:
            raise SamplingError(f"unknown group tag {g!r}")
    if train_groups & test_groups:
        raise SamplingError(f"groups in both partitions: {sorted(train_groups & test_groups)}")
    groups = table.group.astype(str)
    if not test_groups:
        return table, table.subset(np.array([], dtype=int))
    test = np.isin(groups, sorted(test_groups))
    train = np.isin(groups, sorted(train_groups))
    return table.subset(np.flatnonzero(train)), table.subset(np.flatnonzero(test))


@dataclass(frozen=True, eq=False)
class FoldPlan:
    folds: np.ndarray
    n_folds: int

    def split(self, f: int) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.folds != f), np.flatnonzero(self.folds == f)


def venetian_blinds(n_rows: int, n_groups: int = 3) -> FoldPlan:
    if n_groups < 2 or n_rows < n_groups:
        raise SamplingError(f"cannot split {n_rows} rows into {n_groups} groups")
    return FoldPlan(np.arange(n_rows) % n_groups, n_groups)


# ---------------------------------------------------------------------- CSV

_META_COLS = ["image_id", "x", "y", "class", "group", "background"]


def _wl_name(w: float) -> str:
    return f"{w:g}"


def write_table_csv(table: SpectraTable, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_META_COLS + [_wl_name(v) for v in table.wavelengths])
        for i in range(len(table)):
            w.writerow([table.image_id[i], int(table.px[i]), int(table.py[i]), table.y[i],
                        table.group[i], table.background[i]]
                       + [repr(float(v)) for v in table.X[i]])
    return p


def read_table_csv(path) -> SpectraTable:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:len(_META_COLS)] != _META_COLS:
        raise SamplingError(f"{path}: header must start with {','.join(_META_COLS)}")
    header, body = rows[0], rows[1:]
    wl = np.array([float(re.sub(r"[^0-9.eE+-]", "", h)) for h in header[len(_META_COLS):]])
    k = len(_META_COLS)
    col = lambda j, typ=object: np.array([r[j] for r in body], dtype=typ)
    X = np.array([[float(v) for v in r[k:]] for r in body]).reshape(len(body), len(wl))
    return SpectraTable(X, col(3), col(0), col(1, int), col(2, int), col(5), col(4), wl)
