"""Object-level post-processing: connected components, size filter, IoU matching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .hypercube import ClassMask, HypercubeError, Label, read_pgm, save_mask


@dataclass(frozen=True, eq=False)
class PredictionImage:
    labels: np.ndarray
    image_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.uint8)
        if lab.ndim != 2:
            raise HypercubeError(f"prediction image must be 2-D, got {lab.shape}")
        lab = lab.copy()
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self):
        return self.labels.shape

    def save(self, path) -> Path:
        return save_mask(self.labels, path)

    @classmethod
    def load(cls, path, image_id="", model_id="") -> "PredictionImage":
        return cls(read_pgm(path), image_id, model_id)


def connected_components(img, label: Label = Label.TARGET,
                         connectivity: int = 8) -> list[np.ndarray]:
    """Maximal connected sets of ``label`` pixels as sorted flat-index arrays.

    Components are ordered by their smallest flat index.
    """
    labels = img.labels if hasattr(img, "labels") else np.asarray(img)
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    lab, n = ndimage.label(labels == label, structure=structure)
    if n == 0:
        return []
    flat = lab.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    comps = [order[bounds[i]:bounds[i + 1]] for i in range(n)]
    comps.sort(key=lambda c: int(c[0]))
    return comps


def size_filter(components, min_pixels: int = 50) -> list[np.ndarray]:
    """Drop components with fewer than ``min_pixels`` pixels."""
    return [c for c in components if len(c) >= min_pixels]


def iou(a, b) -> float:
    a = np.unique(np.asarray(a))
    b = np.unique(np.asarray(b))
    union = len(np.union1d(a, b))
    if union == 0:
        raise ValueError("IoU of two empty sets is undefined")
    return len(np.intersect1d(a, b, assume_unique=True)) / union


@dataclass
class ObjectMatchResult:
    image_id: str = ""
    matches: list = field(default_factory=list)        # (pred_idx, truth_idx, iou)
    unmatched_truth: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)
    pred_sizes: list = field(default_factory=list)
    truth_sizes: list = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_truth)

    def rows(self):
        for p, t, v in self.matches:
            yield (self.image_id, "TP", self.pred_sizes[p], self.truth_sizes[t], v)
        for p in self.unmatched_pred:
            yield (self.image_id, "FP", self.pred_sizes[p], "", "")
        for t in self.unmatched_truth:
            yield (self.image_id, "FN", "", self.truth_sizes[t], "")


def _iou_matrix(preds, truths) -> np.ndarray:
    M = np.zeros((len(preds), len(truths)))
    for i, p in enumerate(preds):
        for j, t in enumerate(truths):
            M[i, j] = iou(p, t)
    return M


def match_objects(preds, truths, iou_threshold: float = 0.25,
                  image_id: str = "") -> ObjectMatchResult:
    """Greedy one-to-one matching in descending IoU, keeping pairs with IoU > threshold.

    Equal IoUs are resolved by (prediction index, truth index).
    """
    M = _iou_matrix(preds, truths)
    cand = [(-M[i, j], i, j) for i in range(M.shape[0]) for j in range(M.shape[1])
            if M[i, j] > iou_threshold]
    cand.sort()
    used_p, used_t, matches = set(), set(), []
    for neg, i, j in cand:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        matches.append((i, j, -neg))
    return ObjectMatchResult(
        image_id, matches,
        [j for j in range(len(truths)) if j not in used_t],
        [i for i in range(len(preds)) if i not in used_p],
        [len(p) for p in preds], [len(t) for t in truths])


def evaluate_objects(pred: PredictionImage, truth: ClassMask, min_pixels: int = 50,
                     iou_threshold: float = 0.25, connectivity: int = 8) -> ObjectMatchResult:
    """Components of the prediction (size filtered) matched to truth components.

    Truth components are never size filtered.
    """
    p = size_filter(connected_components(pred, Label.TARGET, connectivity), min_pixels)
    t = connected_components(truth, Label.TARGET, connectivity)
    return match_objects(p, t, iou_threshold, pred.image_id)


def write_matches_csv(results, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "kind", "pred_size", "truth_size", "iou"])
        for r in results:
            for row in r.rows():
                w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return p
