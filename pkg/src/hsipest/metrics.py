"""Pixel- and object-level classification statistics and report assembly."""
from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .hypercube import ClassMask, Label

STAT_NAMES = ("SENS", "SPEC", "EFF", "PREC", "F1")


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    TN: int = 0
    FN: int = 0
    NA_target: int = 0
    NA_background: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v}")
            object.__setattr__(self, f.name, int(v))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(*(getattr(self, f.name) + getattr(other, f.name)
                                 for f in fields(self)))

    @property
    def n_target(self) -> int:
        return self.TP + self.FN + self.NA_target

    @property
    def n_background(self) -> int:
        return self.TN + self.FP + self.NA_background


def _ratio(num, den):
    return num / den if den > 0 else None


def derive_stats(c: ConfusionCounts, object_level: bool = False) -> dict:
    """SENS, SPEC, EFF, PREC, F1 as fractions; undefined statistics are None.

    Not-assigned samples count in the SENS and SPEC denominators. SPEC and
    EFF are omitted at object level.
    """
    sens = _ratio(c.TP, c.TP + c.FN + c.NA_target)
    prec = _ratio(c.TP, c.TP + c.FP)
    out = {"SENS": sens}
    if not object_level:
        spec = _ratio(c.TN, c.TN + c.FP + c.NA_background)
        out["SPEC"] = spec
        out["EFF"] = None if sens is None or spec is None else math.sqrt(sens * spec)
    out["PREC"] = prec
    if sens is None or prec is None:
        out["F1"] = None
    elif sens == 0 or prec == 0:
        out["F1"] = 0.0
    else:
        out["F1"] = 2.0 / (1.0 / sens + 1.0 / prec)
    return out


def stats_from_rates(sens=None, spec=None, prec=None) -> dict:
    """EFF and F1 from already-computed rates (fractions)."""
    out = {}
    if sens is not None and spec is not None:
        out["EFF"] = math.sqrt(sens * spec)
    if sens is not None and prec is not None:
        out["F1"] = 0.0 if sens == 0 or prec == 0 else 2.0 / (1.0 / sens + 1.0 / prec)
    return out


def confusion_from_codes(pred_target, pred_na, truth_target) -> ConfusionCounts:
    """Counts from boolean vectors: predicted target, predicted NA, truly target."""
    pt = np.asarray(pred_target, bool)
    na = np.asarray(pred_na, bool)
    tt = np.asarray(truth_target, bool)
    pb = ~pt & ~na
    return ConfusionCounts(
        TP=int(np.sum(pt & tt)), FP=int(np.sum(pt & ~tt)),
        TN=int(np.sum(pb & ~tt)), FN=int(np.sum(pb & tt)),
        NA_target=int(np.sum(na & tt)), NA_background=int(np.sum(na & ~tt)))


def pixel_confusion(pred, truth: ClassMask) -> ConfusionCounts:
    """Pixel counts; truth-EXCLUDED pixels are skipped."""
    p = pred.labels
    t = truth.labels
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    valid = (t == Label.TARGET) | (t == Label.BACKGROUND)
    p, t = p[valid], t[valid]
    return confusion_from_codes(p == Label.TARGET, p == Label.NOT_ASSIGNED, t == Label.TARGET)


def object_confusion(m) -> ConfusionCounts:
    return ConfusionCounts(TP=m.tp, FP=m.fp, FN=m.fn)


def pct(v) -> str:
    return "" if v is None else f"{100.0 * v:.1f}"


@dataclass
class ReportRow:
    key: tuple
    level: str
    counts: ConfusionCounts

    @property
    def stats(self) -> dict:
        return derive_stats(self.counts, object_level=self.level == "object")

    def na_pct(self) -> dict:
        c = self.counts
        return {"NA_target_pct": pct(_ratio(c.NA_target, c.n_target)),
                "NA_background_pct": pct(_ratio(c.NA_background, c.n_background))}


@dataclass
class DetectionReport:
    key_names: tuple
    rows: list

    def to_records(self) -> list[dict]:
        recs = []
        for r in self.rows:
            rec = OrderedDict(zip(self.key_names, r.key))
            rec["level"] = r.level
            rec.update(asdict(r.counts))
            st = r.stats
            for s in STAT_NAMES:
                rec[s] = pct(st.get(s))
            rec.update(r.na_pct())
            recs.append(rec)
        return recs

    def to_csv(self) -> str:
        recs = self.to_records()
        buf = io.StringIO()
        if recs:
            w = csv.DictWriter(buf, fieldnames=list(recs[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(recs)
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_csv())
        return p

    def to_text(self) -> str:
        recs = self.to_records()
        if not recs:
            return "(empty report)\n"
        cols = list(self.key_names) + ["level"] + list(STAT_NAMES)
        width = {c: max(len(c), *(len(str(r[c])) for r in recs)) for c in cols}
        lines = ["  ".join(c.ljust(width[c]) for c in cols)]
        lines.append("  ".join("-" * width[c] for c in cols))
        for r in recs:
            lines.append("  ".join(str(r[c]).ljust(width[c]) for c in cols))
        return "\n".join(lines) + "\n"


def report(results, keys=("model", "bands", "background"), level: str = "pixel",
           overall: bool = True) -> DetectionReport:
    """Aggregate per-image counts by ``keys`` (micro-averaging).

    ``results`` holds dicts with the grouping keys and a ``counts`` entry.
    With ``overall`` an extra row per (model, bands) pools every background
    under the label ``ALL``.
    """
    keys = tuple(keys)
    groups: "OrderedDict[tuple, ConfusionCounts]" = OrderedDict()
    for r in results:
        k = tuple(str(r[name]) for name in keys)
        groups[k] = groups.get(k, ConfusionCounts()) + r["counts"]
    if overall and "background" in keys:
        bi = keys.index("background")
        for k in list(groups):
            ok = k[:bi] + ("ALL",) + k[bi + 1:]
            groups[ok] = groups.get(ok, ConfusionCounts()) + groups[k]
    rows = [ReportRow(k, level, groups[k]) for k in sorted(groups)]
    return DetectionReport(keys, rows)
