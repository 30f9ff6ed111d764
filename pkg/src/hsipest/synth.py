"""Deterministic synthetic hyperspectral scenes with exact ground truth.

Each scene is a dark sandpaper frame around a vegetal background with a
few elliptical "bugs". Pixel spectra are ``endmember * gain + offset +
noise``. Target absorption features sit inside the wider selected band
intervals so band selection has a known answer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .hypercube import STANDARD_WAVELENGTHS, ClassMask, Hypercube, Label

VEGETAL_BACKGROUNDS = ("bark", "grass", "dry_leaves", "green_leaves",
                       "yellow_leaves", "soil", "tree_branches")
GROUP_TAGS = ("G1", "G2", "G3", "G4", "G5")

# (center_nm, sigma_nm, depth) of the planted target features
TARGET_FEATURES = ((1000.0, 10.0, 0.04), (1340.0, 10.0, 0.04),
                   (1390.0, 10.0, 0.04), (1450.0, 10.0, 0.04))

# level, slope, curvature, features (center_nm, sigma_nm, depth) away from
# the target features; vegetal types share one smooth base so after SNV they
# differ only in their own features
BACKGROUND_LIBRARY = {
    "bark": (0.70, 0.16, -0.04, ((1120.0, 25.0, 0.04), (1560.0, 30.0, 0.05))),
    "grass": (0.68, 0.16, -0.04, ((1180.0, 20.0, 0.06), (1600.0, 25.0, 0.04))),
    "dry_leaves": (0.66, 0.16, -0.04, ((1100.0, 20.0, 0.03), (1520.0, 30.0, 0.06))),
    "green_leaves": (0.66, 0.16, -0.04, ((1170.0, 25.0, 0.05), (1620.0, 20.0, 0.05))),
    "yellow_leaves": (0.70, 0.16, -0.04, ((1140.0, 20.0, 0.04), (1540.0, 25.0, 0.04))),
    "soil": (0.72, 0.16, -0.04, ((1200.0, 15.0, 0.03), (1580.0, 30.0, 0.05))),
    "tree_branches": (0.68, 0.16, -0.04, ((1130.0, 30.0, 0.05), (1640.0, 15.0, 0.03))),
    "synthetic": (0.60, 0.16, 0.00, ()),
}
SANDPAPER_LEVEL = 0.05
REFLECTANCE_MAX = 1.2


def _features(wl: np.ndarray, feats) -> np.ndarray:
    out = np.zeros_like(wl, dtype=float)
    for c, s, d in feats:
        out += d * np.exp(-0.5 * ((wl - c) / s) ** 2)
    return out


def _base(wl, level, slope, curv):
    u = (wl - 1320.0) / 340.0
    return level + slope * u + curv * u ** 2


def background_endmember(kind: str, wavelengths=STANDARD_WAVELENGTHS) -> np.ndarray:
    wl = np.asarray(wavelengths, dtype=float)
    level, slope, curv, feats = BACKGROUND_LIBRARY[kind]
    return _base(wl, level, slope, curv) - _features(wl, feats)


def _touched(wl, features, rel_depth=0.01):
    hit = np.zeros(wl.size, dtype=bool)
    for c, s, _ in features:
        hit |= np.exp(-0.5 * ((wl - c) / s) ** 2) >= rel_depth
    return hit


def _rendered_features(wl, features) -> list[np.ndarray]:
    """Per-feature absorption profiles as written into the target.

    Each feature is truncated to the bands the features touch and one
    common constant is removed there, so the summed profile has zero mean
    and leaves untouched bands alone after SNV.
    """
    touched = _touched(wl, features)
    parts = [np.where(touched, _features(wl, [f]), 0.0) for f in features]
    if not parts or not touched.any():
        return parts
    shift = sum(p.sum() for p in parts) / touched.sum()
    windows = [_touched(wl, [f]) for f in features]
    owner = np.argmax(np.stack([np.where(w, _features(wl, [f]), -1.0)
                                for w, f in zip(windows, features)]), axis=0)
    return [np.where(touched & (owner == i), p - shift, p) for i, p in enumerate(parts)]


def target_endmember(wavelengths=STANDARD_WAVELENGTHS, features=TARGET_FEATURES) -> np.ndarray:
    """Average vegetal shape minus the planted absorption features.

    Built so that its SNV transform equals the mean SNV of the vegetal
    endmembers on every band the features do not touch, with the base
    rescaled on the touched bands to keep unit spread. After SNV the target
    then differs from the pooled background only inside the planted
    features.
    """
    wl = np.asarray(wavelengths, dtype=float)
    ends = np.stack([background_endmember(k, wl) for k in VEGETAL_BACKGROUNDS])
    mu = ends.mean(axis=1, keepdims=True)
    sd = ends.std(axis=1, ddof=1, keepdims=True)
    shape = ((ends - mu) / sd).mean(axis=0)
    scale = sd.mean()
    touched = _touched(wl, features)
    feat = sum(_rendered_features(wl, features), np.zeros(wl.size)) / scale
    g = np.where(touched, shape, 0.0)
    if touched.any():
        g[touched] -= g.sum() / touched.sum()
    # smallest b with var(shape - feat + b * g) == 1
    n1 = wl.size - 1
    var = lambda u, v: u @ v / n1
    base = shape - feat
    roots = np.roots([var(g, g), 2.0 * var(base, g), var(base, base) - 1.0])
    roots = roots[np.isreal(roots)].real
    b = roots[np.argmin(np.abs(roots))] if roots.size else 0.0
    return mu.mean() + scale * (base + b * g)


def planted_bands(wavelengths=STANDARD_WAVELENGTHS, features=TARGET_FEATURES,
                  rel_depth: float = 0.5) -> np.ndarray:
    """Bands where a rendered target feature reaches ``rel_depth`` of its peak."""
    wl = np.asarray(wavelengths, dtype=float)
    hit = np.zeros(wl.size, dtype=bool)
    for p in _rendered_features(wl, features):
        if p.max() > 0:
            hit |= p >= rel_depth * p.max()
    return np.flatnonzero(hit)


def spectator_bands(wavelengths=STANDARD_WAVELENGTHS, features=TARGET_FEATURES,
                    rel_depth: float = 0.01) -> np.ndarray:
    """Band indices no planted feature reaches with ``rel_depth`` of its peak.

    Shoulder bands between the planted cores and the spectators belong to
    neither set.
    """
    return np.flatnonzero(~_touched(np.asarray(wavelengths, dtype=float), features, rel_depth))


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    wavelengths: tuple = tuple(STANDARD_WAVELENGTHS)
    background: str = "synthetic"
    group: str | None = None
    image_id: str = "scene"
    target_features: tuple = TARGET_FEATURES
    n_blobs: int = 4
    semi_major: tuple = (7.0, 9.0)
    semi_minor: tuple = (4.5, 6.0)
    frame: int = 4
    gap: int = 3
    noise_sigma: float = 0.01
    gain_range: tuple = (0.9, 1.1)
    offset_range: tuple = (-0.02, 0.02)
    seed: int = 0


def ellipse_mask(shape, cy, cx, a, b, theta) -> np.ndarray:
    """Pixels whose centres fall inside the rotated ellipse."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place_blobs(spec: SceneSpec, rng) -> tuple[np.ndarray, list]:
    from scipy import ndimage

    shape = (spec.height, spec.width)
    inner = np.zeros(shape, dtype=bool)
    f = spec.frame
    inner[f:spec.height - f, f:spec.width - f] = True
    occupied = np.zeros(shape, dtype=bool)
    blobs = []
    for _ in range(spec.n_blobs):
        for _attempt in range(500):
            a = rng.uniform(*spec.semi_major)
            b = rng.uniform(*spec.semi_minor)
            th = rng.uniform(0, np.pi)
            cy = rng.uniform(f + a, spec.height - f - a)
            cx = rng.uniform(f + a, spec.width - f - a)
            m = ellipse_mask(shape, cy, cx, a, b, th)
            if not np.all(inner[m]) or m.sum() < 50:
                continue
            grown = ndimage.binary_dilation(m, iterations=spec.gap)
            if np.any(grown & occupied):
                continue
            occupied |= m
            blobs.append({"cy": cy, "cx": cx, "a": a, "b": b, "theta": th,
                          "area": int(m.sum())})
            break
        else:
            raise RuntimeError(f"could not place blob {len(blobs) + 1} in {spec.image_id}")
    return occupied, blobs


def generate_scene(spec: SceneSpec, return_blobs: bool = False):
    """Return ``(Hypercube, ClassMask)`` (plus blob geometry if requested).

    Spectra are clipped to [0, REFLECTANCE_MAX].
    """
    rng = np.random.default_rng(spec.seed)
    wl = np.asarray(spec.wavelengths, dtype=float)
    target, blobs = _place_blobs(spec, rng)
    labels = np.full((spec.height, spec.width), Label.BACKGROUND, dtype=np.uint8)
    f = spec.frame
    frame = np.ones_like(target)
    frame[f:spec.height - f, f:spec.width - f] = False
    labels[frame] = Label.EXCLUDED
    labels[target] = Label.TARGET

    bg = background_endmember(spec.background, wl)
    tg = target_endmember(wl, spec.target_features)
    dark = np.full(wl.size, SANDPAPER_LEVEL)
    ends = np.stack([bg, tg, dark])
    idx = np.select([labels == Label.TARGET, labels == Label.EXCLUDED], [1, 2], 0)
    n = spec.height * spec.width
    gain = rng.uniform(*spec.gain_range, size=n)
    offset = rng.uniform(*spec.offset_range, size=n)
    noise = rng.normal(0.0, spec.noise_sigma, size=(n, wl.size)) if spec.noise_sigma > 0 \
        else np.zeros((n, wl.size))
    spectra = ends[idx.ravel()] * gain[:, None] + offset[:, None] + noise
    # the dark frame sits near zero, where noise would push values negative
    spectra = np.clip(spectra, 0.0, REFLECTANCE_MAX)
    meta = {"image_id": spec.image_id, "background": spec.background}
    if spec.group:
        meta["group"] = spec.group
    hc = Hypercube(spectra.reshape(spec.height, spec.width, wl.size), wl, meta)
    mask = ClassMask(labels)
    return (hc, mask, blobs) if return_blobs else (hc, mask)


def corpus_specs(seed: int = 0, backgrounds=VEGETAL_BACKGROUNDS, groups=GROUP_TAGS,
                 **overrides) -> list[SceneSpec]:
    """One scene per (background, group) with child seeds spawned from ``seed``."""
    pairs = [(b, g) for g in groups for b in backgrounds]
    children = np.random.SeedSequence(seed).spawn(len(pairs))
    return [SceneSpec(background=b, group=g, image_id=f"{b}_{g}",
                      seed=int(ch.generate_state(1)[0]), **overrides)
            for (b, g), ch in zip(pairs, children)]


def generate_corpus(seed: int = 0, backgrounds=VEGETAL_BACKGROUNDS, groups=GROUP_TAGS,
                    **overrides) -> list[tuple[Hypercube, ClassMask]]:
    """Full corpus: every background crossed with every bug group."""
    return [generate_scene(s) for s in corpus_specs(seed, backgrounds, groups, **overrides)]
