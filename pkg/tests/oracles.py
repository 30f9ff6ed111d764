"""Reference implementations used as test oracles, plus fixtures they need.

The oracles are written from the definitions, favour clarity over speed
and share no code with the package.
"""
import itertools
import math
from collections import deque

import numpy as np

from hsipest.hypercube import Label
from hsipest.unet import build_unet


def greedy_oracle(points, k):
    """Kennard-Stone written directly from its definition, in plain Python."""
    pts = [tuple(map(float, p)) for p in points]
    n = len(pts)
    best = None
    for i in range(n):
        for j in range(i + 1, n):
            d = math.dist(pts[i], pts[j])
            if best is None or d > best[0]:
                best = (d, i, j)
    chosen = [best[1], best[2]][:k]
    while len(chosen) < k:
        cand = None
        for c in range(n):
            if c in chosen:
                continue
            d = min(math.dist(pts[c], pts[s]) for s in chosen)
            if cand is None or d > cand[0]:
                cand = (d, c)
        chosen.append(cand[1])
    return chosen


def maximin_oracle(points, k):
    """Exhaustive search over ordered k-tuples for the lexicographically
    largest (pair distance, successive min-distances) vector."""
    if k == 1:
        # a single pick is the first member of the most distant pair
        return maximin_oracle(points, 2)[:1]
    pts = [tuple(map(float, p)) for p in points]
    best_key, best = None, None
    for perm in itertools.permutations(range(len(pts)), k):
        if perm[0] > perm[1]:
            continue
        key = [math.dist(pts[perm[0]], pts[perm[1]])]
        for m in range(2, k):
            key.append(min(math.dist(pts[perm[m]], pts[s]) for s in perm[:m]))
        if best_key is None or key > best_key:
            best_key, best = key, list(perm)
    return best


def flood_fill_oracle(binary):
    """8-connected components by breadth-first search, as sets of (r, c)."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if not binary[r, c] or seen[r, c]:
                continue
            comp, queue = set(), deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                comp.add((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and binary[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
            comps.append(frozenset(comp))
    return comps


def best_matching_oracle(M, thr):
    """All one-to-one matchings over pairs above ``thr``; return the IoU
    vector (sorted descending) that is lexicographically largest."""
    n_p, n_t = M.shape
    best = []
    for k in range(1, min(n_p, n_t) + 1):
        for ps in itertools.combinations(range(n_p), k):
            for ts in itertools.permutations(range(n_t), k):
                vals = [M[p, t] for p, t in zip(ps, ts)]
                if min(vals) > thr:
                    v = sorted(vals, reverse=True)
                    if v > best:
                        best = v
    return best


def random_blobs(rng, shape=(32, 32), n=6):
    img = np.zeros(shape, np.uint8)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    for _ in range(n):
        cy, cx = rng.uniform(0, shape[0]), rng.uniform(0, shape[1])
        r = rng.uniform(1.0, 5.0)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = Label.TARGET
    noise = rng.random(shape) < 0.05
    img[noise] = Label.TARGET
    return img


def naive_conv(x, W, b):
    """Zero-padded cross-correlation, one output value at a time."""
    n, h, w, c = x.shape
    k = W.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    y = np.zeros((n, h, w, W.shape[3]))
    for i in range(n):
        for r in range(h):
            for s in range(w):
                patch = xp[i, r:r + k, s:s + k, :]
                for f in range(W.shape[3]):
                    y[i, r, s, f] = np.sum(patch * W[..., f]) + b[f]
    return y


def fd_check(f, x, analytic, n_probe=40, eps=1e-6, seed=0):
    """Central differences of scalar ``f`` at a random subset of ``x`` entries."""
    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    idx = rng.choice(flat.size, min(n_probe, flat.size), replace=False)
    num = np.empty(idx.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        num[j] = (fp - fm) / (2 * eps)
    ana = analytic.reshape(-1)[idx]
    err = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-8)
    return err.max()


def float64_model(spec, seed=0):
    m = build_unet(spec, seed)
    rng = np.random.default_rng(seed + 100)
    params = {k: v.astype(np.float64) + (rng.normal(0, 0.05, v.shape) if k.endswith(".b") else 0)
              for k, v in m.params.items()}
    return params
