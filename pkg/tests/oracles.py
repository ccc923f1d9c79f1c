"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def naive_overlap(a: np.ndarray, b: np.ndarray) -> int:
    n = 0
    for j in range(a.shape[0]):
        for i in range(a.shape[1]):
            if a[j, i] and b[j, i]:
                n += 1
    return n


def naive_centroid(a: np.ndarray) -> tuple[float, float]:
    sx = sy = 0.0
    n = 0
    for j in range(a.shape[0]):
        for i in range(a.shape[1]):
            if a[j, i]:
                sx += i + 0.5
                sy += j + 0.5
                n += 1
    return sx / n, sy / n


def naive_rules(mask: np.ndarray, path: np.ndarray, obj: np.ndarray, tau: float) -> str:
    """Pixel-enumeration decision rule: returns 'none', 'R1', 'R2' or 'R3'."""
    h, w = obj.shape
    for j in range(h):
        for i in range(w):
            if mask[j, i] and obj[j, i]:
                return "R1"
    pts = [(i + 0.5, j + 0.5) for j in range(h) for i in range(w) if path[j, i] and obj[j, i]]
    if not pts:
        return "R2"
    cx = sum(p[0] for p in pts) / len(pts)
    cy = sum(p[1] for p in pts) / len(pts)
    return "none" if math.hypot(cx - w / 2, cy - h / 2) <= tau else "R3"


def brute_distance(a: np.ndarray) -> np.ndarray:
    """Distance from each set pixel to the nearest unset pixel, the outside counting as unset."""
    h, w = a.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = a
    unset = np.argwhere(~padded)
    out = np.zeros((h, w))
    for j, i in np.argwhere(a):
        d = unset - (j + 1, i + 1)
        out[j, i] = math.sqrt(float((d * d).sum(axis=1).min()))
    return out


def supersampled_area(verts: np.ndarray, width: int, height: int, k: int = 4) -> float:
    """Polygon area inside the raster by k x k point sampling per pixel (even-odd test)."""
    step = 1.0 / k
    xs = (np.arange(width * k) + 0.5) * step
    ys = (np.arange(height * k) + 0.5) * step
    X, Y = np.meshgrid(xs, ys)
    inside = np.zeros_like(X, dtype=bool)
    n = len(verts)
    for a in range(n):
        x0, y0 = verts[a]
        x1, y1 = verts[(a + 1) % n]
        cond = (y0 > Y) != (y1 > Y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (Y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (X < xint)
    return inside.sum() * step * step


def naive_pool(a: np.ndarray, cells: int = 16) -> np.ndarray:
    h, w = a.shape
    bh, bw = h // cells, w // cells
    out = []
    for cj in range(cells):
        for ci in range(cells):
            n = 0
            for j in range(cj * bh, (cj + 1) * bh):
                for i in range(ci * bw, (ci + 1) * bw):
                    n += bool(a[j, i])
            out.append(n / (bh * bw))
    return np.array(out)


def eq1(fa, fp, fn, alpha) -> float:
    """max(|fa - fp|^2 - |fa - fn|^2 + alpha, 0), written out term by term."""
    dp = sum((x - y) ** 2 for x, y in zip(fa, fp))
    dn = sum((x - y) ** 2 for x, y in zip(fa, fn))
    return max(dp - dn + alpha, 0.0)


def convex_center_raster(verts, width: int, height: int) -> np.ndarray:
    """Pixel set iff its center is inside or on a CCW convex polygon (cross-product test)."""
    out = np.zeros((height, width), dtype=bool)
    n = len(verts)
    for j in range(height):
        for i in range(width):
            px, py = i + 0.5, j + 0.5
            inside = True
            for a in range(n):
                x0, y0 = verts[a]
                x1, y1 = verts[(a + 1) % n]
                if (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) < 0:
                    inside = False
                    break
            out[j, i] = inside
    return out
