"""Independent reference computations used by the tests."""
import math

import numpy as np


def central_differences(fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d params by central differences; ``fn`` reads ``params`` in place."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        old = params.flat[i]
        params.flat[i] = old + h
        up = fn()
        params.flat[i] = old - h
        down = fn()
        params.flat[i] = old
        grad.flat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def bit_loop_displacement(n, action, m):
    x = y = 0.0
    for k in range(n):
        if (action >> k) & 1:
            x += m * math.cos(2 * math.pi * k / n)
            y += m * math.sin(2 * math.pi * k / n)
    return x, y


def nearest_scan(rows, q):
    best, best_d = None, None
    for i, r in enumerate(rows):
        d = sum((float(r[j]) - float(q[j])) ** 2 for j in range(len(q)))
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def average_ranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    rx, ry = average_ranks(list(x)), average_ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


def mean_and_sample_std(values):
    n = len(values)
    mu = math.fsum(values) / n
    var = math.fsum((v - mu) ** 2 for v in values) / (n - 1) if n > 1 else 0.0
    return mu, math.sqrt(var)


def _orient(p, q, r):
    v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    return int(v > 0) - int(v < 0)


def _on_segment(p, q, r):
    return min(p[0], r[0]) <= q[0] <= max(p[0], r[0]) and min(p[1], r[1]) <= q[1] <= max(p[1], r[1])


def segments_intersect(p1, p2, q1, q2):
    """Closed-segment intersection by orientation tests."""
    o1, o2 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    o3, o4 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and _on_segment(p1, q1, p2))
        or (o2 == 0 and _on_segment(p1, q2, p2))
        or (o3 == 0 and _on_segment(q1, p1, q2))
        or (o4 == 0 and _on_segment(q1, p2, q2))
    )


def exhaustive_argmin(rows, queries, chunk=256):
    """Nearest row per query from the full distance matrix; first index on ties."""
    rows = np.asarray(rows, dtype=float)
    out = []
    for start in range(0, len(queries), chunk):
        q = np.asarray(queries[start : start + chunk], dtype=float)
        d = ((q[:, None, :] - rows[None, :, :]) ** 2).sum(axis=2)
        out.extend(int(i) for i in d.argmin(axis=1))
    return out
