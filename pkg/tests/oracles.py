"""Independent scalar reference implementations used as test oracles.

Deliberately loop-based and free of the package's vectorized code paths.
"""

import math

import numpy as np


def focal_center_loss(p, y, m, gamma=2.0, beta=4.0):
    total, k = 0.0, 0
    for pij, yij, mij in zip(np.ravel(p), np.ravel(y), np.ravel(m)):
        if yij == 1:
            k += 1
            total += (1 - pij) ** gamma * -math.log(pij)
        else:
            total += pij**gamma * (1 - mij) ** beta * -math.log(1 - pij)
    return total / max(1, k)


def l1_scale_loss(pred, target, mask):
    k = int(np.sum(mask))
    s = sum(abs(a - b) for a, b, on in zip(np.ravel(pred), np.ravel(target), np.ravel(mask)) if on)
    return s / max(1, k)


def smooth_l1_scalar(x):
    return 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5


def offset_loss(pred, target, mask):
    k = int(np.sum(mask))
    s = 0.0
    for c in range(2):
        for a, b, on in zip(np.ravel(pred[c]), np.ravel(target[c]), np.ravel(mask)):
            if on:
                s += smooth_l1_scalar(a - b)
    return s / 2.0 / max(1, k)


def bce(p, y):
    return sum(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)) / len(p)


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar f at array x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def brute_force_nms(boxes, scores, thr):
    """O(n^2) greedy NMS with an explicit suppressed-flag array."""
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], boxes[i][1], boxes[i][0]))
    suppressed = [False] * n
    keep = []
    for a in range(n):
        i = order[a]
        if suppressed[i]:
            continue
        keep.append(i)
        for b in range(a + 1, n):
            j = order[b]
            if not suppressed[j] and box_iou(boxes[i], boxes[j]) >= thr:
                suppressed[j] = True
    return keep


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def box_ioa(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / ((a[2] - a[0]) * (a[3] - a[1]))


def reference_match(dets, gts, ignores, thr=0.5):
    """Exhaustive per-detection scan: returns (labels, matched flags)."""
    used = [False] * len(gts)
    labels = []
    for d in dets:
        cands = [(box_iou(d, g), gi) for gi, g in enumerate(gts) if not used[gi]]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            best = max(cands, key=lambda c: (c[0], -c[1]))
            used[best[1]] = True
            labels.append("TP")
        elif any(box_ioa(d, g) >= thr for g in ignores):
            labels.append("ignored")
        else:
            labels.append("FP")
    return labels, used


def reference_mr2(images, n_gt):
    """Brute-force threshold sweep.

    ``images`` is a list of (scores, labels) pairs. For every candidate
    threshold (each distinct score, plus +inf) recount TP/FP from scratch.
    """
    all_scores = sorted({s for scores, _ in images for s in scores}, reverse=True)
    n_img = len(images)
    points = [(0.0, 1.0)]
    for t in all_scores:
        tp = sum(1 for scores, labels in images for s, l in zip(scores, labels) if s >= t and l == "TP")
        fp = sum(1 for scores, labels in images for s, l in zip(scores, labels) if s >= t and l == "FP")
        points.append((fp / n_img, 1.0 - tp / n_gt))
    refs = [10 ** (-2 + 0.25 * i) for i in range(9)]
    sampled = []
    for r in refs:
        ok = [m for f, m in points if f <= r]
        sampled.append(min(ok))
    if min(sampled) == 0:
        return 0.0
    return math.exp(sum(math.log(m) for m in sampled) / 9)
