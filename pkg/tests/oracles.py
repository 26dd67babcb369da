"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports from the package under test except plain containers, so
a bug in a vectorized kernel cannot hide in its own oracle.
"""
import math

import numpy as np


def conv3d_loop(x, w, b, pad):
    """Cross-correlation with zero padding ``pad`` per axis, stride 1."""
    n, c, d, h, wd = x.shape
    k, _, kd, kh, kw = w.shape
    pd, ph, pw = pad
    xp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd] = x
    do, ho, wo = d + 2 * pd - kd + 1, h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    out = np.zeros((n, k, do, ho, wo))
    for i in range(n):
        for o in range(k):
            for z in range(do):
                for y in range(ho):
                    for q in range(wo):
                        acc = 0.0 if b is None else float(b[o])
                        for ch in range(c):
                            for a in range(kd):
                                for e in range(kh):
                                    for f in range(kw):
                                        acc += w[o, ch, a, e, f] * xp[i, ch, z + a, y + e, q + f]
                        out[i, o, z, y, q] = acc
    return out


def conv2d_loop(x, w, b, pad):
    return conv3d_loop(x[:, :, None], w[:, :, None], b, (0,) + tuple(pad))[:, :, 0]


def maxpool_loop(x, window):
    """Non-overlapping max pool over the trailing ``len(window)`` axes; returns (out, first-argmax mask)."""
    lead = x.shape[:-len(window)]
    sizes = x.shape[-len(window):]
    outs = tuple(s // k for s, k in zip(sizes, window))
    out = np.zeros(lead + outs)
    mask = np.zeros(x.shape)
    for li in np.ndindex(*lead):
        for oi in np.ndindex(*outs):
            best, best_at = None, None
            for wi in np.ndindex(*window):
                at = tuple(o * k + e for o, k, e in zip(oi, window, wi))
                v = x[li + at]
                if best is None or v > best:
                    best, best_at = v, at
            out[li + oi] = best
            mask[li + best_at] = 1
    return out, mask


def auroc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def bce_scalar(p, y, eps=1e-7):
    p = min(max(p, eps), 1 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def te_entry(tau, col, dim=256, base=10.0):
    j = col // 2
    angle = tau / base ** (2 * j / dim)
    return math.sin(angle) if col % 2 == 0 else math.cos(angle)


def adam_scalar(theta, grads, lr, b1, b2, eps, decay):
    """Scalar trace of Adam with the decay folded into the gradient."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        g = g + decay * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def label_rule_scalar(dyn, stat, tau, last_days=3, static_weight=0.5, threshold=1.0):
    """Default synthetic labelling rule evaluated pixel by pixel in plain Python."""
    t, h, w = dyn.shape[1:]
    ch, cw = h // 2, w // 2
    recent = sum(float(dyn[0, t - 1 - i, ch, cw]) for i in range(last_days)) / last_days
    score = recent + static_weight * float(stat[0, ch, cw]) + math.sin(2 * math.pi * tau / 366)
    return 1 if score > threshold else 0


def nearest_index(i, src, dst):
    return math.floor((i + 0.5) * src / dst)
