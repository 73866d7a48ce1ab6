"""Independent brute-force oracles used by the test suite.

Everything here is deliberately naive -- nested loops and direct formula
transcriptions -- so it shares no code path with the package under test.
"""

import numpy as np


def conv2d_loop(x, k, stride, padding):
    """Quadruple-nested-loop cross-correlation."""
    n, c, h, w = x.shape
    ko, ki, kh, kw = k.shape
    assert ki == c
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ko, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for o in range(ko):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ch in range(c):
                        for a in range(kh):
                            for d in range(kw):
                                acc += xp[b, ch, i * stride + a, j * stride + d] * k[o, ch, a, d]
                    out[b, o, i, j] = acc
    return out


def max_pool_loop(x, window, stride):
    """Exhaustive window-max."""
    n, c, h, w = x.shape
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    out = np.zeros((n, c, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(h_out):
                for j in range(w_out):
                    best = -np.inf
                    for a in range(window):
                        for d in range(window):
                            v = x[b, ch, i * stride + a, j * stride + d]
                            if v > best:
                                best = v
                    out[b, ch, i, j] = best
    return out


def adaptive_avg_pool_loop(x, out_h, out_w):
    """Bin-by-bin average with floor-based half-open bins."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for a in range(out_h):
                h0, h1 = (a * h) // out_h, ((a + 1) * h) // out_h
                for d in range(out_w):
                    w0, w1 = (d * w) // out_w, ((d + 1) * w) // out_w
                    total = 0.0
                    for i in range(h0, h1):
                        for j in range(w0, w1):
                            total += x[b, ch, i, j]
                    out[b, ch, a, d] = total / ((h1 - h0) * (w1 - w0))
    return out


def fully_connected_loop(x, w, b):
    """Triple-loop affine map."""
    n, d = x.shape
    d2, m = w.shape
    assert d == d2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = b[j]
            for p in range(d):
                acc += x[i, p] * w[p, j]
            out[i, j] = acc
    return out


def softmax_ce_formula(logits, labels):
    """Direct formula: mean over rows of -log(exp(z_y)/sum exp(z))."""
    total = 0.0
    for row, y in zip(logits, labels):
        z = np.exp(row - row.max())
        total += -np.log(z[int(y)] / z.sum())
    return total / len(labels)


def adam_first_step(value, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Closed-form single Adam update, hand-evaluated."""
    m = (1 - beta1) * grad
    v = (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1)
    v_hat = v / (1 - beta2)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


def numerical_gradient(fn, arrays, index, eps=1e-4):
    """Central finite differences of scalar fn w.r.t. arrays[index].

    ``fn`` maps the list of float64 arrays to a python float; every entry
    of the chosen array is perturbed by +/- eps.
    """
    arrays = [a.copy() for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = target[ix]
        target[ix] = orig + eps
        hi = fn(arrays)
        target[ix] = orig - eps
        lo = fn(arrays)
        target[ix] = orig
        grad[ix] = (hi - lo) / (2 * eps)
        it.iternext()
    return grad


def relative_errors(analytic, numeric, floor=1e-3):
    """Elementwise |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def max_relative_error(analytic, numeric, floor=1e-3):
    """max |a-n| / max(|a|, |n|, floor) over all coordinates."""
    return float(np.max(relative_errors(analytic, numeric, floor)))


def otsu_exhaustive(values, bins=256):
    """Try every candidate boundary t/bins and recompute Eq-style
    between-class statistics from scratch; lowest boundary wins ties."""
    v = np.asarray(values, dtype=np.float64).ravel()
    levels = np.minimum((v * bins).astype(int), bins - 1) / bins
    best_t, best_sigma = 0, -1.0
    total = levels.size
    for t in range(bins):
        boundary = t / bins
        lo = levels[levels <= boundary]
        hi = levels[levels > boundary]
        if lo.size == 0 or hi.size == 0:
            sigma = 0.0
        else:
            w1 = lo.size / total
            w2 = hi.size / total
            sigma = w1 * w2 * (lo.mean() - hi.mean()) ** 2
        if sigma > best_sigma:
            best_sigma, best_t = sigma, t
    return best_t / bins


def auc_pair_counting(scores, labels, positive):
    """All-pairs Mann-Whitney AUC with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == positive]
    neg = [s for s, y in zip(scores, labels) if y != positive]
    assert pos and neg
    credit = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                credit += 1.0
            elif p == q:
                credit += 0.5
    return credit / (len(pos) * len(neg))
