"""Independent oracles shared by the test modules."""

import math

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def central_difference_many(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradients of a vector-valued ``f``, shape ``(k, *x.shape)``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    rows = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig - step
        lo = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig
        rows.append((hi - lo) / (2 * step))
    return np.stack(rows, axis=1).reshape(-1, *x.shape)


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).

    The floor keeps components that are zero up to rounding from dividing
    finite-difference noise by ~0.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def naive_conv2d(x, k, stride, pad):
    c_in, H, W = x.shape
    c_out, _, kh, kw = k.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, Ho, Wo))
    for o in range(c_out):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            y = i * stride + a - pad
                            z = j * stride + b - pad
                            if 0 <= y < H and 0 <= z < W:
                                s += x[c, y, z] * k[o, c, a, b]
                out[o, i, j] = s
    return out


def naive_conv1x1(x, w):
    d, H, W = x.shape
    c = w.shape[1]
    out = np.zeros((c, H, W))
    for i in range(H):
        for j in range(W):
            for l in range(c):
                out[l, i, j] = sum(w[k, l] * x[k, i, j] for k in range(d))
    return out


def naive_softmax(v):
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return [t / s for t in e]


def loop_normalize(x):
    """Frobenius normalisation with a sequential row-major sum of squares."""
    s = 0.0
    for v in np.asarray(x).ravel():
        s += float(v) * float(v)
    r = math.sqrt(s)
    return np.asarray(x, dtype=np.float64) / r


def loop_matching_distance(x, p):
    """Sum over locations of x of the smallest squared distance to any
    location of p, both maps Frobenius-normalised first; plain loops."""
    nx, npr = loop_normalize(x), loop_normalize(p)
    d, w, h = nx.shape
    total = 0.0
    for i in range(w):
        for j in range(h):
            best = math.inf
            for a in range(w):
                for b in range(h):
                    s = 0.0
                    for k in range(d):
                        diff = nx[k, i, j] - npr[k, a, b]
                        s += diff * diff
                    best = min(best, s)
            total += best
    return total


def loop_local_distance(x, p):
    nx, npr = loop_normalize(x), loop_normalize(p)
    s = 0.0
    for a, b in zip(nx.ravel(), npr.ravel()):
        s += (a - b) * (a - b)
    return s


def mean_and_halfwidth(values):
    """Sample statistics computed with plain Python arithmetic."""
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, 1.96 * math.sqrt(var) / math.sqrt(n)


def relative_errors(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def straddles_kink(f, x: np.ndarray, index, step: float, tol: float = 1e-4) -> bool:
    """Whether the central difference at ``step`` is an invalid oracle at ``index``.

    On a smooth piece the ``step`` and ``step / 10`` estimates agree to
    O(step^2); a ReLU or min switching inside the interval breaks that.
    """
    x = np.array(x, dtype=np.float64)
    estimates = []
    for h in (step, step / 10):
        orig = x[index]
        x[index] = orig + h
        hi = f(x)
        x[index] = orig - h
        lo = f(x)
        x[index] = orig
        estimates.append((hi - lo) / (2 * h))
    return relative_errors(estimates[0], estimates[1]).item() > tol
