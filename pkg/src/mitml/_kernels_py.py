"""NumPy versions of the compiled kernels, used when the extension is not built."""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw))


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w].copy()


def ranked_hits(relevant):
    relevant = np.asarray(relevant, dtype=bool)
    q, g = relevant.shape
    hits = np.cumsum(relevant, axis=1)
    precision = hits / np.arange(1, g + 1)
    n_rel = relevant.sum(axis=1)
    ap = np.where(n_rel > 0, (precision * relevant).sum(axis=1) / np.maximum(n_rel, 1), 0.0)
    first = np.where(n_rel > 0, relevant.argmax(axis=1), -1).astype(np.int64)
    return ap, first
