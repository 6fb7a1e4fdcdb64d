"""Plain NumPy re-implementations used as independent oracles in tests."""

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_layer(xs, w_ih, w_hh, b):
    d = w_hh.shape[1]
    h, c = np.zeros(d), np.zeros(d)
    out = []
    for x in xs:
        z = w_ih @ x + w_hh @ h + b
        i, f, g, o = sigmoid(z[:d]), sigmoid(z[d : 2 * d]), np.tanh(z[2 * d : 3 * d]), sigmoid(z[3 * d :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def lstm2(seq, p):
    h1 = lstm_layer(seq, p["0.w_ih"], p["0.w_hh"], p["0.b"])
    return lstm_layer(h1, p["1.w_ih"], p["1.w_hh"], p["1.b"])


def se(u, w1, b1, w2, b2):
    return sigmoid(w2 @ np.maximum(w1 @ u + b1, 0.0) + b2)


def tmr(f1, f2, params):
    """params: dict of numpy arrays with full dotted names."""
    lstm = {k[len("tmr.lstm."):]: v for k, v in params.items() if k.startswith("tmr.lstm.")}
    h = lstm2(f1, lstm)
    a = []
    for t in range(f1.shape[0]):
        u = (params[f"tmr.fc.{t}.w"] @ h[t] + params[f"tmr.fc.{t}.b"] + f1[t]) / 2
        a.append(se(u, *(params[f"tmr.se.{t}.{k}"] for k in ("w1", "b1", "w2", "b2"))))
    a = np.array(a)
    return a, (a * f2 + f2).mean(axis=0)


def log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def ce(logits, target):
    return -log_softmax(np.asarray(logits, float))[target]


def triplet_enumeration(x, ids, margin):
    """Max hinge over every (positive, negative) pair per anchor, by brute force."""
    n = len(ids)
    total, anchors = 0.0, 0
    for a in range(n):
        best, has_pos = None, False
        for p in range(n):
            if p == a or ids[p] != ids[a]:
                continue
            has_pos = True
            for q in range(n):
                if ids[q] == ids[a]:
                    continue
                v = max(0.0, np.linalg.norm(x[a] - x[p]) - np.linalg.norm(x[a] - x[q]) + margin)
                best = v if best is None else max(best, v)
        if has_pos:
            total += best
            anchors += 1
    return total / anchors
