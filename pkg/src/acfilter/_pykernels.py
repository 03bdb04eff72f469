"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same floating-point operation order; used when the
extension is unavailable or ``ACFILTER_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

from math import exp, log, sqrt

import numpy as np

P_FLOOR = 1e-12


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def _xent(p: float, label: float) -> float:
    q = p
    if q < P_FLOOR:
        q = P_FLOOR
    elif q > 1.0 - P_FLOOR:
        q = 1.0 - P_FLOOR
    out = 0.0
    if label > 0.0:
        out += label * (log(label) - log(q))
    if label < 1.0:
        out += (1.0 - label) * (log(1.0 - label) - log(1.0 - q))
    if out < 0.0:
        out = 0.0
    return out


def _entity(V, ptr, rows, w, i, D):
    out = [0.0] * D
    for j in range(int(ptr[i]), int(ptr[i + 1])):
        row = V[int(rows[j])].tolist()
        wj = float(w[j])
        for k in range(D):
            out[k] += wj * row[k]
    return out


def train_events(V, G, state, uptr, urows, uw, aptr, arows, aw, order, labels,
                 eta, eps, lam, update_vectors, out_pred):
    D = V.shape[1]
    loss = 0.0
    bias = float(state[0])
    bias_acc = float(state[1])
    for t in range(len(order)):
        i = int(order[t])
        u = _entity(V, uptr, urows, uw, i, D)
        a = _entity(V, aptr, arows, aw, i, D)
        dot = 0.0
        for k in range(D):
            dot += u[k] * a[k]
        p = _sigmoid(bias + dot)
        out_pred[t] = p
        label = float(labels[t])
        loss += _xent(p, label)
        g = p - label
        bias_acc += g * g
        bias -= eta * g / sqrt(bias_acc + eps)
        if not update_vectors:
            continue
        for ptr, rows, w, other in ((uptr, urows, uw, a), (aptr, arows, aw, u)):
            for j in range(int(ptr[i]), int(ptr[i + 1])):
                r = int(rows[j])
                gw = g * float(w[j])
                vrow = V[r].tolist()
                grow = G[r].tolist()
                for k in range(D):
                    gr = gw * other[k] + lam * vrow[k]
                    grow[k] += gr * gr
                    vrow[k] -= eta * gr / sqrt(grow[k] + eps)
                V[r] = vrow
                G[r] = grow
    state[0] = bias
    state[1] = bias_acc
    return loss


def predict_events(V, bias, uptr, urows, uw, aptr, arows, aw, out):
    D = V.shape[1]
    for i in range(out.shape[0]):
        u = _entity(V, uptr, urows, uw, i, D)
        a = _entity(V, aptr, arows, aw, i, D)
        dot = 0.0
        for k in range(D):
            dot += u[k] * a[k]
        out[i] = _sigmoid(bias + dot)


def event_gradient(V, bias, urows, uw, arows, aw, label, lam, grad_u, grad_a):
    D = V.shape[1]
    zero_u = np.array([0, len(urows)], dtype=np.int64)
    zero_a = np.array([0, len(arows)], dtype=np.int64)
    u = _entity(V, zero_u, urows, uw, 0, D)
    a = _entity(V, zero_a, arows, aw, 0, D)
    dot = 0.0
    for k in range(D):
        dot += u[k] * a[k]
    p = _sigmoid(bias + dot)
    g = p - label
    for rows, w, other, out in ((urows, uw, a, grad_u), (arows, aw, u, grad_a)):
        for j in range(len(rows)):
            gw = g * float(w[j])
            vrow = V[int(rows[j])].tolist()
            for k in range(D):
                out[j, k] = gw * other[k] + lam * vrow[k]
    return p, g


def xent_sum(p, labels):
    total = 0.0
    for i in range(len(p)):
        total += _xent(float(p[i]), float(labels[i]))
    return total
