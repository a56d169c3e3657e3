"""Pure numpy implementations of the hot kernels.

These define the reference semantics; the compiled module ``_kernels`` must
agree with them to float32 round-off.
"""

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))


def scatter_add_rows(out, ids, rows):
    """out[ids[i]] += rows[i], accumulating duplicate ids."""
    np.add.at(out, ids, rows)


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def gelu_backward(g, x, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd.reshape(-1)


def layer_norm_backward(g, xhat, rstd, gain):
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    dxhat = g * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def softmax_xent(logits, targets, valid):
    """Return (summed loss over valid rows, d(sum loss)/d logits).

    Row-wise max subtraction keeps exp() in range; invalid rows get zero gradient.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    per_row = np.log(s[:, 0]) - z[rows, targets]
    loss = float(per_row[valid].sum(dtype=np.float64))
    grad = e / s
    grad[rows, targets] -= 1.0
    grad[~valid] = 0.0
    return loss, grad


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_rows_backward(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))
