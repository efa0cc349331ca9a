"""Independent oracles shared by the test modules."""
import numpy as np
from scipy.integrate import trapezoid


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, kern, stride):
    n, c, h, w = x.shape
    o, _, kh, kw = kern.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += x[b, ch, i * stride + u, j * stride + v] * kern[f, ch, u, v]
                    out[b, f, i, j] = s
    return out


def two_pass_moments(rows):
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    mean = rows.sum(axis=0) / n
    var = ((rows - mean) ** 2).sum(axis=0) / n
    return mean, var


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-12):
    """Largest entrywise deviation relative to the tensor's gradient scale.

    Elementwise ratios are meaningless for entries near zero, where the
    finite-difference roundoff (~1e-10) is as large as the entry itself.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def kl_quadrature(mu_i, var_i, mu_j, var_j, points=200001):
    """KL(N_i || N_j) by trapezoid integration of p log(p/q) on a wide grid."""
    s = np.sqrt(max(var_i, var_j))
    lo = min(mu_i, mu_j) - 12 * s
    hi = max(mu_i, mu_j) + 12 * s
    x = np.linspace(lo, hi, points)
    log_p = -0.5 * np.log(2 * np.pi * var_i) - (x - mu_i) ** 2 / (2 * var_i)
    log_q = -0.5 * np.log(2 * np.pi * var_j) - (x - mu_j) ** 2 / (2 * var_j)
    return float(trapezoid(np.exp(log_p) * (log_p - log_q), x))


def layer_gradcheck(layer, x, training, rng, h=1e-5):
    """Max relative error of a layer's backward against central differences.

    Uses the scalar loss ``sum(forward(x) * R)`` for a fixed random ``R`` and
    checks the gradient with respect to the input and every parameter.
    """
    y, _ = layer.forward(x, training)
    proj = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(layer.forward(x, training)[0] * proj))

    _, cache = layer.forward(x, training)
    grad_x, grads = layer.backward(proj, cache)
    errors = [max_rel_error(grad_x, numeric_grad(loss, x, h))]
    for key, g in grads.items():
        errors.append(max_rel_error(g, numeric_grad(loss, layer.params[key], h)))
    return max(errors)


def loss_gradcheck(loss_fn, logits, labels, h=1e-5):
    _, cache = loss_fn.forward(logits, labels)
    analytic = loss_fn.backward(cache)
    numeric = numeric_grad(lambda: loss_fn.forward(logits, labels)[0], logits, h)
    return max_rel_error(analytic, numeric)
