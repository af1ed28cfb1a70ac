""" Central finite differences for tape objectives """
import numpy as np

from nfreg import autodiff as ad


def finite_difference(objective, params, h=1e-5):
    out = params.zeros_like()
    for k in params:
        flat = out[k].reshape(-1)
        for i in range(params[k].size):
            plus, minus = params.copy(), params.copy()
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            f_plus = float(objective({n: ad.constant(v) for n, v in plus.items()}).value)
            f_minus = float(objective({n: ad.constant(v) for n, v in minus.items()}).value)
            flat[i] = (f_plus - f_minus) / (2 * h)
    return out


def assert_matches_fd(objective, params, tol=1e-4, h=1e-5):
    analytic = ad.grad(objective, params)
    numeric = finite_difference(objective, params, h=h)
    for k in params:
        scale = max(1.0, np.abs(numeric[k]).max())
        assert np.abs(analytic[k] - numeric[k]).max() / scale < tol, k
