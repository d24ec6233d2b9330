"""Shared test oracles: central finite differences and the primitive-op
case table used by both the unit tests and the acceptance gradient suite."""

import numpy as np

from mixmask import autodiff as ad
from mixmask.autodiff import Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def finite_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = x.copy()
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradient(build, x: np.ndarray, rtol: float = FD_RTOL) -> float:
    """Assert the analytic gradient of `build` (array -> scalar Tensor)
    matches central finite differences; returns the relative error."""
    t = Tensor(x, requires_grad=True)
    out = build(t)
    ad.backward(out)
    analytic = t.grad.copy()

    def f(arr):
        return float(build(Tensor(arr)).data)

    numeric = finite_diff(f, x)
    err = rel_err(analytic, numeric)
    assert err < rtol, f"gradient mismatch: rel err {err:.3e}"
    return err


def _away_from_kinks(x, margin=0.01, shift=0.05):
    x = x.copy()
    x[np.abs(x) < margin] += shift
    return x


def _probe(rng, shape):
    """Fixed random weighting so the checked scalar depends on every entry."""
    return Tensor(rng.standard_normal(shape))


def primitive_gradient_cases(rng: np.random.Generator):
    """One (name, build, input) gradient-check case per primitive.

    Every random constant is drawn once up front; `build` must be a pure
    function of its input for the finite-difference oracle to be valid.
    """
    cases = []

    w = _probe(rng, (4, 2))
    p = _probe(rng, (3, 2))
    cases.append(("matmul", lambda t: ad.tsum(ad.mul(ad.matmul(t, w), p)),
                  rng.standard_normal((3, 4))))

    other = _probe(rng, (3, 4))
    p34a = _probe(rng, (3, 4))
    cases.append(("add", lambda t: ad.tsum(ad.mul(ad.add(t, other), p34a)),
                  rng.standard_normal((3, 4))))

    p34b = _probe(rng, (3, 4))
    cases.append(("add-broadcast", lambda t: ad.tsum(ad.mul(ad.add(other, t), p34b)),
                  rng.standard_normal(4)))

    p34c = _probe(rng, (3, 4))
    cases.append(("mul", lambda t: ad.tsum(ad.mul(ad.mul(t, other), p34c)),
                  rng.standard_normal((3, 4))))

    p38 = _probe(rng, (3, 8))
    cases.append(("concat", lambda t: ad.tsum(ad.mul(ad.concat([t, other], axis=-1), p38)),
                  rng.standard_normal((3, 4))))

    p43 = _probe(rng, (4, 3))
    cases.append(("transpose-last-two",
                  lambda t: ad.tsum(ad.mul(ad.transpose_last_two(t), p43)),
                  rng.standard_normal((3, 4))))

    p34d = _probe(rng, (3, 4))
    cases.append(("relu", lambda t: ad.tsum(ad.mul(ad.relu(t), p34d)),
                  _away_from_kinks(rng.standard_normal((3, 4)))))

    p34e = _probe(rng, (3, 4))
    cases.append(("tanh", lambda t: ad.tsum(ad.mul(ad.tanh(t), p34e)),
                  rng.standard_normal((3, 4))))

    p34f = _probe(rng, (3, 4))
    cases.append(("exp", lambda t: ad.tsum(ad.mul(ad.exp(t), p34f)),
                  rng.standard_normal((3, 4))))

    p34g = _probe(rng, (3, 4))
    cases.append(("log", lambda t: ad.tsum(ad.mul(ad.log(t), p34g)),
                  rng.uniform(0.5, 3.0, (3, 4))))

    p34h = _probe(rng, (3, 4))
    cases.append(("softmax-last-axis", lambda t: ad.tsum(ad.mul(ad.softmax(t), p34h)),
                  rng.standard_normal((3, 4))))

    p3 = _probe(rng, 3)
    cases.append(("sum", lambda t: ad.tsum(ad.mul(ad.tsum(t, axis=-1), p3)),
                  rng.standard_normal((3, 4))))

    p4 = _probe(rng, 4)
    cases.append(("mean", lambda t: ad.tsum(ad.mul(ad.tmean(t, axis=0), p4)),
                  rng.standard_normal((3, 4))))

    p22 = _probe(rng, (2, 2))
    cases.append(("slice", lambda t: ad.tsum(ad.mul(t[1:, :2], p22)),
                  rng.standard_normal((3, 4))))

    p324 = _probe(rng, (3, 2, 4))
    cases.append(("stack-channels",
                  lambda t: ad.tsum(ad.mul(ad.stack_channels([t, other], axis=-2), p324)),
                  rng.standard_normal((3, 4))))

    kern = _probe(rng, (2, 3))
    p36a = _probe(rng, (3, 6))
    cases.append(("conv1d-2ch-input",
                  lambda t: ad.tsum(ad.mul(ad.conv1d_2ch(t, kern), p36a)),
                  rng.standard_normal((3, 2, 6))))

    sig = _probe(rng, (3, 2, 6))
    p36b = _probe(rng, (3, 6))
    cases.append(("conv1d-2ch-kernel",
                  lambda t: ad.tsum(ad.mul(ad.conv1d_2ch(sig, t), p36b)),
                  rng.standard_normal((2, 3))))

    p34i = _probe(rng, (3, 4))
    cases.append(("scale", lambda t: ad.tsum(ad.mul(ad.scale(t, 2.5), p34i)),
                  rng.standard_normal((3, 4))))

    p34j = _probe(rng, (3, 4))
    cases.append(("pow", lambda t: ad.tsum(ad.mul(ad.powc(t, 0.5), p34j)),
                  rng.uniform(0.5, 2.0, (3, 4))))

    p43b = _probe(rng, (4, 3))
    cases.append(("reshape", lambda t: ad.tsum(ad.mul(ad.reshape(t, (4, 3)), p43b)),
                  rng.standard_normal((3, 4))))

    lower = Tensor(np.tril(rng.standard_normal((4, 4))) + 4 * np.eye(4))
    p42a = _probe(rng, (4, 2))
    cases.append(("tri-solve-b",
                  lambda t: ad.tsum(ad.mul(ad.tri_solve(lower, t), p42a)),
                  rng.standard_normal((4, 2))))

    tril_ones = Tensor(np.tril(np.ones((4, 4))))
    eye4 = Tensor(4 * np.eye(4))
    rhs = Tensor(rng.standard_normal((4, 2)))
    p42b = _probe(rng, (4, 2))
    cases.append(("tri-solve-L",
                  lambda t: ad.tsum(ad.mul(
                      ad.tri_solve(ad.add(ad.mul(t, tril_ones), eye4), rhs, trans=True), p42b)),
                  rng.standard_normal((4, 4))))

    p34k = _probe(rng, (3, 4))
    cases.append(("logaddexp", lambda t: ad.tsum(ad.mul(ad.logaddexp(t, other), p34k)),
                  rng.standard_normal((3, 4))))

    p34m = _probe(rng, (3, 4))
    cases.append(("log-softmax", lambda t: ad.tsum(ad.mul(ad.log_softmax(t), p34m)),
                  rng.standard_normal((3, 4))))

    return cases
