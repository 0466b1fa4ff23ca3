"""Independent reference implementations used only by the tests.

Nothing here imports solver internals beyond the coefficient containers, so
agreement with the production code is a genuine cross-check.
"""

from __future__ import annotations

import numpy as np


def bisection_root(f, lo, hi, iters: int = 200):
    """Vectorized bisection for an increasing function with f(lo) ≤ 0 ≤ f(hi)."""
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    assert np.all(f(lo) <= 0) and np.all(f(hi) >= 0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        lo = np.where(fm <= 0, mid, lo)
        hi = np.where(fm <= 0, hi, mid)
    return 0.5 * (lo + hi)


def oracle_V(coeffs, t, x, v, p, u):
    """Root of z − pσ(t,x,v,z,u) by bisection (increasing in z when |p|L3 < 1)."""
    p = np.asarray(p, dtype=float)
    bound = np.abs(p) * (np.abs(coeffs.sigma(t, x, v, 0.0, u)) + 1.0) / max(1e-3, 1 - np.max(np.abs(p)) * coeffs.L3) + 1.0
    return bisection_root(lambda z: z - p * coeffs.sigma(t, x, v, z, u), -bound, bound)


def oracle_Delta(coeffs, s, xr, yr, zr, ur, p, u):
    ref = coeffs.sigma(s, xr, yr, zr, ur)
    f = lambda d: d - p * (coeffs.sigma(s, xr, yr, zr + d, u) - ref)  # noqa: E731
    bound = np.abs(p) * (np.abs(f(0.0)) + 10.0) / max(1e-3, 1 - np.max(np.abs(p)) * coeffs.L3) + 1.0
    return bisection_root(f, -bound * np.ones_like(np.asarray(p, float)), bound * np.ones_like(np.asarray(p, float)))


def termwise_k2(sx, sy, sz, H, p, P, Q, K1):
    """K2 expanded by hand: every product written out separately."""
    den = 1.0 - p * sz
    coeffP = p * sy + 2.0 * sx + 2.0 * sy * p + 2.0 * sz * K1
    quad = (
        H[0][0]
        + 2.0 * p * H[0][1]
        + 2.0 * K1 * H[0][2]
        + p * p * H[1][1]
        + 2.0 * p * K1 * H[1][2]
        + K1 * K1 * H[2][2]
    )
    return coeffP * P / den + Q / den + p * quad / den


def rk4_backward(rhs, y_T, T, t0, steps):
    """Integrate y' = rhs(t, y) from T back to t0; returns (times, values) ascending."""
    h = (T - t0) / steps
    ts = [T]
    ys = [np.asarray(y_T, dtype=float)]
    y = ys[0]
    t = T
    for _ in range(steps):
        k1 = rhs(t, y)
        k2 = rhs(t - h / 2, y - h / 2 * k1)
        k3 = rhs(t - h / 2, y - h / 2 * k2)
        k4 = rhs(t - h, y - h * k3)
        y = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t - h
        ts.append(t)
        ys.append(y)
    return np.array(ts[::-1]), np.array(ys[::-1])


def lq_riccati(params: dict, T: float, t0: float = 0.0, steps: int = 20000):
    """Closed-form quadratic value function for the coupled LQ family.

    Model (control held at the dominant corner u = 0):
      b = b1 x + b3 z,  σ ≡ s0,  g = g1 x + g2 y + g3 z,  φ = ½k x² + k1 x.
    Matching powers of x in W_t + G = 0 with W = ½a x² + β x + c and
    V = W_x s0 gives
      a' = −(2 b1 a + 2 b3 s0 a² + g2 a)
      β' = −(b1 β + 2 b3 s0 a β + g1 + g2 β + g3 s0 a)
      c' = −(b3 s0 β² + ½ a s0² + g2 c + g3 s0 β)
    with a(T) = k, β(T) = k1, c(T) = 0.
    """
    b1, b3, s0 = params["b1"], params["b3"], params["s0"]
    g1, g2, g3 = params["g1"], params["g2"], params["g3"]

    def rhs(t, y):
        a, be, c = y
        return np.array(
            [
                -(2 * b1 * a + 2 * b3 * s0 * a * a + g2 * a),
                -(b1 * be + 2 * b3 * s0 * a * be + g1 + g2 * be + g3 * s0 * a),
                -(b3 * s0 * be * be + 0.5 * a * s0 * s0 + g2 * c + g3 * s0 * be),
            ]
        )

    ts, ys = rk4_backward(rhs, np.array([params["k"], params["k1"], 0.0]), T, t0, steps)
    return ts, ys[:, 0], ys[:, 1], ys[:, 2]


def euler_maruyama(b, sigma, x0, ts, dB, u):
    """Plain forward Euler–Maruyama for dX = b dt + σ dB with y = z = 0 slots."""
    M, N = dB.shape
    X = np.empty((M, N + 1))
    X[:, 0] = x0
    for k in range(N):
        dt = ts[k + 1] - ts[k]
        X[:, k + 1] = X[:, k] + b(ts[k], X[:, k], 0.0, 0.0, u[:, k]) * dt + sigma(ts[k], X[:, k], 0.0, 0.0, u[:, k]) * dB[:, k]
    return X


def regression_bsde(X, dB, ts, terminal, driver, degree=4):
    """Reduced-driver backward scheme: p_k = E[p_{k+1}] + Δt f(k, X_k, p̂, q_k)."""
    M, N = dB.shape
    p = np.empty((M, N + 1))
    q = np.empty((M, N))
    p[:, N] = terminal
    for k in range(N - 1, -1, -1):
        dt = ts[k + 1] - ts[k]
        x = X[:, k]
        sd = x.std()
        if sd < 1e-12:
            basis = np.ones((M, 1))
        else:
            basis = np.vander((x - x.mean()) / sd, degree + 1, increasing=True)
        coef, *_ = np.linalg.lstsq(basis, p[:, k + 1], rcond=None)
        phat = basis @ coef
        coef_q, *_ = np.linalg.lstsq(basis, (p[:, k + 1] - phat) * dB[:, k], rcond=None)
        q[:, k] = basis @ coef_q / dt
        p[:, k] = phat + dt * driver(k, x, phat, q[:, k])
    return p, q
