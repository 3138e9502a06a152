"""
Numpy implementation of the fused recurrent sequence kernels.

Selected at import when the compiled ``_recurrent`` extension is missing.
Both implementations share one calling convention:

* ``X`` is (B, L, D); weights are stacked row-wise with the hidden part in
  the first ``H`` columns and the input part in the rest, i.e. a gate
  pre-activation is ``W @ [h_prev, x_t] + b``.
* ``mask`` is (B, L) uint8. Where it is 0 the state is carried unchanged.
* ``reverse`` walks positions right to left.

The input projection for every position is computed in one matrix product
up front; only the hidden-state products remain inside the time loop.
"""
import numpy as np


def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _steps(L, reverse):
    return range(L - 1, -1, -1) if reverse else range(L)


def gru_forward(X, Wrz, Wh, brz, bh, mask, reverse):
    B, L, D = X.shape
    H = Wh.shape[0]
    dt = X.dtype
    flat = X.reshape(B * L, D)
    xrz = (flat @ Wrz[:, H:].T).reshape(B, L, 2 * H) + brz
    xh = (flat @ Wh[:, H:].T).reshape(B, L, H) + bh
    Urz, Uh = Wrz[:, :H].T, Wh[:, :H].T
    Hs = np.empty((B, L, H), dt)
    Hprev = np.empty((B, L, H), dt)
    R = np.empty((B, L, H), dt)
    Z = np.empty((B, L, H), dt)
    Hc = np.empty((B, L, H), dt)
    h = np.zeros((B, H), dt)
    m = mask.astype(dt)
    for t in _steps(L, reverse):
        Hprev[:, t] = h
        rz = _sig(h @ Urz + xrz[:, t])
        r, z = rz[:, :H], rz[:, H:]
        hc = np.tanh((r * h) @ Uh + xh[:, t])
        hn = z * h + (1 - z) * hc
        mt = m[:, t, None]
        h = mt * hn + (1 - mt) * h
        Hs[:, t] = h
        R[:, t], Z[:, t], Hc[:, t] = r, z, hc
    return Hs, (Hprev, R, Z, Hc)


def gru_backward(dHs, X, Wrz, Wh, mask, reverse, cache):
    Hprev, R, Z, Hc = cache
    B, L, D = X.shape
    H = Wh.shape[0]
    dt = X.dtype
    Urz, Uh = Wrz[:, :H], Wh[:, :H]
    dArz = np.zeros((B, L, 2 * H), dt)
    dAh = np.zeros((B, L, H), dt)
    dh = np.zeros((B, H), dt)
    m = mask.astype(dt)
    for t in _steps(L, not reverse):
        dh = dh + dHs[:, t]
        mt = m[:, t, None]
        h, r, z, hc = Hprev[:, t], R[:, t], Z[:, t], Hc[:, t]
        dhn = mt * dh
        dz = dhn * (h - hc)
        dah = dhn * (1 - z) * (1 - hc * hc)
        drh = dah @ Uh
        darz = np.concatenate([drh * h * r * (1 - r), dz * z * (1 - z)], axis=1)
        dh = (1 - mt) * dh + dhn * z + drh * r + darz @ Urz
        dArz[:, t] = darz
        dAh[:, t] = dah
    flatX = X.reshape(B * L, D)
    fArz = dArz.reshape(B * L, 2 * H)
    fAh = dAh.reshape(B * L, H)
    RH = (R * Hprev).reshape(B * L, H)
    dWrz = np.concatenate([fArz.T @ Hprev.reshape(B * L, H), fArz.T @ flatX], axis=1)
    dWh = np.concatenate([fAh.T @ RH, fAh.T @ flatX], axis=1)
    dX = (fArz @ Wrz[:, H:] + fAh @ Wh[:, H:]).reshape(B, L, D)
    return dX, dWrz, dWh, fArz.sum(axis=0), fAh.sum(axis=0)


def lstm_forward(X, W, b, mask, reverse):
    B, L, D = X.shape
    H = W.shape[0] // 4
    dt = X.dtype
    flat = X.reshape(B * L, D)
    xa = (flat @ W[:, H:].T).reshape(B, L, 4 * H) + b
    U = W[:, :H].T
    Hs = np.empty((B, L, H), dt)
    Hprev = np.empty((B, L, H), dt)
    Cprev = np.empty((B, L, H), dt)
    G = np.empty((B, L, 4 * H), dt)
    Tc = np.empty((B, L, H), dt)
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    m = mask.astype(dt)
    for t in _steps(L, reverse):
        Hprev[:, t], Cprev[:, t] = h, c
        a = h @ U + xa[:, t]
        g = np.empty_like(a)
        g[:, : 3 * H] = _sig(a[:, : 3 * H])
        g[:, 3 * H:] = np.tanh(a[:, 3 * H:])
        i, f, o, cc = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        cn = f * c + i * cc
        tc = np.tanh(cn)
        hn = o * tc
        mt = m[:, t, None]
        h = mt * hn + (1 - mt) * h
        c = mt * cn + (1 - mt) * c
        Hs[:, t] = h
        G[:, t], Tc[:, t] = g, tc
    return Hs, (Hprev, Cprev, G, Tc)


def lstm_backward(dHs, X, W, mask, reverse, cache):
    Hprev, Cprev, G, Tc = cache
    B, L, D = X.shape
    H = W.shape[0] // 4
    dt = X.dtype
    U = W[:, :H]
    dA = np.zeros((B, L, 4 * H), dt)
    dh = np.zeros((B, H), dt)
    dc = np.zeros((B, H), dt)
    m = mask.astype(dt)
    for t in _steps(L, not reverse):
        dh = dh + dHs[:, t]
        mt = m[:, t, None]
        g, tc, c = G[:, t], Tc[:, t], Cprev[:, t]
        i, f, o, cc = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        dhn = mt * dh
        dcn = mt * dc + dhn * o * (1 - tc * tc)
        da = np.concatenate(
            [
                dcn * cc * i * (1 - i),
                dcn * c * f * (1 - f),
                dhn * tc * o * (1 - o),
                dcn * i * (1 - cc * cc),
            ],
            axis=1,
        )
        dc = (1 - mt) * dc + dcn * f
        dh = (1 - mt) * dh + da @ U
        dA[:, t] = da
    flatX = X.reshape(B * L, D)
    fA = dA.reshape(B * L, 4 * H)
    dW = np.concatenate([fA.T @ Hprev.reshape(B * L, H), fA.T @ flatX], axis=1)
    dX = (fA @ W[:, H:]).reshape(B, L, D)
    return dX, dW, fA.sum(axis=0)
