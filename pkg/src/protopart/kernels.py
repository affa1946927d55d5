"""Hot numeric kernels with two interchangeable backends.

Everything here is float64 and layout NHWC (images) / (kh, kw, cin, cout)
(conv weights). The numba backend JIT-compiles explicit loops; the numpy
backend expresses the same operations as per-tap matmuls. Select with the
PROTOPART_BACKEND environment variable ("numba" or "numpy"); default is
numba when importable. Parallel numba loops only ever write disjoint output
slices, so both backends are run-to-run deterministic.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "PROTOPART_BACKEND"


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


class numpy_impl:
    """Pure-numpy fallback. Per-(kh, kw) matmul accumulation, no im2col blowup."""

    name = "numpy"

    @staticmethod
    def conv2d(x, w, b, stride, pad):
        n, h, wd, cin = x.shape
        kh, kw, _, cout = w.shape
        oh = _conv_out_size(h, kh, stride, pad)
        ow = _conv_out_size(wd, kw, stride, pad)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        y = np.zeros((n, oh, ow, cout))
        for i in range(kh):
            for j in range(kw):
                tap = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
                y += tap @ w[i, j]
        if b is not None:
            y += b
        return y

    @staticmethod
    def conv2d_input_grad(gy, w, x_shape, stride, pad):
        n, h, wd, cin = x_shape
        kh, kw, _, cout = w.shape
        _, oh, ow, _ = gy.shape
        gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gy @ w[i, j].T
        if pad:
            return gxp[:, pad : pad + h, pad : pad + wd, :]
        return gxp

    @staticmethod
    def conv2d_weight_grad(x, gy, w_shape, stride, pad):
        kh, kw, cin, cout = w_shape
        _, oh, ow, _ = gy.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        gw = np.zeros(w_shape)
        for i in range(kh):
            for j in range(kw):
                tap = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
                gw[i, j] = np.tensordot(tap, gy, axes=([0, 1, 2], [0, 1, 2]))
        gb = gy.sum(axis=(0, 1, 2))
        return gw, gb

    @staticmethod
    def distance_maps(z, protos):
        n, hz, wz, d = z.shape
        m = protos.shape[0]
        flat = z.reshape(-1, d)
        sq = (flat * flat).sum(axis=1)[:, None] + (protos * protos).sum(axis=1)[None, :]
        sq -= 2.0 * (flat @ protos.T)
        np.maximum(sq, 0.0, out=sq)
        dist = np.sqrt(sq).reshape(n, hz, wz, m)
        return np.ascontiguousarray(np.moveaxis(dist, 3, 1))

    @staticmethod
    def distance_maps_backward(z, protos, dist, gd):
        n, hz, wz, d = z.shape
        m = protos.shape[0]
        # d(dist)/dz = (z - p) / dist; guard the dist=0 subgradient with 0
        coef = np.where(dist > 1e-12, gd / np.maximum(dist, 1e-12), 0.0)  # (n, m, hz, wz)
        cf = np.moveaxis(coef, 1, 3).reshape(-1, m)  # (n*hz*wz, m)
        flat = z.reshape(-1, d)
        tot = cf.sum(axis=1)
        gz = (flat * tot[:, None] - cf @ protos).reshape(n, hz, wz, d)
        gp = protos * cf.sum(axis=0)[:, None] - cf.T @ flat
        return gz, gp


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _nb_conv2d(x, w, b, stride, pad, y):
        n, h, wd, cin = x.shape
        kh, kw, _, cout = w.shape
        oh, ow = y.shape[1], y.shape[2]
        for ni in prange(n):
            for oi in range(oh):
                for oj in range(ow):
                    for co in range(cout):
                        acc = b[co]
                        for i in range(kh):
                            ih = oi * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = oj * stride + j - pad
                                if iw < 0 or iw >= wd:
                                    continue
                                for ci in range(cin):
                                    acc += x[ni, ih, iw, ci] * w[i, j, ci, co]
                        y[ni, oi, oj, co] = acc

    @njit(cache=True, parallel=True)
    def _nb_conv2d_input_grad(gy, w, stride, pad, gx):
        n, h, wd, cin = gx.shape
        kh, kw, _, cout = w.shape
        oh, ow = gy.shape[1], gy.shape[2]
        for ni in prange(n):
            for oi in range(oh):
                for oj in range(ow):
                    for i in range(kh):
                        ih = oi * stride + i - pad
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(kw):
                            iw = oj * stride + j - pad
                            if iw < 0 or iw >= wd:
                                continue
                            for ci in range(cin):
                                acc = 0.0
                                for co in range(cout):
                                    acc += gy[ni, oi, oj, co] * w[i, j, ci, co]
                                gx[ni, ih, iw, ci] += acc

    @njit(cache=True, parallel=True)
    def _nb_conv2d_weight_grad(x, gy, stride, pad, gw, gb):
        n, h, wd, cin = x.shape
        kh, kw, _, cout = gw.shape
        oh, ow = gy.shape[1], gy.shape[2]
        # one parallel worker per kernel tap; inner loops stay contiguous in co
        for tap in prange(kh * kw):
            i = tap // kw
            j = tap - i * kw
            for ni in range(n):
                for oi in range(oh):
                    ih = oi * stride + i - pad
                    if ih < 0 or ih >= h:
                        continue
                    for oj in range(ow):
                        iw = oj * stride + j - pad
                        if iw < 0 or iw >= wd:
                            continue
                        for ci in range(cin):
                            xv = x[ni, ih, iw, ci]
                            if xv == 0.0:
                                continue
                            for co in range(cout):
                                gw[i, j, ci, co] += xv * gy[ni, oi, oj, co]
        for ni in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    for co in range(cout):
                        gb[co] += gy[ni, oi, oj, co]

    @njit(cache=True, parallel=True)
    def _nb_distance_maps(z, protos, out):
        n, hz, wz, d = z.shape
        m = protos.shape[0]
        for ni in prange(n):
            for jp in range(m):
                for r in range(hz):
                    for c in range(wz):
                        acc = 0.0
                        for k in range(d):
                            diff = z[ni, r, c, k] - protos[jp, k]
                            acc += diff * diff
                        out[ni, jp, r, c] = np.sqrt(acc)

    @njit(cache=True, parallel=True)
    def _nb_distance_maps_grad_z(z, protos, dist, gd, gz):
        n, hz, wz, d = z.shape
        m = protos.shape[0]
        for ni in prange(n):
            for r in range(hz):
                for c in range(wz):
                    for jp in range(m):
                        dv = dist[ni, jp, r, c]
                        if dv <= 1e-12:
                            continue
                        s = gd[ni, jp, r, c] / dv
                        if s == 0.0:
                            continue
                        for k in range(d):
                            gz[ni, r, c, k] += s * (z[ni, r, c, k] - protos[jp, k])

    @njit(cache=True, parallel=True)
    def _nb_distance_maps_grad_p(z, protos, dist, gd, gp):
        n, hz, wz, d = z.shape
        m = protos.shape[0]
        for jp in prange(m):
            for ni in range(n):
                for r in range(hz):
                    for c in range(wz):
                        dv = dist[ni, jp, r, c]
                        if dv <= 1e-12:
                            continue
                        s = gd[ni, jp, r, c] / dv
                        if s == 0.0:
                            continue
                        for k in range(d):
                            gp[jp, k] += s * (protos[jp, k] - z[ni, r, c, k])

    class numba_impl:
        """Numba-jitted loops; outputs bitwise-stable across runs."""

        name = "numba"

        @staticmethod
        def conv2d(x, w, b, stride, pad):
            n, h, wd, cin = x.shape
            kh, kw, _, cout = w.shape
            oh = _conv_out_size(h, kh, stride, pad)
            ow = _conv_out_size(wd, kw, stride, pad)
            y = np.empty((n, oh, ow, cout))
            bb = b if b is not None else np.zeros(cout)
            _nb_conv2d(x, w, bb, stride, pad, y)
            return y

        @staticmethod
        def conv2d_input_grad(gy, w, x_shape, stride, pad):
            gx = np.zeros(x_shape)
            _nb_conv2d_input_grad(np.ascontiguousarray(gy), w, stride, pad, gx)
            return gx

        @staticmethod
        def conv2d_weight_grad(x, gy, w_shape, stride, pad):
            gw = np.zeros(w_shape)
            gb = np.zeros(w_shape[3])
            _nb_conv2d_weight_grad(x, np.ascontiguousarray(gy), stride, pad, gw, gb)
            return gw, gb

        @staticmethod
        def distance_maps(z, protos):
            n, hz, wz, _ = z.shape
            out = np.empty((n, protos.shape[0], hz, wz))
            _nb_distance_maps(np.ascontiguousarray(z), np.ascontiguousarray(protos), out)
            return out

        @staticmethod
        def distance_maps_backward(z, protos, dist, gd):
            z = np.ascontiguousarray(z)
            protos = np.ascontiguousarray(protos)
            gd = np.ascontiguousarray(gd)
            gz = np.zeros(z.shape)
            gp = np.zeros(protos.shape)
            _nb_distance_maps_grad_z(z, protos, dist, gd, gz)
            _nb_distance_maps_grad_p(z, protos, dist, gd, gp)
            return gz, gp

else:  # pragma: no cover
    numba_impl = None


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------


def _resolve(name: str):
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("PROTOPART_BACKEND=numba requested but numba is not importable")
        return numba_impl
    raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")


_requested = os.environ.get(_ENV_FLAG, "").strip().lower()
if _requested:
    _active = _resolve(_requested)
else:
    _active = numba_impl if HAS_NUMBA else numpy_impl


def active_backend() -> str:
    return _active.name


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (used by tests and the benchmark)."""
    global _active
    _active = _resolve(name)


def conv2d(x, w, b, stride=1, pad=0):
    """2D convolution, NHWC in / NHWC out, weights (kh, kw, cin, cout)."""
    return _active.conv2d(x, w, b, stride, pad)


def conv2d_input_grad(gy, w, x_shape, stride=1, pad=0):
    return _active.conv2d_input_grad(gy, w, x_shape, stride, pad)


def conv2d_weight_grad(x, gy, w_shape, stride=1, pad=0):
    return _active.conv2d_weight_grad(x, gy, w_shape, stride, pad)


def distance_maps(z, protos):
    """L2 distances between every latent patch and every prototype.

    z: (n, hz, wz, d), protos: (m, d) -> (n, m, hz, wz).
    """
    return _active.distance_maps(z, protos)


def distance_maps_backward(z, protos, dist, gd):
    """Chain upstream distance gradients gd back to (gz, gprotos)."""
    return _active.distance_maps_backward(z, protos, dist, gd)
