"""Standard and dilated 2-D convolution (cross-correlation, zero padding).

Forward evaluates every output channel as its own ``(1, C*Kh*Kw) @ cols``
product. That keeps each output channel's arithmetic independent of how many
other channels are computed alongside it, so splitting a convolution along
output channels (as CoConv does) is bit-exact. Backward uses plain GEMMs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import GeometryError, ShapeError, conv_output_shape

# upper bound on patch-matrix elements materialised at once; chunking is over
# the batch and depends only on input geometry, never on the output channels
_MAX_COLS = 1 << 24


@dataclass(frozen=True)
class ConvGeometry:
    m_in: int
    m_out: int
    k_h: int = 3
    k_w: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("m_in", "m_out", "k_h", "k_w", "stride", "dilation"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise GeometryError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.padding, (int, np.integer)) or self.padding < 0:
            raise GeometryError(f"padding must be a nonnegative integer, got {self.padding!r}")

    @classmethod
    def same(cls, m_in, m_out, kernel=3, stride=1, dilation=1, has_bias=False):
        """Geometry whose padding keeps the spatial size at stride 1 (odd kernels)."""
        if kernel % 2 == 0:
            raise GeometryError("'same' padding needs an odd kernel")
        return cls(m_in, m_out, kernel, kernel, stride, dilation * (kernel - 1) // 2, dilation, has_bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.m_out, self.m_in, self.k_h, self.k_w)

    @property
    def param_count(self) -> int:
        return self.m_in * self.k_w * self.k_h * self.m_out + (self.m_out if self.has_bias else 0)


def _validate(x, weights, geom):
    if x.ndim != 4 or x.shape[1] != geom.m_in:
        raise ShapeError(f"input {x.shape} does not have {geom.m_in} channels")
    if weights.shape != geom.weight_shape:
        raise ShapeError(f"weights {weights.shape} do not match geometry {geom.weight_shape}")
    return conv_output_shape(x.shape[2:], geom)


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap_slices(geom, i, j, h_out, w_out):
    s, d = geom.stride, geom.dilation
    return (slice(i * d, i * d + s * (h_out - 1) + 1, s),
            slice(j * d, j * d + s * (w_out - 1) + 1, s))


def _im2col(xp, geom, h_out, w_out):
    """(n, C, Hp, Wp) padded input -> (C*Kh*Kw, n*Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    taps = [xp[:, :, si, sj]
            for i in range(geom.k_h) for j in range(geom.k_w)
            for si, sj in [_tap_slices(geom, i, j, h_out, w_out)]]
    cols = np.stack(taps, axis=2)  # n, C, KK, Ho, Wo
    return cols.transpose(1, 2, 0, 3, 4).reshape(c * geom.k_h * geom.k_w, n * h_out * w_out)


def _batch_step(geom, h_out, w_out):
    per_sample = geom.m_in * geom.k_h * geom.k_w * h_out * w_out
    return max(1, _MAX_COLS // per_sample)


def conv2d_forward(x, weights, bias, geom: ConvGeometry):
    h_out, w_out = _validate(x, weights, geom)
    n = x.shape[0]
    xp = _pad(x, geom.padding)
    wmat = weights.reshape(geom.m_out, 1, -1)
    out = np.empty((n, geom.m_out, h_out, w_out), dtype=np.result_type(x, weights))
    step = _batch_step(geom, h_out, w_out)
    for n0 in range(0, n, step):
        chunk = xp[n0:n0 + step]
        cols = _im2col(chunk, geom, h_out, w_out)
        y = np.matmul(wmat, cols)  # (O, 1, n*Ho*Wo)
        out[n0:n0 + step] = y.reshape(geom.m_out, chunk.shape[0], h_out, w_out).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (geom.m_out,):
            raise ShapeError(f"bias {bias.shape} does not match {geom.m_out} output channels")
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(x, weights, geom: ConvGeometry, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``; grad_bias is None without bias."""
    h_out, w_out = _validate(x, weights, geom)
    n, _, h, w = x.shape
    if grad_out.shape != (n, geom.m_out, h_out, w_out):
        raise ShapeError(f"grad_out {grad_out.shape} != expected {(n, geom.m_out, h_out, w_out)}")
    p = geom.padding
    xp = _pad(x, p)
    wmat = weights.reshape(geom.m_out, -1)
    grad_w = np.zeros_like(wmat)
    grad_xp = np.zeros_like(xp)
    step = _batch_step(geom, h_out, w_out)
    for n0 in range(0, n, step):
        chunk = xp[n0:n0 + step]
        nc = chunk.shape[0]
        g = grad_out[n0:n0 + step].transpose(1, 0, 2, 3).reshape(geom.m_out, -1)
        cols = _im2col(chunk, geom, h_out, w_out)
        grad_w += g @ cols.T
        gcols = (wmat.T @ g).reshape(geom.m_in, geom.k_h, geom.k_w, nc, h_out, w_out)
        gx = grad_xp[n0:n0 + step]
        for i in range(geom.k_h):
            for j in range(geom.k_w):
                si, sj = _tap_slices(geom, i, j, h_out, w_out)
                gx[:, :, si, sj] += gcols[:, i, j].transpose(1, 0, 2, 3)
    grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3)) if geom.has_bias else None
    return np.ascontiguousarray(grad_x), grad_w.reshape(weights.shape), grad_b


@numba.njit(cache=True)
def _oracle_loops(x, w, out, stride, pad, dil):
    n_b, c_in, h, wd = x.shape
    c_out, _, k_h, k_w = w.shape
    h_out, w_out = out.shape[2], out.shape[3]
    for n in range(n_b):
        for o in range(c_out):
            for oh in range(h_out):
                for ow in range(w_out):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(k_h):
                            for j in range(k_w):
                                ih = oh * stride - pad + i * dil
                                iw = ow * stride - pad + j * dil
                                if 0 <= ih < h and 0 <= iw < wd:
                                    acc += x[n, c, ih, iw] * w[o, c, i, j]
                    out[n, o, oh, ow] = acc


def conv2d_reference_oracle(x, weights, bias, geom: ConvGeometry):
    """Brute-force convolution: seven explicit loops, no patch matrices."""
    if x.shape[1] != geom.m_in or weights.shape != geom.weight_shape:
        raise ShapeError("input/weights do not match geometry")
    h, w = x.shape[2:]
    eff_h = geom.dilation * (geom.k_h - 1) + 1
    eff_w = geom.dilation * (geom.k_w - 1) + 1
    if eff_h > h + 2 * geom.padding or eff_w > w + 2 * geom.padding:
        raise GeometryError("effective kernel exceeds padded input")
    h_out = (h + 2 * geom.padding - eff_h) // geom.stride + 1
    w_out = (w + 2 * geom.padding - eff_w) // geom.stride + 1
    dtype = np.result_type(x, weights)
    out = np.zeros((x.shape[0], geom.m_out, h_out, w_out), dtype=dtype)
    _oracle_loops(np.ascontiguousarray(x, dtype=dtype), np.ascontiguousarray(weights, dtype=dtype),
                  out, geom.stride, geom.padding, geom.dilation)
    if bias is not None:
        for o in range(geom.m_out):
            out[:, o] += bias[o]
    return out
