"""3D convolution with forward and backward kernels on numpy.

Stride-1 layers with several input channels run one small GEMM per kernel
tap on the flattened padded grid: tap (i, j, k) is a constant offset into
that buffer, so each operand is a strided view and nothing is copied. Rows
that straddle the padded border produce junk columns that are cropped off.
Other layers build the im2col matrix one depth slab at a time so the buffer
stays cache-sized, with a single GEMM per slab. For stride 1
the input gradient is itself a convolution (zero-padded output gradient
against the flipped, channel-transposed kernel) and reuses the same kernel.
Strided layers only occur on small feature maps and scatter their input
gradient tap by tap.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _make

# floats per im2col slab; ~8 MB at float32
_SLAB_ELEMS = 1 << 21


def _normalize_padding(padding) -> tuple[tuple[int, int], ...]:
    if isinstance(padding, (int, np.integer)):
        return ((int(padding), int(padding)),) * 3
    padding = tuple(padding)
    if len(padding) != 3:
        raise ValueError(f"padding must be an int or three (lo, hi) pairs, got {padding}")
    out = []
    for p in padding:
        if isinstance(p, (int, np.integer)):
            out.append((int(p), int(p)))
        else:
            lo, hi = p
            out.append((int(lo), int(hi)))
    return tuple(out)


def conv3d_output_shape(spatial, kernel, stride, padding) -> tuple[int, int, int]:
    pads = _normalize_padding(padding)
    out = []
    for n, k, (lo, hi) in zip(spatial, kernel, pads):
        span = n + lo + hi
        if span < k:
            raise ShapeError(f"conv3d: padded extent {span} smaller than kernel {k}")
        out.append((span - k) // stride + 1)
    return tuple(out)


def _windows(xp: np.ndarray, kshape, stride: int, out_sp) -> np.ndarray:
    """View [N,C,Do,Ho,Wo,kd,kh,kw] of every receptive field."""
    win = np.lib.stride_tricks.sliding_window_view(xp, kshape, axis=(2, 3, 4))
    if stride > 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    Do, Ho, Wo = out_sp
    return win[:, :, :Do, :Ho, :Wo]


def _slab_depth(win: np.ndarray) -> int:
    C = win.shape[1]
    per_slice = C * win.shape[3] * win.shape[4] * win.shape[5] * win.shape[6] * win.shape[7]
    return max(1, min(win.shape[2], _SLAB_ELEMS // max(per_slice, 1)))


def _slab_cols(win: np.ndarray, n: int, d0: int, d1: int) -> np.ndarray:
    # rows (c, i, j, k), columns (d, h, w)
    C = win.shape[1]
    kvol = win.shape[5] * win.shape[6] * win.shape[7]
    return np.ascontiguousarray(win[n, :, d0:d1].transpose(0, 4, 5, 6, 1, 2, 3)).reshape(C * kvol, -1)


# below this many input channels the per-tap GEMMs are too thin to pay off
_SHIFT_MIN_CHANNELS = 4


def _use_shift(stride: int, channels: int) -> bool:
    return stride == 1 and channels >= _SHIFT_MIN_CHANNELS


def _tap_offsets(kshape, grid):
    _, Hp, Wp = grid
    for i in range(kshape[0]):
        for j in range(kshape[1]):
            for k in range(kshape[2]):
                yield (i, j, k), i * Hp * Wp + j * Wp + k


def _shift_span(grid, out_sp) -> int:
    _, Hp, Wp = grid
    Do, Ho, Wo = out_sp
    return (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo


def _forward_shift(xp: np.ndarray, w: np.ndarray, out_sp) -> np.ndarray:
    N, C = xp.shape[:2]
    Co = w.shape[0]
    grid = xp.shape[2:]
    Do, Ho, Wo = out_sp
    span = _shift_span(grid, out_sp)
    taps = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.empty((N, Co, Do, Ho, Wo), dtype=np.result_type(xp.dtype, w.dtype))
    acc = np.empty((Co, Do * grid[1] * grid[2]), dtype=out.dtype)
    for n in range(N):
        flat = xp[n].reshape(C, -1)
        acc[:, span:] = 0
        first = True
        for (i, j, k), off in _tap_offsets(w.shape[2:], grid):
            if first:
                np.matmul(taps[i, j, k], flat[:, off:off + span], out=acc[:, :span])
                first = False
            else:
                acc[:, :span] += taps[i, j, k] @ flat[:, off:off + span]
        out[n] = acc.reshape(Co, Do, grid[1], grid[2])[:, :, :Ho, :Wo]
    return out


def _weight_grad_shift(xp: np.ndarray, g: np.ndarray, wshape) -> np.ndarray:
    N, Co = g.shape[:2]
    C = xp.shape[1]
    grid = xp.shape[2:]
    Do, Ho, Wo = g.shape[2:]
    span = _shift_span(grid, (Do, Ho, Wo))
    gw = np.zeros(tuple(wshape[2:]) + (Co, C), dtype=g.dtype)
    gpad = np.zeros((Co, Do, grid[1], grid[2]), dtype=g.dtype)
    for n in range(N):
        flat = xp[n].reshape(C, -1)
        gpad[:, :, :Ho, :Wo] = g[n]
        gflat = gpad.reshape(Co, -1)[:, :span]
        for (i, j, k), off in _tap_offsets(wshape[2:], grid):
            gw[i, j, k] += gflat @ flat[:, off:off + span].T
    return np.ascontiguousarray(gw.transpose(3, 4, 0, 1, 2))


def _forward(xp: np.ndarray, w: np.ndarray, stride: int, out_sp) -> np.ndarray:
    if _use_shift(stride, xp.shape[1]):
        return _forward_shift(xp, w, out_sp)
    N = xp.shape[0]
    Co = w.shape[0]
    Do, Ho, Wo = out_sp
    win = _windows(xp, w.shape[2:], stride, out_sp)
    wmat = w.reshape(Co, -1)
    out = np.empty((N, Co, Do, Ho, Wo), dtype=np.result_type(xp.dtype, w.dtype))
    step = _slab_depth(win)
    for n in range(N):
        for d0 in range(0, Do, step):
            d1 = min(Do, d0 + step)
            out[n, :, d0:d1] = (wmat @ _slab_cols(win, n, d0, d1)).reshape(Co, d1 - d0, Ho, Wo)
    return out


def _weight_grad(xp: np.ndarray, g: np.ndarray, wshape, stride: int) -> np.ndarray:
    if _use_shift(stride, xp.shape[1]):
        return _weight_grad_shift(xp, g, wshape)
    N, Co = g.shape[:2]
    out_sp = g.shape[2:]
    win = _windows(xp, wshape[2:], stride, out_sp)
    gw = np.zeros((Co, int(np.prod(wshape[1:]))), dtype=g.dtype)
    step = _slab_depth(win)
    Do = out_sp[0]
    for n in range(N):
        for d0 in range(0, Do, step):
            d1 = min(Do, d0 + step)
            gw += g[n, :, d0:d1].reshape(Co, -1) @ _slab_cols(win, n, d0, d1).T
    return gw.reshape(wshape)


def _input_grad_s1(g: np.ndarray, w: np.ndarray, pads, in_sp) -> np.ndarray:
    kd, kh, kw = w.shape[2:]
    gpads = tuple((k - 1 - lo, k - 1 - hi) for k, (lo, hi) in zip((kd, kh, kw), pads))
    # negative pad means the forward pass never touched those border voxels
    crop = tuple(slice(max(0, -lo), None) for lo, _ in gpads)
    extra = tuple((max(0, lo), max(0, hi)) for lo, hi in gpads)
    gp = np.pad(g, ((0, 0), (0, 0)) + extra)
    gp = gp[(slice(None), slice(None)) + crop]
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    out_sp = tuple(n - k + 1 for n, k in zip(gp.shape[2:], (kd, kh, kw)))
    gx = _forward(gp, wt, 1, out_sp)
    if out_sp != tuple(in_sp):
        gx = np.ascontiguousarray(gx[:, :, :in_sp[0], :in_sp[1], :in_sp[2]])
    return gx


def _input_grad_strided(g: np.ndarray, w: np.ndarray, stride: int, xp_shape) -> np.ndarray:
    N, Co, Do, Ho, Wo = g.shape
    C, kd, kh, kw = w.shape[1:]
    g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, Co)
    gcols = (g2 @ w.reshape(Co, -1)).reshape(N, Do, Ho, Wo, C, kd, kh, kw)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    s = stride
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                gxp[:, :, i:i + s * Do:s, j:j + s * Ho:s, k:k + s * Wo:s] += \
                    gcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
    return gxp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,D,H,W] with ``weight`` [Co,C,kd,kh,kw].

    ``padding`` is an int or three per-axis entries, each an int or a
    ``(lo, hi)`` pair for asymmetric zero padding.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"conv3d stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: bias {bias.shape} vs {weight.shape[0]} output channels")
    pads = _normalize_padding(padding)
    out_sp = conv3d_output_shape(x.shape[2:], weight.shape[2:], stride, pads)

    padded = any(lo or hi for lo, hi in pads)
    xp = np.pad(x.data, ((0, 0), (0, 0)) + pads) if padded else x.data
    w = weight.data
    out = _forward(xp, w, stride, out_sp)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    in_sp = x.shape[2:]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            if stride == 1:
                gx = _input_grad_s1(g, w, pads, in_sp)
            else:
                gxp = _input_grad_strided(g, w, stride, xp.shape)
                sl = (slice(None), slice(None)) + tuple(
                    slice(lo, lo + n) for (lo, _), n in zip(pads, in_sp)
                )
                gx = np.ascontiguousarray(gxp[sl])
        if weight.requires_grad:
            gw = _weight_grad(xp, g, w.shape, stride)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward)
