"""Neural-network layer kernels with hand-written backward passes.

Conventions
-----------
* A feature map is a numpy array of shape ``(channels, height, width)``;
  fully-connected activations are 1-D arrays.
* Every ``*_forward`` returns ``(output, cache)``; the cache holds exactly
  what the matching ``*_backward`` needs.  A cache is valid only for the
  forward call that produced it (parameter arrays are referenced, not
  copied).
* Kernels preserve the input dtype.  Training uses float32; gradient
  checking uses the same code paths on float64 arrays.
* Convolutions are lowered to GEMM via im2col; pooling and pyramid pooling
  route gradients through cached argmax positions, so a backward pass
  touches exactly one input cell per pooled output.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np


def _assert_finite(arr: np.ndarray, who: str) -> bool:
    # IEEE propagation makes the sum a cheap whole-array probe: any NaN/inf
    # in `arr` yields a non-finite sum.
    if not np.isfinite(arr.sum()):
        raise AssertionError(f"{who}: non-finite values in output")
    return True


def _im2col3(padded: np.ndarray) -> np.ndarray:
    """3x3 patch matrix of a zero-padded map: (C,H+2,W+2) -> (H*W, C*9)."""
    c, hp, wp = padded.shape
    h, w = hp - 2, wp - 2
    s0, s1, s2 = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded, shape=(c, 3, 3, h, w), strides=(s0, s1, s2, s1, s2), writeable=False
    )
    return windows.transpose(3, 4, 0, 1, 2).reshape(h * w, c * 9)


def _pad1(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    out[:, 1:-1, 1:-1] = x
    return out


class ConvCache(NamedTuple):
    cols: np.ndarray  # (H*W, C*9)
    w: np.ndarray
    in_shape: tuple[int, int, int]


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    x: (C,H,W); w: (O,C,3,3); b: (O,).  Returns y of shape (O,H,W).
    """
    if x.ndim != 3:
        raise ValueError(f"expected a (C,H,W) feature map, got shape {x.shape}")
    o, ci = w.shape[0], w.shape[1]
    if w.shape[2:] != (3, 3) or ci != x.shape[0]:
        raise ValueError(f"weight shape {w.shape} incompatible with input {x.shape}")
    if b.shape != (o,):
        raise ValueError(f"bias shape {b.shape} != ({o},)")
    c, h, wd = x.shape
    cols = _im2col3(_pad1(x))
    y = w.reshape(o, c * 9) @ cols.T
    y += b[:, None]
    y = y.reshape(o, h, wd)
    assert _assert_finite(y, "conv3x3")
    return y, ConvCache(cols, w, x.shape)


def conv3x3_backward(
    grad_out: np.ndarray, cache: ConvCache
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Gradients of conv3x3: returns (grad_x, (grad_w, grad_b))."""
    c, h, wd = cache.in_shape
    o = cache.w.shape[0]
    if grad_out.shape != (o, h, wd):
        raise ValueError(f"grad shape {grad_out.shape} does not match output ({o},{h},{wd})")
    gy = grad_out.reshape(o, h * wd)
    grad_b = gy.sum(axis=1)
    grad_w = (gy @ cache.cols).reshape(cache.w.shape)
    # grad_x is a full correlation of grad_out with the 180-degree-rotated
    # kernels, expressed as a second im2col GEMM.
    cols_g = _im2col3(_pad1(grad_out))
    w_flip = cache.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
    grad_x = (w_flip @ cols_g.T).reshape(c, h, wd)
    return grad_x, (grad_w, grad_b)


class ReluCache(NamedTuple):
    mask: np.ndarray


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, ReluCache]:
    """Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0."""
    y = np.maximum(x, 0)
    return y, ReluCache(x > 0)


def relu_backward(grad_out: np.ndarray, cache: ReluCache) -> np.ndarray:
    if grad_out.shape != cache.mask.shape:
        raise ValueError("grad shape does not match cached activation shape")
    return grad_out * cache.mask


class PoolCache(NamedTuple):
    argmax: np.ndarray  # (C, H//2, W//2) index into the 2x2 window, row-major
    in_shape: tuple[int, int, int]


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolCache]:
    """2x2 max pooling, stride 2; trailing odd row/column is dropped."""
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"input {h}x{w} too small for 2x2 pooling")
    h2, w2 = h // 2, w // 2
    win = (
        x[:, : 2 * h2, : 2 * w2]
        .reshape(c, h2, 2, w2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h2, w2, 4)
    )
    idx = win.argmax(axis=3)
    y = win.max(axis=3)
    return y, PoolCache(idx, x.shape)


def maxpool2_backward(grad_out: np.ndarray, cache: PoolCache) -> np.ndarray:
    c, h, w = cache.in_shape
    h2, w2 = h // 2, w // 2
    if grad_out.shape != (c, h2, w2):
        raise ValueError(f"grad shape {grad_out.shape} != ({c},{h2},{w2})")
    gwin = np.zeros((c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(gwin, cache.argmax[..., None], grad_out[..., None], axis=3)
    gx = np.zeros((c, h, w), dtype=grad_out.dtype)
    gx[:, : 2 * h2, : 2 * w2] = (
        gwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
    )
    return gx


class SppCache(NamedTuple):
    levels: tuple[int, ...]
    in_shape: tuple[int, int, int]
    # per level: ("fast", bin_h, bin_w, argmax (C,L,L)) when the map divides
    # evenly, else ("bins", [(r0, c0, region_w, argmax (C,)) ...]).
    per_level: tuple


def spp_forward(x: np.ndarray, levels: Sequence[int]) -> tuple[np.ndarray, SppCache]:
    """Spatial pyramid max pooling to a fixed-length vector.

    Level L splits the map into L x L bins with bin r spanning rows
    [floor(r*H/L), ceil((r+1)*H/L)) (bins may overlap, always cover the map,
    and are never empty).  Output ordering: level ascending, bin row-major,
    channel ascending; total length C * sum(L^2).
    """
    levels = tuple(levels)
    if not levels or any(not isinstance(l, int) or l < 1 for l in levels):
        raise ValueError(f"levels must be positive integers, got {levels}")
    if tuple(sorted(set(levels))) != levels:
        raise ValueError(f"levels must be strictly increasing, got {levels}")
    c, h, w = x.shape
    lmax = max(levels)
    if h < lmax or w < lmax:
        raise ValueError(f"map {h}x{w} smaller than finest pyramid level {lmax}")

    chunks = []
    per_level = []
    for lv in levels:
        if h % lv == 0 and w % lv == 0:
            bh, bw = h // lv, w // lv
            win = (
                x.reshape(c, lv, bh, lv, bw)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, lv, lv, bh * bw)
            )
            am = win.argmax(axis=3)
            vals = win.max(axis=3)  # (C, L, L)
            chunks.append(vals.transpose(1, 2, 0).ravel())
            per_level.append(("fast", bh, bw, am))
        else:
            bins = []
            for r in range(lv):
                r0, r1 = (r * h) // lv, -((-(r + 1) * h) // lv)
                for cc in range(lv):
                    c0, c1 = (cc * w) // lv, -((-(cc + 1) * w) // lv)
                    flat = x[:, r0:r1, c0:c1].reshape(c, -1)
                    am = flat.argmax(axis=1)
                    chunks.append(flat.max(axis=1))
                    bins.append((r0, c0, c1 - c0, am))
            per_level.append(("bins", bins))
    y = np.concatenate(chunks)
    return y, SppCache(levels, x.shape, tuple(per_level))


def spp_backward(grad_out: np.ndarray, cache: SppCache) -> np.ndarray:
    c, h, w = cache.in_shape
    total = c * sum(lv * lv for lv in cache.levels)
    if grad_out.shape != (total,):
        raise ValueError(f"grad length {grad_out.shape} != ({total},)")
    gx = np.zeros((c, h, w), dtype=grad_out.dtype)
    pos = 0
    for lv, info in zip(cache.levels, cache.per_level):
        if info[0] == "fast":
            _, bh, bw, am = info
            g = grad_out[pos : pos + lv * lv * c].reshape(lv, lv, c).transpose(2, 0, 1)
            base_r = np.arange(lv)[None, :, None] * bh
            base_c = np.arange(lv)[None, None, :] * bw
            rows = base_r + am // bw
            colsix = base_c + am % bw
            # one argmax per (channel, bin): targets are unique, += is safe
            gx[np.arange(c)[:, None, None], rows, colsix] += g
            pos += lv * lv * c
        else:
            for r0, c0, reg_w, am in info[1]:
                g = grad_out[pos : pos + c]
                gx[np.arange(c), r0 + am // reg_w, c0 + am % reg_w] += g
                pos += c
    return gx


class FcCache(NamedTuple):
    x: np.ndarray
    w: np.ndarray


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, FcCache]:
    """Fully connected layer on a flat vector: y = w @ x + b."""
    if x.ndim != 1:
        raise ValueError(f"expected a flat vector, got shape {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ValueError(f"shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    y = w @ x + b
    assert _assert_finite(y, "fc")
    return y, FcCache(x, w)


def fc_backward(
    grad_out: np.ndarray, cache: FcCache
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    if grad_out.shape != (cache.w.shape[0],):
        raise ValueError(f"grad shape {grad_out.shape} != ({cache.w.shape[0]},)")
    grad_w = np.outer(grad_out, cache.x)
    grad_x = cache.w.T @ grad_out
    return grad_x, (grad_w, grad_out)


class DropoutCache(NamedTuple):
    scaled_mask: np.ndarray | None  # None marks the identity (infer or p == 0)


def dropout_forward(
    x: np.ndarray, p: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, DropoutCache]:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in ``"infer"`` mode (and for p == 0), so inference never draws
    from the rng.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or p == 0.0:
        return x, DropoutCache(None)
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    scaled = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * scaled, DropoutCache(scaled)


def dropout_backward(grad_out: np.ndarray, cache: DropoutCache) -> np.ndarray:
    if cache.scaled_mask is None:
        return grad_out
    if grad_out.shape != cache.scaled_mask.shape:
        raise ValueError("grad shape does not match cached mask shape")
    return grad_out * cache.scaled_mask


class SigmoidCache(NamedTuple):
    y: np.ndarray


def sigmoid_forward(x: np.ndarray) -> tuple[np.ndarray, SigmoidCache]:
    """Numerically stable logistic function, output strictly inside (0, 1).

    The two exp branches never see a positive argument, and the result is
    clamped to [tiny, 1 - eps] of the working dtype so extreme logits cannot
    underflow to an exact 0 or round to an exact 1.
    """
    fi = np.finfo(x.dtype)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    np.clip(y, fi.tiny, 1.0 - fi.eps, out=y)
    return y, SigmoidCache(y)


def sigmoid_backward(grad_out: np.ndarray, cache: SigmoidCache) -> np.ndarray:
    y = cache.y
    if grad_out.shape != y.shape:
        raise ValueError("grad shape does not match cached output shape")
    return grad_out * y * (1.0 - y)


def softmax_forward(x: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over a flat vector; sums to 1 up to rounding."""
    if x.ndim != 1:
        raise ValueError(f"expected a flat vector, got shape {x.shape}")
    e = np.exp(x - x.max())
    return e / e.sum()


_BACKWARD = {
    "conv": (conv3x3_backward, ConvCache, True),
    "relu": (relu_backward, ReluCache, False),
    "maxpool": (maxpool2_backward, PoolCache, False),
    "spp": (spp_backward, SppCache, False),
    "fc": (fc_backward, FcCache, True),
    "dropout": (dropout_backward, DropoutCache, False),
    "sigmoid": (sigmoid_backward, SigmoidCache, False),
}


def layer_backward(kind: str, grad_out: np.ndarray, cache) -> tuple[np.ndarray, tuple | None]:
    """Dispatch a backward pass by layer kind.

    Returns ``(grad_input, grad_params)`` where grad_params is
    ``(grad_w, grad_b)`` for parameterized kinds and None otherwise.
    """
    try:
        fn, cache_type, has_params = _BACKWARD[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    if not isinstance(cache, cache_type):
        raise TypeError(f"stale or mismatched cache for {kind!r}: got {type(cache).__name__}")
    if has_params:
        return fn(grad_out, cache)
    return fn(grad_out, cache), None


def gradient_check(
    fun: Callable[[], float],
    tensors: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    *,
    epsilon: float = 1e-4,
    max_checks_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``fun`` recomputes the scalar loss from the current tensor values;
    ``tensors`` are perturbed in place (float64 required) and restored.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8); the
    maximum over all sampled coordinates is returned.  Large tensors are
    subsampled (``max_checks_per_tensor``) with the supplied rng.
    """
    if len(tensors) != len(grads):
        raise ValueError("tensors and grads must pair up")
    worst = 0.0
    for t, g in zip(tensors, grads):
        if t.dtype != np.float64:
            raise ValueError("gradient_check requires float64 tensors")
        if t.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {t.shape}")
        flat_t = t.reshape(-1)
        flat_g = g.reshape(-1)
        size = flat_t.size
        if max_checks_per_tensor is not None and size > max_checks_per_tensor:
            if rng is None:
                raise ValueError("subsampled gradient_check needs an rng")
            coords = rng.choice(size, size=max_checks_per_tensor, replace=False)
        else:
            coords = range(size)
        for i in coords:
            saved = flat_t[i]
            flat_t[i] = saved + epsilon
            f_plus = fun()
            flat_t[i] = saved - epsilon
            f_minus = fun()
            flat_t[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = flat_g[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
