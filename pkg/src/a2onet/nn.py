"""Neural building blocks on top of the tensor core.

Spatial ops (conv, pooling, bilinear resize/sampling) plus a small Module
system: any attribute that is a grad-requiring Tensor is a parameter, any
attribute that is a Module (or list of Modules) is a child. `ParamSet`
flattens a module tree into an ordered name -> Tensor mapping with
lexicographic iteration, which is the unit the optimizer and checkpoint
code work with.

All convolutions use cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, _check_finite, _unbroadcast

__all__ = [
    "conv2d",
    "avg_pool2d",
    "resize_bilinear",
    "bilinear_sample",
    "reflect_pad2d",
    "Module",
    "Conv2d",
    "Linear",
    "ParamSet",
    "seeded_rng",
]


def seeded_rng(*parts) -> np.random.Generator:
    """Deterministic Generator keyed by an arbitrary tuple of strings/ints.

    Each distinct key gets an independent stream, so adding or removing one
    consumer does not shift the draws of any other.
    """
    ints = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            ints.append(int(p) & 0xFFFFFFFF)
        else:
            h = hashlib.sha256(str(p).encode()).digest()
            ints.append(int.from_bytes(h[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(ints))


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, OH, OW, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [N,C,H,W] with [O,C,kh,kw]; zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} does not fit padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wm = weight.data.reshape(o, c * kh * kw)
    out_data = np.matmul(wm, cols)  # [N, O, OH*OW]
    if bias is not None:
        out_data += bias.data[:, None]
    out = Tensor(out_data.reshape(n, o, oh, ow))
    _check_finite(out.data, "conv2d")

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols):
        gm = g.reshape(n, o, oh * ow)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=(0, 2)))
        if weight.requires_grad:
            gflat = gm.transpose(1, 0, 2).reshape(o, n * oh * ow)
            cflat = cols.transpose(1, 0, 2).reshape(c * kh * kw, n * oh * ow)
            weight._accumulate((gflat @ cflat.T).reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride,
                        j:j + stride * ow:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return out._record(parents, bwd)


def reflect_pad2d(x: Tensor, pad: int) -> Tensor:
    """Reflect-pad the last two axes by `pad` (edge not repeated)."""
    spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor(np.pad(x.data, spec, mode="reflect"))
    h, w = x.shape[-2], x.shape[-1]

    def bwd(g, a=x):
        # fold reflected borders back onto their source rows/cols
        core = np.zeros(a.data.shape, dtype=g.dtype)
        idx_h = np.concatenate([np.arange(pad, 0, -1),
                                np.arange(h), np.arange(h - 2, h - 2 - pad, -1)])
        idx_w = np.concatenate([np.arange(pad, 0, -1),
                                np.arange(w), np.arange(w - 2, w - 2 - pad, -1)])
        flat = g.reshape(-1, g.shape[-2], g.shape[-1])
        tgt = core.reshape(-1, h, w)
        for s in range(flat.shape[0]):
            np.add.at(tgt[s], (idx_h[:, None], idx_w[None, :]), flat[s])
        a._accumulate(core)

    return out._record((x,), bwd)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    oh, ow = h // k, w // k
    view = x.data.reshape(*lead, oh, k, ow, k)
    out = Tensor(view.mean(axis=(-3, -1)))

    def bwd(g, a=x):
        gg = g[..., :, None, :, None] / (k * k)
        a._accumulate(np.broadcast_to(gg, (*lead, oh, k, ow, k)).reshape(a.data.shape))

    return out._record((x,), bwd)


_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear weights (pixel-center mapping)."""
    key = (n_in, n_out, np.dtype(dtype).name)
    mat = _INTERP_CACHE.get(key)
    if mat is None:
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = pos - i0
        mat = np.zeros((n_out, n_in), dtype=dtype)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, i0), (1.0 - w1).astype(dtype))
        np.add.at(mat, (rows, i1), w1.astype(dtype))
        _INTERP_CACHE[key] = mat
    return mat


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (pixel-center alignment)."""
    *lead, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x * 1.0
    ah = _interp_matrix(h, out_h, x.data.dtype)
    aw = _interp_matrix(w, out_w, x.data.dtype)
    tmp = np.tensordot(x.data, ah, axes=([-2], [1]))      # [..., W, OH]
    out_data = np.tensordot(np.moveaxis(tmp, -1, -2), aw, axes=([-1], [1]))
    out = Tensor(out_data)

    def bwd(g, a=x):
        t = np.tensordot(g, aw, axes=([-1], [0]))          # [..., OH, W]
        gx = np.tensordot(np.moveaxis(t, -1, -2), ah, axes=([-1], [0]))
        a._accumulate(np.moveaxis(gx, -1, -2))

    return out._record((x,), bwd)


def bilinear_sample(feature: Tensor, points: Tensor) -> Tensor:
    """Sample [C,H,W] features at Q (x, y) points in [0,1]^2 -> [Q,C].

    Points map to continuous pixel coordinates p * (size - 1); values
    outside the unit square clamp to the border. Differentiable in both the
    feature map and the point coordinates.
    """
    c, h, w = feature.shape
    q = points.shape[0]
    px = np.clip(points.data[:, 0], 0.0, 1.0) * (w - 1)
    py = np.clip(points.data[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(feature.data.dtype)
    fy = (py - y0).astype(feature.data.dtype)

    fm = feature.data.reshape(c, h * w)
    f00 = fm[:, y0 * w + x0]  # [C,Q]
    f01 = fm[:, y0 * w + x1]
    f10 = fm[:, y1 * w + x0]
    f11 = fm[:, y1 * w + x1]
    top = f00 * (1 - fx) + f01 * fx
    bot = f10 * (1 - fx) + f11 * fx
    out = Tensor((top * (1 - fy) + bot * fy).T)  # [Q,C]
    _check_finite(out.data, "bilinear_sample")

    def bwd(g, feature=feature, points=points):
        gt = g.T  # [C,Q]
        if feature.requires_grad:
            buf = np.zeros((c, h * w), dtype=feature.data.dtype)
            np.add.at(buf, (slice(None), y0 * w + x0), gt * ((1 - fx) * (1 - fy)))
            np.add.at(buf, (slice(None), y0 * w + x1), gt * (fx * (1 - fy)))
            np.add.at(buf, (slice(None), y1 * w + x0), gt * ((1 - fx) * fy))
            np.add.at(buf, (slice(None), y1 * w + x1), gt * (fx * fy))
            feature._accumulate(buf.reshape(c, h, w))
        if points.requires_grad:
            dpx = ((f01 - f00) * (1 - fy) + (f11 - f10) * fy)  # [C,Q]
            dpy = ((f10 - f00) * (1 - fx) + (f11 - f01) * fx)
            gx = (gt * dpx).sum(axis=0) * (w - 1)
            gy = (gt * dpy).sum(axis=0) * (h - 1)
            inside_x = (points.data[:, 0] >= 0.0) & (points.data[:, 0] <= 1.0)
            inside_y = (points.data[:, 1] >= 0.0) & (points.data[:, 1] <= 1.0)
            points._accumulate(np.stack([gx * inside_x, gy * inside_y], axis=1))

    return out._record((feature, points), bwd)


# ---------------------------------------------------------------------------
# modules and parameters
# ---------------------------------------------------------------------------


class Module:
    """Base class; parameters and children are discovered from attributes."""

    def named_params(self, prefix: str = ""):
        for name in sorted(vars(self)):
            obj = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(obj, Tensor) and obj.requires_grad:
                yield full, obj
            elif isinstance(obj, Module):
                yield from obj.named_params(f"{full}.")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{full}.{i}.")

    def params(self) -> "ParamSet":
        return ParamSet(dict(self.named_params()))


class ParamSet:
    """Ordered name -> Tensor map; iteration is always lexicographic."""

    def __init__(self, entries: dict[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        if entries:
            for name in sorted(entries):
                self.add(name, entries[name])

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor
        # keep insertion order sorted so iteration stays lexicographic
        if list(self._entries) != sorted(self._entries):
            self._entries = {k: self._entries[k] for k in sorted(self._entries)}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._entries.values())


class Conv2d(Module):
    """3x3/1x1/kxk convolution layer with He-normal init and zero bias."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 zero_init: bool = False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = in_ch * k * k
        if zero_init:
            w = np.zeros((out_ch, in_ch, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias,
                      stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_f, out_f))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_f), size=(in_f, out_f))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias
