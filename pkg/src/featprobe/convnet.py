"""Forward-only CNN feature extraction for the five small audio architectures.

Each network is conv1 -> bn1 -> relu -> pool1 -> conv2 -> bn2 -> relu -> pool2
-> conv3 -> bn3 -> relu, and only differs in the convolution used. The fully
connected head is never evaluated. Weights come either from a seeded
uniform fan-in initialization (untrained studies) or from an FTB bundle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensorio import TensorBundle

TAPS = ("conv1", "pool1", "conv2", "pool2", "conv3")
ARCHITECTURES = ("Regular", "Deformable", "Dilated", "OneDF", "OneDT")
_ALIASES = {"1dF": "OneDF", "1dT": "OneDT", "1df": "OneDF", "1dt": "OneDT"}
BN_EPS = 1e-5


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | deform | bn | pool
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    bias: bool = True
    # deformable only: offset-predicting conv
    offset_kernel: tuple[int, int] = (3, 3)
    offset_padding: tuple[int, int] = (1, 1)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.kind == "bn":
            return h, w
        if self.kind == "deform":
            (kh, kw), (sh, sw), (ph, pw) = self.offset_kernel, self.stride, self.offset_padding
            return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (ph, pw), (dh, dw) = self.padding, self.dilation
        return (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1, (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1


@dataclass(frozen=True)
class ArchitectureSpec:
    id: str
    layers: tuple[LayerSpec, ...]
    input_geometry: tuple[int, int, int]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def parameter_table(self) -> dict[str, tuple[int, ...]]:
        """Tensor name -> dims for every stored parameter, in init order."""
        table: dict[str, tuple[int, ...]] = {}
        for l in self.layers:
            if l.kind in ("conv", "deform"):
                kh, kw = l.kernel
                table[f"{l.name}.w"] = (l.out_channels, l.in_channels, kh, kw)
                if l.bias:
                    table[f"{l.name}.b"] = (l.out_channels,)
                if l.kind == "deform":
                    okh, okw = l.offset_kernel
                    table[f"{l.name}.p.w"] = (2 * kh * kw, l.in_channels, okh, okw)
                    table[f"{l.name}.p.b"] = (2 * kh * kw,)
            elif l.kind == "bn":
                for p in ("gamma", "beta", "mean", "var"):
                    table[f"{l.name}.{p}"] = (l.out_channels,)
        return table

    def trainable_parameter_count(self) -> int:
        """Learned parameters of the convolutional stack (BN running stats excluded)."""
        return sum(
            int(np.prod(dims)) for name, dims in self.parameter_table().items()
            if not name.endswith((".mean", ".var"))
        )

    def tap_shapes(self) -> dict[str, tuple[int, int, int]]:
        _, h, w = self.input_geometry
        channels = 1
        shapes = {}
        for l in self.layers:
            h, w = l.out_hw(h, w)
            if l.kind in ("conv", "deform"):
                channels = l.out_channels
            if l.name in TAPS:
                shapes[l.name] = (channels, h, w)
        return shapes


def _conv(name, cin, cout, k, s=1, p=0, d=1, bias=True):
    return LayerSpec(name, "conv", cin, cout, _pair(k), _pair(s), _pair(p), _pair(d), bias)


def _bn(name, c):
    return LayerSpec(name, "bn", c, c)


def _pool(name, k):
    return LayerSpec(name, "pool", kernel=_pair(k), stride=_pair(k))


def canonical_id(arch_id: str) -> str:
    arch_id = _ALIASES.get(arch_id, arch_id)
    if arch_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_id!r}; choose from {ARCHITECTURES}")
    return arch_id


def architecture(arch_id: str, frames: int = 128, n_mels: int = 128) -> ArchitectureSpec:
    """Layer listing for one of the five networks on a (1, n_mels, frames) input.

    The convolution stack is identical for the 128x128 and 128x176 geometries;
    only the (unused) classifier head differs.
    """
    arch_id = canonical_id(arch_id)
    if arch_id == "Regular":
        convs = [_conv("conv1", 1, 10, 5), _conv("conv2", 10, 20, 5, 3, 3),
                 _conv("conv3", 20, 30, 5, 2)]
        pools = [(2, 2), (2, 2)]
    elif arch_id == "Deformable":
        deform = LayerSpec("conv3", "deform", 20, 30, (5, 5), (2, 2), (0, 0), (1, 1), bias=False)
        convs = [_conv("conv1", 1, 10, 5), _conv("conv2", 10, 20, 5, 3, 3), deform]
        pools = [(2, 2), (2, 2)]
    elif arch_id == "Dilated":
        convs = [_conv("conv1", 1, 10, 5, 1, 0, 3), _conv("conv2", 10, 20, 5, 2, 3, 2),
                 _conv("conv3", 20, 30, 5, 2, 1)]
        pools = [(2, 2), (2, 2)]
    elif arch_id == "OneDF":
        convs = [_conv("conv1", 1, 10, (5, 1), 1, 0, (3, 1)),
                 _conv("conv2", 10, 20, (5, 1), (2, 1), (3, 0), (2, 1)),
                 _conv("conv3", 20, 30, (5, 1), (2, 1), (1, 0))]
        pools = [(2, 1), (2, 1)]
    else:
        convs = [_conv("conv1", 1, 10, (1, 5), 1, 0, (1, 3)),
                 _conv("conv2", 10, 20, (1, 5), (1, 2), (0, 3), (1, 2)),
                 _conv("conv3", 20, 30, (1, 5), (1, 2), (0, 1))]
        pools = [(1, 2), (1, 2)]
    layers = [
        convs[0], _bn("bn1", 10), _pool("pool1", pools[0]),
        convs[1], _bn("bn2", 20), _pool("pool2", pools[1]),
        convs[2], _bn("bn3", 30),
    ]
    return ArchitectureSpec(arch_id, tuple(layers), (1, n_mels, frames))


# ---------------------------------------------------------------- primitive ops


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    return x, False


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> np.ndarray:
    """Cross-correlation with zero padding. ``x`` is [C,H,W] or [N,C,H,W]."""
    x, squeeze = _batched(x)
    weight = np.asarray(weight, dtype=np.float64)
    (sh, sw), (ph, pw), (dh, dw) = _pair(stride), _pair(padding), _pair(dilation)
    cout, cin, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} (dilation {dh},{dw}) larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dh, j * dw
            cols[:, :, i, j] = xp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw]
    # contract one example at a time so results do not depend on batch size
    out = np.stack([np.tensordot(cols[k], weight, axes=([0, 1, 2], [1, 2, 3])) for k in range(n)])
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def bilinear_sample(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample x [N,C,H,W] at fractional (rows, cols) [N,...]; outside reads 0.

    Returns [N,C,...].
    """
    n, c, h, w = x.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    nidx = np.arange(n).reshape((n,) + (1,) * (rows.ndim - 1))
    out = np.zeros((n,) + rows.shape[1:] + (c,))
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = x[nidx, :, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += np.where(valid, wr * wc, 0.0)[..., None] * vals
    return np.moveaxis(out, -1, 1)


def deform_offsets(x, offset_weight, offset_bias, stride=2, offset_padding=1) -> np.ndarray:
    return conv2d(x, offset_weight, offset_bias, stride=stride, padding=offset_padding)


def deform_conv2d(x, weight, offset_weight, offset_bias, stride=2, padding=0,
                  offset_padding=1, grid_origin=1, offsets=None) -> np.ndarray:
    """Deformable convolution (no bias) with learned per-location offsets.

    The offset conv yields 2K channels for a K-tap kernel: the first K are
    row displacements, the next K column displacements, taps in row-major
    order. Output (i, j) samples tap (a, b) at
    ``(grid_origin + stride*i + a - (kh-1)//2 + dy, grid_origin + stride*j + b - (kw-1)//2 + dx)``
    on the padded input. Passing ``offsets`` skips the offset conv.
    """
    x, squeeze = _batched(x)
    weight = np.asarray(weight, dtype=np.float64)
    cout, cin, kh, kw = weight.shape
    k = kh * kw
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    if offsets is None:
        offsets = deform_offsets(x, offset_weight, offset_bias, (sh, sw), offset_padding)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim == 3:
        offsets = offsets[None]
    if offsets.shape[0] != x.shape[0] or offsets.shape[1] != 2 * k:
        raise ValueError(f"offset tensor {offsets.shape} does not match {k}-tap kernel")
    ho, wo = offsets.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    tap_r = np.repeat(np.arange(kh) - (kh - 1) // 2, kw).astype(np.float64)
    tap_c = np.tile(np.arange(kw) - (kw - 1) // 2, kh).astype(np.float64)
    base_r = grid_origin + sh * np.arange(ho, dtype=np.float64)
    base_c = grid_origin + sw * np.arange(wo, dtype=np.float64)
    rows = base_r[None, None, :, None] + tap_r[None, :, None, None] + offsets[:, :k]
    cols = base_c[None, None, None, :] + tap_c[None, :, None, None] + offsets[:, k:]
    samples = bilinear_sample(xp, rows, cols)  # [N, C, K, ho, wo]
    wk = weight.reshape(cout, cin, k)
    out = np.stack([np.tensordot(s, wk, axes=([0, 1], [1, 2])) for s in samples])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def batchnorm_infer(x, gamma, beta, mean, var, eps=BN_EPS) -> np.ndarray:
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("batchnorm running variance must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    shape = (-1, 1, 1)
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    return (x - np.asarray(mean, dtype=np.float64).reshape(shape)) * scale.reshape(shape) \
        + np.asarray(beta, dtype=np.float64).reshape(shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def maxpool2d(x, kernel=2, stride=None) -> np.ndarray:
    """Max pooling, floor mode: trailing rows/cols that do not fill a window are dropped."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    out = None
    for i in range(kh):
        for j in range(kw):
            win = x[..., i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            out = win.copy() if out is None else np.maximum(out, win)
    return out


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class InitConfig:
    seed: int = 0
    scheme: str = "uniform_fan_in"
    zero_offset_weights: bool = False


def init_weights(arch: ArchitectureSpec, cfg: InitConfig = InitConfig()) -> TensorBundle:
    """Untrained weights: every conv weight/bias ~ U(-b, b), b = 1/sqrt(Cin*kh*kw);
    batchnorm at identity (gamma 1, beta 0, mean 0, var 1)."""
    if cfg.scheme != "uniform_fan_in":
        raise ValueError(f"unknown init scheme {cfg.scheme!r}")
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    table = arch.parameter_table()
    for name, dims in table.items():
        base, kind = name.rsplit(".", 1)
        if kind in ("w", "b"):
            wdims = table[f"{base}.w"]
            bound = 1.0 / np.sqrt(wdims[1] * wdims[2] * wdims[3])
            vals = rng.uniform(-bound, bound, size=dims)
            if cfg.zero_offset_weights and name.endswith(".p.w"):
                vals = np.zeros(dims)
        elif kind in ("gamma", "var"):
            vals = np.ones(dims)
        else:
            vals = np.zeros(dims)
        arrays[name] = vals.astype(np.float32)
    meta = {"architecture": arch.id, "seed": str(cfg.seed), "trained": "false",
            "init": cfg.scheme}
    return TensorBundle.from_arrays(arrays, meta)


def check_weights(arch: ArchitectureSpec, weights: TensorBundle) -> None:
    table = arch.parameter_table()
    names = weights.names()
    if set(names) != set(table):
        missing = sorted(set(table) - set(names))
        extra = sorted(set(names) - set(table))
        raise ValueError(f"{arch.id} weights mismatch: missing {missing}, unexpected {extra}")
    for name, dims in table.items():
        if weights.entries[name].dims != dims:
            raise ValueError(f"{name}: dims {weights.entries[name].dims} != expected {dims}")
    tagged = weights.meta.get("architecture")
    if tagged is not None and canonical_id(tagged) != arch.id:
        raise ValueError(f"bundle is tagged {tagged!r}, not {arch.id!r}")


# ---------------------------------------------------------------- extraction


@dataclass
class ForwardOptions:
    activation: str = "relu"  # relu | none
    tap_stage: str = "post_activation"  # post_activation | post_bn | pre_bn
    chunk: int = 32


def _apply_layer(layer: LayerSpec, x: np.ndarray, wts: TensorBundle) -> np.ndarray:
    if layer.kind == "conv":
        b = wts[f"{layer.name}.b"] if layer.bias else None
        return conv2d(x, wts[f"{layer.name}.w"], b, layer.stride, layer.padding, layer.dilation)
    if layer.kind == "deform":
        return deform_conv2d(x, wts[f"{layer.name}.w"], wts[f"{layer.name}.p.w"],
                             wts[f"{layer.name}.p.b"], layer.stride, layer.padding,
                             layer.offset_padding)
    if layer.kind == "bn":
        n = layer.name
        return batchnorm_infer(x, wts[f"{n}.gamma"], wts[f"{n}.beta"], wts[f"{n}.mean"], wts[f"{n}.var"])
    if layer.kind == "pool":
        return maxpool2d(x, layer.kernel, layer.stride)
    raise ValueError(layer.kind)


def forward_extract(arch: ArchitectureSpec, weights: TensorBundle, spectrograms,
                    taps: Iterable[str] = TAPS, options: ForwardOptions | None = None
                    ) -> dict[str, np.ndarray]:
    """Frozen forward pass; returns tap -> [N, C, H, W] activations.

    ``spectrograms`` is one [H, W] dB spectrogram or a stack [N, H, W].
    """
    opts = options or ForwardOptions()
    taps = list(taps)
    for t in taps:
        if t not in TAPS:
            raise ValueError(f"unknown tap {t!r}")
    check_weights(arch, weights)
    specs = np.asarray(spectrograms, dtype=np.float64)
    if specs.ndim == 2:
        specs = specs[None]
    if specs.shape[1:] != arch.input_geometry[1:]:
        raise ValueError(f"spectrogram shape {specs.shape[1:]} != {arch.id} input {arch.input_geometry[1:]}")
    last = max(TAPS.index(t) for t in taps)
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in taps}
    for start in range(0, specs.shape[0], opts.chunk):
        x = specs[start : start + opts.chunk, None]
        for layer in arch.layers:
            x = _apply_layer(layer, x, weights)
            recorded = []
            if layer.kind in ("conv", "deform"):
                if opts.tap_stage == "pre_bn":
                    recorded.append((layer.name, x))
            elif layer.kind == "bn":
                conv_name = "conv" + layer.name[-1]
                if opts.tap_stage == "post_bn":
                    recorded.append((conv_name, x))
                if opts.activation == "relu":
                    x = relu(x)
                if opts.tap_stage == "post_activation":
                    recorded.append((conv_name, x))
            else:
                recorded.append((layer.name, x))
            for name, val in recorded:
                if name in chunks:
                    chunks[name].append(val)
            if any(TAPS.index(name) == last for name, _ in recorded):
                break
    return {t: np.concatenate(v) for t, v in chunks.items()}


def flatten_tap(tap: str, acts: np.ndarray) -> np.ndarray:
    """Rows for decoding/similarity: conv1/pool1 are channel-averaged then
    flattened over H*W; deeper taps flatten C*H*W."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim == 3:
        acts = acts[None]
    if tap in ("conv1", "pool1"):
        acts = acts.mean(axis=1)
    return acts.reshape(acts.shape[0], -1)
