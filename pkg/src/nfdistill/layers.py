"""Model building blocks shared by the teacher flow and the student zoo."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter

MIN_ABS_DET = 1e-8


class Layer:
    """Minimal parameter container; subclasses define named_params()."""

    def named_params(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def cast_(self, dtype) -> "Layer":
        for _, p in self.named_params():
            p.data = p.data.astype(dtype)
        return self

    def freeze_(self, requires_grad: bool = False) -> "Layer":
        for _, p in self.named_params():
            p.requires_grad = requires_grad
        return self


def _prefixed(prefix: str, layer: Layer) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{name}", p) for name, p in layer.named_params()]


class Conv1d(Layer):
    """1-D convolution with symmetric zero padding, kernel size odd.

    With weight_norm=True the stored parameters are the direction tensor v
    and per-output-channel gain g; the effective weight g * v / ||v|| is
    recomputed on every forward call (the fusion pass folds it away).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 1, dilation: int = 1,
                 bias: bool = True, weight_norm: bool = False, zero_init: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if kernel % 2 != 1:
            raise T.ShapeError(f"Conv1d kernel must be odd, got {kernel}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.dilation = dilation
        self.weight_norm = weight_norm and not zero_init
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel))
        else:
            rng = rng or np.random.default_rng()
            bound = 1.0 / math.sqrt(in_ch * kernel)
            w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel))
        if self.weight_norm:
            self.v = parameter(w, "v", dtype=dtype)
            norms = np.sqrt((w * w).sum(axis=(1, 2)))
            self.g = parameter(norms, "g", dtype=dtype)
            self.weight = None
        else:
            self.weight = parameter(w, "weight", dtype=dtype)
            self.v = None
            self.g = None
        self.bias = parameter(np.zeros(out_ch), "bias", dtype=dtype) if bias else None

    def effective_weight(self) -> Tensor:
        if not self.weight_norm:
            return self.weight
        norm = T.sqrt(T.tensor_sum(T.square(self.v), axis=(1, 2), keepdims=True))
        gain = T.reshape(self.g, (self.out_ch, 1, 1))
        return T.mul(self.v, T.div(gain, norm))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.effective_weight(), self.bias, dilation=self.dilation)

    __call__ = forward

    def named_params(self):
        out = []
        if self.weight_norm:
            out += [("v", self.v), ("g", self.g)]
        else:
            out.append(("weight", self.weight))
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class ActNorm(Layer):
    """Per-channel affine y = s * x + b with data-dependent initialization."""

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.s = parameter(np.ones((channels, 1)), "s", dtype=dtype)
        self.b = parameter(np.zeros((channels, 1)), "b", dtype=dtype)
        self.initialized = False

    def initialize_from(self, x: np.ndarray) -> None:
        """Set s, b so the init batch has per-channel mean 0 and variance 1."""
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        if np.any(std < 1e-6):
            ch = int(np.argmin(std))
            raise T.TensorError(f"actnorm init: channel {ch} has (near-)zero variance")
        self.s.data = (1.0 / std)[:, None].astype(self.s.dtype)
        self.b.data = (-mean / std)[:, None].astype(self.b.dtype)
        self.initialized = True

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y = T.add(T.mul(x, self.s), self.b)
        tlen = x.shape[2]
        logdet = T.mul(T.tensor_sum(T.log(T.absolute(self.s))), float(tlen))
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        if np.any(np.abs(self.s.data) < MIN_ABS_DET):
            raise T.TensorError("actnorm inverse: scale too close to zero")
        return T.div(T.sub(y, self.b), self.s)

    def named_params(self):
        return [("s", self.s), ("b", self.b)]


class Inv1x1(Layer):
    """Invertible channel-mixing 1x1 convolution, initialized orthogonal."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        self.channels = channels
        self.weight = parameter(q, "weight", dtype=dtype)
        self.cached_inverse: np.ndarray | None = None

    def _check_det(self) -> float:
        sign, logabs = np.linalg.slogdet(self.weight.data.astype(np.float64))
        if sign == 0 or logabs < math.log(MIN_ABS_DET):
            raise T.TensorError(
                f"inv1x1: |det W| = {0.0 if sign == 0 else math.exp(logabs):.3e} "
                f"below threshold {MIN_ABS_DET:g}"
            )
        return logabs

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check_det()
        y = T.matmul(self.weight, x)
        logdet = T.mul(T.slogdet_abs(self.weight), float(x.shape[2]))
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        if self.cached_inverse is not None:
            return T.matmul(Tensor(self.cached_inverse.astype(y.dtype)), y)
        return T.solve_channels(self.weight, y)

    def named_params(self):
        return [("weight", self.weight)]


class Affine1x1(Layer):
    """Channel-mixing affine map y = W x + b, the product of a fusion pass.

    Carries the combined log-det of the actnorm and 1x1 conv it replaced.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, dtype=np.float32):
        self.channels = weight.shape[0]
        self.weight = parameter(weight, "weight", dtype=dtype)
        self.bias = parameter(bias.reshape(-1, 1), "bias", dtype=dtype)
        self.cached_inverse: np.ndarray | None = None

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y = T.add(T.matmul(self.weight, x), self.bias)
        logdet = T.mul(T.slogdet_abs(self.weight), float(x.shape[2]))
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        shifted = T.sub(y, self.bias)
        if self.cached_inverse is not None:
            return T.matmul(Tensor(self.cached_inverse.astype(y.dtype)), shifted)
        return T.solve_channels(self.weight, shifted)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GatedResidualNet(Layer):
    """Non-causal dilated gated conv stack (residual + skip), conditioned.

    Layout per residual layer: dilated conv -> add conditioning projection ->
    tanh*sigmoid gate -> 1x1 conv producing residual and skip halves. Skips
    sum across layers and feed the exit 1x1 conv.
    """

    def __init__(self, in_ch: int, cond_ch: int, out_ch: int, width: int = 64,
                 layers: int = 4, kernel: int = 3, weight_norm: bool = True,
                 zero_exit: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.width = width
        self.layers = layers
        self.entry = Conv1d(in_ch, width, 1, weight_norm=weight_norm, rng=rng, dtype=dtype)
        self.in_layers: list[Conv1d] = []
        self.cond_layers: list[Conv1d] = []
        self.res_skip_layers: list[Conv1d] = []
        for l in range(layers):
            self.in_layers.append(Conv1d(width, 2 * width, kernel, dilation=2 ** l,
                                         weight_norm=weight_norm, rng=rng, dtype=dtype))
            self.cond_layers.append(Conv1d(cond_ch, 2 * width, 1,
                                           weight_norm=weight_norm, rng=rng, dtype=dtype))
            rs_out = 2 * width if l < layers - 1 else width
            self.res_skip_layers.append(Conv1d(width, rs_out, 1,
                                               weight_norm=weight_norm, rng=rng, dtype=dtype))
        self.exit = Conv1d(width, out_ch, 1, zero_init=zero_exit, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.entry(x)
        skip = None
        for l in range(self.layers):
            a = T.add(self.in_layers[l](h), self.cond_layers[l](cond))
            filt, gate = T.split_channels(a, (self.width, self.width))
            act = T.mul(T.tanh(filt), T.sigmoid(gate))
            rs = self.res_skip_layers[l](act)
            if l < self.layers - 1:
                res, sk = T.split_channels(rs, (self.width, self.width))
                h = T.add(h, res)
            else:
                sk = rs
            skip = sk if skip is None else T.add(skip, sk)
        return self.exit(skip)

    __call__ = forward

    def named_params(self):
        out = _prefixed("entry", self.entry)
        for l in range(self.layers):
            out += _prefixed(f"in.{l}", self.in_layers[l])
            out += _prefixed(f"cond.{l}", self.cond_layers[l])
            out += _prefixed(f"res_skip.{l}", self.res_skip_layers[l])
        out += _prefixed("exit", self.exit)
        return out

    def all_convs(self) -> list[tuple[str, Conv1d]]:
        convs = [("entry", self.entry)]
        for l in range(self.layers):
            convs += [(f"in.{l}", self.in_layers[l]), (f"cond.{l}", self.cond_layers[l]),
                      (f"res_skip.{l}", self.res_skip_layers[l])]
        convs.append(("exit", self.exit))
        return convs


class AffineCoupling(Layer):
    """Affine coupling: the lower channel half conditions the upper half.

    Forward: y_b = exp(log_s) * x_b + t with (log_s, t) = net(x_a, cond).
    The exit conv of the conditioner is zero-initialized, so a fresh layer
    is the identity map with log-det 0.
    """

    def __init__(self, channels: int, cond_ch: int, width: int = 64, layers: int = 4,
                 kernel: int = 3, weight_norm: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.channels = channels
        self.half_a = (channels + 1) // 2
        self.half_b = channels - self.half_a
        if self.half_b < 1:
            raise T.ShapeError(f"coupling needs >= 2 channels, got {channels}")
        self.net = GatedResidualNet(self.half_a, cond_ch, 2 * self.half_b, width=width,
                                    layers=layers, kernel=kernel, weight_norm=weight_norm,
                                    zero_exit=True, rng=rng, dtype=dtype)

    def _scales(self, xa: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        log_s, t = T.split_channels(self.net(xa, cond), (self.half_b, self.half_b))
        return log_s, t

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        xa, xb = T.split_channels(x, (self.half_a, self.half_b))
        log_s, t = self._scales(xa, cond)
        yb = T.add(T.mul(xb, T.exp(log_s)), t)
        y = T.concat((xa, yb))
        logdet = T.tensor_sum(log_s, axis=(1, 2))
        return y, logdet

    def inverse(self, y: Tensor, cond: Tensor) -> Tensor:
        ya, yb = T.split_channels(y, (self.half_a, self.half_b))
        log_s, t = self._scales(ya, cond)
        xb = T.mul(T.sub(yb, t), T.exp(T.mul(log_s, -1.0)))
        return T.concat((ya, xb))

    def named_params(self):
        return _prefixed("net", self.net)
