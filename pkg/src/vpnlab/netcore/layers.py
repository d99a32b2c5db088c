"""
Convolution and fully-connected layers.

Stride-1 convolutions zero-pad to keep the spatial size ("same"); strided
convolutions use no padding ("valid"). Transposed convolutions invert that
rule so a Deconv(K, S) undoes a Conv(K, S) shape-wise.
"""

import numpy as np
from numpy.typing import ArrayLike

from vpnlab.errors import ConfigurationError, InputError
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import Array, Tensor, record, reshape


def conv_padding(kernel: int, stride: int) -> tuple[int, int]:
    if stride == 1:
        low = (kernel - 1) // 2
        return low, kernel - 1 - low
    return 0, 0


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    if stride == 1:
        return size
    if size < kernel:
        raise ConfigurationError(f"kernel {kernel} does not fit input of size {size}")
    return (size - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int) -> int:
    if stride == 1:
        return size
    return (size - 1) * stride + kernel


def _im2col(x: Array, kernel: int, stride: int) -> tuple[Array, int, int]:
    """(N, C, H, W) -> (N, Ho*Wo, C*K*K) patches under the padding rule."""
    n, c, h, w = x.shape
    low, high = conv_padding(kernel, stride)
    if low or high:
        x = np.pad(x, ((0, 0), (0, 0), (low, high), (low, high)))
    out_h = conv_output_size(h, kernel, stride)
    out_w = conv_output_size(w, kernel, stride)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * kernel * kernel)
    return cols, out_h, out_w


def _col2im(dcols: Array, x_shape: tuple[int, ...], kernel: int, stride: int) -> Array:
    n, c, h, w = x_shape
    low, high = conv_padding(kernel, stride)
    out_h = conv_output_size(h, kernel, stride)
    out_w = conv_output_size(w, kernel, stride)
    patches = dcols.reshape(n, out_h, out_w, c, kernel, kernel)
    padded = np.zeros((n, c, h + low + high, w + low + high), dtype=dcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            padded[
                :, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
            ] += patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return padded[:, :, low : low + h, low : low + w]


def _check_conv(x: Tensor, in_channels: int, kernel: int, stride: int, op: str) -> None:
    if x.ndim != 4:  # noqa: PLR2004
        raise ConfigurationError(f"{op}: expected (N, C, H, W) input, got {x.shape}")
    if x.shape[1] != in_channels:
        raise ConfigurationError(
            f"{op}: input has {x.shape[1]} channels, weights expect {in_channels}"
        )
    for size in x.shape[2:]:
        conv_output_size(size, kernel, stride)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:  # noqa: PLR2004
        return reshape(x, (1, *x.shape)), True
    return x, False


def conv2d_backward(
    grad: Array, x: Array, weights: Array, stride: int
) -> tuple[Array, Array, Array]:
    filters, _, kernel, _ = weights.shape
    cols, _, _ = _im2col(x, kernel, stride)
    grad_mat = grad.reshape(grad.shape[0], filters, -1).transpose(0, 2, 1)
    dweights = np.einsum("npf,npk->fk", grad_mat, cols).reshape(weights.shape)
    dbias = grad.sum(axis=(0, 2, 3))
    dcols = grad_mat @ weights.reshape(filters, -1)
    return _col2im(dcols, x.shape, kernel, stride), dweights, dbias


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of (N, C, H, W) or (C, H, W) input with (F, C, K, K) weights."""
    x, squeeze = _batched(x)
    filters, in_channels, kernel, _ = weights.shape
    _check_conv(x, in_channels, kernel, stride, "conv2d")
    if bias.shape != (filters,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({filters},)")
    cols, out_h, out_w = _im2col(x.data, kernel, stride)
    out = cols @ weights.data.reshape(filters, -1).T
    out = out.transpose(0, 2, 1).reshape(x.shape[0], filters, out_h, out_w)
    out = out + bias.data[None, :, None, None]
    y = record(
        out,
        (x, weights, bias),
        lambda g: conv2d_backward(g, x.data, weights.data, stride),
        "conv2d",
    )
    return reshape(y, y.shape[1:]) if squeeze else y


def _option_index(options: ArrayLike, batch: int, bank_size: int) -> Array:
    index = np.asarray(options, dtype=np.intp)
    if index.ndim == 0:
        index = np.full(batch, int(index), dtype=np.intp)
    if index.shape != (batch,):
        raise InputError(f"expected {batch} options, got shape {index.shape}")
    if np.any(index < 0) or np.any(index >= bank_size):
        raise InputError(f"option index out of range for a bank of {bank_size}")
    return index


def option_conv2d_backward(
    grad: Array, x: Array, bank: Array, index: Array, stride: int
) -> tuple[Array, Array, Array]:
    _, filters, _, kernel, _ = bank.shape
    cols, _, _ = _im2col(x, kernel, stride)
    grad_mat = grad.reshape(grad.shape[0], filters, -1)
    selected = bank[index].reshape(len(index), filters, -1)
    dbank = np.zeros_like(bank)
    np.add.at(dbank, index, np.einsum("nfp,npk->nfk", grad_mat, cols).reshape(-1, *bank.shape[1:]))
    dbias = np.zeros((bank.shape[0], filters), dtype=grad.dtype)
    np.add.at(dbias, index, grad.sum(axis=(2, 3)))
    dcols = np.einsum("nfp,nfk->npk", grad_mat, selected)
    return _col2im(dcols, x.shape, kernel, stride), dbank, dbias


def option_conv2d(
    x: Tensor, bank: Tensor, bias_bank: Tensor, options: ArrayLike, stride: int = 1
) -> Tensor:
    """
    conv2d whose weights are picked per sample from an (O, F, C, K, K) bank.
    Only the selected slices receive gradient.
    """
    x, squeeze = _batched(x)
    bank_size, filters, in_channels, kernel, _ = bank.shape
    _check_conv(x, in_channels, kernel, stride, "option_conv2d")
    if bias_bank.shape != (bank_size, filters):
        raise ConfigurationError(
            f"option_conv2d: bias bank shape {bias_bank.shape} != ({bank_size}, {filters})"
        )
    index = _option_index(options, x.shape[0], bank_size)
    cols, out_h, out_w = _im2col(x.data, kernel, stride)
    selected = bank.data[index].reshape(len(index), filters, -1)
    out = np.einsum("npk,nfk->nfp", cols, selected).reshape(x.shape[0], filters, out_h, out_w)
    out = out + bias_bank.data[index][:, :, None, None]
    y = record(
        out,
        (x, bank, bias_bank),
        lambda g: option_conv2d_backward(g, x.data, bank.data, index, stride),
        "option_conv2d",
    )
    return reshape(y, y.shape[1:]) if squeeze else y


def conv_transpose2d_backward(
    grad: Array, x: Array, weights: Array, stride: int
) -> tuple[Array, Array, Array]:
    n, in_channels, h, w = x.shape
    _, filters, kernel, _ = weights.shape
    full_h = (h - 1) * stride + kernel
    full_w = (w - 1) * stride + kernel
    low, _ = conv_padding(kernel, stride)
    full = np.zeros((n, filters, full_h, full_w), dtype=grad.dtype)
    full[:, :, low : low + grad.shape[2], low : low + grad.shape[3]] = grad
    dcontrib = np.empty((n, h, w, filters, kernel, kernel), dtype=grad.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dcontrib[:, :, :, :, i, j] = full[
                :, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride
            ].transpose(0, 2, 3, 1)
    dcontrib = dcontrib.reshape(n * h * w, -1)
    x_mat = x.transpose(0, 2, 3, 1).reshape(n * h * w, in_channels)
    dx = (dcontrib @ weights.reshape(in_channels, -1).T).reshape(n, h, w, in_channels)
    dweights = (x_mat.T @ dcontrib).reshape(weights.shape)
    return dx.transpose(0, 3, 1, 2), dweights, grad.sum(axis=(0, 2, 3))


def conv_transpose2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution with (C_in, F, K, K) weights."""
    x, squeeze = _batched(x)
    in_channels, filters, kernel, _ = weights.shape
    if x.ndim != 4 or x.shape[1] != in_channels:  # noqa: PLR2004
        raise ConfigurationError(
            f"conv_transpose2d: input {x.shape} does not match weights {weights.shape}"
        )
    if bias.shape != (filters,):
        raise ConfigurationError(f"conv_transpose2d: bias shape {bias.shape} != ({filters},)")
    n, _, h, w = x.shape
    full_h = (h - 1) * stride + kernel
    full_w = (w - 1) * stride + kernel
    x_mat = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, in_channels)
    contrib = (x_mat @ weights.data.reshape(in_channels, -1)).reshape(n, h, w, filters, kernel, kernel)
    full = np.zeros((n, filters, full_h, full_w), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            full[
                :, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride
            ] += contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    low, _ = conv_padding(kernel, stride)
    out_h = deconv_output_size(h, kernel, stride)
    out_w = deconv_output_size(w, kernel, stride)
    out = full[:, :, low : low + out_h, low : low + out_w] + bias.data[None, :, None, None]
    y = record(
        np.ascontiguousarray(out),
        (x, weights, bias),
        lambda g: conv_transpose2d_backward(g, x.data, weights.data, stride),
        "conv_transpose2d",
    )
    return reshape(y, y.shape[1:]) if squeeze else y


def fully_connected_backward(
    grad: Array, x: Array, weights: Array
) -> tuple[Array, Array, Array]:
    return grad @ weights.T, x.T @ grad, grad.sum(axis=0)


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map of (N, D) input with (D, M) weights; (D,) input gives (M,)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:  # noqa: PLR2004
        raise ConfigurationError(
            f"fully_connected: input {x.shape} does not match weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ConfigurationError(
            f"fully_connected: bias shape {bias.shape} != ({weights.shape[1]},)"
        )
    y = record(
        x.data @ weights.data + bias.data,
        (x, weights, bias),
        lambda g: fully_connected_backward(g, x.data, weights.data),
        "fully_connected",
    )
    return reshape(y, (y.shape[1],)) if squeeze else y


class Conv2d:
    def __init__(  # noqa: PLR0913
        self,
        store: ParamStore,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.kernel_size = kernel_size
        self.stride = stride
        self.weight = store.add(
            f"{name}.w",
            (out_channels, in_channels, kernel_size, kernel_size),
            fan_in=in_channels * kernel_size * kernel_size,
            rng=rng,
        )
        self.bias = store.add(f"{name}.b", (out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel_size, self.stride)


class OptionConv2d:
    def __init__(  # noqa: PLR0913
        self,
        store: ParamStore,
        name: str,
        n_options: int,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.stride = stride
        self.weight = store.add(
            f"{name}.w",
            (n_options, out_channels, in_channels, kernel_size, kernel_size),
            fan_in=in_channels * kernel_size * kernel_size,
            rng=rng,
        )
        self.bias = store.add(f"{name}.b", (n_options, out_channels))

    def __call__(self, x: Tensor, options: ArrayLike) -> Tensor:
        return option_conv2d(x, self.weight, self.bias, options, self.stride)


class ConvTranspose2d:
    def __init__(  # noqa: PLR0913
        self,
        store: ParamStore,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.stride = stride
        self.weight = store.add(
            f"{name}.w",
            (in_channels, out_channels, kernel_size, kernel_size),
            fan_in=in_channels * kernel_size * kernel_size,
            rng=rng,
        )
        self.bias = store.add(f"{name}.b", (out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


class Linear:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.weight = store.add(
            f"{name}.w", (in_features, out_features), fan_in=in_features, rng=rng
        )
        self.bias = store.add(f"{name}.b", (out_features,))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)
