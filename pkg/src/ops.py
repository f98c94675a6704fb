"""Дифференцируемые операции: матрицы, свертки, нормировки, внимание."""
import math
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .exceptions import ConfigError, TensorShapeError, UsageError
from .tensor import Tensor

IntPair = Union[int, Tuple[int, int]]


def _pair(value: IntPair) -> Tuple[int, int]:
    if isinstance(value, int):
        return value, value
    return int(value[0]), int(value[1])


# --- Матричное умножение ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Матричное произведение (с batch-broadcasting по ведущим осям).

    Raises:
        TensorShapeError: Если внутренние размерности не совпадают
    """
    if a.ndim < 2 or b.ndim < 2:
        raise TensorShapeError(
            f"matmul expects >= 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise TensorShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    x, y = a.data, b.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (
            np.matmul(g, np.swapaxes(y, -1, -2)),
            np.matmul(np.swapaxes(x, -1, -2), g),
        )

    return Tensor._from_op(np.matmul(x, y), "matmul", (a, b), backward)


# --- Активации ---

def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return Tensor._from_op(
        out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),)
    )


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) без переполнения."""
    a = x.data
    out = -np.logaddexp(np.zeros_like(a), -a)
    return Tensor._from_op(
        out, "log_sigmoid", (x,), lambda g: (g * special.expit(-a),)
    )


def gelu(x: Tensor) -> Tensor:
    """Точный GELU через функцию ошибок."""
    a = x.data
    cdf = 0.5 * (1.0 + special.erf(a / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    return Tensor._from_op(
        (a * cdf).astype(a.dtype), "gelu", (x,),
        lambda g: ((g * (cdf + a * pdf)).astype(a.dtype),)
    )


def silu(x: Tensor) -> Tensor:
    a = x.data
    sig = special.expit(a)
    return Tensor._from_op(
        a * sig, "silu", (x,),
        lambda g: (g * sig * (1.0 + a * (1.0 - sig)),)
    )


def relu(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._from_op(
        np.maximum(a, 0), "relu", (x,), lambda g: (g * (a > 0),)
    )


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(
        out, "tanh", (x,), lambda g: (g * (1.0 - out * out),)
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, "log_softmax", (x,), backward)


# --- Нормировки и поиск по таблице ---

def layer_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    eps: float = 1e-5
) -> Tensor:
    """LayerNorm по последней оси."""
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise TensorShapeError(
            f"layer_norm: affine params {weight.shape}/{bias.shape} "
            f"do not match feature dim {x.shape[-1]}"
        )
    a = x.data
    centered = a - a.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    w = weight.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        g_normed = g * w
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return gx, g * normed, g

    return Tensor._from_op(
        (normed * w + bias.data).astype(a.dtype), "layer_norm",
        (x, weight, bias), backward
    )


def embedding(indices: np.ndarray, weight: Tensor) -> Tensor:
    """Выбор строк таблицы по целочисленным индексам."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise UsageError(
            f"embedding index out of range [0, {weight.shape[0]})"
        )
    table_shape = weight.shape
    dtype = weight.data.dtype

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(table_shape, dtype=dtype)
        np.add.at(full, indices, g)
        return (full,)

    return Tensor._from_op(
        weight.data[indices], "embedding", (weight,), backward
    )


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Деление на L2-норму вдоль оси."""
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm


# --- Свертки ---

def _conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntPair = 1,
    padding: IntPair = 0
) -> Tensor:
    """Двумерная свертка NCHW через im2col-представление окон.

    Args:
        x: Вход [B, C, H, W]
        weight: Ядра [O, C, kh, kw]
        bias: Смещения [O] или None
        stride: Шаг по (H, W)
        padding: Дополнение нулями по (H, W)

    Returns:
        Tensor: Выход [B, O, Ho, Wo]
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise TensorShapeError(
            f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise TensorShapeError(
            f"conv2d channel mismatch: input {x.shape[1]}, "
            f"weight {weight.shape[1]}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    batch, _, height, width = x.shape
    _, _, kh, kw = weight.shape
    out_h = _conv_output_size(height, kh, sh, ph)
    out_w = _conv_output_size(width, kw, sw, pw)
    if out_h <= 0 or out_w <= 0:
        raise TensorShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {x.shape}"
        )

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw][:, :, :out_h, :out_w]
    w = weight.data
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
                grad_padded[
                    :, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw
                ] += contrib.transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, ph:ph + height, pw:pw + width]
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "conv2d", inputs, backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntPair = 1,
    padding: IntPair = 0,
    output_padding: IntPair = 0
) -> Tensor:
    """Транспонированная свертка NCHW.

    Args:
        x: Вход [B, Cin, H, W]
        weight: Ядра [Cin, Cout, kh, kw]

    Returns:
        Tensor: [B, Cout, (H-1)*s - 2p + k + op, ...]
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise TensorShapeError(
            f"conv_transpose2d shape mismatch: {x.shape}, {weight.shape}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    batch, _, height, width = x.shape
    _, out_channels, kh, kw = weight.shape
    full_h = (height - 1) * sh + kh + oph
    full_w = (width - 1) * sw + kw + opw
    out_h, out_w = full_h - 2 * ph, full_w - 2 * pw
    if out_h <= 0 or out_w <= 0:
        raise TensorShapeError(
            f"conv_transpose2d padding too large for input {x.shape}"
        )
    a, w = x.data, weight.data

    full = np.zeros((batch, out_channels, full_h, full_w), dtype=a.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(a, w[:, :, i, j], axes=([1], [0]))
            full[
                :, :, i:i + sh * height:sh, j:j + sw * width:sw
            ] += contrib.transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, ph:ph + out_h, pw:pw + out_w])
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_full = np.zeros_like(full)
        grad_full[:, :, ph:ph + out_h, pw:pw + out_w] = g
        grad_x = np.zeros_like(a)
        grad_w = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                window = grad_full[
                    :, :, i:i + sh * height:sh, j:j + sw * width:sw
                ]
                grad_x += np.tensordot(
                    window, w[:, :, i, j], axes=([1], [1])
                ).transpose(0, 3, 1, 2)
                grad_w[:, :, i, j] = np.tensordot(
                    a, window, axes=([0, 2, 3], [0, 2, 3])
                )
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "conv_transpose2d", inputs, backward)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    batch, channels, height, width = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (
            g.reshape(batch, channels, height, factor, width, factor)
            .sum(axis=(3, 5)),
        )

    return Tensor._from_op(out, "upsample_nearest2d", (x,), backward)


# --- Внимание ---

def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """softmax(QK^T / sqrt(d)) V.

    Args:
        mask: Булева маска (True, если ключ виден), broadcast к [..., Tq, Tk]

    Returns:
        Tuple[Tensor, Tensor]: Выход и веса внимания
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    if mask is not None:
        blocked = np.where(np.asarray(mask, dtype=bool), 0.0, -1e9)
        scores = scores + blocked.astype(scores.dtype)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    w_out: Optional[Tensor] = None,
    b_out: Optional[Tensor] = None,
    mask: Optional[np.ndarray] = None,
    return_weights: bool = False
):
    """Многоголовое внимание над уже спроецированными Q, K, V.

    Args:
        q: Запросы [T, d] или [B, T, d]
        k: Ключи [S, d] или [B, S, d]
        v: Значения той же формы, что ключи
        heads: Число голов (d делится на heads)
        w_out: Выходная проекция [d, d_out]
        b_out: Смещение выходной проекции
        mask: Булева маска ключей, broadcast к [B, heads, T, S]
        return_weights: Вернуть также веса [B, heads, T, S]

    Raises:
        ConfigError: Если d не делится на heads
    """
    dim = q.shape[-1]
    if heads <= 0 or dim % heads != 0:
        raise ConfigError(
            f"Feature dim {dim} is not divisible by {heads} heads"
        )
    if k.shape[-1] != dim or v.shape != k.shape:
        raise TensorShapeError(
            f"attention shapes differ: q{q.shape} k{k.shape} v{v.shape}"
        )
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (t.reshape((1,) + t.shape) for t in (q, k, v))
    head_dim = dim // heads

    def split(t: Tensor) -> Tensor:
        batch, length, _ = t.shape
        return t.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    attended, weights = scaled_dot_product_attention(
        split(q), split(k), split(v), mask
    )
    batch, _, length, _ = attended.shape
    merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, dim)
    if w_out is not None:
        merged = matmul(merged, w_out)
    if b_out is not None:
        merged = merged + b_out
    if unbatched:
        merged = merged.reshape(merged.shape[1:])
    if return_weights:
        return merged, weights
    return merged


# --- Потери ---

def mse_loss(prediction: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    diff = prediction - target
    return (diff * diff).mean()


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray
) -> Tensor:
    """Кросс-энтропия по строкам логитов.

    Args:
        logits: [N, C]
        targets: Индексы классов [N] или мягкие метки [N, C]
    """
    log_probs = log_softmax(logits, axis=-1)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        soft = np.zeros(logits.shape, dtype=logits.dtype)
        soft[np.arange(len(targets)), targets.astype(np.int64)] = 1.0
    else:
        soft = targets.astype(logits.dtype)
    return -(log_probs * soft).sum(axis=-1).mean()
