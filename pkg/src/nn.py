"""Слои нейросетей поверх numeric core."""
import hashlib
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .exceptions import InputError, TensorShapeError
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """Обучаемый лист графа."""

    def __init__(self, data: np.ndarray, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Базовый класс: рекурсивный обход параметров и подмодулей."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, child in self._children():
            full_name = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full_name, child
            else:
                yield from child.named_parameters(prefix=f"{full_name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        """Отключает градиенты всех параметров."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Загружает значения параметров.

        Raises:
            InputError: Если набор имен не совпадает
            TensorShapeError: Если форма параметра не совпадает
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise InputError(
                f"State mismatch: missing={missing}, unexpected={unexpected}"
            )
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise TensorShapeError(
                    f"Parameter {name}: expected {param.shape}, "
                    f"got {value.shape}"
                )
            param.data = value.astype(param.data.dtype).copy()

    def parameter_hash(self) -> str:
        """sha256 по именам и байтам параметров."""
        digest = hashlib.sha256()
        for name, param in self.named_parameters():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(param.data).tobytes())
        return digest.hexdigest()


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    """y = x @ W + b, W хранится как [in, out]."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True
    ):
        super().__init__()
        bound = math.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)))
        self.bias = (
            Parameter(np.zeros(out_features, dtype=get_default_dtype()))
            if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        rng: np.random.Generator,
        stride=1,
        padding=0
    ):
        super().__init__()
        kh, kw = ops._pair(kernel_size)
        fan_in = in_channels * kh * kw
        self.weight = Parameter(_uniform(
            rng, math.sqrt(3.0 / fan_in), (out_channels, in_channels, kh, kw)
        ))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype()))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        rng: np.random.Generator,
        stride=1,
        padding=0,
        output_padding=0
    ):
        super().__init__()
        kh, kw = ops._pair(kernel_size)
        fan_in = in_channels * kh * kw
        self.weight = Parameter(_uniform(
            rng, math.sqrt(3.0 / fan_in), (in_channels, out_channels, kh, kw)
        ))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype()))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(
            x, self.weight, self.bias,
            self.stride, self.padding, self.output_padding
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class ChannelNorm2d(LayerNorm):
    """LayerNorm по каналам карты признаков NCHW."""

    def forward(self, x: Tensor) -> Tensor:
        moved = x.transpose(0, 2, 3, 1)
        return super().forward(moved).transpose(0, 3, 1, 2)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(
            (0.02 * rng.standard_normal((num_embeddings, dim)))
            .astype(get_default_dtype())
        )

    def forward(self, indices: np.ndarray) -> Tensor:
        return ops.embedding(indices, self.weight)


class MultiHeadAttention(Module):
    """Внимание с проекциями Q/K/V и выходной проекцией.

    Args:
        dim: Ширина запросов и выхода
        heads: Число голов
        rng: Генератор для инициализации
        context_dim: Ширина ключей/значений (для cross-attention)
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        context_dim: Optional[int] = None
    ):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = Linear(dim, dim, rng)
        self.to_k = Linear(context_dim, dim, rng)
        self.to_v = Linear(context_dim, dim, rng)
        self.to_out = Linear(dim, dim, rng)

    def forward(
        self,
        x: Tensor,
        context: Optional[Tensor] = None,
        mask: Optional[np.ndarray] = None,
        return_weights: bool = False
    ):
        context = x if context is None else context
        return ops.multi_head_attention(
            self.to_q(x), self.to_k(context), self.to_v(context),
            self.heads, self.to_out.weight, self.to_out.bias,
            mask=mask, return_weights=return_weights
        )


class TransformerLayer(Module):
    """Pre-norm слой: self-attention + FFN с GELU."""

    def __init__(
        self,
        dim: int,
        heads: int,
        ffn_dim: int,
        rng: np.random.Generator
    ):
        super().__init__()
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm_ffn = LayerNorm(dim)
        self.ffn_in = Linear(dim, ffn_dim, rng)
        self.ffn_out = Linear(ffn_dim, dim, rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.norm_attn(x), mask=mask)
        return x + self.ffn_out(ops.gelu(self.ffn_in(self.norm_ffn(x))))


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Синусоидальные коды позиций/шагов диффузии [N, dim]."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions * freqs[None, :]
    codes = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        codes = np.pad(codes, ((0, 0), (0, 1)))
    return codes.astype(get_default_dtype())
