"""Плотные тензоры с обратным автоматическим дифференцированием.

Каждая дифференцируемая операция записывает на ленту запись с
порядковым номером, ссылками на входы и функцией обратного прохода.
``Tensor.backward`` собирает достижимые записи и проигрывает их в
обратном порядке записи.
"""
import contextlib
import contextvars
import itertools
from dataclasses import dataclass
from typing import (
    Callable, Iterator, List, Optional, Sequence, Tuple, Union
)

import numpy as np

from .exceptions import NumericalError, TensorShapeError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DEFAULT_DTYPE = contextvars.ContextVar("default_dtype", default=np.float32)
_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)
_TAPE_COUNTER = itertools.count()


def get_default_dtype() -> type:
    """Текущий тип чисел для новых тензоров (float32 по умолчанию)."""
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype: type) -> Iterator[None]:
    """Временно меняет тип чисел для новых тензоров и параметров.

    Используется в градиентных проверках, где центральные разности
    в float32 тонут в ошибке округления.
    """
    token = _DEFAULT_DTYPE.set(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Отключает запись операций на ленту."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@dataclass(frozen=True)
class TapeEntry:
    """Запись ленты: результат операции и способ вернуть градиент.

    Attributes:
        seq: Порядковый номер записи (порядок выполнения)
        op: Имя операции (для сообщений об ошибках)
        inputs: Входные тензоры операции
        backward: Функция, отображающая градиент выхода в градиенты входов
    """
    seq: int
    op: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Сворачивает градиент обратно к форме входа после broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"Non-finite values produced by '{op}'")


class Tensor:
    """Плотный тензор (row-major) с опциональным градиентом.

    Attributes:
        data: Значения тензора
        grad: Накопленный градиент (той же формы) или None
        requires_grad: Нужно ли вычислять градиент
        name: Необязательное имя (для чекпоинтов и отладки)
    """

    # numpy должен уступать операторам Tensor (ndarray + Tensor)
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None
    ):
        self.data = np.array(data, dtype=get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._entry: Optional[TapeEntry] = None
        _check_finite(self.data, "tensor")

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        op: str,
        inputs: Sequence["Tensor"],
        backward: BackwardFn
    ) -> "Tensor":
        """Создает результат операции и записывает его на ленту."""
        _check_finite(data, op)
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = (
            is_grad_enabled() and any(t.requires_grad for t in inputs)
        )
        out._entry = (
            TapeEntry(next(_TAPE_COUNTER), op, tuple(inputs), backward)
            if out.requires_grad else None
        )
        return out

    # --- Свойства ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        out._entry = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --- Обратный проход ---

    def backward(self) -> None:
        """Заполняет градиенты всех листьев с requires_grad.

        Повторный вызов без обнуления накапливает градиенты.

        Raises:
            UsageError: Если тензор не скаляр или не зависит от параметров
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise UsageError("Loss does not depend on any requires_grad tensor")
        if self._entry is None:
            self._accumulate(np.ones_like(self.data))
            return

        nodes = self._collect_nodes()
        grads = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes, key=lambda t: t._entry.seq, reverse=True):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            input_grads = node._entry.backward(grad)
            for parent, parent_grad in zip(node._entry.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = _unbroadcast(parent_grad, parent.shape)
                if parent._entry is None:
                    parent._accumulate(parent_grad)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        _check_finite(grad, "backward")
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def _collect_nodes(self) -> List["Tensor"]:
        """Все промежуточные тензоры, от которых зависит данный."""
        seen = set()
        nodes = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or node._entry is None:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._entry.inputs)
        return nodes

    # --- Арифметика ---

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        const = Tensor.__new__(Tensor)
        const.data = np.asarray(other, dtype=self.data.dtype)
        const.grad = None
        const.requires_grad = False
        const.name = None
        const._entry = None
        return const

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        return Tensor._from_op(
            self.data + other.data, "add", (self, other),
            lambda g: (g, g)
        )

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        return Tensor._from_op(
            self.data - other.data, "sub", (self, other),
            lambda g: (g, -g)
        )

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self._lift(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b, "mul", (self, other),
            lambda g: (g * b, g * a)
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b, "div", (self, other),
            lambda g: (g / b, -g * a / (b * b))
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self._lift(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, "neg", (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise UsageError("Only scalar exponents are supported")
        a = self.data
        return Tensor._from_op(
            a ** exponent, "pow", (self,),
            lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from .ops import matmul
        return matmul(self, self._lift(other))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, "exp", (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), "log", (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._from_op(
            out, "sqrt", (self,), lambda g: (g * 0.5 / out,)
        )

    def clamp_min(self, value: float) -> "Tensor":
        """Поэлементный max(x, value); градиент идет только мимо порога."""
        a = self.data
        keep = a >= value
        return Tensor._from_op(
            np.where(keep, a, np.asarray(value, dtype=a.dtype)),
            "clamp_min", (self,), lambda g: (g * keep,)
        )

    # --- Редукции ---

    def sum(
        self,
        axis: Union[int, Tuple[int, ...], None] = None,
        keepdims: bool = False
    ) -> "Tensor":
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g: np.ndarray) -> Tuple[np.ndarray]:
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(
            np.sum(self.data, axis=axes, keepdims=keepdims), "sum",
            (self,), backward
        )

    def mean(
        self,
        axis: Union[int, Tuple[int, ...], None] = None,
        keepdims: bool = False
    ) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    # --- Форма ---

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        source = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise TensorShapeError(
                f"Cannot reshape {source} into {shape}"
            ) from e
        return Tensor._from_op(
            out, "reshape", (self,), lambda g: (g.reshape(source),)
        )

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.data.transpose(axes), "transpose", (self,),
            lambda g: (g.transpose(inverse),)
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError as e:
            raise TensorShapeError(
                f"Cannot broadcast {self.shape} to {shape}"
            ) from e
        # градиент сворачивается в _unbroadcast
        return Tensor._from_op(
            np.ascontiguousarray(out), "broadcast_to", (self,),
            lambda g: (g,)
        )

    def __getitem__(self, index) -> "Tensor":
        source_shape = self.shape
        dtype = self.data.dtype

        def backward(g: np.ndarray) -> Tuple[np.ndarray]:
            full = np.zeros(source_shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(
            np.array(self.data[index]), "getitem", (self,), backward
        )


def _normalize_axes(
    axis: Union[int, Tuple[int, ...], None],
    ndim: int
) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def as_tensor(data: Union[Tensor, ArrayLike]) -> Tensor:
    """Оборачивает массив в тензор-константу (без копирования тензоров)."""
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Конкатенация вдоль оси с разнесением градиента по частям."""
    if not tensors:
        raise UsageError("concat() needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[a] != tensors[0].shape[a]
            for a in range(ndim) if a != axis
        ):
            raise TensorShapeError(
                f"concat: incompatible shapes "
                f"{[tuple(x.shape) for x in tensors]} along axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), "concat",
        tuple(tensors), backward
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def pad(tensor: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Дополнение нулями; widths как в numpy.pad."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != tensor.ndim:
        raise TensorShapeError(
            f"pad: got {len(widths)} widths for {tensor.ndim}-d tensor"
        )
    region = tuple(
        slice(before, before + size)
        for (before, _), size in zip(widths, tensor.shape)
    )
    return Tensor._from_op(
        np.pad(tensor.data, widths), "pad", (tensor,),
        lambda g: (g[region],)
    )
