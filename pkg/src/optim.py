"""Оптимизатор Adam."""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import TensorShapeError, UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    """Состояние Adam.

    Attributes:
        first_moment: Первые моменты по параметрам
        second_moment: Вторые моменты по параметрам
        step_count: Число выполненных шагов
        lr, beta1, beta2, eps: Гиперпараметры
    """
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(
        cls,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8
    ) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState
) -> None:
    """Один шаг Adam с коррекцией смещения (параметры меняются на месте).

    Параметры без градиента пропускаются, моменты для них не трогаются.
    Если градиентов нет совсем, счетчик шагов не меняется.

    Raises:
        TensorShapeError: Если формы параметров, градиентов и моментов
            не совпадают
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise TensorShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moment buffers"
        )
    if all(grad is None for grad in grads):
        return
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        m, v = state.first_moment[i], state.second_moment[i]
        if grad.shape != param.shape or m.shape != param.shape:
            raise TensorShapeError(
                f"adam_step: param {param.shape}, grad {grad.shape}, "
                f"moment {m.shape}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = state.lr * (m / correction1) / (
            np.sqrt(v / correction2) + state.eps
        )
        param.data = (param.data - update).astype(param.data.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Масштабирует градиенты, если их общая L2-норма больше max_norm.

    Returns:
        float: Норма до масштабирования
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                              for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


class Adam:
    """Adam над списком параметров.

    Args:
        params: Обучаемые параметры
        lr: Шаг обучения
        betas: (beta1, beta2)
        eps: Стабилизатор знаменателя
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8
    ):
        self.params = list(params)
        if not self.params:
            raise UsageError("Adam needs at least one parameter")
        self.state = AdamState.zeros_like(
            self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps
        )

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
