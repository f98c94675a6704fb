"""Латентная диффузия: расписание шума, прямой процесс, двойной CFG, DDIM."""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .exceptions import ConfigError, TensorShapeError, UsageError

COMPOSABLE = "composable"
CASCADED = "cascaded"
CFG_MODES = (COMPOSABLE, CASCADED)

# (x_t, t) -> eps_hat; t общий для всего батча
DenoiseFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Линейное расписание; шаги нумеруются с 1, alpha_bar(0) = 1.

    Attributes:
        betas: beta_1..beta_T
        alphas: 1 - beta_t
        alpha_bars: Накопленные произведения alpha
    """
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_min: float = 1e-4
    beta_max: float = 2e-2

    @property
    def train_timesteps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t для t в [0, T]."""
        if t == 0:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def check_timestep(self, t: Union[int, np.ndarray]) -> None:
        values = np.asarray(t)
        if values.size == 0 or values.min() < 1 or values.max() > self.train_timesteps:
            raise UsageError(
                f"Timestep {t} outside [1, {self.train_timesteps}]"
            )


def make_schedule(
    train_timesteps: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 2e-2
) -> NoiseSchedule:
    """Линейно разнесенные beta и производные величины (float64).

    Raises:
        ConfigError: Если не выполнено 0 < beta_min < beta_max < 1
    """
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigError(
            f"Noise schedule needs 0 < beta_min < beta_max < 1, "
            f"got {beta_min}, {beta_max}"
        )
    if train_timesteps < 2:
        raise ConfigError(f"train_timesteps must be >= 2, got {train_timesteps}")
    betas = np.linspace(beta_min, beta_max, train_timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas), beta_min, beta_max)


def q_sample(
    schedule: NoiseSchedule,
    x0: np.ndarray,
    t: Union[int, np.ndarray],
    eps: np.ndarray
) -> np.ndarray:
    """x_t = sqrt(ab_t)·x0 + sqrt(1 - ab_t)·eps.

    Args:
        t: Один шаг или по шагу на элемент батча (ось 0)

    Raises:
        UsageError: Если t вне [1, T]
        TensorShapeError: Если формы x0 и eps различаются
    """
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise TensorShapeError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    schedule.check_timestep(t)
    ab = schedule.alpha_bars[np.asarray(t) - 1]
    if np.ndim(t) == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
        scale, noise = np.sqrt(ab).astype(x0.dtype), np.sqrt(1.0 - ab).astype(x0.dtype)
    else:
        scale, noise = math.sqrt(float(ab)), math.sqrt(1.0 - float(ab))
    return scale * x0 + noise * eps


@dataclass(frozen=True)
class GuidanceWeights:
    w_ref: float = 1.0
    w_cont: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.w_ref) and math.isfinite(self.w_cont)):
            raise ConfigError(
                f"Guidance weights must be finite, got ({self.w_ref}, {self.w_cont})"
            )


def dual_cfg(
    eps_uu: np.ndarray,
    eps_ru: np.ndarray,
    eps_uc: np.ndarray,
    w: GuidanceWeights,
    eps_rc: Optional[np.ndarray] = None,
    mode: str = COMPOSABLE
) -> np.ndarray:
    """Двойное classifier-free guidance.

    composable: eps_uu + w_ref(eps_ru - eps_uu) + w_cont(eps_uc - eps_uu)
    cascaded:   eps_uu + w_ref(eps_ru - eps_uu) + w_cont(eps_rc - eps_ru)

    Raises:
        TensorShapeError: Если формы предсказаний различаются
        UsageError: Для cascaded без eps_rc
        ConfigError: Для неизвестного режима
    """
    shapes = {np.shape(eps_uu), np.shape(eps_ru), np.shape(eps_uc)}
    if eps_rc is not None:
        shapes.add(np.shape(eps_rc))
    if len(shapes) != 1:
        raise TensorShapeError(f"dual_cfg: prediction shapes differ: {sorted(shapes)}")
    if mode == COMPOSABLE:
        return eps_uu + w.w_ref * (eps_ru - eps_uu) + w.w_cont * (eps_uc - eps_uu)
    if mode == CASCADED:
        if eps_rc is None:
            raise UsageError("Cascaded guidance needs the jointly conditioned prediction")
        return eps_uu + w.w_ref * (eps_ru - eps_uu) + w.w_cont * (eps_rc - eps_ru)
    raise ConfigError(f"Unknown guidance mode '{mode}'")


def draw_condition_drops(
    rng: np.random.Generator,
    n: int,
    p_scene: float,
    p_content: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Независимые маски замены условий на null для n элементов."""
    return rng.random(n) < p_scene, rng.random(n) < p_content


def ddim_timesteps(train_timesteps: int, steps: int) -> List[int]:
    """Убывающая последовательность шагов с равным шагом T // steps.

    Raises:
        ConfigError: Если steps вне [1, T]
    """
    if not 1 <= steps <= train_timesteps:
        raise ConfigError(
            f"DDIM steps must be in [1, {train_timesteps}], got {steps}"
        )
    stride = train_timesteps // steps
    return [stride * i for i in range(steps, 0, -1)]


def ddim_step(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Детерминированный шаг DDIM (eta = 0).

    Returns:
        Tuple[np.ndarray, np.ndarray]: x_{t_prev} и оценка x0
    """
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    x_prev = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    return x_prev, x0_hat


def ddim_sample(
    denoise_fn: DenoiseFn,
    shape: Tuple[int, ...],
    schedule: NoiseSchedule,
    steps: int = 100,
    seed: int = 0,
    x_T: Optional[np.ndarray] = None,
    dtype: type = np.float32
) -> np.ndarray:
    """DDIM-сэмплирование от x_T ~ N(0, I) до t = 0.

    Args:
        denoise_fn: (x_t, t) -> eps_hat (уже с guidance)
        shape: Форма латента
        schedule: Расписание шума
        steps: Число шагов
        seed: Зерно начального шума
        x_T: Явный начальный шум (вместо seed)

    Raises:
        ConfigError: Если steps > T
    """
    timesteps = ddim_timesteps(schedule.train_timesteps, steps)
    if x_T is None:
        x = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    else:
        x = np.array(x_T, dtype=dtype)
        if x.shape != tuple(shape):
            raise TensorShapeError(f"x_T shape {x.shape} differs from {shape}")
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps_hat = np.asarray(denoise_fn(x, t), dtype=dtype)
        if eps_hat.shape != x.shape:
            raise TensorShapeError(
                f"Denoiser returned {eps_hat.shape} for latent {x.shape}"
            )
        x, _ = ddim_step(schedule, x, t, t_prev, eps_hat)
        x = x.astype(dtype, copy=False)
    return x
