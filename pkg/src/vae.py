"""Вариационный автоэнкодер лог-мел спектрограмм (латент ×4 по обеим осям)."""
from typing import Dict, Optional, Tuple

import numpy as np

from . import ops
from .config import AudioConfig, VAEConfig
from .dsp import MelSpectrogram
from .exceptions import TensorShapeError
from .nn import Conv2d, ConvTranspose2d, Module
from .scene_encoder import MelBatch, mel_batch
from .tensor import Tensor, no_grad

DOWNSAMPLING = 4


class SpectrogramVAE(Module):
    """Сверточный VAE: два шага stride 2 в энкодере, два транспонированных
    шага в декодере.

    Args:
        config: Размерности латента и скрытых каналов
        n_mels: Число мел-полос (кратно 4)
        rng: Генератор для инициализации
        mel_mean, mel_std: Нормировка лог-мела
    """

    def __init__(
        self,
        config: VAEConfig,
        n_mels: int,
        rng: np.random.Generator,
        mel_mean: float = AudioConfig.mel_mean,
        mel_std: float = AudioConfig.mel_std
    ):
        super().__init__()
        if n_mels % DOWNSAMPLING:
            raise TensorShapeError(f"n_mels {n_mels} is not divisible by 4")
        self.config = config
        self.n_mels = n_mels
        self.mel_mean = mel_mean
        self.mel_std = mel_std
        first, second = config.hidden_channels
        latent = config.latent_channels

        self.enc_in = Conv2d(1, first, 3, rng, stride=2, padding=1)
        self.enc_down = Conv2d(first, second, 3, rng, stride=2, padding=1)
        self.enc_out = Conv2d(second, 2 * latent, 3, rng, padding=1)

        self.dec_in = Conv2d(latent, second, 3, rng, padding=1)
        self.dec_up1 = ConvTranspose2d(second, first, 4, rng, stride=2, padding=1)
        self.dec_up2 = ConvTranspose2d(first, first, 4, rng, stride=2, padding=1)
        self.dec_out = Conv2d(first, 1, 3, rng, padding=1)

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    def latent_shape(self, n_frames: int) -> Tuple[int, int, int]:
        return (self.latent_channels, self.n_mels // DOWNSAMPLING,
                n_frames // DOWNSAMPLING)

    def encode(self, mels: MelBatch) -> Tuple[Tensor, Tensor]:
        """Параметры апостериорного распределения.

        Returns:
            Tuple[Tensor, Tensor]: mu и logvar формы [B, C, n_mels/4, T/4]

        Raises:
            TensorShapeError: Если T не кратно 4 или число полос не то
        """
        values = mel_batch(mels)
        if values.shape[1] != self.n_mels:
            raise TensorShapeError(
                f"VAE expects {self.n_mels} mel bands, got {values.shape[1]}"
            )
        if values.shape[2] % DOWNSAMPLING:
            raise TensorShapeError(
                f"Mel length {values.shape[2]} is not divisible by 4"
            )
        x = Tensor(((values - self.mel_mean) / self.mel_std)[:, None])
        h = ops.silu(self.enc_in(x))
        h = ops.silu(self.enc_down(h))
        stats = self.enc_out(h)
        latent = self.latent_channels
        return stats[:, :latent], stats[:, latent:]

    def decode(self, z: Tensor) -> Tensor:
        """Лог-мел [B, n_mels, T] из латента [B, C, n_mels/4, T/4].

        Raises:
            TensorShapeError: При неверной форме латента
        """
        if not isinstance(z, Tensor):
            z = Tensor(z)
        if z.ndim != 4 or z.shape[1] != self.latent_channels \
                or z.shape[2] * DOWNSAMPLING != self.n_mels:
            raise TensorShapeError(
                f"Latent shape {z.shape} does not match "
                f"[B, {self.latent_channels}, {self.n_mels // DOWNSAMPLING}, T/4]"
            )
        h = ops.silu(self.dec_in(z))
        h = ops.silu(self.dec_up1(h))
        h = ops.silu(self.dec_up2(h))
        out = self.dec_out(h)
        batch, _, n_mels, frames = out.shape
        return out.reshape(batch, n_mels, frames) * self.mel_std + self.mel_mean

    def sample(
        self,
        mu: Tensor,
        logvar: Tensor,
        rng: Optional[np.random.Generator] = None
    ) -> Tensor:
        """z = mu + exp(logvar/2)·eps в режиме обучения, z = mu в eval."""
        if not self.training:
            return mu
        rng = rng or np.random.default_rng()
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        return mu + (logvar * 0.5).exp() * eps

    def component_config(self) -> Dict:
        return {
            "n_mels": self.n_mels,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
            "latent_channels": self.config.latent_channels,
            "hidden_channels": list(self.config.hidden_channels),
            "beta": self.config.beta,
        }

    @classmethod
    def from_component_config(cls, data: Dict) -> "SpectrogramVAE":
        config = VAEConfig(
            latent_channels=data["latent_channels"],
            hidden_channels=tuple(data["hidden_channels"]),
            beta=data["beta"],
        )
        return cls(config, data["n_mels"], np.random.default_rng(0),
                   data["mel_mean"], data["mel_std"])


def vae_encode(
    vae: SpectrogramVAE,
    mel: MelBatch,
    rng: Optional[np.random.Generator] = None
) -> Tuple[Tensor, Tensor, Tensor]:
    """Кодирование с репараметризацией: (mu, logvar, z)."""
    mu, logvar = vae.encode(mel)
    return mu, logvar, vae.sample(mu, logvar, rng)


def vae_decode(vae: SpectrogramVAE, z: np.ndarray) -> MelSpectrogram:
    """Декодирует один латент [C, F, T/4] в MelSpectrogram (без графа)."""
    z = np.asarray(z)
    if z.ndim == 3:
        z = z[None]
    vae.eval()
    with no_grad():
        values = vae.decode(Tensor(z)).data[0]
    return MelSpectrogram(values)


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Средняя по элементам KL(N(mu, exp(logvar)) || N(0, 1))."""
    return ((mu * mu + logvar.exp() - 1.0 - logvar) * 0.5).mean()


def vae_loss(
    mel: np.ndarray,
    recon: Tensor,
    mu: Tensor,
    logvar: Tensor,
    beta: float = 1e-2
) -> Tensor:
    """MSE реконструкции + beta · средняя KL.

    Raises:
        TensorShapeError: Если формы mel и recon различаются
    """
    target = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if target.shape != recon.shape:
        if target.shape == recon.shape[1:] and recon.shape[0] == 1:
            target = target[None]
        else:
            raise TensorShapeError(
                f"vae_loss: mel {target.shape} vs reconstruction {recon.shape}"
            )
    return ops.mse_loss(recon, target) + kl_divergence(mu, logvar) * beta
