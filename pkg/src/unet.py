"""Условный U-Net: вектор сцены конкатенируется по каналам на входе,
последовательность содержания подключается cross-attention в узком месте."""
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .config import UNetConfig
from .diffusion import CASCADED, COMPOSABLE, GuidanceWeights, DenoiseFn, dual_cfg
from .exceptions import ConfigError, TensorShapeError
from .nn import (
    ChannelNorm2d, Conv2d, LayerNorm, Linear, Module, MultiHeadAttention,
    Parameter, sinusoidal_embedding
)
from .tensor import Tensor, concat, get_default_dtype, no_grad, pad


class ResidualBlock(Module):
    """norm -> SiLU -> conv, + проекция шага, norm -> SiLU -> conv, + skip."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int,
                 rng: np.random.Generator):
        super().__init__()
        self.norm1 = ChannelNorm2d(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.time_proj = Linear(time_dim, out_channels, rng)
        self.norm2 = ChannelNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1)
        self.skip = (
            Conv2d(in_channels, out_channels, 1, rng)
            if in_channels != out_channels else None
        )

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        step = self.time_proj(ops.silu(temb))
        h = h + step.reshape(step.shape[0], step.shape[1], 1, 1)
        h = self.conv2(ops.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttentionBlock(Module):
    """Токены карты признаков обращаются к последовательности содержания."""

    def __init__(self, channels: int, context_dim: int, heads: int,
                 rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads, rng, context_dim=context_dim)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        batch, channels, height, width = x.shape
        tokens = x.reshape(batch, channels, height * width).transpose(0, 2, 1)
        attended = self.attn(self.norm(tokens), context=context)
        out = (tokens + attended).transpose(0, 2, 1)
        return out.reshape(batch, channels, height, width)


class ConditionalUNet(Module):
    """U-Net предсказания шума в латенте VAE.

    Args:
        config: Каналы уровней, число блоков, внимание
        latent_channels: Каналы латента
        scene_dim: Размер эмбеддинга сцены
        content_dim: Ширина последовательности содержания
        content_length: Длина последовательности содержания (для null)
        rng: Генератор для инициализации

    Attributes:
        null_scene: Обучаемый null-вектор сцены [scene_dim]
        null_content: Обучаемая null-последовательность [content_length, content_dim]
    """

    def __init__(
        self,
        config: UNetConfig,
        latent_channels: int,
        scene_dim: int,
        content_dim: int,
        content_length: int,
        rng: np.random.Generator
    ):
        super().__init__()
        if config.attn_width != config.channels[-1]:
            raise ConfigError(
                f"unet.attn_width {config.attn_width} must equal the bottleneck "
                f"width {config.channels[-1]}"
            )
        self.config = config
        self.latent_channels = latent_channels
        self.scene_dim = scene_dim
        self.content_dim = content_dim
        self.content_length = content_length
        dtype = get_default_dtype()
        self.null_scene = Parameter(
            (0.02 * rng.standard_normal(scene_dim)).astype(dtype)
        )
        self.null_content = Parameter(
            (0.02 * rng.standard_normal((content_length, content_dim))).astype(dtype)
        )

        time_dim = config.time_embed_dim
        self.time_in = Linear(time_dim, time_dim, rng)
        self.time_out = Linear(time_dim, time_dim, rng)

        channels = config.channels
        self.conv_in = Conv2d(latent_channels + scene_dim, channels[0], 3, rng,
                              padding=1)
        self.down_blocks: List[ResidualBlock] = []
        self.downsamplers: List[Conv2d] = []
        current = channels[0]
        for level, width in enumerate(channels):
            for _ in range(config.blocks_per_level):
                self.down_blocks.append(ResidualBlock(current, width, time_dim, rng))
                current = width
            if level < len(channels) - 1:
                self.downsamplers.append(
                    Conv2d(width, width, 3, rng, stride=2, padding=1)
                )

        self.mid_block1 = ResidualBlock(current, current, time_dim, rng)
        self.mid_attn = CrossAttentionBlock(current, content_dim,
                                            config.attn_heads, rng)
        self.mid_block2 = ResidualBlock(current, current, time_dim, rng)

        self.up_blocks: List[ResidualBlock] = []
        self.upsamplers: List[Conv2d] = []
        for level in reversed(range(len(channels))):
            width = channels[level]
            for i in range(config.blocks_per_level):
                in_channels = current + width if i == 0 else width
                self.up_blocks.append(
                    ResidualBlock(in_channels, width, time_dim, rng)
                )
                current = width
            if level > 0:
                self.upsamplers.append(Conv2d(width, width, 3, rng, padding=1))

        self.norm_out = ChannelNorm2d(current)
        self.conv_out = Conv2d(current, latent_channels, 3, rng, padding=1)

    @property
    def levels(self) -> int:
        return len(self.config.channels)

    def _null_content(self, length: int) -> Tensor:
        if length == self.content_length:
            return self.null_content
        return self.null_content[np.arange(length) % self.content_length]

    def _resolve_scene(self, scene: Optional[Tensor], batch: int,
                       drop: Optional[np.ndarray]) -> Tensor:
        null = self.null_scene.reshape(1, self.scene_dim)
        if scene is None:
            return null.broadcast_to((batch, self.scene_dim))
        if not isinstance(scene, Tensor):
            scene = Tensor(scene)
        if scene.shape != (batch, self.scene_dim):
            raise TensorShapeError(
                f"Scene embedding shape {scene.shape}, expected "
                f"({batch}, {self.scene_dim})"
            )
        if drop is None or not np.any(drop):
            return scene
        keep = (~np.asarray(drop, dtype=bool)).astype(scene.dtype)[:, None]
        return scene * keep + null * (1.0 - keep)

    def _resolve_content(self, content: Optional[Tensor], batch: int,
                         drop: Optional[np.ndarray]) -> Tensor:
        if content is None:
            null = self._null_content(self.content_length)
            return null.reshape((1,) + null.shape).broadcast_to(
                (batch, self.content_length, self.content_dim)
            )
        if not isinstance(content, Tensor):
            content = Tensor(content)
        if content.ndim != 3 or content.shape[0] != batch \
                or content.shape[2] != self.content_dim:
            raise TensorShapeError(
                f"Content sequence shape {content.shape}, expected "
                f"({batch}, S, {self.content_dim})"
            )
        if drop is None or not np.any(drop):
            return content
        null = self._null_content(content.shape[1])
        null = null.reshape((1,) + null.shape)
        keep = (~np.asarray(drop, dtype=bool)).astype(content.dtype)[:, None, None]
        return content * keep + null * (1.0 - keep)

    def time_embedding(self, t: np.ndarray) -> Tensor:
        codes = Tensor(sinusoidal_embedding(t, self.config.time_embed_dim))
        return self.time_out(ops.silu(self.time_in(codes)))

    def forward(
        self,
        x_t,
        t,
        scene: Optional[Tensor] = None,
        content: Optional[Tensor] = None,
        drop_scene: Optional[np.ndarray] = None,
        drop_content: Optional[np.ndarray] = None
    ) -> Tensor:
        """Предсказание шума той же формы, что x_t.

        Args:
            x_t: Зашумленный латент [B, C, F, W]
            t: Шаг (int) или шаги по элементам [B]
            scene: Эмбеддинги сцены [B, scene_dim] или None (null)
            content: Последовательности [B, S, content_dim] или None (null)
            drop_scene, drop_content: Маски замены условий на null [B]

        Raises:
            TensorShapeError: При несовпадении форм
        """
        if not isinstance(x_t, Tensor):
            x_t = Tensor(x_t)
        if x_t.ndim != 4 or x_t.shape[1] != self.latent_channels:
            raise TensorShapeError(
                f"Latent shape {x_t.shape}, expected [B, {self.latent_channels}, F, W]"
            )
        batch, _, height, width = x_t.shape
        steps = np.broadcast_to(np.asarray(t), (batch,))
        temb = self.time_embedding(steps)
        scene_vec = self._resolve_scene(scene, batch, drop_scene)
        context = self._resolve_content(content, batch, drop_content)

        multiple = 2 ** (self.levels - 1)
        pad_h, pad_w = (-height) % multiple, (-width) % multiple
        h = x_t
        if pad_h or pad_w:
            h = pad(h, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
        scene_map = scene_vec.reshape(batch, self.scene_dim, 1, 1).broadcast_to(
            (batch, self.scene_dim, h.shape[2], h.shape[3])
        )
        h = self.conv_in(concat([h, scene_map], axis=1))

        skips = []
        blocks = iter(self.down_blocks)
        for level in range(self.levels):
            for _ in range(self.config.blocks_per_level):
                h = next(blocks)(h, temb)
            skips.append(h)
            if level < self.levels - 1:
                h = self.downsamplers[level](h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, context)
        h = self.mid_block2(h, temb)

        blocks = iter(self.up_blocks)
        for i, level in enumerate(reversed(range(self.levels))):
            h = concat([h, skips[level]], axis=1)
            for _ in range(self.config.blocks_per_level):
                h = next(blocks)(h, temb)
            if level > 0:
                h = self.upsamplers[i](ops.upsample_nearest2d(h, 2))

        out = self.conv_out(ops.silu(self.norm_out(h)))
        if pad_h or pad_w:
            out = out[:, :, :height, :width]
        return out

    def component_config(self) -> Dict:
        return {
            "channels": list(self.config.channels),
            "blocks_per_level": self.config.blocks_per_level,
            "attn_width": self.config.attn_width,
            "attn_heads": self.config.attn_heads,
            "time_embed_dim": self.config.time_embed_dim,
            "latent_channels": self.latent_channels,
            "scene_dim": self.scene_dim,
            "content_dim": self.content_dim,
            "content_length": self.content_length,
        }

    @classmethod
    def from_component_config(cls, data: Dict) -> "ConditionalUNet":
        config = UNetConfig(
            channels=tuple(data["channels"]),
            blocks_per_level=data["blocks_per_level"],
            attn_width=data["attn_width"],
            attn_heads=data["attn_heads"],
            time_embed_dim=data["time_embed_dim"],
        )
        return cls(config, data["latent_channels"], data["scene_dim"],
                   data["content_dim"], data["content_length"],
                   np.random.default_rng(0))


def unet_forward(
    unet: ConditionalUNet,
    x_t: np.ndarray,
    t: int,
    scene: Optional[np.ndarray],
    content: Optional[np.ndarray]
) -> np.ndarray:
    """Одно предсказание шума для латента [C, F, W] (eval, без графа)."""
    unet.eval()
    with no_grad():
        out = unet(
            Tensor(np.asarray(x_t)[None]), t,
            None if scene is None else Tensor(np.asarray(scene)[None]),
            None if content is None else Tensor(np.asarray(content)[None]),
        )
    return out.data[0].copy()


def guided_denoiser(
    unet: ConditionalUNet,
    scene: np.ndarray,
    content: np.ndarray,
    w: GuidanceWeights,
    mode: str = COMPOSABLE
) -> DenoiseFn:
    """Функция (x_t, t) -> eps_hat с двойным guidance.

    Все ветви (uu, ru, uc и rc для cascaded) считаются одним батчем.

    Args:
        unet: Обученный U-Net
        scene: Эмбеддинг сцены [scene_dim]
        content: Последовательность содержания [S, content_dim]
        w: Веса guidance
        mode: composable или cascaded
    """
    if mode not in (COMPOSABLE, CASCADED):
        raise ConfigError(f"Unknown guidance mode '{mode}'")
    branches = 4 if mode == CASCADED else 3
    # порядок ветвей: uu, ru, uc, rc
    drop_scene = np.array([True, False, True, False])[:branches]
    drop_content = np.array([True, True, False, False])[:branches]
    scenes = Tensor(np.repeat(np.asarray(scene)[None], branches, axis=0))
    contents = Tensor(np.repeat(np.asarray(content)[None], branches, axis=0))

    def denoise(x_t: np.ndarray, t: int) -> np.ndarray:
        unet.eval()
        batch = Tensor(np.repeat(np.asarray(x_t)[None], branches, axis=0))
        with no_grad():
            eps = unet(batch, t, scenes, contents, drop_scene, drop_content).data
        return dual_cfg(
            eps[0], eps[1], eps[2], w,
            eps_rc=eps[3] if branches == 4 else None, mode=mode
        )

    return denoise
