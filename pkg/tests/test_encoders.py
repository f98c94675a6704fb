"""Тесты энкодера сцены, VAE и энкодера содержания."""
import numpy as np
import pytest

from src.config import RunConfig
from src.content_encoder import ContentConditioning, ContentEncoder, apply_mask, \
    content_encode, mask_from_logits
from src.dsp import MelSpectrogram
from src.exceptions import InputError, TensorShapeError, UsageError
from src.optim import Adam
from src.scene_encoder import (
    CaptionTokenizer, SceneEncoder, caption_targets, contrastive_loss,
    contrastive_train_step, retrieval_at_1, scene_encode_text
)
from src.tensor import Tensor
from src.vae import SpectrogramVAE, kl_divergence, vae_decode, vae_encode, vae_loss

QUIET = "A male speaks in a quiet room"
HALL = "A female speaks in a cathedral"
LONG = "A male speaks in an open field with crowd murmur behind"


def random_mels(rng: np.random.Generator, batch: int = 2, n_mels: int = 16,
                frames: int = 48) -> np.ndarray:
    """Лог-мелы в правдоподобном диапазоне, не ниже порога log(1e-5)."""
    return rng.uniform(np.log(1e-5), 0.0, size=(batch, n_mels, frames)).astype(np.float32)


@pytest.fixture
def scene_encoder(tiny_config: RunConfig, rng) -> SceneEncoder:
    return SceneEncoder(tiny_config.scene, tiny_config.audio.n_mels, rng)


@pytest.fixture
def vae(tiny_config: RunConfig, rng) -> SpectrogramVAE:
    return SpectrogramVAE(tiny_config.vae, tiny_config.audio.n_mels, rng)


@pytest.fixture
def content_encoder(tiny_config: RunConfig, rng) -> ContentEncoder:
    return ContentEncoder(tiny_config.content, tiny_config.audio.n_mels, rng)


class TestCaptionTokenizer:
    """Тесты токенизатора подписей."""

    def test_template_words_are_known(self):
        tokenizer = CaptionTokenizer()
        assert tokenizer.unk_id not in tokenizer.encode(LONG)

    def test_unknown_word(self):
        tokenizer = CaptionTokenizer()
        assert tokenizer.encode("A robot speaks")[1] == tokenizer.unk_id

    def test_empty_caption(self):
        with pytest.raises(InputError):
            CaptionTokenizer().encode("  ... ")

    def test_batch_padding(self):
        tokenizer = CaptionTokenizer()
        ids, mask = tokenizer.encode_batch([HALL, LONG])
        assert ids.shape == mask.shape == (2, 11)
        assert mask[0].sum() == 6 and mask[1].all()
        assert (ids[0, 6:] == tokenizer.pad_id).all()


class TestSceneEncoder:
    """Тесты двухветвевого энкодера сцены."""

    def test_audio_embeddings_are_unit(self, scene_encoder, rng):
        emb = scene_encoder.encode_audio(random_mels(rng, 3))
        assert emb.shape == (3, 8)
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, rtol=1e-5)

    def test_wrong_band_count(self, scene_encoder, rng):
        with pytest.raises(InputError):
            scene_encoder.encode_audio(random_mels(rng, 1, n_mels=20))

    def test_text_embedding_ignores_padding(self, scene_encoder):
        scene_encoder.eval()
        alone = scene_encoder.encode_text([QUIET]).data[0]
        batched = scene_encoder.encode_text([QUIET, LONG]).data[0]
        np.testing.assert_allclose(alone, batched, atol=1e-5)

    def test_encode_text_single(self, scene_encoder):
        emb = scene_encode_text(scene_encoder, HALL)
        assert emb.shape == (8,)
        assert np.linalg.norm(emb) == pytest.approx(1.0, rel=1e-5)

    def test_accepts_mel_spectrogram(self, scene_encoder, rng):
        mel = MelSpectrogram(random_mels(rng, 1)[0])
        assert scene_encoder.encode_audio(mel).shape == (1, 8)

    def test_component_config_round_trip(self, scene_encoder, rng):
        restored = SceneEncoder.from_component_config(scene_encoder.component_config())
        restored.load_state_dict(scene_encoder.state_dict())
        mels = random_mels(rng, 2)
        np.testing.assert_allclose(restored.encode_audio(mels).data,
                                   scene_encoder.encode_audio(mels).data, atol=1e-6)


class TestContrastiveLoss:
    """Тесты симметричной контрастной функции потерь."""

    def test_caption_targets(self):
        targets = caption_targets([QUIET, HALL, QUIET])
        np.testing.assert_allclose(targets.sum(axis=1), 1.0)
        np.testing.assert_allclose(targets[0], [0.5, 0.0, 0.5])
        np.testing.assert_allclose(targets[1], [0.0, 1.0, 0.0])

    def test_aligned_embeddings_have_low_loss(self, rng):
        aligned = Tensor(np.eye(4))
        loss = contrastive_loss(aligned, aligned, 0.1)
        shuffled = contrastive_loss(aligned, Tensor(np.eye(4)[[1, 2, 3, 0]]), 0.1)
        assert loss.item() < 1e-3
        assert shuffled.item() > 5.0

    def test_two_item_closed_form(self):
        pair = Tensor(np.eye(2))
        loss = contrastive_loss(pair, pair, 1.0)
        assert loss.item() == pytest.approx(-np.log(np.e / (np.e + 1)), rel=1e-5)
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_joint_permutation_keeps_loss(self, rng):
        audio = rng.standard_normal((6, 8))
        text = rng.standard_normal((6, 8))
        audio /= np.linalg.norm(audio, axis=1, keepdims=True)
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        order = rng.permutation(6)
        loss = contrastive_loss(Tensor(audio), Tensor(text), 0.1).item()
        permuted = contrastive_loss(Tensor(audio[order]), Tensor(text[order]), 0.1).item()
        assert permuted == pytest.approx(loss, rel=1e-5)

    def test_random_embeddings_near_log_n(self, rng):
        losses = []
        for _ in range(20):
            emb = rng.standard_normal((2, 16, 256))
            emb /= np.linalg.norm(emb, axis=2, keepdims=True)
            losses.append(contrastive_loss(Tensor(emb[0]), Tensor(emb[1]), 1.0).item())
        assert np.mean(losses) == pytest.approx(np.log(16), abs=0.2)

    def test_needs_two_items(self):
        single = Tensor(np.ones((1, 4)) / 2)
        with pytest.raises(UsageError):
            contrastive_loss(single, single, 0.1)

    def test_temperature_positive(self):
        pair = Tensor(np.eye(2))
        with pytest.raises(UsageError):
            contrastive_loss(pair, pair, 0.0)

    def test_train_step_reduces_loss(self, scene_encoder, rng):
        mels = random_mels(rng, 4)
        captions = [QUIET, HALL, QUIET, HALL]
        mels[1::2] += 1.0
        optimizer = Adam(scene_encoder.parameters(), lr=1e-2)
        losses = [contrastive_train_step(scene_encoder, optimizer, mels, captions)
                  for _ in range(30)]
        assert losses[-1] < losses[0]

    def test_train_step_checks_batch(self, scene_encoder, rng):
        optimizer = Adam(scene_encoder.parameters())
        with pytest.raises(InputError):
            contrastive_train_step(scene_encoder, optimizer, random_mels(rng, 2), [QUIET])

    def test_retrieval_at_1(self):
        emb = np.eye(3)
        assert retrieval_at_1(emb, emb, [QUIET, HALL, LONG]) == 1.0
        assert retrieval_at_1(emb, emb[[1, 0, 2]], [QUIET, HALL, LONG]) == \
            pytest.approx(1 / 3)
        with pytest.raises(InputError):
            retrieval_at_1(emb, emb[:2], [QUIET, HALL, LONG])


class TestSpectrogramVAE:
    """Тесты VAE лог-мел спектрограмм."""

    def test_bands_divisible_by_four(self, tiny_config, rng):
        with pytest.raises(TensorShapeError):
            SpectrogramVAE(tiny_config.vae, 18, rng)

    def test_shapes(self, vae, rng):
        mu, logvar, z = vae_encode(vae, random_mels(rng), rng)
        assert mu.shape == logvar.shape == z.shape == (2, 2, 4, 12)
        assert vae.latent_shape(48) == (2, 4, 12)
        assert vae.decode(z).shape == (2, 16, 48)

    def test_frames_divisible_by_four(self, vae, rng):
        with pytest.raises(TensorShapeError):
            vae.encode(random_mels(rng, frames=46))

    def test_decode_checks_latent(self, vae):
        with pytest.raises(TensorShapeError):
            vae.decode(np.zeros((1, 3, 4, 12), dtype=np.float32))

    def test_eval_uses_mean(self, vae, rng):
        mu, logvar = vae.encode(random_mels(rng))
        assert vae.eval().sample(mu, logvar, rng) is mu
        sampled = vae.train().sample(mu, logvar, rng)
        assert not np.allclose(sampled.data, mu.data)

    def test_vae_decode(self, vae, rng):
        mel = vae_decode(vae, rng.standard_normal((2, 4, 12)))
        assert isinstance(mel, MelSpectrogram)
        assert mel.values.shape == (16, 48)

    def test_kl_of_prior_is_zero(self):
        zeros = Tensor(np.zeros((1, 2, 4, 12)))
        assert kl_divergence(zeros, zeros).item() == pytest.approx(0.0)
        assert kl_divergence(zeros + 1.0, zeros).item() == pytest.approx(0.5)

    def test_loss_shape_mismatch(self, vae, rng):
        mu, logvar, z = vae_encode(vae, random_mels(rng))
        with pytest.raises(TensorShapeError):
            vae_loss(random_mels(rng, 3), vae.decode(z), mu, logvar)

    def test_loss_reaches_every_parameter(self, vae, rng):
        mels = random_mels(rng)
        mu, logvar, z = vae_encode(vae.train(), mels, rng)
        vae_loss(mels, vae.decode(z), mu, logvar, beta=0.1).backward()
        assert all(p.grad is not None for p in vae.parameters())

    @pytest.mark.slow
    def test_overfits_single_clip(self, vae, rng):
        mels = random_mels(rng, 1)
        optimizer = Adam(vae.parameters(), lr=3e-3)
        losses = []
        for _ in range(200):
            optimizer.zero_grad()
            mu, logvar, z = vae_encode(vae.train(), mels, rng)
            loss = vae_loss(mels, vae.decode(z), mu, logvar, beta=1e-3)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        assert losses[-1] < 0.5 * losses[0]


class TestContentEncoder:
    """Тесты маски и последовательности условий содержания."""

    def test_shapes(self, content_encoder, rng):
        mask, masked, sequence = content_encoder(random_mels(rng))
        assert mask.shape == masked.shape == (2, 16, 48)
        assert sequence.shape == (2, 12, 8)
        assert ((mask.data > 0) & (mask.data < 1)).all()

    def test_mask_only_attenuates(self, content_encoder, rng):
        mels = random_mels(rng)
        _, masked, _ = content_encoder(mels)
        log_floor = np.log(1e-5)
        assert (masked.data <= mels + 1e-5).all()
        assert (masked.data >= log_floor - 1e-5).all()

    def test_open_mask_is_identity(self, rng):
        mels = Tensor(random_mels(rng))
        opened = apply_mask(mels, Tensor(np.full(mels.shape, 40.0)), np.log(1e-5))
        np.testing.assert_allclose(opened.data, mels.data, atol=1e-5)

    def test_closed_mask_hits_floor(self, rng):
        mels = Tensor(random_mels(rng))
        closed = apply_mask(mels, Tensor(np.full(mels.shape, -40.0)), np.log(1e-5))
        np.testing.assert_allclose(closed.data, np.log(1e-5), rtol=1e-5)

    def test_mask_stays_inside_unit_interval(self):
        mask = mask_from_logits(Tensor(np.array([-80.0, -40.0, 0.0, 40.0, 80.0])))
        assert mask.dtype == np.float32
        assert ((mask.data > 0) & (mask.data < 1)).all()
        assert mask.data[2] == pytest.approx(0.5)

    def test_filter_suppresses_noise_bands(self, content_encoder):
        """Фильтр с закрытыми верхними полосами убирает шум из них."""
        log_floor = np.log(1e-5)
        clean = np.full((1, 16, 48), log_floor, dtype=np.float32)
        clean[:, :8] = -1.0
        noisy = clean.copy()
        noisy[:, 8:] = -2.0
        layer = content_encoder.filter_out
        layer.weight.data = np.zeros_like(layer.weight.data)
        layer.bias.data = np.repeat([40.0, -40.0], 8).astype(np.float32)
        content_encoder.eval()

        _, masked, noisy_sequence = content_encoder(noisy)
        _, _, clean_sequence = content_encoder(clean)
        np.testing.assert_allclose(masked.data, clean, atol=1e-5)
        np.testing.assert_allclose(noisy_sequence.data, clean_sequence.data, atol=1e-5)

    def test_frames_divisible_by_four(self, content_encoder, rng):
        with pytest.raises(TensorShapeError):
            content_encoder(random_mels(rng, frames=50))

    def test_content_encode(self, content_encoder, rng):
        conditioning = content_encode(content_encoder, random_mels(rng, 1)[0])
        assert isinstance(conditioning, ContentConditioning)
        assert conditioning.sequence.shape == (12, 8)
        assert conditioning.mask.shape == (16, 48)
        assert not content_encoder.training
