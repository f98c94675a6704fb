"""Тесты процедурного симулятора сцен."""
import numpy as np
import pytest
from scipy import signal

from src.exceptions import InputError, UsageError
from src.scenes import (
    SCENARIOS, BackgroundKind, ContentSpec, Gender, NoteSegment, SceneClass,
    SceneSpec, compose_scene, draw_scene, draw_side_scene, make_content,
    make_speaker, parse_caption, render_caption, scenario_label, speaker_roster,
    sub_seed, synth_background, synth_rir, synth_speech
)

SR = 16000


def estimate_f0(samples: np.ndarray, sample_rate: int = SR) -> float:
    """Основной тон по пику смещенной автокорреляции в диапазоне 60-400 Гц."""
    x = samples.astype(np.float64) - samples.mean()
    corr = signal.correlate(x, x, mode="full", method="fft")[len(x) - 1:] / len(x)
    low, high = sample_rate // 400, sample_rate // 60
    lag = low + int(np.argmax(corr[low:high]))
    return sample_rate / lag


def flatness(samples: np.ndarray) -> float:
    _, power = signal.welch(samples.astype(np.float64), fs=SR, nperseg=512)
    power = power[1:]
    return float(np.exp(np.mean(np.log(power))) / np.mean(power))


class TestSpeakers:
    """Тесты синтетических дикторов и речи."""

    def test_genders_alternate(self):
        roster = speaker_roster(8)
        assert [s.gender for s in roster[:2]] == [Gender.MALE, Gender.FEMALE]
        assert all(100 <= s.f0_hz <= 140 for s in roster if s.gender is Gender.MALE)
        assert all(180 <= s.f0_hz <= 240 for s in roster if s.gender is Gender.FEMALE)

    def test_speakers_are_distinct(self):
        f0s = [s.f0_hz for s in speaker_roster(8)]
        assert len(set(f0s)) == 8

    def test_speaker_out_of_range(self):
        with pytest.raises(InputError):
            make_speaker(8, 8)

    @pytest.mark.parametrize("speaker_id", [0, 3])
    def test_pitch_matches_speaker(self, speaker_id):
        speaker = make_speaker(speaker_id, 8)
        steady = ContentSpec(0, (NoteSegment(1.0, 0.5, 0),))
        speech = synth_speech(speaker, steady, 0.5, seed=1)
        assert estimate_f0(speech.samples) == pytest.approx(speaker.f0_hz, rel=0.03)

    def test_speech_level_and_length(self):
        speech = synth_speech(make_speaker(1), make_content(2, 1.0), 1.0, seed=0)
        assert speech.num_samples == SR
        assert speech.rms() == pytest.approx(0.1, rel=1e-3)

    def test_content_is_deterministic(self):
        assert make_content(3, 1.0) == make_content(3, 1.0)
        assert make_content(3, 1.0) != make_content(4, 1.0)
        assert make_content(3, 0.5).duration == pytest.approx(0.5)

    def test_sub_seed_streams(self):
        assert sub_seed(1, 2) == sub_seed(1, 2)
        assert sub_seed(1, 2) != sub_seed(1, 3)


class TestBackgrounds:
    """Тесты фоновых звуков."""

    @pytest.mark.parametrize("kind", [k for k in BackgroundKind
                                      if k is not BackgroundKind.NONE])
    def test_unit_rms(self, kind):
        noise = synth_background(kind, 0.5, seed=4)
        assert noise.num_samples == 8000
        assert noise.rms() == pytest.approx(1.0, rel=1e-3)

    def test_none_is_usage_error(self):
        with pytest.raises(UsageError):
            synth_background(BackgroundKind.NONE, 1.0, seed=0)

    def test_spectral_flatness_ordering(self):
        white = flatness(synth_background(BackgroundKind.WHITE, 1.0, 0).samples)
        pink = flatness(synth_background(BackgroundKind.PINK, 1.0, 0).samples)
        hum = flatness(synth_background(BackgroundKind.AM_TONE, 1.0, 0).samples)
        assert white > 0.5
        assert pink < white
        assert hum < 0.1

    def test_engine_hum_modulation_rate(self):
        hum = synth_background(BackgroundKind.AM_TONE, 2.0, seed=2).samples
        envelope = np.abs(signal.hilbert(hum.astype(np.float64)))
        spectrum = np.abs(np.fft.rfft(envelope - envelope.mean()))
        freqs = np.fft.rfftfreq(len(envelope), d=1.0 / SR)
        assert freqs[int(np.argmax(spectrum))] == pytest.approx(4.0, abs=0.5)

    def test_deterministic_by_seed(self):
        a = synth_background(BackgroundKind.BABBLE, 0.25, seed=9).samples
        b = synth_background(BackgroundKind.BABBLE, 0.25, seed=9).samples
        np.testing.assert_array_equal(a, b)


class TestRIR:
    """Тесты синтетических импульсных характеристик."""

    def test_zero_t60_is_impulse(self):
        rir = synth_rir(0.0, seed=0)
        np.testing.assert_array_equal(rir.taps, [1.0])

    def test_energy_normalized(self):
        assert synth_rir(0.3, seed=1).energy == pytest.approx(1.0)

    @pytest.mark.parametrize("t60", [0.15, 0.3, 0.6])
    def test_decay_rate(self, t60):
        taps = synth_rir(t60, seed=5).taps[1:]
        t = np.arange(1, len(taps) + 1) / SR
        level_db = 10 * np.log10(taps ** 2 + 1e-30)
        slope = np.polyfit(t, level_db, 1)[0]
        assert slope == pytest.approx(-60.0 / t60, rel=0.1)

    def test_negative_t60(self):
        with pytest.raises(InputError):
            synth_rir(-0.1, seed=0)


class TestScenes:
    """Тесты описаний сцен, сценариев и подписей."""

    def test_clean_scene(self):
        scene = SceneSpec()
        assert scene.is_clean
        assert scene.scene_class is SceneClass.CLEAN
        assert scene.snr_db is None

    def test_noisy_scene_needs_snr(self):
        with pytest.raises(InputError):
            SceneSpec(BackgroundKind.PINK, 0.0, None)

    @pytest.mark.parametrize("scene_class", list(SceneClass))
    def test_draw_scene_class(self, scene_class, rng):
        scene = draw_scene(scene_class, rng)
        assert scene.scene_class is scene_class
        if scene.snr_db is not None:
            assert 4.0 <= scene.snr_db <= 20.0

    def test_env_side_is_never_clean(self, rng):
        assert all(not draw_side_scene("Env", rng).is_clean for _ in range(50))
        assert draw_side_scene("Clean", rng).is_clean

    def test_scenario_label(self, rng):
        env = draw_scene(SceneClass.REVERBERANT, rng)
        assert scenario_label(SceneSpec(), env) == "Clean→Env"
        assert scenario_label(env, SceneSpec()) == "Env→Clean"
        assert set(SCENARIOS) == {"Clean→Clean", "Clean→Env", "Env→Clean", "Env→Env"}

    def test_compose_clean_is_identity(self):
        speech = synth_speech(make_speaker(0), make_content(0, 0.5), 0.5, seed=0)
        assert compose_scene(speech, SceneSpec(), seed=1) is speech

    def test_compose_noisy_scene(self):
        speech = synth_speech(make_speaker(0), make_content(0, 0.5), 0.5, seed=0)
        wet = compose_scene(speech, SceneSpec(BackgroundKind.WHITE, 0.3, 10.0), seed=1)
        assert wet.num_samples == speech.num_samples
        assert not np.allclose(wet.samples, speech.samples)

    @pytest.mark.parametrize("scene,gender,caption", [
        (SceneSpec(), Gender.MALE, "A male speaks in a quiet room"),
        (SceneSpec(BackgroundKind.NONE, 0.6), Gender.FEMALE,
         "A female speaks in a cathedral"),
        (SceneSpec(BackgroundKind.BABBLE, 0.0, 8.0), Gender.MALE,
         "A male speaks in an open field with crowd murmur behind"),
        (SceneSpec(BackgroundKind.PINK, 0.15, 8.0), Gender.FEMALE,
         "A female speaks in a small office with steady rain behind"),
    ])
    def test_caption_template(self, scene, gender, caption):
        assert render_caption(scene, gender) == caption
        assert parse_caption(caption) == (gender, scene.background_kind,
                                          scene.t60_seconds)

    def test_parse_rejects_free_text(self):
        with pytest.raises(InputError):
            parse_caption("Birds sing in the morning")
