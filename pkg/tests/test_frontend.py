"""Front-end tests: WAV decoding, mel filterbank, log-mel extraction,
and the brute-force DFT oracle."""

import struct
import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sqatk import frontend as fe

SR = 48000
CFG = fe.FrontendConfig()


def write_pcm16(path, samples, rate=SR, channels=1):
    data = np.asarray(samples)
    if channels == 2 and data.ndim == 1:
        data = np.stack([data, data], axis=1)
    ints = np.clip(data * 32768.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(ints.tobytes())


def write_float32(path, samples, rate=SR):
    """Minimal RIFF writer for IEEE float WAVs (stdlib wave cannot)."""
    payload = np.asarray(samples, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, rate, rate * 4, 4, 32)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)


# ------------------------------------------------------------------ decode


def test_decode_silence(tmp_path):
    path = tmp_path / "silence.wav"
    write_pcm16(path, np.zeros(SR))
    clip = fe.decode_wav(path)
    assert clip.sample_rate == SR
    assert len(clip.samples) == SR
    assert np.all(clip.samples == 0.0)


def test_decode_int16_scale_boundary(tmp_path):
    path = tmp_path / "min.wav"
    ints = np.array([-32768, 0, 32767], dtype="<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SR)
        fh.writeframes(ints.tobytes())
    clip = fe.decode_wav(path)
    assert clip.samples[0] == -1.0
    assert clip.samples[1] == 0.0
    assert clip.samples[2] == pytest.approx(32767 / 32768)


def test_decode_sine_roundtrip(tmp_path):
    t = np.arange(int(0.5 * SR)) / SR
    sine = np.sin(2 * np.pi * 440.0 * t)
    path = tmp_path / "sine.wav"
    write_pcm16(path, sine)
    clip = fe.decode_wav(path)
    assert len(clip.samples) == 24000
    assert abs(clip.samples.max() - 1.0) < 1e-3
    assert np.abs(clip.samples - sine).max() < 1e-3  # 16-bit quantization


def test_decode_stereo_averages(tmp_path):
    left = np.full(100, 0.5)
    data = np.stack([left, -left], axis=1)
    path = tmp_path / "stereo.wav"
    write_pcm16(path, data, channels=2)
    clip = fe.decode_wav(path)
    assert np.abs(clip.samples).max() < 1e-4


def test_decode_float32(tmp_path):
    path = tmp_path / "float.wav"
    values = np.array([0.25, -0.75, 1.0], dtype=np.float32)
    write_float32(path, values)
    clip = fe.decode_wav(path)
    np.testing.assert_allclose(clip.samples, values, atol=0)


def test_decode_rejects_wrong_rate(tmp_path):
    path = tmp_path / "rate.wav"
    write_pcm16(path, np.zeros(100), rate=16000)
    with pytest.raises(fe.SampleRateError):
        fe.decode_wav(path)


def test_decode_rejects_malformed(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFFxxxxNOPE")
    with pytest.raises(fe.WavFormatError):
        fe.decode_wav(path)


def test_decode_rejects_unsupported_codec(tmp_path):
    path = tmp_path / "ulaw.wav"
    fmt = struct.pack("<HHIIHH", 7, 1, SR, SR, 1, 8)  # mu-law
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", 4) + b"\x00\x00\x00\x00"
    path.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)
    with pytest.raises(fe.WavFormatError, match="codec"):
        fe.decode_wav(path)


# -------------------------------------------------------------- filterbank


def test_filterbank_shape():
    fb = fe.mel_filterbank(128, 2048, SR)
    assert fb.shape == (128, 1025)
    assert (fb >= 0).all()
    assert (fb.sum(axis=1) > 0).all()


def test_mel_formula_value():
    # mel(f) = 2595 * log10(1 + f / 700); evaluated independently
    assert fe.hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0), abs=1e-6)
    assert float(fe.hz_to_mel(700.0)) == pytest.approx(781.17, abs=0.01)


def test_filter_peaks_strictly_increasing():
    centers = fe.mel_filter_centers(128, SR)
    assert (np.diff(centers) > 0).all()


def test_filterbank_rejects_too_many_filters():
    with pytest.raises(fe.FeatureError, match="no positive weight"):
        fe.mel_filterbank(512, 64, SR)


def test_filterbank_requires_power_of_two():
    with pytest.raises(fe.FeatureError, match="power of two"):
        fe.mel_filterbank(16, 1000, SR)


def test_hann_window_exactly_symmetric():
    for n in (1200, 101, 64):
        w = fe.hann_window(n)
        assert np.array_equal(w, w[::-1])


# ------------------------------------------------------------ spectrogram


def test_silence_spectrogram():
    clip = fe.AudioClip(np.zeros(SR), SR)
    spec = fe.log_mel_spectrogram(clip)
    # frame count: floor((48000 - 1200) / 480) + 1 == 98
    assert spec.n_frames == (48000 - 1200) // 480 + 1 == 98
    assert np.all(spec.values == np.log(1e-10))


def test_sine_argmax_at_nearest_center():
    t = np.arange(SR) / SR
    clip = fe.AudioClip(0.8 * np.sin(2 * np.pi * 1000.0 * t), SR)
    spec = fe.log_mel_spectrogram(clip)
    arg = spec.values[2:-2].argmax(axis=1)
    assert len(set(arg.tolist())) == 1
    # independent center computation from the mel formula
    mel_pts = np.linspace(0.0, 2595.0 * np.log10(1.0 + 24000.0 / 700.0), 130)
    centers = 700.0 * (10.0 ** (mel_pts[1:-1] / 2595.0) - 1.0)
    assert arg[0] == int(np.argmin(np.abs(centers - 1000.0)))


def test_amplitude_doubling_adds_log4():
    rng = np.random.default_rng(7)
    base = 0.3 * rng.standard_normal(9600)
    base = np.clip(base, -0.49, 0.49)
    spec1 = fe.log_mel_spectrogram(fe.AudioClip(base, SR)).values
    spec2 = fe.log_mel_spectrogram(fe.AudioClip(2.0 * base, SR)).values
    floor = np.log(1e-10)
    above = (spec1 > floor + 1e-6) & (spec2 > floor + 1e-6)
    assert above.any()
    np.testing.assert_allclose((spec2 - spec1)[above], np.log(4.0), atol=1e-9)


def test_too_short_clip_rejected():
    with pytest.raises(fe.FeatureError, match="shorter"):
        fe.log_mel_spectrogram(fe.AudioClip(np.zeros(1199), SR))


def test_output_always_finite(rng):
    clip = fe.AudioClip(rng.uniform(-1, 1, size=4800), SR)
    values = fe.log_mel_spectrogram(clip).values
    assert np.isfinite(values).all()


@given(st.integers(min_value=1200, max_value=60000))
def test_frame_count_formula(num_samples):
    clip = fe.AudioClip(np.full(num_samples, 0.01), SR)
    spec = fe.log_mel_spectrogram(clip)
    assert spec.n_frames == (num_samples - 1200) // 480 + 1


# ------------------------------------------------------------- DFT oracle


def naive_log_mel(samples, config=CFG):
    """Brute-force O(N^2) DFT oracle sharing only window and filterbank."""
    win = config.window_samples
    hop = config.hop_samples
    window = fe.hann_window(win)
    n_frames = (len(samples) - win) // hop + 1
    k = np.arange(config.n_fft // 2 + 1)
    n = np.arange(win)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / config.n_fft)  # (bins, win)
    fb = fe.mel_filterbank(config.n_mels, config.n_fft, config.sample_rate)
    out = np.empty((n_frames, config.n_mels))
    for f in range(n_frames):
        seg = samples[f * hop : f * hop + win] * window
        spectrum = basis @ seg
        power = spectrum.real**2 + spectrum.imag**2
        out[f] = np.log(np.maximum(power @ fb.T, config.log_floor))
    return out


def test_against_naive_dft_oracle(rng):
    for trial in range(3):
        n = int(rng.integers(1200, int(0.2 * SR)))
        samples = np.clip(0.4 * rng.standard_normal(n), -1, 1)
        fast = fe.log_mel_spectrogram(fe.AudioClip(samples, SR)).values
        slow = naive_log_mel(samples)
        assert np.abs(fast - slow).max() < 1e-6


# ----------------------------------------------------------- feature cache


def test_feature_cache_roundtrip(tmp_path, rng):
    values = rng.normal(size=(37, 128))
    path = tmp_path / "clip.feat"
    fe.save_features(path, values)
    loaded = fe.load_features(path)
    assert loaded.shape == (37, 128)
    np.testing.assert_allclose(loaded, values, atol=1e-6)
    # header is two little-endian uint32
    frames, mels = struct.unpack("<II", path.read_bytes()[:8])
    assert (frames, mels) == (37, 128)


def test_feature_cache_rejects_truncated(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(struct.pack("<II", 10, 128) + b"\x00" * 16)
    with pytest.raises(fe.FeatureError, match="size"):
        fe.load_features(path)


def test_corpus_normalization():
    feats = [np.full((4, 2), 2.0), np.full((4, 2), 6.0)]
    mean, std = fe.corpus_normalization(feats)
    assert mean == pytest.approx(4.0)
    assert std == pytest.approx(2.0)
