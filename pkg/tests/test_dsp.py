import math
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mssenet.dsp import (
    DspConfig,
    FeatureRecordError,
    MfccMatrix,
    TooShortError,
    Utterance,
    WavFormatError,
    build_mel_filterbank,
    extract_mfcc,
    frame_and_window,
    frame_params,
    hamming,
    hz_to_mel,
    load_wav,
    mel_to_hz,
    n_frames,
    power_spectrum,
    read_feature_record,
    write_feature_record,
    write_wav,
)
from mssenet.numerics import ConfigurationError


class TestWav:
    @pytest.mark.parametrize("fmt,tol", [("pcm16", 2 ** -15), ("pcm24", 2 ** -23), ("pcm32", 2 ** -31),
                                         ("float32", 1e-7)])
    def test_round_trip(self, tmp_path, rng, fmt, tol):
        x = rng.uniform(-0.9, 0.9, 501)
        write_wav(tmp_path / "a.wav", x, 22050, fmt)
        u = load_wav(tmp_path / "a.wav")
        assert u.sample_rate == 22050
        assert np.max(np.abs(u.samples - x)) <= tol

    def test_stereo_is_averaged(self, tmp_path):
        frames = np.array([[1000, -1000], [2000, 0], [0, 4000]], dtype="<i2")
        with wave.open(str(tmp_path / "s.wav"), "wb") as w:
            w.setnchannels(2)
            w.setsampwidth(2)
            w.setframerate(8000)
            w.writeframes(frames.tobytes())
        u = load_wav(tmp_path / "s.wav")
        np.testing.assert_array_equal(u.samples, np.array([0, 1000, 2000]) / 32768.0)

    def test_extensible_float(self, tmp_path):
        payload = np.array([0.25, -0.5], dtype="<f4").tobytes()
        fmt = struct.pack("<HHIIHH", 0xFFFE, 1, 16000, 64000, 4, 32)
        fmt += struct.pack("<HHI", 22, 32, 0) + struct.pack("<H", 3) + b"\x00" * 14
        body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", 8) + payload
        (tmp_path / "e.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        np.testing.assert_array_equal(load_wav(tmp_path / "e.wav").samples, [0.25, -0.5])

    def test_unknown_chunks_are_skipped(self, tmp_path, rng):
        write_wav(tmp_path / "a.wav", rng.uniform(-0.5, 0.5, 100), 16000, "pcm24")
        raw = (tmp_path / "a.wav").read_bytes()
        extra = b"LIST" + struct.pack("<I", 5) + b"abcde\x00"
        patched = raw[:12] + extra + raw[12:]
        (tmp_path / "b.wav").write_bytes(patched[:4] + struct.pack("<I", len(patched) - 8) + patched[8:])
        assert np.array_equal(load_wav(tmp_path / "b.wav").samples, load_wav(tmp_path / "a.wav").samples)

    @pytest.mark.parametrize("raw,offset", [(b"RIFX" + b"\0" * 40, 0), (b"RIFF\0\0\0\0WAVX" + b"\0" * 30, 8)])
    def test_malformed_header_reports_offset(self, tmp_path, raw, offset):
        (tmp_path / "bad.wav").write_bytes(raw)
        with pytest.raises(WavFormatError) as err:
            load_wav(tmp_path / "bad.wav")
        assert err.value.offset == offset

    def test_unsupported_encoding(self, tmp_path):
        fmt = struct.pack("<HHIIHH", 1, 1, 8000, 8000, 1, 8)
        body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 2) + b"\x80\x80"
        (tmp_path / "u8.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(WavFormatError, match="unsupported"):
            load_wav(tmp_path / "u8.wav")


class TestFraming:
    def test_frame_params_at_16k(self):
        assert frame_params(16000, 50.0, 12.5) == (800, 200)

    def test_too_short(self):
        with pytest.raises(TooShortError):
            frame_and_window(Utterance(np.ones(799), 16000))

    def test_periodic_hamming(self):
        L = 800
        expected = [0.54 - 0.46 * math.cos(2 * math.pi * n / L) for n in range(L)]
        np.testing.assert_allclose(hamming(L), expected, atol=1e-15)

    def test_frames_are_windowed_slices(self, rng):
        x = rng.normal(size=2000)
        f = frame_and_window(Utterance(x, 16000))
        np.testing.assert_array_equal(f[2], x[400:1200] * hamming(800))

    def test_fft_longer_than_frame_required(self):
        with pytest.raises(ConfigurationError):
            power_spectrum(np.ones((1, 3000)), 2048)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 20000), L=st.integers(1, 1200), H=st.integers(1, 400))
def test_frame_count_law(n, L, H):
    if n < L:
        with pytest.raises(TooShortError):
            n_frames(n, L, H)
    else:
        count = n_frames(n, L, H)
        assert (count - 1) * H + L <= n < count * H + L


class TestMel:
    def test_mel_scale_inverse(self):
        f = np.linspace(0, 8000, 17)
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
        assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.5)

    def test_filterbank_shape_and_triangles(self):
        fb = build_mel_filterbank(16000)
        assert fb.weights.shape == (40, 1025)
        assert np.all(fb.weights >= 0) and np.all(fb.weights.max(axis=1) <= 1.0)
        assert np.all(np.diff(fb.center_hz) > 0)
        assert np.all(np.diff(hz_to_mel(fb.center_hz)) == pytest.approx(np.diff(hz_to_mel(fb.center_hz))[0]))

    def test_too_few_filters(self):
        with pytest.raises(ConfigurationError):
            build_mel_filterbank(16000, n_filters=39)
        with pytest.raises(ConfigurationError):
            DspConfig(n_filters=20)

    def test_empty_filter_rejected(self):
        with pytest.raises(ConfigurationError, match="cover no FFT bin"):
            build_mel_filterbank(16000, n_filters=200, fft_size=256)

    def test_rate_mismatch(self):
        fb = build_mel_filterbank(8000)
        with pytest.raises(ConfigurationError):
            extract_mfcc(Utterance(np.ones(16000), 16000), fb)


class TestMfcc:
    def test_shape_and_dtype(self, rng):
        m = extract_mfcc(Utterance(rng.normal(size=16000), 16000), build_mel_filterbank(16000))
        assert m.coeffs.shape == (77, 39) and m.coeffs.dtype == np.float32

    def test_silence_is_finite(self):
        m = extract_mfcc(Utterance(np.zeros(8000), 16000), build_mel_filterbank(16000))
        assert np.all(np.isfinite(m.coeffs))
        assert m.coeffs[0, 0] == pytest.approx(math.sqrt(40) * math.log(1e-10), rel=1e-6)

    def test_fingerprint_tracks_settings(self):
        assert DspConfig().fingerprint() == DspConfig().fingerprint()
        assert DspConfig().fingerprint() != DspConfig(hop_ms=10.0).fingerprint()


class TestFeatureRecord:
    def test_round_trip(self, tmp_path, rng):
        m = MfccMatrix(rng.normal(size=(11, 39)).astype(np.float32), 50.0, 12.5, 16000, "x")
        write_feature_record(tmp_path / "r.msse", m)
        back = read_feature_record(tmp_path / "r.msse", "x")
        assert np.array_equal(back.coeffs, m.coeffs)
        assert (back.frame_ms, back.hop_ms, back.sample_rate) == (50.0, 12.5, 16000)

    def test_corruption_detected(self, tmp_path, rng):
        m = MfccMatrix(rng.normal(size=(3, 39)).astype(np.float32), 50.0, 12.5, 16000)
        write_feature_record(tmp_path / "r.msse", m)
        raw = (tmp_path / "r.msse").read_bytes()
        (tmp_path / "bad.msse").write_bytes(b"XXXX" + raw[4:])
        (tmp_path / "short.msse").write_bytes(raw[:-4])
        with pytest.raises(FeatureRecordError, match="magic"):
            read_feature_record(tmp_path / "bad.msse")
        with pytest.raises(FeatureRecordError, match="bytes"):
            read_feature_record(tmp_path / "short.msse")
