import struct
import wave

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ont.signal_io import (PCM16, SYNTH_KINDS, SynthSpec, Waveform, WavFormatError, overlay_noise,
                           read_wav, synth_clean, synth_white_noise, write_wav)


def energy(x):
    return float(np.dot(x, x))


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 3)), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)
    w = Waveform([0.1, 0.2], 8000)
    assert not w.samples.flags.writeable and w.duration_s == 2 / 8000


@given(st.lists(st.floats(-1.0, 1.0, width=32), min_size=1, max_size=300),
       st.sampled_from([8000, 16000, 44100]))
def test_float32_round_trip_is_bit_exact(tmp_path_factory, values, rate):
    p = tmp_path_factory.mktemp("wav") / "x.wav"
    w = Waveform(np.array(values, dtype=np.float32), rate)
    write_wav(w, p)
    back = read_wav(p)
    assert back.sample_rate_hz == rate
    assert np.array_equal(back.samples.astype(np.float32).view(np.uint32),
                          np.array(values, dtype=np.float32).view(np.uint32))


def test_pcm16_matches_stdlib_reader(tmp_path, rng):
    x = np.clip(rng.standard_normal(501) * 0.3, -1, 1)
    p = tmp_path / "a.wav"
    write_wav(Waveform(x, 16000), p, PCM16)
    with wave.open(str(p)) as fh:
        assert fh.getnchannels() == 1 and fh.getsampwidth() == 2 and fh.getframerate() == 16000
        ref = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2") / 32768.0
    back = read_wav(p)
    np.testing.assert_array_equal(back.samples, ref)
    assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768 + 1e-15


def test_pcm16_clamps_full_scale(tmp_path):
    p = tmp_path / "c.wav"
    write_wav(Waveform([1.0, -1.0, 2.0], 8000), p, PCM16)
    np.testing.assert_array_equal(read_wav(p).samples, [32767 / 32768, -1.0, 32767 / 32768])


def _raw_wav(path, channels=1, tag=1, bits=16, payload=b"\0\0\0\0"):
    fmt = struct.pack("<HHIIHH", tag, channels, 8000, 8000 * channels * bits // 8, channels * bits // 8, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_read_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav at all")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "junk.wav")
    _raw_wav(tmp_path / "stereo.wav", channels=2)
    with pytest.raises(WavFormatError, match="mono"):
        read_wav(tmp_path / "stereo.wav")
    _raw_wav(tmp_path / "pcm24.wav", bits=24, payload=b"\0" * 6)
    with pytest.raises(WavFormatError, match="unsupported"):
        read_wav(tmp_path / "pcm24.wav")


def test_unknown_chunks_are_skipped(tmp_path):
    fmt = struct.pack("<HHIIHH", 1, 1, 8000, 16000, 2, 16)
    data = np.array([100, -200, 300], dtype="<i2").tobytes()
    body = (b"WAVE" + b"LIST" + struct.pack("<I", 3) + b"abc\0" + b"fmt " + struct.pack("<I", 16) + fmt
            + b"data" + struct.pack("<I", len(data)) + data)
    (tmp_path / "l.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    np.testing.assert_array_equal(read_wav(tmp_path / "l.wav").samples, np.array([100, -200, 300]) / 32768)


@pytest.mark.parametrize("kind", SYNTH_KINDS)
def test_synth_is_deterministic_and_normalized(kind):
    spec = SynthSpec(kind, 0.5, 180.0, seed=4)
    a, b = synth_clean(spec, 8000), synth_clean(spec, 8000)
    assert np.array_equal(a.samples, b.samples)
    assert len(a) == 4000
    assert np.max(np.abs(a.samples)) == pytest.approx(0.5)
    c = synth_clean(SynthSpec(kind, 0.5, 180.0, seed=5), 8000)
    assert not np.array_equal(a.samples, c.samples)


def test_synth_rejects_bad_specs():
    with pytest.raises(ValueError):
        synth_clean(SynthSpec("harmonic-stack", 0.01, 100.0), 8000, min_length=512)
    with pytest.raises(ValueError):
        synth_clean(SynthSpec("harmonic-stack", 1.0, 5000.0), 8000)
    with pytest.raises(ValueError):
        synth_clean(SynthSpec("speech", 1.0, 100.0), 8000)


@given(st.floats(-20, 30), st.integers(0, 1000), st.integers(50, 3000), st.booleans())
def test_overlay_hits_requested_snr(snr, seed, noise_len, offset):
    clean = synth_clean(SynthSpec("harmonic-stack", 0.25, 150.0, seed), 8000)
    noise = synth_white_noise(noise_len, seed + 1, 8000)
    mix = overlay_noise(clean, noise, snr, random_offset=offset, seed=seed)
    r = mix.samples - clean.samples
    measured = 10 * np.log10(energy(clean.samples) / energy(r))
    assert abs(measured - snr) < 1e-6


def test_overlay_tiles_short_noise():
    clean = Waveform(np.ones(10), 8000)
    mix = overlay_noise(clean, Waveform([1.0, -1.0, 2.0], 8000), 0.0)
    r = mix.samples - 1.0
    np.testing.assert_allclose(r / r[0], [1, -1, 2, 1, -1, 2, 1, -1, 2, 1])


def test_overlay_errors():
    c = Waveform(np.ones(8), 8000)
    with pytest.raises(ValueError, match="sample rate"):
        overlay_noise(c, Waveform(np.ones(8), 16000), 5.0)
    with pytest.raises(ValueError, match="silent"):
        overlay_noise(Waveform(np.zeros(8), 8000), Waveform(np.ones(8), 8000), 5.0)
    with pytest.raises(ValueError, match="silent"):
        overlay_noise(c, Waveform(np.zeros(8), 8000), 5.0)
