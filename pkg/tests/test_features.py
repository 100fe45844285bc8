import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from siamrae.errors import DataError
from siamrae.evaluation import ScoredPair, average_precision, make_same_different_pairs
from siamrae.features import (
    AudioSignal,
    FbankConfig,
    ManifestRow,
    Normalizer,
    SegmentFeatures,
    SynthConfig,
    apply_normalizer,
    compute_fbank,
    fit_normalizer,
    load_manifest,
    load_wav,
    read_feature_cache,
    synth_corpus,
    write_feature_cache,
    write_manifest,
)


def _write_pcm(path, data, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(data)


class TestLoadWav:
    def test_one_second(self, tmp_path):
        pcm = (np.arange(16000) % 200 - 100).astype("<i2")
        _write_pcm(tmp_path / "a.wav", pcm.tobytes())
        sig = load_wav(tmp_path / "a.wav")
        assert sig.sample_rate == 16000
        assert sig.samples.size == 16000
        np.testing.assert_array_equal(sig.samples, pcm / 32768.0)

    def test_silence(self, tmp_path):
        _write_pcm(tmp_path / "z.wav", bytes(3200))
        assert not np.any(load_wav(tmp_path / "z.wav").samples)

    def test_extreme_values_in_range(self, tmp_path):
        _write_pcm(tmp_path / "x.wav", np.array([-32768, 32767], dtype="<i2").tobytes())
        s = load_wav(tmp_path / "x.wav").samples
        assert s.min() >= -1.0 and s.max() <= 1.0

    def test_stereo_rejected(self, tmp_path):
        _write_pcm(tmp_path / "s.wav", bytes(400), channels=2)
        with pytest.raises(DataError, match="unsupported channel count"):
            load_wav(tmp_path / "s.wav")

    def test_8bit_rejected(self, tmp_path):
        _write_pcm(tmp_path / "b.wav", bytes(100), width=1)
        with pytest.raises(DataError, match="unsupported encoding"):
            load_wav(tmp_path / "b.wav")

    def test_unreadable(self, tmp_path):
        with pytest.raises(DataError):
            load_wav(tmp_path / "missing.wav")
        (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
        with pytest.raises(DataError):
            load_wav(tmp_path / "junk.wav")


def _oracle_fbank_row(frame, sr, n_fft, n_mels, f_min, f_max):
    """Direct DFT of one windowed frame and loop-built triangular Mel filters."""
    n = len(frame)
    power = []
    for k in range(n_fft // 2 + 1):
        acc = 0j
        for t in range(n):
            acc += frame[t] * np.exp(-2j * np.pi * k * t / n_fft)
        power.append(abs(acc) ** 2)
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)  # noqa: E731
    lo_m, hi_m = mel(f_min), mel(f_max)
    edges = [inv(lo_m + i * (hi_m - lo_m) / (n_mels + 1)) for i in range(n_mels + 2)]
    energies = []
    for m in range(n_mels):
        a, c, b = edges[m], edges[m + 1], edges[m + 2]
        e = 0.0
        for k, p in enumerate(power):
            f = k * sr / n_fft
            if a < f < c:
                e += p * (f - a) / (c - a)
            elif c <= f < b:
                e += p * (b - f) / (b - c)
        energies.append(e)
    return np.array(energies)


class TestFbank:
    def test_frame_count(self):
        sig = AudioSignal(np.random.default_rng(0).uniform(-0.5, 0.5, 1680), 16000)
        fb = compute_fbank(sig)
        assert fb.shape == (9, 40)

    def test_single_window(self):
        assert compute_fbank(AudioSignal(np.ones(400) * 0.1, 16000)).shape == (1, 40)

    def test_too_short(self):
        with pytest.raises(DataError):
            compute_fbank(AudioSignal(np.zeros(399), 16000))

    def test_silence_is_constant_floor(self):
        fb = compute_fbank(AudioSignal(np.zeros(4000), 16000))
        np.testing.assert_array_equal(fb, np.full_like(fb, np.log(1e-10)))

    def test_sine_peak_matches_oracle(self):
        sr = 16000
        t = np.arange(1680) / sr
        sig = AudioSignal(0.5 * np.sin(2 * np.pi * 1000.0 * t), sr)
        fb = compute_fbank(sig)
        frame = sig.samples[:400] * np.hamming(400)
        oracle = _oracle_fbank_row(frame, sr, 512, 40, 20.0, sr / 2)
        assert np.argmax(fb[0]) == np.argmax(oracle)
        np.testing.assert_allclose(fb[0], np.log(np.maximum(oracle, 1e-10)), rtol=1e-9, atol=1e-9)
        # the winning filter's passband covers 1 kHz
        edges = 700.0 * (10 ** (np.linspace(2595 * np.log10(1 + 20 / 700), 2595 * np.log10(1 + 8000 / 700), 42) / 2595) - 1)
        k = np.argmax(fb[0])
        assert edges[k] < 1000.0 < edges[k + 2]

    @pytest.mark.parametrize("scale", [0.01, 0.3, 4.0])
    def test_amplitude_scaling_shifts_log_energy(self, scale):
        x = np.random.default_rng(1).uniform(-0.2, 0.2, 3000)
        base = compute_fbank(AudioSignal(x, 16000))
        scaled = compute_fbank(AudioSignal(x * scale, 16000))
        np.testing.assert_allclose(scaled - base, np.log(scale**2), atol=1e-6)

    def test_deterministic_and_configurable(self):
        x = np.random.default_rng(2).uniform(-1, 1, 8000)
        sig = AudioSignal(x, 8000)
        a = compute_fbank(sig, FbankConfig(n_mels=23))
        b = compute_fbank(sig, FbankConfig(n_mels=23))
        assert a.shape == (frame_n := (8000 - 200) // 80 + 1, 23) and frame_n == 98
        np.testing.assert_array_equal(a, b)


def _seg(frames, label="a", sid="x"):
    return SegmentFeatures(np.asarray(frames, dtype=float), label, sid)


class TestNormalizer:
    def test_two_points(self):
        n = fit_normalizer([_seg([[0, 0], [2, 2]])])
        np.testing.assert_array_equal(n.mean, [1, 1])
        np.testing.assert_array_equal(n.std, [1, 1])

    def test_constant_column_floored(self):
        n = fit_normalizer([_seg([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])])
        assert n.std[0] == 1e-8
        out = apply_normalizer(n, _seg([[5.0, 2.0]]))
        np.testing.assert_array_equal(out.frames, [[0.0, 0.0]])

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        segs = [_seg(rng.normal(3.0, 2.0, (t, 4)), sid=str(i)) for i, t in enumerate([30, 50, 20])]
        n = fit_normalizer(segs)
        rows = [r for s in segs for r in s.frames.tolist()]
        for j in range(4):
            col = [r[j] for r in rows]
            mu = sum(col) / len(col)
            var = sum((v - mu) ** 2 for v in col) / len(col)
            assert abs(n.mean[j] - mu) < 1e-10
            assert abs(n.std[j] - var**0.5) < 1e-10

    def test_self_application_standardizes(self):
        rng = np.random.default_rng(6)
        segs = [_seg(rng.normal(-1, 5, (25, 3)), sid=str(i)) for i in range(4)]
        n = fit_normalizer(segs)
        allf = np.concatenate([apply_normalizer(n, s).frames for s in segs])
        np.testing.assert_allclose(allf.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(allf.std(0), 1, atol=1e-12)

    def test_identity_and_mean_frame(self):
        x = _seg([[1.5, -2.0]], label="f")
        ident = Normalizer(np.zeros(2), np.ones(2))
        out = apply_normalizer(ident, x)
        np.testing.assert_array_equal(out.frames, x.frames)
        assert out.label == "f"
        n = Normalizer(np.array([1.5, -2.0]), np.array([3.0, 0.5]))
        np.testing.assert_array_equal(apply_normalizer(n, x).frames, [[0.0, 0.0]])

    def test_errors(self):
        with pytest.raises(DataError):
            fit_normalizer([])
        with pytest.raises(DataError):
            fit_normalizer([_seg([[1.0, 2.0]])])
        n = Normalizer(np.zeros(3), np.ones(3))
        with pytest.raises(DataError, match="expects 3"):
            apply_normalizer(n, _seg([[1.0, 2.0]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)))
    def test_round_trip(self, frames):
        n = fit_normalizer([_seg(frames)])
        back = n.invert(apply_normalizer(n, _seg(frames)).frames)
        np.testing.assert_allclose(back, frames, atol=1e-10 * max(1.0, np.abs(frames).max()))


class TestManifest:
    def _store(self):
        rng = np.random.default_rng(0)
        return {"utt1": rng.standard_normal((50, 40)), "utt2": rng.standard_normal((30, 40))}

    def _write(self, path, rows):
        write_manifest(path, [ManifestRow(*r) for r in rows])

    def test_span_arithmetic(self, tmp_path):
        store = self._store()
        self._write(tmp_path / "m.tsv", [("utt1", "seg1", "spkA", "f", 0.10, 0.25)])
        (seg,) = load_manifest(tmp_path / "m.tsv", store)
        assert seg.num_frames == 15 and seg.label == "f" and seg.speaker_id == "spkA"
        np.testing.assert_array_equal(seg.frames, store["utt1"][10:25])

    def test_order_preserved(self, tmp_path):
        rows = [("utt2", "b", "s", "k", 0.0, 0.05), ("utt1", "a", "s", "f", 0.2, 0.3), ("utt2", "c", "s", "s", 0.1, 0.3)]
        self._write(tmp_path / "m.tsv", rows)
        segs = load_manifest(tmp_path / "m.tsv", self._store())
        assert [s.segment_id for s in segs] == ["b", "a", "c"]
        assert [s.num_frames for s in segs] == [5, 10, 20]

    @pytest.mark.parametrize(
        "row, msg",
        [
            (("utt1", "x", "s", "f", 0.25, 0.10), "end"),
            (("utt1", "x", "s", "f", 0.2, 0.2), "end"),
            (("utt1", "x", "s", "f", 0.40, 0.60), "outside"),
            (("nope", "x", "s", "f", 0.0, 0.1), "unknown audio id"),
            (("utt1", "x", "s", "f", 0.100, 0.104), "empty slice"),
        ],
    )
    def test_errors(self, tmp_path, row, msg):
        self._write(tmp_path / "m.tsv", [row])
        with pytest.raises(DataError, match=msg):
            load_manifest(tmp_path / "m.tsv", self._store())

    def test_bad_field_count(self, tmp_path):
        (tmp_path / "m.tsv").write_text("utt1\tx\tf\t0.1\t0.2\n")
        with pytest.raises(DataError, match="fields"):
            load_manifest(tmp_path / "m.tsv", self._store())


def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    segs = [SegmentFeatures(rng.standard_normal((t, 5)).astype(np.float32).astype(float), f"l{t}", f"id{t}", "spk") for t in (1, 4, 9)]
    write_feature_cache(tmp_path / "c.feat", segs)
    back = read_feature_cache(tmp_path / "c.feat")
    for a, b in zip(segs, back):
        assert (a.label, a.segment_id, a.speaker_id) == (b.label, b.segment_id, b.speaker_id)
        np.testing.assert_array_equal(a.frames, b.frames)
    write_feature_cache(tmp_path / "d.feat", back)
    assert (tmp_path / "c.feat").read_bytes() == (tmp_path / "d.feat").read_bytes()


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(n_classes=3, segments_per_class=5, feature_dim=4, seed=7)
        a, b = synth_corpus(cfg).segments, synth_corpus(cfg).segments
        assert [s.segment_id for s in a] == [s.segment_id for s in b]
        assert b"".join(s.frames.tobytes() for s in a) == b"".join(s.frames.tobytes() for s in b)
        c = synth_corpus(SynthConfig(n_classes=3, segments_per_class=5, feature_dim=4, seed=8)).segments
        assert not np.array_equal(a[0].frames, c[0].frames) or a[0].num_frames != c[0].num_frames

    def test_lengths_and_labels(self):
        corp = synth_corpus(SynthConfig(n_classes=4, segments_per_class=50, feature_dim=2, length_range=(3, 6), seed=1))
        lengths = {s.num_frames for s in corp.segments}
        assert lengths == {3, 4, 5, 6}
        assert [s.label for s in corp.segments[:50]] == ["p00"] * 50
        assert len({s.segment_id for s in corp.segments}) == 200

    def test_noise_free_templates(self):
        cfg = SynthConfig(n_classes=3, segments_per_class=4, feature_dim=5, length_range=(12, 12), noise_std=0.0, class_separation=2.0, seed=2)
        segs = synth_corpus(cfg).segments
        by_class = [[s.frames for s in segs if s.label == f"p{c:02d}"] for c in range(3)]
        for frames in by_class:
            within = [np.linalg.norm(a - b) for i, a in enumerate(frames) for b in frames[i + 1 :]]
            assert np.mean(within) == 0.0
        across = [np.linalg.norm(by_class[i][0] - by_class[j][0]) for i in range(3) for j in range(i + 1, 3)]
        assert min(across) > 0

    def test_zero_separation_gives_chance_ap(self):
        cfg = SynthConfig(n_classes=4, segments_per_class=1500, feature_dim=6, length_range=(3, 5), class_separation=0.0, noise_std=1.0, seed=3)
        segs = synth_corpus(cfg).segments
        ev, ref = segs[0::2], segs[1::2]
        pairs = make_same_different_pairs(ev, ref, seed=0)
        prior = np.mean([p.label for p in pairs])
        mean_feat = lambda s: s.frames.mean(0)  # noqa: E731
        feature_scored = [
            ScoredPair(i, float(np.dot(mean_feat(ev[p.eval_index]), mean_feat(ref[p.ref_index]))), p.label)
            for i, p in enumerate(pairs)
        ]
        rng = np.random.default_rng(9)
        random_scored = [ScoredPair(i, float(rng.random()), p.label) for i, p in enumerate(pairs)]
        ap_feat, ap_rand = average_precision(feature_scored), average_precision(random_scored)
        assert abs(ap_rand - prior) < 0.05
        assert abs(ap_feat - ap_rand) < 0.05

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_classes=1), dict(length_range=(0, 3)), dict(length_range=(5, 3)), dict(noise_std=-1.0), dict(class_separation=-0.1)],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)
