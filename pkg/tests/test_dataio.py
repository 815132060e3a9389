import numpy as np
import pytest
import scipy.ndimage

from multipitch.dataio import (
    DataError,
    SplitScheme,
    SynthSpec,
    Track,
    TrackRecord,
    load_audio,
    load_track,
    make_splits,
    read_manifest,
    read_wav,
    resample,
    synth_percussion,
    synth_track,
    write_manifest,
    write_wav,
)
from multipitch.spectral import SpectralConfig, compute_hcqt
from multipitch.targets import annotations_to_activations, blur_target
from multipitch.evaluation import peak_pick

from conftest import sine


class TestWavIo:
    def test_16bit_round_trip_within_one_lsb(self, tmp_path):
        rng = np.random.default_rng(0)
        audio = rng.uniform(-0.9, 0.9, size=2000).astype(np.float32)
        path = tmp_path / "a.wav"
        write_wav(path, audio, 22050, bits=16)
        back, rate = read_wav(path)
        assert rate == 22050
        assert np.max(np.abs(back[:, 0] - audio)) <= 1.0 / 32768.0

    def test_float32_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        audio = rng.uniform(-1, 1, size=500).astype(np.float32)
        path = tmp_path / "f.wav"
        write_wav(path, audio, 44100, bits=32)
        back, rate = read_wav(path)
        assert rate == 44100
        assert np.array_equal(back[:, 0], audio)

    def test_identity_rate_16bit_scaling(self, tmp_path):
        import struct

        payload = struct.pack("<4h", -32768, -16384, 16384, 32767)
        path = tmp_path / "raw.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 22050, 44100, 2, 16))
            fh.write(b"data" + struct.pack("<I", len(payload)) + payload)
        samples = load_audio(path)
        assert samples.tolist() == pytest.approx(
            [-1.0, -0.5, 0.5, 32767 / 32768], abs=1e-7
        )
        assert samples.size == 4

    def test_24bit_parsing(self, tmp_path):
        import struct

        # +2^22 encodes 0.5, -2^22 encodes -0.5
        vals = [(1 << 22), -(1 << 22)]
        payload = b"".join(
            int(v & 0xFFFFFF).to_bytes(3, "little") for v in (vals[0], vals[1] + (1 << 24))
        )
        path = tmp_path / "d24.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 22050, 3 * 22050, 3, 24))
            fh.write(b"data" + struct.pack("<I", len(payload)) + payload)
        samples, _ = read_wav(path)
        assert samples[:, 0].tolist() == pytest.approx([0.5, -0.5])

    def test_stereo_cancellation_downmix(self, tmp_path):
        audio = sine(440.0, seconds=0.05)
        stereo = np.stack([audio, -audio], axis=1)
        path = tmp_path / "s.wav"
        write_wav(path, stereo, 22050, bits=32)
        mono = load_audio(path)
        assert np.max(np.abs(mono)) == 0.0

    def test_resampled_sine_keeps_frequency(self, tmp_path):
        sr_in = 44100
        t = np.arange(sr_in) / sr_in
        audio = 0.8 * np.sin(2 * np.pi * 1000.0 * t)
        path = tmp_path / "r.wav"
        write_wav(path, audio, sr_in, bits=32)
        out = load_audio(path, target_rate=22050)
        # DFT peak oracle with quadratic interpolation around the maximum
        window = np.hanning(out.size)
        spectrum = np.abs(np.fft.rfft(out * window))
        k = int(spectrum.argmax())
        a, b, c = spectrum[k - 1 : k + 2]
        delta = 0.5 * (a - c) / (a - 2 * b + c)
        peak_hz = (k + delta) * 22050 / out.size
        assert abs(peak_hz - 1000.0) < 0.1

    def test_not_riff_rejected_with_offset(self, tmp_path):
        path = tmp_path / "x.wav"
        path.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(DataError, match=r"byte 0"):
            read_wav(path)

    def test_truncated_data_chunk_rejected(self, tmp_path):
        import struct

        path = tmp_path / "t.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 100) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 22050, 44100, 2, 16))
            fh.write(b"data" + struct.pack("<I", 1000) + b"\x00" * 10)
        with pytest.raises(DataError, match="truncated"):
            read_wav(path)

    def test_unsupported_format_rejected(self, tmp_path):
        import struct

        path = tmp_path / "u.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 36) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 7, 1, 22050, 22050, 1, 8))
            fh.write(b"data" + struct.pack("<I", 4) + b"\x00" * 4)
        with pytest.raises(DataError, match="unsupported format"):
            read_wav(path)


class TestSynthTrack:
    def test_constant_note_annotation(self):
        cfg = SpectralConfig()
        spec = SynthSpec(n_voices=1, duration=1.0, seed=5,
                         note_low_bin=240, note_high_bin=240, noise_floor=0.0)
        audio, ann = synth_track(spec, cfg)
        assert audio.size == 22050
        assert all(f.tolist() == [440.0] for f in ann.freqs)

    def test_zero_voices_is_silence(self):
        spec = SynthSpec(n_voices=0, duration=0.5, seed=1, noise_floor=0.0)
        audio, ann = synth_track(spec)
        assert np.all(audio == 0.0)
        assert all(f.size == 0 for f in ann.freqs)

    def test_peak_normalized(self):
        audio, _ = synth_track(SynthSpec(n_voices=3, duration=1.0, seed=2))
        assert np.abs(audio).max() == pytest.approx(0.9, rel=1e-5)

    def test_seed_determinism(self):
        a, _ = synth_track(SynthSpec(n_voices=2, duration=1.0, seed=9))
        b, _ = synth_track(SynthSpec(n_voices=2, duration=1.0, seed=9))
        assert np.array_equal(a, b)

    def test_two_voice_mixture_hcqt_peaks(self):
        # 220 Hz + 330 Hz played together: h=1 channel shows both F0 bins
        cfg = SpectralConfig()
        sr = cfg.sample_rate
        t = np.arange(sr) / sr
        audio = np.zeros_like(t)
        for f0 in (220.0, 330.0):
            for p in range(1, 9):
                audio += np.sin(2 * np.pi * p * f0 * t) / p
        audio *= 0.9 / np.abs(audio).max()
        hcqt = compute_hcqt(audio, cfg)
        ch1 = cfg.harmonics.index(1.0)
        mid = hcqt.n_frames // 2
        frame = hcqt.unit_db[ch1, :, mid]
        top = set(np.argsort(frame)[-2:].tolist())
        assert top == {180, 215}  # 60*log2(330/27.5) = 215.07 -> bin 215

    def test_oracle_closure_with_targets_and_picking(self):
        cfg = SpectralConfig(hop=512, f_min=55.0, bins_total=304)
        spec = SynthSpec(n_voices=3, duration=2.0, seed=21,
                         note_low_bin=5, note_high_bin=295)
        audio, ann = synth_track(spec, cfg)
        frame_times = np.arange(20) * (cfg.hop / cfg.sample_rate) + 0.4
        grid = annotations_to_activations(ann, frame_times, cfg)
        blurred = blur_target(grid)
        est = peak_pick(blurred, 0.5, cfg)
        from multipitch.evaluation import multipitch_metrics

        rep = multipitch_metrics(est, ann)
        assert rep.f1 == pytest.approx(1.0)


class TestSynthPercussion:
    def test_exact_length(self):
        rng = np.random.default_rng(0)
        assert synth_percussion(rng, 0.5).size == 11025

    def test_seed_determinism(self):
        a = synth_percussion(np.random.default_rng(3), 1.0)
        b = synth_percussion(np.random.default_rng(3), 1.0)
        assert np.array_equal(a, b)

    @staticmethod
    def has_persistent_peak(audio, sample_rate=22050, n_fft=2048, hop=512,
                            threshold_db=12.0, max_ms=100.0):
        frames = []
        for start in range(0, audio.size - n_fft, hop):
            mag = np.abs(np.fft.rfft(audio[start : start + n_fft] * np.hanning(n_fft)))
            med = scipy.ndimage.median_filter(mag, size=41, mode="nearest")
            frames.append(mag > med * 10 ** (threshold_db / 20.0))
        if not frames:
            return False
        flags = np.array(frames)
        max_frames = int(np.ceil(max_ms / 1000.0 * sample_rate / hop))
        run = np.zeros(flags.shape[1], dtype=int)
        for row in flags:
            run = np.where(row, run + 1, 0)
            if np.any(run > max_frames):
                return True
        return False

    def test_no_stable_harmonic_structure(self):
        rng = np.random.default_rng(100)
        for _ in range(100):
            clip = synth_percussion(rng, 1.0)
            assert not self.has_persistent_peak(clip)

    def test_oracle_flags_a_steady_tone(self):
        assert self.has_persistent_peak(sine(440.0, seconds=1.0))


class TestSplits:
    def _records(self, n_sup=34, n_val=4):
        recs = []
        for i in range(n_sup):
            recs.append(TrackRecord(id=f"sup{i:02d}", audio=SynthSpec(seed=i),
                                    roles=("train-supervised",)))
        for i in range(n_val):
            recs.append(TrackRecord(id=f"val{i:02d}", audio=SynthSpec(seed=100 + i),
                                    roles=("validation",)))
        return recs

    def test_t1t2_carves_disjoint_pools(self):
        split = make_splits(self._records(), SplitScheme(kind="t1t2", t2_size=10, seed=0))
        assert len(split.train_supervised) == 24
        assert len(split.train_ssl) == 10
        sup_ids = {r.id for r in split.train_supervised}
        ssl_ids = {r.id for r in split.train_ssl}
        assert sup_ids.isdisjoint(ssl_ids)
        assert all(r.roles == ("train-ssl",) for r in split.train_ssl)

    def test_same_seed_same_split(self):
        a = make_splits(self._records(), SplitScheme(kind="t1t2", t2_size=10, seed=3))
        b = make_splits(self._records(), SplitScheme(kind="t1t2", t2_size=10, seed=3))
        assert [r.id for r in a.train_ssl] == [r.id for r in b.train_ssl]

    def test_roles_scheme_with_no_ssl_is_reference_shape(self):
        split = make_splits(self._records(), SplitScheme(kind="roles"))
        assert split.train_ssl == []
        assert len(split.train_supervised) == 34

    def test_overlapping_assignment_rejected(self):
        recs = self._records()
        recs.append(TrackRecord(id="sup00", audio=SynthSpec(seed=0), roles=("validation",)))
        with pytest.raises(DataError, match="assigned to both"):
            make_splits(recs, SplitScheme(kind="roles"))

    def test_cross_corpus_scheme(self):
        recs = [
            TrackRecord(id=f"a/{i}", audio=SynthSpec(seed=i), roles=("train-supervised",),
                        corpus="a")
            for i in range(4)
        ] + [
            TrackRecord(id=f"b/{i}", audio=SynthSpec(seed=50 + i), roles=(), corpus="b")
            for i in range(3)
        ]
        split = make_splits(
            recs, SplitScheme(kind="cross", supervised_corpus="a", ssl_corpus="b")
        )
        assert len(split.train_supervised) == 4
        assert len(split.train_ssl) == 3
        assert all(r.roles == ("train-ssl",) for r in split.train_ssl)

    def test_t2_must_be_smaller_than_pool(self):
        with pytest.raises(DataError, match="t2_size"):
            make_splits(self._records(n_sup=5), SplitScheme(kind="t1t2", t2_size=5))


class TestRecordsAndManifest:
    def test_supervised_needs_annotation(self, tmp_path):
        with pytest.raises(ValueError, match="annotation"):
            TrackRecord(id="x", audio=str(tmp_path / "x.wav"), roles=("train-supervised",))

    def test_synth_records_are_self_annotating(self):
        rec = TrackRecord(id="s", audio=SynthSpec(seed=0), roles=("train-supervised",))
        track = load_track(rec)
        assert track.annotation is not None

    def test_manifest_round_trip(self, tmp_path):
        recs = [
            TrackRecord(id="a", audio="a.wav", annotation="a.tsv",
                        roles=("train-supervised",)),
            TrackRecord(id="b", audio="b.wav", annotation=None, roles=("train-ssl",)),
        ]
        path = tmp_path / "manifest.tsv"
        write_manifest(path, recs)
        back = read_manifest(path)
        assert [r.id for r in back] == ["a", "b"]
        assert back[0].annotation.endswith("a.tsv")
        assert back[1].annotation is None
        assert back[1].roles == ("train-ssl",)

    def test_missing_manifest_is_data_error(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_manifest(tmp_path / "nope.tsv")

    def test_malformed_manifest_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("only two\tfields\n")
        with pytest.raises(DataError, match="4 tab-separated"):
            read_manifest(path)


class TestTrackExcerpt:
    def test_short_track_padded(self, toy_config):
        audio, ann = synth_track(
            SynthSpec(n_voices=1, duration=0.5, seed=3, note_low_bin=5,
                      note_high_bin=295),
            toy_config,
        )
        track = Track(id="short", samples=audio, annotation=ann)
        tensor, excerpt = track.excerpt(0, 60, toy_config)
        assert tensor.unit_db.shape[-1] == 60
        assert excerpt.size == 60 * toy_config.hop

    def test_excerpt_times_are_absolute(self, toy_config):
        audio, _ = synth_track(SynthSpec(n_voices=1, duration=2.0, seed=4,
                                         note_low_bin=5, note_high_bin=295), toy_config)
        track = Track(id="t", samples=audio)
        tensor, _ = track.excerpt(10, 20, toy_config)
        assert tensor.frame_times[0] == pytest.approx(10 * toy_config.hop / 22050)
