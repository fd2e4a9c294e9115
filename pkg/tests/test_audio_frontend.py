from fractions import Fraction

import numpy as np
import pytest

from avsr.audio_frontend import (
    DECIMATION,
    FIXED_HOP_SAMPLES,
    FFT_SIZE,
    LOG_FLOOR,
    SAMPLE_RATE,
    WINDOW_SAMPLES,
    FrameRateMode,
    Waveform,
    build_mel_filterbank,
    compute_stft,
    extract_features,
    fixed_mode_output_frames,
    hann_window,
    hz_to_mel,
    log_mel,
    make_fixed_hop_schedule,
    make_variable_hop_schedule,
    mel_to_hz,
    stack_and_decimate,
    timestamp_drift,
)
from avsr.errors import (
    EmptyInput,
    InvalidFilterSpec,
    ShapeError,
    UnsupportedFrameRate,
    UnsupportedSampleRate,
)


def sine(freq_hz, duration_s=1.0, amp=0.5, sr=SAMPLE_RATE):
    t = np.arange(int(duration_s * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq_hz * t), sr)


class TestComputeStft:
    def test_silence_gives_98_zero_frames(self):
        w = Waveform(np.zeros(SAMPLE_RATE))
        spec = compute_stft(w, make_fixed_hop_schedule(w.samples.size))
        assert spec.shape == (98, FFT_SIZE // 2 + 1)
        assert np.all(np.abs(spec) == 0.0)

    def test_1khz_peak_bin_matches_brute_force_dft(self):
        w = sine(1000.0)
        plan = make_fixed_hop_schedule(w.samples.size)
        spec = compute_stft(w, plan)
        assert np.all(np.argmax(np.abs(spec), axis=1) == 32)

        # Independent oracle: naive DFT of the first windowed frame.
        frame = w.samples[:WINDOW_SAMPLES] * hann_window(WINDOW_SAMPLES)
        padded = np.zeros(FFT_SIZE)
        padded[:WINDOW_SAMPLES] = frame
        n = np.arange(FFT_SIZE)
        naive = np.array(
            [np.sum(padded * np.exp(-2j * np.pi * k * n / FFT_SIZE)) for k in range(257)]
        )
        assert np.argmax(np.abs(naive)) == 32
        np.testing.assert_allclose(spec[0], naive, atol=1e-9)

    def test_variable_mode_30fps_one_second(self):
        w = sine(440.0, duration_s=1.0)
        plan = make_variable_hop_schedule(30, num_video_frames=30)
        assert plan.offsets.size == 90
        spec = compute_stft(w, plan)
        # Tail windows overrun a signal that ends exactly with the video.
        assert 88 <= spec.shape[0] <= 90
        fs = extract_features(w, FrameRateMode.variable(30), num_video_frames=30)
        assert abs(fs.num_frames - 30) <= 1

    def test_too_short_raises(self):
        with pytest.raises(EmptyInput):
            make_fixed_hop_schedule(WINDOW_SAMPLES - 1)
        plan = make_fixed_hop_schedule(SAMPLE_RATE)
        with pytest.raises(EmptyInput):
            compute_stft(Waveform(np.zeros(100)), plan)

    def test_wrong_sample_rate_raises(self):
        w = Waveform(np.zeros(8000), sample_rate=8000)
        plan = make_fixed_hop_schedule(8000)
        with pytest.raises(UnsupportedSampleRate):
            compute_stft(w, plan)


class TestMelFilterbank:
    def test_single_filter_peaks_at_mel_midpoint(self):
        # Oracle: invert the mel map at the midpoint of [mel(0), mel(8000)].
        mid_hz = mel_to_hz((hz_to_mel(0.0) + hz_to_mel(8000.0)) / 2.0)
        assert abs(mid_hz - 1767.8) < 0.5  # frozen from the formula above
        fb = build_mel_filterbank(num_filters=1, low_hz=0.0, high_hz=8000.0)
        bin_hz = np.arange(FFT_SIZE // 2 + 1) * SAMPLE_RATE / FFT_SIZE
        peak_hz = bin_hz[np.argmax(fb.weights[0])]
        assert abs(peak_hz - mid_hz) <= SAMPLE_RATE / FFT_SIZE
        assert abs(fb.center_hz[0] - mid_hz) < 1e-6

    def test_band_fully_covered(self):
        fb = build_mel_filterbank()
        bin_hz = np.arange(FFT_SIZE // 2 + 1) * SAMPLE_RATE / FFT_SIZE
        inside = (bin_hz > fb.low_hz) & (bin_hz < fb.high_hz)
        covered = fb.weights.sum(axis=0) > 0
        assert np.all(covered[inside])

    def test_full_scale_shape_and_nonzero_rows(self):
        fb = build_mel_filterbank(num_filters=80)
        assert fb.weights.shape == (80, 257)
        assert np.all(fb.weights.sum(axis=1) > 0)
        assert np.all(np.diff(fb.center_hz) > 0)

    def test_each_row_has_single_peak(self):
        fb = build_mel_filterbank(num_filters=12)
        for row in fb.weights:
            support = np.flatnonzero(row)
            segment = row[support[0] : support[-1] + 1]
            diffs = np.sign(np.diff(segment))
            # rises then falls, no second rise after the first fall
            fall_starts = np.flatnonzero(diffs < 0)
            if fall_starts.size:
                assert np.all(diffs[fall_starts[0] :] <= 0)

    def test_invalid_bounds(self):
        with pytest.raises(InvalidFilterSpec):
            build_mel_filterbank(low_hz=4000.0, high_hz=1000.0)
        with pytest.raises(InvalidFilterSpec):
            build_mel_filterbank(high_hz=9000.0)
        with pytest.raises(InvalidFilterSpec):
            build_mel_filterbank(num_filters=0)


class TestLogMel:
    def test_zero_spectrogram_hits_floor(self):
        fb = build_mel_filterbank()
        out = log_mel(np.zeros((5, 257), dtype=complex), fb)
        np.testing.assert_allclose(out, np.log(LOG_FLOOR))
        assert abs(np.log(LOG_FLOOR) - (-27.631)) < 1e-3

    def test_amplitude_scaling_shifts_by_log4(self):
        fb = build_mel_filterbank()
        w = sine(700.0, duration_s=0.2, amp=0.25)
        w2 = Waveform(2.0 * w.samples)
        plan = make_fixed_hop_schedule(w.samples.size)
        a = log_mel(compute_stft(w, plan), fb, floor=0.0)
        b = log_mel(compute_stft(w2, plan), fb, floor=0.0)
        np.testing.assert_allclose(b - a, np.log(4.0), atol=1e-9)

    def test_tone_lands_in_nearest_filter(self):
        fb = build_mel_filterbank()
        w = sine(1000.0, duration_s=0.2)
        out = log_mel(compute_stft(w, make_fixed_hop_schedule(w.samples.size)), fb)
        expected = int(np.argmin(np.abs(fb.center_hz - 1000.0)))
        hits = np.argmax(out, axis=1)
        assert np.all(np.abs(hits - expected) <= 1)

    def test_shape_mismatch(self):
        fb = build_mel_filterbank()
        with pytest.raises(ShapeError):
            log_mel(np.zeros((3, 100), dtype=complex), fb)


class TestStackAndDecimate:
    def test_single_frame_replicates(self):
        row = np.arange(80, dtype=float)[None, :]
        fs = stack_and_decimate(row, FrameRateMode.fixed())
        assert fs.frames.shape == (1, 400)
        np.testing.assert_array_equal(fs.frames[0], np.tile(row[0], 5))

    def test_nine_frames_decimate_to_three(self):
        feats = np.arange(9, dtype=float)[:, None] * np.ones((1, 4))
        fs = stack_and_decimate(feats, FrameRateMode.fixed())
        assert fs.num_frames == 3
        # center tap of each output frame is input frame 0, 3, 6
        np.testing.assert_array_equal(fs.frames[:, 8], [0.0, 3.0, 6.0])

    def test_edge_replication_values(self):
        feats = np.arange(4, dtype=float)[:, None]
        fs = stack_and_decimate(feats, FrameRateMode.fixed())
        np.testing.assert_array_equal(fs.frames[0], [0, 0, 0, 1, 2])
        np.testing.assert_array_equal(fs.frames[1], [1, 2, 3, 3, 3])

    def test_fixed_output_rate_is_33_and_a_third(self):
        assert FrameRateMode.fixed().output_fps == Fraction(100, 3)
        w = sine(500.0, duration_s=2.0)
        fs = extract_features(w, FrameRateMode.fixed())
        dt = np.diff(fs.timestamps)
        np.testing.assert_allclose(dt, 0.03, atol=1e-12)

    def test_empty_input_empty_output(self):
        fs = stack_and_decimate(np.zeros((0, 80)), FrameRateMode.fixed())
        assert fs.num_frames == 0


class TestVariableHopSchedule:
    def test_30fps_offsets_match_rational_rounding(self):
        plan = make_variable_hop_schedule(30, num_video_frames=10)
        hop = Fraction(SAMPLE_RATE) / Fraction(90)
        expected = [round(k * hop) for k in range(30)]
        np.testing.assert_array_equal(plan.offsets, expected)
        hops = np.diff(plan.offsets)
        assert set(hops.tolist()) == {177, 178}
        assert abs(hops.mean() - float(hop)) < 0.05

    def test_25fps_pattern(self):
        plan = make_variable_hop_schedule(25, num_video_frames=20)
        hops = np.diff(plan.offsets)
        assert set(hops.tolist()) == {213, 214}
        # every three hops advance exactly 640 samples
        triplets = hops.reshape(-1, 3) if hops.size % 3 == 0 else hops[: 57].reshape(-1, 3)
        assert np.all(triplets.sum(axis=1) == 640)

    def test_24fps_hop_duration(self):
        plan = make_variable_hop_schedule(24, num_video_frames=24)
        mean_hop_ms = np.diff(plan.offsets).mean() / SAMPLE_RATE * 1000
        assert abs(mean_hop_ms - 1000 / 72) < 0.01
        assert 33 / 3 <= mean_hop_ms <= 42 / 3

    def test_out_of_range_fps(self):
        for fps in (22, 31, Fraction(22999, 1000)):
            with pytest.raises(UnsupportedFrameRate):
                make_variable_hop_schedule(fps, num_video_frames=5)


class TestInvariants:
    @pytest.mark.parametrize("fps", [24, 25, "29.97", 30])
    @pytest.mark.parametrize("duration", [0.5, 1.7, 6.4])
    def test_audio_video_sync(self, fps, duration):
        fps_frac = Fraction(str(fps))
        num_video = int(duration * fps_frac)
        num_samples = int(round(duration * SAMPLE_RATE))
        rng = np.random.default_rng(7)
        w = Waveform(0.1 * rng.standard_normal(num_samples))
        fs = extract_features(
            w, FrameRateMode.variable(fps_frac), num_video_frames=num_video
        )
        assert abs(fs.num_frames - num_video) <= 1

    @pytest.mark.parametrize("fps", [24, "29.97", 30])
    def test_timestamp_drift_below_one_sample(self, fps):
        fps_frac = Fraction(str(fps))
        num_video = int(10 * fps_frac)
        w = Waveform(np.zeros(int(10.2 * SAMPLE_RATE)))
        fs = extract_features(
            w, FrameRateMode.variable(fps_frac), num_video_frames=num_video
        )
        assert timestamp_drift(fs) < 1.0 / SAMPLE_RATE

    def test_fixed_mode_drift(self):
        w = Waveform(np.zeros(int(12.0 * SAMPLE_RATE)))
        fs = extract_features(w, FrameRateMode.fixed())
        assert timestamp_drift(fs) < 1.0 / SAMPLE_RATE

    def test_power_linearity_through_pipeline(self):
        rng = np.random.default_rng(3)
        base = 0.2 * rng.standard_normal(SAMPLE_RATE)
        c = 1.7
        a = extract_features(Waveform(base), FrameRateMode.fixed(), log_floor=0.0)
        b = extract_features(Waveform(c * base), FrameRateMode.fixed(), log_floor=0.0)
        np.testing.assert_allclose(b.frames - a.frames, 2 * np.log(c), atol=1e-9)

    def test_determinism(self):
        rng = np.random.default_rng(11)
        samples = 0.3 * rng.standard_normal(SAMPLE_RATE // 2)
        a = extract_features(Waveform(samples.copy()), FrameRateMode.fixed())
        b = extract_features(Waveform(samples.copy()), FrameRateMode.fixed())
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.timestamps, b.timestamps)

    @pytest.mark.parametrize("length", [400, 401, 560, 799, 16000, 16001, 54321])
    def test_fixed_frame_count_formula(self, length):
        w = Waveform(np.zeros(length))
        fs = extract_features(w, FrameRateMode.fixed())
        pre = (length - WINDOW_SAMPLES) // FIXED_HOP_SAMPLES + 1
        assert fs.num_frames == -(-pre // DECIMATION)
        assert fs.num_frames == fixed_mode_output_frames(length)
