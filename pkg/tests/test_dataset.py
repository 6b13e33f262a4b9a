"""Tests for burst synthesis, windowing, splits, and dataset serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stbcid.dataset import (
    BadMagicError,
    DatasetConfig,
    DatasetFormatError,
    FRAME_LEN,
    FrameSet,
    TruncatedRecordError,
    VersionMismatchError,
    assign_burst_ids,
    deserialize_frames,
    export_frames_csv,
    generate_dataset,
    read_frames_csv,
    read_manifest,
    serialize_frames,
    split_train_val,
    synthesize_burst,
    to_iq,
    window_frames,
    write_manifest,
)
from stbcid.errors import ParameterError, ShapeError
from stbcid.signal_model import CodingScheme


def small_config(**overrides):
    defaults = dict(
        snr_grid=(0.0, 10.0), bursts_per_cell=2, burst_len=256, seed=3, normalize=True
    )
    defaults.update(overrides)
    return DatasetConfig(**defaults)


class TestWindowFrames:
    def test_exactly_one_window(self):
        assert window_frames(np.zeros(128, complex), 128, 64).shape[0] == 1

    def test_three_windows(self):
        assert window_frames(np.zeros(256, complex), 128, 64).shape[0] == 3

    def test_tail_dropped(self):
        assert window_frames(np.zeros(191, complex), 128, 64).shape[0] == 1

    def test_window_content(self):
        samples = np.arange(300) + 0j
        w = window_frames(samples, 128, 64)
        np.testing.assert_array_equal(w[1], samples[64:192])

    def test_too_short_rejected(self):
        with pytest.raises(ShapeError):
            window_frames(np.zeros(100, complex), 128, 64)

    @given(
        st.integers(1, 400), st.integers(1, 64), st.integers(1, 64)
    )
    @settings(max_examples=80)
    def test_count_formula(self, length, window, shift):
        if shift > window or length < window:
            return
        frames = window_frames(np.zeros(length, complex), window, shift)
        assert frames.shape == ((length - window) // shift + 1, window)


class TestToIq:
    def test_rows_are_real_and_imag(self):
        w = np.zeros(FRAME_LEN, complex)
        w[0] = 1 + 2j
        frame = to_iq(w, normalize=False)
        assert frame.shape == (2, FRAME_LEN)
        assert frame[0, 0] == 1.0 and frame[1, 0] == 2.0
        assert np.all(frame[:, 1:] == 0.0)

    def test_unit_power_input_unchanged(self):
        frame = to_iq(np.ones(FRAME_LEN, complex), normalize=True)
        np.testing.assert_allclose(frame[0], 1.0, atol=1e-12)
        np.testing.assert_allclose(frame[1], 0.0, atol=1e-12)

    def test_zero_power_rejected(self):
        with pytest.raises(ParameterError):
            to_iq(np.zeros(FRAME_LEN, complex), normalize=True)

    def test_wrong_length_rejected(self):
        with pytest.raises(ShapeError):
            to_iq(np.zeros(64, complex), normalize=False)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30)
    def test_normalized_mean_power_is_one(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal(FRAME_LEN) + 1j * rng.standard_normal(FRAME_LEN)
        frame = to_iq(w, normalize=True)
        power = float((frame**2).sum()) / FRAME_LEN
        assert abs(power - 1.0) < 1e-9


class TestSynthesizeBurst:
    def test_deterministic(self):
        a = synthesize_burst(CodingScheme.AL, 10.0, 1024, seed=1)
        b = synthesize_burst(CodingScheme.AL, 10.0, 1024, seed=1)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.channel == b.channel

    def test_too_short_rejected(self):
        with pytest.raises(ParameterError):
            synthesize_burst(CodingScheme.SM, 0.0, 64, seed=0)

    def test_label_fields(self):
        b = synthesize_burst(CodingScheme.SM, -4.0, 256, seed=9)
        assert b.scheme == CodingScheme.SM
        assert b.snr_db == -4.0
        assert b.samples.shape == (256,)

    def test_mean_power_oracle_at_0db(self):
        # E|r|^2 = E(|h0|^2 + |h1|^2) + sigma_w^2 = 2 + 2; 1e6 samples spread over
        # many bursts so the per-burst channel draw averages out as well
        total, count = 0.0, 0
        for seed in range(4000):
            b = synthesize_burst(CodingScheme.SM, 0.0, 250, seed=seed)
            total += float(np.sum(np.abs(b.samples) ** 2))
            count += b.samples.size
        assert count == 1_000_000
        assert abs(total / count - 4.0) / 4.0 < 0.02


class TestGenerateDataset:
    def test_frame_count_arithmetic(self):
        cfg = DatasetConfig(
            snr_grid=tuple(float(s) for s in range(-20, 22, 2)),
            bursts_per_cell=10,
            burst_len=1024,
        )
        assert cfg.frames_per_burst == 15
        assert cfg.total_frames == 21 * 2 * 10 * 15 == 6300

    def test_counts_and_balance(self):
        frames = generate_dataset(small_config())
        assert len(frames) == 2 * 2 * 2 * 3
        for snr in (0.0, 10.0):
            mask = frames.snrs_db == snr
            assert (frames.schemes[mask] == 0).sum() == (frames.schemes[mask] == 1).sum()

    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.stbc", tmp_path / "b.stbc"
        serialize_frames(generate_dataset(small_config()), p1)
        serialize_frames(generate_dataset(small_config()), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_threads_match_sequential(self):
        seq = generate_dataset(small_config())
        par = generate_dataset(small_config(), threads=2)
        np.testing.assert_array_equal(seq.frames, par.frames)
        np.testing.assert_array_equal(seq.burst_ids, par.burst_ids)

    def test_frame_labels_follow_bursts(self):
        frames = generate_dataset(small_config())
        for b in np.unique(frames.burst_ids):
            mask = frames.burst_ids == b
            assert len(set(frames.schemes[mask].tolist())) == 1
            assert len(set(frames.snrs_db[mask].tolist())) == 1


class TestSplit:
    def test_five_bursts_each_side(self):
        cfg = small_config(bursts_per_cell=10, burst_len=256)
        frames = generate_dataset(cfg)
        train, val = split_train_val(frames, 0.5, seed=1)
        for side in (train, val):
            for snr in cfg.snr_grid:
                for scheme in (0, 1):
                    mask = (side.snrs_db == snr) & (side.schemes == scheme)
                    assert len(np.unique(side.burst_ids[mask])) == 5

    def test_no_frame_on_both_sides(self):
        frames = generate_dataset(small_config(bursts_per_cell=4))
        train, val = split_train_val(frames, 0.5, seed=0)
        assert len(train) + len(val) == len(frames)
        assert not set(train.burst_ids.tolist()) & set(val.burst_ids.tolist())

    def test_same_seed_same_split(self):
        frames = generate_dataset(small_config(bursts_per_cell=4))
        t1, v1 = split_train_val(frames, 0.5, seed=5)
        t2, v2 = split_train_val(frames, 0.5, seed=5)
        np.testing.assert_array_equal(t1.frames, t2.frames)
        np.testing.assert_array_equal(v1.frames, v2.frames)

    def test_single_burst_cell_rejected(self):
        frames = generate_dataset(small_config(bursts_per_cell=1))
        with pytest.raises(ParameterError):
            split_train_val(frames, 0.5, seed=0)

    def test_bad_fraction_rejected(self):
        frames = generate_dataset(small_config())
        with pytest.raises(ParameterError):
            split_train_val(frames, 1.0, seed=0)

    def test_missing_burst_ids_rejected(self):
        frames = generate_dataset(small_config())
        frames.burst_ids = None
        with pytest.raises(ParameterError):
            split_train_val(frames, 0.5, seed=0)


class TestSerialization:
    def test_round_trip_equality(self, tmp_path):
        frames = generate_dataset(small_config())
        path = tmp_path / "d.stbc"
        serialize_frames(frames, path)
        back = deserialize_frames(path)
        np.testing.assert_array_equal(back.frames, frames.frames)
        np.testing.assert_array_equal(back.schemes, frames.schemes)
        np.testing.assert_array_equal(back.snrs_db, frames.snrs_db)
        assert back.burst_ids is None

    def test_round_trip_bytes(self, tmp_path):
        frames = generate_dataset(small_config())
        p1, p2 = tmp_path / "a.stbc", tmp_path / "b.stbc"
        serialize_frames(frames, p1)
        serialize_frames(deserialize_frames(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_set_round_trips(self, tmp_path):
        empty = FrameSet(
            frames=np.empty((0, 2, FRAME_LEN), np.float32),
            schemes=np.empty(0, np.uint8),
            snrs_db=np.empty(0),
        )
        path = tmp_path / "empty.stbc"
        serialize_frames(empty, path)
        assert len(deserialize_frames(path)) == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.stbc"
        serialize_frames(generate_dataset(small_config()), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(raw)
        with pytest.raises(BadMagicError):
            deserialize_frames(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "d.stbc"
        serialize_frames(generate_dataset(small_config()), path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(raw)
        with pytest.raises(VersionMismatchError):
            deserialize_frames(path)

    def test_truncated_record(self, tmp_path):
        path = tmp_path / "d.stbc"
        serialize_frames(generate_dataset(small_config()), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(TruncatedRecordError):
            deserialize_frames(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "d.stbc"
        path.write_bytes(b"STB")
        with pytest.raises(TruncatedRecordError):
            deserialize_frames(path)


class TestCsv:
    def test_header_and_round_trip(self, tmp_path):
        frames = generate_dataset(small_config())
        path = tmp_path / "d.csv"
        export_frames_csv(frames, path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("scheme,snr_db,i0,") and header.endswith(",q127")
        back = read_frames_csv(path)
        np.testing.assert_array_equal(back.frames, frames.frames)
        np.testing.assert_array_equal(back.schemes, frames.schemes)
        np.testing.assert_array_equal(back.snrs_db, frames.snrs_db)

    def test_malformed_row_names_line(self, tmp_path):
        frames = generate_dataset(small_config())
        path = tmp_path / "d.csv"
        export_frames_csv(frames, path)
        lines = path.read_text().splitlines()
        lines[2] = "1,0.0,not_a_number"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 3"):
            read_frames_csv(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        cfg = small_config()
        frames = generate_dataset(cfg)
        path = tmp_path / "d.manifest"
        write_manifest(cfg, len(frames), path)
        cfg2, count = read_manifest(path)
        assert cfg2 == cfg
        assert count == len(frames)

    def test_burst_id_reconstruction(self, tmp_path):
        cfg = small_config()
        frames = generate_dataset(cfg)
        data_path = tmp_path / "d.stbc"
        serialize_frames(frames, data_path)
        back = assign_burst_ids(deserialize_frames(data_path), cfg)
        np.testing.assert_array_equal(back.burst_ids, frames.burst_ids)

    def test_incompatible_count_rejected(self):
        cfg = small_config()
        frames = generate_dataset(cfg)
        with pytest.raises(ParameterError):
            assign_burst_ids(frames.subset(slice(0, 5)), cfg)
