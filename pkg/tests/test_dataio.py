import numpy as np
import pytest

from pvvlm.dataio import (
    BuildStats,
    DataFormatError,
    PowerSeries,
    SampleRecord,
    SkyImage,
    assert_no_future_leakage,
    build_samples,
    count_target_into_later_input_overlaps,
    decode_ppm,
    load_power_csv,
    resample_2min,
    split_chronological,
    timestamp_from_filename,
)
from pvvlm.synthgen import encode_ppm


def make_series(n, start=1_700_000_000, step=120, values=None):
    ts = start + step * np.arange(n, dtype=np.int64)
    if values is None:
        values = 10.0 + np.arange(n, dtype=np.float64)
    return PowerSeries(ts, np.asarray(values, dtype=np.float64))


def make_image(ts, size=4, fill=128):
    pixels = np.full((size, size, 3), fill, dtype=np.uint8)
    return SkyImage(width=size, height=size, pixels=pixels, timestamp=int(ts))


def images_for(series):
    return [make_image(t) for t in series.timestamps]


class TestPowerCsv:
    def test_minimal_parse(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text("timestamp,power_kw\n2019-01-01T10:00:00Z,12.5\n2019-01-01T10:01:00Z,13.0\n")
        series = load_power_csv(p)
        assert len(series) == 2

    def test_value_and_instant(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text("timestamp,power_kw\n2019-01-01T10:00:00Z,12.5\n")
        series = load_power_csv(p)
        assert series.values[0] == 12.5
        assert series.timestamps[0] == 1546336800  # 2019-01-01T10:00:00Z

    def test_negative_power_names_row(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text("timestamp,power_kw\n2019-01-01T10:00:00Z,5.0\n2019-01-01T10:01:00Z,-1\n")
        with pytest.raises(DataFormatError, match=r":3.*negative"):
            load_power_csv(p)

    def test_malformed_row_names_line(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text("timestamp,power_kw\nnot-a-time,1.0\n")
        with pytest.raises(DataFormatError, match=r":2.*timestamp"):
            load_power_csv(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text("time,kw\n2019-01-01T10:00:00Z,1.0\n")
        with pytest.raises(DataFormatError, match="header"):
            load_power_csv(p)

    def test_unsorted_rows_sorted(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text(
            "timestamp,power_kw\n2019-01-01T10:02:00Z,2.0\n2019-01-01T10:00:00Z,1.0\n"
        )
        series = load_power_csv(p)
        assert list(series.values) == [1.0, 2.0]

    def test_conflicting_duplicate_timestamp(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text(
            "timestamp,power_kw\n2019-01-01T10:00:00Z,1.0\n2019-01-01T10:00:00Z,2.0\n"
        )
        with pytest.raises(DataFormatError, match="share timestamp"):
            load_power_csv(p)

    def test_exact_duplicate_row_dropped(self, tmp_path):
        p = tmp_path / "power.csv"
        p.write_text(
            "timestamp,power_kw\n2019-01-01T10:00:00Z,1.0\n2019-01-01T10:00:00Z,1.0\n"
        )
        assert len(load_power_csv(p)) == 1


class TestPpm:
    def test_minimal_white_pixel(self, tmp_path):
        p = tmp_path / "20240101080000.ppm"
        p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        img = decode_ppm(p)
        assert (img.width, img.height) == (1, 1)
        assert list(img.pixels.reshape(-1)) == [255, 255, 255]

    def test_identity_decode(self, tmp_path):
        payload = bytes(range(12))
        p = tmp_path / "20240101080000.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + payload)
        img = decode_ppm(p)
        assert img.pixels.tobytes() == payload

    def test_unsupported_magic(self, tmp_path):
        p = tmp_path / "20240101080000.ppm"
        p.write_bytes(b"P5\n1 1\n255\n\xff")
        with pytest.raises(DataFormatError, match="unsupported magic"):
            decode_ppm(p)

    def test_unsupported_maxval(self, tmp_path):
        p = tmp_path / "20240101080000.ppm"
        p.write_bytes(b"P6\n1 1\n127\n\xff\xff\xff")
        with pytest.raises(DataFormatError, match="unsupported maxval"):
            decode_ppm(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "20240101080000.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\xff\xff")
        with pytest.raises(DataFormatError, match="truncated"):
            decode_ppm(p)

    def test_unparsable_filename(self, tmp_path):
        p = tmp_path / "sky_image_1.ppm"
        p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        with pytest.raises(DataFormatError, match="filename"):
            decode_ppm(p)

    def test_filename_timestamp(self):
        assert timestamp_from_filename("20240101080000.ppm") == 1704096000

    def test_roundtrip_random_images(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(5):
            pixels = rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
            img = SkyImage(width=5, height=6, pixels=pixels, timestamp=1704096000 + 60 * i)
            path = tmp_path / f"2024010108{i:02d}00.ppm"
            encode_ppm(img, path)
            back = decode_ppm(path)
            assert np.array_equal(back.pixels, pixels)
            assert back.timestamp == img.timestamp


class TestResample:
    def test_keeps_every_second_sample(self):
        series = make_series(10, step=60)
        out = resample_2min(series)
        assert len(out) == 5
        assert list(out.values) == [10.0, 12.0, 14.0, 16.0, 18.0]

    def test_degenerate_single_sample(self):
        series = make_series(1, step=60)
        out = resample_2min(series)
        assert len(out) == 1 and out.values[0] == series.values[0]

    def test_constant_preserved(self):
        series = make_series(9, step=60, values=np.full(9, 4.5))
        out = resample_2min(series)
        assert np.all(out.values == 4.5)

    def test_ceil_length(self):
        assert len(resample_2min(make_series(11, step=60))) == 6


class TestBuildSamples:
    def test_anchor_enumeration(self):
        series = make_series(100)
        records = build_samples(series, images_for(series), horizon_steps=10)
        assert len(records) == 71

    def test_boundary_single_record(self):
        series = make_series(30)
        records = build_samples(series, images_for(series), horizon_steps=10)
        assert len(records) == 1

    def test_no_images_errors(self):
        series = make_series(100)
        with pytest.raises(ValueError, match="no alignable"):
            build_samples(series, [], horizon_steps=10)

    def test_window_target_contiguity(self):
        series = make_series(80)
        for rec in build_samples(series, images_for(series), horizon_steps=10):
            joined = np.concatenate([rec.input_window, rec.target])
            i = int(np.where(series.timestamps == rec.anchor_time)[0][0]) + 1
            assert np.array_equal(joined, series.values[i - 20 : i + 10])

    def test_anchor_is_last_input_step(self):
        series = make_series(40)
        rec = build_samples(series, images_for(series), horizon_steps=10)[0]
        idx = int(np.where(series.timestamps == rec.anchor_time)[0][0])
        assert rec.input_window[-1] == series.values[idx]
        assert rec.image.timestamp == rec.anchor_time

    def test_missing_images_dropped_and_counted(self):
        series = make_series(40)
        imgs = images_for(series)[::2]  # half missing
        stats = BuildStats()
        records = build_samples(series, imgs, horizon_steps=10, stats=stats)
        assert stats.dropped_no_image > 0
        assert stats.kept == len(records)

    def test_night_filter(self):
        values = np.full(60, 0.01)  # below 1% of max 30
        values[40:] = 30.0
        series = make_series(60, values=values)
        stats = BuildStats()
        build_samples(series, images_for(series), horizon_steps=10,
                      capacity_kw=30.0, stats=stats)
        assert stats.dropped_night > 0

    def test_image_tolerance(self):
        series = make_series(40)
        imgs = [make_image(t + 10) for t in series.timestamps]  # all offset by 10 s
        with pytest.raises(ValueError, match="no alignable"):
            build_samples(series, imgs, horizon_steps=10)
        records = build_samples(series, imgs, horizon_steps=10, image_tolerance_s=30)
        assert records

    def test_invalid_horizon(self):
        series = make_series(100)
        with pytest.raises(ValueError, match="horizon_steps"):
            build_samples(series, images_for(series), horizon_steps=7)


class TestSplit:
    def _samples(self, n):
        series = make_series(n + 29)
        return build_samples(series, images_for(series), horizon_steps=10)[:n]

    def test_ratios_n100(self):
        split = split_chronological(self._samples(100))
        assert (len(split.train), len(split.val), len(split.test)) == (70, 10, 20)

    def test_floor_arithmetic_n10(self):
        split = split_chronological(self._samples(10))
        assert (len(split.train), len(split.val), len(split.test)) == (7, 1, 2)

    def test_unsorted_input_resorted(self):
        samples = self._samples(20)
        shuffled = [samples[i] for i in np.random.default_rng(0).permutation(20)]
        split = split_chronological(shuffled)
        anchors = [s.anchor_time for s in split.train + split.val + split.test]
        assert anchors == sorted(anchors)
        assert split.train[-1].anchor_time < split.val[0].anchor_time < split.test[0].anchor_time

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 10"):
            split_chronological(self._samples(9))

    def test_no_future_leakage(self):
        split = split_chronological(self._samples(50))
        assert_no_future_leakage(split)  # later targets never feed earlier inputs

    def test_boundary_overlap_diagnostic(self):
        # stride-1 windows necessarily overlap at split boundaries
        split = split_chronological(self._samples(50))
        assert count_target_into_later_input_overlaps(split) > 0
        # gapped anchors (> L+H apart) have no cross-split overlap at all
        series = make_series(3000)
        records = build_samples(series, images_for(series), horizon_steps=10)
        gapped = records[::40][:12]
        assert count_target_into_later_input_overlaps(split_chronological(gapped)) == 0


def test_sample_record_invariants():
    img = make_image(0)
    with pytest.raises(ValueError, match="2 \\* horizon"):
        SampleRecord(np.ones(19), np.ones(10), img, 0)
    with pytest.raises(ValueError, match="timestamp"):
        SampleRecord(np.ones(20), np.ones(10), make_image(99), 0)


def test_power_series_invariants():
    with pytest.raises(DataFormatError, match="strictly increasing"):
        PowerSeries(np.array([2, 1]), np.array([0.0, 0.0]))
    with pytest.raises(DataFormatError, match="non-negative"):
        PowerSeries(np.array([1, 2]), np.array([0.0, -1.0]))
