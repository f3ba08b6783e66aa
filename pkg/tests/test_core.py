import numpy as np
import pytest

from fbgforce.core import (
    ConfigError,
    Episode,
    FbgPhysics,
    InvalidSeries,
    SpectrumFrame,
    TimeSeries,
    WindowedExample,
    validate_series,
)


class TestTimeSeries:
    def test_one_dimensional_values_become_one_channel(self):
        s = TimeSeries([0.0, 0.1, 0.2], [1.0, 2.0, 3.0])
        assert s.values.shape == (3, 1)
        assert s.channels == 1
        assert len(s) == 3

    def test_arrays_are_read_only(self):
        s = TimeSeries([0.0, 1.0], [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        with pytest.raises(ValueError):
            s.values[0, 0] = 9.0

    def test_start_end(self):
        s = TimeSeries([0.5, 1.0, 2.5], [0.0, 0.0, 0.0])
        assert s.start == 0.5
        assert s.end == 2.5

    def test_between_is_inclusive(self):
        s = TimeSeries([0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0])
        part = s.between(1.0, 2.0)
        assert list(part.timestamps) == [1.0, 2.0]
        assert list(part.values[:, 0]) == [1.0, 2.0]

    def test_checked_accepts_valid(self):
        s = TimeSeries.checked([0.0, 1.0], [[1.0], [2.0]])
        assert len(s) == 2

    def test_checked_rejects_repeated_timestamp(self):
        with pytest.raises(InvalidSeries) as exc:
            TimeSeries.checked([0.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        assert exc.value.violations == ["non-increasing timestamp @2"]


class TestValidateSeries:
    def test_valid(self):
        assert validate_series(TimeSeries([0.0, 1.0], [1.0, 2.0])) == []

    def test_non_finite_value(self):
        violations = validate_series(TimeSeries([0.0, 1.0, 2.0], [1.0, np.nan, 2.0]))
        assert violations == ["non-finite value @1"]

    def test_non_finite_timestamp(self):
        violations = validate_series(TimeSeries([0.0, np.inf], [1.0, 2.0]))
        assert violations == ["non-finite timestamp @1"]

    def test_row_mismatch(self):
        violations = validate_series(TimeSeries([0.0, 1.0, 2.0], [1.0, 2.0]))
        assert len(violations) == 1
        assert "row count mismatch" in violations[0]


class TestFbgPhysics:
    def test_defaults(self):
        phys = FbgPhysics()
        assert phys.lambda_b == (1539.7, 1539.7, 1539.5)
        assert phys.nm_per_strain(2) == pytest.approx(1539.5 * 0.78)

    def test_lambda_b_needs_three_sensors(self):
        with pytest.raises(ConfigError, match="3 entries"):
            FbgPhysics(lambda_b=(1539.7, 1539.7))

    def test_photoelastic_constant_range(self):
        with pytest.raises(ConfigError, match="p_e"):
            FbgPhysics(p_e=1.2)

    def test_list_input_is_stored_as_tuple(self):
        assert FbgPhysics(lambda_b=[1540, 1541, 1542]).lambda_b == (1540.0, 1541.0, 1542.0)


class TestEpisode:
    def _make_episode(self, channels: int = 3, duration: float = 0.1) -> Episode:
        t = np.arange(101) / 1000.0
        return Episode(
            interrogator=TimeSeries(t, np.zeros((101, channels))),
            scale=TimeSeries([0.0, 0.05, 0.1], [0.0, 0.0, 0.0]),
            duration=duration,
        )

    def test_valid_episode(self):
        assert self._make_episode().violations() == []

    def test_wrong_channel_count(self):
        violations = self._make_episode(channels=2).violations()
        assert violations == ["interrogator has 2 channels, expected 3"]

    def test_streams_must_span_duration(self):
        violations = self._make_episode(duration=0.2).violations()
        assert len(violations) == 2
        assert violations[0].startswith("interrogator spans [0.0, 0.1] s")
        assert violations[1].startswith("scale spans [0.0, 0.1] s")

    def test_late_start(self):
        ep = Episode(
            interrogator=TimeSeries(np.arange(1, 101) / 1000.0, np.zeros((100, 3))),
            scale=TimeSeries([0.0, 0.1], [0.0, 0.0]),
            duration=0.1,
        )
        assert ep.violations() == ["interrogator spans [0.001, 0.1] s, expected [0, 0.1]"]


class TestShapes:
    def test_windowed_example_shape(self):
        with pytest.raises(ValueError, match="100x3"):
            WindowedExample(x=np.zeros((99, 3)), y=0.0, t=0)

    def test_spectrum_frame_shapes_must_match(self):
        with pytest.raises(ValueError):
            SpectrumFrame(grid=np.arange(5.0), intensity=np.zeros(4))
