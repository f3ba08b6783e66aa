import math

import numpy as np
import pytest

from fbgforce.core import ConfigError, FbgPhysics, SorEvent
from fbgforce.simulate import (
    EdgeError,
    PokeGeometry,
    SimConfig,
    SpectrumConfig,
    draw_geometry,
    gen_dataset,
    gen_episode,
    gen_force_profile,
    gen_spectrum,
    gen_spectrum_frames,
    jittered_times,
    noiseless_shift,
    plan_pokes,
    poke_runs,
    shift_statistics,
    sor_steps,
)


def _make_config(**overrides) -> SimConfig:
    defaults = dict(episodes=3, duration=10.0, seed=7)
    defaults.update(overrides)
    return SimConfig(**defaults)


class TestSimConfig:
    def test_defaults(self):
        cfg = SimConfig()
        assert cfg.duration == 60.0
        assert cfg.force_peak_range == (5.0, 50.0)
        assert cfg.sor_prob == 0.2

    def test_lists_are_stored_as_tuples(self):
        assert SimConfig(force_peak_range=[1, 2]).force_peak_range == (1.0, 2.0)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"duration": 1.5},
            {"sor_prob": 1.5},
            {"force_peak_range": (50.0, 5.0)},
            {"bend_ratio_range": (1.0, 3.0)},
            {"noise_sigma": 0.0},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            SimConfig(**overrides)


class TestForceProfile:
    def test_zero_during_lead_in_and_lead_out(self):
        cfg = _make_config()
        force = gen_force_profile(cfg, 0)
        lead = int(cfg.lead_in * cfg.dense_hz)
        assert np.all(force.values[: lead + 1] == 0.0)
        assert np.all(force.values[-lead:] == 0.0)

    def test_bounded_by_peak_range(self):
        force = gen_force_profile(_make_config(duration=60.0), 1)
        assert force.values.min() >= 0.0
        assert force.values.max() <= 50.0

    def test_dense_grid(self):
        force = gen_force_profile(_make_config(), 0)
        assert len(force) == 10001
        assert force.end == pytest.approx(10.0)

    def test_pokes_do_not_overlap(self):
        pokes = plan_pokes(_make_config(duration=60.0), 2)
        assert pokes
        for a, b in zip(pokes, pokes[1:]):
            assert a.end < b.start

    def test_one_run_per_poke(self):
        cfg = _make_config(duration=60.0)
        assert len(poke_runs(gen_force_profile(cfg, 3))) == len(plan_pokes(cfg, 3))

    def test_no_contacts(self):
        force = gen_force_profile(_make_config(contact_rate=0.0), 0)
        assert not force.values.any()


class TestGeometry:
    @pytest.mark.parametrize("theta", np.linspace(0.0, 2.0 * math.pi, 37))
    def test_bent_gains_split_sign(self, theta):
        poke = PokeGeometry(start=0.0, end=1.0, theta=float(theta), bent=True, bend_ratio=60.0)
        negative = sum(poke.channel_gain(s) < 0 for s in range(3))
        assert negative in (1, 2)

    def test_straight_poke_has_unit_gain(self):
        poke = PokeGeometry(start=0.0, end=1.0, theta=1.0, bent=False, bend_ratio=0.0)
        assert [poke.channel_gain(s) for s in range(3)] == [1.0, 1.0, 1.0]

    def test_straight_pokes_shift_every_sensor_up(self):
        cfg = _make_config(bend_prob=0.0)
        force = gen_force_profile(cfg, 0)
        geometry = draw_geometry(force, cfg, np.random.default_rng(0))
        shift = noiseless_shift(force, FbgPhysics(), geometry)
        active = force.values[:, 0] > 0
        assert np.all(shift[active] > 0)
        assert np.all(shift[~active] == 0)

    def test_bent_pokes_split_at_peak(self):
        cfg = _make_config(duration=60.0, bend_prob=1.0)
        force = gen_force_profile(cfg, 0)
        geometry = draw_geometry(force, cfg, np.random.default_rng(1))
        shift = noiseless_shift(force, FbgPhysics(), geometry)
        for first, last in poke_runs(force):
            peak = first + int(np.argmax(force.values[first : last + 1, 0]))
            negative = int(np.sum(shift[peak] < 0))
            assert negative in (1, 2)


class TestSor:
    def test_offsets_accumulate(self):
        times = np.array([0.0, 1.0, 2.0, 3.0])
        events = [SorEvent(time=1.0, sensor=0, offset=0.05), SorEvent(time=2.0, sensor=0, offset=0.03)]
        out = sor_steps(times, events)
        np.testing.assert_allclose(out[:, 0], [0.0, 0.05, 0.08, 0.08])
        assert not out[:, 1:].any()

    def test_no_events_without_sor(self):
        ep = gen_episode(_make_config(sor_prob=0.0, duration=60.0), 0)
        assert ep.sor_events == []

    def test_every_poke_shifts_with_certain_sor(self):
        cfg = _make_config(sor_prob=1.0, duration=60.0)
        ep = gen_episode(cfg, 0)
        assert len(ep.sor_events) == len(plan_pokes(cfg, 0))
        for ev in ep.sor_events:
            assert 0.02 <= abs(ev.offset) <= 0.10

    def test_offset_persists_after_contact(self):
        cfg = _make_config(sor_prob=1.0, duration=30.0, noise_sigma=1e-6)
        ep = gen_episode(cfg, 0)
        expected = np.zeros(3)
        for ev in ep.sor_events:
            expected[ev.sensor] += ev.offset
        tail = ep.interrogator.values[ep.interrogator.timestamps > cfg.duration - 0.5]
        np.testing.assert_allclose(tail.mean(axis=0) - np.array(FbgPhysics().lambda_b), expected, atol=1e-5)


class TestEpisode:
    def test_spans_whole_duration(self):
        ep = gen_episode(_make_config(), 0)
        for series in (ep.interrogator, ep.scale):
            assert series.start == 0.0
            assert series.end == 10.0
        assert ep.violations() == []

    def test_sample_rates(self):
        ep = gen_episode(_make_config(), 0)
        assert abs(len(ep.interrogator) - 10001) < 300
        assert abs(len(ep.scale) - 101) < 10
        assert np.diff(ep.interrogator.timestamps).min() > 0

    def test_deterministic(self):
        cfg = _make_config()
        a, b = gen_episode(cfg, 1), gen_episode(cfg, 1)
        np.testing.assert_array_equal(a.interrogator.values, b.interrogator.values)
        np.testing.assert_array_equal(a.scale.timestamps, b.scale.timestamps)
        assert a.seed == b.seed

    def test_index_changes_episode(self):
        cfg = _make_config()
        assert gen_episode(cfg, 0).seed != gen_episode(cfg, 1).seed
        assert not np.array_equal(gen_episode(cfg, 0).scale.values, gen_episode(cfg, 2).scale.values)
        assert plan_pokes(cfg, 2) != plan_pokes(cfg, 0)

    def test_scale_reads_zero_during_lead_in(self):
        ep = gen_episode(_make_config(), 0)
        assert np.all(ep.scale.values[ep.scale.timestamps < 0.9] == 0.0)

    def test_jittered_times_end_exactly(self):
        t = jittered_times(5.0, 1000.0, 0.02, np.random.default_rng(0))
        assert t[0] == 0.0
        assert t[-1] == 5.0
        assert np.all(np.diff(t) > 0)


class TestMirrorPairs:
    def test_pair_sums_to_twice_the_axial_shift(self):
        cfg = _make_config(episodes=2, sor_prob=0.5)
        phys = FbgPhysics()
        (a, b), _ = gen_dataset(cfg, phys)
        t = a.interrogator.timestamps
        np.testing.assert_array_equal(b.interrogator.timestamps, t)
        np.testing.assert_array_equal(b.scale.values, a.scale.values)

        force = gen_force_profile(cfg, 0)
        axial = np.interp(t, force.timestamps, force.values[:, 0]) / phys.sensitivity
        expected = 2.0 * axial[:, None] * np.array([phys.nm_per_strain(s) for s in range(3)])
        reference = np.array(phys.lambda_b)
        total = (a.interrogator.values - reference) + (b.interrogator.values - reference)
        np.testing.assert_allclose(total, expected, rtol=0, atol=1e-9)

    def test_sor_offsets_flip_sign(self):
        cfg = _make_config(episodes=2, sor_prob=1.0, duration=30.0)
        a, b = gen_episode(cfg, 0), gen_episode(cfg, 1)
        assert a.sor_events
        assert b.sor_events == [SorEvent(time=e.time, sensor=e.sensor, offset=-e.offset) for e in a.sor_events]

    def test_manifest_names_the_source(self):
        _, manifest = gen_dataset(_make_config(episodes=3))
        assert [e["mirror_of"] for e in manifest["episodes"]] == [None, 0, None]

    def test_independent_without_pairs(self):
        cfg = _make_config(antithetic=False)
        assert plan_pokes(cfg, 1) != plan_pokes(cfg, 0)
        _, manifest = gen_dataset(cfg)
        assert [e["mirror_of"] for e in manifest["episodes"]] == [None, None, None]


class TestDataset:
    def test_manifest(self):
        cfg = _make_config()
        episodes, manifest = gen_dataset(cfg)
        assert len(episodes) == 3
        assert [ep.index for ep in episodes] == [0, 1, 2]
        assert manifest["config_hash"].startswith("cfg_")
        assert manifest["sor_accumulates"] is True
        assert [e["index"] for e in manifest["episodes"]] == [0, 1, 2]

    def test_hash_is_stable(self):
        _, a = gen_dataset(_make_config(episodes=1))
        _, b = gen_dataset(_make_config(episodes=1))
        _, c = gen_dataset(_make_config(episodes=1, seed=8))
        assert a["config_hash"] == b["config_hash"]
        assert a["config_hash"] != c["config_hash"]

    def test_workers_do_not_change_output(self):
        cfg = _make_config(episodes=2, duration=4.0)
        serial, _ = gen_dataset(cfg, workers=1)
        parallel, _ = gen_dataset(cfg, workers=2)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.interrogator.values, b.interrogator.values)


class TestShiftStatistics:
    def test_bending_removes_skew(self):
        bent = _make_config(episodes=600, bend_prob=1.0, sor_prob=0.0, noise_sigma=1e-6)
        straight = _make_config(episodes=50, bend_prob=0.0, sor_prob=0.0, noise_sigma=1e-6)
        bent_stats = shift_statistics(gen_episode(bent, i) for i in range(bent.episodes))
        straight_stats = shift_statistics(gen_episode(straight, i) for i in range(straight.episodes))
        for b, s in zip(bent_stats, straight_stats):
            assert s["skew"] > 1.0
            assert abs(b["skew"]) < 0.2

    @pytest.mark.parametrize("seed", [0, 3])
    def test_default_histogram_is_symmetric(self, seed):
        cfg = SimConfig(seed=seed)
        for stats in shift_statistics(gen_episode(cfg, i) for i in range(cfg.episodes)):
            assert stats["samples"] >= 1_000_000
            assert abs(stats["skew"]) < 0.2
            assert abs(stats["mode_center"]) <= stats["bin_width"]

    def test_mode_at_zero_shift(self):
        cfg = _make_config(episodes=20, sor_prob=0.0)
        for stats in shift_statistics(gen_episode(cfg, i) for i in range(cfg.episodes)):
            assert abs(stats["mode_center"]) < 0.5 * stats["bin_width"]


class TestSpectrum:
    def test_noiseless_peak_at_bragg(self):
        cfg = SpectrumConfig(snr=math.inf)
        frame = gen_spectrum(1540.0, cfg, np.random.default_rng(0))
        assert frame.grid[np.argmax(frame.intensity)] == pytest.approx(1540.0, abs=0.005)
        assert frame.intensity.max() == pytest.approx(1.0)

    def test_edge(self):
        with pytest.raises(EdgeError):
            gen_spectrum(1535.5, SpectrumConfig(), np.random.default_rng(0))

    def test_frames_per_sensor(self):
        cfg = SpectrumConfig(start=1537.0, stop=1542.0, step=0.05)
        frames = gen_spectrum_frames(4, cfg)
        assert len(frames) == 3
        assert [f.sensor for f in frames[2]] == [2, 2, 2, 2]
        assert frames[0][0].grid.size == 101

    def test_invalid_snr(self):
        with pytest.raises(ConfigError):
            SpectrumConfig(snr=0.0)
