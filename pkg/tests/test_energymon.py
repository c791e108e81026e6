import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emlio.energymon import (
    EnergyPoint,
    EnergyStore,
    GapWarning,
    MonitorConfig,
    SyntheticGpuSource,
    SyntheticPowerSource,
    TickRendezvous,
    format_point,
    gpu_energy,
    integrate_profile,
    interpolate_gaps,
    parse_line,
    parse_source_spec,
    query_energy,
    run_monitor,
)
from emlio.energymon.monitor import _fill

from oracles import piecewise_energy


def pts(*cpu):
    return [EnergyPoint(k * 100, "n", {"cpu_energy": v}) for k, v in enumerate(cpu)]


class TestInterpolation:
    def test_midpoint(self):
        out = interpolate_gaps(pts(1.0, None, 3.0))
        assert [p.cpu_energy for p in out] == [1.0, 2.0, 3.0]
        assert [p.interpolated["cpu_energy"] for p in out] == [False, True, False]

    def test_double_gap(self):
        out = interpolate_gaps(pts(0.0, None, None, 3.0))
        assert [p.cpu_energy for p in out] == [0.0, 1.0, 2.0, 3.0]

    def test_trailing_gap(self):
        out = interpolate_gaps(pts(4.0, 5.0, None))
        assert out[-1].cpu_energy == 5.0 and out[-1].interpolated["cpu_energy"]
        assert out[-1].interp_mask == 1

    def test_leading_gap(self):
        out = interpolate_gaps(pts(None, None, 7.0))
        assert [p.cpu_energy for p in out] == [7.0, 7.0, 7.0]

    def test_no_real_samples(self):
        with pytest.warns(GapWarning):
            out = interpolate_gaps(pts(None, None))
        assert [p.cpu_energy for p in out] == [0.0, 0.0]
        assert all(p.interpolated["cpu_energy"] for p in out)

    def test_fields_independent(self):
        points = [EnergyPoint(0, "n", {"cpu_energy": 1.0, "memory_energy": None}),
                  EnergyPoint(1, "n", {"cpu_energy": None, "memory_energy": 2.0}),
                  EnergyPoint(2, "n", {"cpu_energy": 3.0, "memory_energy": 4.0})]
        out = interpolate_gaps(points)
        assert out[0].memory_energy == 2.0 and out[1].cpu_energy == 2.0
        assert out[0].interp_mask == 2 and out[1].interp_mask == 1

    def test_left_anchor(self):
        assert _fill([5, 6], [None, 4.0], left=(4, 2.0))[0] == [3.0, 4.0]


class TestStore:
    def test_line_format(self):
        p = EnergyPoint(123, "n1", {"cpu_energy": 1.5, "memory_energy": 0.25, "gpu_energy": 20.0},
                        {"gpu_energy": True})
        line = format_point(p)
        assert line == ("energy,node_id=n1 cpu_energy=1.500000,memory_energy=0.250000,"
                        "gpu_energy=20.000000,interp_mask=4 123")
        assert parse_line(line) == ("n1", 123, {"cpu_energy": 1_500_000, "memory_energy": 250_000,
                                                "gpu_energy": 20_000_000}, 4)

    def test_gpu_omitted(self):
        line = format_point(EnergyPoint(1, "n", {"cpu_energy": 1.0, "memory_energy": 1.0}))
        assert "gpu_energy" not in line

    def test_bad_node_id(self):
        with pytest.raises(ValueError):
            format_point(EnergyPoint(1, "a b", {"cpu_energy": 1.0}))

    @pytest.fixture
    def store(self, tmp_path):
        s = EnergyStore(tmp_path / "e.log")
        s.write_points([EnergyPoint(k * 100, "n", {"cpu_energy": 0.1 * k, "memory_energy": 0.3})
                        for k in range(1, 11)])
        return s

    def test_half_open(self, store):
        assert store.query("n", 100, 200).ticks == 1
        assert store.query("n", 100, 100).ticks == 0
        assert store.query("n", 150, 199).total == 0  # between ticks

    def test_unknown_node(self, store):
        t = store.query("nope", 0, 10**6)
        assert t.total == 0 and t.ticks == 0

    def test_bad_window(self, store):
        with pytest.raises(ValueError):
            query_energy(store, "n", 5, 4)

    @given(st.lists(st.integers(0, 1200), min_size=2, max_size=6))
    @settings(max_examples=200, deadline=None)
    def test_additivity(self, tmp_path_factory, cuts):
        path = tmp_path_factory.mktemp("s") / "e.log"
        store = EnergyStore(path)
        store.write_points([EnergyPoint(k * 100, "n", {"cpu_energy": 0.1 * k + 0.0000007,
                                                       "memory_energy": 1 / 3, "gpu_energy": 2 / 7})
                            for k in range(1, 11)])
        cuts = sorted(cuts)
        parts = [store.query("n", a, b) for a, b in zip(cuts, cuts[1:])]
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        assert total == store.query("n", cuts[0], cuts[-1])

    def test_path_form(self, store):
        assert query_energy(store.path, "n", 0, 10**6) == store.query("n", 0, 10**6)

    def test_sees_appends(self, store):
        before = store.query("n", 0, 10**6).ticks
        store.write_points([EnergyPoint(5000, "n", {"cpu_energy": 1.0, "memory_energy": 1.0})])
        assert store.query("n", 0, 10**6).ticks == before + 1


class TestSources:
    def test_profile_integral(self):
        prof = [(50, 5), (150, 5)]
        assert integrate_profile(prof, 0, 10) == pytest.approx(1000)
        assert integrate_profile(prof, 4.9, 5.1) == pytest.approx(20)
        assert integrate_profile(prof, 12, 13) == pytest.approx(150)
        assert integrate_profile(prof, 0, 10) == pytest.approx(piecewise_energy(prof))

    def test_gpu_formula(self):
        assert gpu_energy([100000, 100000], 0.1) == 20.0
        assert SyntheticGpuSource([100000, 100000]).sample(0.1) == {"gpu": 20.0}

    def test_spec_parse(self):
        srcs = parse_source_spec("synthetic:cpu:50,synthetic:gpu:200,synthetic:dram:4")
        assert [s.kinds for s in srcs] == [("cpu_pkg",), ("gpu",), ("dram",)]
        assert srcs[1].sample(0.1) == {"gpu": pytest.approx(20.0)}
        with pytest.raises(ValueError):
            parse_source_spec("synthetic:cpu")
        with pytest.raises(ValueError):
            parse_source_spec("")

    def test_invalid_power(self):
        with pytest.raises(ValueError):
            SyntheticPowerSource("cpu_pkg", watts=-1)


class TestRendezvous:
    def test_all_arrive(self):
        import threading
        r = TickRendezvous(3)
        results = []
        threads = [threading.Thread(target=lambda: results.append(r.arrive(0, 1.0))) for _ in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == [True] * 3

    def test_straggler_times_out(self):
        r = TickRendezvous(2)
        t0 = time.monotonic()
        assert r.arrive(0, 0.05) is False
        assert time.monotonic() - t0 < 0.5


class Flaky:
    kinds = ("dram",)

    def __init__(self, fail_at):
        self.fail_at = set(fail_at)
        self.calls = 0

    def sample(self, delta):
        self.calls += 1
        if self.calls - 1 in self.fail_at:
            raise OSError("counter read failed")
        return {"dram": 1.0}


class Dead:
    kinds = ("gpu",)

    def sample(self, delta):
        raise OSError("gone")


def run_for(tmp_path, sources, seconds, interval=0.02, **kw):
    config = MonitorConfig(tmp_path / "e.log", "n", interval, **kw)
    h = run_monitor(config, sources)
    time.sleep(seconds)
    h.stop()
    return h, EnergyStore(config.store_path)


class TestMonitor:
    def test_constant_power(self, tmp_path):
        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", watts=50)], 1.0)
        totals = store.query("n", 0, 2**63)
        assert abs(totals.ticks - 1.0 / 0.02) <= 1
        assert totals.cpu_energy == pytest.approx(totals.ticks * 50 * 0.02, rel=1e-6)

    def test_ticks_aligned_and_increasing(self, tmp_path):
        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", watts=10),
                                      SyntheticPowerSource("dram", watts=1)], 0.6)
        ticks = store.ticks("n")
        step = round(0.02 * 1e9)
        assert all(b - a == step for a, b in zip(ticks, ticks[1:]))
        by_tick = {}
        for k, idx, t in h.sample_starts:
            by_tick.setdefault(k, []).append(t)
        assert max(max(v) - min(v) for v in by_tick.values() if len(v) == 2) < 0.01

    def test_gpu_tick_exact(self, tmp_path):
        h, store = run_for(tmp_path, [SyntheticGpuSource([100000, 100000])], 0.5, interval=0.1)
        points = store.points("n")
        assert points and all(v["gpu_energy"] == 20_000_000 for _, v, _ in points)

    def test_flaky_source_interpolated(self, tmp_path):
        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", watts=5), Flaky({3, 4})], 0.5)
        points = store.points("n")
        flagged = [t for t, v, mask in points if mask & 2]
        assert len(flagged) == 2
        assert all(v["memory_energy"] == 1_000_000 for _, v, _ in points)
        assert not h.warnings

    def test_dead_source(self, tmp_path):
        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", watts=5), Dead()], 0.4)
        points = store.points("n")
        assert points and all(mask & 4 and v["gpu_energy"] == 0 for _, v, mask in points)
        assert any("failed" in w for w in h.warnings)
        assert any("no real samples" in w for w in h.warnings)

    def test_slow_source_marks_missing(self, tmp_path):
        class Slow:
            kinds = ("dram",)
            n = 0

            def sample(self, delta):
                self.n += 1
                if self.n == 3:
                    time.sleep(delta * 2.5)
                return {"dram": 2.0}

        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", watts=5), Slow()], 0.6)
        points = store.points("n")
        assert sum(h.missing_counts) >= 1
        assert any(mask & 2 for _, _, mask in points)
        assert all(v["memory_energy"] == 2_000_000 for _, v, _ in points)
        ticks = [t for t, _, _ in points]
        assert ticks == sorted(set(ticks))

    def test_writer_batches(self, tmp_path, monkeypatch):
        sizes = []
        orig = EnergyStore.write_points

        def spy(self, points, node_id=None):
            sizes.append(len(points))
            return orig(self, points, node_id)

        monkeypatch.setattr(EnergyStore, "write_points", spy)
        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", watts=5)], 0.5, batch_size=8)
        assert max(sizes) <= 8 and sizes[0] == 8
        assert sum(sizes) == len(store.ticks("n"))

    def test_store_failure_raises_on_stop(self, tmp_path):
        config = MonitorConfig(tmp_path / "missing-dir" / "e.log", "n", 0.02)
        h = run_monitor(config, [SyntheticPowerSource("cpu_pkg", watts=5)])
        time.sleep(0.1)
        with pytest.raises(OSError):
            h.stop()
        h.stop()  # idempotent

    def test_needs_source(self, tmp_path):
        with pytest.raises(ValueError):
            run_monitor(MonitorConfig(tmp_path / "e.log"), [])

    def test_config_validation(self, tmp_path):
        with pytest.raises(ValueError):
            MonitorConfig(tmp_path / "e", interval_s=0)
        with pytest.raises(ValueError):
            MonitorConfig(tmp_path / "e", batch_size=0)
        assert MonitorConfig(tmp_path / "e").interval_s == 0.1
        assert MonitorConfig(tmp_path / "e").batch_size == 64

    def test_profile_run(self, tmp_path):
        prof = [(50, 0.5), (150, 0.5)]
        h, store = run_for(tmp_path, [SyntheticPowerSource("cpu_pkg", profile=prof)], 1.0)
        totals = store.query("n", 0, 2**63)
        expected = integrate_profile(prof, 0, totals.ticks * 0.02)
        assert abs(totals.cpu_energy - expected) <= 0.02 * expected + 150 * 0.02
        assert math.isfinite(totals.total)
