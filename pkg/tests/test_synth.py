from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from condattr.data import DataError
from condattr.synth import (KINDS, InjectionSpec, LatentFactorSystem, generate, inject, inject_many,
                            plan_events)


@pytest.fixture(scope="module")
def clean():
    return generate(LatentFactorSystem.random(6, 2, seed=3), 400)


def test_rank_one_without_noise():
    sys_ = LatentFactorSystem(d=4, r=1, loading=np.ones((4, 1)), noise_scale=0.0, seed=1)
    x = generate(sys_, 100).values
    assert np.all(x == x[:, :1])


def test_generate_is_deterministic():
    sys_ = LatentFactorSystem.random(5, 2, seed=9)
    assert np.array_equal(generate(sys_, 300).values, generate(sys_, 300).values)


def test_same_factor_sensors_correlate_more():
    sys_ = LatentFactorSystem.random(10, 2, seed=0)
    c = np.abs(np.corrcoef(generate(sys_, 2000).values.T))
    same = [c[i, j] for i in range(10) for j in range(i + 1, 10) if i % 2 == j % 2]
    cross = [c[i, j] for i in range(10) for j in range(i + 1, 10) if i % 2 != j % 2]
    assert np.mean(same) > np.mean(cross)


def test_generate_validation():
    with pytest.raises(DataError):
        generate(LatentFactorSystem.random(2, 2), 10)
    with pytest.raises(DataError):
        generate(LatentFactorSystem.random(3, 1, factor_smoothness=1.0), 10)


def test_dropout_cells(clean):
    out, ev = inject(clean, InjectionSpec("dropout", 2, (10, 20)))
    assert np.all(out.values[10:20, 2] == 0.0)
    mask = np.ones_like(out.values, bool)
    mask[10:20, 2] = False
    assert np.array_equal(out.values[mask], clean.values[mask])
    assert ev.onset == 10 and ev.duration == 10 and ev.ground_truth == {2}


def test_shift_is_constant_offset(clean):
    sigma = clean.values[:200].std(axis=0)
    out, _ = inject(clean, InjectionSpec("shift", 1, (250, 300), magnitude=3.0), scale=sigma)
    np.testing.assert_allclose(out.values[250:300, 1] - clean.values[250:300, 1], 3 * sigma[1],
                               rtol=0, atol=1e-12)


def test_spike_count_and_reproducibility(clean):
    spec = InjectionSpec("spike", 0, (100, 137), seed=4)
    a, _ = inject(clean, spec)
    b, _ = inject(clean, spec)
    changed = np.flatnonzero(a.values[:, 0] != clean.values[:, 0])
    assert changed.size == math.ceil(0.1 * 37)
    assert np.array_equal(changed, np.flatnonzero(b.values[:, 0] != clean.values[:, 0]))


def test_saturation_pins_share_of_interval_at_rail(clean):
    sigma, mu = clean.values.std(axis=0), clean.values.mean(axis=0)
    out, _ = inject(clean, InjectionSpec("saturation", 3, (100, 200), magnitude=2.0, quantile=0.5))
    seg = out.values[100:200, 3]
    rail = mu[3] + 2 * sigma[3]
    assert seg.max() == pytest.approx(rail)
    assert np.isclose(seg, rail).mean() >= 0.5
    low, _ = inject(clean, InjectionSpec("saturation", 3, (100, 200), magnitude=2.0, lower=True))
    assert low.values[100:200, 3].min() == pytest.approx(mu[3] - 2 * sigma[3])


@given(st.sampled_from(KINDS), st.integers(0, 5), st.integers(0, 380), st.integers(1, 20),
       st.integers(0, 100))
def test_locality_and_determinism(kind, j, lo, n, seed):
    clean = generate(LatentFactorSystem.random(6, 2, seed=3), 400)
    spec = InjectionSpec(kind, j, (lo, lo + n), seed=seed)
    out, _ = inject(clean, spec)
    mask = np.ones_like(out.values, bool)
    mask[lo:lo + n, j] = False
    assert np.array_equal(out.values[mask], clean.values[mask])
    assert np.array_equal(out.values, inject(clean, spec)[0].values)


@given(st.integers(1, 60), st.floats(0.1, 10))
def test_drift_is_nondecreasing(n, m):
    clean = generate(LatentFactorSystem.random(3, 1, seed=1), 100)
    out, _ = inject(clean, InjectionSpec("drift", 0, (20, 20 + n), magnitude=m))
    added = out.values[20:20 + n, 0] - clean.values[20:20 + n, 0]
    assert np.all(np.diff(added) >= -1e-12)


def test_spec_from_json_resolves_names(clean):
    spec = InjectionSpec.from_json({"kind": "shift", "sensor": "s3", "interval": [100, 200],
                                    "magnitude": 3.0, "seed": 7}, clean)
    assert spec.sensors == (3,) and spec.interval == (100, 200) and spec.seed == 7


def test_invalid_specs(clean):
    with pytest.raises(DataError):
        inject(clean, InjectionSpec("melt", 0, (0, 5)))
    with pytest.raises(DataError):
        inject(clean, InjectionSpec("shift", 0, (390, 410)))
    with pytest.raises(DataError):
        inject(clean, InjectionSpec("shift", 9, (0, 5)))


def test_fifty_event_plan_is_disjoint():
    clean = generate(LatentFactorSystem.random(10, 2, seed=0), 12000)
    specs = plan_events(12000, 4000, 50, (40, 80), 60, 10, seed=2)
    series, events = inject_many(clean, specs)
    assert len(events) == 50
    ordered = sorted(events, key=lambda e: e.onset)
    assert ordered[0].onset >= 4000
    assert all(a.end <= b.onset for a, b in zip(ordered, ordered[1:]))
    assert [s.kind for s in specs[:6]] == list(KINDS)


def test_overlapping_specs_rejected(clean):
    specs = [InjectionSpec("shift", 0, (10, 30)), InjectionSpec("noise", 1, (20, 40))]
    with pytest.raises(DataError, match="overlap"):
        inject_many(clean, specs)


def test_plan_needs_room():
    with pytest.raises(DataError):
        plan_events(1000, 900, 10, (40, 80), 60, 5)
