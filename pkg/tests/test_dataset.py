import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mhpot.core import AtomicSystem, InputError, Labels, Sample
from mhpot.dataset import (
    MixPlan,
    MorsePotential,
    SynthSpec,
    build_epoch_index,
    default_morse_table,
    filter_max_atoms,
    largest_remainder_round,
    load_catalog,
    read_samples,
    save_catalog,
    split_train_val,
    synth_catalog,
    synth_generate,
    synth_one,
    temperature_counts,
    transform_labels,
    write_samples,
)
from oracles import random_system

sizes_st = st.lists(st.integers(1, 10**9), min_size=1, max_size=12)


# ---------------------------------------------------------------------------
# temperature sampling


@given(sizes_st, st.floats(1.0, 8.0))
def test_temperature_counts_formula(sizes, T):
    r = temperature_counts(sizes, T)
    n_max = max(sizes)
    for n, v in zip(sizes, r):
        expect = math.exp((1 - 1 / T) * math.log(n_max) + math.log(n) / T)
        assert v == pytest.approx(expect, rel=1e-12)


@given(sizes_st, st.floats(1.0, 8.0))
def test_temperature_counts_properties(sizes, T):
    r = temperature_counts(sizes, T)
    n = np.array(sizes, dtype=float)
    assert np.all(r[n == n.max()] == n.max())
    assert np.all(r >= n * (1 - 1e-12))
    assert np.all(r <= n.max() * (1 + 1e-12))
    # order preserving
    order = np.argsort(n, kind="stable")
    assert np.all(np.diff(r[order]) >= -1e-6 * n.max())


def test_temperature_one_is_identity():
    sizes = [5, 17, 1000]
    np.testing.assert_allclose(temperature_counts(sizes, 1.0), sizes)


@pytest.mark.parametrize("bad", [dict(sizes=[], T=2), dict(sizes=[0, 4], T=2), dict(sizes=[3], T=0.5)])
def test_temperature_rejects(bad):
    with pytest.raises(InputError):
        temperature_counts(bad["sizes"], bad["T"])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20))
def test_largest_remainder_preserves_rounded_total(values):
    out = largest_remainder_round(values)
    assert out.sum() == math.floor(np.sum(np.asarray(values, dtype=float)) + 0.5)
    assert np.all(np.abs(out - np.asarray(values)) < 1.0 + 1e-9)


def test_largest_remainder_ties_go_to_lowest_index():
    np.testing.assert_array_equal(largest_remainder_round([0.5, 0.5, 1.0]), [1, 0, 1])


@given(st.lists(st.integers(1, 50), min_size=1, max_size=5), st.integers(0, 1000), st.integers(0, 1000))
def test_epoch_index_multiset_is_seed_independent(sizes, s1, s2):
    plan = MixPlan.build(sizes, 2.0)
    a = build_epoch_index(plan, seed=s1)
    b = build_epoch_index(plan, seed=s2)
    key = lambda x: sorted(map(tuple, x.tolist()))
    assert key(a) == key(b)
    counts = plan.integer_counts()
    for k, n in enumerate(sizes):
        per = np.bincount(a[a[:, 0] == k, 1], minlength=n)
        assert per.sum() == counts[k]
        assert per.max() - per.min() <= 1


# ---------------------------------------------------------------------------
# filtering and splitting


def _dummy(n_atoms):
    return Sample(AtomicSystem(np.arange(3.0 * n_atoms).reshape(n_atoms, 3), [1] * n_atoms))


def test_filter_boundary():
    samples = [_dummy(n) for n in (299, 300, 301)]
    kept, removed = filter_max_atoms(samples, 300)
    assert [s.natoms for s in kept] == [299, 300]
    assert removed == 1


@given(st.integers(2, 500), st.floats(0.001, 0.5), st.integers(0, 100))
def test_split_partition(n, f, seed):
    items = list(range(n))
    tr, va = split_train_val(items, f, seed)
    assert sorted(tr + va) == items
    assert len(va) == math.floor(f * n + 0.5)
    assert split_train_val(items, f, seed) == (tr, va)


def test_split_rejects():
    with pytest.raises(InputError):
        split_train_val([1, 2, 3], 0.0)
    with pytest.raises(InputError):
        split_train_val([1], 0.1)


# ---------------------------------------------------------------------------
# Morse labels


def test_morse_forces_are_negative_gradient(rng):
    pot = MorsePotential(default_morse_table([1, 6, 8]), 4.0, 5.0)
    for _ in range(5):
        s = random_system(rng, 8, elements=(1, 6, 8), box=5.0)
        e, f = pot.energy_forces(s.positions, s.numbers)
        h = 1e-5
        fd = np.zeros_like(f)
        for i in range(s.natoms):
            for k in range(3):
                p = s.positions.copy()
                p[i, k] += h
                ep, _ = pot.energy_forces(p, s.numbers)
                p[i, k] -= 2 * h
                em, _ = pot.energy_forces(p, s.numbers)
                fd[i, k] = -(ep - em) / (2 * h)
        np.testing.assert_allclose(f, fd, atol=1e-7)
        np.testing.assert_allclose(f.sum(axis=0), 0, atol=1e-12)


def test_morse_pair_shape():
    table = {(1, 1): (0.5, 1.5, 1.0)}
    pot = MorsePotential(table, 4.0, 5.0)
    z = [1, 1]

    def pair(r):
        return pot.energy_forces(np.array([[0, 0, 0], [r, 0, 0.0]]), z)[0]

    assert pair(1.0) == pytest.approx(-0.5, abs=1e-12)
    assert pair(5.0) == 0.0 and pair(6.0) == 0.0
    # switch is continuous at both ends
    assert pair(4.0 - 1e-9) == pytest.approx(pair(4.0 + 1e-9), abs=1e-8)
    assert abs(pair(5.0 - 1e-6)) < 1e-12


def test_transform_labels():
    spec = SynthSpec("x", energy_offsets={1: -1.0, 8: -2.0}, energy_scale=2.0)
    e, f = transform_labels(spec, np.array([1, 1, 8]), 0.5, np.ones((3, 3)))
    assert e == pytest.approx(2.0 * 0.5 - 4.0)
    np.testing.assert_array_equal(f, 2 * np.ones((3, 3)))


# ---------------------------------------------------------------------------
# synthesis


SMALL = SynthSpec("small", atom_mode=6, max_atoms=12, elements=[1, 6, 8])


def test_synth_is_order_independent():
    batch = synth_generate(SMALL, 6, seed=40)
    single = synth_one(SMALL, 4, 40)
    np.testing.assert_array_equal(batch[4].system.positions, single.system.positions)
    assert batch[4].labels.energy == single.labels.energy


def test_synth_parallel_matches_serial(monkeypatch):
    serial = synth_generate(SMALL, 130, seed=3)
    monkeypatch.setenv("LAMM_THREADS", "2")
    parallel = synth_generate(SMALL, 130, seed=3)
    assert len(serial) == len(parallel)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.system.positions, b.system.positions)
        np.testing.assert_array_equal(a.labels.forces, b.labels.forces)


def test_synth_labels_match_potential():
    s = synth_one(SMALL, 0, 0)
    e, f = SMALL.potential().energy_forces(s.system.positions, s.system.numbers)
    e2, f2 = transform_labels(SMALL, s.system.numbers, e, f)
    assert s.labels.energy == e2
    np.testing.assert_array_equal(s.labels.forces, f2)


def test_task_kinds_set_masks():
    for kind, masks in [("energy_and_forces", (1, 1)), ("energy_only", (1, 0)), ("denoising", (0, 0))]:
        spec = SynthSpec("k", task_kind=kind, atom_mode=5, max_atoms=8, head_index=3)
        s = synth_one(spec, 0, 0)
        assert (s.labels.energy_mask, s.labels.force_mask) == masks
        assert s.labels.dataset_index == 3


def test_synth_structures_are_physical():
    for s in synth_generate(SMALL, 30, seed=1):
        d = np.linalg.norm(s.system.positions[:, None] - s.system.positions[None], axis=-1)
        d[np.diag_indices(s.natoms)] = np.inf
        assert d.min() > 0.5


def test_spec_json_roundtrip_and_strict():
    spec = SynthSpec("x", morse={(1, 6): (0.3, 1.5, 1.1)}, energy_offsets={6: -1.0})
    assert SynthSpec.from_json(spec.to_json()) == spec
    d = spec.to_json()
    d["atom_mod"] = 3
    with pytest.raises(InputError):
        SynthSpec.from_json(d)
    with pytest.raises(InputError):
        SynthSpec("x", task_kind="nope")


# ---------------------------------------------------------------------------
# storage


def _assert_same(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.system.positions, y.system.positions)
        np.testing.assert_array_equal(x.system.numbers, y.system.numbers)
        assert x.labels.energy == y.labels.energy
        assert x.labels.energy_mask == y.labels.energy_mask
        assert x.labels.force_mask == y.labels.force_mask
        if x.labels.force_mask:
            np.testing.assert_array_equal(x.labels.forces, y.labels.forces)


def test_binary_roundtrip(tmp_path, rng):
    samples = [
        Sample(random_system(rng, 3), Labels.make(energy=-1.25, forces=rng.normal(size=(3, 3)))),
        Sample(random_system(rng, 2), Labels.make(energy=0.1)),
        Sample(random_system(rng, 4), Labels.make()),
    ]
    write_samples(tmp_path / "s.bin", samples)
    _assert_same(samples, read_samples(tmp_path / "s.bin"))


def test_binary_rejects_corruption(tmp_path, rng):
    samples = [Sample(random_system(rng, 3), Labels.make(energy=1.0))]
    path = tmp_path / "s.bin"
    write_samples(path, samples)
    raw = path.read_bytes()
    path.write_bytes(b"XXXXXXX" + raw[7:])
    with pytest.raises(InputError):
        read_samples(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(InputError):
        read_samples(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(InputError):
        read_samples(path)


def test_catalog_roundtrip(tmp_path):
    specs = [SMALL, SynthSpec("u", task_kind="denoising", head_index=1, atom_mode=5, max_atoms=8)]
    cat = synth_catalog(specs, [5, 4], seed=2)
    save_catalog(cat, tmp_path / "cat")
    back = load_catalog(tmp_path / "cat")
    assert back.names == cat.names and back.num_heads == 2
    for a, b in zip(cat, back):
        assert a.meta == b.meta and a.spec == b.spec
        _assert_same(a.samples, b.samples)
    assert all(s.subset_id == 1 and s.labels.dataset_index == 1 for s in back[1].samples)
