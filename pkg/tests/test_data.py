"""Tests for molecule containers, XYZ parsing, and the toy generator."""

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from geomflow.data import (
    ATOM_TYPES,
    DEFAULT_LAYOUT,
    TOY_JITTER_SIGMA,
    Dataset,
    MoleculeGeometry,
    atom_charges,
    atom_symbols,
    encode,
    read_xyz,
    synthetic_toy_dataset,
    toy_template,
    write_dataset_stats,
    write_xyz,
)


# ------------------------------------------------------------------ encoding


def test_encode_one_hot_ordering():
    g = encode(["C"], [0.0], [[0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(g.features[0, :5], [0.0, 1.0, 0.0, 0.0, 0.0])
    assert ATOM_TYPES.index("C") == 1


def test_encode_charge_channel():
    g = encode(["N"], [-1.0], [[1.0, 2.0, 3.0]])
    assert g.features[0, DEFAULT_LAYOUT.charge_column] == -1.0
    np.testing.assert_array_equal(atom_charges(g), [-1])


def test_encode_centers_coordinates():
    g = encode(["H", "H"], [0.0, 0.0], [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    np.testing.assert_allclose(g.coords.mean(axis=0), 0.0, atol=1e-12)


def test_encode_rejects_unknown_symbol():
    with pytest.raises(ValueError, match="unsupported atom symbol"):
        encode(["Xx"], [0.0], [[0.0, 0.0, 0.0]])


def test_encode_is_injective_on_type_and_charge():
    rows = {}
    coords = [[0.0, 0.0, 0.0]]
    for sym in ATOM_TYPES:
        for charge in (-1.0, 0.0, 1.0):
            key = tuple(encode([sym], [charge], coords).features[0])
            assert key not in rows, f"collision for {sym}, {charge}"
            rows[key] = (sym, charge)


def test_symbols_round_trip():
    coords = np.arange(15, dtype=float).reshape(5, 3)
    g = encode(list(ATOM_TYPES), np.zeros(5), coords)
    assert atom_symbols(g) == list(ATOM_TYPES)


def test_molecule_geometry_validates_shapes():
    with pytest.raises(ValueError, match="features"):
        MoleculeGeometry(np.zeros((2, 3)), np.zeros((3, 6)))
    with pytest.raises(ValueError, match="non-finite"):
        MoleculeGeometry(np.zeros((2, 3)), np.full((2, 6), np.nan))


# ----------------------------------------------------------------- xyz files


def test_read_single_atom_file(tmp_path):
    f = tmp_path / "one.xyz"
    f.write_text("1\nlone hydrogen\nH 0.0 0.0 0.0\n")
    ds = read_xyz(f)
    assert len(ds) == 1
    assert ds.molecules[0].n_nodes == 1
    assert atom_symbols(ds.molecules[0]) == ["H"]


def test_read_multi_block_with_charges(tmp_path):
    f = tmp_path / "two.xyz"
    f.write_text(
        "2\nfirst\nH 0 0 0\nF 1 0 0 -1\n"
        "1\nsecond\nC 0.5 0.5 0.5\n"
    )
    ds = read_xyz(f)
    assert len(ds) == 2
    assert ds.size_histogram == {1: 1, 2: 1}
    np.testing.assert_array_equal(atom_charges(ds.molecules[0]), [0, -1])


def test_write_then_read_round_trips(tmp_path):
    rng = np.random.default_rng(5)
    mols = [
        encode(["O", "H", "H"], [0.0, 0.0, 1.0], rng.standard_normal((3, 3))),
        encode(["C", "F"], [0.0, 0.0], rng.standard_normal((2, 3))),
    ]
    f1, f2 = tmp_path / "a.xyz", tmp_path / "b.xyz"
    write_xyz(mols, f1)
    ds = read_xyz(f1)
    for orig, back in zip(mols, ds.molecules):
        assert atom_symbols(orig) == atom_symbols(back)
        np.testing.assert_array_equal(atom_charges(orig), atom_charges(back))
        # printed at 6 decimals, then re-centered: agreement to ~1e-6
        np.testing.assert_allclose(orig.coords, back.coords, atol=2e-6)
    # a second pass through the writer is textually idempotent
    write_xyz(ds.molecules, f2)
    assert f1.read_text() == f2.read_text()


def test_read_reports_unknown_symbol_with_line(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("1\ncomment\nXx 0 0 0\n")
    with pytest.raises(ValueError, match=r"bad\.xyz:3: unknown atom symbol 'Xx'"):
        read_xyz(f)


def test_read_reports_malformed_count(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("one\ncomment\nH 0 0 0\n")
    with pytest.raises(ValueError, match=r"bad\.xyz:1: expected an atom count"):
        read_xyz(f)


def test_read_reports_non_numeric_coordinate(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("2\ncomment\nH 0 0 0\nH 1 zero 0\n")
    with pytest.raises(ValueError, match=r"bad\.xyz:4: non-numeric"):
        read_xyz(f)


def test_read_reports_truncated_block(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("3\ncomment\nH 0 0 0\n")
    with pytest.raises(ValueError, match=r"bad\.xyz:4: truncated"):
        read_xyz(f)


def test_read_rejects_empty_file(tmp_path):
    f = tmp_path / "empty.xyz"
    f.write_text("\n")
    with pytest.raises(ValueError, match="no molecule blocks"):
        read_xyz(f)


# --------------------------------------------------------------- toy dataset


def test_toy_dataset_is_deterministic():
    a = synthetic_toy_dataset(12, seed=3)
    b = synthetic_toy_dataset(12, seed=3)
    for ga, gb in zip(a.molecules, b.molecules):
        np.testing.assert_array_equal(ga.coords, gb.coords)
        np.testing.assert_array_equal(ga.features, gb.features)
    c = synthetic_toy_dataset(12, seed=4)
    assert not np.array_equal(a.molecules[0].coords, c.molecules[0].coords)


def test_toy_dataset_histogram_and_sizes():
    ds = synthetic_toy_dataset(10, seed=0)
    assert ds.size_histogram == {3: 3, 4: 3, 5: 2, 6: 2}
    assert sum(ds.size_histogram.values()) == len(ds)


def test_toy_molecules_stay_near_their_template():
    ds = synthetic_toy_dataset(40, seed=11)
    for g in ds.molecules:
        _, template = toy_template(g.n_nodes)
        # jitter is iid per coordinate; pairwise distances move by at most
        # a few noise widths once re-centering is accounted for
        got = np.sort(pdist(g.coords))
        want = np.sort(pdist(template))
        assert np.max(np.abs(got - want)) < 6.0 * TOY_JITTER_SIGMA


def test_toy_types_follow_the_templates():
    ds = synthetic_toy_dataset(8, seed=2)
    for g in ds.molecules:
        types, _ = toy_template(g.n_nodes)
        assert atom_symbols(g) == list(types)
        np.testing.assert_array_equal(atom_charges(g), 0)


def test_toy_template_rejects_unknown_size():
    with pytest.raises(ValueError, match="sizes are 3..6"):
        toy_template(7)


def test_dataset_sample_sizes_follows_histogram():
    ds = synthetic_toy_dataset(100, seed=1)
    rng = np.random.default_rng(0)
    draws = ds.sample_sizes(rng, 4000)
    assert set(np.unique(draws)) <= {3, 4, 5, 6}
    freq = np.array([(draws == s).mean() for s in (3, 4, 5, 6)])
    np.testing.assert_allclose(freq, 0.25, atol=0.03)


def test_dataset_rejects_empty_and_mismatched():
    with pytest.raises(ValueError, match="at least one molecule"):
        Dataset.from_molecules([])
    bad = MoleculeGeometry(np.zeros((1, 3)), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="feature width"):
        Dataset.from_molecules([bad])


def test_dataset_stats_csv(tmp_path):
    ds = synthetic_toy_dataset(20, seed=3)
    out = tmp_path / "stats.csv"
    write_dataset_stats(ds, out)
    rows = [line.split(",") for line in out.read_text().splitlines()]
    assert rows[0] == ["n_nodes", "molecules", "H", "C", "N", "O", "F"]
    assert [int(r[0]) for r in rows[1:]] == sorted(ds.size_histogram)
    assert sum(int(r[1]) for r in rows[1:]) == 20
    for r in rows[1:]:
        assert sum(int(v) for v in r[2:]) == int(r[0]) * int(r[1])
