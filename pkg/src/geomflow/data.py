"""Molecule containers, XYZ ingestion, feature encoding, and a toy dataset.

A molecule is a pair of arrays: centered coordinates (N, 3) and per-node
features (N, 6). The feature row is a one-hot block over the supported
atom types (H, C, N, O, F) followed by one real-valued charge channel.
Both blocks are treated as continuous by the probability paths; exact
one-hot rows only reappear after discretization.

The XYZ dialect accepted here is the plain multi-block format: an atom
count line, a free-text comment line, then ``Symbol x y z [charge]`` rows,
with blocks concatenated back to back. Parse errors carry the offending
line number. Ingested coordinates are always re-centered, so every
geometry in a Dataset satisfies the zero center-of-mass convention.

The synthetic toy dataset replaces a real training corpus in tests. Each
size from 3 to 6 has one fixed template (water-, ammonia-, fluoromethane-
and methanol-like shapes) jittered with Gaussian noise, so the pairwise
distance distribution and the atom-type marginals of a generated batch
can be compared against closed-form references.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import as_point_cloud, project_zero_com

__all__ = [
    "ATOM_TYPES",
    "TOY_JITTER_SIGMA",
    "FeatureLayout",
    "DEFAULT_LAYOUT",
    "MoleculeGeometry",
    "Dataset",
    "encode",
    "atom_symbols",
    "atom_charges",
    "read_xyz",
    "write_xyz",
    "write_dataset_stats",
    "toy_template",
    "synthetic_toy_dataset",
]

ATOM_TYPES = ("H", "C", "N", "O", "F")


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the feature block: one-hot types, then one charge."""

    atom_types: tuple[str, ...] = ATOM_TYPES

    def __post_init__(self):
        if len(self.atom_types) == 0:
            raise ValueError("layout needs at least one atom type")
        if len(set(self.atom_types)) != len(self.atom_types):
            raise ValueError("duplicate atom types in layout")

    @property
    def n_types(self) -> int:
        return len(self.atom_types)

    @property
    def dim(self) -> int:
        return len(self.atom_types) + 1

    @property
    def charge_column(self) -> int:
        return len(self.atom_types)

    def type_index(self, symbol: str) -> int:
        try:
            return self.atom_types.index(symbol)
        except ValueError:
            raise ValueError(
                f"unsupported atom symbol {symbol!r}; supported: {self.atom_types}"
            ) from None


DEFAULT_LAYOUT = FeatureLayout()


@dataclass(frozen=True, eq=False)
class MoleculeGeometry:
    """Coordinates plus features for one molecule.

    Arrays are stored as given (not copied); constructors in this module
    center the coordinates before building the instance.
    """

    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        coords = as_point_cloud(self.coords, "coords")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features must have shape (N, d) with N={coords.shape[0]}, "
                f"got {feats.shape}"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Dataset:
    """An immutable list of molecules plus its node-count histogram."""

    molecules: tuple[MoleculeGeometry, ...]
    size_histogram: dict[int, int]
    layout: FeatureLayout = field(default_factory=FeatureLayout)

    @classmethod
    def from_molecules(cls, molecules, layout: FeatureLayout = DEFAULT_LAYOUT) -> "Dataset":
        mols = tuple(molecules)
        if not mols:
            raise ValueError("dataset needs at least one molecule")
        for m in mols:
            if m.d != layout.dim:
                raise ValueError(
                    f"molecule feature width {m.d} does not match layout width {layout.dim}"
                )
        hist = dict(sorted(Counter(m.n_nodes for m in mols).items()))
        return cls(mols, hist, layout)

    def __len__(self) -> int:
        return len(self.molecules)

    def sample_sizes(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n node counts from the empirical size histogram."""
        sizes = np.array(sorted(self.size_histogram), dtype=int)
        counts = np.array([self.size_histogram[s] for s in sizes], dtype=np.float64)
        return rng.choice(sizes, size=n, p=counts / counts.sum())


def encode(types, charges, coords, layout: FeatureLayout = DEFAULT_LAYOUT) -> MoleculeGeometry:
    """Build a centered MoleculeGeometry from symbols, charges and positions."""
    coords = project_zero_com(coords)
    n = coords.shape[0]
    types = list(types)
    charges = np.asarray(charges, dtype=np.float64)
    if len(types) != n or charges.shape != (n,):
        raise ValueError(
            f"need {n} types and {n} charges to match {n} coordinate rows, "
            f"got {len(types)} and {charges.shape}"
        )
    feats = np.zeros((n, layout.dim))
    for i, sym in enumerate(types):
        feats[i, layout.type_index(sym)] = 1.0
    feats[:, layout.charge_column] = charges
    return MoleculeGeometry(coords, feats)


def atom_symbols(g: MoleculeGeometry, layout: FeatureLayout = DEFAULT_LAYOUT) -> list:
    """Read atom symbols off the one-hot block (argmax per row)."""
    if g.d != layout.dim:
        raise ValueError(f"feature width {g.d} does not match layout width {layout.dim}")
    idx = np.argmax(g.features[:, : layout.n_types], axis=1)
    return [layout.atom_types[i] for i in idx]


def atom_charges(g: MoleculeGeometry, layout: FeatureLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Integer charges from the charge channel (nearest integer)."""
    if g.d != layout.dim:
        raise ValueError(f"feature width {g.d} does not match layout width {layout.dim}")
    return np.rint(g.features[:, layout.charge_column]).astype(int)


def read_xyz(path, layout: FeatureLayout = DEFAULT_LAYOUT) -> Dataset:
    """Parse a multi-block XYZ file into a Dataset.

    Raises ValueError with ``path:line`` context for a malformed atom
    count, an unknown atom symbol, a non-numeric coordinate or charge,
    and truncated blocks.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    molecules = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():  # tolerate blank separator lines
            i += 1
            continue
        try:
            n_atoms = int(lines[i].strip())
        except ValueError:
            raise ValueError(
                f"{path}:{i + 1}: expected an atom count, got {lines[i].strip()!r}"
            ) from None
        if n_atoms < 1:
            raise ValueError(f"{path}:{i + 1}: atom count must be >= 1, got {n_atoms}")
        if i + 1 >= len(lines):
            raise ValueError(f"{path}:{i + 2}: truncated block, missing comment line")
        types, charges, coords = [], [], []
        for k in range(n_atoms):
            lineno = i + 3 + k
            if i + 2 + k >= len(lines):
                raise ValueError(f"{path}:{lineno}: truncated block, expected an atom row")
            parts = lines[i + 2 + k].split()
            if len(parts) not in (4, 5):
                raise ValueError(
                    f"{path}:{lineno}: expected 'Symbol x y z [charge]', "
                    f"got {len(parts)} fields"
                )
            sym = parts[0]
            if sym not in layout.atom_types:
                raise ValueError(f"{path}:{lineno}: unknown atom symbol {sym!r}")
            try:
                xyz = [float(v) for v in parts[1:4]]
                charge = float(parts[4]) if len(parts) == 5 else 0.0
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-numeric coordinate or charge"
                ) from None
            types.append(sym)
            charges.append(charge)
            coords.append(xyz)
        molecules.append(encode(types, charges, np.array(coords), layout))
        i += 2 + n_atoms
    if not molecules:
        raise ValueError(f"{path}: no molecule blocks found")
    return Dataset.from_molecules(molecules, layout)


def write_xyz(molecules, path, layout: FeatureLayout = DEFAULT_LAYOUT) -> None:
    """Write molecules as concatenated XYZ blocks (6-decimal coordinates).

    Symbols and charges are taken from the discretized view of the
    feature block (argmax type, nearest-integer charge).
    """
    path = Path(path)
    out = []
    for idx, g in enumerate(molecules):
        syms = atom_symbols(g, layout)
        charges = atom_charges(g, layout)
        out.append(f"{g.n_nodes}")
        out.append(f"molecule {idx}")
        for sym, (x, y, z), q in zip(syms, g.coords, charges):
            out.append(f"{sym} {x:.6f} {y:.6f} {z:.6f} {q:d}")
    path.write_text("\n".join(out) + "\n")


def write_dataset_stats(dataset: Dataset, path) -> None:
    """Dump per-size molecule and atom-type counts as one CSV table.

    One row per node count, smallest first; the type columns follow the
    layout's atom ordering, counting atoms over all molecules of that
    size.
    """
    layout = dataset.layout
    by_size = {size: Counter() for size in dataset.size_histogram}
    for g in dataset.molecules:
        by_size[g.n_nodes].update(atom_symbols(g, layout))
    rows = [",".join(["n_nodes", "molecules", *layout.atom_types])]
    for size in sorted(by_size):
        counts = by_size[size]
        rows.append(
            ",".join(
                str(v)
                for v in (size, dataset.size_histogram[size], *(counts[s] for s in layout.atom_types))
            )
        )
    Path(path).write_text("\n".join(rows) + "\n")


# Toy templates. Bond lengths and angles are round numbers near the real
# molecules they imitate; what matters is that bonded pairs sit far from
# non-bonded pairs relative to the jitter, and that every atom's type is
# recoverable from its local geometry alone.

TOY_JITTER_SIGMA = 0.05


def _ring(radius: float, z: float, n: int = 3) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, z)], axis=1)


def _toy_templates() -> dict:
    # Water-like: O with two H at unit length, 104.5 degree opening.
    half = math.radians(104.5) / 2.0
    water = np.array(
        [[0.0, 0.0, 0.0], [math.sin(half), math.cos(half), 0.0], [-math.sin(half), math.cos(half), 0.0]]
    )
    # Ammonia-like: N above a ring of three H; unit N-H bonds, H-H 1.62.
    r_nh3 = 1.62 / math.sqrt(3.0)
    ammonia = np.vstack([[0.0, 0.0, 0.0], _ring(r_nh3, -math.sqrt(1.0 - r_nh3**2))])
    # Fluoromethane-like: tetrahedral C with three unit C-H and C-F 1.3.
    r_ch = math.sqrt(8.0) / 3.0  # unit bond at the tetrahedral angle
    fluoromethane = np.vstack([[0.0, 0.0, 0.0], _ring(r_ch, -1.0 / 3.0), [0.0, 0.0, 1.3]])
    # Methanol-like: same C core, C-O 1.5, then a unit O-H off the O.
    methanol = np.vstack(
        [
            [0.0, 0.0, 0.0],
            _ring(r_ch, -1.0 / 3.0),
            [0.0, 0.0, 1.5],
            [r_ch, 0.0, 1.5 + 1.0 / 3.0],
        ]
    )
    return {
        3: (("O", "H", "H"), water),
        4: (("N", "H", "H", "H"), ammonia),
        5: (("C", "H", "H", "H", "F"), fluoromethane),
        6: (("C", "H", "H", "H", "O", "H"), methanol),
    }


_TOY_TEMPLATES = _toy_templates()


def toy_template(n_nodes: int):
    """The clean (unjittered) template for one toy size: (types, coords)."""
    if n_nodes not in _TOY_TEMPLATES:
        raise ValueError(f"no toy template of size {n_nodes}; sizes are 3..6")
    types, coords = _TOY_TEMPLATES[n_nodes]
    return types, coords.copy()


def synthetic_toy_dataset(n_molecules: int, seed: int) -> Dataset:
    """Generate jittered template molecules, cycling through sizes 3..6.

    Deterministic in the seed. Charges are all zero, coordinates are the
    template plus isotropic Gaussian jitter (sigma 0.05), re-centered.
    """
    if n_molecules < 1:
        raise ValueError(f"n_molecules must be >= 1, got {n_molecules}")
    rng = np.random.default_rng(seed)
    sizes = sorted(_TOY_TEMPLATES)
    molecules = []
    for i in range(n_molecules):
        types, coords = _TOY_TEMPLATES[sizes[i % len(sizes)]]
        jittered = coords + TOY_JITTER_SIGMA * rng.standard_normal(coords.shape)
        molecules.append(encode(types, np.zeros(len(types)), jittered))
    return Dataset.from_molecules(molecules)
