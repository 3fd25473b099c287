"""Chemical quality metrics plus the two information-decay estimators.

Bond inference is a thresholded table lookup on pairwise distances: a pair
bonds when its distance is within ``margin`` times the tabulated single
length, and higher orders take over below the midpoints between adjacent
reference lengths. Stability asks every atom to meet its valency exactly;
uniqueness canonicalizes the typed bond multigraph with color refinement
(exact isomorphism search settles hash collisions up to 12 nodes).

The two estimators quantify how much feature information survives at time
t along a conditional path. ``mi_hh`` is exact up to Monte-Carlo error
because the clean features live on a finite alphabet, so the Bayes
posterior under the Gaussian smearing is computable. ``mi_xh`` has no such
shortcut: it trains a small per-node classifier from noisy geometry to
atom type and reports the difference-of-entropies lower bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .data import DEFAULT_LAYOUT, Dataset, FeatureLayout, MoleculeGeometry, atom_charges, atom_symbols
from .paths import ConditionalPath, HybridPath, hybrid_training_sample, path_coefficients
from .training import adam_update

__all__ = [
    "BondTable",
    "StabilityReport",
    "MiEstimate",
    "MiClassifierConfig",
    "parse_bond_table",
    "load_bond_table",
    "default_bond_table",
    "toy_bond_table",
    "infer_bonds",
    "stability",
    "uniqueness",
    "node_distance_features",
    "mi_hh",
    "mi_xh",
]

_ISO_MAX_N = 12  # exact isomorphism fallback bound; larger graphs trust the hash
_FAR = 10.0  # stand-in distance when a node has fewer neighbors than a feature slot


def _pair(a: str, b: str) -> tuple:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class BondTable:
    """Reference bond lengths and valencies for a fixed atom vocabulary.

    ``lengths`` maps an ordered symbol pair to (single, double, triple)
    reference lengths with None for orders the pair never takes; pairs
    missing entirely never bond. Loaded tables are cached and shared, so
    treat instances as read-only.
    """

    margin: float
    valences: dict
    lengths: dict

    def __post_init__(self):
        if self.margin < 1.0:
            raise ValueError(f"margin must be >= 1, got {self.margin}")
        for sym, valence in self.valences.items():
            if valence < 1:
                raise ValueError(f"valence of {sym} must be >= 1, got {valence}")
        for (a, b), entry in self.lengths.items():
            if a not in self.valences or b not in self.valences:
                raise ValueError(f"bond pair {a}-{b} lacks a valency entry")
            single, double, triple = entry
            if single is None:
                raise ValueError(f"pair {a}-{b} needs a single-bond length")
            if triple is not None and double is None:
                raise ValueError(f"pair {a}-{b} has a triple length but no double")
            present = [length for length in entry if length is not None]
            if any(y >= x for x, y in zip(present, present[1:])):
                raise ValueError(f"pair {a}-{b} lengths must strictly decrease with order")

    def _check_type(self, sym: str):
        if sym not in self.valences:
            raise ValueError(f"unknown atom type {sym!r}")

    def thresholds(self, a: str, b: str) -> tuple:
        """(single, double, triple) distance cutoffs; None where absent."""
        self._check_type(a)
        self._check_type(b)
        entry = self.lengths.get(_pair(a, b))
        if entry is None:
            return (None, None, None)
        single, double, triple = entry
        cut_single = self.margin * single
        cut_double = None if double is None else 0.5 * (single + double)
        cut_triple = None if triple is None else 0.5 * (double + triple)
        return (cut_single, cut_double, cut_triple)

    def bond_order(self, a: str, b: str, distance: float) -> int:
        """Highest order whose cutoff the distance clears, 0 for no bond."""
        cut_single, cut_double, cut_triple = self.thresholds(a, b)
        if cut_single is None or distance > cut_single:
            return 0
        if cut_triple is not None and distance <= cut_triple:
            return 3
        if cut_double is not None and distance <= cut_double:
            return 2
        return 1


def parse_bond_table(text: str, source: str = "<string>") -> BondTable:
    """Build a BondTable from its text form.

    The format is line based: ``margin F`` once, ``valence SYM K`` per
    atom type, and ``bond SYM SYM single double triple`` per pair with
    ``-`` marking orders that do not occur. ``#`` starts a comment.
    """
    margin = None
    valences = {}
    lengths = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "margin" and len(parts) == 2:
                margin = float(parts[1])
            elif parts[0] == "valence" and len(parts) == 3:
                valences[parts[1]] = int(parts[2])
            elif parts[0] == "bond" and len(parts) == 6:
                key = _pair(parts[1], parts[2])
                lengths[key] = tuple(None if p == "-" else float(p) for p in parts[3:6])
            else:
                raise ValueError("unrecognized directive")
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc} in {raw!r}") from None
    if margin is None:
        raise ValueError(f"{source}: missing margin line")
    return BondTable(margin=margin, valences=valences, lengths=lengths)


def load_bond_table(path) -> BondTable:
    path = Path(path)
    return parse_bond_table(path.read_text(), source=str(path))


@lru_cache(maxsize=None)
def _packaged_table(name: str) -> BondTable:
    text = resources.files("geomflow").joinpath(f"tables/{name}").read_text()
    return parse_bond_table(text, source=name)


def default_bond_table() -> BondTable:
    """The covalent-length table for real molecules (margin 1.1)."""
    return _packaged_table("bond_table_v1.txt")


def toy_bond_table() -> BondTable:
    """The unit-length table matching the synthetic templates (margin 1.35)."""
    return _packaged_table("toy_bond_table_v1.txt")


def infer_bonds(g: MoleculeGeometry, table: BondTable, layout: FeatureLayout = DEFAULT_LAYOUT):
    """All bonded pairs of a discretized molecule as (i, j, order), i < j."""
    symbols = atom_symbols(g, layout)
    diff = g.coords[:, None, :] - g.coords[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    bonds = []
    for i in range(g.n_nodes):
        for j in range(i + 1, g.n_nodes):
            order = table.bond_order(symbols[i], symbols[j], dist[i, j])
            if order:
                bonds.append((i, j, order))
    return bonds


@dataclass(frozen=True)
class StabilityReport:
    """Fractions of valency-satisfied atoms / molecules and distinct graphs."""

    atom_stable_fraction: float
    mol_stable_fraction: float
    unique_fraction: float
    n_molecules: int

    def __post_init__(self):
        for name in ("atom_stable_fraction", "mol_stable_fraction", "unique_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.mol_stable_fraction > self.atom_stable_fraction + 1e-12:
            raise ValueError("a molecule is stable only if all of its atoms are")


def stability(mols, table: BondTable, layout: FeatureLayout = DEFAULT_LAYOUT) -> StabilityReport:
    """Valency-exactness fractions over a batch of discretized molecules.

    An atom is stable when its summed inferred bond order equals the
    table's valency for its type; a molecule is stable when every atom
    is. The report also carries the distinct-graph fraction from
    ``uniqueness`` so one call summarizes a generation run.
    """
    if not mols:
        raise ValueError("stability needs at least one molecule")
    atoms_total = 0
    atoms_stable = 0
    mols_stable = 0
    for g in mols:
        symbols = atom_symbols(g, layout)
        summed = np.zeros(g.n_nodes, dtype=int)
        for i, j, order in infer_bonds(g, table, layout):
            summed[i] += order
            summed[j] += order
        ok = [int(summed[i]) == table.valences[sym] for i, sym in enumerate(symbols)]
        atoms_total += g.n_nodes
        atoms_stable += sum(ok)
        mols_stable += all(ok)
    return StabilityReport(
        atom_stable_fraction=atoms_stable / atoms_total,
        mol_stable_fraction=mols_stable / len(mols),
        unique_fraction=uniqueness(mols, table, layout),
        n_molecules=len(mols),
    )


def _typed_graph(g, table, layout):
    labels = tuple(zip(atom_symbols(g, layout), (int(c) for c in atom_charges(g, layout))))
    edges = {(i, j): order for i, j, order in infer_bonds(g, table, layout)}
    return labels, edges


def _compress(values):
    mapping = {v: k for k, v in enumerate(sorted(set(values)))}
    return [mapping[v] for v in values]


def _canonical_key(labels, edges):
    """Permutation-invariant key via iterated neighborhood refinement."""
    n = len(labels)
    adj = [[] for _ in range(n)]
    for (i, j), order in edges.items():
        adj[i].append((j, order))
        adj[j].append((i, order))
    colors = _compress(
        [(labels[i], tuple(sorted(order for _, order in adj[i]))) for i in range(n)]
    )
    for _ in range(3):
        colors = _compress(
            [(colors[i], tuple(sorted((order, colors[j]) for j, order in adj[i]))) for i in range(n)]
        )
    node_part = tuple(sorted(colors))
    edge_part = tuple(sorted((order, *sorted((colors[i], colors[j]))) for (i, j), order in edges.items()))
    return (n, node_part, edge_part)


def _isomorphic(graph_a, graph_b) -> bool:
    """Exact typed-multigraph isomorphism by backtracking (small n only)."""
    labels_a, edges_a = graph_a
    labels_b, edges_b = graph_b
    n = len(labels_a)
    if len(labels_b) != n or sorted(labels_a) != sorted(labels_b):
        return False
    if sorted(edges_a.values()) != sorted(edges_b.values()):
        return False
    full_a = {**edges_a, **{(j, i): o for (i, j), o in edges_a.items()}}
    full_b = {**edges_b, **{(j, i): o for (i, j), o in edges_b.items()}}

    def profile(labels, full, i):
        return (labels[i], tuple(sorted(o for (a, _), o in full.items() if a == i)))

    prof_a = [profile(labels_a, full_a, i) for i in range(n)]
    prof_b = [profile(labels_b, full_b, i) for i in range(n)]
    mapping = [-1] * n
    used = [False] * n

    def extend(i):
        if i == n:
            return True
        for j in range(n):
            if used[j] or prof_a[i] != prof_b[j]:
                continue
            if any(full_a.get((i, k)) != full_b.get((j, mapping[k])) for k in range(i)):
                continue
            mapping[i] = j
            used[j] = True
            if extend(i + 1):
                return True
            used[j] = False
        mapping[i] = -1
        return False

    return extend(0)


def uniqueness(mols, table: BondTable, layout: FeatureLayout = DEFAULT_LAYOUT) -> float:
    """Fraction of distinct typed bond graphs, ignoring geometry and order.

    Graphs hash to a refinement-based canonical key; molecules sharing a
    key are separated by exact isomorphism search when they have at most
    12 nodes, and trusted to match beyond that (refinement collisions
    between non-isomorphic molecular graphs are rare at these sizes). An
    empty list is vacuously all-unique.
    """
    if not mols:
        return 1.0
    buckets = {}
    for g in mols:
        graph = _typed_graph(g, table, layout)
        buckets.setdefault(_canonical_key(*graph), []).append(graph)
    distinct = 0
    for group in buckets.values():
        if len(group) == 1 or len(group[0][0]) > _ISO_MAX_N:
            distinct += 1
            continue
        classes = []
        for graph in group:
            if not any(_isomorphic(graph, seen) for seen in classes):
                classes.append(graph)
        distinct += len(classes)
    return distinct / len(mols)


# ---------------------------------------------------------------------------
# information estimators


@dataclass(frozen=True)
class MiEstimate:
    """One point of an information curve, in nats."""

    t: float
    value: float
    estimator: str
    stderr: float

    def __post_init__(self):
        if self.estimator not in ("exact-discrete", "classifier"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if self.stderr < 0.0:
            raise ValueError("stderr must be non-negative")
        if self.value < -3.0 * self.stderr - 1e-12:
            raise ValueError(
                f"estimate {self.value} is negative beyond noise (stderr {self.stderr})"
            )


def _features_alphabet(dataset: Dataset):
    rows = np.concatenate([g.features for g in dataset.molecules], axis=0)
    alphabet, counts = np.unique(rows, axis=0, return_counts=True)
    p = counts / counts.sum()
    return alphabet, p


def mi_hh(dataset: Dataset, path_h: ConditionalPath, t: float, n_mc: int, rng=None) -> MiEstimate:
    """Information between noisy and clean features at time t, in nats.

    The clean per-node features form a finite alphabet, so the posterior
    under the Gaussian path is exact; only the outer average over noisy
    draws is Monte-Carlo. Returns H(clean) minus the estimated posterior
    entropy, with the standard error of the Monte-Carlo mean.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if n_mc < 2:
        raise ValueError(f"n_mc must be >= 2, got {n_mc}")
    if path_h.kind == "EOT":
        raise ValueError("feature path cannot be EOT")
    if rng is None:
        rng = np.random.default_rng(0)
    alphabet, p = _features_alphabet(dataset)
    marginal_entropy = float(-np.sum(p * np.log(p)))
    scale, spread = path_coefficients(path_h, t)
    if spread == 0.0:
        # noiseless endpoint: the posterior is a point mass, no MC needed
        return MiEstimate(t=float(t), value=marginal_entropy, estimator="exact-discrete", stderr=0.0)

    ks = rng.choice(alphabet.shape[0], size=n_mc, p=p)
    noisy = scale * alphabet[ks] + spread * rng.standard_normal((n_mc, alphabet.shape[1]))
    sq = np.sum((noisy[:, None, :] - scale * alphabet[None, :, :]) ** 2, axis=-1)
    logits = np.log(p)[None, :] - sq / (2.0 * spread * spread)
    log_post = logits - logsumexp(logits, axis=1, keepdims=True)
    conditional = -np.sum(np.exp(log_post) * log_post, axis=1)
    value = marginal_entropy - float(conditional.mean())
    stderr = float(conditional.std(ddof=1) / np.sqrt(n_mc))
    return MiEstimate(t=float(t), value=value, estimator="exact-discrete", stderr=stderr)


@dataclass(frozen=True)
class MiClassifierConfig:
    """Knobs of the geometry-to-type probe classifier."""

    draws_per_molecule: int = 8
    steps: int = 2000
    learning_rate: float = 0.05
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.draws_per_molecule < 1 or self.steps < 1:
            raise ValueError("draws_per_molecule and steps must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")


def node_distance_features(coords: np.ndarray) -> np.ndarray:
    """Eight rotation-invariant per-node summaries of a centered cloud.

    Columns: the four nearest-neighbor distances (padded with a far
    constant when the molecule is small), the mean and maximum distance
    to the other nodes, the count of neighbors closer than 1.8, and the
    distance to the center of mass.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    ranked = np.sort(dist, axis=1)
    nearest = np.full((n, 4), _FAR)
    k = min(4, n - 1)
    nearest[:, :k] = ranked[:, :k]
    if n > 1:
        finite = np.where(np.isfinite(dist), dist, 0.0)
        mean_d = finite.sum(axis=1) / (n - 1)
        max_d = ranked[:, n - 2]
    else:
        mean_d = np.full(n, _FAR)
        max_d = np.full(n, _FAR)
    close = np.sum(dist < 1.8, axis=1).astype(np.float64)
    radius = np.linalg.norm(coords, axis=1)
    return np.column_stack([nearest, mean_d, max_d, close, radius])


def _classifier_examples(molecules, path_x, t, draws, rng, layout):
    hp = HybridPath(path_x, ConditionalPath("OT"))
    features = []
    types = []
    for g0 in molecules:
        idx = np.argmax(g0.features[:, : layout.n_types], axis=1)
        for _ in range(draws):
            g_t, _, _, _ = hybrid_training_sample(g0, t, hp, rng)
            features.append(node_distance_features(g_t.coords))
            types.append(idx)
    return np.concatenate(features, axis=0), np.concatenate(types)


def mi_xh(
    dataset: Dataset,
    path_x: ConditionalPath,
    t: float,
    config: MiClassifierConfig = MiClassifierConfig(),
    rng=None,
) -> MiEstimate:
    """Classifier lower bound on geometry-to-type information at time t.

    Trains a multinomial logistic model from per-node distance summaries
    of noisy coordinates to the node's atom type, then reports
    H(type) - cross-entropy on held-out molecules. Being a lower bound,
    the value can sit below the truth, and at high noise it hovers
    around zero within its standard error.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if rng is None:
        rng = np.random.default_rng(0)
    layout = dataset.layout
    n_mols = len(dataset)
    if n_mols < 5:
        raise ValueError(f"dataset of {n_mols} molecules is too small to split")
    n_test = max(1, round(config.test_fraction * n_mols))
    order = rng.permutation(n_mols)
    test_mols = [dataset.molecules[i] for i in order[:n_test]]
    train_mols = [dataset.molecules[i] for i in order[n_test:]]

    x_train, y_train = _classifier_examples(train_mols, path_x, t, config.draws_per_molecule, rng, layout)
    x_test, y_test = _classifier_examples(test_mols, path_x, t, config.draws_per_molecule, rng, layout)
    mu = x_train.mean(axis=0)
    sd = np.maximum(x_train.std(axis=0), 1e-8)
    x_train = np.column_stack([(x_train - mu) / sd, np.ones(len(x_train))])
    x_test = np.column_stack([(x_test - mu) / sd, np.ones(len(x_test))])

    n_types = layout.n_types
    onehot = np.eye(n_types)[y_train]
    weights = np.zeros((n_types, x_train.shape[1]))
    moment1 = np.zeros_like(weights)
    moment2 = np.zeros_like(weights)
    for step in range(1, config.steps + 1):
        probs = softmax(x_train @ weights.T, axis=1)
        grad = (probs - onehot).T @ x_train / len(x_train)
        adam_update(weights, grad, moment1, moment2, step, learning_rate=config.learning_rate)

    # entropy of the type marginal over the whole dataset
    counts = np.zeros(n_types)
    for g in dataset.molecules:
        counts += np.bincount(np.argmax(g.features[:, :n_types], axis=1), minlength=n_types)
    p = counts[counts > 0] / counts.sum()
    marginal_entropy = float(-np.sum(p * np.log(p)))

    logits = x_test @ weights.T
    cross_entropy = logsumexp(logits, axis=1) - logits[np.arange(len(y_test)), y_test]
    value = marginal_entropy - float(cross_entropy.mean())
    stderr = float(cross_entropy.std(ddof=1) / np.sqrt(len(cross_entropy)))
    return MiEstimate(t=float(t), value=value, estimator="classifier", stderr=stderr)
