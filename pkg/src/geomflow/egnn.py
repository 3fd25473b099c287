"""An equivariant message-passing vector field with hand-written gradients.

The model maps a molecule ``(x, h)`` and a time ``t`` to a coordinate
velocity ``vx`` (N, 3) and a feature velocity ``vh`` (N, d). Geometry only
ever enters through pairwise differences and squared distances, and the
coordinate output is a gated sum of difference vectors, so rotating the
input rotates ``vx`` and leaves ``vh`` unchanged by construction; node
relabeling permutes both outputs.

Architecture, per layer on a fully connected graph:

* edge messages: a two-layer SiLU MLP on
  ``[h_i, h_j, q_ij / (1 + q_ij), time_embedding(t)]`` with ``q_ij`` the
  squared distance (the bounded ratio keeps far-apart pairs from blowing
  up early training);
* coordinate update: ``x_i += sum_j (x_i - x_j) * gate(m_ij)`` with a
  scalar gate head per edge, the per-node displacement clipped to norm
  COORD_CLIP (the clip has an exact vector-Jacobian product, so gradient
  checks hold in both branches);
* feature update: ``h_i += mlp([h_i, sum_j m_ij])``.

``vx`` is the total accumulated displacement projected to zero center of
mass; ``vh`` is a linear head on the final features. Both heads start at
zero, so a freshly initialized model is the zero field. A single-node
input has no edges: it returns ``vx = 0`` and is flagged on the output.

Parameters live in one flat float64 array; named views (see
``parameter_shapes``) alias slices of it, so an optimizer can update the
flat array in place. ``parameter_count(n_layers, hidden_dim, feature_dim)``
is, with ``E = 2 * hidden + 1 + TIME_EMBED_DIM``:

    hidden * (feature_dim + 1)                          input embedding
  + n_layers * hidden * (E + 3 * hidden + 2 * hidden + 7)   (see below)
  + feature_dim * (hidden + 1)                          output head

where the per-layer term expands to message MLP ``hidden * (E + 1) +
hidden * (hidden + 1)``, gate MLP ``hidden * (hidden + 1) + hidden + 1``,
and feature MLP ``hidden * (2 * hidden + 1) + hidden * (hidden + 1)``.

Checkpoint format (versioned, little-endian):

    bytes 0:4    magic b"GFVF"
    bytes 4:20   format version, n_layers, hidden_dim, feature_dim (4 x uint32)
    bytes 20:24  length of the atom-order string (uint32)
    then         the comma-separated atom order, ascii
    then         parameter_count float64 values

The recorded atom order must match the package's layout on load; that
guards against silently reading features in a drifted column order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ATOM_TYPES, MoleculeGeometry

__all__ = [
    "TIME_EMBED_DIM",
    "COORD_CLIP",
    "FieldOutput",
    "VectorFieldModel",
    "time_embedding",
    "parameter_shapes",
    "parameter_count",
    "forward",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]

TIME_EMBED_DIM = 16
_TIME_FREQS = np.pi * np.geomspace(1.0, 100.0, TIME_EMBED_DIM // 2)
COORD_CLIP = 100.0

CHECKPOINT_MAGIC = b"GFVF"
CHECKPOINT_VERSION = 1


def time_embedding(t: float) -> np.ndarray:
    """Sinusoidal features of t at log-spaced frequencies, width 16.

    t = 0 maps to eight zeros followed by eight ones.
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    phase = _TIME_FREQS * t
    return np.concatenate([np.sin(phase), np.cos(phase)])


def _silu(a: np.ndarray) -> tuple:
    s = expit(a)
    return a * s, s


def _silu_grad(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + a * (1.0 - s))


@lru_cache(maxsize=None)
def _edge_index(n: int) -> tuple:
    """Neighbor table for the fully connected graph on n nodes.

    Returns ``nbr`` of shape (n, n-1) where row i lists every j != i in
    ascending order, and the matching off-diagonal boolean mask of shape
    (n, n). Cached arrays are shared; treat them as read-only.
    """
    base = np.arange(n - 1)
    nbr = np.empty((n, n - 1), dtype=int)
    for i in range(n):
        nbr[i] = np.where(base < i, base, base + 1)
    mask = ~np.eye(n, dtype=bool)
    return nbr, mask


def parameter_shapes(n_layers: int, hidden_dim: int, feature_dim: int) -> list:
    """Ordered (name, shape) pairs for the flat parameter layout."""
    h, d = hidden_dim, feature_dim
    e_in = 2 * h + 1 + TIME_EMBED_DIM
    shapes = [("win_w", (h, d)), ("win_b", (h,))]
    for l in range(n_layers):
        shapes += [
            (f"l{l}_msg1_w", (h, e_in)),
            (f"l{l}_msg1_b", (h,)),
            (f"l{l}_msg2_w", (h, h)),
            (f"l{l}_msg2_b", (h,)),
            (f"l{l}_gate1_w", (h, h)),
            (f"l{l}_gate1_b", (h,)),
            (f"l{l}_gate2_w", (h,)),
            (f"l{l}_gate2_b", (1,)),
            (f"l{l}_feat1_w", (h, 2 * h)),
            (f"l{l}_feat1_b", (h,)),
            (f"l{l}_feat2_w", (h, h)),
            (f"l{l}_feat2_b", (h,)),
        ]
    shapes += [("out_w", (d, h)), ("out_b", (d,))]
    return shapes


def parameter_count(n_layers: int, hidden_dim: int, feature_dim: int) -> int:
    """Total parameter count for the given architecture."""
    return sum(
        int(np.prod(shape)) for _, shape in parameter_shapes(n_layers, hidden_dim, feature_dim)
    )


# Output heads start at zero so the initial field is exactly zero.
_ZERO_INIT = ("gate2_w", "gate2_b", "out_w", "out_b")


class VectorFieldModel:
    """Flat-parameter equivariant field model.

    ``params`` is the single source of truth; the named views returned by
    ``view`` alias it, so in-place writes through either are visible to
    both. After any in-place parameter update call ``mark_updated`` so
    cached forward intermediates are invalidated.
    """

    def __init__(self, n_layers: int = 3, hidden_dim: int = 64, feature_dim: int = 6, seed: int = 0):
        if n_layers < 1 or hidden_dim < 1 or feature_dim < 1:
            raise ValueError("n_layers, hidden_dim and feature_dim must all be >= 1")
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.seed = seed
        self._shapes = parameter_shapes(n_layers, hidden_dim, feature_dim)
        self.params = np.zeros(parameter_count(n_layers, hidden_dim, feature_dim))
        self._views = {}
        offset = 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            self._views[name] = self.params[offset : offset + size].reshape(shape)
            offset += size
        self._version = 0
        self._cache = None
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> None:
        # uniform +-1/sqrt(fan_in) for weights and their biases; heads zero
        for name, shape in self._shapes:
            view = self._views[name]
            if any(name.endswith(z) for z in _ZERO_INIT):
                view[...] = 0.0
                continue
            fan_in = shape[1] if len(shape) == 2 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            if name.endswith("_b"):
                # biases share their weight's fan-in bound
                weight_shape = dict(self._shapes)[name[:-2] + "_w"]
                bound = 1.0 / np.sqrt(weight_shape[-1] if len(weight_shape) == 2 else weight_shape[0])
            view[...] = rng.uniform(-bound, bound, size=shape)

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def mark_updated(self) -> None:
        """Invalidate cached forward state after an in-place parameter write."""
        self._version += 1
        if not np.all(np.isfinite(self.params)):
            raise FloatingPointError("model parameters became non-finite")

    def grad_views(self, flat: np.ndarray) -> dict:
        """Named views into a gradient array congruent to ``params``."""
        if flat.shape != self.params.shape:
            raise ValueError("gradient array must be congruent to the parameter array")
        views, offset = {}, 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            views[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return views


@dataclass(frozen=True)
class FieldOutput:
    """Coordinate and feature velocities; vx is centered."""

    vx: np.ndarray
    vh: np.ndarray
    single_node: bool = False


def _clip_rows(raw: np.ndarray) -> tuple:
    """Clip each row of (N, 3) to norm COORD_CLIP; returns (clipped, cache)."""
    nrm = np.linalg.norm(raw, axis=1)
    clipped_rows = nrm > COORD_CLIP
    scale = np.ones_like(nrm)
    if np.any(clipped_rows):
        scale[clipped_rows] = COORD_CLIP / nrm[clipped_rows]
    return raw * scale[:, None], (raw, nrm, scale, clipped_rows)


def _clip_rows_vjp(cache: tuple, g: np.ndarray) -> np.ndarray:
    """Exact VJP of _clip_rows: identity below the clip, a projection above."""
    raw, nrm, scale, clipped_rows = cache
    out = g * scale[:, None]
    if np.any(clipped_rows):
        r = raw[clipped_rows]
        n = nrm[clipped_rows]
        inner = np.einsum("ij,ij->i", r, g[clipped_rows])
        out[clipped_rows] -= (COORD_CLIP * inner / n**3)[:, None] * r
    return out


def forward(model: VectorFieldModel, g: MoleculeGeometry, t: float) -> FieldOutput:
    """Evaluate the field at (g, t); caches intermediates for backward.

    Deterministic: identical inputs give bit-identical outputs. The cache
    belongs to this model instance, so interleave forward/backward pairs
    per item when sharing a model across workers.
    """
    if g.d != model.feature_dim:
        raise ValueError(f"feature width {g.d} does not match model width {model.feature_dim}")
    n = g.n_nodes
    v = model._views
    temb = time_embedding(t)
    h0 = g.features @ v["win_w"].T + v["win_b"]

    layers = []
    xc = g.coords
    hc = h0
    if n == 1:
        for l in range(model.n_layers):
            f_in = np.concatenate([hc, np.zeros((1, model.hidden_dim))], axis=1)
            b1 = f_in @ v[f"l{l}_feat1_w"].T + v[f"l{l}_feat1_b"]
            y1, sb1 = _silu(b1)
            b2 = y1 @ v[f"l{l}_feat2_w"].T + v[f"l{l}_feat2_b"]
            layers.append({"h_in": hc, "f_in": f_in, "b1": b1, "sb1": sb1, "y1": y1})
            hc = hc + b2
        vx = np.zeros((1, 3))
        vh = hc @ v["out_w"].T + v["out_b"]
        model._cache = {
            "version": model._version, "coords": g.coords, "features": g.features,
            "t": t, "temb": temb, "h0": h0, "layers": layers, "h_final": hc, "n": n,
        }
        return FieldOutput(vx, vh, single_node=True)

    nbr, mask = _edge_index(n)
    for l in range(model.n_layers):
        diff = xc[:, None, :] - xc[nbr]
        sq = np.einsum("nkc,nkc->nk", diff, diff)
        w = sq / (1.0 + sq)
        e_in = np.concatenate(
            [
                np.broadcast_to(hc[:, None, :], (n, n - 1, model.hidden_dim)),
                hc[nbr],
                w[..., None],
                np.broadcast_to(temb, (n, n - 1, TIME_EMBED_DIM)),
            ],
            axis=2,
        )
        a1 = e_in @ v[f"l{l}_msg1_w"].T + v[f"l{l}_msg1_b"]
        z1, s1 = _silu(a1)
        a2 = z1 @ v[f"l{l}_msg2_w"].T + v[f"l{l}_msg2_b"]
        msg, s2 = _silu(a2)

        g1 = msg @ v[f"l{l}_gate1_w"].T + v[f"l{l}_gate1_b"]
        q1, sg1 = _silu(g1)
        gate = q1 @ v[f"l{l}_gate2_w"] + v[f"l{l}_gate2_b"][0]
        raw_disp = np.einsum("nkc,nk->nc", diff, gate)
        disp, clip_cache = _clip_rows(raw_disp)

        msum = msg.sum(axis=1)
        f_in = np.concatenate([hc, msum], axis=1)
        b1 = f_in @ v[f"l{l}_feat1_w"].T + v[f"l{l}_feat1_b"]
        y1, sb1 = _silu(b1)
        b2 = y1 @ v[f"l{l}_feat2_w"].T + v[f"l{l}_feat2_b"]

        layers.append(
            {
                "x_in": xc, "h_in": hc, "diff": diff, "sq": sq, "w": w, "e_in": e_in,
                "a1": a1, "s1": s1, "z1": z1, "a2": a2, "s2": s2, "msg": msg,
                "g1": g1, "sg1": sg1, "q1": q1, "gate": gate, "clip": clip_cache,
                "f_in": f_in, "b1": b1, "sb1": sb1, "y1": y1,
            }
        )
        xc = xc + disp
        hc = hc + b2

    total_disp = xc - g.coords
    vx = total_disp - total_disp.mean(axis=0)
    vh = hc @ v["out_w"].T + v["out_b"]
    model._cache = {
        "version": model._version, "coords": g.coords, "features": g.features,
        "t": t, "temb": temb, "h0": h0, "layers": layers, "h_final": hc, "n": n,
    }
    return FieldOutput(vx, vh)


def _check_cache(model: VectorFieldModel, g: MoleculeGeometry, t: float) -> dict:
    c = model._cache
    if c is None:
        raise ValueError("backward needs a cached forward pass; call forward first")
    same_coords = c["coords"] is g.coords or np.array_equal(c["coords"], g.coords)
    same_features = c["features"] is g.features or np.array_equal(c["features"], g.features)
    if c["version"] != model._version or c["t"] != float(t) or not (same_coords and same_features):
        raise ValueError("stale cache: parameters or inputs changed since the last forward")
    return c


def backward(model: VectorFieldModel, g: MoleculeGeometry, t: float, upstream: FieldOutput) -> np.ndarray:
    """Gradient of <upstream, forward(model, g, t)> in the flat layout.

    ``upstream`` carries the output-shaped cotangents (vx and vh slots).
    Raises if the cached forward does not match ``(g, t)`` and the current
    parameters.
    """
    c = _check_cache(model, g, t)
    n = c["n"]
    v = model._views
    grads = np.zeros_like(model.params)
    gv = model.grad_views(grads)

    gx = np.asarray(upstream.vx, dtype=np.float64)
    gh = np.asarray(upstream.vh, dtype=np.float64)
    if gx.shape != (n, 3) or gh.shape != (n, model.feature_dim):
        raise ValueError("upstream gradients must match the output shapes")

    # output heads
    gv["out_w"] += gh.T @ c["h_final"]
    gv["out_b"] += gh.sum(axis=0)
    dh = gh @ v["out_w"]

    if n == 1:
        for l in reversed(range(model.n_layers)):
            lc = c["layers"][l]
            db2 = dh
            gv[f"l{l}_feat2_w"] += db2.T @ lc["y1"]
            gv[f"l{l}_feat2_b"] += db2.sum(axis=0)
            dy1 = db2 @ v[f"l{l}_feat2_w"]
            db1 = dy1 * _silu_grad(lc["b1"], lc["sb1"])
            gv[f"l{l}_feat1_w"] += db1.T @ lc["f_in"]
            gv[f"l{l}_feat1_b"] += db1.sum(axis=0)
            df_in = db1 @ v[f"l{l}_feat1_w"]
            dh = dh + df_in[:, : model.hidden_dim]
        gv["win_w"] += dh.T @ c["features"]
        gv["win_b"] += dh.sum(axis=0)
        return grads

    nbr, mask = _edge_index(n)
    # vx = P (x_final - x_input) with P the centering projection
    dx = gx - gx.mean(axis=0)

    for l in reversed(range(model.n_layers)):
        lc = c["layers"][l]
        h_dim = model.hidden_dim

        # feature update h <- h + mlp([h, msum])
        db2 = dh
        gv[f"l{l}_feat2_w"] += db2.T @ lc["y1"]
        gv[f"l{l}_feat2_b"] += db2.sum(axis=0)
        dy1 = db2 @ v[f"l{l}_feat2_w"]
        db1 = dy1 * _silu_grad(lc["b1"], lc["sb1"])
        gv[f"l{l}_feat1_w"] += db1.T @ lc["f_in"]
        gv[f"l{l}_feat1_b"] += db1.sum(axis=0)
        df_in = db1 @ v[f"l{l}_feat1_w"]
        dh = dh + df_in[:, :h_dim]
        dmsum = df_in[:, h_dim:]

        # coordinate update x <- x + clip(sum_k diff * gate)
        draw = _clip_rows_vjp(lc["clip"], dx)
        dgate = np.einsum("nkc,nc->nk", lc["diff"], draw)
        ddiff = draw[:, None, :] * lc["gate"][..., None]

        # gate head and its MLP
        gv[f"l{l}_gate2_w"] += np.einsum("nk,nkh->h", dgate, lc["q1"])
        gv[f"l{l}_gate2_b"] += dgate.sum()
        dq1 = dgate[..., None] * v[f"l{l}_gate2_w"]
        dg1 = dq1 * _silu_grad(lc["g1"], lc["sg1"])
        dg1_flat = dg1.reshape(-1, h_dim)
        gv[f"l{l}_gate1_w"] += dg1_flat.T @ lc["msg"].reshape(-1, h_dim)
        gv[f"l{l}_gate1_b"] += dg1_flat.sum(axis=0)
        dmsg = dg1 @ v[f"l{l}_gate1_w"]

        # messages feed both the gate path and the feature path
        dmsg = dmsg + dmsum[:, None, :]
        da2 = dmsg * _silu_grad(lc["a2"], lc["s2"])
        da2_flat = da2.reshape(-1, h_dim)
        gv[f"l{l}_msg2_w"] += da2_flat.T @ lc["z1"].reshape(-1, h_dim)
        gv[f"l{l}_msg2_b"] += da2_flat.sum(axis=0)
        dz1 = da2 @ v[f"l{l}_msg2_w"]
        da1 = dz1 * _silu_grad(lc["a1"], lc["s1"])
        da1_flat = da1.reshape(-1, h_dim)
        gv[f"l{l}_msg1_w"] += da1_flat.T @ lc["e_in"].reshape(-1, lc["e_in"].shape[2])
        gv[f"l{l}_msg1_b"] += da1_flat.sum(axis=0)
        de_in = da1 @ v[f"l{l}_msg1_w"]

        # split the edge-input gradient back into its building blocks
        dh = dh + de_in[:, :, :h_dim].sum(axis=1)
        dhj = de_in[:, :, h_dim : 2 * h_dim]
        scatter_h = np.zeros((n, n, h_dim))
        scatter_h[mask] = dhj.reshape(-1, h_dim)
        dh = dh + scatter_h.sum(axis=0)
        dw = de_in[:, :, 2 * h_dim]
        dsq = dw / (1.0 + lc["sq"]) ** 2
        ddiff = ddiff + 2.0 * lc["diff"] * dsq[..., None]

        # differences pull on both endpoints
        dx_new = dx + ddiff.sum(axis=1)
        scatter_x = np.zeros((n, n, 3))
        scatter_x[mask] = ddiff.reshape(-1, 3)
        dx = dx_new - scatter_x.sum(axis=0)

    gv["win_w"] += dh.T @ c["features"]
    gv["win_b"] += dh.sum(axis=0)
    return grads


def save_checkpoint(model: VectorFieldModel, path) -> None:
    """Write the versioned binary checkpoint described in the module docs."""
    atoms = ",".join(ATOM_TYPES).encode("ascii")
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIII",
        CHECKPOINT_VERSION,
        model.n_layers,
        model.hidden_dim,
        model.feature_dim,
        len(atoms),
    )
    Path(path).write_bytes(header + atoms + model.params.astype("<f8").tobytes())


def load_checkpoint(path) -> VectorFieldModel:
    """Read a checkpoint; rejects wrong magic, version, or atom order."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, n_layers, hidden_dim, feature_dim, atoms_len = struct.unpack("<IIIII", blob[4:24])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    atoms = blob[24 : 24 + atoms_len].decode("ascii")
    if atoms != ",".join(ATOM_TYPES):
        raise ValueError(
            f"{path}: checkpoint atom order {atoms!r} does not match {','.join(ATOM_TYPES)!r}"
        )
    params = np.frombuffer(blob[24 + atoms_len :], dtype="<f8")
    model = VectorFieldModel(n_layers, hidden_dim, feature_dim)
    if params.shape != model.params.shape:
        raise ValueError(
            f"{path}: checkpoint holds {params.size} parameters, architecture needs {model.params.size}"
        )
    model.params[:] = params
    model.mark_updated()
    return model
