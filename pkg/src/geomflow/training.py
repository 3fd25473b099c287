"""Flow-matching training: the regression loss, Adam, and the step/loop drivers.

Each step draws a batch of data molecules, pushes every item through the
hybrid path at its own uniformly drawn time, and regresses the model's two
outputs onto the conditional targets with a squared error summed over nodes
and averaged over the batch. Gradients come from the model's hand-written
backward pass; the optimizer is plain Adam with bias correction and no
schedule, warmup, or weight averaging.

``alignment_variance_probe`` stands apart from the loop: it measures how
spread out the coordinate-target norms are when the prior cloud is aligned
optimally versus randomly, which is the quantity the alignment solver
exists to shrink.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .alignment import solve_eot
from .data import Dataset
from .egnn import FieldOutput, VectorFieldModel, backward, forward, save_checkpoint
from .geometry import apply_transform, project_zero_com, random_permutation, random_rotation
from .paths import (
    VP_TIME_FLOOR,
    ConditionalPath,
    HybridPath,
    NoiseSchedule,
    hybrid_training_sample,
    ot_target_field,
)

__all__ = [
    "LOSS_WINDOW",
    "TrainConfig",
    "TrainState",
    "cfm_loss",
    "adam_update",
    "train_step",
    "train_loop",
    "alignment_variance_probe",
]

LOSS_WINDOW = 100  # ring-buffer capacity; also the moving-average span


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the model and the data.

    ``learning_rate`` defaults to the constant 1e-4 used at full scale;
    short runs on the synthetic toy set want 1e-3. ``path_x``/``path_h``
    name the coordinate and feature paths, with ``schedule`` picking the
    noise schedule wherever a path is variance-preserving.
    ``checkpoint_every`` of 0 disables periodic checkpoints.
    """

    batch_size: int = 16
    steps: int = 5000
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    sigma_min: float = 1e-4
    path_x: str = "EOT"
    path_h: str = "VP"
    schedule: str = "linear"
    seed: int = 0
    eot_restarts: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"adam_betas must lie in [0, 1), got {self.adam_betas}")
        if self.adam_eps <= 0.0:
            raise ValueError("adam_eps must be positive")
        if self.eot_restarts < 0:
            raise ValueError("eot_restarts must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def hybrid_path(self) -> HybridPath:
        """The HybridPath this config describes; validates the path kinds."""

        def one(kind: str) -> ConditionalPath:
            if kind == "VP":
                return ConditionalPath("VP", schedule=NoiseSchedule(self.schedule))
            return ConditionalPath(kind, sigma_min=self.sigma_min)

        return HybridPath(one(self.path_x), one(self.path_h))


@dataclass
class TrainState:
    """Mutable optimizer state alongside the model.

    The generator lives here so a (seed, dataset) pair fixes the whole
    trajectory; ``last_eot_iterations`` is the most recent batch's mean
    alignment iteration count (nan when the coordinate path has none).
    """

    model: VectorFieldModel
    adam_m: np.ndarray
    adam_v: np.ndarray
    rng: np.random.Generator
    step: int = 0
    loss_history: deque = field(default_factory=lambda: deque(maxlen=LOSS_WINDOW))
    last_eot_iterations: float = float("nan")

    def __post_init__(self):
        if self.adam_m.shape != self.model.params.shape or self.adam_v.shape != self.model.params.shape:
            raise ValueError("Adam moment arrays must be congruent to the parameter array")

    @classmethod
    def fresh(cls, model: VectorFieldModel, cfg: TrainConfig) -> "TrainState":
        return cls(
            model=model,
            adam_m=np.zeros_like(model.params),
            adam_v=np.zeros_like(model.params),
            rng=np.random.default_rng(cfg.seed),
        )


def cfm_loss(model, batch, hp: HybridPath, rng, *, eot_restarts: int = 1, draws=None):
    """Batch-mean squared error against the hybrid-path targets, with gradients.

    Every item gets its own time t ~ U[VP_TIME_FLOOR, 1] and its own noise;
    the item loss is ``sum((vx - u_x)**2) + sum((vh - u_h)**2)``. Returns
    ``(loss, gradient)`` with the gradient flat like ``model.params``.

    ``draws`` bypasses the generator for testing: a sequence of
    ``(t, eps_x, eps_h)`` triples, one per item (the generator is then only
    consumed by alignment restarts, so pass ``eot_restarts=0`` for a fully
    deterministic evaluation).
    """
    loss, grads, _ = _loss_terms(model, batch, hp, rng, eot_restarts=eot_restarts, draws=draws)
    return loss, grads


def _loss_terms(model, batch, hp, rng, *, eot_restarts, draws):
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    if draws is not None and len(draws) != len(batch):
        raise ValueError(f"got {len(draws)} injected draws for {len(batch)} items")
    inv = 1.0 / len(batch)
    total = 0.0
    grads = np.zeros_like(model.params)
    iterations = []
    for k, g0 in enumerate(batch):
        if draws is None:
            t = rng.uniform(VP_TIME_FLOOR, 1.0)
            noise = None
        else:
            t, eps_x, eps_h = draws[k]
            noise = (eps_x, eps_h)
        g_t, u_x, u_h, plan = hybrid_training_sample(
            g0, t, hp, rng, eot_restarts=eot_restarts, noise=noise
        )
        out = forward(model, g_t, t)
        rx = out.vx - u_x
        rh = out.vh - u_h
        total += inv * (np.sum(rx * rx) + np.sum(rh * rh))
        grads += backward(model, g_t, t, FieldOutput(2.0 * inv * rx, 2.0 * inv * rh))
        if plan is not None:
            iterations.append(plan.iterations)
    return total, grads, iterations


def adam_update(params, grads, moment1, moment2, step, *, learning_rate, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on params and both moments.

    ``step`` is the 1-based index of this update. With zero moments and a
    constant gradient g, the first update moves by
    -learning_rate * g / (|g| + eps) thanks to the correction terms.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    b1, b2 = betas
    moment1 *= b1
    moment1 += (1.0 - b1) * grads
    moment2 *= b2
    moment2 += (1.0 - b2) * np.square(grads)
    m_hat = moment1 / (1.0 - b1**step)
    v_hat = moment2 / (1.0 - b2**step)
    params -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)


def train_step(state: TrainState, batch, cfg: TrainConfig) -> TrainState:
    """Advance the state by one optimization step on the given batch.

    A non-finite loss aborts before any parameter is touched.
    """
    hp = cfg.hybrid_path()
    loss, grads, iterations = _loss_terms(
        state.model, batch, hp, state.rng, eot_restarts=cfg.eot_restarts, draws=None
    )
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss!r} at step {state.step + 1}")
    state.step += 1
    adam_update(
        state.model.params,
        grads,
        state.adam_m,
        state.adam_v,
        state.step,
        learning_rate=cfg.learning_rate,
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )
    state.model.mark_updated()
    state.loss_history.append(loss)
    state.last_eot_iterations = float(np.mean(iterations)) if iterations else float("nan")
    return state


def train_loop(model, dataset: Dataset, cfg: TrainConfig, *, log_path=None, checkpoint_path=None):
    """Run ``cfg.steps`` steps on batches drawn uniformly with replacement.

    Writes one CSV row per step to ``log_path`` when given (columns: step,
    loss, seconds since start, mean alignment iterations). When
    ``checkpoint_path`` is set, the model is saved there every
    ``cfg.checkpoint_every`` steps (if nonzero) and once more at the end.
    Returns the final TrainState.
    """
    state = TrainState.fresh(model, cfg)
    log_file = open(log_path, "w", newline="") if log_path is not None else None
    try:
        writer = None
        if log_file is not None:
            writer = csv.writer(log_file)
            writer.writerow(["step", "loss", "seconds", "mean_eot_iterations"])
        start = time.perf_counter()
        for _ in range(cfg.steps):
            idx = state.rng.integers(0, len(dataset), size=cfg.batch_size)
            batch = [dataset.molecules[i] for i in idx]
            train_step(state, batch, cfg)
            if writer is not None:
                writer.writerow(
                    [
                        state.step,
                        f"{state.loss_history[-1]:.8g}",
                        f"{time.perf_counter() - start:.3f}",
                        f"{state.last_eot_iterations:.3f}",
                    ]
                )
            if (
                checkpoint_path is not None
                and cfg.checkpoint_every
                and state.step % cfg.checkpoint_every == 0
            ):
                save_checkpoint(state.model, checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(state.model, checkpoint_path)
    return state


def alignment_variance_probe(dataset: Dataset, path_kind: str, n_pairs: int, rng, *, copy_pairs=False):
    """Mean and variance of the coordinate-target norm under one alignment policy.

    For each of ``n_pairs`` draws, a data cloud comes uniformly from the
    dataset and a prior cloud is sampled standard normal and centered
    (with ``copy_pairs`` it is instead a randomly rotated and relabeled
    copy of the data cloud, the case an optimal alignment undoes exactly).
    ``path_kind`` "EOT" aligns the prior cloud with ``solve_eot`` before
    reading the straight-line target; "random" applies a random rotation
    and relabeling instead. Returns ``(mean, variance)`` of the Frobenius
    norm of the resulting target over the draws.
    """
    if path_kind not in ("EOT", "random"):
        raise ValueError(f"path_kind must be 'EOT' or 'random', got {path_kind!r}")
    if n_pairs < 30:
        raise ValueError(f"need at least 30 pairs for a usable variance, got {n_pairs}")
    norms = np.empty(n_pairs)
    for k in range(n_pairs):
        x0 = dataset.molecules[int(rng.integers(len(dataset)))].coords
        n = x0.shape[0]
        if copy_pairs:
            x1 = apply_transform(x0, random_rotation(rng), random_permutation(rng, n))
        else:
            x1 = project_zero_com(rng.standard_normal((n, 3)))
        if path_kind == "EOT":
            plan = solve_eot(x1, x0, restarts=1, rng=rng)
            aligned = apply_transform(x1, plan.rotation, plan.permutation)
        else:
            aligned = apply_transform(x1, random_rotation(rng), random_permutation(rng, n))
        norms[k] = np.linalg.norm(ot_target_field(aligned, x0, 1e-4))
    return float(norms.mean()), float(norms.var())
