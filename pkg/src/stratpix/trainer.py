"""SGD training loop over sampled anchors, plus a convergence testbed.

The loop draws a fresh anchor sample per step (naive, stratified, or
antithetic), backpropagates the fine-tuning loss restricted to those
anchors through the toy model by hand, and logs per-step loss parts and
squared gradient norms. An EMA teacher supplies pseudo-labels and the
memory bank collects past anchor embeddings.

The noise-controlled testbed runs the same step-size rule
min{1/L, alpha/(sigma sqrt(T))} on a known L-smooth quadratic with
exactly injected isotropic gradient noise, so the 1/T and sigma/sqrt(T)
rate components can be separated empirically.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .contrastive import (FineTuneConfig, LossParts, MemoryBank, bank_push,
                          contrastive_loss_grad, ema_update, nn_loss_grad,
                          sup_loss_grad, total_finetune_loss, unsup_loss_grad,
                          instance_discrimination_grad)
from .errors import Diverged, InvalidInput
from .ioutil import atomic_write_text
from .lattice import PixelLattice, Stratification
from .model import ModelOutputs, ToyModel, apply_model, backward, build_features
from .rng import TrialStream, _stream_key, uniforms_to_indices
from .sampling import (Allocation, SampleGroup, SampleSet, allocate_proportional,
                       draw_sample)

TRAJECTORY_COLUMNS = ("seed", "step", "loss_total", "loss_contrast", "loss_nn",
                      "loss_unsup", "loss_sup", "grad_sq_norm")

_PRETRAIN_SEED_SALT = 0x9E3779B97F4A7C15


@dataclass
class ConvergenceConfig:
    """Step count, step-size rule, and noise/smoothness estimates."""

    T: int
    alpha: float = 1.0
    l_hat: float | None = None
    sigma_g_hat: float | None = None
    seeds: tuple = (0,)
    step_rule: str = "prop1"  # or "constant"
    constant_step: float = 0.1
    threshold: float = 1e-3
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInput("T must be >= 1")
        if self.alpha <= 0 or self.constant_step <= 0:
            raise InvalidInput("step sizes must be positive")
        if self.step_rule not in ("prop1", "constant"):
            raise InvalidInput("step_rule must be 'prop1' or 'constant'")
        if not self.seeds:
            raise InvalidInput("at least one seed required")

    @property
    def checkpoints(self) -> list[int]:
        every = self.checkpoint_every or max(1, self.T // 10)
        marks = list(range(every - 1, self.T, every))
        if not marks or marks[-1] != self.T - 1:
            marks.append(self.T - 1)
        return marks


def step_size(config: ConvergenceConfig) -> float:
    """min{1/L_hat, alpha/(sigma_g_hat sqrt(T))}, or the constant option."""
    if config.step_rule == "constant":
        return config.constant_step
    if config.l_hat is None or config.l_hat <= 0:
        raise InvalidInput("prop1 step rule needs a positive l_hat estimate")
    eta = 1.0 / config.l_hat
    if config.sigma_g_hat and config.sigma_g_hat > 0:
        eta = min(eta, config.alpha / (config.sigma_g_hat * math.sqrt(config.T)))
    return eta


@dataclass
class StepRecord:
    step: int
    loss_total: float
    loss_contrast: float
    loss_nn: float
    loss_unsup: float
    loss_sup: float
    grad_sq_norm: float


@dataclass
class TrajectoryLog:
    """Per-step losses and gradient norms for one training run."""

    seed: int
    records: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    wall_clock: float = 0.0  # informational only; never serialized

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for r in self.records:
            rows.append([str(self.seed), str(r.step)] +
                        [repr(float(v)) for v in (r.loss_total, r.loss_contrast,
                                                  r.loss_nn, r.loss_unsup,
                                                  r.loss_sup, r.grad_sq_norm)])
        return rows


def write_trajectories(logs: list[TrajectoryLog], path) -> Path:
    """Merge runs into one CSV, ordered by (seed, step)."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAJECTORY_COLUMNS)
    for log in sorted(logs, key=lambda l: l.seed):
        writer.writerows(log.csv_rows())
    atomic_write_text(path, buf.getvalue())
    return path


def write_jsonl(log: TrajectoryLog, path) -> Path:
    """One JSON object per step: the loss breakdown stream."""
    path = Path(path)
    lines = []
    for r in log.records:
        lines.append(json.dumps({
            "seed": log.seed, "step": r.step, "loss_total": r.loss_total,
            "loss_contrast": r.loss_contrast, "loss_nn": r.loss_nn,
            "loss_unsup": r.loss_unsup, "loss_sup": r.loss_sup,
            "grad_sq_norm": r.grad_sq_norm,
        }, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


@dataclass
class Batch:
    """Everything the loss stack needs besides the student parameters."""

    features: np.ndarray       # (N, F) full-lattice features
    labels: np.ndarray         # (N,) ground-truth class ids
    labeled_mask: np.ndarray   # (N,) bool supervision mask
    teacher: ToyModel
    bank: MemoryBank


@dataclass
class TrainData:
    """A training problem: lattice, strata, anchors budget, loss config."""

    lattice: PixelLattice
    stratification: Stratification | None
    labels: np.ndarray
    labeled_mask: np.ndarray
    n_anchors: int
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    bank_capacity: int = 36
    bank_push_per_step: int = 4
    features: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool).ravel()
        if self.labels.size != self.lattice.size or \
                self.labeled_mask.size != self.lattice.size:
            raise InvalidInput("labels and labeled_mask must cover every pixel")
        if self.features is None:
            self.features = build_features(self.lattice)


def make_labeled_mask(lattice: PixelLattice, fraction: float, seed: int = 0) -> np.ndarray:
    """Deterministic random subset of pixels flagged as labeled."""
    if not 0 < fraction <= 1:
        raise InvalidInput("labeled fraction must lie in (0, 1]")
    count = max(1, round(fraction * lattice.size))
    gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, "labeled", 0)))
    chosen = gen.permutation(lattice.size)[:count]
    mask = np.zeros(lattice.size, dtype=bool)
    mask[chosen] = True
    return mask


def census_anchors(lattice: PixelLattice) -> SampleSet:
    """Every pixel exactly once, as a naive-sampler sample set."""
    pixels = lattice.all_pixels()
    group = SampleGroup(stratum=None, pixels=pixels,
                        provenance=["draw"] * pixels.size)
    return SampleSet(sampler="ns", seed=0, trial=0, groups=[group])


@dataclass
class StepEval:
    """One gradient evaluation: value, parts, and reusable intermediates."""

    grad: np.ndarray
    parts: LossParts
    total: float
    outputs: ModelOutputs
    pixels: np.ndarray
    anchor_labels: np.ndarray


def grad_total_loss(model: ToyModel, batch: Batch, anchors: SampleSet,
                    config: FineTuneConfig) -> StepEval:
    """Loss and exact parameter gradient of the anchor-restricted objective.

    The supervised part runs on the labeled anchors only (zero when none
    are labeled); the nearest-neighbor part is skipped while the bank is
    empty. Gradients of the embedding losses are chained through the
    model's normalization inside ``backward``.
    """
    pixels = anchors.all_pixels()
    if pixels.size == 0:
        raise InvalidInput("anchor set is empty")
    feats = batch.features[pixels]
    out = apply_model(model, feats)
    teacher_out = apply_model(batch.teacher, feats)
    y = batch.labels[pixels]

    parts = LossParts()
    d_logits = np.zeros_like(out.logits)
    d_unit = np.zeros_like(out.embeddings)

    labeled = batch.labeled_mask[pixels]
    if labeled.any():
        l_sup, g_sup = sup_loss_grad(out.logits[labeled], y[labeled])
        parts.sup = l_sup
        d_logits[labeled] += g_sup

    l_con, g_con = contrastive_loss_grad(out.embeddings, y, config.tau)
    parts.contrast = l_con
    d_unit += config.lambda1 * g_con

    l_uns, g_uns = unsup_loss_grad(out.logits, teacher_out.logits)
    parts.unsup = l_uns
    d_logits += config.lambda2 * g_uns

    if len(batch.bank):
        l_nn, g_nn = nn_loss_grad(out.embeddings, batch.bank, config.k_nn)
        parts.nn = l_nn
        d_unit += config.lambda3 * g_nn

    grad = backward(model, out, d_logits, d_unit)
    # Weighted total computed inline: unlike total_finetune_loss, the
    # training path must pass non-finite values through so divergence is
    # recorded rather than raised mid-evaluation.
    total = (parts.sup + config.lambda1 * parts.contrast
             + config.lambda2 * parts.unsup + config.lambda3 * parts.nn)
    return StepEval(grad=grad, parts=parts, total=total, outputs=out,
                    pixels=pixels, anchor_labels=y)


def sgd_train(model: ToyModel, data: TrainData, sampler: str,
              config: ConvergenceConfig, seed: int | None = None) -> TrajectoryLog:
    """T SGD steps with fresh per-step anchor samples; deterministic per seed.

    A non-finite loss or gradient aborts with Diverged carrying the
    partial log. The model is updated in place; the teacher starts as a
    copy of the student and tracks it by EMA.
    """
    if seed is None:
        seed = int(config.seeds[0])
    eta = step_size(config)
    allocation = None
    if sampler in ("sg", "sag"):
        if data.stratification is None:
            raise InvalidInput(f"sampler {sampler!r} needs a stratification")
        allocation = allocate_proportional(data.stratification, data.n_anchors)

    teacher = model.copy()
    bank = MemoryBank(data.bank_capacity)
    batch = Batch(features=data.features, labels=data.labels,
                  labeled_mask=data.labeled_mask, teacher=teacher, bank=bank)
    log = TrajectoryLog(seed=seed)
    started = time.perf_counter()

    for step in range(config.T):
        anchors = draw_sample(sampler, data.lattice, data.stratification,
                              allocation, data.n_anchors, seed, trial=step)
        ev = grad_total_loss(model, batch, anchors, data.finetune)
        gsq = float(ev.grad @ ev.grad)
        log.records.append(StepRecord(
            step=step, loss_total=ev.total, loss_contrast=ev.parts.contrast,
            loss_nn=ev.parts.nn, loss_unsup=ev.parts.unsup,
            loss_sup=ev.parts.sup, grad_sq_norm=gsq))
        if not (math.isfinite(ev.total) and math.isfinite(gsq)):
            log.diverged = True
            log.wall_clock = time.perf_counter() - started
            raise Diverged(f"non-finite loss at step {step}", log=log)

        model.theta = model.theta - eta * ev.grad
        teacher.theta = ema_update(teacher.theta, model.theta,
                                   data.finetune.ema_momentum)
        push = min(data.bank_push_per_step, ev.pixels.size)
        if push:
            items = [(ev.outputs.embeddings[i], int(ev.anchor_labels[i]))
                     for i in range(push)]
            bank_push(bank, items)

    log.wall_clock = time.perf_counter() - started
    return log


def pretrain(model: ToyModel, data: TrainData, steps: int, seed: int = 0,
             n_anchors: int = 8, lr: float = 0.1) -> list[float]:
    """Instance-discrimination warm-up of the embedding head plus EMA.

    Each step draws anchors and mined views uniformly, pulls the student
    similarity profile toward the teacher's, and EMA-tracks the teacher.
    Uses a salted seed so its draws never collide with training streams.
    """
    if steps < 0:
        raise InvalidInput("steps must be >= 0")
    cfg = data.finetune
    pre_seed = (int(seed) ^ _PRETRAIN_SEED_SALT) & ((1 << 63) - 1)
    anchor_stream = TrialStream(pre_seed, "pre-anchor", 0, n_anchors)
    mined_stream = TrialStream(pre_seed, "pre-mined", 0, n_anchors * cfg.d_mined)
    teacher = model.copy()
    losses = []

    for step in range(steps):
        pix = uniforms_to_indices(anchor_stream.uniforms(step), data.lattice.size)
        mined_pix = uniforms_to_indices(mined_stream.uniforms(step),
                                        data.lattice.size)
        mined_pix = mined_pix.reshape(n_anchors, cfg.d_mined)
        out = apply_model(model, data.features[pix])
        t_out = apply_model(teacher, data.features[pix])

        d_unit = np.zeros_like(out.embeddings)
        total = 0.0
        for i in range(n_anchors):
            mined = apply_model(teacher, data.features[mined_pix[i]]).embeddings
            l_i, g_i = instance_discrimination_grad(
                out.embeddings[i], t_out.embeddings[i], mined,
                cfg.tau_s, cfg.tau_t)
            total += l_i / n_anchors
            d_unit[i] = g_i / n_anchors
        losses.append(total)

        grad = backward(model, out, None, d_unit)
        model.theta = model.theta - lr * grad
        teacher.theta = ema_update(teacher.theta, model.theta, cfg.ema_momentum)
    return losses


def estimate_smoothness(grad_fn, theta0: np.ndarray, num_probes: int = 8,
                        radius: float = 0.5, seed: int = 0) -> float:
    """Max gradient-difference ratio over random probe pairs near theta0."""
    gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, "lhat", 0)))
    best = 0.0
    for _ in range(num_probes):
        a = theta0 + radius * gen.standard_normal(theta0.size)
        b = theta0 + radius * gen.standard_normal(theta0.size)
        gap = float(np.linalg.norm(a - b))
        if gap < 1e-12:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(a) - grad_fn(b))) / gap)
    if best <= 0:
        raise InvalidInput("smoothness probes produced no signal")
    return best


def estimate_grad_noise(sampled_grad_fn, trials: int = 16) -> float:
    """Root-mean-square deviation of sampled gradients around their mean."""
    grads = np.stack([sampled_grad_fn(t) for t in range(trials)])
    center = grads.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((grads - center) ** 2, axis=1))))


def dice(pred_labels: np.ndarray, true_labels: np.ndarray, class_id: int) -> float:
    """2|A&B| / (|A|+|B|) for one class; empty vs empty counts as 1.0."""
    pred = np.asarray(pred_labels).ravel()
    true = np.asarray(true_labels).ravel()
    if pred.size != true.size:
        raise InvalidInput("prediction and truth must have the same pixel count")
    a = pred == class_id
    b = true == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


# ---------------------------------------------------------------------------
# Controlled-noise quadratic testbed.

@dataclass
class QuadRun:
    """One (sigma, seed) descent run on the reference quadratic."""

    sigma: float
    seed: int
    steps: int          # first step index with |grad|^2 <= threshold (T if never)
    reached: bool
    grad_sq_traj: np.ndarray


def quad_eigenvalues(dim: int) -> np.ndarray:
    """Spectrum of the reference quadratic; L = max = 1."""
    if dim < 1:
        raise InvalidInput("dim must be >= 1")
    if dim == 1:
        return np.array([1.0])
    return np.geomspace(0.05, 1.0, dim)


def noise_controlled_descent(dim: int, sigma_list, T: int, seeds,
                             alpha: float = 1.0, threshold: float = 1e-3,
                             x0_scale: float = 1.0) -> list[QuadRun]:
    """Descend 0.5 x' diag(lam) x with injected isotropic gradient noise.

    The true gradient norm is recorded before every step, so runs remain
    comparable after the threshold is crossed; ``steps`` is the first
    crossing (T when censored). Noise is standard normal scaled by sigma,
    produced from counter-based uniforms via the inverse normal CDF so
    each (sigma, seed, step) is an independent, reproducible window.
    """
    lam = quad_eigenvalues(dim)
    l_smooth = float(lam.max())
    sigma_list = [float(s) for s in sigma_list]
    if any(s < 0 for s in sigma_list):
        raise InvalidInput("sigma values must be nonnegative")
    runs = []
    for si, sigma in enumerate(sigma_list):
        if sigma > 0:
            eta = min(1.0 / l_smooth, alpha / (sigma * math.sqrt(T)))
        else:
            eta = 1.0 / l_smooth
        for seed in seeds:
            stream = TrialStream(int(seed), "quadnoise", si, dim)
            x = np.full(dim, x0_scale)
            traj = np.empty(T)
            steps, reached = T, False
            for t in range(T):
                g_true = lam * x
                gsq = float(g_true @ g_true)
                traj[t] = gsq
                if not reached and gsq <= threshold:
                    steps, reached = t, True
                if sigma > 0:
                    u = stream.uniforms(t) + 2.0 ** -54
                    noise = ndtri(u)
                    x = x - eta * (g_true + sigma * noise)
                else:
                    x = x - eta * g_true
            runs.append(QuadRun(sigma=sigma, seed=int(seed), steps=steps,
                                reached=reached, grad_sq_traj=traj))
    return runs


def quad_summary(runs: list[QuadRun]) -> list[dict]:
    """Mean/std steps-to-threshold per sigma, in sigma order."""
    sigmas = sorted({r.sigma for r in runs})
    table = []
    for sigma in sigmas:
        steps = np.array([r.steps for r in runs if r.sigma == sigma], dtype=np.float64)
        reached = np.array([r.reached for r in runs if r.sigma == sigma])
        table.append({
            "sigma": sigma,
            "mean_steps": float(steps.mean()),
            "std_steps": float(steps.std()),
            "reached_fraction": float(reached.mean()),
        })
    return table


def gd_steps_closed_form(dim: int, T: int, threshold: float,
                         x0_scale: float = 1.0) -> int:
    """Noise-free steps-to-threshold predicted analytically."""
    lam = quad_eigenvalues(dim)
    eta = 1.0 / float(lam.max())
    decay = 1.0 - eta * lam
    for t in range(T):
        gsq = float(np.sum((lam * x0_scale * decay ** t) ** 2))
        if gsq <= threshold:
            return t
    return T


def fit_rate(grad_sq_traj: np.ndarray) -> tuple[float, float]:
    """Least-squares fit of the running average of |grad|^2 to
    c1/t + c2/sqrt(t); returns (c1, c2)."""
    traj = np.asarray(grad_sq_traj, dtype=np.float64)
    t = np.arange(1, traj.size + 1, dtype=np.float64)
    running = np.cumsum(traj) / t
    basis = np.column_stack([1.0 / t, 1.0 / np.sqrt(t)])
    coef, *_ = np.linalg.lstsq(basis, running, rcond=None)
    return float(coef[0]), float(coef[1])
