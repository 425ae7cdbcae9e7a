"""Loss stack over dense per-pixel representations.

Five losses and their exact input gradients, written for hand-chained
backpropagation (no autodiff):

  * class-conditioned contrastive loss over sampled anchor pixels
    (queries pulled to their class's positive key, pushed from other
    classes' anchors),
  * relational instance-discrimination loss: KL between student and
    teacher softmax similarity profiles over mined views,
  * FIFO memory-bank nearest-neighbor cosine loss,
  * pseudo-label cross-entropy against a teacher's argmax,
  * supervised loss: equal mix of soft Dice and cross-entropy.

All embedding inputs are L2-normalized internally before dot products;
gradients are with respect to the raw (pre-normalization) inputs and
include the normalization Jacobian. Positive keys are means of the unit
queries, renormalized back to the sphere.
"""

from __future__ import annotations

import json
import math
try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib
from collections import deque
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import ConfigError, InvalidInput

LAMBDA1_GRID = (0.001, 0.005, 0.01, 0.05, 0.1, 1.0)
LAMBDA23_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 10.0)

_NORM_FLOOR = 1e-12


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Project onto the unit sphere; zero vectors are invalid input."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    if (norms < _NORM_FLOOR).any():
        raise InvalidInput("cannot normalize a zero-norm embedding")
    return x / norms


def _normalize_vjp(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit = raw/|raw| back to the raw vector."""
    norm = np.linalg.norm(raw)
    unit = raw / norm
    return (grad_unit - float(grad_unit @ unit) * unit) / norm


@dataclass
class RepresentationMap:
    """Per-pixel embeddings plus class logits from one model pass."""

    embeddings: np.ndarray  # (N, n_rep), unit rows after normalization
    logits: np.ndarray      # (N, K)
    source: str = "student"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.source not in ("student", "teacher"):
            raise InvalidInput("source must be 'student' or 'teacher'")
        if self.embeddings.shape[0] != self.logits.shape[0]:
            raise InvalidInput("embedding and logit counts differ")

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    def normalized(self) -> "RepresentationMap":
        return RepresentationMap(l2_normalize(self.embeddings), self.logits, self.source)


@dataclass
class KeySets:
    """Per-class query/negative splits over anchor pixels, plus positive keys.

    ``queries[c]`` are the unit embeddings of anchors with label c,
    ``negatives[c]`` those of all other anchors, and ``positive[c]`` the
    renormalized mean of the class queries. Anchors are a multiset:
    repeated draws contribute repeated rows.
    """

    queries: dict[int, np.ndarray]
    negatives: dict[int, np.ndarray]
    positive: dict[int, np.ndarray]

    @property
    def classes(self) -> list[int]:
        return sorted(self.queries)


@dataclass
class FineTuneConfig:
    """Temperatures, loss weights, and schedule constants for fine-tuning."""

    tau: float = 0.5
    tau_s: float = 0.1
    tau_t: float = 0.01
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    ema_momentum: float = 0.99
    k_nn: int = 5
    d_mined: int = 5

    def __post_init__(self):
        if min(self.tau, self.tau_s, self.tau_t) <= 0:
            raise InvalidInput("temperatures must be > 0")
        if not 0 <= self.ema_momentum < 1:
            raise InvalidInput("ema_momentum must lie in [0, 1)")
        if self.k_nn < 1 or self.d_mined < 1:
            raise InvalidInput("k_nn and d_mined must be positive")


def load_finetune_config(path) -> FineTuneConfig:
    """Read a FineTuneConfig from a JSON or TOML file by field name."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            obj = tomllib.loads(path.read_text())
        else:
            obj = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {f.name for f in dataclass_fields(FineTuneConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return FineTuneConfig(**obj)
    except (TypeError, InvalidInput) as exc:
        raise ConfigError(f"bad config values in {path}: {exc}") from exc


class MemoryBank:
    """Fixed-capacity FIFO queue of (unit embedding, class id) entries."""

    def __init__(self, capacity: int = 36):
        if capacity < 1:
            raise InvalidInput("bank capacity must be >= 1")
        self.capacity = int(capacity)
        self._entries: deque = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def embeddings(self) -> np.ndarray:
        """Entries oldest first."""
        return np.array([e for e, _ in self._entries], dtype=np.float64)

    def classes(self) -> np.ndarray:
        return np.array([c for _, c in self._entries], dtype=np.int64)


def bank_push(bank: MemoryBank, items) -> MemoryBank:
    """Append (embedding, class_id) items in order; FIFO eviction."""
    for embedding, class_id in items:
        unit = l2_normalize(np.asarray(embedding, dtype=np.float64))
        bank._entries.append((unit, int(class_id)))
    return bank


def build_key_sets(rep_map: RepresentationMap, labels: np.ndarray, anchors) -> KeySets:
    """Split anchor-pixel embeddings into per-class queries and negatives.

    ``anchors`` is a SampleSet (or anything with ``all_pixels()``). Each
    class present among the anchors gets a query set, the complementary
    anchors as negatives, and a positive key = renormalized query mean.
    """
    pixels = anchors.all_pixels() if hasattr(anchors, "all_pixels") \
        else np.asarray(anchors, dtype=np.int64)
    if pixels.size == 0:
        raise InvalidInput("anchor set is empty")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    emb = l2_normalize(rep_map.embeddings[pixels])
    y = labels[pixels]

    queries, negatives, positive = {}, {}, {}
    for c in sorted(int(v) for v in np.unique(y)):
        mask = y == c
        queries[c] = emb[mask]
        negatives[c] = emb[~mask]
        positive[c] = l2_normalize(queries[c].mean(axis=0))
    return KeySets(queries=queries, negatives=negatives, positive=positive)


def contrastive_loss(keys: KeySets, tau: float) -> float:
    """Sum over classes and queries of -log softmax(positive | negatives).

    Classes with no negatives contribute exactly zero (the softmax is a
    point mass on the positive key). Log-sum-exp stabilized.
    """
    if tau <= 0:
        raise InvalidInput("tau must be > 0")
    if not keys.queries or all(q.shape[0] == 0 for q in keys.queries.values()):
        raise InvalidInput("no queries in any class")
    total = 0.0
    for c in keys.classes:
        q = np.asarray(keys.queries[c], dtype=np.float64)
        if q.shape[0] == 0:
            continue
        q = l2_normalize(q)
        neg = np.asarray(keys.negatives.get(c, np.empty((0, q.shape[1]))), dtype=np.float64)
        if neg.shape[0] == 0:
            continue  # exact zero contribution
        neg = l2_normalize(neg)
        pos = l2_normalize(np.asarray(keys.positive[c], dtype=np.float64))
        s_pos = q @ pos / tau                      # (Q,)
        s_neg = q @ neg.T / tau                    # (Q, Nneg)
        logits = np.concatenate([s_pos[:, None], s_neg], axis=1)
        total += float(np.sum(logsumexp(logits, axis=1) - s_pos))
    return total


def contrastive_loss_grad(embeddings: np.ndarray, labels: np.ndarray,
                          tau: float) -> tuple[float, np.ndarray]:
    """Contrastive loss over anchor embeddings and its full gradient.

    ``embeddings`` are the raw anchor vectors (one row per drawn anchor,
    repeats included); ``labels`` their class ids. The gradient accounts
    for all three roles a row can play: query, negative for other
    classes, and contributor to its class's positive key.
    """
    if tau <= 0:
        raise InvalidInput("tau must be > 0")
    raw = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if raw.ndim != 2 or raw.shape[0] != y.size or raw.shape[0] == 0:
        raise InvalidInput("embeddings must be (A, d) with one label per row")

    units = l2_normalize(raw)
    grad_u = np.zeros_like(units)
    total = 0.0
    classes = sorted(int(v) for v in np.unique(y))
    for c in classes:
        q_idx = np.flatnonzero(y == c)
        n_idx = np.flatnonzero(y != c)
        if n_idx.size == 0:
            continue
        q = units[q_idx]
        neg = units[n_idx]
        mean_q = q.mean(axis=0)
        norm_m = np.linalg.norm(mean_q)
        if norm_m < _NORM_FLOOR:
            raise InvalidInput(f"class {c} queries average to the zero vector")
        pos = mean_q / norm_m

        s_pos = q @ pos / tau
        s_neg = q @ neg.T / tau
        logits = np.concatenate([s_pos[:, None], s_neg], axis=1)
        total += float(np.sum(logsumexp(logits, axis=1) - s_pos))
        p = softmax(logits, axis=1)                # (Q, 1 + Nneg)
        p_pos = p[:, 0]
        p_neg = p[:, 1:]

        # query role: d/du_q = ((p0 - 1) k_c + sum_j p_j u_j) / tau
        grad_u[q_idx] += ((p_pos - 1.0)[:, None] * pos[None, :] + p_neg @ neg) / tau
        # negative role: d/du_j = sum_q p_qj u_q / tau
        grad_u[n_idx] += p_neg.T @ q / tau
        # positive-key role, chained through mean and renormalization
        g_key = ((p_pos - 1.0)[:, None] * q).sum(axis=0) / tau
        g_mean = (g_key - float(g_key @ pos) * pos) / norm_m
        grad_u[q_idx] += g_mean[None, :] / q_idx.size

    grad_raw = np.empty_like(raw)
    for i in range(raw.shape[0]):
        grad_raw[i] = _normalize_vjp(raw[i], grad_u[i])
    return total, grad_raw


def instance_discrimination_loss(student_embed, teacher_embed, mined_embeds,
                                 tau_s: float, tau_t: float) -> float:
    """KL(p_s || p_t) between softmax cosine-similarity profiles.

    p_s comes from the student embedding at temperature tau_s, p_t from
    the teacher at tau_t; the teacher side is a constant target.
    """
    loss, _ = instance_discrimination_grad(student_embed, teacher_embed,
                                           mined_embeds, tau_s, tau_t)
    return loss


def instance_discrimination_grad(student_embed, teacher_embed, mined_embeds,
                                 tau_s: float, tau_t: float) -> tuple[float, np.ndarray]:
    """Loss plus gradient w.r.t. the raw student embedding.

    Mined views and the teacher embedding are constants: no gradient
    flows into them.
    """
    if tau_s <= 0 or tau_t <= 0:
        raise InvalidInput("temperatures must be > 0")
    w1 = np.asarray(student_embed, dtype=np.float64)
    mined = np.asarray(mined_embeds, dtype=np.float64)
    if mined.ndim != 2 or mined.shape[0] < 1:
        raise InvalidInput("need at least one mined view")
    u1 = l2_normalize(w1)
    u2 = l2_normalize(np.asarray(teacher_embed, dtype=np.float64))
    v = l2_normalize(mined)

    sims_s = v @ u1
    sims_t = v @ u2
    ls_s = log_softmax(sims_s / tau_s)
    ls_t = log_softmax(sims_t / tau_t)
    p_s = np.exp(ls_s)
    kl = float(np.sum(p_s * (ls_s - ls_t)))

    coeff = p_s * (ls_s - ls_t - kl) / tau_s
    grad_u1 = coeff @ v
    return kl, _normalize_vjp(w1, grad_u1)


def _nearest_bank_rows(sims: np.ndarray, k_eff: int) -> np.ndarray:
    """Indices of the top-k similarities, ties to the oldest entries."""
    order = np.lexsort((np.arange(sims.size), -sims))
    return order[:k_eff]


def nn_loss(queries: np.ndarray, bank: MemoryBank, k_nn: int) -> float:
    """Negative mean cosine similarity to the K nearest bank neighbors."""
    loss, _ = nn_loss_grad(queries, bank, k_nn)
    return loss


def nn_loss_grad(queries: np.ndarray, bank: MemoryBank,
                 k_nn: int) -> tuple[float, np.ndarray]:
    """Loss plus gradient w.r.t. the raw query embeddings.

    Neighbor selection is treated as locally constant (the loss is
    piecewise smooth in the queries); bank entries receive no gradient.
    """
    if len(bank) == 0:
        raise InvalidInput("memory bank is empty")
    if k_nn < 1:
        raise InvalidInput("k_nn must be >= 1")
    raw = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    units = l2_normalize(raw)
    bank_emb = bank.embeddings()
    k_eff = min(int(k_nn), len(bank))

    total = 0.0
    grad_raw = np.empty_like(raw)
    scale = 1.0 / (raw.shape[0] * k_eff)
    for i in range(raw.shape[0]):
        sims = bank_emb @ units[i]
        rows = _nearest_bank_rows(sims, k_eff)
        total -= scale * float(sims[rows].sum())
        grad_u = -scale * bank_emb[rows].sum(axis=0)
        grad_raw[i] = _normalize_vjp(raw[i], grad_u)
    return total, grad_raw


def ema_update(teacher_params: np.ndarray, student_params: np.ndarray,
               momentum: float) -> np.ndarray:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise."""
    t = np.asarray(teacher_params, dtype=np.float64)
    s = np.asarray(student_params, dtype=np.float64)
    if t.shape != s.shape:
        raise InvalidInput("teacher/student parameter shapes differ")
    if not 0 <= momentum < 1:
        raise InvalidInput("momentum must lie in [0, 1)")
    return momentum * t + (1.0 - momentum) * s


def unsup_loss(student_logits: np.ndarray, teacher_logits: np.ndarray) -> float:
    """Cross-entropy of the student against teacher argmax pseudo-labels."""
    loss, _ = unsup_loss_grad(student_logits, teacher_logits)
    return loss


def unsup_loss_grad(student_logits: np.ndarray,
                    teacher_logits: np.ndarray) -> tuple[float, np.ndarray]:
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise InvalidInput("student/teacher logit shapes differ")
    pseudo = np.argmax(t, axis=1)
    return _cross_entropy_grad(s, pseudo)


def _cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    n = logits.shape[0]
    ls = log_softmax(logits, axis=1)
    loss = float(-ls[np.arange(n), labels].mean())
    grad = np.exp(ls)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


DICE_EPS = 1e-5


def soft_dice_loss_grad(logits: np.ndarray, labels: np.ndarray,
                        eps: float = DICE_EPS) -> tuple[float, np.ndarray]:
    """1 - mean-over-classes soft Dice of softmax probabilities."""
    n, k = logits.shape
    p = softmax(logits, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), labels] = 1.0

    num = 2.0 * (p * onehot).sum(axis=0) + eps     # (K,)
    den = p.sum(axis=0) + onehot.sum(axis=0) + eps
    loss = 1.0 - float(np.mean(num / den))

    # d dice_c / d p_ic = (2 y_ic den_c - num_c) / den_c^2, averaged over c
    g_p = -(2.0 * onehot * den[None, :] - num[None, :]) / den[None, :] ** 2 / k
    inner = (g_p * p).sum(axis=1, keepdims=True)
    grad = p * (g_p - inner)
    return loss, grad


def sup_loss(student_logits: np.ndarray, labels: np.ndarray) -> float:
    """Equal mix of soft Dice loss and pixel cross-entropy."""
    loss, _ = sup_loss_grad(student_logits, labels)
    return loss


def sup_loss_grad(student_logits: np.ndarray,
                  labels: np.ndarray) -> tuple[float, np.ndarray]:
    s = np.asarray(student_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size != s.shape[0]:
        raise InvalidInput("one label per logit row required")
    if y.min(initial=0) < 0 or y.max(initial=0) >= s.shape[1]:
        raise InvalidInput("labels out of class range")
    dice_l, dice_g = soft_dice_loss_grad(s, y)
    ce_l, ce_g = _cross_entropy_grad(s, y)
    return 0.5 * dice_l + 0.5 * ce_l, 0.5 * dice_g + 0.5 * ce_g


@dataclass
class LossParts:
    """The four fine-tuning loss components, pre-weighting."""

    sup: float = 0.0
    contrast: float = 0.0
    unsup: float = 0.0
    nn: float = 0.0

    def as_dict(self):
        return {"sup": self.sup, "contrast": self.contrast,
                "unsup": self.unsup, "nn": self.nn}


def total_finetune_loss(parts: LossParts, config: FineTuneConfig) -> float:
    """sup + lambda1 * contrast + lambda2 * unsup + lambda3 * nn."""
    values = parts.as_dict()
    for name, value in values.items():
        if not math.isfinite(value):
            raise InvalidInput(f"loss part {name!r} is not finite")
    return (parts.sup + config.lambda1 * parts.contrast
            + config.lambda2 * parts.unsup + config.lambda3 * parts.nn)
