"""A per-pixel MLP with hand-derived gradients.

Each pixel's feature vector (scaled coordinates + payload columns) maps
through one tanh hidden layer to K class logits and an n_rep embedding:

    a = tanh(W1 f + b1)
    logits = W2 a + b2
    e_raw  = W3 a + b3,  embedding = e_raw / |e_raw|

Parameters live in a single flat vector so the SGD loop and the EMA
teacher update treat the model as a point in R^d. The backward pass
takes gradients w.r.t. logits and unit embeddings at a set of pixels and
returns the exact gradient w.r.t. the flat parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrastive import RepresentationMap
from .errors import InvalidInput
from .lattice import PixelLattice
from .rng import _stream_key

_NORM_FLOOR = 1e-12


def build_features(lattice: PixelLattice) -> np.ndarray:
    """Per-pixel features: coordinates scaled to [0,1], then payload columns."""
    if lattice.payload is None:
        raise InvalidInput("lattice has no feature payload")
    coords = lattice.coords(lattice.all_pixels()).astype(np.float64)
    scale = np.maximum(np.array(lattice.dims, dtype=np.float64) - 1.0, 1.0)
    return np.concatenate([coords / scale, lattice.payload], axis=1)


def feature_dim(lattice: PixelLattice) -> int:
    if lattice.payload is None:
        raise InvalidInput("lattice has no feature payload")
    return lattice.ndim + lattice.payload.shape[1]


@dataclass
class ToyModel:
    """Flat-parameter two-head MLP; see module docstring for the wiring."""

    feature_dim: int
    hidden_dim: int
    num_classes: int
    n_rep: int
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if self.theta.size != self.num_params:
            raise InvalidInput(
                f"theta has {self.theta.size} entries, expected {self.num_params}")

    @property
    def num_params(self) -> int:
        f, h, k, r = self.feature_dim, self.hidden_dim, self.num_classes, self.n_rep
        return h * f + h + k * h + k + r * h + r

    @classmethod
    def init(cls, feature_dim: int, hidden_dim: int, num_classes: int,
             n_rep: int, seed: int = 0, scale: float = 0.5) -> "ToyModel":
        """Gaussian init scaled by 1/sqrt(fan_in); deterministic per seed."""
        gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, "init", 0)))
        f, h, k, r = feature_dim, hidden_dim, num_classes, n_rep
        parts = [
            gen.standard_normal(h * f) * scale / np.sqrt(f),
            np.zeros(h),
            gen.standard_normal(k * h) * scale / np.sqrt(h),
            np.zeros(k),
            gen.standard_normal(r * h) * scale / np.sqrt(h),
            np.zeros(r),
        ]
        return cls(feature_dim=f, hidden_dim=h, num_classes=k, n_rep=r,
                   theta=np.concatenate(parts))

    def unpack(self, theta: np.ndarray | None = None):
        t = self.theta if theta is None else theta
        f, h, k, r = self.feature_dim, self.hidden_dim, self.num_classes, self.n_rep
        off = 0
        w1 = t[off:off + h * f].reshape(h, f); off += h * f
        b1 = t[off:off + h]; off += h
        w2 = t[off:off + k * h].reshape(k, h); off += k * h
        b2 = t[off:off + k]; off += k
        w3 = t[off:off + r * h].reshape(r, h); off += r * h
        b3 = t[off:off + r]
        return w1, b1, w2, b2, w3, b3

    @staticmethod
    def pack(w1, b1, w2, b2, w3, b3) -> np.ndarray:
        return np.concatenate([w1.ravel(), b1, w2.ravel(), b2, w3.ravel(), b3])

    def copy(self) -> "ToyModel":
        return ToyModel(self.feature_dim, self.hidden_dim, self.num_classes,
                        self.n_rep, self.theta.copy())


@dataclass
class ModelOutputs:
    """Forward-pass intermediates kept for the backward pass."""

    features: np.ndarray   # (P, F)
    hidden: np.ndarray     # (P, H) tanh activations
    logits: np.ndarray     # (P, K)
    e_raw: np.ndarray      # (P, R) pre-normalization embeddings
    embeddings: np.ndarray # (P, R) unit rows (zero rows stay zero)


def apply_model(model: ToyModel, features: np.ndarray) -> ModelOutputs:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.feature_dim:
        raise InvalidInput(
            f"feature dim {features.shape[1]} != model dim {model.feature_dim}")
    w1, b1, w2, b2, w3, b3 = model.unpack()
    hidden = np.tanh(features @ w1.T + b1)
    logits = hidden @ w2.T + b2
    e_raw = hidden @ w3.T + b3
    norms = np.maximum(np.linalg.norm(e_raw, axis=1, keepdims=True), _NORM_FLOOR)
    return ModelOutputs(features=features, hidden=hidden, logits=logits,
                        e_raw=e_raw, embeddings=e_raw / norms)


def forward(model: ToyModel, lattice: PixelLattice,
            source: str = "student") -> RepresentationMap:
    """Full-lattice representation map (unit embeddings + logits)."""
    out = apply_model(model, build_features(lattice))
    return RepresentationMap(embeddings=out.embeddings, logits=out.logits, source=source)


def backward(model: ToyModel, outputs: ModelOutputs,
             d_logits: np.ndarray | None = None,
             d_unit: np.ndarray | None = None) -> np.ndarray:
    """Exact parameter gradient from head gradients.

    ``d_unit`` is the gradient w.r.t. the unit embeddings; the
    normalization Jacobian (tangential projection over the raw norm) is
    applied here.
    """
    w1, b1, w2, b2, w3, b3 = model.unpack()
    p = outputs.features.shape[0]
    if d_logits is None:
        d_logits = np.zeros_like(outputs.logits)
    if d_unit is None:
        d_e = np.zeros_like(outputs.e_raw)
    else:
        raw_norms = np.linalg.norm(outputs.e_raw, axis=1, keepdims=True)
        norms = np.maximum(raw_norms, _NORM_FLOOR)
        u = outputs.embeddings
        d_e = (d_unit - (d_unit * u).sum(axis=1, keepdims=True) * u) / norms
        # Degenerate rows have no direction; their subgradient is zero,
        # not the floored division above.
        d_e[raw_norms.ravel() < _NORM_FLOOR] = 0.0

    d_hidden = d_logits @ w2 + d_e @ w3
    d_z1 = d_hidden * (1.0 - outputs.hidden ** 2)

    g_w1 = d_z1.T @ outputs.features
    g_b1 = d_z1.sum(axis=0)
    g_w2 = d_logits.T @ outputs.hidden
    g_b2 = d_logits.sum(axis=0)
    g_w3 = d_e.T @ outputs.hidden
    g_b3 = d_e.sum(axis=0)
    return ToyModel.pack(g_w1, g_b1, g_w2, g_b2, g_w3, g_b3)
