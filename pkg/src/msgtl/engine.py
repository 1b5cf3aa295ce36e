"""Dense feed-forward numerics for masked, partially transferred networks.

Every weight entry carries four pieces of state: a live value (what the
optimizer updates), a snapshot value (copied from the previous stage), a
forward mask ``pf`` and a backward mask ``pb``.  The forward pass reads the
live value where ``pf == 1`` and the snapshot elsewhere; updates are applied
only where ``pb == 1``.  Entries outside the transferred block always have
both masks set.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import kernels
from .topology import Topology

EPS_CLAMP = 1e-12

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    pass


class ActivationCacheError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class LayerParams:
    W: np.ndarray
    b: np.ndarray
    W_snap: np.ndarray
    b_snap: np.ndarray
    pf_W: np.ndarray
    pf_b: np.ndarray
    pb_W: np.ndarray
    pb_b: np.ndarray
    region: Tuple[int, int] = (0, 0)

    @classmethod
    def fresh(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "LayerParams":
        W = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))
        return cls(
            W=W,
            b=np.zeros(n_out),
            W_snap=np.zeros((n_in, n_out)),
            b_snap=np.zeros(n_out),
            pf_W=np.ones((n_in, n_out), dtype=np.uint8),
            pf_b=np.ones(n_out, dtype=np.uint8),
            pb_W=np.ones((n_in, n_out), dtype=np.uint8),
            pb_b=np.ones(n_out, dtype=np.uint8),
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.W.shape

    @property
    def has_transfer(self) -> bool:
        return self.region[0] > 0 and self.region[1] > 0

    def n_params(self) -> int:
        return self.W.size + self.b.size

    def snapshot_consistent(self) -> bool:
        """True when live and snapshot values agree wherever ``pf == 0``.

        Training preserves this: a ``pf == 0`` entry gets a zero gradient, so
        its optimizer moments stay zero and it never moves.  While it holds,
        the blended weights equal the live ones.
        """
        if not self.has_transfer:
            return True
        hid_W, hid_b = self.pf_W == 0, self.pf_b == 0
        return (np.array_equal(self.W[hid_W], self.W_snap[hid_W])
                and np.array_equal(self.b[hid_b], self.b_snap[hid_b]))

    def trainable_masks(self) -> Tuple[np.ndarray, np.ndarray]:
        """Entries that both see the gradient and accept updates."""
        return self.pf_W & self.pb_W, self.pf_b & self.pb_b

    def copy(self) -> "LayerParams":
        return copy.deepcopy(self)

    def check(self) -> None:
        n_in, n_out = self.W.shape
        for name in ("W_snap", "pf_W", "pb_W"):
            if getattr(self, name).shape != (n_in, n_out):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}")
        for name in ("b", "b_snap", "pf_b", "pb_b"):
            if getattr(self, name).shape != (n_out,):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}")
        for name in ("pf_W", "pf_b", "pb_W", "pb_b"):
            if np.any(getattr(self, name) > 1):
                raise ValueError(f"{name} is not binary")
        r, c = self.region
        outside = np.ones((n_in, n_out), dtype=bool)
        outside[:r, :c] = False
        if not (self.pf_W[outside].all() and self.pb_W[outside].all()):
            raise ValueError("fresh weight entries must have both masks set")
        if not (self.pf_b[c:].all() and self.pb_b[c:].all()):
            raise ValueError("fresh bias entries must have both masks set")


@dataclass
class StageNetwork:
    topology: Topology
    layers: List[LayerParams]
    hidden: str = "relu"
    output: str = "sigmoid"

    def __post_init__(self):
        if len(self.layers) != self.topology.n_matrices:
            raise ValueError("layer count does not match topology")
        for l, layer in enumerate(self.layers):
            expect = (self.topology.widths[l], self.topology.widths[l + 1])
            if layer.shape != expect:
                raise ValueError(f"layer {l} has shape {layer.shape}, expected {expect}")

    @property
    def n_inputs(self) -> int:
        return self.topology.widths[0]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def copy(self) -> "StageNetwork":
        return StageNetwork(self.topology, [layer.copy() for layer in self.layers],
                            self.hidden, self.output)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    rho: float = 0.3
    gamma: int = 2
    omega: int = 6
    eta0: float = 1e-3
    decay_omega: float = 10.0
    decay_phi: float = 0.75
    epochs: int = 100
    batch_size: int = 64
    dropout_p: float = 0.0
    da_lambda: float = 0.0
    shared_mask: bool = False
    prev_score_feature: bool = False
    transfer: bool = True
    optimizer: str = "adam"
    patience: int = 20
    val_fraction: float = 0.1
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.gamma < 1:
            raise ValueError("gamma must be positive")
        if self.omega < 3:
            raise ValueError("omega must be at least 3")
        if self.eta0 <= 0 or self.decay_omega <= 0 or self.decay_phi <= 0:
            raise ValueError("learning-rate schedule constants must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.da_lambda < 0:
            raise ValueError("da_lambda must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse(types[key], raw)
        return cls(**values)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    return str(value)


def _parse(kind: str, raw: str):
    if kind == "bool":
        if raw not in ("true", "false"):
            raise ValueError(f"bad boolean {raw!r}")
        return raw == "true"
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip('"')


def stage_rng(seed: int, stage: int, purpose: int) -> np.random.Generator:
    """Independent generator stream for (seed, stage, purpose)."""
    return np.random.default_rng([seed, stage, purpose])


# purposes for stage_rng
RNG_INIT, RNG_MASK, RNG_SHUFFLE, RNG_DROPOUT, RNG_INNER, RNG_HEAD = range(6)


# --------------------------------------------------------------------------
# forward / loss / backward
# --------------------------------------------------------------------------

def effective_weights(layer: LayerParams) -> Tuple[np.ndarray, np.ndarray]:
    if not layer.has_transfer:
        return layer.W, layer.b
    W = kernels.blend(layer.W, layer.W_snap, layer.pf_W, np.empty_like(layer.W))
    b = kernels.blend(layer.b, layer.b_snap, layer.pf_b, np.empty_like(layer.b))
    return W, b


@dataclass
class ForwardCache:
    X: np.ndarray
    weights: List[Tuple[np.ndarray, np.ndarray]]
    zs: List[np.ndarray]
    acts: List[np.ndarray]          # acts[0] is X, acts[-1] the scores
    scales: List[Optional[np.ndarray]]
    net_id: int

    @property
    def scores(self) -> np.ndarray:
        return self.acts[-1][:, 0]


def forward(net: StageNetwork, X: np.ndarray, dropout_p: float = 0.0,
            train: bool = False, rng: Optional[np.random.Generator] = None,
            live_only: bool = False) -> ForwardCache:
    """``live_only`` skips the mask blend; valid only for snapshot-consistent layers."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValueError(f"expected input of width {net.n_inputs}, got shape {X.shape}")
    use_dropout = train and dropout_p > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - dropout_p
    weights, zs, acts, scales = [], [], [X], []
    a = X
    last = len(net.layers) - 1
    for l, layer in enumerate(net.layers):
        W, b = (layer.W, layer.b) if live_only else effective_weights(layer)
        weights.append((W, b))
        z = a @ W
        z += b
        zs.append(z)
        if l == last:
            a = expit(z)
            scales.append(None)
        else:
            scale = None
            if use_dropout:
                scale = (rng.random(z.shape) < keep) / keep
            a = kernels.relu_forward(z, scale, np.empty_like(z))
            scales.append(scale)
        acts.append(a)
    return ForwardCache(X, weights, zs, acts, scales, id(net))


def beta_of(labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty label vector")
    return 1.0 - float(y.sum()) / y.size


def balanced_ce(scores, labels, beta: float) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores, {y.size} labels")
    s = np.clip(s, EPS_CLAMP, 1.0 - EPS_CLAMP)
    per = beta * y * np.log(s) + (1.0 - beta) * (1.0 - y) * np.log1p(-s)
    return float(-per.mean())


def output_delta(scores: np.ndarray, labels: np.ndarray, beta: float) -> np.ndarray:
    """d(balanced_ce)/d(logit) for a sigmoid output, one column."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    d = (-beta * y * (1.0 - s) + (1.0 - beta) * (1.0 - y) * s) / y.size
    return d[:, None]


@dataclass
class Gradients:
    dW: List[np.ndarray]
    db: List[np.ndarray]
    dX: Optional[np.ndarray] = None

    def all_finite(self) -> bool:
        # any nan/inf entry makes its sum non-finite
        return all(math.isfinite(float(g.sum())) for g in self.dW + self.db) \
            or all(np.isfinite(g).all() for g in self.dW + self.db)


def backward(net: StageNetwork, cache: ForwardCache, labels, beta: float, *,
             inject: Optional[Dict[int, np.ndarray]] = None,
             n_labeled: Optional[int] = None, need_input_grad: bool = False,
             gate: bool = True) -> Gradients:
    """Gradients of the balanced loss with respect to the live parameters.

    ``inject`` maps an activation index (1..L-2) to an extra upstream gradient
    added there, which is how the adversarial head reaches the trunk.  When
    ``n_labeled`` is given only the first ``n_labeled`` rows carry the
    classification loss.  ``gate=False`` leaves ``pf == 0`` entries ungated;
    the caller must then mask updates with :meth:`LayerParams.trainable_masks`.
    """
    if cache.net_id != id(net) or len(cache.zs) != len(net.layers):
        raise ActivationCacheError("activation cache does not belong to this network")
    m = cache.X.shape[0]
    n_lab = m if n_labeled is None else n_labeled
    delta = np.zeros((m, 1))
    if n_lab > 0:
        delta[:n_lab] = output_delta(cache.scores[:n_lab], labels, beta)
    inject = inject or {}
    n = len(net.layers)
    dW: List[np.ndarray] = [None] * n
    db: List[np.ndarray] = [None] * n
    dX = None
    for l in range(n - 1, -1, -1):
        layer = net.layers[l]
        W_eff, _ = cache.weights[l]
        gW = cache.acts[l].T @ delta
        gb = delta.sum(axis=0)
        if gate and layer.has_transfer:
            kernels.gate(gW, layer.pf_W)
            kernels.gate(gb, layer.pf_b)
        dW[l], db[l] = gW, gb
        if l == 0 and not need_input_grad:
            break
        d_act = delta @ W_eff.T
        if l in inject:
            d_act = d_act + inject[l]
        if l == 0:
            dX = d_act
            break
        delta = kernels.relu_backward(d_act, cache.zs[l - 1], cache.scales[l - 1],
                                      np.empty_like(d_act))
    return Gradients(dW, db, dX)


def loss_of(net: StageNetwork, X, y, beta: float) -> float:
    return balanced_ce(forward(net, X).scores, y, beta)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def learning_rate(eta0: float, progress: float, decay_omega: float, decay_phi: float) -> float:
    """Inverse-decay schedule; ``progress`` runs from 0 to 1 over training."""
    return eta0 / (1.0 + decay_omega * progress) ** decay_phi


@dataclass
class AdamState:
    m_W: List[np.ndarray]
    v_W: List[np.ndarray]
    m_b: List[np.ndarray]
    v_b: List[np.ndarray]
    total_steps: int
    t: int = 0

    @classmethod
    def for_network(cls, net: StageNetwork, total_steps: int) -> "AdamState":
        return cls(
            m_W=[np.zeros_like(layer.W) for layer in net.layers],
            v_W=[np.zeros_like(layer.W) for layer in net.layers],
            m_b=[np.zeros_like(layer.b) for layer in net.layers],
            v_b=[np.zeros_like(layer.b) for layer in net.layers],
            total_steps=max(int(total_steps), 1),
        )


def apply_update(net: StageNetwork, grads: Gradients, state: AdamState, step_index: int,
                 config: TrainConfig,
                 masks: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None) -> StageNetwork:
    """One optimizer step in place; entries with ``pb == 0`` are never touched.

    ``masks`` overrides the per-layer update masks (see ``backward(gate=False)``).
    """
    if masks is None:
        masks = [(layer.pb_W, layer.pb_b) for layer in net.layers]
    if not grads.all_finite():
        bad = [l for l, (gw, gb) in enumerate(zip(grads.dW, grads.db))
               if not (np.isfinite(gw).all() and np.isfinite(gb).all())]
        raise NonFiniteGradientError(f"non-finite gradient in layer(s) {bad} at step {step_index}")
    progress = min(step_index / state.total_steps, 1.0)
    lr = learning_rate(config.eta0, progress, config.decay_omega, config.decay_phi)
    if config.optimizer == "sgd":
        for layer, gw, gb, (mw, mb) in zip(net.layers, grads.dW, grads.db, masks):
            kernels.masked_sgd(layer.W, gw, mw, lr)
            kernels.masked_sgd(layer.b, gb, mb, lr)
        state.t += 1
        return net
    state.t += 1
    bc1 = 1.0 - ADAM_B1 ** state.t
    bc2 = 1.0 - ADAM_B2 ** state.t
    for l, layer in enumerate(net.layers):
        mw, mb = masks[l]
        kernels.masked_adam(layer.W, grads.dW[l], state.m_W[l], state.v_W[l], mw,
                            lr, ADAM_B1, ADAM_B2, ADAM_EPS, bc1, bc2)
        kernels.masked_adam(layer.b, grads.db[l], state.m_b[l], state.v_b[l], mb,
                            lr, ADAM_B1, ADAM_B2, ADAM_EPS, bc1, bc2)
    return net


# --------------------------------------------------------------------------
# gradient-reversal adversarial head
# --------------------------------------------------------------------------

def domain_class_weights(domain_labels) -> Tuple[float, float]:
    """(weight for domain 0, weight for domain 1) as total / (2 * count)."""
    d = np.asarray(domain_labels)
    total = d.size
    n1 = int(d.sum())
    n0 = total - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("both domains must be present")
    return total / (2.0 * n0), total / (2.0 * n1)


@dataclass
class AdversarialHead:
    """Domain discriminator attached to the gamma layer: gamma -> hidden -> 1."""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    lam: float
    class_weights: Tuple[float, float] = (1.0, 1.0)
    skipped: int = 0
    _adam: Optional[list] = field(default=None, repr=False)
    _t: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not all(np.isfinite(w) and w > 0 for w in self.class_weights):
            raise ValueError("domain class weights must be finite and positive")

    @classmethod
    def create(cls, n_in: int, lam: float, rng: np.random.Generator, hidden: int = 8,
               class_weights: Tuple[float, float] = (1.0, 1.0)) -> "AdversarialHead":
        return cls(
            W1=rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, hidden)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, math.sqrt(2.0 / hidden), size=(hidden, 1)),
            b2=np.zeros(1),
            lam=lam,
            class_weights=class_weights,
        )

    def params(self) -> List[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def discriminate(self, features: np.ndarray) -> np.ndarray:
        h = np.maximum(features @ self.W1 + self.b1, 0.0)
        return expit(h @ self.W2 + self.b2)[:, 0]

    def loss(self, features: np.ndarray, domain_labels) -> float:
        d = np.asarray(domain_labels, dtype=np.float64)
        s = np.clip(self.discriminate(features), EPS_CLAMP, 1.0 - EPS_CLAMP)
        w = np.where(d == 1, self.class_weights[1], self.class_weights[0])
        return float(-(w * (d * np.log(s) + (1.0 - d) * np.log1p(-s))).mean())

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if self._adam is None:
            self._adam = [(np.zeros_like(p), np.zeros_like(p)) for p in self.params()]
        self._t += 1
        bc1 = 1.0 - ADAM_B1 ** self._t
        bc2 = 1.0 - ADAM_B2 ** self._t
        for p, g, (m, v) in zip(self.params(), grads, self._adam):
            kernels.masked_adam(p, g, m, v, np.ones(p.shape, dtype=np.uint8),
                                lr, ADAM_B1, ADAM_B2, ADAM_EPS, bc1, bc2)


def grl_step(features: np.ndarray, domain_labels, head: AdversarialHead):
    """Weighted discriminator loss plus the reversed gradient for the trunk.

    Returns ``(loss, trunk_grad, head_grads)``.  ``trunk_grad`` is the
    gradient of the loss with respect to ``features`` multiplied by
    ``-lambda``; ``head_grads`` are the ordinary discriminator gradients.
    A batch holding a single domain is a no-op and bumps ``head.skipped``.
    """
    d = np.asarray(domain_labels, dtype=np.float64)
    if d.min() == d.max():
        head.skipped += 1
        return 0.0, np.zeros_like(features), [np.zeros_like(p) for p in head.params()]
    m = features.shape[0]
    zh = features @ head.W1 + head.b1
    h = np.maximum(zh, 0.0)
    s = expit(h @ head.W2 + head.b2)[:, 0]
    w = np.where(d == 1, head.class_weights[1], head.class_weights[0])
    sc = np.clip(s, EPS_CLAMP, 1.0 - EPS_CLAMP)
    loss = float(-(w * (d * np.log(sc) + (1.0 - d) * np.log1p(-sc))).mean())
    dz = (w * (s - d) / m)[:, None]
    gW2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dh = (dz @ head.W2.T) * (zh > 0)
    gW1 = features.T @ dh
    gb1 = dh.sum(axis=0)
    d_features = dh @ head.W1.T
    return loss, -head.lam * d_features, [gW1, gb1, gW2, gb2]
