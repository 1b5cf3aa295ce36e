"""Sequential stage-by-stage training and per-stage inference."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import engine
from .engine import (AdamState, AdversarialHead, StageNetwork, TrainConfig, apply_update,
                     backward, balanced_ce, beta_of, forward, grl_step, stage_rng)
from .funnelgen import FunnelDataset
from .topology import width_schedule
from .transfer import TransferReport, init_network, transfer_weights

log = logging.getLogger(__name__)


class DegenerateStageError(ValueError):
    """A stage whose labels are all one class (balanced loss is undefined)."""


class UnknownStageError(KeyError):
    pass


@dataclass
class TrainTrace:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0
    da_skipped: int = 0


@dataclass
class ModelRegistry:
    networks: Dict[int, StageNetwork]
    configs: Dict[int, TrainConfig]
    reports: Dict[int, Optional[TransferReport]]
    n_raw: Dict[int, int]
    start: int = 0
    traces: Dict[int, TrainTrace] = field(default_factory=dict, compare=False)
    stage_names: Dict[int, str] = field(default_factory=dict)

    FORMAT_VERSION = 1

    def stages(self) -> List[int]:
        return sorted(self.networks)

    def __len__(self) -> int:
        return len(self.networks)

    def check(self) -> None:
        idx = self.stages()
        if idx and idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError(f"stage indices are not contiguous: {idx}")
        for q in idx:
            if self.networks[q].n_inputs != self.input_width(q):
                raise ValueError(f"stage {q}: network input width does not match features")

    def input_width(self, q: int) -> int:
        cfg = self.configs[q]
        extra = (q - self.start) if cfg.prev_score_feature else 0
        return self.n_raw[q] + extra


@dataclass
class StagePrediction:
    stage: int
    applicant_id: int
    score: float
    decision: int


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _inner_split(y: np.ndarray, fraction: float, rng: np.random.Generator
                 ) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Stratified hold-out indices, or None when a class is too small to split."""
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if fraction <= 0 or pos.size < 2 or neg.size < 2:
        return None
    n_pos = max(1, int(round(fraction * pos.size)))
    n_neg = max(1, int(round(fraction * neg.size)))
    pos, neg = rng.permutation(pos), rng.permutation(neg)
    val = np.sort(np.concatenate([pos[:n_pos], neg[:n_neg]]))
    train = np.sort(np.concatenate([pos[n_pos:], neg[n_neg:]]))
    return train, val


def holdout_ids(dataset: FunnelDataset, fraction: float, rng: np.random.Generator,
                start: int = 0) -> np.ndarray:
    """Applicant ids held out from training at every stage.

    Drawn once at the first trained stage, stratified by how far each
    applicant got, so a held-out applicant is never a training row at an
    earlier stage (stage ``q`` rows are stage ``q - 1`` survivors).
    """
    if fraction <= 0:
        return np.zeros(0, dtype=np.int64)
    sub = FunnelDataset(dataset.stages[start:], dataset.cohort)
    reached = sub.furthest_stage()
    held = []
    for level in sorted(set(reached.values())):
        members = np.array(sorted(i for i, r in reached.items() if r == level), dtype=np.int64)
        k = int(round(fraction * members.size))
        held.append(rng.permutation(members)[:k])
    return np.sort(np.concatenate(held)) if held else np.zeros(0, dtype=np.int64)


def _split_from_rows(y: np.ndarray, val_mask: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Use a fixed hold-out when both parts stay usable, else no split."""
    tr, va = np.flatnonzero(~val_mask), np.flatnonzero(val_mask)
    if va.size == 0 or tr.size == 0:
        return None
    if min(int(y[tr].sum()), int(tr.size - y[tr].sum())) < 2:
        return None
    return tr, va


def _validate_xy(X: np.ndarray, Y: np.ndarray, net: StageNetwork) -> None:
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty dataset")
    if X.shape[1] != net.n_inputs:
        raise ValueError(f"X has {X.shape[1]} columns, network expects {net.n_inputs}")
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"{Y.shape[0]} labels for {X.shape[0]} rows")
    if not np.isfinite(X).all():
        raise ValueError("non-finite feature values")


def train_stage(X, Y, net: StageNetwork, config: TrainConfig, stage: int = 0, *,
                source: Optional[np.ndarray] = None,
                holdout: Optional[np.ndarray] = None) -> Tuple[StageNetwork, TrainTrace]:
    """Train ``net`` (a copy is returned) on one stage's data.

    Runs ``epochs`` passes of shuffled mini-batches.  When a stratified inner
    validation split is possible and ``patience > 0``, training stops after
    ``patience`` epochs without validation improvement and the best
    parameters are restored.  ``holdout`` (boolean per row) fixes that split
    instead of drawing one.  ``source`` holds previous-stage rows (already
    padded to the current width) for the domain-adversarial branch.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.asarray(Y).astype(np.float64).reshape(-1)
    _validate_xy(X, Y, net)
    net = net.copy()
    trace = TrainTrace()
    if config.epochs == 0:
        return net, trace

    split = None
    if config.patience > 0 and holdout is not None:
        split = _split_from_rows(Y, np.asarray(holdout, dtype=bool))
    elif config.patience > 0:
        split = _inner_split(Y, config.val_fraction, stage_rng(config.seed, stage, engine.RNG_INNER))
    if split is not None:
        tr, va = split
        X_tr, Y_tr, X_va, Y_va = X[tr], Y[tr], X[va], Y[va]
    else:
        X_tr, Y_tr, X_va, Y_va = X, Y, None, None
    beta = beta_of(Y_tr)
    m = X_tr.shape[0]
    bs = min(config.batch_size, m)
    steps_per_epoch = math.ceil(m / bs)
    state = AdamState.for_network(net, config.epochs * steps_per_epoch)
    shuffle = stage_rng(config.seed, stage, engine.RNG_SHUFFLE)
    drop_rng = stage_rng(config.seed, stage, engine.RNG_DROPOUT)

    use_da = config.da_lambda > 0 and source is not None and source.shape[0] > 0
    head = None
    if use_da:
        if source.shape[1] != net.n_inputs:
            raise ValueError("source rows must be padded to the current input width")
        total = m + source.shape[0]
        weights = (total / (2.0 * source.shape[0]), total / (2.0 * m))
        head = AdversarialHead.create(net.topology.widths[net.topology.gamma_index],
                                      config.da_lambda,
                                      stage_rng(config.seed, stage, engine.RNG_HEAD),
                                      class_weights=weights)
        src_order = shuffle.permutation(source.shape[0])
        src_pos = 0
    g_idx = net.topology.gamma_index
    # Fast path: with live == snapshot on hidden entries the blend is the
    # identity, and masking updates by pf & pb equals gating then masking by pb.
    live_only = all(layer.snapshot_consistent() for layer in net.layers)
    masks = [layer.trainable_masks() for layer in net.layers] if live_only else None

    best_loss = math.inf
    best_params = None
    since_best = 0
    step = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(m)
        batch_losses = []
        for k in range(steps_per_epoch):
            idx = order[k * bs:(k + 1) * bs]
            xb, yb = X_tr[idx], Y_tr[idx]
            inject = None
            if use_da:
                take = src_order[np.arange(src_pos, src_pos + len(idx)) % src_order.size]
                src_pos = (src_pos + len(idx)) % src_order.size
                xb = np.vstack([xb, source[take]])
            cache = forward(net, xb, config.dropout_p, train=True, rng=drop_rng,
                            live_only=live_only)
            if use_da:
                dom = np.concatenate([np.ones(len(idx)), np.zeros(len(take))])
                _, trunk_grad, head_grads = grl_step(cache.acts[g_idx], dom, head)
                inject = {g_idx: trunk_grad}
            grads = backward(net, cache, yb, beta, inject=inject, n_labeled=len(idx),
                             gate=not live_only)
            apply_update(net, grads, state, step, config, masks=masks)
            if use_da:
                progress = min(step / state.total_steps, 1.0)
                head.step(head_grads, engine.learning_rate(
                    config.eta0, progress, config.decay_omega, config.decay_phi))
            step += 1
            batch_losses.append(balanced_ce(cache.scores[:len(idx)], yb, beta))
        trace.train_loss.append(float(np.mean(batch_losses)))
        if X_va is not None:
            val = balanced_ce(forward(net, X_va, live_only=live_only).scores, Y_va, beta)
            trace.val_loss.append(val)
            if val < best_loss:
                best_loss, since_best, trace.best_epoch = val, 0, epoch
                best_params = [(layer.W.copy(), layer.b.copy()) for layer in net.layers]
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    trace.steps = step
    if best_params is not None:
        for layer, (W, b) in zip(net.layers, best_params):
            layer.W[...] = W
            layer.b[...] = b
    elif X_va is None:
        trace.best_epoch = len(trace.train_loss) - 1
    if head is not None:
        trace.da_skipped = head.skipped
    return net, trace


def _augment(registry: ModelRegistry, q: int, X_raw: np.ndarray) -> np.ndarray:
    """Stage-q network input: raw features plus chained previous-stage scores."""
    if q == registry.start or not registry.configs[q].prev_score_feature:
        return X_raw
    n_prev = registry.n_raw[q - 1]
    prev_in = _augment(registry, q - 1, X_raw[:, :n_prev])
    score = forward(registry.networks[q - 1], prev_in).scores
    return np.hstack([prev_in, X_raw[:, n_prev:], score[:, None]])


def train_msgtl(dataset: FunnelDataset, config: TrainConfig, start: int = 0,
                stop: Optional[int] = None, access_log: Optional[list] = None) -> ModelRegistry:
    """Train one network per stage from ``start`` (through ``stop``, inclusive).

    The first stage starts from a fresh network; every later stage gets a
    fresh network with the previous stage's trained parameters embedded
    (unless ``config.transfer`` is off).  ``access_log`` receives a
    ``(stage_trained, stage_read)`` tuple for every dataset stage read.
    """
    last = len(dataset) - 1 if stop is None else stop
    if not 0 <= start <= last < len(dataset):
        raise ValueError(f"no stages to train in [{start}, {last}]")
    reg = ModelRegistry({}, {}, {}, {}, start=start)
    held = holdout_ids(dataset, config.val_fraction if config.patience > 0 else 0.0,
                       stage_rng(config.seed, start, engine.RNG_INNER), start)
    for q in range(start, last + 1):
        st = dataset[q]
        if access_log is not None:
            access_log.append((q, q))
        if st.m == 0 or st.y.min() == st.y.max():
            raise DegenerateStageError(
                f"stage {q} ({st.name}): {int(st.y.sum())} positives of {st.m} rows; "
                "both classes are required")
        reg.n_raw[q] = st.n
        reg.configs[q] = config
        reg.stage_names[q] = st.name
        X = _augment(reg, q, st.X)
        topo = width_schedule(X.shape[1], config.gamma, config.omega)
        net = init_network(topo, stage_rng(config.seed, q, engine.RNG_INIT))
        report = None
        if q > start and config.transfer:
            mask_seed = (config.seed, q, engine.RNG_MASK)
            net, report = transfer_weights(reg.networks[q - 1], net, config.rho, config.shared_mask,
                                           stage_rng(*mask_seed), stage=q, mask_seed=mask_seed)
        source = None
        if config.da_lambda > 0 and q > start:
            if access_log is not None:
                access_log.append((q, q - 1))
            prev = dataset[q - 1]
            src = _augment(reg, q - 1, prev.X)
            source = np.zeros((src.shape[0], X.shape[1]))
            source[:, :src.shape[1]] = src
        net, trace = train_stage(X, st.y, net, config, stage=q, source=source,
                                 holdout=np.isin(st.ids, held))
        reg.networks[q] = net
        reg.reports[q] = report
        reg.traces[q] = trace
        log.info("stage %d (%s): m=%d n=%d epochs=%d loss=%.4f", q, st.name, st.m, X.shape[1],
                 len(trace.train_loss), trace.train_loss[-1] if trace.train_loss else float("nan"))
    return reg


def predict_scores(registry: ModelRegistry, stage: int, X) -> np.ndarray:
    if stage not in registry.networks:
        raise UnknownStageError(f"stage {stage} is not in the registry {registry.stages()}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != registry.n_raw[stage]:
        raise ValueError(f"stage {stage} expects {registry.n_raw[stage]} features, got shape {X.shape}")
    return forward(registry.networks[stage], _augment(registry, stage, X)).scores


def predict(registry: ModelRegistry, stage: int, X, threshold: float = 0.5,
            ids=None) -> List[StagePrediction]:
    scores = predict_scores(registry, stage, X)
    if ids is None:
        ids = np.arange(len(scores))
    return [StagePrediction(stage, int(i), float(s), int(s >= threshold))
            for i, s in zip(ids, scores)]
