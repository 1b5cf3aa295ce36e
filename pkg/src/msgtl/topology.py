"""Per-stage network shapes and the alignment between consecutive stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    widths: Tuple[int, ...]
    gamma: int
    omega: int

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def n_matrices(self) -> int:
        return len(self.widths) - 1

    @property
    def gamma_index(self) -> int:
        """Index of the last hidden layer (the one with `gamma` nodes)."""
        return len(self.widths) - 2

    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


@dataclass(frozen=True)
class EmbeddingPlan:
    # (old layer, new layer, rows, cols)
    pairs: Tuple[Tuple[int, int, int, int], ...] = field(default_factory=tuple)


def _ceil_log2_ratio(n: int, gamma: int) -> int:
    # ceil(log2(n / gamma)) in exact integer arithmetic, for n > gamma
    k = 0
    while gamma << k < n:
        k += 1
    return k


def layer_count(n: int, gamma: int, omega: int) -> int:
    """Number of node layers (input and 1-node output included) for `n` features."""
    if n < 1 or gamma < 1:
        raise TopologyError(f"n and gamma must be positive, got n={n}, gamma={gamma}")
    if omega < 3:
        raise TopologyError(f"omega must be at least 3, got {omega}")
    if n <= gamma:
        return 3
    depth = _ceil_log2_ratio(n, gamma) + 2
    return omega if depth >= omega else depth


def width_schedule(n: int, gamma: int, omega: int) -> Topology:
    depth = layer_count(n, gamma, omega)
    if n <= gamma:
        return Topology((n, gamma, 1), gamma, omega)
    halving = [-(-n // (1 << k)) for k in range(depth - 2)]
    return Topology(tuple(halving + [gamma, 1]), gamma, omega)


def embedding_plan(prev: Topology, nxt: Topology) -> EmbeddingPlan:
    """Top-left sub-block placement of every `prev` weight matrix inside `nxt`.

    Stage features are prefix-ordered, so layer l of the old network lands on
    layer l of the new one.
    """
    if prev.gamma != nxt.gamma or prev.omega != nxt.omega:
        raise TopologyError("stages must share gamma and omega")
    if prev.widths[0] > nxt.widths[0]:
        raise TopologyError(
            f"next stage is narrower than previous ({nxt.widths[0]} < {prev.widths[0]})")
    if prev.depth > nxt.depth:
        raise TopologyError(
            f"next stage is shallower than previous ({nxt.depth} < {prev.depth})")
    pairs: List[Tuple[int, int, int, int]] = []
    for l in range(prev.n_matrices):
        rows, cols = prev.widths[l], prev.widths[l + 1]
        if rows > nxt.widths[l] or cols > nxt.widths[l + 1]:
            raise TopologyError(
                f"layer {l}: block {rows}x{cols} does not fit "
                f"{nxt.widths[l]}x{nxt.widths[l + 1]}")
        pairs.append((l, l, rows, cols))
    return EmbeddingPlan(tuple(pairs))
