"""Network initialization and weight transfer between consecutive stages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .engine import LayerParams, StageNetwork
from .topology import Topology, TopologyError, embedding_plan


class IncompatibleTopologyError(TopologyError):
    pass


@dataclass
class TransferReport:
    stage: int
    transferred: int
    fresh: int
    regions: List[Tuple[int, int]]
    pf_ones_fraction: float
    pb_ones_fraction: float
    mask_seed: Tuple[int, ...] = ()
    head_onto_head: bool = True

    @property
    def total(self) -> int:
        return self.transferred + self.fresh

    def to_text(self) -> str:
        regions = ";".join(f"{r}x{c}" for r, c in self.regions)
        seed = ",".join(str(s) for s in self.mask_seed)
        return (f"stage = {self.stage}\n"
                f"transferred = {self.transferred}\n"
                f"fresh = {self.fresh}\n"
                f"regions = {regions}\n"
                f"pf_ones_fraction = {self.pf_ones_fraction!r}\n"
                f"pb_ones_fraction = {self.pb_ones_fraction!r}\n"
                f"mask_seed = {seed}\n"
                f"head_onto_head = {'true' if self.head_onto_head else 'false'}\n")

    @classmethod
    def from_text(cls, text: str) -> "TransferReport":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        regions = [tuple(int(x) for x in r.split("x")) for r in kv["regions"].split(";") if r]
        seed = tuple(int(s) for s in kv["mask_seed"].split(",") if s)
        return cls(int(kv["stage"]), int(kv["transferred"]), int(kv["fresh"]), regions,
                   float(kv["pf_ones_fraction"]), float(kv["pb_ones_fraction"]), seed,
                   kv["head_onto_head"] == "true")


def init_network(topology: Topology, rng: np.random.Generator) -> StageNetwork:
    layers = [LayerParams.fresh(a, b, rng)
              for a, b in zip(topology.widths[:-1], topology.widths[1:])]
    return StageNetwork(topology, layers)


def transfer_weights(prev: StageNetwork, nxt: StageNetwork, rho: float, shared_mask: bool,
                     rng: np.random.Generator, stage: int = 0,
                     mask_seed: Tuple[int, ...] = ()) -> Tuple[StageNetwork, TransferReport]:
    """Embed ``prev`` into the top-left blocks of ``nxt`` and sample masks.

    Returns a new network; ``nxt`` is left untouched.  Transferred values go
    into both the live and the snapshot arrays.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    try:
        plan = embedding_plan(prev.topology, nxt.topology)
    except TopologyError as exc:
        raise IncompatibleTopologyError(str(exc)) from exc
    out = nxt.copy()
    transferred = 0
    pf_ones = pb_ones = 0
    regions = [(0, 0)] * len(out.layers)
    for old, new, rows, cols in plan.pairs:
        src = prev.layers[old]
        dst = out.layers[new]
        w = src.W[:rows, :cols]
        b = src.b[:cols]
        dst.W[:rows, :cols] = w
        dst.W_snap[:rows, :cols] = w
        dst.b[:cols] = b
        dst.b_snap[:cols] = b
        pf_W = (rng.random((rows, cols)) < rho).astype(np.uint8)
        pf_b = (rng.random(cols) < rho).astype(np.uint8)
        if shared_mask:
            pb_W, pb_b = pf_W.copy(), pf_b.copy()
        else:
            pb_W = (rng.random((rows, cols)) < rho).astype(np.uint8)
            pb_b = (rng.random(cols) < rho).astype(np.uint8)
        dst.pf_W[:rows, :cols] = pf_W
        dst.pf_b[:cols] = pf_b
        dst.pb_W[:rows, :cols] = pb_W
        dst.pb_b[:cols] = pb_b
        dst.region = (rows, cols)
        regions[new] = (rows, cols)
        n = rows * cols + cols
        transferred += n
        pf_ones += int(pf_W.sum()) + int(pf_b.sum())
        pb_ones += int(pb_W.sum()) + int(pb_b.sum())
    report = TransferReport(
        stage=stage,
        transferred=transferred,
        fresh=out.n_params() - transferred,
        regions=regions,
        pf_ones_fraction=pf_ones / transferred if transferred else 1.0,
        pb_ones_fraction=pb_ones / transferred if transferred else 1.0,
        mask_seed=tuple(mask_seed),
        head_onto_head=prev.topology.depth == nxt.topology.depth,
    )
    return out, report


def snapshot_equals_transfer(net: StageNetwork, prev: StageNetwork) -> bool:
    for l, src in enumerate(prev.layers):
        if l >= len(net.layers):
            return False
        r, c = net.layers[l].region
        if (r, c) != src.shape:
            return False
        dst = net.layers[l]
        if not (np.array_equal(dst.W_snap[:r, :c], src.W)
                and np.array_equal(dst.b_snap[:c], src.b)):
            return False
    return True
