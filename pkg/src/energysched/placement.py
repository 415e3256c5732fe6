"""Network packing and buddy allocation of GPUs on nodes.

Jobs get power-of-two worker counts. A job that fits on one node gets a
size-aligned block there; bigger jobs take whole free nodes, so no node
ever hosts more than one job spanning several nodes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .cluster import is_power_of_two

Block = tuple[int, tuple[int, ...]]  # (node_id, gpu indices)
Placement = dict[str, list[Block]]


class PlacementError(RuntimeError):
    pass


class CapacityError(PlacementError):
    """Not enough free GPUs in the whole cluster."""


class FragmentationError(PlacementError):
    """Enough free GPUs, but no aligned block of the requested size."""


class PlacementStateError(PlacementError):
    pass


@dataclass
class NodeState:
    node_id: int
    gpus_total: int
    free_mask: list[bool] = field(default=None)
    powered_on: bool = False
    owner: list[str | None] = field(default=None, repr=False)

    def __post_init__(self):
        if not is_power_of_two(self.gpus_total):
            raise ValueError("gpus_total must be a power of two")
        if self.free_mask is None:
            self.free_mask = [True] * self.gpus_total
        if self.owner is None:
            self.owner = [None] * self.gpus_total

    @property
    def used(self) -> int:
        return self.gpus_total - sum(self.free_mask)

    @property
    def is_empty(self) -> bool:
        return all(self.free_mask)

    @property
    def is_partial(self) -> bool:
        return 0 < self.used < self.gpus_total

    def jobs(self) -> list[str]:
        seen = []
        for o in self.owner:
            if o is not None and o not in seen:
                seen.append(o)
        return seen


def make_nodes(num_nodes: int, gpus_per_node: int) -> list[NodeState]:
    return [NodeState(i, gpus_per_node) for i in range(num_nodes)]


def round_worker_count(n_raw: int) -> int:
    if n_raw < 1:
        raise ValueError("worker count must be >= 1")
    return 1 << (int(n_raw).bit_length() - 1)


def free_blocks(node: NodeState) -> list[tuple[int, int]]:
    """Maximal free buddy blocks as ``(offset, size)``, in offset order."""
    out = []

    def walk(off, size):
        if all(node.free_mask[off:off + size]):
            out.append((off, size))
        elif size > 1 and any(node.free_mask[off:off + size]):
            half = size // 2
            walk(off, half)
            walk(off + half, half)

    walk(0, node.gpus_total)
    return out


def _best_block(node: NodeState, n: int):
    fits = [(size, off) for off, size in free_blocks(node) if size >= n]
    return min(fits) if fits else None


def _take(node: NodeState, idx, job_id):
    for i in idx:
        node.free_mask[i] = False
        node.owner[i] = job_id
    node.powered_on = True


def buddy_allocate(nodes: list[NodeState], n: int, job_id: str | None = None) -> list[Block]:
    """Allocate ``n`` GPUs and return the blocks, mutating ``nodes``."""
    if not is_power_of_two(n):
        raise ValueError(f"worker count {n} is not a power of two")
    free_total = sum(sum(nd.free_mask) for nd in nodes)
    if free_total < n:
        raise CapacityError(f"need {n} GPUs, only {free_total} free")
    gpn = nodes[0].gpus_total
    if n <= gpn:
        best = None
        for nd in nodes:
            b = _best_block(nd, n)
            if b is None:
                continue
            # tightest block, then lowest id
            key = (b[0], nd.node_id)
            if best is None or key < best[0]:
                best = (key, nd, b[1])
        if best is None:
            raise FragmentationError(f"no aligned free block of {n} GPUs")
        _, nd, off = best
        idx = tuple(range(off, off + n))
        _take(nd, idx, job_id)
        return [(nd.node_id, idx)]
    need = n // gpn
    empty = sorted((nd for nd in nodes if nd.is_empty), key=lambda nd: (not nd.powered_on, nd.node_id))
    if len(empty) < need:
        raise FragmentationError(f"need {need} fully free nodes, have {len(empty)}")
    blocks = []
    for nd in sorted(empty[:need], key=lambda nd: nd.node_id):
        idx = tuple(range(gpn))
        _take(nd, idx, job_id)
        blocks.append((nd.node_id, idx))
    return blocks


def buddy_free(nodes: list[NodeState], blocks: list[Block]) -> list[int]:
    """Return blocks to their nodes; gives the ids of nodes left completely free."""
    by_id = {nd.node_id: nd for nd in nodes}
    for node_id, idx in blocks:
        nd = by_id[node_id]
        if any(nd.free_mask[i] for i in idx):
            raise PlacementStateError(f"double free on node {node_id}: {idx}")
    emptied = []
    for node_id, idx in blocks:
        nd = by_id[node_id]
        for i in idx:
            nd.free_mask[i] = True
            nd.owner[i] = None
        if nd.is_empty and node_id not in emptied:
            emptied.append(node_id)
    return emptied


def plan_migrations(nodes: list[NodeState], placements: Placement,
                    pinned: frozenset = frozenset()) -> list[tuple[str, list[Block], list[Block]]]:
    """Moves that empty partially used nodes into other partially used nodes.

    Nodes are evacuated lightest first; a node is only evacuated when every
    job on it fits elsewhere, so each accepted batch of moves lowers the
    partial-node count. ``nodes`` is not modified.
    """
    work = copy.deepcopy(nodes)
    where = {j: list(b) for j, b in placements.items()}
    moves = []
    order = [nd.node_id for nd in sorted(work, key=lambda nd: (nd.used, nd.node_id))]
    for src_id in order:
        pos = {nd.node_id: i for i, nd in enumerate(work)}
        src = work[pos[src_id]]
        if not src.is_partial:
            continue
        residents = src.jobs()
        if any(j in pinned or len(where[j]) > 1 for j in residents):
            continue
        target_ids = [nd.node_id for nd in work if nd.node_id != src_id and nd.is_partial]
        if not target_ids:
            continue
        trial = copy.deepcopy(work)
        targets = [trial[pos[i]] for i in target_ids]
        residents.sort(key=lambda j: (-len(where[j][0][1]), j))
        for j in residents:
            buddy_free(trial, where[j])
        batch = []
        for j in residents:
            try:
                new = buddy_allocate(targets, len(where[j][0][1]), j)
            except PlacementError:
                batch = None
                break
            batch.append((j, where[j], new))
        if batch is None:
            continue
        work = trial
        for j, old, new in batch:
            where[j] = new
            moves.append((j, old, new))
    return moves


def apply_move(nodes: list[NodeState], job_id: str, old: list[Block], new: list[Block]) -> None:
    buddy_free(nodes, old)
    by_id = {nd.node_id: nd for nd in nodes}
    for node_id, idx in new:
        nd = by_id[node_id]
        if not all(nd.free_mask[i] for i in idx):
            raise PlacementStateError(f"move target on node {node_id} is occupied")
        _take(nd, idx, job_id)


def partial_node_count(nodes: list[NodeState]) -> int:
    return sum(nd.is_partial for nd in nodes)


def check_invariants(nodes: list[NodeState], placements: Placement) -> None:
    """Raise AssertionError if a placement breaks packing or buddy alignment."""
    spanning: dict[int, int] = {}
    for job, blocks in placements.items():
        sizes = [len(idx) for _, idx in blocks]
        total = sum(sizes)
        assert is_power_of_two(total), f"{job}: {total} GPUs is not a power of two"
        for node_id, idx in blocks:
            size = len(idx)
            assert is_power_of_two(size), f"{job}: block size {size}"
            assert idx[0] % size == 0 and list(idx) == list(range(idx[0], idx[0] + size)), \
                f"{job}: misaligned block {idx}"
        if len(blocks) > 1:
            for node_id, idx in blocks:
                assert len(idx) == nodes[0].gpus_total, f"{job}: multi-node job on a partial node"
                spanning[node_id] = spanning.get(node_id, 0) + 1
        partial = [b for b in blocks if len(b[1]) < nodes[0].gpus_total]
        assert len(partial) <= 1, f"{job}: more than one partial node"
    assert all(v <= 1 for v in spanning.values()), "node hosts more than one spanning job"
    for nd in nodes:
        if not nd.powered_on:
            assert nd.is_empty, f"node {nd.node_id} is off but has jobs"
