import itertools
import random

import pytest

from energysched.placement import (CapacityError, FragmentationError, PlacementStateError,
                                   apply_move, buddy_allocate, buddy_free, check_invariants,
                                   free_blocks, make_nodes, partial_node_count, plan_migrations,
                                   round_worker_count)


@pytest.mark.parametrize("raw,want", [(5, 4), (8, 8), (1, 1), (7, 4), (33, 32)])
def test_round_worker_count(raw, want):
    assert round_worker_count(raw) == want


def test_round_worker_count_rejects_zero():
    with pytest.raises(ValueError):
        round_worker_count(0)


def test_buddy_alignment_examples():
    nodes = make_nodes(1, 8)
    assert buddy_allocate(nodes, 2, "a") == [(0, (0, 1))]
    assert buddy_allocate(nodes, 4, "b") == [(0, (4, 5, 6, 7))]
    with pytest.raises(ValueError):
        buddy_allocate(nodes, 3, "c")


def test_best_fit_across_nodes():
    nodes = make_nodes(3, 8)
    buddy_allocate(nodes, 4, "a")   # node 0 keeps a free 4-block
    buddy_allocate(nodes, 8, "b")   # node 1 whole
    assert buddy_allocate(nodes, 2, "c")[0][0] == 0


def test_multi_node_jobs_take_whole_nodes():
    nodes = make_nodes(4, 8)
    buddy_allocate(nodes, 2, "small")
    blocks = buddy_allocate(nodes, 16, "big")
    assert [b[0] for b in blocks] == [1, 2]
    assert all(len(idx) == 8 for _, idx in blocks)
    check_invariants(nodes, {"small": [(0, (0, 1))], "big": blocks})


def test_capacity_and_fragmentation_errors_differ():
    nodes = make_nodes(2, 8)
    buddy_allocate(nodes, 8, "a")
    buddy_allocate(nodes, 4, "b")
    with pytest.raises(CapacityError):
        buddy_allocate(nodes, 8, "c")
    # eight GPUs free, but split over two nodes
    nodes = make_nodes(2, 8)
    buddy_place(nodes, "a", 0, (0, 1, 2, 3))
    buddy_place(nodes, "b", 1, (0, 1, 2, 3))
    with pytest.raises(FragmentationError):
        buddy_allocate(nodes, 8, "c")


def test_free_coalesces_with_buddy():
    nodes = make_nodes(1, 8)
    a = buddy_allocate(nodes, 2, "a")
    buddy_allocate(nodes, 4, "b")
    assert (2, 2) in free_blocks(nodes[0])
    buddy_free(nodes, a)
    assert (0, 4) in free_blocks(nodes[0])


def test_last_job_freed_flags_node():
    nodes = make_nodes(2, 8)
    a = buddy_allocate(nodes, 4, "a")
    assert buddy_free(nodes, a) == [0]


def test_alloc_then_free_restores_state():
    nodes = make_nodes(2, 8)
    buddy_allocate(nodes, 2, "x")
    before = [(list(nd.free_mask), list(nd.owner)) for nd in nodes]
    b = buddy_allocate(nodes, 4, "y")
    buddy_free(nodes, b)
    assert [(nd.free_mask, nd.owner) for nd in nodes] == before


def test_double_free_rejected():
    nodes = make_nodes(1, 8)
    a = buddy_allocate(nodes, 2, "a")
    buddy_free(nodes, a)
    with pytest.raises(PlacementStateError):
        buddy_free(nodes, a)


def test_free_order_does_not_matter():
    rng = random.Random(1)
    for _ in range(50):
        nodes = make_nodes(2, 8)
        blocks = []
        for i in range(8):
            try:
                blocks.append(buddy_allocate(nodes, rng.choice([1, 2, 4]), f"j{i}"))
            except (CapacityError, FragmentationError):
                break
        gone = blocks[len(blocks) // 2:]
        masks = set()
        for perm in (gone, gone[::-1], rng.sample(gone, len(gone))):
            trial = make_nodes(2, 8)
            for b in blocks:
                for nid, idx in b:
                    for g in idx:
                        trial[nid].free_mask[g] = False
            for b in perm:
                buddy_free(trial, b)
            masks.add(tuple(tuple(nd.free_mask) for nd in trial))
        assert len(masks) == 1


def test_defrag_two_half_nodes():
    nodes = make_nodes(2, 8)
    place = {"a": buddy_place(nodes, "a", 0, (0, 1, 2, 3)),
             "c": buddy_place(nodes, "c", 1, (4, 5, 6, 7))}
    moves = plan_migrations(nodes, place)
    assert len(moves) == 1
    job, old, new = moves[0]
    apply_move(nodes, job, old, new)
    assert partial_node_count(nodes) == 0
    assert sum(nd.is_empty for nd in nodes) == 1


def buddy_place(nodes, job, node_id, idx):
    nd = nodes[node_id]
    for i in idx:
        nd.free_mask[i] = False
        nd.owner[i] = job
    nd.powered_on = True
    return [(node_id, tuple(idx))]


def test_packed_cluster_needs_no_moves():
    nodes = make_nodes(2, 8)
    place = {"a": buddy_allocate(nodes, 8, "a"), "b": buddy_allocate(nodes, 4, "b"),
             "c": buddy_allocate(nodes, 4, "c")}
    assert plan_migrations(nodes, place) == []


def best_partial_count(sizes, num_nodes, gpn):
    """Fewest partially used nodes over every assignment of jobs to nodes."""
    best = num_nodes
    for assign in itertools.product(range(num_nodes), repeat=len(sizes)):
        load = [0] * num_nodes
        for s, k in zip(sizes, assign):
            load[k] += s
        if max(load) > gpn:
            continue
        best = min(best, sum(0 < x < gpn for x in load))
    return best


def random_state(rng, num_nodes, gpn):
    nodes = make_nodes(num_nodes, gpn)
    place = {}
    for i in range(rng.randint(1, 7)):
        n = rng.choice([1, 1, 2, 2, 4, 8])
        try:
            place[f"j{i}"] = buddy_allocate(nodes, n, f"j{i}")
        except (CapacityError, FragmentationError):
            pass
    # random departures leave holes
    for j in list(place):
        if rng.random() < 0.4:
            buddy_free(nodes, place.pop(j))
    return nodes, place


def test_migrations_never_add_partial_nodes():
    rng = random.Random(7)
    improved = 0
    for _ in range(200):
        num_nodes = rng.randint(1, 3)
        nodes, place = random_state(rng, num_nodes, 8)
        before = partial_node_count(nodes)
        moves = plan_migrations(nodes, place)
        for job, old, new in moves:
            assert place[job] == old
            apply_move(nodes, job, old, new)
            place[job] = new
        check_invariants(nodes, place)
        after = partial_node_count(nodes)
        sizes = [sum(len(idx) for _, idx in b) for b in place.values()]
        assert best_partial_count(sizes, num_nodes, 8) <= after <= before
        assert (after < before) == bool(moves)
        improved += after < before
    assert improved > 0
