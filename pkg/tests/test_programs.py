import random
from collections import deque

import pytest

from ofz import cfg, isa, programs


def _graph_search(blocks, entry):
    seen, todo = {entry}, deque([entry])
    while todo:
        for s in blocks[todo.popleft()].successors:
            if s not in seen:
                seen.add(s)
                todo.append(s)
    return seen


@pytest.mark.parametrize("kind", programs.KINDS)
def test_size_too_small(kind):
    with pytest.raises(programs.SizeTooSmall):
        programs.generate(kind, 3, 0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        programs.generate("zip", 10, 0)


def test_minimal_maze():
    img, truth = programs.maze(4, 0)
    assert len(truth.blocks) == 4
    assert len(truth.crash_sites) == 1


@pytest.mark.parametrize("kind", programs.KINDS)
def test_same_seed_same_image(kind):
    a, ta = programs.generate(kind, 30, 5)
    b, tb = programs.generate(kind, 30, 5)
    assert a == b and ta == tb
    c, _ = programs.generate(kind, 30, 6)
    assert a != c


@pytest.mark.parametrize("kind", programs.KINDS)
@pytest.mark.parametrize("size", [4, 9, 32, 64, 100])
def test_ground_truth_is_consistent(kind, size):
    img, truth = programs.generate(kind, size, 3)
    assert len(truth.blocks) == size
    assert truth.reachable_blocks == len(_graph_search(truth.blocks, img.entry)) == size
    assert cfg.discover_blocks(img) == truth.blocks
    for site in truth.crash_sites:
        assert truth.blocks[site].terminator is cfg.Terminator.ABORT
    assert len(truth.crash_inputs) == len(truth.crash_sites)
    for data in truth.crash_inputs:
        assert isa.execute(img, data).kind is isa.OutcomeKind.CRASH


def test_parser_has_dead_code():
    _, truth = programs.parser(64, 1)
    assert truth.emitted_blocks > truth.reachable_blocks


@pytest.mark.parametrize("seed", range(30))
def test_random_programs_always_terminate(seed):
    rng = random.Random(seed)
    img = programs.random_program(rng, rng.randrange(2, 40))
    cfg.discover_blocks(img)
    for _ in range(20):
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 16)))
        assert isa.execute(img, data).kind is not isa.OutcomeKind.TIMEOUT
