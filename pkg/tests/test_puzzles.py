"""Generators, solvers, augmentation, and the dataset build."""

import itertools
import re
import json

import numpy as np
import pytest

from gridloop.errors import ConfigError
from gridloop import puzzles as P
from gridloop.puzzles import (
    VOCAB,
    DatasetSpec,
    build_dataset,
    canonical_key,
    dihedral_instance,
    dihedral_transform,
    gen_maze,
    gen_sudoku,
    load_instances,
    save_instances,
    solve_maze,
    solve_sudoku,
    sudoku_solve_order,
    trajectory_sample,
)

# Independently derived completion count of the empty 4x4 grid (brute-force
# row-permutation enumeration, see oracle below). Frozen.
EMPTY_4X4_SOLUTIONS = 288


def brute_force_4x4_count():
    """Row-by-row enumeration over digit permutations with column and box
    filters. Shares no code with the package solver."""
    perms = list(itertools.permutations([1, 2, 3, 4]))
    count = 0
    for r0 in perms:
        for r1 in perms:
            if any(r0[c] == r1[c] for c in range(4)):
                continue
            if {r0[0], r0[1]} & {r1[0], r1[1]} or {r0[2], r0[3]} & {r1[2], r1[3]}:
                continue
            for r2 in perms:
                if any(r2[c] in (r0[c], r1[c]) for c in range(4)):
                    continue
                for r3 in perms:
                    if any(r3[c] in (r0[c], r1[c], r2[c]) for c in range(4)):
                        continue
                    if {r2[0], r2[1]} & {r3[0], r3[1]}:
                        continue
                    if {r2[2], r2[3]} & {r3[2], r3[3]}:
                        continue
                    count += 1
    return count


def sudoku_grid_valid(grid, box_rows, box_cols):
    k = box_rows * box_cols
    want = set(range(1, k + 1))
    for i in range(k):
        if set(grid[i, :]) != want or set(grid[:, i]) != want:
            return False
    for br in range(0, k, box_rows):
        for bc in range(0, k, box_cols):
            if set(grid[br:br + box_rows, bc:bc + box_cols].reshape(-1)) != want:
                return False
    return True


class TestSudokuSolver:
    def test_empty_4x4_matches_independent_oracle(self):
        assert brute_force_4x4_count() == EMPTY_4X4_SOLUTIONS
        sols = solve_sudoku(np.zeros((4, 4), int), 2, 2, limit=10**9)
        assert len(sols) == EMPTY_4X4_SOLUTIONS
        for s in sols[:20]:
            assert sudoku_grid_valid(s, 2, 2)

    def test_deterministic_first_solution(self):
        # row-major first-empty, ascending-digit order pins the first solution
        sols = solve_sudoku(np.zeros((4, 4), int), 2, 2, limit=1)
        expected = [[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]]
        assert sols[0].tolist() == expected

    def test_limit_respected(self):
        assert len(solve_sudoku(np.zeros((4, 4), int), 2, 2, limit=5)) == 5

    def test_row_violation_gives_zero_solutions(self):
        g = np.zeros((4, 4), int)
        g[0, 0] = 1
        g[0, 3] = 1
        assert solve_sudoku(g, 2, 2) == []

    def test_malformed_grid_raises(self):
        with pytest.raises(ConfigError):
            solve_sudoku(np.zeros((4, 5), int), 2, 2)
        with pytest.raises(ConfigError):
            solve_sudoku(np.full((4, 4), 7), 2, 2)

    def test_solved_grid_roundtrips(self):
        sols = solve_sudoku(np.zeros((6, 6), int), 2, 3, limit=1)
        assert sudoku_grid_valid(sols[0], 2, 3)
        again = solve_sudoku(sols[0], 2, 3, limit=2)
        assert len(again) == 1 and np.array_equal(again[0], sols[0])


class TestSudokuGeneration:
    @pytest.mark.parametrize("size,box,rng_seed", [(4, (2, 2), 0), (6, (2, 3), 1)])
    def test_unique_and_in_range(self, size, box, rng_seed):
        givens_range = (6, 10) if size == 4 else (14, 22)
        for i in range(30 if size == 4 else 8):
            inst = gen_sudoku(size, givens_range, np.random.default_rng([rng_seed, i]))
            grid = inst.x_grid()
            digits = np.where(grid == VOCAB.blank, 0,
                              grid - VOCAB.digit_base + 1)
            givens = int((grid != VOCAB.blank).sum())
            assert givens_range[0] <= givens <= givens_range[1]
            sols = solve_sudoku(digits, *box, limit=3)
            assert len(sols) == 1
            sol_tokens = VOCAB.digit_base + sols[0].reshape(-1) - 1
            assert np.array_equal(sol_tokens, inst.y_true_tokens)

    def test_solve_order_replays_to_solution(self):
        inst = gen_sudoku(4, (6, 10), np.random.default_rng(7))
        x = inst.x_tokens.copy()
        for cell, token in inst.solve_order:
            assert x[cell] == VOCAB.blank
            x[cell] = token
        assert np.array_equal(x, inst.y_true_tokens)

    def test_solve_order_is_row_major_over_blanks(self):
        inst = gen_sudoku(4, (6, 10), np.random.default_rng(9))
        cells = [c for c, _ in inst.solve_order]
        assert cells == sorted(cells)
        blanks = np.flatnonzero(inst.x_tokens == VOCAB.blank).tolist()
        assert cells == blanks

    def test_infeasible_range_raises(self):
        with pytest.raises(ConfigError):
            gen_sudoku(4, (20, 3), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            gen_sudoku(5, (6, 10), np.random.default_rng(0))

    def test_deterministic_given_rng_seed(self):
        a = gen_sudoku(4, (6, 10), np.random.default_rng([5, 5]))
        b = gen_sudoku(4, (6, 10), np.random.default_rng([5, 5]))
        assert a.instance_id == b.instance_id
        assert np.array_equal(a.x_tokens, b.x_tokens)
        assert a.solve_order == b.solve_order


class TestMaze:
    def test_structure_and_path(self):
        for s in range(15):
            inst = gen_maze(9, 9, np.random.default_rng(s))
            g = inst.x_grid()
            assert g[1, 1] == VOCAB.start and g[7, 7] == VOCAB.goal
            assert (g[0, :] == VOCAB.wall).all() and (g[:, 0] == VOCAB.wall).all()
            path = solve_maze(g)
            assert path[0] == (1, 1) and path[-1] == (7, 7)
            for (r0, c0), (r1, c1) in zip(path, path[1:]):
                assert abs(r0 - r1) + abs(c0 - c1) == 1
                assert g[r1, c1] != VOCAB.wall
            marked = {tuple(rc) for rc in np.argwhere(inst.y_grid() == VOCAB.path)}
            assert marked == set(path[1:-1])

    def test_maze_is_tree(self):
        # open cells == walls carved + 1 is the spanning tree edge count
        inst = gen_maze(9, 9, np.random.default_rng(3))
        g = inst.x_grid()
        open_cells = int((g != VOCAB.wall).sum())
        odd_cells = 16  # 4x4 lattice of candidate cells in a 9x9 maze
        corridors = open_cells - odd_cells
        assert corridors == odd_cells - 1

    def test_solve_on_label_grid_returns_marked_path(self):
        inst = gen_maze(9, 9, np.random.default_rng(11))
        path = solve_maze(inst.y_grid())
        marked = {tuple(rc) for rc in np.argwhere(inst.y_grid() == VOCAB.path)}
        assert set(path[1:-1]) == marked

    def test_even_or_small_dims_raise(self):
        for dims in ((8, 9), (9, 8), (3, 9), (9, 3)):
            with pytest.raises(ConfigError):
                gen_maze(*dims, np.random.default_rng(0))

    def test_no_path_raises(self):
        g = np.full((5, 5), VOCAB.wall, dtype=np.int32)
        g[1, 1] = VOCAB.start
        g[3, 3] = VOCAB.goal
        with pytest.raises(ConfigError):
            solve_maze(g)


class TestDihedral:
    def test_hand_example(self):
        out = dihedral_transform(np.array([[1, 2], [3, 4]]), 1)
        assert out.tolist() == [[3, 1], [4, 2]]

    def test_identity_and_distinct_elements(self):
        g = np.arange(9).reshape(3, 3)
        images = [dihedral_transform(g, e).tobytes() for e in range(8)]
        assert images[0] == g.tobytes()
        assert len(set(images)) == 8

    def test_every_element_has_an_inverse(self):
        g = np.arange(9).reshape(3, 3)
        for e in range(8):
            once = dihedral_transform(g, e)
            inverses = [f for f in range(8)
                        if np.array_equal(dihedral_transform(once, f), g)]
            assert len(inverses) == 1

    def test_closure(self):
        g = np.arange(9).reshape(3, 3)
        images = {dihedral_transform(g, e).tobytes() for e in range(8)}
        for e in range(8):
            for f in range(8):
                twice = dihedral_transform(dihedral_transform(g, e), f)
                assert twice.tobytes() in images

    def test_rejects_bad_input(self):
        with pytest.raises(ConfigError):
            dihedral_transform(np.zeros((2, 3)), 1)
        with pytest.raises(ConfigError):
            dihedral_transform(np.zeros((3, 3)), 8)

    def test_instance_transform_keeps_canonical_key(self):
        inst = gen_sudoku(4, (6, 10), np.random.default_rng(2))
        for e in range(8):
            assert canonical_key(dihedral_instance(inst, e)) == canonical_key(inst)


class TestTrajectory:
    def test_prefix_application(self):
        inst = gen_sudoku(4, (6, 10), np.random.default_rng(4))
        out = trajectory_sample(inst, np.random.default_rng(0))
        diff = np.flatnonzero(out.x_tokens != inst.x_tokens)
        u = len(inst.solve_order) - len(out.solve_order)
        assert sorted(diff.tolist()) == sorted(c for c, _ in inst.solve_order[:u])
        assert np.array_equal(out.y_true_tokens, inst.y_true_tokens)

    def test_prefix_length_uniform(self):
        inst = gen_sudoku(4, (8, 8), np.random.default_rng(6))
        n = len(inst.solve_order)
        rng = np.random.default_rng(123)
        counts = np.zeros(n + 1, dtype=int)
        draws = 2000 * (n + 1)
        for _ in range(draws):
            out = trajectory_sample(inst, rng)
            counts[n - len(out.solve_order)] += 1
        # each prefix length within 4 sigma of the uniform expectation
        expect = draws / (n + 1)
        sigma = (draws * (1 / (n + 1)) * (1 - 1 / (n + 1))) ** 0.5
        assert (np.abs(counts - expect) < 4 * sigma).all()

    def test_full_prefix_equals_solution(self):
        inst = gen_sudoku(4, (6, 10), np.random.default_rng(8))
        # force the full prefix by replaying until the sample drains the order
        rng = np.random.default_rng(1)
        for _ in range(200):
            out = trajectory_sample(inst, rng)
            if not out.solve_order:
                assert np.array_equal(out.x_tokens, inst.y_true_tokens)
                return
        pytest.fail("never drew the full prefix")


class TestDatasetBuild:
    SPEC = DatasetSpec(sudoku4=30, maze=8, val_size=6, golden_size=4,
                       augment=3, seed=21)

    def test_split_sizes_and_padding(self):
        train, val, golden, manifest = build_dataset(self.SPEC)
        assert manifest["split_sizes"] == {"train": len(train), "val": len(val),
                                           "golden": len(golden)}
        assert len(val) == 6 and len(golden) == 4
        assert len(train) == (30 + 8 - 10) * 3
        L = manifest["seq_len"]
        for inst in train + val + golden:
            assert inst.x_tokens.shape == (L,) and inst.y_true_tokens.shape == (L,)
            body = inst.rows * inst.cols
            assert (inst.x_tokens[body:] == VOCAB.pad).all()
            assert (inst.x_tokens[:body] != VOCAB.pad).all()

    def test_deterministic_bytes(self, tmp_path):
        blobs = []
        for _ in range(2):
            train, val, golden, manifest = build_dataset(self.SPEC)
            p = tmp_path / "train.jsonl"
            save_instances(p, train)
            blobs.append(p.read_bytes() + json.dumps(manifest).encode())
        assert blobs[0] == blobs[1]

    def test_splits_disjoint_by_id_and_content(self):
        train, val, golden, _ = build_dataset(self.SPEC)
        ids = [{i.instance_id for i in s} for s in (train, val, golden)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        held = {canonical_key(i) for i in val + golden}
        assert not any(canonical_key(i) in held for i in train)

    def test_first_train_copy_unaugmented(self):
        train, _, _, _ = build_dataset(self.SPEC)
        aug = re.compile(r"-a\d+$")
        for inst in train[0::3]:
            assert not aug.search(inst.instance_id)
        for inst in train[1::3] + train[2::3]:
            assert aug.search(inst.instance_id)

    def test_val_and_golden_never_augmented(self):
        _, val, golden, _ = build_dataset(self.SPEC)
        raw = re.compile(r"^(sudoku4|sudoku6|maze)-[0-9a-f]{12}$")
        for inst in val + golden:
            assert raw.match(inst.instance_id)

    def test_augmented_labels_stay_solvable(self):
        train, _, _, _ = build_dataset(self.SPEC)
        for inst in train:
            if inst.puzzle_type != "sudoku4":
                continue
            grid = inst.y_grid()
            digits = grid - VOCAB.digit_base + 1
            assert sudoku_grid_valid(digits, 2, 2)

    def test_bad_specs_raise(self):
        with pytest.raises(ConfigError):
            build_dataset(DatasetSpec(sudoku4=4, val_size=3, golden_size=2))
        with pytest.raises(ConfigError):
            build_dataset(DatasetSpec())
        with pytest.raises(ConfigError):
            DatasetSpec(sudoku4=10, augment=0).validate()

    def test_jsonl_roundtrip(self, tmp_path):
        train, _, _, _ = build_dataset(self.SPEC)
        p = tmp_path / "x.jsonl"
        save_instances(p, train[:10])
        back = load_instances(p)
        for a, b in zip(train[:10], back):
            assert a.instance_id == b.instance_id
            assert a.puzzle_type == b.puzzle_type
            assert np.array_equal(a.x_tokens, b.x_tokens)
            assert np.array_equal(a.y_true_tokens, b.y_true_tokens)
            assert [tuple(p_) for p_ in a.solve_order] == b.solve_order

    def test_spec_dict_roundtrip(self):
        d = self.SPEC.to_dict()
        assert DatasetSpec.from_dict(d) == self.SPEC


class TestVocab:
    def test_distinct_token_ids(self):
        v = VOCAB.to_dict()
        ids = [v[k] for k in ("pad", "blank", "wall", "open", "start", "goal", "path")]
        ids += [VOCAB.digit_token(d) for d in range(1, 7)]
        assert len(set(ids)) == len(ids)
        assert max(ids) == VOCAB.size - 1

    def test_digit_roundtrip(self):
        for d in range(1, 7):
            assert VOCAB.token_digit(VOCAB.digit_token(d)) == d
