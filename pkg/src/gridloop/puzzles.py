"""Puzzle generation, exhaustive solving, augmentation, and dataset files.

All puzzle families share one merged token vocabulary so a single checkpoint
can be evaluated on mixed datasets. Instances carry flat int32 token arrays
plus their grid geometry; the dataset build pads every split to a uniform
length with the PAD token.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

GENERATOR_VERSION = 1


@dataclass(frozen=True)
class VocabSpec:
    """Merged token vocabulary: PAD, BLANK, Sudoku digits, maze symbols."""
    pad: int = 0
    blank: int = 1
    digit_base: int = 2    # digit d (1-based) -> digit_base + d - 1
    max_digit: int = 6
    wall: int = 8
    open: int = 9
    start: int = 10
    goal: int = 11
    path: int = 12
    size: int = 13

    def digit_token(self, d: int) -> int:
        return self.digit_base + d - 1

    def token_digit(self, t: int) -> int:
        return t - self.digit_base + 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


VOCAB = VocabSpec()


@dataclass
class PuzzleInstance:
    puzzle_type: str            # sudoku4 | sudoku6 | maze
    rows: int
    cols: int
    x_tokens: np.ndarray        # int32, flat, possibly PAD-padded past rows*cols
    y_true_tokens: np.ndarray
    instance_id: str
    solve_order: list = field(default_factory=list)  # [(cell, token), ...]

    def x_grid(self) -> np.ndarray:
        return np.asarray(self.x_tokens[: self.rows * self.cols]).reshape(self.rows, self.cols)

    def y_grid(self) -> np.ndarray:
        return np.asarray(self.y_true_tokens[: self.rows * self.cols]).reshape(self.rows, self.cols)


def _content_id(kind: str, x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=6)
    h.update(kind.encode())
    h.update(np.asarray(x, dtype=np.int32).tobytes())
    h.update(np.asarray(y, dtype=np.int32).tobytes())
    return f"{kind}-{h.hexdigest()}"


# ---------------------------------------------------------------------------
# Sudoku


def _check_sudoku_grid(grid: np.ndarray, box_rows: int, box_cols: int) -> np.ndarray:
    k = box_rows * box_cols
    g = np.asarray(grid)
    if g.shape != (k, k):
        raise ConfigError(f"sudoku grid must be {k}x{k}, got {g.shape}")
    if g.min() < 0 or g.max() > k:
        raise ConfigError(f"sudoku cell values must lie in 0..{k}")
    return g.astype(np.int64)


def solve_sudoku(grid, box_rows: int, box_cols: int, limit: int = 2) -> list:
    """Exhaustive backtracking solver; returns up to ``limit`` solutions in a
    deterministic order (row-major first empty cell, ascending digit)."""
    g = _check_sudoku_grid(grid, box_rows, box_cols)
    k = box_rows * box_cols
    row_used = [0] * k
    col_used = [0] * k
    box_used = [0] * k

    def box_of(r, c):
        return (r // box_rows) * box_rows + (c // box_cols)

    for r in range(k):
        for c in range(k):
            d = g[r, c]
            if d == 0:
                continue
            bit = 1 << int(d)
            b = box_of(r, c)
            if (row_used[r] | col_used[c] | box_used[b]) & bit:
                return []  # a given already violates a constraint
            row_used[r] |= bit
            col_used[c] |= bit
            box_used[b] |= bit

    empties = [(r, c) for r in range(k) for c in range(k) if g[r, c] == 0]
    solutions: list = []

    def dfs(i: int) -> bool:
        if i == len(empties):
            solutions.append(g.copy())
            return len(solutions) >= limit
        r, c = empties[i]
        b = box_of(r, c)
        used = row_used[r] | col_used[c] | box_used[b]
        for d in range(1, k + 1):
            bit = 1 << d
            if used & bit:
                continue
            g[r, c] = d
            row_used[r] |= bit
            col_used[c] |= bit
            box_used[b] |= bit
            done = dfs(i + 1)
            g[r, c] = 0
            row_used[r] ^= bit
            col_used[c] ^= bit
            box_used[b] ^= bit
            if done:
                return True
        return False

    dfs(0)
    return solutions


def _fill_grid(k: int, box_rows: int, box_cols: int, rng) -> np.ndarray:
    """A random complete grid: the deterministic solver with rng-shuffled
    digit order per cell."""
    g = np.zeros((k, k), dtype=np.int64)
    row_used = [0] * k
    col_used = [0] * k
    box_used = [0] * k

    def dfs(i: int) -> bool:
        if i == k * k:
            return True
        r, c = divmod(i, k)
        b = (r // box_rows) * box_rows + (c // box_cols)
        used = row_used[r] | col_used[c] | box_used[b]
        for d in rng.permutation(k) + 1:
            bit = 1 << int(d)
            if used & bit:
                continue
            g[r, c] = d
            row_used[r] |= bit
            col_used[c] |= bit
            box_used[b] |= bit
            if dfs(i + 1):
                return True
            g[r, c] = 0
            row_used[r] ^= bit
            col_used[c] ^= bit
            box_used[b] ^= bit
        return False

    dfs(0)
    return g


def _sudoku_tokens(grid: np.ndarray) -> np.ndarray:
    flat = grid.reshape(-1)
    out = np.where(flat == 0, VOCAB.blank, VOCAB.digit_base + flat - 1)
    return out.astype(np.int32)


def sudoku_solve_order(puzzle_grid: np.ndarray) -> list:
    """Assignment order of the deterministic solver: its surviving
    assignments are exactly the empty cells in row-major order with their
    solution digits."""
    k = puzzle_grid.shape[0]
    box_rows, box_cols = (2, 2) if k == 4 else (2, 3)
    sols = solve_sudoku(puzzle_grid, box_rows, box_cols, limit=1)
    if not sols:
        raise ConfigError("puzzle has no solution")
    sol = sols[0]
    flat_puzzle = puzzle_grid.reshape(-1)
    flat_sol = sol.reshape(-1)
    return [(int(i), int(VOCAB.digit_token(flat_sol[i])))
            for i in range(k * k) if flat_puzzle[i] == 0]


def gen_sudoku(size: int, givens_range: tuple, rng) -> PuzzleInstance:
    """One uniquely solvable Sudoku with a givens count inside the range."""
    if size not in (4, 6):
        raise ConfigError("sudoku size must be 4 or 6")
    box_rows, box_cols = (2, 2) if size == 4 else (2, 3)
    lo, hi = int(givens_range[0]), int(givens_range[1])
    if not (0 <= lo <= hi <= size * size):
        raise ConfigError(f"givens range {givens_range} infeasible for size {size}")

    for _ in range(64):
        full = _fill_grid(size, box_rows, box_cols, rng)
        grid = full.copy()
        givens = size * size
        for pos in rng.permutation(size * size):
            if givens <= lo:
                break
            r, c = divmod(int(pos), size)
            keep = grid[r, c]
            grid[r, c] = 0
            if len(solve_sudoku(grid, box_rows, box_cols, limit=2)) == 1:
                givens -= 1
            else:
                grid[r, c] = keep
        if lo <= givens <= hi:
            kind = f"sudoku{size}"
            x = _sudoku_tokens(grid)
            y = _sudoku_tokens(full)
            return PuzzleInstance(kind, size, size, x, y,
                                  _content_id(kind, x, y),
                                  sudoku_solve_order(grid))
    raise ConfigError(f"could not reach givens range {givens_range} for size {size}")


# ---------------------------------------------------------------------------
# Mazes


def gen_maze(rows: int, cols: int, rng) -> PuzzleInstance:
    """A perfect maze (spanning tree of the cell lattice) via randomized
    depth-first carving; start top-left cell, goal bottom-right cell."""
    if rows % 2 == 0 or cols % 2 == 0 or rows < 5 or cols < 5:
        raise ConfigError("maze dims must be odd and >= 5")
    grid = np.full((rows, cols), VOCAB.wall, dtype=np.int32)
    start, goal = (1, 1), (rows - 2, cols - 2)
    assert start != goal  # dims >= 5 guarantee a non-degenerate pair
    grid[start] = VOCAB.open
    stack = [start]
    while stack:
        r, c = stack[-1]
        candidates = []
        for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2)):
            nr, nc = r + dr, c + dc
            if 0 < nr < rows and 0 < nc < cols and grid[nr, nc] == VOCAB.wall:
                candidates.append((nr, nc))
        if not candidates:
            stack.pop()
            continue
        nr, nc = candidates[int(rng.integers(len(candidates)))]
        grid[(r + nr) // 2, (c + nc) // 2] = VOCAB.open
        grid[nr, nc] = VOCAB.open
        stack.append((nr, nc))

    x_grid = grid.copy()
    x_grid[start] = VOCAB.start
    x_grid[goal] = VOCAB.goal
    path = solve_maze(x_grid)
    y_grid = x_grid.copy()
    for (r, c) in path[1:-1]:
        y_grid[r, c] = VOCAB.path
    x = x_grid.reshape(-1)
    y = y_grid.reshape(-1)
    order = [(int(r * cols + c), int(VOCAB.path)) for (r, c) in path[1:-1]]
    return PuzzleInstance("maze", rows, cols, x, y,
                          _content_id("maze", x, y), order)


def solve_maze(grid) -> list:
    """Breadth-first shortest path from start to goal; unique because the
    maze is a tree. Returns the cell list including both endpoints."""
    g = np.asarray(grid)
    starts = np.argwhere(g == VOCAB.start)
    goals = np.argwhere(g == VOCAB.goal)
    if len(starts) != 1 or len(goals) != 1:
        raise ConfigError("maze must contain exactly one start and one goal")
    start, goal = tuple(starts[0]), tuple(goals[0])
    prev = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            break
        r, c = cell
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (r + dr, c + dc)
            if (0 <= nxt[0] < g.shape[0] and 0 <= nxt[1] < g.shape[1]
                    and g[nxt] != VOCAB.wall and nxt not in prev):
                prev[nxt] = cell
                queue.append(nxt)
    if goal not in prev:
        raise ConfigError("maze has no start-goal path")
    path = []
    cell = goal
    while cell is not None:
        path.append(cell)
        cell = prev[cell]
    return path[::-1]


# ---------------------------------------------------------------------------
# Augmentation


def dihedral_transform(grid, element: int):
    """One of the 8 square symmetries: rotate clockwise by 90*(element mod 4)
    degrees, then reflect horizontally iff element >= 4."""
    g = np.asarray(grid)
    if g.shape[0] != g.shape[1]:
        raise ConfigError("dihedral transform needs a square grid")
    if not 0 <= int(element) <= 7:
        raise ConfigError("dihedral element must be in 0..7")
    out = np.rot90(g, k=-(element % 4))
    if element >= 4:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def trajectory_sample(instance: PuzzleInstance, rng) -> PuzzleInstance:
    """Replace x with the state after a uniformly random prefix of the solve
    order; the label stays the fully solved grid."""
    order = instance.solve_order
    u = int(rng.integers(0, len(order) + 1))
    x = np.array(instance.x_tokens, dtype=np.int32)
    for cell, token in order[:u]:
        x[cell] = token
    return PuzzleInstance(instance.puzzle_type, instance.rows, instance.cols,
                          x, np.array(instance.y_true_tokens, dtype=np.int32),
                          instance.instance_id + f"-t{u}",
                          [list(p) for p in order[u:]])


def dihedral_instance(instance: PuzzleInstance, element: int) -> PuzzleInstance:
    x = dihedral_transform(instance.x_grid(), element).reshape(-1)
    y = dihedral_transform(instance.y_grid(), element).reshape(-1)
    return PuzzleInstance(instance.puzzle_type, instance.rows, instance.cols,
                          x.astype(np.int32), y.astype(np.int32),
                          instance.instance_id + f"-d{element}", [])


def canonical_key(instance: PuzzleInstance) -> bytes:
    """Content key invariant under the 8 square symmetries, so a transformed
    copy can never slip past duplicate detection."""
    xg, yg = instance.x_grid(), instance.y_grid()
    if xg.shape[0] != xg.shape[1]:
        return xg.tobytes() + yg.tobytes()
    return min(dihedral_transform(xg, e).tobytes() + dihedral_transform(yg, e).tobytes()
               for e in range(8))


# ---------------------------------------------------------------------------
# Dataset build and files


@dataclass(frozen=True)
class DatasetSpec:
    """Raw instance counts per type plus split sizes and augmentation."""
    sudoku4: int = 0
    sudoku6: int = 0
    maze: int = 0
    val_size: int = 0
    golden_size: int = 0
    augment: int = 1
    seed: int = 0
    sudoku4_givens: tuple = (6, 10)
    sudoku6_givens: tuple = (14, 22)
    # 7x7 carving only reaches 7 distinct mazes after dedup, far too few
    maze_dims: tuple = (9, 9)

    def validate(self):
        total = self.sudoku4 + self.sudoku6 + self.maze
        if total < 1:
            raise ConfigError("dataset needs at least one instance")
        if self.val_size + self.golden_size >= total:
            raise ConfigError("counts must exceed val_size + golden_size")
        if self.augment < 1:
            raise ConfigError("augment factor must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("sudoku4_givens", "sudoku6_givens", "maze_dims"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("sudoku4_givens", "sudoku6_givens", "maze_dims"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known).validate()


_TYPE_CODES = {"sudoku4": 1, "sudoku6": 2, "maze": 3}


def _generate_one(kind: str, spec: DatasetSpec, index: int, attempt: int) -> PuzzleInstance:
    rng = np.random.default_rng([spec.seed, _TYPE_CODES[kind], index, attempt])
    if kind == "sudoku4":
        return gen_sudoku(4, spec.sudoku4_givens, rng)
    if kind == "sudoku6":
        return gen_sudoku(6, spec.sudoku6_givens, rng)
    return gen_maze(spec.maze_dims[0], spec.maze_dims[1], rng)


def build_dataset(spec: DatasetSpec):
    """Generate, dedup, split, augment, and pad. Returns (train, val, golden,
    manifest). Deterministic in spec.seed, independent of generation order."""
    spec.validate()
    pool: list = []
    seen: set = set()
    for kind in ("sudoku4", "sudoku6", "maze"):
        for i in range(getattr(spec, kind)):
            for attempt in range(200):
                inst = _generate_one(kind, spec, i, attempt)
                key = canonical_key(inst)
                if key not in seen:
                    seen.add(key)
                    pool.append(inst)
                    break
            else:
                raise ConfigError(f"could not generate a fresh {kind} instance")

    perm = np.random.default_rng([spec.seed, 999]).permutation(len(pool))
    golden = [pool[i] for i in perm[: spec.golden_size]]
    val = [pool[i] for i in perm[spec.golden_size: spec.golden_size + spec.val_size]]
    raw_train = [pool[i] for i in perm[spec.golden_size + spec.val_size:]]

    train: list = []
    for idx, inst in enumerate(raw_train):
        train.append(inst)  # first copy unaugmented
        for copy in range(1, spec.augment):
            rng = np.random.default_rng([spec.seed, 7777, idx, copy])
            aug = trajectory_sample(inst, rng)
            if inst.rows == inst.cols:
                aug = dihedral_instance(aug, int(rng.integers(8)))
            aug.instance_id = f"{inst.instance_id}-a{copy}"
            train.append(aug)

    seq_len = max(i.rows * i.cols for i in pool)
    for split in (train, val, golden):
        for inst in split:
            inst.x_tokens = _pad_tokens(inst.x_tokens, seq_len)
            inst.y_true_tokens = _pad_tokens(inst.y_true_tokens, seq_len)

    manifest = {
        "format_version": 1,
        "generator_version": GENERATOR_VERSION,
        "vocab": VOCAB.to_dict(),
        "seq_len": seq_len,
        "spec": spec.to_dict(),
        "split_sizes": {"train": len(train), "val": len(val), "golden": len(golden)},
    }
    return train, val, golden, manifest


def _pad_tokens(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    out = np.full(seq_len, VOCAB.pad, dtype=np.int32)
    out[: len(tokens)] = tokens
    return out


def save_instances(path, instances):
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps({
                "id": inst.instance_id, "type": inst.puzzle_type,
                "rows": inst.rows, "cols": inst.cols,
                "x": np.asarray(inst.x_tokens).tolist(),
                "y": np.asarray(inst.y_true_tokens).tolist(),
                "solve_order": [list(p) for p in inst.solve_order],
            }) + "\n")


def load_instances(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            out.append(PuzzleInstance(
                d["type"], d["rows"], d["cols"],
                np.array(d["x"], dtype=np.int32),
                np.array(d["y"], dtype=np.int32),
                d["id"], [tuple(p) for p in d["solve_order"]]))
    return out
