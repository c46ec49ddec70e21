"""Scaling metrics, trajectory aggregation, per-puzzle PCA, and cost math.

Everything here is a pure function of its inputs; nothing reads clocks or
global state, so identical inputs give identical outputs bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .inference import InferenceConfig, evaluate_instances, exact_match
from .training import PAD_ID


def cell_accuracy(pred, truth, pad_id: int = PAD_ID) -> float:
    """Fraction of non-pad cells predicted correctly; all-pad counts as 1.0."""
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape:
        raise ConfigError("pred and truth must have equal lengths")
    live = t != pad_id
    if not live.any():
        return 1.0
    return float((p[live] == t[live]).mean())


def _answer_hash(tokens: np.ndarray) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(tokens, dtype=np.int32).tobytes(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class CorrectnessMatrix:
    """Per-puzzle, per-rollout outcome grid plus what mode@K needs: the
    answer identity as a hash, with the actual sequences kept around so a
    hash collision can be confirmed against full tokens."""
    correct: np.ndarray         # [P, K] bool
    q: np.ndarray               # [P, K] float64
    answer_hashes: np.ndarray   # [P, K] uint64
    answers: np.ndarray         # [P, K, L] int32

    def __post_init__(self):
        if not (self.correct.shape == self.q.shape == self.answer_hashes.shape
                == self.answers.shape[:2]):
            raise ConfigError("correctness matrix fields must share [P, K]")

    @property
    def num_puzzles(self) -> int:
        return self.correct.shape[0]

    @property
    def num_rollouts(self) -> int:
        return self.correct.shape[1]


def build_correctness_matrix(record_sets, truths) -> CorrectnessMatrix:
    """From per-instance rollout records (equal K) and matching truths."""
    if len(record_sets) != len(truths) or not record_sets:
        raise ConfigError("need one truth per instance, at least one instance")
    P, K = len(record_sets), len(record_sets[0])
    L = len(record_sets[0][0].answer)
    correct = np.zeros((P, K), dtype=bool)
    q = np.zeros((P, K), dtype=np.float64)
    hashes = np.zeros((P, K), dtype=np.uint64)
    answers = np.zeros((P, K, L), dtype=np.int32)
    for p, (records, truth) in enumerate(zip(record_sets, truths)):
        if len(records) != K:
            raise ConfigError("all instances must carry the same rollout count")
        for k, r in enumerate(records):
            correct[p, k] = exact_match(r.answer, truth)
            q[p, k] = r.q
            hashes[p, k] = _answer_hash(r.answer)
            answers[p, k] = r.answer
    return CorrectnessMatrix(correct, q, hashes, answers)


def _check_prefix(matrix: CorrectnessMatrix, k_prefix: int):
    if not 1 <= k_prefix <= matrix.num_rollouts:
        raise ConfigError(f"prefix {k_prefix} outside 1..{matrix.num_rollouts}")


def pass_at_k(matrix: CorrectnessMatrix, k_prefix: int) -> float:
    """Any of the first K' rollouts correct, averaged over puzzles."""
    _check_prefix(matrix, k_prefix)
    return float(matrix.correct[:, :k_prefix].any(axis=1).mean())


def best_q_at_k(matrix: CorrectnessMatrix, k_prefix: int) -> float:
    """Correctness of the argmax-q rollout among the first K' (ties: lowest k)."""
    _check_prefix(matrix, k_prefix)
    idx = np.argmax(matrix.q[:, :k_prefix], axis=1)
    return float(matrix.correct[np.arange(matrix.num_puzzles), idx].mean())


def mode_at_k(matrix: CorrectnessMatrix, k_prefix: int) -> float:
    """Correctness of the most frequent answer among the first K' rollouts;
    ties broken by the lexicographically smallest token sequence."""
    _check_prefix(matrix, k_prefix)
    total = 0.0
    for p in range(matrix.num_puzzles):
        groups: dict = {}
        for k in range(k_prefix):
            h = int(matrix.answer_hashes[p, k])
            bucket = groups.setdefault(h, [])
            tokens = matrix.answers[p, k]
            for entry in bucket:
                if np.array_equal(entry["tokens"], tokens):
                    entry["count"] += 1
                    break
            else:
                # distinct sequence (new, or a confirmed hash collision)
                bucket.append({"tokens": tokens, "count": 1,
                               "correct": bool(matrix.correct[p, k])})
        entries = [e for bucket in groups.values() for e in bucket]
        top = max(e["count"] for e in entries)
        winner = min((e for e in entries if e["count"] == top),
                     key=lambda e: tuple(e["tokens"].tolist()))
        total += winner["correct"]
    return total / matrix.num_puzzles


# ---------------------------------------------------------------------------
# Trajectory aggregation


@dataclass
class TrajectoryLog:
    """One rollout's per-step history plus its final outcome."""
    q: np.ndarray               # [D]
    cell_acc: np.ndarray        # [D]
    final_correct: bool
    latents: list = field(default_factory=list)   # optional [L,H] snapshots

    def __post_init__(self):
        if len(self.q) != len(self.cell_acc):
            raise ConfigError("trajectory series must have equal lengths")


def trajectory_log_from_record(record, y_true) -> TrajectoryLog:
    if not record.trace:
        raise ConfigError("record carries no trace; run with tracing enabled")
    return TrajectoryLog(
        q=np.array([s.q for s in record.trace], dtype=np.float64),
        cell_acc=np.array([s.cell_accuracy for s in record.trace], dtype=np.float64),
        final_correct=exact_match(record.answer, y_true),
        latents=[s.y_latent for s in record.trace])


def aggregate_trajectories(logs) -> dict:
    """Mean per-step q and cell accuracy, split by final correctness.
    Groups with no members are omitted."""
    if not logs:
        raise ConfigError("need at least one trajectory log")
    depth = len(logs[0].q)
    if any(len(g.q) != depth for g in logs):
        raise ConfigError("trajectory logs must share the same depth")
    out = {}
    for name, flag in (("correct", True), ("incorrect", False)):
        group = [g for g in logs if g.final_correct == flag]
        if not group:
            continue
        out[name] = {
            "count": len(group),
            "mean_q": np.mean([g.q for g in group], axis=0),
            "mean_cell_accuracy": np.mean([g.cell_acc for g in group], axis=0),
        }
    return out


# ---------------------------------------------------------------------------
# Per-puzzle PCA


@dataclass
class PcaPlane:
    mean: np.ndarray            # [F]
    directions: np.ndarray      # [2, F], orthonormal rows
    variances: np.ndarray       # [2], descending


def _power_iterate(apply_cov, dim: int, iters: int = 50, tol: float = 1e-9):
    """Leading eigenpair of a symmetric PSD operator given matrix-free."""
    rng = np.random.default_rng(0)
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply_cov(v)
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return np.zeros(dim), 0.0
        v_next = w / norm
        if np.linalg.norm(apply_cov(v_next) - lam * v_next) <= tol * max(lam, 1.0):
            v = v_next
            break
        v = v_next
    lam = float(v @ apply_cov(v))
    return v, max(lam, 0.0)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    for x in v:
        if abs(x) > 1e-12:
            return v if x > 0 else -v
    return v


def _fallback_direction(dim: int, avoid: np.ndarray | None) -> np.ndarray:
    """A deterministic unit vector, orthogonalized against ``avoid``."""
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        if avoid is not None:
            e = e - (e @ avoid) * avoid
        n = np.linalg.norm(e)
        if n > 1e-8:
            return e / n
    raise ConfigError("cannot build a fallback direction")


def pca_project(latents) -> tuple:
    """Top-2 principal plane of a latent cloud via deterministic power
    iteration with deflation. Returns (PcaPlane, [N,2] coordinates)."""
    X = np.array([np.asarray(v, dtype=np.float64).reshape(-1) for v in latents])
    if X.shape[0] < 3:
        raise ConfigError("pca needs at least 3 latents")
    n, dim = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean

    def cov_apply(v):
        return Xc.T @ (Xc @ v) / n

    v1, lam1 = _power_iterate(cov_apply, dim)
    if lam1 <= 0.0 or not np.any(np.abs(v1) > 0):
        d1 = _fallback_direction(dim, None)
        d2 = _fallback_direction(dim, d1)
        plane = PcaPlane(mean, np.vstack([_fix_sign(d1), _fix_sign(d2)]),
                         np.zeros(2))
        return plane, np.zeros((n, 2))

    Xd = Xc - np.outer(Xc @ v1, v1)        # deflate the first direction

    def cov_apply2(v):
        w = Xd.T @ (Xd @ v) / n
        return w - (w @ v1) * v1           # keep the iterate off v1

    v2, lam2 = _power_iterate(cov_apply2, dim)
    if lam2 <= 0.0 or np.linalg.norm(v2) < 0.5:
        v2 = _fallback_direction(dim, v1)
        lam2 = 0.0
    else:
        v2 = v2 - (v2 @ v1) * v1
        v2 /= np.linalg.norm(v2)

    d1, d2 = _fix_sign(v1), _fix_sign(v2)
    plane = PcaPlane(mean, np.vstack([d1, d2]),
                     np.array([lam1, lam2], dtype=np.float64))
    coords = np.stack([Xc @ d1, Xc @ d2], axis=1)
    return plane, coords


# ---------------------------------------------------------------------------
# Sigma sweep


def sigma_sweep(params, eval_set, num_rollouts: int, depth: int,
                sigmas, seeds, workers: int = 1) -> tuple:
    """All three metrics at full K for each (sigma, seed). Returns
    (per-run rows, per-sigma summary rows)."""
    if not sigmas or not seeds:
        raise ConfigError("sigma sweep needs at least one sigma and one seed")
    truths = [np.asarray(i.y_true_tokens) for i in eval_set]
    rows = []
    for sigma in sigmas:
        for seed in seeds:
            cfg = InferenceConfig(num_rollouts=num_rollouts, depth=depth,
                                  noise_sigma=float(sigma))
            record_sets = evaluate_instances(params, eval_set, cfg,
                                             run_seed=int(seed), workers=workers)
            matrix = build_correctness_matrix(record_sets, truths)
            rows.append({
                "sigma": float(sigma), "seed": int(seed),
                "pass_at_k": pass_at_k(matrix, num_rollouts),
                "best_q_at_k": best_q_at_k(matrix, num_rollouts),
                "mode_at_k": mode_at_k(matrix, num_rollouts),
            })
    summary = []
    for sigma in sigmas:
        group = [r for r in rows if r["sigma"] == float(sigma)]
        entry = {"sigma": float(sigma), "seeds": len(group)}
        for m in ("pass_at_k", "best_q_at_k", "mode_at_k"):
            vals = np.array([r[m] for r in group])
            entry[f"{m}_mean"] = float(vals.mean())
            entry[f"{m}_spread"] = float(vals.std())
        summary.append(entry)
    return rows, summary


def cost_estimate(t_puzzle_seconds: float, hourly_rate: float = 2.50) -> float:
    """Dollar cost of one puzzle attempt at an hourly compute rate."""
    if t_puzzle_seconds < 0 or hourly_rate < 0:
        raise ConfigError("cost inputs must be non-negative")
    return hourly_rate * (t_puzzle_seconds / 3600.0)


# ---------------------------------------------------------------------------
# File outputs


def write_sweep_csv(rows, path):
    cols = ["sigma", "seed", "pass_at_k", "best_q_at_k", "mode_at_k"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(row[c]) if isinstance(row[c], float)
                             else row[c] for c in cols})


def write_trajectory_csv(curves: dict, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "group", "mean_q", "mean_cell_accuracy"])
        for group in sorted(curves):
            series = curves[group]
            for t, (mq, ma) in enumerate(zip(series["mean_q"],
                                             series["mean_cell_accuracy"]),
                                         start=1):
                writer.writerow([t, group, repr(float(mq)), repr(float(ma))])


def build_id(config_echo: dict) -> str:
    """Short content id for an experiment: a hash of its effective config."""
    blob = json.dumps(config_echo, sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=6).hexdigest()


def experiment_summary(config_echo: dict, results: dict) -> dict:
    return {"build_id": build_id(config_echo), "config": config_echo,
            "results": results}
