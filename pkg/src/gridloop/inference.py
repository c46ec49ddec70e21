"""Deterministic inference, stochastic K-wide rollouts, and selection rules.

All randomness is keyed by (master_seed, rollout index, step), so any single
rollout can be reproduced in isolation and results never depend on execution
order, batching, or worker count. The K rollouts of one puzzle are stacked
into a [K, L, H] batch; on this BLAS the stacked matmuls are bitwise equal to
per-rollout execution, and the test suite pins that equivalence.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .errors import ConfigError
from .model import (
    Carry,
    ModelParams,
    decode_answer,
    deep_recursion,
    embed_tokens,
    output_logits,
    q_logit,
    zero_carry,
)
from .tensors import Tensor
from .training import PAD_ID

SELECTORS = ("best-q", "mode", "oracle")


@dataclass(frozen=True)
class InferenceConfig:
    num_rollouts: int = 1
    depth: int = 6              # deep recursions per rollout
    noise_sigma: float = 0.0
    selector: str = "best-q"
    master_seed: int = 0
    trace_enabled: bool = False

    def validate(self) -> "InferenceConfig":
        if self.num_rollouts < 1:
            raise ConfigError("num_rollouts must be >= 1")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float = 0.0      # eta
    steps: int = 0              # updates per deep recursion
    gradient_enabled: bool = True

    def validate(self) -> "LangevinConfig":
        if self.step_size < 0 or self.steps < 0:
            raise ConfigError("langevin step_size and steps must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "LangevinConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


@dataclass
class TraceStep:
    step: int
    q: float
    cell_accuracy: float | None
    y_latent: np.ndarray        # [L, H] float32 snapshot


@dataclass
class RolloutRecord:
    k: int
    answer: np.ndarray          # [L] int32
    q: float
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Seeding


def rollout_rng(master_seed: int, k: int, step: int, purpose: str = "noise"):
    """Counter-based generator keyed by rollout coordinates, not draw order."""
    h = hashlib.blake2b(f"{master_seed}|{k}|{step}|{purpose}".encode(),
                        digest_size=16)
    return np.random.Generator(
        np.random.Philox(int.from_bytes(h.digest(), "little")))


def instance_master_seed(run_seed: int, instance_id: str) -> int:
    h = hashlib.blake2b(f"{run_seed}|{instance_id}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def inject_noise(z, sigma: float, rng):
    """z + Gaussian noise of std sigma; sigma=0 returns z unchanged."""
    if sigma < 0:
        raise ConfigError("noise sigma must be >= 0")
    if sigma == 0.0:
        return z
    zv = z.data if isinstance(z, Tensor) else np.asarray(z)
    eps = rng.normal(0.0, sigma, zv.shape).astype(zv.dtype)
    out = zv + eps
    return Tensor(out) if isinstance(z, Tensor) else out


# ---------------------------------------------------------------------------
# Energy for Langevin refinement


def q_energy_grad(params: ModelParams, y_value: np.ndarray):
    """Per-sample energy E(y) = softplus(-q(y)) and its gradient w.r.t. y.

    Only y enters as a graph node; the parameters stay constants, so the
    gradient flows through the Q head alone.
    """
    y_node = T.parameter(Tensor(y_value))
    carry = Carry(z=Tensor(np.zeros((1, 1, 1), dtype=np.float32)), y=y_node)
    q = q_logit(carry, params)
    energies = T.bce_with_logits(q, np.ones(y_value.shape[0], dtype=y_value.dtype))
    T.backward(T.reduce_sum(energies))
    return energies.value.data.copy(), y_node.grad.copy()


def _check_langevin_head(params: ModelParams):
    if params.config.q_head != "attention-pooled":
        raise ConfigError("langevin refinement needs the attention-pooled Q "
                          "head; the token-0 linear head has a constant "
                          "latent gradient")


def _refine(y: np.ndarray, params: ModelParams, lcfg: LangevinConfig, draw) -> np.ndarray:
    """N updates y <- (y - eta * dE/dy) + sqrt(2 eta) * xi; with the gradient
    disabled the eta term is dropped but xi is drawn identically."""
    eta = np.float32(lcfg.step_size)
    c = np.float32(np.sqrt(2.0 * lcfg.step_size))
    for _ in range(lcfg.steps):
        xi = draw()
        if lcfg.gradient_enabled:
            _, grad = q_energy_grad(params, y)
            y = (y - eta * grad) + c * xi
        else:
            y = y + c * xi
    return y


def langevin_refine(carry: Carry, params: ModelParams, lcfg: LangevinConfig, rng) -> Carry:
    """Stochastic refinement of the answer latent against the Q-head energy."""
    _check_langevin_head(params)
    lcfg.validate()
    y = T.detach(carry.y).data

    def draw():
        return rng.normal(0.0, 1.0, y.shape).astype(y.dtype)

    return Carry(z=carry.z, y=Tensor(_refine(y, params, lcfg, draw)))


# ---------------------------------------------------------------------------
# Rollout engine


def _cell_accuracy(answer: np.ndarray, y_true: np.ndarray) -> float:
    live = np.asarray(y_true) != PAD_ID
    if not live.any():
        return 1.0
    return float((np.asarray(answer)[live] == np.asarray(y_true)[live]).mean())


def _stacked_noise(master_seed, num_rollouts, step, sigma, shape, dtype):
    draws = [rollout_rng(master_seed, k, step).normal(0.0, sigma, shape).astype(dtype)
             for k in range(num_rollouts)]
    return np.stack(draws)


def _langevin_draw(master_seed, num_rollouts, step, shape, dtype):
    # one generator per (k, step); sequential draws inside it cover the N updates
    rngs = [rollout_rng(master_seed, k, step, "langevin")
            for k in range(num_rollouts)]

    def draw():
        return np.stack([r.normal(0.0, 1.0, shape).astype(dtype) for r in rngs])
    return draw


def run_rollouts(params: ModelParams, x_tokens, cfg: InferenceConfig,
                 lcfg: LangevinConfig | None = None, y_true=None) -> list:
    """All K rollouts for one puzzle, stacked along the batch axis."""
    cfg.validate()
    langevin_on = lcfg is not None and lcfg.steps > 0
    if langevin_on:
        _check_langevin_head(params)
        lcfg.validate()
    x = np.asarray(x_tokens)
    if x.ndim != 1:
        raise ConfigError("x_tokens must be a flat token array")
    if x.shape[0] != params.config.seq_len:
        raise ConfigError(f"token length {x.shape[0]} does not match the "
                          f"model's seq_len {params.config.seq_len}")
    K, L, H = cfg.num_rollouts, x.shape[0], params.config.hidden_dim

    traces: list = [[] for _ in range(K)]
    x_emb = embed_tokens(x[None, :], params)                # [1, L, H]
    carry = zero_carry(params.config, K)
    for t in range(1, cfg.depth + 1):
        if cfg.noise_sigma > 0.0:
            z = carry.z.data + _stacked_noise(cfg.master_seed, K, t,
                                              cfg.noise_sigma, (L, H),
                                              carry.z.data.dtype)
            carry = Carry(z=Tensor(z), y=carry.y)
        carry = deep_recursion(x_emb, carry, params.config.recursion_depth,
                               params, grad_mode="none")
        if langevin_on:
            y = _refine(carry.y.data, params, lcfg,
                        _langevin_draw(cfg.master_seed, K, t, (L, H), np.float32))
            carry = Carry(z=carry.z, y=Tensor(y))
        if cfg.trace_enabled:
            q_t = T._raw(q_logit(carry, params))
            ans_t = decode_answer(output_logits(carry, params))
            for k in range(K):
                acc = None if y_true is None else _cell_accuracy(ans_t[k], y_true)
                traces[k].append(TraceStep(t, float(q_t[k]), acc,
                                           carry.y.data[k].copy()))

    answers = decode_answer(output_logits(carry, params))   # [K, L]
    qs = T._raw(q_logit(carry, params))                     # [K]
    return [RolloutRecord(k, answers[k].copy(), float(qs[k]), traces[k])
            for k in range(K)]


def deterministic_infer(params: ModelParams, x_tokens, depth: int,
                        trace_enabled: bool = False, y_true=None):
    """Noise-free single rollout: the num_rollouts=1, sigma=0 reduction."""
    cfg = InferenceConfig(num_rollouts=1, depth=depth, noise_sigma=0.0,
                          trace_enabled=trace_enabled)
    rec = run_rollouts(params, x_tokens, cfg, y_true=y_true)[0]
    return rec.answer, rec.q, (rec.trace if trace_enabled else None)


# ---------------------------------------------------------------------------
# Selection


def select_best_q(records: list, limit: int | None = None):
    """Record with the largest q over the first ``limit`` rollouts; ties go
    to the smallest k."""
    pool = records if limit is None else records[:limit]
    if not pool:
        raise ConfigError("selection needs at least one rollout")
    best = int(np.argmax([r.q for r in pool]))
    return pool[best]


def select_mode(records: list, limit: int | None = None) -> np.ndarray:
    """Most frequent answer sequence; ties broken by the lexicographically
    smallest token sequence."""
    pool = records if limit is None else records[:limit]
    if not pool:
        raise ConfigError("selection needs at least one rollout")
    counts: dict = {}
    for r in pool:
        key = tuple(int(v) for v in r.answer)
        counts[key] = counts.get(key, 0) + 1
    top = max(counts.values())
    winner = min(key for key, n in counts.items() if n == top)
    return np.array(winner, dtype=np.int32)


def exact_match(answer, y_true) -> bool:
    """Exact over non-pad cells; an all-pad target counts as solved."""
    a, t = np.asarray(answer), np.asarray(y_true)
    live = t != PAD_ID
    return bool((a[live] == t[live]).all())


def select_oracle(records: list, y_true):
    """First exactly correct rollout if one exists, else the best-q choice.
    Needs ground truth, so this selector is for analysis only."""
    if y_true is None:
        raise ConfigError("oracle selection needs ground truth")
    for r in records:
        if exact_match(r.answer, y_true):
            return r
    return select_best_q(records)


def ptrm_infer(params: ModelParams, x_tokens, cfg: InferenceConfig,
               lcfg: LangevinConfig | None = None, y_true=None):
    """K noisy rollouts plus selection. Returns (answer, k*, records)."""
    records = run_rollouts(params, x_tokens, cfg, lcfg=lcfg, y_true=y_true)
    if cfg.selector == "best-q":
        chosen = select_best_q(records)
        return chosen.answer, chosen.k, records
    if cfg.selector == "mode":
        answer = select_mode(records)
        k_star = next(r.k for r in records if np.array_equal(r.answer, answer))
        return answer, k_star, records
    chosen = select_oracle(records, y_true)
    return chosen.answer, chosen.k, records


# ---------------------------------------------------------------------------
# Basin escape


def basin_escape_experiment(params: ModelParams, x_tokens, y_true,
                            num_rollouts: int, depth: int, sigma: float,
                            master_seed: int = 0) -> dict:
    """Stochastic retries of a puzzle the deterministic pass gets wrong."""
    det_answer, _, _ = deterministic_infer(params, x_tokens, depth)
    if exact_match(det_answer, y_true):
        raise ConfigError("basin escape needs a puzzle the deterministic "
                          "rollout fails")
    cfg = InferenceConfig(num_rollouts=num_rollouts, depth=depth,
                          noise_sigma=sigma, master_seed=master_seed,
                          trace_enabled=True)
    records = run_rollouts(params, x_tokens, cfg, y_true=y_true)
    correct = [exact_match(r.answer, y_true) for r in records]
    return {
        "records": records,
        "correct": correct,
        "escape_fraction": float(np.mean(correct)),
        "deterministic_answer": det_answer,
    }


# ---------------------------------------------------------------------------
# Dataset-level evaluation (optionally across worker processes)

_WORKER_STATE: dict = {}


def _worker_init(params, cfg_dict, run_seed):
    _WORKER_STATE["params"] = params
    _WORKER_STATE["cfg"] = InferenceConfig.from_dict(cfg_dict)
    _WORKER_STATE["run_seed"] = run_seed


def _worker_eval(task):
    instance_id, x_tokens, y_true = task
    base = _WORKER_STATE["cfg"]
    cfg = InferenceConfig(
        num_rollouts=base.num_rollouts, depth=base.depth,
        noise_sigma=base.noise_sigma, selector=base.selector,
        master_seed=instance_master_seed(_WORKER_STATE["run_seed"], instance_id),
        trace_enabled=False)
    records = run_rollouts(_WORKER_STATE["params"], x_tokens, cfg, y_true=y_true)
    return [(r.k, r.answer, r.q) for r in records]


def evaluate_instances(params: ModelParams, instances, cfg: InferenceConfig,
                       run_seed: int, workers: int = 1) -> list:
    """Per-instance rollout records for a whole dataset. Master seeds are
    derived per instance id, so the worker count cannot change any result."""
    cfg.validate()
    tasks = [(inst.instance_id, np.asarray(inst.x_tokens),
              np.asarray(inst.y_true_tokens)) for inst in instances]
    if workers <= 1:
        _worker_init(params, cfg.to_dict(), run_seed)
        raw = [_worker_eval(t) for t in tasks]
        _WORKER_STATE.clear()
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(params, cfg.to_dict(), run_seed)) as pool:
            raw = list(pool.map(_worker_eval, tasks, chunksize=8))
    return [[RolloutRecord(k, answer, q) for k, answer, q in per_inst]
            for per_inst in raw]
