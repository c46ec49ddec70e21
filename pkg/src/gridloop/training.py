"""Deep-supervision training loop.

A pool of batch slots holds in-flight samples; every optimizer step runs one
supervision step over the whole pool (one truncated deep recursion, a
two-term loss, one Adam update). Slots that halt (their correctness logit
clears 0.5, or they exhaust their step budget) are refilled from a seeded
per-epoch shuffle of the training set, so the whole trajectory of the run is
a pure function of (data, configs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensors as T
from .errors import ConfigError

PAD_ID = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 4
    halting_enabled: bool = True
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every_steps: int | None = None      # extra mid-epoch validation cadence
    checkpoint_every_steps: int | None = None
    stop_at_val_exact: tuple | None = None   # (lo, hi): stop in this accuracy band

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["stop_at_val_exact"] = list(self.stop_at_val_exact) if self.stop_at_val_exact else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if known.get("stop_at_val_exact") is not None:
            known["stop_at_val_exact"] = tuple(known["stop_at_val_exact"])
        return cls(**known).validate()


@dataclass
class BatchSlot:
    instance: object          # anything with .x_tokens / .y_true_tokens
    carry: M.Carry            # per-sample [L, H] latents
    steps_taken: int = 0
    halted: bool = False
    index: int = -1           # position in the training list, for resume


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam(params: M.ModelParams) -> AdamState:
    return AdamState(m={k: np.zeros_like(v.data) for k, v in params.items()},
                     v={k: np.zeros_like(v.data) for k, v in params.items()},
                     step=0)


def act_halt(q_hat: float, steps_taken: int, max_steps: int) -> bool:
    """Halt when the correctness logit clears 0.5 (strictly) or the budget is spent."""
    if steps_taken >= max_steps:
        return True
    return float(T._sigmoid(np.float64(q_hat))) > 0.5


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    sq = 0.0
    for g in grads.values():
        sq += float(np.vdot(g.astype(np.float64), g.astype(np.float64)))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        s = np.float32(max_norm / norm)
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def adam_update(params: M.ModelParams, grads: dict, opt_state: AdamState,
                config: TrainConfig) -> M.ModelParams:
    """Bias-corrected Adam with decoupled weight decay; clips first, then steps."""
    grads, _ = clip_global_norm(grads, config.grad_clip_norm)
    opt_state.step += 1
    t = opt_state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    out = {}
    for name, tensor in params.items():
        g = grads[name]
        opt_state.m[name] = b1 * opt_state.m[name] + (1 - b1) * g
        opt_state.v[name] = b2 * opt_state.v[name] + (1 - b2) * (g * g)
        m_hat = opt_state.m[name] / bc1
        v_hat = opt_state.v[name] / bc2
        p = tensor.data
        if config.weight_decay:
            p = p - config.learning_rate * config.weight_decay * p
        step = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps_opt)
        out[name] = T.Tensor((p - step).astype(p.dtype))
    return params.with_values(out)


def exact_and_cell_match(answers: np.ndarray, truths: np.ndarray,
                         pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample exact-match flags and cell accuracies over non-pad cells."""
    mask = truths != pad_id
    hits = (answers == truths) & mask
    counts = np.maximum(mask.sum(axis=-1), 1)
    cell = hits.sum(axis=-1) / counts
    exact = (hits.sum(axis=-1) == mask.sum(axis=-1))
    return exact, cell


def supervision_step(params: M.ModelParams, slots: list[BatchSlot],
                     pad_id: int = PAD_ID):
    """One deep-supervision step over a slot pool.

    Returns (loss node, q logits [B], exact-correct flags [B], detached
    carries). Parameters may be GraphNodes (training) or Tensors (probing);
    the carries handed back are always plain detached Tensors.
    """
    x = np.stack([np.asarray(s.instance.x_tokens) for s in slots])
    y_true = np.stack([np.asarray(s.instance.y_true_tokens) for s in slots])
    carry = M.Carry(T.Tensor(np.stack([T._raw(s.carry.z) for s in slots])),
                    T.Tensor(np.stack([T._raw(s.carry.y) for s in slots])))

    x_emb = M.embed_tokens(x, params)
    carry = M.deep_recursion(x_emb, carry, params.config.recursion_depth,
                             params, grad_mode="truncated")
    logits = M.output_logits(carry, params)
    q = M.q_logit(carry, params)

    answers = M.decode_answer(logits)
    exact, _ = exact_and_cell_match(answers, y_true, pad_id)
    ce = T.softmax_cross_entropy(logits, y_true, pad_id=pad_id)
    bce = T.bce_with_logits(q, exact.astype(np.float32))
    loss = T.reduce_mean(T.add(ce, bce))

    zs, ys = T._raw(T.detach(carry.z)), T._raw(T.detach(carry.y))
    carries = [M.Carry(T.Tensor(zs[i]), T.Tensor(ys[i])) for i in range(len(slots))]
    return loss, np.asarray(T._raw(q)), exact, carries


def evaluate_split(params: M.ModelParams, instances, depth: int,
                   batch_size: int = 256, pad_id: int = PAD_ID):
    """Noise-free batched evaluation: (exact accuracy, mean cell accuracy)."""
    exact_all, cell_all = [], []
    with T.no_grad():
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo:lo + batch_size]
            x = np.stack([np.asarray(i.x_tokens) for i in chunk])
            y_true = np.stack([np.asarray(i.y_true_tokens) for i in chunk])
            carry = M.zero_carry(params.config, len(chunk))
            x_emb = M.embed_tokens(x, params)
            for _ in range(depth):
                carry = M.deep_recursion(x_emb, carry, params.config.recursion_depth,
                                         params, grad_mode="none")
            answers = M.decode_answer(M.output_logits(carry, params))
            exact, cell = exact_and_cell_match(answers, y_true, pad_id)
            exact_all.append(exact)
            cell_all.append(cell)
    exact = np.concatenate(exact_all)
    cell = np.concatenate(cell_all)
    return float(exact.mean()), float(cell.mean())


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""
    params: M.ModelParams
    adam: AdamState
    slots: list
    epoch: int
    cursor: int                  # position within the current epoch's shuffle
    global_step: int
    exhausted: bool = False      # no more epochs to draw from
    metrics: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    params: M.ModelParams
    history: list
    state: TrainState
    stopped_in_band: bool = False


def _fresh_carry(config: M.ModelConfig) -> M.Carry:
    shape = (config.seq_len, config.hidden_dim)
    return M.Carry(T.Tensor(np.zeros(shape, np.float32)),
                   T.Tensor(np.zeros(shape, np.float32)))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class _Stream:
    """Deterministic sample stream: per-epoch seeded shuffles of 0..n-1."""

    def __init__(self, n: int, seed: int, epochs: int, epoch: int = 0, cursor: int = 0):
        self.n, self.seed, self.epochs = n, seed, epochs
        self.epoch, self.cursor = epoch, cursor
        self.order = _epoch_order(seed, epoch, n) if epoch < epochs else None

    def next_index(self):
        """Next dataset index, or None once all epochs are exhausted."""
        if self.order is None:
            return None
        idx = int(self.order[self.cursor])
        self.cursor += 1
        if self.cursor >= self.n:
            self.epoch += 1
            self.cursor = 0
            self.order = _epoch_order(self.seed, self.epoch, self.n) \
                if self.epoch < self.epochs else None
        return idx


def _check_data(instances, config: M.ModelConfig, what: str):
    for inst in instances:
        x = np.asarray(inst.x_tokens)
        if x.shape != (config.seq_len,):
            raise ConfigError(f"{what}: token length {x.shape} != seq_len {config.seq_len}")
        hi = max(int(x.max()), int(np.asarray(inst.y_true_tokens).max()))
        if hi >= config.vocab_size:
            raise ConfigError(f"{what}: token id {hi} outside vocab of {config.vocab_size}")


def fit(train_set, val_set, model_config: M.ModelConfig, train_config: TrainConfig,
        on_log=None, on_checkpoint=None, resume: TrainState | None = None) -> TrainResult:
    """Train a fresh (or resumed) model; returns params, a metrics history,
    and the final resumable state.

    on_log(record) sees every history record; on_checkpoint(tag, state) fires
    at the configured step interval, when a stop band is hit, and at the end.
    """
    model_config.validate()
    train_config.validate()
    if not train_set:
        raise ConfigError("training set is empty")
    _check_data(train_set, model_config, "train set")
    if val_set:
        _check_data(val_set, model_config, "val set")

    history: list = []

    def log(record):
        history.append(record)
        if on_log:
            on_log(record)

    if resume is not None:
        params = resume.params
        adam = AdamState(m={k: v.copy() for k, v in resume.adam.m.items()},
                         v={k: v.copy() for k, v in resume.adam.v.items()},
                         step=resume.adam.step)
        slots = [BatchSlot(train_set[s.index], s.carry, s.steps_taken,
                           s.halted, s.index) for s in resume.slots]
        stream = _Stream(len(train_set), train_config.seed, train_config.epochs,
                         resume.epoch, resume.cursor)
        global_step = resume.global_step
    else:
        params = M.init_params(model_config, train_config.seed)
        adam = init_adam(params)
        stream = _Stream(len(train_set), train_config.seed, train_config.epochs)
        slots = []
        for _ in range(min(train_config.batch_size, len(train_set))):
            idx = stream.next_index()
            slots.append(BatchSlot(train_set[idx], _fresh_carry(model_config), index=idx))
        global_step = 0

    stopped_in_band = False
    last_epoch_evaled = -1

    def snapshot(metrics=None):
        # deep-copy what later steps mutate in place
        adam_copy = AdamState(m={k: v.copy() for k, v in adam.m.items()},
                              v={k: v.copy() for k, v in adam.v.items()},
                              step=adam.step)
        slot_copies = [BatchSlot(s.instance, s.carry, s.steps_taken, s.halted, s.index)
                       for s in slots]
        return TrainState(params=params, adam=adam_copy, slots=slot_copies,
                          epoch=stream.epoch, cursor=stream.cursor,
                          global_step=global_step,
                          exhausted=stream.order is None,
                          metrics=metrics or {})

    def run_validation(epoch_for_record):
        nonlocal stopped_in_band
        if not val_set:
            return None
        exact, cell = evaluate_split(params, val_set, model_config.max_steps)
        log({"step": global_step, "epoch": epoch_for_record,
             "val_exact": exact, "val_cell": cell})
        band = train_config.stop_at_val_exact
        if band and band[0] <= exact <= band[1]:
            stopped_in_band = True
        return exact

    while True:
        # refill halted slots first so a resumed (drained) pool can restart
        epoch_before_refill = stream.epoch
        for slot in slots:
            if not slot.halted:
                continue
            idx = stream.next_index()
            if idx is None:
                continue  # stream exhausted; pool drains
            slot.instance = train_set[idx]
            slot.index = idx
            slot.carry = _fresh_carry(model_config)
            slot.steps_taken = 0
            slot.halted = False

        if stream.epoch > epoch_before_refill and stream.epoch > last_epoch_evaled:
            last_epoch_evaled = stream.epoch
            run_validation(stream.epoch - 1)
            if stopped_in_band:
                if on_checkpoint:
                    on_checkpoint("band", snapshot(history[-1] if history else {}))
                break

        active = [s for s in slots if not s.halted]
        if not active:
            break

        node_params = params.with_values({k: T.parameter(v) for k, v in params.items()})
        try:
            loss, q_hats, _, carries = supervision_step(node_params, active)
            T.backward(loss)
        except FloatingPointError as e:
            raise RuntimeError(
                f"non-finite loss at step {global_step} "
                f"(epoch {stream.epoch}, pool of {len(active)})") from e
        grads = {k: (node_params[k].grad if node_params[k].grad is not None
                     else np.zeros_like(params[k].data))
                 for k in params.names()}
        params = adam_update(params, grads, adam, train_config)
        global_step += 1

        halted_now = 0
        for slot, q, carry in zip(active, q_hats, carries):
            slot.carry = carry
            slot.steps_taken += 1
            if train_config.halting_enabled:
                slot.halted = act_halt(float(q), slot.steps_taken, model_config.max_steps)
            else:
                slot.halted = slot.steps_taken >= model_config.max_steps
            halted_now += int(slot.halted)

        log({"step": global_step, "loss": float(T._raw(loss)),
             "lr": train_config.learning_rate,
             "halted_fraction": halted_now / len(active)})

        if train_config.eval_every_steps and global_step % train_config.eval_every_steps == 0:
            run_validation(stream.epoch)
            if stopped_in_band:
                if on_checkpoint:
                    on_checkpoint("band", snapshot(history[-1] if history else {}))
                break

        if (train_config.checkpoint_every_steps and on_checkpoint
                and global_step % train_config.checkpoint_every_steps == 0):
            on_checkpoint(f"step{global_step:06d}", snapshot())

    final_val = None
    if not stopped_in_band:
        final_val = run_validation(stream.epoch)
    state = snapshot({"val_exact": final_val} if final_val is not None else {})
    if on_checkpoint:
        on_checkpoint("final", state)
    return TrainResult(params=params, history=history, state=state,
                       stopped_in_band=stopped_in_band)
