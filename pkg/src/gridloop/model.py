"""The recursive solver network.

One shared two-layer block refines a pair of latents: a reasoning latent z
and an answer latent y. A latent recursion applies ``latent_steps`` z-updates
followed by one y-update; a deep recursion chains ``recursion_depth`` latent
recursions, keeping gradients only through the last. All model functions
operate on batched latents [B, L, H]; single-sample work uses B = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .errors import ConfigError

Q_HEAD_KINDS = ("linear-token0", "attention-pooled")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int
    hidden_dim: int = 128
    latent_steps: int = 4        # z-updates per latent recursion
    recursion_depth: int = 3     # latent recursions per deep recursion
    max_steps: int = 6           # supervision steps per sample during training
    expansion: int = 2           # MLP widening factor
    q_head: str = "linear-token0"

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.hidden_dim < 4:
            raise ConfigError("hidden_dim must be >= 4")
        if min(self.latent_steps, self.recursion_depth, self.max_steps) < 1:
            raise ConfigError("latent_steps, recursion_depth, max_steps must be >= 1")
        if self.expansion < 1:
            raise ConfigError("expansion must be >= 1")
        if self.q_head not in Q_HEAD_KINDS:
            raise ConfigError(f"q_head must be one of {Q_HEAD_KINDS}")
        return self

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "seq_len": self.seq_len,
            "hidden_dim": self.hidden_dim, "latent_steps": self.latent_steps,
            "recursion_depth": self.recursion_depth, "max_steps": self.max_steps,
            "expansion": self.expansion, "q_head": self.q_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


@dataclass
class Carry:
    """The (z, y) latent pair, shaped [B, L, H]."""
    z: object
    y: object


@dataclass
class ModelParams:
    """Named parameter tensors plus the config they belong to.

    Values are Tensors at rest; during a tracked training step the same
    container holds GraphNodes so the model functions stay oblivious.
    """
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors.keys())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.astype(dtype) for k, v in self.tensors.items()})

    def with_values(self, values: dict) -> "ModelParams":
        return ModelParams(self.config, dict(values))


def _trunc_normal(rng, shape, std: float, dtype) -> np.ndarray:
    # clipped rather than resampled so the empirical std stays ~std
    return (np.clip(rng.standard_normal(shape), -2.0, 2.0) * std).astype(dtype)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(seed)
    L, H = config.seq_len, config.hidden_dim
    E = H * config.expansion
    t = {}
    t["embed"] = T.Tensor(_trunc_normal(rng, (config.vocab_size, H), H ** -0.5, dtype))
    for i in range(2):
        p = f"block{i}."
        t[p + "norm1"] = T.Tensor(np.ones(H, dtype=dtype))
        t[p + "mix"] = T.Tensor(_trunc_normal(rng, (L, L), L ** -0.5, dtype))
        t[p + "norm2"] = T.Tensor(np.ones(H, dtype=dtype))
        t[p + "gate"] = T.Tensor(_trunc_normal(rng, (H, E), H ** -0.5, dtype))
        t[p + "up"] = T.Tensor(_trunc_normal(rng, (H, E), H ** -0.5, dtype))
        t[p + "down"] = T.Tensor(_trunc_normal(rng, (E, H), E ** -0.5, dtype))
    t["out_proj"] = T.Tensor(_trunc_normal(rng, (H, config.vocab_size), H ** -0.5, dtype))
    if config.q_head == "linear-token0":
        t["q.w"] = T.Tensor(_trunc_normal(rng, (H,), H ** -0.5, dtype))
        t["q.b"] = T.Tensor(np.zeros(1, dtype=dtype))
    else:
        t["q.score"] = T.Tensor(_trunc_normal(rng, (H,), H ** -0.5, dtype))
        t["q.w1"] = T.Tensor(_trunc_normal(rng, (H, H), H ** -0.5, dtype))
        t["q.b1"] = T.Tensor(np.zeros(H, dtype=dtype))
        t["q.w2"] = T.Tensor(_trunc_normal(rng, (H,), H ** -0.5, dtype))
        t["q.b2"] = T.Tensor(np.zeros(1, dtype=dtype))
    return ModelParams(config, t)


def zero_carry(config: ModelConfig, batch: int, dtype=np.float32) -> Carry:
    shape = (batch, config.seq_len, config.hidden_dim)
    return Carry(T.Tensor(np.zeros(shape, dtype=dtype)),
                 T.Tensor(np.zeros(shape, dtype=dtype)))


def embed_tokens(tokens: np.ndarray, params: ModelParams):
    """Token ids [B, L] -> latent-space input [B, L, H]."""
    return T.embedding(params["embed"], np.asarray(tokens))


def apply_block(h, params: ModelParams):
    """The shared two-layer block: per layer, position-mixing linear over the
    L axis -> residual -> rms-norm, then gated MLP -> residual -> rms-norm.

    Norms sit after the residual adds so the carry stays unit-RMS no matter
    how many times the block is chained; with a norm-first layout the raw
    input passes through unattenuated and the z/y sums grow geometrically
    across latent recursions.
    """
    for i in range(2):
        p = f"block{i}."
        mixed = T.matmul(params[p + "mix"], h)
        h = T.rms_norm(T.add(h, mixed), params[p + "norm1"])
        gated = T.mul(T.silu(T.matmul(h, params[p + "gate"])),
                      T.matmul(h, params[p + "up"]))
        h = T.rms_norm(T.add(h, T.matmul(gated, params[p + "down"])),
                       params[p + "norm2"])
    return h


def latent_recursion(x_emb, carry: Carry, n: int, params: ModelParams) -> Carry:
    """n reasoning updates z <- block(x + y + z), then one answer update
    y <- block(y + z). The presence of x in the sum is what distinguishes
    the two update types.
    """
    z, y = carry.z, carry.y
    for _ in range(n):
        z = apply_block(T.add(T.add(x_emb, y), z), params)
    y = apply_block(T.add(y, z), params)
    return Carry(z, y)


def deep_recursion(x_emb, carry: Carry, depth: int, params: ModelParams,
                   grad_mode: str = "none") -> Carry:
    """depth latent recursions; gradients flow only through the last one
    (grad_mode="truncated") or not at all (grad_mode="none")."""
    if grad_mode not in ("truncated", "none"):
        raise ConfigError(f"unknown grad_mode {grad_mode!r}")
    n = params.config.latent_steps
    untracked = depth - 1 if grad_mode == "truncated" else depth
    with T.no_grad():
        for _ in range(untracked):
            carry = latent_recursion(x_emb, carry, n, params)
    if grad_mode == "truncated":
        carry = latent_recursion(x_emb, carry, n, params)
    return carry


def output_logits(carry: Carry, params: ModelParams):
    """Decode the answer latent: [B, L, H] -> [B, L, V]."""
    return T.matmul(carry.y, params["out_proj"])


def _contract_last(x, w):
    """Batch-stable x @ w for w of shape [H] or [H, E].

    BLAS folds leading batch axes into the kernel's row count here, and its
    row-blocked accumulation order then varies with batch size in the last
    ulps. Multiply-then-reduce keeps every output element a fixed-length
    reduction, so results are bitwise independent of batching.
    """
    wv = T._raw(w)
    if wv.ndim == 1:
        return T.reduce_sum(T.mul(x, w), axis=-1)
    xv = T._raw(x)
    expanded = T.reshape(x, xv.shape + (1,))
    return T.reduce_sum(T.mul(expanded, w), axis=-2)


def q_logit(carry: Carry, params: ModelParams):
    """Correctness-classifier logit per sample: [B, L, H] -> [B]."""
    y = carry.y
    if params.config.q_head == "linear-token0":
        return T.add(_contract_last(T.select_position(y, 0), params["q.w"]),
                     params["q.b"])
    scores = _contract_last(y, params["q.score"])
    attn = T.softmax(scores)
    b, l = np.shape(T._raw(scores))
    pooled = T.reshape(T.matmul(T.reshape(attn, (b, 1, l)), y), (b, -1))
    hidden = T.silu(T.add(_contract_last(pooled, params["q.w1"]), params["q.b1"]))
    return T.add(_contract_last(hidden, params["q.w2"]), params["q.b2"])


def decode_answer(logits) -> np.ndarray:
    """Per-position argmax over the vocabulary: [B, L, V] -> int32 [B, L]."""
    return np.argmax(T._raw(logits), axis=-1).astype(np.int32)
