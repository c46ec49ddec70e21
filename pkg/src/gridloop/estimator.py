"""Estimator-style wrappers: fit/predict objects over the functional core.

``RecursiveSolver`` trains a recursive reasoning model on token grids and
predicts completions, optionally through multi-rollout stochastic inference.
``PrincipalPlane`` fits the two-component latent projection. Both follow the
usual estimator conventions: hyperparameters in ``__init__``, ``get_params``
and ``set_params`` for introspection, fitted state on trailing-underscore
attributes, and validation helpers that normalize array inputs up front.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import checkpoint as CK
from . import inference as I
from . import metrics as ME
from . import model as M
from . import training as TR
from .errors import ConfigError


def check_token_matrix(X, seq_len=None, vocab_size=None, name="X") -> np.ndarray:
    """Coerce to int32 [N, L], rejecting ragged, non-integral, negative, or
    out-of-vocab input."""
    try:
        arr = np.asarray(X)
    except ValueError:
        raise ConfigError(f"{name} is ragged; expected a rectangular token matrix")
    if arr.dtype == object or arr.ndim != 2:
        raise ConfigError(f"{name} must be 2-dimensional tokens, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ConfigError(f"{name} has non-integral token values")
    arr = arr.astype(np.int32)
    if arr.size and arr.min() < 0:
        raise ConfigError(f"{name} has negative token ids")
    if seq_len is not None and arr.shape[1] != seq_len:
        raise ConfigError(f"{name} has row length {arr.shape[1]}, expected {seq_len}")
    if vocab_size is not None and arr.size and arr.max() >= vocab_size:
        raise ConfigError(f"{name} has token id {int(arr.max())}, "
                          f"vocab holds {vocab_size}")
    return arr


def check_token_pair(X, y, vocab_size=None) -> tuple:
    X = check_token_matrix(X, vocab_size=vocab_size, name="X")
    y = check_token_matrix(y, vocab_size=vocab_size, name="y")
    if X.shape != y.shape:
        raise ConfigError(f"X {X.shape} and y {y.shape} must align")
    if len(X) == 0:
        raise ConfigError("need at least one sample")
    return X, y


def check_fitted(est, attr: str):
    if getattr(est, attr, None) is None:
        raise ConfigError(f"{type(est).__name__} is not fitted yet; call fit first")


@dataclass
class _Sample:
    x_tokens: np.ndarray
    y_true_tokens: np.ndarray


class _ParamsMixin:
    _param_names: tuple = ()

    def get_params(self, deep=True) -> dict:
        return {k: getattr(self, k) for k in self._param_names}

    def set_params(self, **kw):
        for k, v in kw.items():
            if k not in self._param_names:
                raise ConfigError(f"unknown parameter {k!r} for {type(self).__name__}")
            setattr(self, k, v)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={getattr(self, k)!r}" for k in self._param_names)
        return f"{type(self).__name__}({args})"


class RecursiveSolver(_ParamsMixin):
    """Trainable grid solver with optional multi-rollout test-time search.

    ``fit(X, y)`` trains on token rows; ``predict(X)`` decodes answers, using
    a single deterministic pass when ``num_rollouts == 1`` and
    ``noise_sigma == 0`` and the rollout-and-select path otherwise;
    ``score(X, y)`` is mean exact-match over non-pad cells.
    """

    _param_names = ("hidden_dim", "latent_steps", "recursion_depth", "max_steps",
                    "expansion", "q_head", "vocab_size", "learning_rate",
                    "batch_size", "epochs", "seed", "halting_enabled",
                    "grad_clip_norm", "weight_decay", "num_rollouts",
                    "noise_sigma", "selector", "infer_depth", "run_seed",
                    "workers")

    def __init__(self, hidden_dim=64, latent_steps=4, recursion_depth=3,
                 max_steps=6, expansion=2, q_head="linear-token0",
                 vocab_size=None, learning_rate=7e-4, batch_size=32, epochs=4,
                 seed=0, halting_enabled=True, grad_clip_norm=1.0,
                 weight_decay=0.0, num_rollouts=1, noise_sigma=0.0,
                 selector="best-q", infer_depth=None, run_seed=0, workers=1):
        for k in self._param_names:
            setattr(self, k, locals()[k])
        self.params_ = None
        self.history_ = None

    def _model_config(self, seq_len: int, vocab: int) -> M.ModelConfig:
        return M.ModelConfig(vocab_size=vocab, seq_len=seq_len,
                             hidden_dim=self.hidden_dim,
                             latent_steps=self.latent_steps,
                             recursion_depth=self.recursion_depth,
                             max_steps=self.max_steps, expansion=self.expansion,
                             q_head=self.q_head)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_token_pair(X, y, vocab_size=self.vocab_size)
        vocab = self.vocab_size or int(max(X.max(), y.max())) + 1
        train = [_Sample(xr, yr) for xr, yr in zip(X, y)]
        val = []
        if X_val is not None:
            X_val, y_val = check_token_pair(X_val, y_val, vocab_size=vocab)
            if X_val.shape[1] != X.shape[1]:
                raise ConfigError("validation rows differ in length from training rows")
            val = [_Sample(xr, yr) for xr, yr in zip(X_val, y_val)]
        mc = self._model_config(X.shape[1], vocab)
        tc = TR.TrainConfig(learning_rate=self.learning_rate,
                            batch_size=self.batch_size, epochs=self.epochs,
                            seed=self.seed, halting_enabled=self.halting_enabled,
                            grad_clip_norm=self.grad_clip_norm,
                            weight_decay=self.weight_decay)
        result = TR.fit(train, val, mc, tc)
        self.params_ = result.params
        self.history_ = result.history
        return self

    @property
    def _depth(self) -> int:
        return self.infer_depth or self.params_.config.max_steps

    def _inference_config(self, trace=False) -> I.InferenceConfig:
        return I.InferenceConfig(num_rollouts=self.num_rollouts,
                                 depth=self._depth,
                                 noise_sigma=self.noise_sigma,
                                 selector=self.selector,
                                 master_seed=self.run_seed,
                                 trace_enabled=trace)

    def predict(self, X) -> np.ndarray:
        check_fitted(self, "params_")
        config = self.params_.config
        X = check_token_matrix(X, seq_len=config.seq_len,
                               vocab_size=config.vocab_size)
        if self.selector == "oracle":
            raise ConfigError("oracle selection needs ground truth; use score "
                              "or a different selector")
        if self.num_rollouts == 1 and self.noise_sigma == 0.0:
            rows = [I.deterministic_infer(self.params_, xr, self._depth)[0]
                    for xr in X]
            return np.stack(rows)
        cfg = self._inference_config()
        out = []
        for i, xr in enumerate(X):
            per = dataclasses.replace(
                cfg, master_seed=I.instance_master_seed(self.run_seed, f"row{i}"))
            answer, _, _ = I.ptrm_infer(self.params_, xr, per)
            out.append(answer)
        return np.stack(out)

    def predict_q(self, X) -> np.ndarray:
        """Correctness-head logit of the deterministic pass, per row."""
        check_fitted(self, "params_")
        config = self.params_.config
        X = check_token_matrix(X, seq_len=config.seq_len,
                               vocab_size=config.vocab_size)
        return np.array([I.deterministic_infer(self.params_, xr, self._depth)[1]
                         for xr in X], dtype=np.float64)

    def score(self, X, y) -> float:
        check_fitted(self, "params_")
        X, y = check_token_pair(X, y, vocab_size=self.params_.config.vocab_size)
        answers = self.predict(X)
        return float(np.mean([I.exact_match(a, t) for a, t in zip(answers, y)]))

    def save(self, base_path) -> str:
        check_fitted(self, "params_")
        return CK.save_checkpoint(base_path, self.params_)

    @classmethod
    def load(cls, base_path) -> "RecursiveSolver":
        params, _ = CK.load_checkpoint(base_path)
        c = params.config
        est = cls(hidden_dim=c.hidden_dim, latent_steps=c.latent_steps,
                  recursion_depth=c.recursion_depth, max_steps=c.max_steps,
                  expansion=c.expansion, q_head=c.q_head, vocab_size=c.vocab_size)
        est.params_ = params
        return est


class PrincipalPlane(_ParamsMixin):
    """Two-component projection of latent snapshots (power iteration under
    the hood). ``fit`` learns the plane, ``transform`` projects new rows."""

    _param_names = ()

    def __init__(self):
        self.plane_ = None

    def fit(self, X):
        X = self._check(X, "fit")
        self.plane_, self.coords_ = ME.pca_project(X)
        return self

    def fit_transform(self, X) -> np.ndarray:
        return self.fit(X).coords_

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "plane_")
        X = self._check(X, "transform")
        if X.shape[1] != self.plane_.mean.shape[0]:
            raise ConfigError(f"expected {self.plane_.mean.shape[0]} features, "
                              f"got {X.shape[1]}")
        return (X - self.plane_.mean) @ self.plane_.directions.T

    @staticmethod
    def _check(X, what) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim < 2:
            raise ConfigError(f"{what} needs a 2-dimensional array")
        if arr.ndim > 2:
            arr = arr.reshape(arr.shape[0], -1)
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{what} input must be finite")
        return arr
