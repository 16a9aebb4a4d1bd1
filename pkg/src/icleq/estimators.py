"""Scikit-learn style equalizers.

Every equalizer maps a batch of prompts to estimates of the final
transmitted vector:

>>> eq = ICLEqualizer(attention="lrms", steps=200).fit()    # doctest: +SKIP
>>> x_hat = eq.predict(prompts)                              # doctest: +SKIP

``X`` may be a :class:`~icleq.channel.PromptBatch`, a single
:class:`~icleq.channel.Prompt`, a list of prompts, or a ``(x, y)`` pair of
complex arrays shaped ``(n, K+1, m1)`` and ``(n, K+1, m2)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import lmmse_batch
from .channel import Prompt, PromptBatch
from .model import ModelConfig, loss_mse, batch_tensors, predict_positions
from .numerics import ContractViolation
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, \
    train_config_from_manifest


def check_prompt_batch(X, m1: int | None = None, m2: int | None = None,
                       require_channel: bool = False) -> PromptBatch:
    """Coerce ``X`` to a :class:`PromptBatch` and validate its shapes."""
    if isinstance(X, Prompt):
        X = [X]
    if isinstance(X, PromptBatch):
        batch = X
    elif isinstance(X, tuple) and len(X) == 2:
        x, y = (np.asarray(a, dtype=np.complex128) for a in X)
        batch = PromptBatch(x=x, y=y)
    elif isinstance(X, (list, np.ndarray)) and len(X) and isinstance(X[0], Prompt):
        batch = PromptBatch.from_prompts(list(X), with_channel=require_channel)
    else:
        raise ContractViolation(f"cannot interpret {type(X).__name__} as prompts")
    if batch.x.ndim != 3 or batch.y.ndim != 3 or batch.x.shape[:2] != batch.y.shape[:2]:
        raise ContractViolation(f"prompt arrays have incompatible shapes {batch.x.shape}, "
                                f"{batch.y.shape}")
    if len(batch) == 0:
        raise ContractViolation("empty prompt batch")
    if m1 is not None and batch.x.shape[-1] != m1:
        raise ContractViolation(f"x has {batch.x.shape[-1]} entries, expected {m1}")
    if m2 is not None and batch.y.shape[-1] != m2:
        raise ContractViolation(f"y has {batch.y.shape[-1]} entries, expected {m2}")
    if not (np.all(np.isfinite(batch.x)) and np.all(np.isfinite(batch.y))):
        raise ContractViolation("prompt arrays contain non-finite values")
    if require_channel and (batch.H is None or batch.sigma2 is None):
        raise ContractViolation("this equalizer needs the query channel and noise variance")
    return batch


class LMMSEEqualizer(BaseEstimator):
    """Genie-aided LMMSE using each prompt's true query channel."""

    label = "lmmse"

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X):
        batch = check_prompt_batch(X, require_channel=True)
        return lmmse_batch(batch.H, batch.y[:, -1], batch.sigma2)

    def score(self, X, y=None):
        batch = check_prompt_batch(X, require_channel=True)
        return -float(np.mean(np.sum(np.abs(self.predict(batch) - batch.x[:, -1]) ** 2, -1)))


class ZeroEqualizer(BaseEstimator):
    """Ignores the prompt and predicts zero."""

    label = "zero"

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X):
        batch = check_prompt_batch(X)
        return np.zeros(batch.x[:, -1].shape, dtype=np.complex128)


class ICLEqualizer(BaseEstimator):
    """In-context equalizer: a small transformer pretrained on synthetic channels.

    Parameters
    ----------
    attention : {'softmax', 'lms', 'multi_lms', 'lrms'}
    M : int
        Fused LMS steps per token for ``multi_lms``.
    layers, heads, embed_dim : int
        Transformer size.
    K : int
        Context length used for pretraining.
    steps, batch_size, learning_rate : training schedule.
    pool_size : int
        Number of distinct seeded channel traces batches are drawn from.
    rho_range, snr_range, bits_range : tuple
        Pretraining distribution of memory factor, SNR (dB) and quantizer bits.
    seed : int
        Fixes initialization, the channel pool and every batch.

    Attributes
    ----------
    model_ : ICLTransformer
    loss_curve_ : list of float
    """

    def __init__(self, attention="lms", M=1, layers=2, heads=4, embed_dim=32, K=20,
                 m1=2, m2=2, steps=5000, batch_size=64, learning_rate=1e-3,
                 adam_betas=(0.9, 0.999), adam_eps=1e-8, pool_size=2000, sigma_w=0.1,
                 rho_range=(0.9, 1.0), snr_range=(0.0, 30.0), bits_range=(1, 6),
                 read_before_update=False, seed=0):
        self.attention = attention
        self.M = M
        self.layers = layers
        self.heads = heads
        self.embed_dim = embed_dim
        self.K = K
        self.m1 = m1
        self.m2 = m2
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adam_betas = adam_betas
        self.adam_eps = adam_eps
        self.pool_size = pool_size
        self.sigma_w = sigma_w
        self.rho_range = rho_range
        self.snr_range = snr_range
        self.bits_range = bits_range
        self.read_before_update = read_before_update
        self.seed = seed

    @property
    def label(self) -> str:
        if self.attention == "multi_lms":
            return f"icl-multi_lms-M{self.M}"
        return f"icl-{self.attention}"

    def model_config(self) -> ModelConfig:
        return ModelConfig(layers=self.layers, heads=self.heads, embed_dim=self.embed_dim,
                           attention_kind=self.attention, M=self.M,
                           max_seq_len=max(2 * self.K + 1, 1), m1=self.m1, m2=self.m2,
                           read_before_update=self.read_before_update)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, adam_betas=tuple(self.adam_betas),
                           adam_eps=self.adam_eps, seed=self.seed, pool_size=self.pool_size,
                           K=self.K, sigma_w=self.sigma_w, rho_range=tuple(self.rho_range),
                           snr_range=tuple(self.snr_range), bits_range=tuple(self.bits_range))

    def fit(self, X=None, y=None, checkpoint_dir=None):
        """Pretrain the model.

        With ``X=None`` batches come from the synthetic channel distribution
        given by the constructor. Passing prompts trains on that fixed batch
        every step instead. ``y`` is ignored; targets live inside the prompts.
        """
        batches = None
        if X is not None:
            batches = check_prompt_batch(X, self.m1, self.m2)
            if batches.K != self.K:
                raise ContractViolation(f"prompts have K={batches.K}, estimator K={self.K}")
        result = train(self.train_config(), self.model_config(), batches=batches,
                       checkpoint_dir=checkpoint_dir)
        self.model_ = result.model
        self.optimizer_ = result.optimizer
        self.loss_curve_ = result.losses
        self.n_iter_ = len(result.losses)
        return self

    def _batch(self, X) -> PromptBatch:
        check_is_fitted(self, "model_")
        batch = check_prompt_batch(X, self.m1, self.m2)
        if 2 * batch.K + 1 > self.model_.cfg.max_seq_len:
            raise ContractViolation(f"prompt with K={batch.K} is longer than the model supports")
        return batch

    def predict_positions(self, X) -> np.ndarray:
        """Estimates at every y-position, complex array of shape (n, K+1, m1)."""
        batch = self._batch(X)
        return predict_positions(self.model_, batch)

    def predict(self, X) -> np.ndarray:
        """Estimate of the final transmitted vector, complex array of shape (n, m1)."""
        return self.predict_positions(X)[:, -1]

    def score(self, X, y=None) -> float:
        """Negative final-position MSE (larger is better, as sklearn expects)."""
        batch = self._batch(X)
        err = np.sum(np.abs(self.predict(batch) - batch.x[:, -1]) ** 2, axis=-1)
        return -float(err.mean())

    def loss(self, X) -> float:
        """Training objective: squared error averaged over all y-positions."""
        batch = self._batch(X)
        dtype = next(self.model_.parameters()).dtype
        xc, yy, target = batch_tensors(batch, dtype)
        with torch.no_grad():
            return float(loss_mse(self.model_(xc, yy), target))

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, self.model_.cfg, self.train_config(),
                               self.n_iter_, getattr(self, "optimizer_", None))

    @classmethod
    def load(cls, path) -> "ICLEqualizer":
        model, manifest = load_checkpoint(path)
        mc = model.cfg
        tc = train_config_from_manifest(manifest) or TrainConfig()
        est = cls(attention=mc.attention_kind, M=mc.M, layers=mc.layers, heads=mc.heads,
                  embed_dim=mc.embed_dim, K=tc.K, m1=mc.m1, m2=mc.m2, steps=tc.steps,
                  batch_size=tc.batch_size, learning_rate=tc.learning_rate,
                  adam_betas=tc.adam_betas, adam_eps=tc.adam_eps, pool_size=tc.pool_size,
                  sigma_w=tc.sigma_w, rho_range=tc.rho_range, snr_range=tc.snr_range,
                  bits_range=tc.bits_range, read_before_update=mc.read_before_update,
                  seed=tc.seed)
        est.model_ = model
        est.loss_curve_ = []
        est.n_iter_ = manifest["step"]
        return est
