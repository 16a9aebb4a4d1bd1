"""Transformer equalizer with pluggable attention.

A prompt ``(x_1, y_1), ..., (x_K, y_K), y_{K+1}`` becomes the token sequence
``[y_1, x_1, y_2, x_2, ..., y_K, x_K, y_{K+1}]``; complex vectors are fed as
stacked ``(Re, Im)`` reals through separate x- and y-token projections, plus
a learned positional embedding. The network is a stack of pre-norm blocks
and a linear readout emits an estimate of ``x_i`` at every y-token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .numerics import ContractViolation

ATTENTION_KINDS = ("softmax", "lms", "multi_lms", "lrms")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    embed_dim: int = 32
    attention_kind: str = "lms"
    M: int = 1
    max_seq_len: int = 64
    m1: int = 2
    m2: int = 2
    mlp_ratio: int = 4
    read_before_update: bool = False
    scale_softmax: bool = False

    def __post_init__(self):
        if self.attention_kind not in ATTENTION_KINDS:
            raise ContractViolation(f"attention_kind must be one of {ATTENTION_KINDS}, "
                                    f"got {self.attention_kind!r}")
        if self.embed_dim % self.heads:
            raise ContractViolation(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.layers < 1 or self.M < 1 or self.max_seq_len < 1:
            raise ContractViolation("layers, M and max_seq_len must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


class RecurrentAttentionFunction(torch.autograd.Function):
    """Bridges :func:`kernels.run_recurrent` and its hand-written BPTT into autograd."""

    @staticmethod
    def forward(ctx, q, k, v, beta, kind, M, read_before_update):
        args = [t.detach().cpu().numpy() for t in (q, k, v, beta)]
        o, _, states = kernels.run_recurrent(*args, kind=kind, M=M,
                                             read_before_update=read_before_update,
                                             return_states=True)
        ctx.kernel_args = (args, states, kind, M, read_before_update)
        return torch.from_numpy(o).to(q.device)

    @staticmethod
    def backward(ctx, grad_o):
        args, states, kind, M, rbu = ctx.kernel_args
        g = kernels.run_recurrent_grad(*args, grad_o.detach().cpu().numpy(), kind=kind, M=M,
                                       read_before_update=rbu, states=states)
        dev = grad_o.device
        return (torch.from_numpy(g["q"]).to(dev), torch.from_numpy(g["k"]).to(dev),
                torch.from_numpy(g["v"]).to(dev), torch.from_numpy(g["beta"]).to(dev),
                None, None, None)


def recurrent_attention(q, k, v, beta, kind="lms", M=1, read_before_update=False):
    return RecurrentAttentionFunction.apply(q, k, v, beta, kind, M, read_before_update)


def causal_softmax_attention(q, k, v, scale=False):
    T = q.shape[-2]
    logits = q @ k.transpose(-1, -2)
    if scale:
        logits = logits / q.shape[-1] ** 0.5
    mask = torch.ones(T, T, dtype=torch.bool, device=q.device).tril()
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        if cfg.attention_kind != "softmax":
            # per-head write strength beta_i = sigmoid(w . z_i + b)
            self.gate = nn.Linear(d, cfg.heads)

    def forward(self, z):
        cfg = self.cfg
        B, T, d = z.shape
        q, k, v = self.qkv(z).split(d, dim=-1)
        q, k, v = (t.view(B, T, cfg.heads, cfg.head_dim).transpose(1, 2) for t in (q, k, v))
        if cfg.attention_kind == "softmax":
            o = causal_softmax_attention(q, k, v, cfg.scale_softmax)
        else:
            k = k / k.norm(dim=-1, keepdim=True).clamp_min(1e-8)
            beta = torch.sigmoid(self.gate(z)).transpose(1, 2)  # (B, heads, T)
            o = recurrent_attention(q, k, v, beta, cfg.attention_kind, cfg.M,
                                    cfg.read_before_update)
        return self.proj(o.transpose(1, 2).reshape(B, T, d))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(),
                                 nn.Linear(cfg.mlp_ratio * d, d))

    def forward(self, z):
        z = z + self.attn(self.ln1(z))
        return z + self.mlp(self.ln2(z))


def complex_to_real(a) -> np.ndarray:
    """Stack ``(Re, Im)`` along the last axis: (..., m) complex -> (..., 2m) real."""
    a = np.asarray(a)
    return np.concatenate([a.real, a.imag], axis=-1)


def real_to_complex(a) -> np.ndarray:
    a = np.asarray(a)
    m = a.shape[-1] // 2
    return a[..., :m] + 1j * a[..., m:]


class ICLTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.x_embed = nn.Linear(2 * cfg.m1, d)
        self.y_embed = nn.Linear(2 * cfg.m2, d)
        self.pos = nn.Embedding(cfg.max_seq_len, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, 2 * cfg.m1)
        self.apply(self._init_weights)
        # start near the zero predictor: layer-normed features have norm ~sqrt(d)
        nn.init.normal_(self.head.weight, std=0.02 / d**0.5)

    @staticmethod
    def _init_weights(mod):
        if isinstance(mod, nn.Linear):
            nn.init.normal_(mod.weight, std=0.02)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.Embedding):
            nn.init.normal_(mod.weight, std=0.02)

    def embed(self, x, y):
        """Interleave x/y tokens.

        Parameters
        ----------
        x : Tensor, shape (B, K, 2 m1)
            Real-stacked context inputs (the target is never embedded).
        y : Tensor, shape (B, K+1, 2 m2)

        Returns
        -------
        Tensor, shape (B, 2K+1, d)
        """
        B, K1, _ = y.shape
        K = K1 - 1
        if x.shape[:2] != (B, K):
            raise ContractViolation(f"x has shape {tuple(x.shape)}, expected ({B}, {K}, ...)")
        if x.shape[-1] != 2 * self.cfg.m1 or y.shape[-1] != 2 * self.cfg.m2:
            raise ContractViolation("token widths do not match the model's antenna counts")
        T = 2 * K + 1
        if T > self.cfg.max_seq_len:
            raise ContractViolation(f"{T} tokens exceed max_seq_len={self.cfg.max_seq_len}")
        ytok = self.y_embed(y)
        xtok = self.x_embed(x)
        pairs = torch.stack([ytok[:, :K], xtok], dim=2).reshape(B, 2 * K, self.cfg.embed_dim)
        tokens = torch.cat([pairs, ytok[:, K:]], dim=1)
        return tokens + self.pos.weight[:T]

    def forward_tokens(self, tokens):
        """Run the blocks and read out at the y-token (even) positions: (B, K+1, 2 m1)."""
        z = tokens
        for blk in self.blocks:
            z = blk(z)
        return self.head(self.ln_f(z[:, 0::2]))

    def forward(self, x, y):
        return self.forward_tokens(self.embed(x, y))


def loss_mse(pred, target):
    """Mean over batch and positions of the squared error summed over real components."""
    return ((pred - target) ** 2).sum(dim=-1).mean()


def batch_tensors(batch, dtype=torch.float32):
    """Real tensors ``(x_context, y_all, x_all)`` for a :class:`PromptBatch`."""
    x_all = torch.as_tensor(complex_to_real(batch.x), dtype=dtype)
    y_all = torch.as_tensor(complex_to_real(batch.y), dtype=dtype)
    return x_all[:, :-1], y_all, x_all


@torch.no_grad()
def predict_positions(model: ICLTransformer, batch, chunk: int = 512) -> np.ndarray:
    """Complex estimates at every y-position, shape (n, K+1, m1)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for s in range(0, len(batch), chunk):
        xc, y, _ = batch_tensors(batch[s:s + chunk], dtype)
        out.append(model(xc, y).cpu().numpy().astype(np.float64))
    return real_to_complex(np.concatenate(out))
