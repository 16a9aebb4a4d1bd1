"""Time-varying MIMO channel, QPSK transmission and quantized observation.

The channel follows a first-order autoregressive law

    H_1 ~ CN(0, I),   H_i = rho * H_{i-1} + sqrt(1 - rho^2) * W_i,   W_i ~ CN(0, sigma_w^2 I)

and the receiver sees ``y_i = Q_b(H_i x_i + e_i)`` with ``e_i ~ CN(0, sigma^2 I)``,
``sigma^2 = 10^(-snr_db / 10)``, and ``Q_b`` a midrise uniform quantizer on
[-4, 4] applied separately to real and imaginary parts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractViolation, make_rng, sample_cgauss

QUANT_RANGE = (-4.0, 4.0)
DATASET_SCHEMA = "icleq.prompt/1"


@dataclass(frozen=True)
class ChannelParams:
    """Generation parameters for one prompt.

    ``bits=None`` disables quantization and ``snr_db=math.inf`` disables
    receiver noise.
    """

    m1: int = 2
    m2: int = 2
    rho: float = 0.99
    sigma_w: float = 0.1
    snr_db: float = 30.0
    bits: int | None = 6
    K: int = 20

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ContractViolation(f"antenna counts must be >= 1, got ({self.m1}, {self.m2})")
        if not 0.0 <= self.rho < 1.0:
            raise ContractViolation(f"rho must lie in [0, 1), got {self.rho}")
        if self.sigma_w < 0:
            raise ContractViolation(f"sigma_w must be >= 0, got {self.sigma_w}")
        if self.K < 0:
            raise ContractViolation(f"K must be >= 0, got {self.K}")
        if self.bits is not None and not 1 <= self.bits <= 16:
            raise ContractViolation(f"bits must be in 1..16 or None, got {self.bits}")
        if math.isnan(self.snr_db):
            raise ContractViolation("snr_db is NaN")

    @property
    def sigma2(self) -> float:
        return snr_to_sigma2(self.snr_db)

    def replace(self, **changes) -> "ChannelParams":
        return ChannelParams(**{**asdict(self), **changes})


def snr_to_sigma2(snr_db):
    """Per-entry receiver noise variance for an SNR in dB (``inf`` gives 0)."""
    return np.where(np.isinf(snr_db), 0.0, 10.0 ** (-np.asarray(snr_db, dtype=float) / 10.0))[()]


@dataclass
class ChannelTrace:
    params: ChannelParams
    H: np.ndarray  # (K+1, m2, m1)

    def __post_init__(self):
        p = self.params
        if self.H.shape != (p.K + 1, p.m2, p.m1):
            raise ContractViolation(f"trace shape {self.H.shape} does not match params")


@dataclass
class Prompt:
    """Context pairs plus one query.

    Vectors are 1-D complex arrays. ``seed``/``index`` identify the random
    stream the prompt was drawn from, which is enough to regenerate ``trace``.
    """

    context_x: np.ndarray  # (K, m1)
    context_y: np.ndarray  # (K, m2)
    query_y: np.ndarray  # (m2,)
    target_x: np.ndarray  # (m1,)
    params: ChannelParams
    seed: int | None = None
    index: tuple[int, ...] = ()
    trace: ChannelTrace | None = field(default=None, repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.context_x.shape[0]

    @property
    def context(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.context_x, self.context_y))

    @property
    def query_channel(self) -> np.ndarray:
        if self.trace is None:
            self.trace = self.regenerate().trace
        return self.trace.H[-1]

    def regenerate(self) -> "Prompt":
        if self.seed is None:
            raise ContractViolation("prompt has no seed; its trace cannot be regenerated")
        return make_prompt(make_rng(self.seed, *self.index), self.params,
                           seed=self.seed, index=self.index)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.context_x, self.context_y, self.query_y, self.target_x):
            h.update(np.ascontiguousarray(a, dtype=np.complex128).tobytes())
        return h.hexdigest()


@dataclass
class PromptBatch:
    """Prompts stacked along a leading axis, the layout models consume.

    ``x`` and ``y`` hold all K+1 transmitted/received vectors in time order,
    so ``x[:, -1]`` is the target and ``y[:, -1]`` the query.
    """

    x: np.ndarray  # (n, K+1, m1) complex
    y: np.ndarray  # (n, K+1, m2) complex
    H: np.ndarray | None = None  # (n, m2, m1) channel at the query
    sigma2: np.ndarray | None = None  # (n,)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def K(self) -> int:
        return self.x.shape[1] - 1

    @classmethod
    def from_prompts(cls, prompts: Sequence[Prompt], with_channel: bool = True) -> "PromptBatch":
        if not prompts:
            raise ContractViolation("cannot batch an empty prompt list")
        x = np.stack([np.concatenate([p.context_x, p.target_x[None]]) for p in prompts])
        y = np.stack([np.concatenate([p.context_y, p.query_y[None]]) for p in prompts])
        H = np.stack([p.query_channel for p in prompts]) if with_channel else None
        sigma2 = np.array([p.params.sigma2 for p in prompts], dtype=float)
        return cls(x=x, y=y, H=H, sigma2=sigma2)

    def __getitem__(self, idx) -> "PromptBatch":
        return PromptBatch(
            x=self.x[idx], y=self.y[idx],
            H=None if self.H is None else self.H[idx],
            sigma2=None if self.sigma2 is None else self.sigma2[idx],
        )


def sample_qpsk(rng: np.random.Generator, m1: int, size: tuple[int, ...] = ()) -> np.ndarray:
    """Normalized QPSK vectors: every entry in ``(+-1 +- 1j) / sqrt(2 m1)``, so ``||x||^2 = 1``."""
    if m1 < 1:
        raise ContractViolation(f"m1 must be >= 1, got {m1}")
    bits = rng.integers(0, 2, size=tuple(size) + (m1, 2))
    signs = 1.0 - 2.0 * bits
    return (signs[..., 0] + 1j * signs[..., 1]) / np.sqrt(2.0 * m1)


def evolve_channels(rng: np.random.Generator, params: ChannelParams, rho=None,
                    size: tuple[int, ...] = (), initial_var: float = 1.0) -> np.ndarray:
    """Draw channel traces of shape ``size + (K+1, m2, m1)``.

    ``rho`` overrides ``params.rho`` and may be an array broadcastable to
    ``size`` (used when every trace in a pool has its own memory factor).
    ``initial_var=sigma_w**2`` starts the recursion in its stationary state.
    """
    p = params
    rho = np.asarray(p.rho if rho is None else rho, dtype=float)
    if np.any((rho < 0) | (rho >= 1)):
        raise ContractViolation("rho must lie in [0, 1)")
    rho = np.broadcast_to(rho, tuple(size))[..., None, None]
    innov = np.sqrt(1.0 - rho ** 2)
    H = np.empty(tuple(size) + (p.K + 1, p.m2, p.m1), dtype=np.complex128)
    H[..., 0, :, :] = sample_cgauss(rng, p.m2, p.m1, initial_var, size=size)
    for i in range(1, p.K + 1):
        W = sample_cgauss(rng, p.m2, p.m1, p.sigma_w ** 2, size=size)
        H[..., i, :, :] = rho * H[..., i - 1, :, :] + innov * W
    return H


def evolve_trace(rng: np.random.Generator, params: ChannelParams) -> ChannelTrace:
    return ChannelTrace(params, evolve_channels(rng, params))


def quantize_uniform(v, bits, lo: float = QUANT_RANGE[0], hi: float = QUANT_RANGE[1]):
    """Midrise uniform quantizer with ``2**bits`` levels on ``[lo, hi]``.

    Works elementwise on arrays; ``bits`` may itself be an integer array
    broadcastable against ``v``. Inputs outside the range saturate to the
    outermost level.
    """
    bits = np.asarray(bits)
    if np.any((bits < 1) | (bits > 16)):
        raise ContractViolation("bits must be in 1..16")
    if not lo < hi:
        raise ContractViolation(f"need lo < hi, got [{lo}, {hi}]")
    v = np.asarray(v, dtype=float)
    step = (hi - lo) / 2.0 ** bits
    level = lo + step * (np.floor((v - lo) / step) + 0.5)
    return np.clip(level, lo + step / 2, hi - step / 2)[()]


def quantize_complex(z, bits):
    """Quantize real and imaginary parts independently; ``bits`` of 0 or None means identity."""
    z = np.asarray(z, dtype=np.complex128)
    if bits is None:
        return z
    bits = np.broadcast_to(np.asarray(bits), z.shape)
    off = bits == 0
    b = np.where(off, 1, bits)
    q = quantize_uniform(z.real, b) + 1j * quantize_uniform(z.imag, b)
    return np.where(off, z, q)


def observe(rng: np.random.Generator, H, x, params: ChannelParams) -> np.ndarray:
    """Quantized noisy observation ``Q_b(H x + e)`` for a single channel use."""
    H = np.asarray(H, dtype=np.complex128)
    x = np.asarray(x, dtype=np.complex128)
    if H.ndim != 2 or x.ndim != 1 or H.shape[1] != x.shape[0]:
        raise ContractViolation(f"shape mismatch: H {H.shape}, x {x.shape}")
    if H.shape != (params.m2, params.m1):
        raise ContractViolation(f"H shape {H.shape} does not match params ({params.m2}, {params.m1})")
    clean = H @ x
    e = sample_cgauss(rng, H.shape[0], var=float(params.sigma2))
    return quantize_complex(clean + e, params.bits)


def make_prompt(rng: np.random.Generator, params: ChannelParams, seed: int | None = None,
                index: tuple[int, ...] = ()) -> Prompt:
    trace = evolve_trace(rng, params)
    xs, ys = [], []
    for Hi in trace.H:
        x = sample_qpsk(rng, params.m1)
        xs.append(x)
        ys.append(observe(rng, Hi, x, params))
    xs = np.array(xs)
    ys = np.array(ys)
    return Prompt(
        context_x=xs[:-1], context_y=ys[:-1], query_y=ys[-1], target_x=xs[-1],
        params=params, seed=seed, index=tuple(index), trace=trace,
    )


def seeded_prompts(params: ChannelParams, n: int, seed: int, *prefix: int) -> list[Prompt]:
    """``n`` prompts where prompt ``j`` depends only on ``(seed, *prefix, j)``."""
    return [make_prompt(make_rng(seed, *prefix, j), params, seed=seed, index=(*prefix, j))
            for j in range(n)]


def sample_prompt_batch(rng: np.random.Generator, H: np.ndarray, snr_db, bits) -> PromptBatch:
    """Draw symbols and observations for a batch of existing channel traces.

    Parameters
    ----------
    H : ndarray, shape (n, K+1, m2, m1)
    snr_db : float or ndarray (n,)
    bits : int or ndarray (n,)
        ``0`` (or None) leaves the corresponding prompt unquantized.
    """
    n, T, m2, m1 = H.shape
    x = sample_qpsk(rng, m1, size=(n, T))
    sigma2 = np.broadcast_to(np.asarray(snr_to_sigma2(snr_db), dtype=float), (n,))
    e = sample_cgauss(rng, m2, size=(n, T)) * np.sqrt(sigma2)[:, None, None]
    clean = np.einsum("ntij,ntj->nti", H, x)
    if bits is None:
        bits = 0
    b = np.broadcast_to(np.asarray(bits), (n,))[:, None, None]
    y = quantize_complex(clean + e, b)
    return PromptBatch(x=x, y=y, H=H[:, -1], sigma2=np.array(sigma2))


# -- dataset files ---------------------------------------------------------------

def _interleave(a: np.ndarray) -> list[float]:
    a = np.asarray(a, dtype=np.complex128).ravel()
    out = np.empty(2 * a.size)
    out[0::2] = a.real
    out[1::2] = a.imag
    return out.tolist()


def _deinterleave(vals: Iterable[float], shape) -> np.ndarray:
    r = np.asarray(list(vals), dtype=float)
    return (r[0::2] + 1j * r[1::2]).reshape(shape)


def _params_to_json(p: ChannelParams) -> dict:
    d = asdict(p)
    if math.isinf(p.snr_db):
        d["snr_db"] = "inf" if p.snr_db > 0 else "-inf"
    return d


def _params_from_json(d: dict) -> ChannelParams:
    d = dict(d)
    if isinstance(d.get("snr_db"), str):
        d["snr_db"] = float(d["snr_db"])
    return ChannelParams(**d)


def prompt_to_record(p: Prompt) -> dict:
    return {
        "schema": DATASET_SCHEMA,
        "seed": p.seed,
        "index": list(p.index),
        "params": _params_to_json(p.params),
        "context_x": _interleave(p.context_x),
        "context_y": _interleave(p.context_y),
        "query_y": _interleave(p.query_y),
        "target_x": _interleave(p.target_x),
    }


def prompt_from_record(rec: dict) -> Prompt:
    if rec.get("schema") != DATASET_SCHEMA:
        raise ContractViolation(f"unknown dataset schema {rec.get('schema')!r}")
    params = _params_from_json(rec["params"])
    K, m1, m2 = params.K, params.m1, params.m2
    return Prompt(
        context_x=_deinterleave(rec["context_x"], (K, m1)),
        context_y=_deinterleave(rec["context_y"], (K, m2)),
        query_y=_deinterleave(rec["query_y"], (m2,)),
        target_x=_deinterleave(rec["target_x"], (m1,)),
        params=params,
        seed=rec["seed"],
        index=tuple(rec["index"]),
    )


def write_prompts(path, prompts: Iterable[Prompt]) -> None:
    """Write one JSON record per line (schema ``icleq.prompt/1``).

    Floats are written with ``repr`` precision, so reading the file back
    reproduces every array bit for bit.
    """
    with open(Path(path), "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps(prompt_to_record(p), allow_nan=False) + "\n")


def read_prompts(path) -> list[Prompt]:
    with open(Path(path), encoding="utf-8") as fh:
        return [prompt_from_record(json.loads(line)) for line in fh if line.strip()]
