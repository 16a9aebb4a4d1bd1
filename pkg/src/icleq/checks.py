"""Self-checks runnable from the CLI and the test suite.

Each check returns a small report with the measured worst case so callers can
print it and compare against their own tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch

from . import kernels
from .baselines import lmmse_estimate
from .channel import ChannelParams, PromptBatch, sample_qpsk, seeded_prompts
from .model import ICLTransformer, ModelConfig, batch_tensors, loss_mse
from .numerics import make_rng, sample_cgauss


@dataclass
class CheckReport:
    name: str
    value: float
    tol: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tol:.1e})"


def _unit(rng, size):
    k = rng.standard_normal(size)
    return k / np.linalg.norm(k, axis=-1, keepdims=True)


# -- kernel identities ------------------------------------------------------------------------

def check_multi_lms_iterated(trials=1000, dims=(2, 8, 16), steps=(1, 2, 4, 8, 16), seed=0,
                             tol=1e-10) -> CheckReport:
    """Closed-form M-step update against M explicit LMS steps."""
    rng = make_rng(seed, 101)
    worst = 0.0
    for t in range(trials):
        d = dims[t % len(dims)]
        M = steps[(t // len(dims)) % len(steps)]
        S = rng.standard_normal((d, d))
        k = _unit(rng, d)
        v = rng.standard_normal(d)
        beta = rng.uniform(0.01, 0.99)
        it = S
        for _ in range(M):
            it = kernels.lms_step(it, k, v, beta)
        worst = max(worst, float(np.max(np.abs(kernels.multi_lms_step(S, k, v, beta, M) - it))))
    return CheckReport("multi_lms closed form == M iterated lms steps", worst, tol, worst <= tol)


def check_geometric_error_law(trials=1000, seed=0, tol=1e-10) -> CheckReport:
    """Residual after M fused steps shrinks by exactly (1 - beta)^M for unit keys."""
    rng = make_rng(seed, 102)
    worst = 0.0
    for t in range(trials):
        d = (2, 8, 16)[t % 3]
        M = (1, 2, 4, 8, 16)[(t // 3) % 5]
        S = rng.standard_normal((d, d))
        k = _unit(rng, d)
        v = rng.standard_normal(d)
        beta = rng.uniform(0.01, 0.99)
        before = np.linalg.norm(S @ k - v)
        after = np.linalg.norm(kernels.multi_lms_step(S, k, v, beta, M) @ k - v)
        predicted = (1.0 - beta) ** M * before
        # relative to the pre-update residual: the post-update one can underflow toward 0
        worst = max(worst, abs(after - predicted) / before)
    return CheckReport("multi_lms residual follows (1-beta)^M law", worst, tol, worst <= tol)


def check_deltanet_form(trials=1000, seed=0, tol=1e-12) -> CheckReport:
    rng = make_rng(seed, 103)
    worst = 0.0
    for t in range(trials):
        d = (2, 4, 8, 16)[t % 4]
        S = rng.standard_normal((d, d))
        k = _unit(rng, d)
        v = rng.standard_normal(d)
        beta = rng.uniform(0, 1)
        diff = kernels.lms_step(S, k, v, beta) - kernels.lms_step_deltanet(S, k, v, beta)
        worst = max(worst, float(np.max(np.abs(diff))))
    return CheckReport("lms update == DeltaNet form", worst, tol, worst <= tol)


def check_lrms_outlier(instances=100, outlier=1e6, seed=0, tol=1e-12) -> CheckReport:
    """LRMS update norm stays beta*||k|| under a huge outlier; LMS does not.

    ``value`` is the worst relative deviation of the LRMS update norm from
    ``beta ||k||``; ``detail['lms_min_ratio']`` is the smallest LMS update
    norm in units of ``beta ||k||``.
    """
    rng = make_rng(seed, 104)
    worst = 0.0
    lms_min = np.inf
    for _ in range(instances):
        d = int(rng.integers(2, 17))
        S = rng.standard_normal((d, d))
        k = _unit(rng, d)
        v = rng.standard_normal(d) * outlier
        beta = rng.uniform(0.01, 0.99)
        ref = beta * np.linalg.norm(k)
        lrms = np.linalg.norm(kernels.lrms_step(S, k, v, beta) - S)
        lms = np.linalg.norm(kernels.lms_step(S, k, v, beta) - S)
        worst = max(worst, abs(lrms - ref) / ref)
        lms_min = min(lms_min, lms / ref)
    passed = worst <= tol and lms_min > 1e5
    return CheckReport("lrms update norm == beta*||k|| under outliers", worst, tol, passed,
                       {"lms_min_ratio": float(lms_min)})


def kernel_checks(seed=0) -> list[CheckReport]:
    return [check_multi_lms_iterated(seed=seed), check_geometric_error_law(seed=seed),
            check_deltanet_form(seed=seed), check_lrms_outlier(seed=seed)]


# -- model gradients ----------------------------------------------------------------------------

def gradcheck_model(kind: str, M: int = 4, embed_dim: int = 8, heads: int = 2, K: int = 4,
                    n_prompts: int = 3, seed: int = 0, h: float = 1e-4, rtol: float = 1e-3,
                    atol: float = 1e-6, init_scale: float = 0.3) -> CheckReport:
    """Compare autograd gradients of the full 1-layer model with central differences.

    Parameters are redrawn at ``init_scale`` so that gradients are well above
    the absolute floor. An entry passes if
    ``|analytic - numeric| <= max(atol, rtol * |numeric|)``.
    """
    cfg = ModelConfig(layers=1, heads=heads, embed_dim=embed_dim, attention_kind=kind,
                      M=M if kind == "multi_lms" else 1, max_seq_len=2 * K + 1)
    gen = torch.Generator().manual_seed(seed)
    model = ICLTransformer(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(init_scale * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    params = ChannelParams(K=K, snr_db=10.0, bits=None)
    batch = PromptBatch.from_prompts(seeded_prompts(params, n_prompts, seed, 7),
                                     with_channel=False)
    xc, y, target = batch_tensors(batch, torch.float64)

    model.zero_grad()
    loss_mse(model(xc, y), target).backward()
    worst = 0.0
    worst_name = ""
    n_entries = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                fp = loss_mse(model(xc, y), target).item()
                flat[i] = old - h
                fm = loss_mse(model(xc, y), target).item()
                flat[i] = old
                numeric = (fp - fm) / (2 * h)
                err = abs(analytic[i].item() - numeric)
                ratio = err / max(atol, rtol * abs(numeric))
                n_entries += 1
                if ratio > worst:
                    worst, worst_name = ratio, f"{name}[{i}]"
    return CheckReport(f"gradcheck {kind}", worst, 1.0, worst <= 1.0,
                       {"worst_entry": worst_name, "entries": n_entries})


# -- LMMSE oracles --------------------------------------------------------------------------------

def ridge_solve(H, y, sigma2):
    """Independent route: least squares on the stacked system ``[H; sqrt(2 sigma2) I] x = [y; 0]``."""
    m1 = H.shape[1]
    A = np.vstack([H, np.sqrt(2.0 * sigma2) * np.eye(m1)])
    b = np.concatenate([y, np.zeros(m1)])
    return scipy.linalg.lstsq(A, b)[0]


def check_lmmse_ridge(trials=200, seed=0, tol=1e-8) -> CheckReport:
    rng = make_rng(seed, 105)
    worst = 0.0
    for _ in range(trials):
        H = sample_cgauss(rng, 2, 2)
        y = sample_cgauss(rng, 2)
        s2 = float(rng.uniform(0.001, 1.0))
        worst = max(worst, float(np.max(np.abs(lmmse_estimate(H, y, s2) - ridge_solve(H, y, s2)))))
    return CheckReport("lmmse == generic ridge solve", worst, tol, worst <= tol)


def check_lmmse_vs_fitted_filter(n: int = 100_000, sigma2: float = 0.1, channels: int = 3,
                                 seed: int = 0) -> CheckReport:
    """LMMSE against a least-squares linear filter fitted on ``n`` samples.

    For each of a few fixed channels, normalized QPSK inputs are sent without
    quantization. A filter is fitted on one half of the data and
    both estimators are scored on the other half. ``value`` is the worst
    ``(mse_lmmse - mse_fitted) / se`` where ``se`` is the standard error of
    the paired difference; the check passes below 3.
    """
    rng = make_rng(seed, 106)
    m1 = m2 = 2
    worst = -np.inf
    detail = {}
    for c in range(channels):
        H = sample_cgauss(rng, m2, m1)
        x = sample_qpsk(rng, m1, size=(n,))
        y = x @ H.T + sample_cgauss(rng, m2, var=sigma2, size=(n,))
        half = n // 2
        W_fit = np.linalg.lstsq(y[:half], x[:half], rcond=None)[0]  # x^T ~= y^T W
        G = np.linalg.solve(2 * sigma2 * np.eye(m1) + H.conj().T @ H, H.conj().T)
        xt, yt = x[half:], y[half:]
        e_lmmse = np.sum(np.abs(yt @ G.T - xt) ** 2, axis=1)
        e_fit = np.sum(np.abs(yt @ W_fit - xt) ** 2, axis=1)
        d = e_lmmse - e_fit
        se = d.std(ddof=1) / np.sqrt(d.size)
        detail[f"channel{c}"] = (float(e_lmmse.mean()), float(e_fit.mean()), float(se))
        worst = max(worst, float(d.mean() / se))
    return CheckReport("lmmse mse <= fitted linear filter + 3 se", worst, 3.0, worst <= 3.0, detail)
