"""Monte-Carlo evaluation, parameter sweeps and their CSV / SVG outputs."""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .baselines import lmmse_batch
from .channel import ChannelParams, PromptBatch, seeded_prompts
from .numerics import ContractViolation

AXES = ("rho", "snr_db", "bits", "M")
CSV_HEADER = ["axis", "value", "method", "mse", "stderr", "n", "seed"]

DEFAULT_GRIDS = {
    "rho": [0.90, 0.925, 0.95, 0.975, 0.99],
    "snr_db": [0.0, 10.0, 20.0, 30.0],
    "bits": [1, 2, 4, 6],
}
DEFAULT_N_EVAL = 200


@dataclass
class SweepSpec:
    axis: str
    grid: Sequence
    fixed: ChannelParams = field(default_factory=ChannelParams)
    n_eval: int = DEFAULT_N_EVAL
    seed: int = 0
    methods: Sequence[str] = ("lmmse", "zero")

    def __post_init__(self):
        if self.axis not in AXES:
            raise ContractViolation(f"axis must be one of {AXES}, got {self.axis!r}")
        if len(self.grid) == 0:
            raise ContractViolation("sweep grid is empty")
        if self.n_eval < 1:
            raise ContractViolation("n_eval must be >= 1")
        for v in self.grid:
            self.cell_params(v)  # validates the grid value
        if self.axis == "M" and any(int(v) < 1 for v in self.grid):
            raise ContractViolation("M grid values must be >= 1")

    def cell_params(self, value) -> ChannelParams:
        if self.axis == "M":
            return self.fixed
        if self.axis == "bits":
            value = None if value is None else int(value)
        else:
            value = float(value)
        return self.fixed.replace(**{self.axis: value})


@dataclass(frozen=True)
class ResultRow:
    axis: str
    value: float
    method: str
    mse: float
    stderr: float
    n: int
    seed: int


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    # (axis value, method) -> digest of the prompts evaluated in that cell
    prompt_digests: dict = field(default_factory=dict, compare=False)

    def sorted(self) -> "ResultTable":
        rows = sorted(self.rows, key=lambda r: (r.value, r.method))
        return ResultTable(rows, dict(self.prompt_digests))

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})

    def lookup(self, value, method) -> ResultRow:
        for r in self.rows:
            if r.value == value and r.method == method:
                return r
        raise KeyError((value, method))


# -- methods ------------------------------------------------------------------------------

def _lmmse(batch: PromptBatch) -> np.ndarray:
    if batch.H is None:
        raise ContractViolation("LMMSE needs the query channel; batch has none")
    return lmmse_batch(batch.H, batch.y[:, -1], batch.sigma2)


def _zero(batch: PromptBatch) -> np.ndarray:
    return np.zeros(batch.x[:, -1].shape, dtype=np.complex128)


def resolve_method(method, M=None) -> Callable[[PromptBatch], np.ndarray]:
    """Map a method reference to ``f(batch) -> final-position estimates (n, m1)``.

    Accepted references: ``'lmmse'``, ``'zero'``, ``'model:<checkpoint dir>'``
    (``{M}`` in the path is replaced by the sweep's M value), a fitted
    :class:`~icleq.estimators.ICLEqualizer`, or any callable of that
    signature.
    """
    if callable(method) and not isinstance(method, str):
        return method
    if hasattr(method, "predict"):
        return method.predict
    if method == "lmmse":
        return _lmmse
    if method == "zero":
        return _zero
    if isinstance(method, str) and method.startswith("model:"):
        from .estimators import ICLEqualizer

        path = method[len("model:"):]
        if M is not None:
            path = path.replace("{M}", str(int(M)))
        return ICLEqualizer.load(path).predict
    raise ContractViolation(f"unknown method {method!r}")


def method_label(method) -> str:
    if isinstance(method, str):
        return method
    return getattr(method, "label", None) or type(method).__name__


# -- evaluation ---------------------------------------------------------------------------

def eval_prompts(params: ChannelParams, n_eval: int, seed: int, prefix=(), workers: int = 1):
    """Seed-indexed evaluation prompts; identical for every worker count."""
    if n_eval < 1:
        raise ContractViolation("n_eval must be >= 1")
    if workers <= 1:
        return seeded_prompts(params, n_eval, seed, *prefix)
    bounds = np.linspace(0, n_eval, workers + 1).astype(int)
    jobs = [(params, seed, tuple(prefix), int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        chunks = list(ex.map(_gen_chunk_indexed, jobs))
    return [p for chunk in chunks for p in chunk]


def _gen_chunk_indexed(args):
    from .channel import make_prompt
    from .numerics import make_rng

    params, seed, prefix, start, stop = args
    return [make_prompt(make_rng(seed, *prefix, j), params, seed=seed, index=(*prefix, j))
            for j in range(start, stop)]


def batch_digest(batch: PromptBatch) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.x).tobytes())
    h.update(np.ascontiguousarray(batch.y).tobytes())
    return h.hexdigest()


def mean_and_stderr(errors) -> tuple[float, float]:
    errors = np.asarray(errors, dtype=float)
    n = errors.size
    mean = float(np.mean(errors))
    se = float(np.std(errors, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def squared_errors(estimates, targets) -> np.ndarray:
    return np.sum(np.abs(np.asarray(estimates) - np.asarray(targets)) ** 2, axis=-1)


def evaluate(method, params: ChannelParams, n_eval: int = DEFAULT_N_EVAL, seed: int = 0,
             workers: int = 1) -> tuple[float, float]:
    """Mean and standard error of ``||x_hat_{K+1} - x_{K+1}||^2`` over seeded prompts."""
    fn = resolve_method(method)
    batch = PromptBatch.from_prompts(eval_prompts(params, n_eval, seed, workers=workers))
    return mean_and_stderr(squared_errors(fn(batch), batch.x[:, -1]))


def evaluate_positions(model, params: ChannelParams, n_eval: int = DEFAULT_N_EVAL,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-position mean MSE and standard error for a fitted equalizer.

    Entry ``i`` (0-based) is the error predicting ``x_{i+1}`` from the ``i``
    preceding context pairs.
    """
    batch = PromptBatch.from_prompts(eval_prompts(params, n_eval, seed), with_channel=False)
    err = squared_errors(model.predict_positions(batch), batch.x)
    n = err.shape[0]
    se = err.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(err.shape[1])
    return err.mean(axis=0), se


def run_sweep(spec: SweepSpec, workers: int = 1) -> ResultTable:
    """Evaluate every (grid value, method) cell with common random numbers.

    All methods in a cell see the same prompts, drawn from
    ``(spec.seed, cell index, prompt index)``. Model checkpoints are loaded
    before any evaluation so a missing one fails fast.
    """
    resolved = {}
    for v in spec.grid:
        M = v if spec.axis == "M" else None
        for m in spec.methods:
            resolved[(v, method_label(m))] = resolve_method(m, M)
    table = ResultTable()
    for ci, v in enumerate(spec.grid):
        params = spec.cell_params(v)
        batch = PromptBatch.from_prompts(eval_prompts(params, spec.n_eval, spec.seed, (ci,),
                                                      workers=workers))
        digest = batch_digest(batch)
        for m in spec.methods:
            label = method_label(m)
            mean, se = mean_and_stderr(squared_errors(resolved[(v, label)](batch),
                                                      batch.x[:, -1]))
            value = float("nan") if v is None else float(v)
            table.rows.append(ResultRow(spec.axis, value, label, mean, se, spec.n_eval, spec.seed))
            table.prompt_digests[(value, label)] = digest
    return table.sorted()


# -- output -------------------------------------------------------------------------------

def emit_csv(table: ResultTable, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in table.sorted().rows:
            w.writerow([r.axis, repr(r.value), r.method, repr(r.mse), repr(r.stderr), r.n, r.seed])
    return path


def read_csv(path) -> ResultTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ContractViolation(f"unexpected CSV header {header}")
        rows = [ResultRow(a, float(v), m, float(mse), float(se), int(n), int(s))
                for a, v, m, mse, se, n, s in reader]
    return ResultTable(rows)


_AXIS_LABELS = {"rho": "memory factor rho", "snr_db": "SNR (dB)", "bits": "quantization bits b",
                "M": "steps M"}
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def emit_plot(table: ResultTable, path, title: str | None = None) -> Path:
    """Render MSE versus the sweep axis as a standalone SVG.

    One ``<polyline>`` per method, log-scale MSE axis with ticks at decades,
    legend and axis labels. Output depends only on the table contents.
    """
    rows = [r for r in table.sorted().rows if r.mse > 0 and math.isfinite(r.value)]
    if not rows:
        raise ContractViolation("cannot plot an empty table")
    W, H = 640, 420
    left, right, top, bottom = 70, 150, 30, 55
    pw, ph = W - left - right, H - top - bottom

    xs = sorted({r.value for r in rows})
    x_lo, x_hi = xs[0], xs[-1]
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    lmin = math.floor(math.log10(min(r.mse for r in rows)))
    lmax = math.ceil(math.log10(max(r.mse for r in rows)))
    if lmax == lmin:
        lmax += 1

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(mse):
        return top + (lmax - math.log10(mse)) / (lmax - lmin) * ph

    axis = rows[0].axis
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for e in range(lmin, lmax + 1):
        y = py(10.0 ** e)
        out.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end">1e{e}</text>')
    for x in xs:
        out.append(f'<text x="{_fmt(px(x))}" y="{top + ph + 16}" text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{H - 12}" text-anchor="middle">'
               f'{_AXIS_LABELS.get(axis, axis)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.2f})">MSE</text>')
    for i, method in enumerate(sorted({r.method for r in rows})):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{_fmt(px(r.value))},{_fmt(py(r.mse))}" for r in rows if r.method == method)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 36}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 42}" y="{ly + 4}">{escape(method)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path
