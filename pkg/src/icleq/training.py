"""Pretraining loop, Adam step and checkpoint files."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import ChannelParams, PromptBatch, evolve_channels, sample_prompt_batch
from .model import ICLTransformer, ModelConfig, batch_tensors, loss_mse
from .numerics import ContractViolation, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "icleq.checkpoint"
CHECKPOINT_VERSION = 1
DIVERGENCE_LOSS = 1e3

# stream ids for make_rng(seed, stream, ...)
_POOL_STREAM, _BATCH_STREAM = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    pool_size: int = 2000
    K: int = 20
    sigma_w: float = 0.1
    rho_range: tuple[float, float] = (0.9, 1.0)
    snr_range: tuple[float, float] = (0.0, 30.0)
    bits_range: tuple[int, int] = (1, 6)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.pool_size < 1:
            raise ContractViolation("steps, batch_size and pool_size must be >= 1")
        if self.learning_rate <= 0:
            raise ContractViolation(f"learning_rate must be positive, got {self.learning_rate}")
        lo, hi = self.rho_range
        if not 0 <= lo <= hi <= 1:
            raise ContractViolation(f"bad rho_range {self.rho_range}")
        if not 1 <= self.bits_range[0] <= self.bits_range[1] <= 16:
            raise ContractViolation(f"bad bits_range {self.bits_range}")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    """Loss blew up; ``last_good`` holds the state dict from the previous step."""

    def __init__(self, step: int, loss: float, last_good: dict):
        self.step = step
        self.loss = loss
        self.last_good = last_good
        super().__init__(f"training diverged at step {step} (loss={loss})")


@dataclass
class TrainResult:
    model: ICLTransformer
    optimizer: torch.optim.Adam
    losses: list[float] = field(default_factory=list)


def channel_pool(cfg: TrainConfig, m1: int, m2: int) -> np.ndarray:
    """Fixed pool of ``pool_size`` traces, each with its own ``rho ~ U[rho_range)``."""
    rng = make_rng(cfg.seed, _POOL_STREAM)
    lo, hi = cfg.rho_range
    rho = rng.uniform(lo, hi, size=cfg.pool_size)
    # U[lo, 1) can round up to exactly 1.0 in the last ulp
    rho = np.minimum(rho, np.nextafter(1.0, 0.0))
    params = ChannelParams(m1=m1, m2=m2, rho=0.0, sigma_w=cfg.sigma_w, bits=None, K=cfg.K)
    return evolve_channels(rng, params, rho=rho, size=(cfg.pool_size,))


def training_batch(cfg: TrainConfig, pool: np.ndarray, step: int) -> PromptBatch:
    """Batch for ``step``; depends only on ``(seed, step)`` and the pool."""
    rng = make_rng(cfg.seed, _BATCH_STREAM, step)
    idx = rng.integers(0, pool.shape[0], size=cfg.batch_size)
    snr = rng.uniform(*cfg.snr_range, size=cfg.batch_size)
    bits = rng.integers(cfg.bits_range[0], cfg.bits_range[1] + 1, size=cfg.batch_size)
    return sample_prompt_batch(rng, pool[idx], snr, bits)


def build_model(model_config: ModelConfig, seed: int, dtype=torch.float32) -> ICLTransformer:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ICLTransformer(model_config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)


def adam_step(model: torch.nn.Module, optimizer: torch.optim.Adam) -> None:
    """Apply one Adam update from the gradients stored on ``model``.

    Raises
    ------
    FloatingPointError
        Naming the first parameter whose gradient is not finite; the
        parameters are left untouched.
    """
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    optimizer.step()


def train(train_config: TrainConfig, model_config: ModelConfig, batches=None,
          checkpoint_dir=None, log_every: int = 0) -> TrainResult:
    """Pretrain a fresh model.

    Parameters
    ----------
    batches : PromptBatch or callable, optional
        A fixed batch reused every step, or ``f(step) -> PromptBatch``. By
        default batches are drawn from a seeded channel pool per
        ``train_config``.
    checkpoint_dir : path, optional
        Written every ``checkpoint_every`` steps and at the end.
    """
    if 2 * train_config.K + 1 > model_config.max_seq_len:
        raise ContractViolation(f"K={train_config.K} needs max_seq_len >= {2 * train_config.K + 1}")
    model = build_model(model_config, train_config.seed)
    optimizer = make_optimizer(model, train_config)
    if batches is None:
        pool = channel_pool(train_config, model_config.m1, model_config.m2)

        def next_batch(step):
            return batch_tensors(training_batch(train_config, pool, step))

    elif isinstance(batches, PromptBatch):
        fixed = batch_tensors(batches)

        def next_batch(step):
            return fixed

    else:
        def next_batch(step):
            return batch_tensors(batches(step))

    result = TrainResult(model, optimizer)
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for step in range(train_config.steps):
        xc, y, target = next_batch(step)
        loss = loss_mse(model(xc, y), target)
        value = loss.item()
        if not math.isfinite(value) or value > DIVERGENCE_LOSS:
            model.load_state_dict(last_good)
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, model, model_config, train_config, step,
                                optimizer)
            raise TrainingDiverged(step, value, last_good)
        result.losses.append(value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        adam_step(model, optimizer)
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.5f", step + 1, value)
        if checkpoint_dir is not None and train_config.checkpoint_every and \
                (step + 1) % train_config.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, model, model_config, train_config, step + 1, optimizer)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, model_config, train_config,
                        train_config.steps, optimizer)
    model.eval()
    return result


def write_loss_csv(path, losses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses, start=1):
            fh.write(f"{i},{v!r}\n")


# -- checkpoints -------------------------------------------------------------------

def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(path, model: ICLTransformer, model_config: ModelConfig,
                    train_config: TrainConfig | None, step: int,
                    optimizer: torch.optim.Adam | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per tensor.

    Adam moments are stored as ``adam.exp_avg/<param>`` and
    ``adam.exp_avg_sq/<param>``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {name: p.detach() for name, p in model.state_dict().items()}
    adam_step_count = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                tensors[f"adam.exp_avg/{names[id(p)]}"] = st["exp_avg"]
                tensors[f"adam.exp_avg_sq/{names[id(p)]}"] = st["exp_avg_sq"]
                adam_step_count = int(st["step"])
    entries = []
    for name, t in tensors.items():
        data = t.cpu().numpy().astype("<f4").tobytes()
        fname = _tensor_file(name)
        (path / fname).write_bytes(data)
        entries.append({"name": name, "shape": list(t.shape), "file": fname,
                        "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "seed": None if train_config is None else train_config.seed,
        "adam_step": adam_step_count,
        "model_config": model_config.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path):
    """Return ``(model, manifest)``; verifies every tensor checksum."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint {manifest.get('format')} "
                              f"v{manifest.get('version')}")
    model_config = ModelConfig(**manifest["model_config"])
    model = ICLTransformer(model_config)
    state = {}
    for e in manifest["tensors"]:
        data = (path / e["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for tensor {e['name']!r}")
        arr = np.frombuffer(data, dtype="<f4").reshape(e["shape"])
        if not e["name"].startswith("adam."):
            state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def train_config_from_manifest(manifest: dict) -> TrainConfig | None:
    tc = manifest.get("train_config")
    if tc is None:
        return None
    tc = dict(tc)
    for key in ("adam_betas", "rho_range", "snr_range", "bits_range"):
        tc[key] = tuple(tc[key])
    return TrainConfig(**tc)
