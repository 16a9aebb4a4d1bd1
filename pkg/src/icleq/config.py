"""Plain-text run configuration.

INI-style ``key = value`` file with up to four sections::

    [channel]        ; ChannelParams: m1 m2 rho sigma_w snr_db bits K
    bits = 6         ; integer 1..16 or "none"
    snr_db = 30      ; float, "inf" for a noiseless receiver

    [model]          ; ModelConfig: layers heads embed_dim attention_kind M
    attention_kind = lms                 ; max_seq_len m1 m2 mlp_ratio
                                         ; read_before_update scale_softmax
    [train]          ; TrainConfig: steps batch_size learning_rate adam_betas
    steps = 5000     ; adam_eps seed pool_size K sigma_w rho_range snr_range
                     ; bits_range checkpoint_every (ranges as "lo, hi")
    [sweep]          ; axis grid n_eval methods (lists comma-separated)
    axis = snr_db
    grid = 0, 10, 20, 30
    methods = lmmse, zero, model:runs/lms

Unknown sections or keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from pathlib import Path

from .channel import ChannelParams
from .model import ModelConfig
from .numerics import ContractViolation
from .training import TrainConfig

SECTIONS = ("channel", "model", "train", "sweep")
SWEEP_KEYS = {"axis": str, "grid": list, "n_eval": int, "methods": list}


def _parse_scalar(text: str, like):
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractViolation(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text: str, default):
    if isinstance(default, tuple):
        return tuple(_parse_scalar(t, default[0]) for t in text.split(","))
    if default is None:
        # only ChannelParams.bits defaults to an optional int
        return None if text.strip().lower() == "none" else int(text)
    return _parse_scalar(text, default)


def _section_kwargs(cp, section: str, cls) -> dict:
    if not cp.has_section(section):
        return {}
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    out = {}
    for key, text in cp.items(section):
        if key not in defaults:
            raise ContractViolation(f"unknown key {key!r} in [{section}]")
        like = defaults[key]
        if key == "bits" and section == "channel":
            like = None
        out[key] = _parse_value(text, like)
    return out


def _parse_grid_value(text: str):
    text = text.strip()
    if text.lower() == "none":
        return None
    v = float(text)
    return int(v) if v.is_integer() and "." not in text and not math.isinf(v) else v


def load_config(path) -> dict:
    """Read a config file into ``{'channel': {...}, 'model': {...}, 'train': {...}, 'sweep': {...}}``.

    Values are already converted to Python types; each mapping can be passed
    as keyword arguments to the matching dataclass.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keys such as K and M are case-sensitive
    path = Path(path)
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    for s in cp.sections():
        if s not in SECTIONS:
            raise ContractViolation(f"unknown config section [{s}]")
    cfg = {
        "channel": _section_kwargs(cp, "channel", ChannelParams),
        "model": _section_kwargs(cp, "model", ModelConfig),
        "train": _section_kwargs(cp, "train", TrainConfig),
        "sweep": {},
    }
    if cp.has_section("sweep"):
        for key, text in cp.items("sweep"):
            if key not in SWEEP_KEYS:
                raise ContractViolation(f"unknown key {key!r} in [sweep]")
            if key == "grid":
                cfg["sweep"][key] = [_parse_grid_value(t) for t in text.split(",")]
            elif key == "methods":
                cfg["sweep"][key] = [t.strip() for t in text.split(",") if t.strip()]
            else:
                cfg["sweep"][key] = SWEEP_KEYS[key](text.strip())
    return cfg
