"""Run configuration: a flat ``key = value`` text format with two presets.

Lines are ``key = value``; ``#`` starts a comment. ``preset`` (desk or paper) is applied
first and every other key overrides it. Unknown keys and malformed values are errors.
The paper preset pins its published values: overriding a pinned key is an error.
Booleans are true/false, lists are comma-separated, and ``beam_width = 0`` means the
default width max(2N, 16).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import data
from . import model as M

PROMPTS = ("neighbor", "pointwise", "mlp")
ORDERS = ("shuffle", "chronological")
VARIANTS = ("full", "no_location_scores", "no_location_gate", "vanilla_attention", "pointwise_prompt",
            "mlp_prompt", "no_geo_reward", "no_gmv_reward")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # data: "synthetic", a check-in TSV file, or a saved dataset directory
    data_source: str = "synthetic"
    n_users: int = 64
    n_videos: int = 800
    n_cells: int = 24
    events_per_user: int = 20
    distance_decay: float = 0.8
    anchor_taste_mix: float = 0.6  # location-dependent interest: each anchor has its own taste
    explore_prob: float = 0.0
    # tokenizer
    n_levels: int = 3
    n_codes: int = 64
    kmeans_restarts: int = 3
    # model
    d_video: int = 32
    d_lid: int = 16
    d_lc: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_blocks: int = 2
    d_prompt: int = 32
    gate_hidden: int = 32
    max_watch: int = 32
    max_click: int = 8
    max_pay: int = 4
    use_location_scores: bool = True
    use_location_gate: bool = True
    prompt: str = "neighbor"
    dtype: str = "float64"
    # pre-training
    lr: float = 1e-3
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 32
    steps: int = 1500
    order: str = "shuffle"
    eval_every: int = 250
    resume: bool = False
    # post-training
    rounds: int = 2
    n_candidates: int = 8
    lam: float = 0.05
    beta: float = 0.1
    post_lr: float = 1e-3
    D: float = 10.0
    dist_floor: float = 0.1
    w_geo: float = 0.5
    w_gmv: float = 0.5
    # evaluation
    ks: tuple = (5, 10, 20)
    beam_width: int = 0
    profile_k: int = 10
    eval_checkpoint: str = "pretrain"
    variants: tuple = ("full",)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        checks = [
            (self.prompt in PROMPTS, f"prompt must be one of {PROMPTS}"),
            (self.order in ORDERS, f"order must be one of {ORDERS}"),
            (self.dtype in ("float64", "float32"), "dtype must be float64 or float32"),
            (self.eval_checkpoint in ("pretrain", "posttrain"), "eval_checkpoint must be pretrain or posttrain"),
            (self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads"),
            (min(self.n_levels, self.n_codes, self.steps, self.batch_size, self.eval_every, self.n_candidates,
                 self.profile_k, self.n_users, self.n_videos) >= 1, "sizes and counts must be positive"),
            (0 <= self.anchor_taste_mix <= 1 and 0 <= self.explore_prob <= 1,
             "anchor_taste_mix and explore_prob must lie in [0, 1]"),
            (self.rounds >= 0 and self.beam_width >= 0, "rounds and beam_width must be non-negative"),
            (self.lr > 0 and self.post_lr > 0 and self.beta > 0 and self.lam >= 0, "bad optimizer or loss weight"),
            (self.D > 0 and self.dist_floor > 0, "D and dist_floor must be positive"),
            (self.w_geo >= 0 and self.w_gmv >= 0 and self.w_geo + self.w_gmv > 0, "bad reward weights"),
            (bool(self.ks) and min(self.ks) >= 1, "ks must be positive"),
            (bool(self.variants) and set(self.variants) <= set(VARIANTS), f"variants must be among {VARIANTS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.beam_width and self.beam_width < max(self.ks):
            raise ConfigError("beam_width must be at least max(ks)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return data.config_hash(self.to_dict())

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def world(self) -> data.WorldConfig:
        return data.WorldConfig(n_users=self.n_users, n_videos=self.n_videos, n_cells=self.n_cells,
                                events_per_user=self.events_per_user, distance_decay=self.distance_decay,
                                anchor_taste_mix=self.anchor_taste_mix, explore_prob=self.explore_prob,
                                seed=self.seed)

    def model(self, catalog) -> M.ModelConfig:
        names = {f.name for f in fields(M.ModelConfig)} - {"n_videos", "n_cells", "attr_dim"}
        kw = {k: v for k, v in self.to_dict().items() if k in names}
        return M.ModelConfig(n_videos=len(catalog), n_cells=len(catalog.cell_vocab) + 1,
                             attr_dim=catalog.attr_dim, **kw)

    def for_variant(self, variant: str) -> "RunConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        return self.replace(**VARIANT_SWITCHES[variant])


VARIANT_SWITCHES = {
    "full": {},
    "no_location_scores": dict(use_location_scores=False),
    "no_location_gate": dict(use_location_gate=False),
    "vanilla_attention": dict(use_location_scores=False, use_location_gate=False),
    "pointwise_prompt": dict(prompt="pointwise"),
    "mlp_prompt": dict(prompt="mlp"),
    "no_geo_reward": dict(w_geo=0.0),
    "no_gmv_reward": dict(w_gmv=0.0),
}

PAPER_PINS = dict(n_codes=8192, n_levels=3, n_blocks=4, d_model=1024, n_heads=8, d_ff=4096,
                  max_watch=256, max_click=32, max_pay=10, lr=2e-4, lam=0.05)
PRESETS = {"desk": {}, "paper": PAPER_PINS}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse(key: str, raw: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if key == "ks" else tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _parse(key, raw)
    return from_dict(values)


def from_dict(values: dict) -> RunConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    preset = values.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    pins = PRESETS[preset]
    for k, v in values.items():
        if k in pins and v != pins[k]:
            raise ConfigError(f"preset {preset!r} pins {k} = {pins[k]}")
    try:
        return RunConfig(**{**pins, **values})
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_text(p.read_text(), str(p))


def dump(cfg: RunConfig) -> str:
    out = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, (tuple, list)):
            v = ",".join(map(str, v))
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
