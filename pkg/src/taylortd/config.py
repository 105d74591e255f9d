"""Experiment configuration: typed dataclasses plus a flat ``key = value`` file format.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Tuples (layer sizes, seed lists) are comma separated. Keys of
:class:`AgentConfig` and :class:`ExperimentConfig` share one flat namespace.
A JSON object with the same keys (or a run manifest holding them under
``"config"``) is accepted too, so a manifest can be fed back in unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class AgentConfig:
    # TD3 / optimization
    gamma: float = 0.99
    tau: float = 0.005
    lr_model: float = 1e-3
    lr_critic: float = 3e-4
    lr_actor: float = 3e-4
    batch_size: int = 256
    model_batch_size: int = 256
    explore_noise: float = 0.1  # fraction of the action bound
    policy_delay: int = 2
    dyna_updates: int = 10
    model_updates_per_step: int = 1
    model_pretrain_steps: int = 0
    warmup_steps: int = 1000
    total_steps: int = 10000
    eval_interval: int = 500
    eval_episodes: int = 5
    buffer_capacity: int = 1_000_000
    # architectures
    actor_hidden: tuple = (400, 400)
    critic_hidden: tuple = (400, 400)
    model_hidden: tuple = (512, 512, 512, 512)
    reward_hidden: tuple = (256, 256, 256)
    n_members: int = 8
    member_selection: str = "per_transition"
    reward_normalize: bool = True
    # Taylor expansion
    lambda_a: float = 0.25
    lambda_s: float = 1e-5
    action_expansion: bool = True
    state_expansion: bool = True
    similarity: str = "cosine"
    # baselines
    dyna_noise: str = "explore"
    n_state_perturb: int = 10
    n_action_perturb: int = 10
    expected_batch_size: int = 256

    def __post_init__(self):
        positive = ["tau", "lr_model", "lr_critic", "lr_actor", "batch_size", "model_batch_size", "policy_delay",
                    "total_steps", "eval_interval", "eval_episodes", "buffer_capacity", "n_members",
                    "n_state_perturb", "n_action_perturb", "expected_batch_size"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = ["explore_noise", "dyna_updates", "model_updates_per_step", "model_pretrain_steps",
                        "warmup_steps", "lambda_a", "lambda_s"]
        for name in non_negative:
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.tau > 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        choices = {"similarity": ("cosine", "dot"), "member_selection": ("per_transition", "per_batch"),
                   "dyna_noise": ("explore", "matched")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("actor_hidden", "critic_hidden", "model_hidden", "reward_hidden"):
            if not getattr(self, name) or min(getattr(self, name)) < 1:
                raise ValueError(f"{name} needs at least one positive layer size")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


AGENT_NAMES = {"tatd3": "tatd3", "dyna_td3": "dyna", "sample_expected_td3": "expected"}
"""Public agent names and the internal kind each one selects."""

COMMANDS = ("train", "variance", "stability", "toy", "ablation")

DESK_PENDULUM = {
    "actor_hidden": (64, 64),
    "critic_hidden": (64, 64),
    "model_hidden": (64, 64),
    "reward_hidden": (64, 64),
    "batch_size": 64,
    "model_batch_size": 128,
    "expected_batch_size": 4,
}
"""Narrower networks and smaller batches that fit the pendulum protocol into a single-core CPU budget."""

PROFILES = {"paper": {}, "desk": DESK_PENDULUM}


@dataclass(frozen=True)
class ExperimentConfig:
    command: str = "train"
    agents: tuple = ("tatd3",)
    env: str = "pendulum"
    seeds: tuple = (0, 1, 2, 3, 4)
    workers: int = 1
    profile: str = "paper"
    # LQ testbed (variance, and training with env = lq)
    lq_state_dim: int = 8
    lq_action_dim: int = 8
    lq_dt: float = 0.05
    features: str = "quadratic"
    # variance
    variance_states: int = 1000
    variance_inner: int = 100
    variance_checkpoints: tuple = (0, 5000, 50000)
    # stability
    stability_dt: float = 1e-3
    stability_features: int = 64
    stability_samples: int = 20000
    stability_eta_fraction: float = 0.9
    # toy
    toy_dims: tuple = (1, 5, 10, 25, 50, 100)
    toy_regimes: tuple = ("low", "high")
    toy_lambda_x: float = 0.1
    toy_steps: int = 1000
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        choices = {"command": COMMANDS, "env": ("pendulum", "lq"), "profile": tuple(PROFILES),
                   "features": ("quadratic", "affine")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        bad = [a for a in self.agents if a not in AGENT_NAMES]
        if bad or not self.agents:
            raise ValueError(f"agents must be a non-empty subset of {tuple(AGENT_NAMES)}, got {self.agents}")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if any(s < 0 for s in self.seeds):
            raise ValueError(f"seeds must be non-negative, got {self.seeds}")
        positive = ["workers", "lq_state_dim", "lq_action_dim", "variance_states", "variance_inner",
                    "stability_features", "stability_samples", "toy_steps", "stability_dt"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lq_dt < 0 or self.toy_lambda_x < 0:
            raise ValueError("lq_dt and toy_lambda_x must be non-negative")
        if not 0 < self.stability_eta_fraction < 1:
            raise ValueError(f"stability_eta_fraction must lie in (0, 1), got {self.stability_eta_fraction}")
        if not self.toy_dims or min(self.toy_dims) < 1:
            raise ValueError(f"toy_dims must be positive, got {self.toy_dims}")
        if not set(self.toy_regimes) <= {"low", "high"} or not self.toy_regimes:
            raise ValueError(f"toy_regimes must be a non-empty subset of ('low', 'high'), got {self.toy_regimes}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "agent"}
        out = {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
        out.update(self.agent.to_dict())
        return out


_AGENT_FIELDS = {f.name: f for f in fields(AgentConfig)}
_EXP_FIELDS = {f.name: f for f in fields(ExperimentConfig) if f.name != "agent"}
_DEFAULT_AGENT = AgentConfig()
_DEFAULT_EXP = ExperimentConfig()


def _default(key):
    if key in _AGENT_FIELDS:
        return getattr(_DEFAULT_AGENT, key)
    return getattr(_DEFAULT_EXP, key)


def _parse_value(key, text):
    default = _default(key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [t.strip().strip("'\"") for t in text.strip("()[]").split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
        if isinstance(default, int):
            value = float(text)
            if value != int(value):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(text)
        return text.strip("'\"")
    except ValueError:
        raise ValueError(f"cannot parse {key} = {text!r} as {type(default).__name__}") from None


def _coerce(key, value):
    if key not in _AGENT_FIELDS and key not in _EXP_FIELDS:
        raise KeyError(f"unknown config key {key!r}")
    if isinstance(value, str):
        return _parse_value(key, value)
    if isinstance(value, list):
        return tuple(value)
    return value


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def _read_file(path) -> dict:
    text = Path(path).read_text()
    values = {}
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        data = data.get("config", data)
        return {k: _coerce(k, v) for k, v in data.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    return values


def build_config(values: dict) -> ExperimentConfig:
    """Resolve a flat ``{key: value}`` mapping: defaults, then the profile, then the values."""
    values = {k: _coerce(k, v) for k, v in values.items()}
    profile = values.get("profile", _DEFAULT_EXP.profile)
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {tuple(PROFILES)}, got {profile!r}")
    agent_values = {**PROFILES[profile], **{k: v for k, v in values.items() if k in _AGENT_FIELDS}}
    exp_values = {k: v for k, v in values.items() if k in _EXP_FIELDS}
    return replace(_DEFAULT_EXP, agent=replace(_DEFAULT_AGENT, **agent_values), **exp_values)


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    values = _read_file(path) if path is not None else {}
    values.update(parse_overrides(overrides))
    return build_config(values)


def load_config(path=None, overrides=()) -> AgentConfig:
    """Agent hyperparameters only (see :func:`parse_config`)."""
    return parse_config(path, overrides).agent


def desk_config(**overrides) -> AgentConfig:
    return replace(AgentConfig(), **{**DESK_PENDULUM, **overrides})


__all__ = ["AgentConfig", "ExperimentConfig", "AGENT_NAMES", "COMMANDS", "DESK_PENDULUM", "PROFILES",
           "build_config", "parse_config", "load_config", "parse_overrides", "desk_config"]
