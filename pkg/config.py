"""
Experiment configuration.

A config file is a JSON document with three sections, `environment`, `agent`
and `run`. Every key is optional; omitted keys fall back to the evaluation
defaults below (5 users, 10 MHz, 10 GHz, 30 fps, 150 ms, ...). Unknown keys are
rejected so a typo never silently runs the default.

    {
        "environment": {"b_max": 2e7, "channel": {"shadow_sigma": 0.0}},
        "agent": {"epsilon": 1.0, "cai": {"candidates": 16}},
        "run": {"seed": 3, "output_dir": "runs/bw20"}
    }
"""

import hashlib
import json
import math
import os
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from utils import ConfigError

load_dotenv()

RESOLVED_CONFIG_NAME = "resolved_config.json"

# Learned policy name -> agent.variant that trains it.
POLICY_VARIANT = {"ddpg": "ddpg", "cai_ddpg_fullstate": "cai_ddpg", "ps_cddpg": "ps_cddpg"}

# Physical user positions (m) around the access point at the origin.
DEFAULT_USER_POSITIONS = [
    [150.0, 250.0],
    [-120.0, 300.0],
    [0.0, -300.0],
    [-280.0, -50.0],
    [100.0, -320.0],
]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ChannelParams(_Section):
    """Sub-6 GHz link parameters: reference-distance path loss, shadowing, powers."""

    d0: float = Field(1.0, gt=0)
    pl_d0: float = 49.12
    exponent: float = Field(1.24, gt=0)
    shadow_sigma: float = Field(0.9, ge=0)
    tx_power_dbm: float = 20.0
    noise_power_dbm: float = -110.0
    user_positions: List[Tuple[float, float]] = Field(default_factory=lambda: [tuple(p) for p in DEFAULT_USER_POSITIONS])

    @model_validator(mode="after")
    def _distances_beyond_reference(self):
        for index, (x, y) in enumerate(self.user_positions):
            if math.hypot(x, y) <= self.d0:
                raise ValueError(f"user {index} at distance {math.hypot(x, y):.3f} m is not beyond d0={self.d0}")
        return self

    @property
    def user_distances(self) -> List[float]:
        return [math.hypot(x, y) for x, y in self.user_positions]

    def distances_for(self, users: int) -> List[float]:
        distances = self.user_distances
        if users > len(distances):
            raise ConfigError("environment.channel.user_positions", f"{len(distances)} positions for {users} users")
        return distances[:users]


class SystemParams(_Section):
    """VR system constants. Units are SI: Hz, seconds, bytes, cycles."""

    users: int = Field(5, ge=2)
    fps: int = Field(30, ge=2)
    frame_bytes: float = Field(10_000.0, gt=0)
    slot_seconds: float = Field(1.0, gt=0)
    c_e: float = Field(30.0, gt=0)
    c_r1: float = Field(50.0, gt=0)
    c_r2: float = Field(240.0, gt=0)
    # c_e, c_r1 and c_r2 count cycles per byte by default (8 bits), not per bit;
    # cycle_basis_bits=1 gives per-bit costs, where rendering alone exceeds t_max.
    cycle_basis_bits: float = Field(8.0, gt=0)
    compression: float = Field(3.0, gt=0)
    t_max: float = Field(0.15, gt=0)
    b_max: float = Field(10e6, gt=0)
    f_max: float = Field(10e9, gt=0)
    f_r_range: Tuple[float, float] = (1.5e9, 2.5e9)
    qoe_th: float = Field(0.2, gt=0)
    hfqoe_th: float = Field(0.6, gt=0)
    omega1: float = Field(0.5, ge=0)
    omega2: float = Field(0.5, ge=0)
    slots: int = Field(100, ge=1)
    scene_bounds: Tuple[float, float] = (10.0, 10.0)
    channel: ChannelParams = Field(default_factory=ChannelParams)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.t_max >= self.slot_seconds:
            raise ValueError("t_max must be shorter than slot_seconds")
        low, high = self.f_r_range
        if not 0 < low <= high:
            raise ValueError("f_r_range must satisfy 0 < low <= high")
        if min(self.scene_bounds) <= 0:
            raise ValueError("scene_bounds must be positive")
        return self

    @property
    def frame_bits(self) -> float:
        return self.frame_bytes * 8.0


class CaiConfig(_Section):
    candidates: int = Field(64, ge=2)
    mc_kl_samples: int = Field(32, ge=1)
    noise_variance: float = Field(0.01, ge=0)


class AgentConfig(_Section):
    variant: Literal["ps_cddpg", "cai_ddpg", "ddpg"] = "ps_cddpg"
    gamma: float = Field(0.99, ge=0, le=1)
    tau: float = Field(0.01, gt=0, le=1)
    lr_actor: float = Field(5e-5, gt=0)
    lr_critic: float = Field(6e-7, gt=0)
    lr_inference: float = Field(1e-4, gt=0)
    batch_size: int = Field(64, ge=1)
    inference_batch_size: int = Field(128, ge=1)
    epsilon: float = Field(0.4, ge=0, le=1)
    mode: Literal["active", "noise", "none"] = "active"
    selection: Literal["weighted", "argmax"] = "weighted"
    capacity: int = Field(5000, ge=1)
    episodes: int = Field(10_000, ge=1)
    actor_hidden: List[int] = Field(default_factory=lambda: [32, 32, 32, 32])
    critic_hidden: List[int] = Field(default_factory=lambda: [32, 32, 32, 32])
    inference_hidden: List[int] = Field(default_factory=lambda: [256, 256, 256])
    cai: CaiConfig = Field(default_factory=CaiConfig)

    @property
    def warmup(self) -> int:
        return max(self.batch_size, self.inference_batch_size)


class SynthConfig(_Section):
    count: int = Field(2500, ge=1)
    train_fraction: float = Field(0.8, gt=0, le=1)


class RunConfig(_Section):
    seed: int = 0
    train_traces: Optional[str] = None
    test_traces: Optional[str] = None
    synth: SynthConfig = Field(default_factory=SynthConfig)
    output_dir: str = "runs/default"
    checkpoint_every: int = Field(100, ge=1)
    policy: Optional[Literal["ddpg", "cai_ddpg_fullstate", "ps_cddpg"]] = None
    eval_policies: List[str] = Field(
        default_factory=lambda: ["original", "attention_only", "fixed_33", "fixed_50", "fixed_66"]
    )
    eval_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    model_path: Optional[str] = None


class ExperimentConfig(_Section):
    environment: SystemParams = Field(default_factory=SystemParams)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def _policy_selects_variant(self):
        """run.policy, when given, picks agent.variant; an explicit conflicting variant is an error."""
        if self.run.policy is None:
            return self
        variant = POLICY_VARIANT[self.run.policy]
        if self.agent.variant != variant:
            if "variant" in self.agent.model_fields_set:
                raise ConfigError("run.policy", f"{self.run.policy} is trained with agent.variant={variant}, "
                                                f"but agent.variant is {self.agent.variant}")
            self.agent.variant = variant
        return self


def _first_error_path(error: ValidationError) -> Tuple[str, str]:
    first = error.errors()[0]
    cause = first.get("ctx", {}).get("error")
    if isinstance(cause, ConfigError):
        return cause.key_path, cause.message
    path = ".".join(str(part) for part in first["loc"]) or "<root>"
    return path, first["msg"]


def resolve_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping, applying defaults; raise ConfigError naming the key."""
    try:
        return ExperimentConfig.model_validate(raw or {})
    except ValidationError as e:
        path, message = _first_error_path(e)
        raise ConfigError(path, message) from e


def load_config(path: str) -> ExperimentConfig:
    """
    Load and validate a JSON experiment config.

    Args:
        path: Config file path. An empty file yields all defaults.

    Returns:
        The resolved ExperimentConfig
    """
    if not os.path.exists(path):
        raise ConfigError("<file>", f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text.strip():
        return resolve_config({})
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return resolve_config(raw)


def echo_config(config: ExperimentConfig, output_dir: str) -> str:
    """Write the fully resolved config next to the run's artifacts."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, RESOLVED_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
    return path


def config_digest(config: ExperimentConfig) -> str:
    """Short stable id of a resolved config."""
    text = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def override(config: ExperimentConfig, key_path: str, value) -> ExperimentConfig:
    """
    Return a copy of `config` with one dotted key replaced and re-validated.

    Raises ConfigError if the key does not exist.
    """
    raw = config.model_dump(mode="json")
    node = raw
    parts = key_path.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(key_path, "no such key")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(key_path, "no such key")
    node[parts[-1]] = value
    return resolve_config(raw)
