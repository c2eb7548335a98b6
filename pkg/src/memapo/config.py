"""Run configuration: provider settings, engine parameters, prices, paths.

Precedence when assembled by the CLI: flags > environment > config file >
defaults. Every field round-trips through :meth:`RunConfig.to_dict` /
:meth:`RunConfig.from_dict`.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .codec import DEFAULT_INSTRUCTION, DEFAULT_OUTPUT_FORMAT
from .errors import ConfigError


@dataclass(frozen=True)
class EngineParams:
    k: int = 3
    theta_corr_train: float = 0.3
    theta_corr_infer: float = 0.1
    theta_error: float = 0.7
    max_retries: int = 3
    capacity: int = 30
    target: int = 30
    verify_samples: int = 3
    case_cap: int = 20
    min_retained: int = 3
    seed: int = 42
    max_inflight: int = 4
    temperature: float = 0.0
    meta_temperature: float = 0.0
    init_instruction: str = DEFAULT_INSTRUCTION
    output_format: str = DEFAULT_OUTPUT_FORMAT
    epm_warn_size: int = 50

    def __post_init__(self):
        for name in ("theta_corr_train", "theta_corr_infer", "theta_error"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("k", "max_retries", "capacity", "target", "verify_samples", "min_retained"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.case_cap < 1:
            raise ConfigError("case_cap must be >= 1")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        if self.temperature < 0 or self.meta_temperature < 0:
            raise ConfigError("temperatures must be >= 0")

    def theta_corr(self, mode: str) -> float:
        if mode == "train":
            return self.theta_corr_train
        if mode == "infer":
            return self.theta_corr_infer
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4o-mini"
    embedding_model: str = "text-embedding-3-small"
    credential_env: str = "MEMAPO_API_KEY"
    timeout: float = 120.0
    retries: int = 3


@dataclass(frozen=True)
class RunConfig:
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    params: EngineParams = field(default_factory=EngineParams)
    # model id -> [input $/1M tokens, output $/1M tokens]
    price_table: dict = field(default_factory=dict)
    strict_prices: bool = False
    # dataset name -> instruction text file used as that dataset's base instruction
    instructions: dict = field(default_factory=dict)
    prompts_dir: str | None = None
    scripted: str | None = None
    limit: int | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["price_table"] = {m: list(p) for m, p in sorted(self.price_table.items())}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            provider = ProviderConfig(**data.pop("provider", {}))
            params = EngineParams(**data.pop("params", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        prices = {}
        for model, pair in (data.pop("price_table", None) or {}).items():
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigError(f"price for {model!r} must be [input, output]")
            prices[model] = (float(pair[0]), float(pair[1]))
        return cls(provider=provider, params=params, price_table=prices, **data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def with_params(self, **changes) -> "RunConfig":
        return replace(self, params=replace(self.params, **changes))

    def with_provider(self, **changes) -> "RunConfig":
        return replace(self, provider=replace(self.provider, **changes))


ENV_OVERRIDES = {
    "MEMAPO_BASE_URL": "base_url",
    "MEMAPO_CHAT_MODEL": "chat_model",
    "MEMAPO_EMBEDDING_MODEL": "embedding_model",
}


def apply_env(config: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    changes = {f: environ[v] for v, f in ENV_OVERRIDES.items() if environ.get(v)}
    return config.with_provider(**changes) if changes else config
