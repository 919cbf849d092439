"""
Run configuration: one JSON document validated by pydantic, with dotted
command-line overrides and credentials read from the environment.
"""
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mistake_notebook.errors import ConfigError
from mistake_notebook.logger_config import get_logger
from mistake_notebook.schemas import EvolutionConfig, GenerationParams, Regime, RetrievalConfig

logger = get_logger(__name__)

PathLike = Union[str, Path]

DEFAULT_SCRIPTED_DIMENSION = 64


class EndpointConfig(BaseModel):
    """
    One model endpoint.

    The credential itself never appears here: api_key_env names the
    environment variable that holds it.
    """
    backend: Literal["http", "scripted"] = "scripted"
    base_url: Optional[str] = None
    model_name: str = "scripted"
    api_key_env: Optional[str] = None
    max_in_flight: int = Field(4, ge=1)
    timeout_ms: int = Field(60_000, gt=0)
    retry_count: int = Field(2, ge=0)
    script_path: Optional[Path] = None

    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        json_schema_extra={
            "example": {
                "backend": "http",
                "base_url": "https://api.example.com/v1",
                "model_name": "qwen3-8b",
                "api_key_env": "TUNING_API_KEY",
                "max_in_flight": 8,
                "timeout_ms": 60000,
                "retry_count": 2,
            }
        }
    )

    @model_validator(mode='after')
    def validate_backend(self):
        if self.backend == "http" and not self.base_url:
            raise ValueError("http endpoints require base_url")
        return self

    def api_key(self) -> Optional[str]:
        """Credential from the environment (after .env loading)."""
        if not self.api_key_env:
            return None
        return os.getenv(self.api_key_env)


class EndpointSet(BaseModel):
    tuning: EndpointConfig = Field(default_factory=EndpointConfig)
    tuner: EndpointConfig = Field(default_factory=EndpointConfig)
    judge: EndpointConfig = Field(default_factory=EndpointConfig)
    embedder: EndpointConfig = Field(default_factory=EndpointConfig)

    model_config = ConfigDict(extra="forbid")

    def for_role(self, role: str) -> EndpointConfig:
        if role not in type(self).model_fields:
            raise ValueError(f"Unknown model role: {role}")
        return getattr(self, role)


class GraderConfig(BaseModel):
    """
    How rewards are produced.

    exact: normalized exact match against gold (supervised).
    judge: binary LLM judge (self-evolution).
    execution: external executor command (SQL execution accuracy).
    """
    kind: Literal["exact", "judge", "execution"] = "exact"
    judge_template: Literal["single_trajectory", "execution_log"] = "single_trajectory"
    executor_command: Optional[list[str]] = None

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode='after')
    def validate_executor(self):
        if self.kind == "execution" and not self.executor_command:
            raise ValueError("execution grading requires executor_command")
        return self


class RunConfig(BaseModel):
    """Everything an evolve or eval run needs."""
    dataset_path: Optional[Path] = None
    eval_dataset_path: Optional[Path] = None
    memory_path: Path = Path("memory.jsonl")
    ledger_path: Path = Path("ledger.jsonl")
    tuning_configuration: Literal["self_tuning", "cross_model"] = "self_tuning"
    endpoints: EndpointSet = Field(default_factory=EndpointSet)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    evolution: EvolutionConfig = Field(default_factory=EvolutionConfig)
    generation: GenerationParams = Field(default_factory=GenerationParams)
    grader: GraderConfig = Field(default_factory=GraderConfig)
    embedding_dimension: Optional[int] = Field(None, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode='after')
    def validate_tuning_configuration(self):
        """Self-tuning uses one model for both roles; cross-model needs two."""
        same = self.endpoints.tuning == self.endpoints.tuner
        if self.tuning_configuration == "self_tuning" and not same:
            raise ValueError("self_tuning requires identical tuning and tuner endpoints")
        if self.tuning_configuration == "cross_model" and same:
            raise ValueError("cross_model requires distinct tuning and tuner endpoints")
        return self

    @model_validator(mode='after')
    def validate_regime_grader(self):
        """Supervised runs grade against gold; self-evolution runs only through the judge."""
        if self.regime == "supervised" and self.grader.kind == "judge":
            raise ValueError("supervised regime requires an exact or execution grader")
        if self.regime == "self_evolution" and self.grader.kind != "judge":
            raise ValueError("self_evolution regime requires the judge grader")
        return self

    @property
    def regime(self) -> Regime:
        return self.evolution.regime

    @property
    def scripted_dimension(self) -> int:
        return self.embedding_dimension or DEFAULT_SCRIPTED_DIMENSION


# ============================================
# Loading
# ============================================

_PATH_KEYS = ("dataset_path", "eval_dataset_path", "memory_path", "ledger_path")


def _coerce(raw: str) -> Any:
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_override_args(args: Sequence[str]) -> dict[str, Any]:
    """
    Turn ["--retrieval.top_k", "3", "--evolution.batch_size=8"] into
    {"retrieval.top_k": 3, "evolution.batch_size": 8}.

    Raises:
        ConfigError: On a dangling key or a token that is not a --flag
    """
    overrides: dict[str, Any] = {}
    tokens = list(args)
    position = 0
    while position < len(tokens):
        token = tokens[position]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError(f"Unexpected argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if position + 1 >= len(tokens):
                raise ConfigError(f"Missing value for --{key}")
            position += 1
            value = tokens[position]
        overrides[key] = _coerce(value)
        position += 1
    return overrides


def apply_overrides(document: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted keys inside a nested dict, creating intermediate objects."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = document
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"Cannot override {dotted}: {part} is not an object")
            node = child
        node[parts[-1]] = value
    return document


def _resolve_paths(document: dict[str, Any], base_dir: Path) -> None:
    for key in _PATH_KEYS:
        value = document.get(key, RunConfig.model_fields[key].default)
        if isinstance(value, (str, Path)) and not Path(value).is_absolute():
            document[key] = str(base_dir / value)
    for endpoint in (document.get("endpoints") or {}).values():
        script = endpoint.get("script_path") if isinstance(endpoint, dict) else None
        if isinstance(script, str) and not Path(script).is_absolute():
            endpoint["script_path"] = str(base_dir / script)


def load_run_config(
    path: Optional[PathLike] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """
    Read, override and validate a run configuration.

    Relative paths are resolved against the config file's directory
    (the working directory when no file is given).

    Raises:
        ConfigError: If the file cannot be read or the result does not validate
    """
    load_dotenv()

    document: dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        source = Path(path)
        try:
            document = json.loads(source.read_text(encoding="utf-8"))
        except OSError as e:
            logger.error(f"Cannot read config {source}: {e}")
            raise ConfigError(f"Cannot read config file {source}: {e}") from e
        except json.JSONDecodeError as e:
            logger.error(f"Config {source} is not valid JSON: {e}")
            raise ConfigError(f"Config file {source} is not valid JSON: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"Config file {source} must hold a JSON object")
        base_dir = source.resolve().parent

    apply_overrides(document, overrides or {})
    _resolve_paths(document, base_dir)

    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        logger.error(f"Invalid run configuration: {e}")
        raise ConfigError(f"Invalid run configuration:\n{e}") from e

    logger.debug(
        f"Run config: regime={config.regime} tuning={config.tuning_configuration} "
        f"batch_size={config.evolution.batch_size} top_k={config.retrieval.top_k}"
    )
    return config
