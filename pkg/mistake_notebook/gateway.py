"""
Model gateway: every model role (tuning, tuner, judge, embedder) behind a
text-in/text-out and vector-out contract.

Backends follow a strategy/factory layout. HttpBackend talks to an
OpenAI-compatible provider; ScriptedBackend replays fixture responses keyed
by (template id, input digest) and embeds unscripted text on a seeded
hash-to-sphere map.
"""
import hashlib
import json
import threading
from abc import ABC, abstractmethod
from collections import Counter
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Mapping, Optional, Sequence, Type, Union

import httpx
import numpy as np

from mistake_notebook.config import EndpointConfig
from mistake_notebook.errors import (
    DimensionMismatch,
    GatewayError,
    GatewayTimeout,
    IoFailure,
    MalformedLine,
    ProviderError,
    TransportFailure,
    ZeroNorm,
)
from mistake_notebook.logger_config import get_logger
from mistake_notebook.schemas import GenerationParams, Message
from mistake_notebook.vectors import l2_normalize

if TYPE_CHECKING:
    from mistake_notebook.config import RunConfig

logger = get_logger(__name__)

ROLES = ("tuning", "tuner", "judge", "embedder")
EMBED_TEMPLATE = "embed"

Vector = tuple[float, ...]


# ============================================
# Digests
# ============================================

def message_digest(messages: Sequence[Message]) -> str:
    """sha256 over the canonical JSON of the role/content list."""
    payload = [{"role": m.role, "content": m.content} for m in messages]
    canonical = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def hash_to_sphere(text: str, seed: int, dimension: int) -> Vector:
    """Deterministic unit vector for a text: a pure function of (seed, text, dimension)."""
    key = hashlib.blake2b(f"{seed}\x00{text}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(key, "big"))
    return l2_normalize(rng.standard_normal(dimension))


# ============================================
# Backends
# ============================================

class ModelBackend(ABC):
    """Abstract base class for model backends."""

    @abstractmethod
    def complete(self, messages: Sequence[Message], params: GenerationParams, template_id: str = "") -> str:
        """
        Run one chat completion.

        Args:
            messages: Role-tagged prompt
            params: Decoding parameters
            template_id: Identifier of the template the messages were rendered from

        Returns:
            The model's text
        """
        pass

    @abstractmethod
    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """Raw (not necessarily normalized) vectors, one per text."""
        pass

    def close(self) -> None:
        pass


class ScriptedBackend(ModelBackend):
    """
    Deterministic test double.

    Chat lookups are keyed by (template id, message digest); a missing key is
    a ProviderError. Embedding lookups use template "embed" and the text's
    digest, falling back to hash_to_sphere. Lookups only read the response
    table, so concurrent callers are safe.
    """

    def __init__(
        self,
        responses: Optional[Mapping[tuple[str, str], str]] = None,
        seed: int = 42,
        dimension: int = 64,
    ):
        self._responses: Dict[tuple[str, str], str] = dict(responses or {})
        self.seed = seed
        self.dimension = dimension

    @classmethod
    def from_jsonl(cls, path: Union[str, Path], seed: int = 42, dimension: int = 64) -> "ScriptedBackend":
        """
        Load a script file of {"template", "digest", "response"} lines.

        Raises:
            IoFailure: If the file cannot be read
            MalformedLine: On a bad line or a key scripted twice with different responses
        """
        source = Path(path)
        try:
            text = source.read_text(encoding="utf-8")
        except OSError as e:
            logger.error(f"Cannot read script {source}: {e}")
            raise IoFailure(f"Cannot read script file {source}: {e}") from e

        responses: Dict[tuple[str, str], str] = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(line_no, f"invalid JSON ({e.msg})") from e
            if not isinstance(record, dict) or not all(
                isinstance(record.get(key), str) for key in ("template", "digest", "response")
            ):
                raise MalformedLine(line_no, "expected string fields template, digest, response")
            key = (record["template"], record["digest"])
            if key in responses and responses[key] != record["response"]:
                raise MalformedLine(line_no, f"conflicting response for {key}")
            responses[key] = record["response"]

        logger.info(f"Loaded script: {len(responses)} responses from {source}")
        return cls(responses, seed=seed, dimension=dimension)

    def __len__(self) -> int:
        return len(self._responses)

    def lookup(self, template_id: str, digest: str) -> Optional[str]:
        return self._responses.get((template_id, digest))

    def complete(self, messages: Sequence[Message], params: GenerationParams, template_id: str = "") -> str:
        digest = message_digest(messages)
        response = self.lookup(template_id, digest)
        if response is None:
            logger.debug(f"Unscripted call: template={template_id} digest={digest}")
            raise ProviderError(None, f"unscripted: template={template_id} digest={digest}")
        return response

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        vectors = []
        for text in texts:
            scripted = self.lookup(EMBED_TEMPLATE, text_digest(text))
            if scripted is None:
                vectors.append(list(hash_to_sphere(text, self.seed, self.dimension)))
                continue
            try:
                vector = json.loads(scripted)
            except json.JSONDecodeError as e:
                raise ProviderError(None, f"parse: scripted embedding is not JSON ({e.msg})") from e
            if not isinstance(vector, list):
                raise ProviderError(None, "parse: scripted embedding is not an array")
            vectors.append([float(x) for x in vector])
        return vectors


class HttpBackend(ModelBackend):
    """
    OpenAI-compatible provider: POST {base_url}/chat/completions and
    POST {base_url}/embeddings.
    """

    def __init__(self, endpoint: EndpointConfig, transport: Optional[httpx.BaseTransport] = None):
        headers = {}
        api_key = endpoint.api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        elif endpoint.api_key_env:
            logger.warning(f"Environment variable {endpoint.api_key_env} is not set")
        self.endpoint = endpoint
        self._client = httpx.Client(
            base_url=endpoint.base_url.rstrip("/") + "/",
            timeout=endpoint.timeout_ms / 1000.0,
            headers=headers,
            transport=transport,
        )

    def _post(self, path: str, payload: dict) -> dict:
        try:
            response = self._client.post(path, json=payload)
        except httpx.TimeoutException as e:
            raise GatewayTimeout(f"{self.endpoint.model_name}: {e}") from e
        except httpx.TransportError as e:
            raise TransportFailure(f"{self.endpoint.model_name}: {e}") from e

        if response.status_code >= 400:
            raise ProviderError(response.status_code, response.text[:500])
        try:
            body = response.json()
        except ValueError as e:
            raise ProviderError(response.status_code, "parse: response body is not JSON") from e
        if not isinstance(body, dict):
            raise ProviderError(response.status_code, "parse: response body is not an object")
        return body

    def complete(self, messages: Sequence[Message], params: GenerationParams, template_id: str = "") -> str:
        payload = {
            "model": self.endpoint.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
            "presence_penalty": params.presence_penalty,
            "max_tokens": params.max_tokens,
            "seed": params.seed,
            "enable_thinking": params.think_mode,
        }
        body = self._post("chat/completions", payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(200, "parse: missing choices[0].message.content") from e
        if not isinstance(content, str):
            raise ProviderError(200, "parse: message content is not text")
        return content

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        body = self._post("embeddings", {"model": self.endpoint.model_name, "input": list(texts)})
        data = body.get("data")
        if not isinstance(data, list):
            raise ProviderError(200, "parse: missing data array")
        try:
            items = sorted(data, key=lambda item: item.get("index", 0))
            return [[float(x) for x in item["embedding"]] for item in items]
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ProviderError(200, "parse: malformed embedding item") from e

    def close(self) -> None:
        self._client.close()


class BackendFactory:
    """
    Factory class for creating model backends from endpoint configs.
    """

    _backends: Dict[str, Type[ModelBackend]] = {
        "http": HttpBackend,
        "scripted": ScriptedBackend,
    }

    @classmethod
    def register_backend(cls, kind: str, backend_class: Type[ModelBackend]) -> None:
        """
        Register a new backend kind.

        Args:
            kind: Value of EndpointConfig.backend that selects it
            backend_class: Class constructed as backend_class(endpoint)
        """
        logger.info(f"Registering model backend: {kind}")
        cls._backends[kind] = backend_class

    @classmethod
    def create(
        cls,
        endpoint: EndpointConfig,
        seed: int = 42,
        dimension: int = 64,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> ModelBackend:
        """
        Build the backend an endpoint asks for.

        Raises:
            ValueError: If the backend kind is not registered
        """
        backend_class = cls._backends.get(endpoint.backend)
        if not backend_class:
            logger.error(f"Unsupported backend: {endpoint.backend}")
            raise ValueError(f"Unsupported backend: {endpoint.backend}")

        logger.debug(f"Creating {endpoint.backend} backend for model {endpoint.model_name}")
        if backend_class is ScriptedBackend:
            if endpoint.script_path is None:
                return ScriptedBackend(seed=seed, dimension=dimension)
            return ScriptedBackend.from_jsonl(endpoint.script_path, seed=seed, dimension=dimension)
        if backend_class is HttpBackend:
            return HttpBackend(endpoint, transport=transport)
        return backend_class(endpoint)


# ============================================
# Gateway
# ============================================

class GatewayMetrics:
    """Per-role call counter; safe to update from worker threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._calls: Counter = Counter()
        self._failures: Counter = Counter()

    def record(self, role: str) -> None:
        with self._lock:
            self._calls[role] += 1

    def record_failure(self, role: str) -> None:
        with self._lock:
            self._failures[role] += 1

    def calls(self, role: str) -> int:
        with self._lock:
            return self._calls[role]

    def failures(self, role: str) -> int:
        with self._lock:
            return self._failures[role]

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._calls)


class ModelGateway:
    """
    Role-addressed access to model backends with retries, an in-flight cap
    per role and call metrics.

    Args:
        backends: Backend per role; roles may share one instance
        params: Default decoding parameters
        dimension: Expected embedding dimension; pinned by the first embed when None
        retry_counts: Extra attempts per role for retryable failures
        max_in_flight: Concurrent call cap per role
    """

    def __init__(
        self,
        backends: Mapping[str, ModelBackend],
        params: Optional[GenerationParams] = None,
        dimension: Optional[int] = None,
        retry_counts: Optional[Mapping[str, int]] = None,
        max_in_flight: Optional[Mapping[str, int]] = None,
    ):
        self._backends = dict(backends)
        self.params = params or GenerationParams()
        self.dimension = dimension
        self._retries = {role: (retry_counts or {}).get(role, 0) for role in self._backends}
        self._caps = {role: (max_in_flight or {}).get(role, 4) for role in self._backends}
        self._slots = {role: threading.BoundedSemaphore(cap) for role, cap in self._caps.items()}
        self._dimension_lock = threading.Lock()
        self.metrics = GatewayMetrics()

    @classmethod
    def from_config(cls, config: "RunConfig", transport: Optional[httpx.BaseTransport] = None) -> "ModelGateway":
        """One backend per distinct endpoint; equal endpoints share an instance."""
        seed = config.generation.seed
        built: list[tuple[EndpointConfig, ModelBackend]] = []
        backends: Dict[str, ModelBackend] = {}
        for role in ROLES:
            endpoint = config.endpoints.for_role(role)
            backend = next((b for e, b in built if e == endpoint), None)
            if backend is None:
                backend = BackendFactory.create(
                    endpoint, seed=seed, dimension=config.scripted_dimension, transport=transport
                )
                built.append((endpoint, backend))
            backends[role] = backend

        return cls(
            backends,
            params=config.generation,
            dimension=config.embedding_dimension,
            retry_counts={role: config.endpoints.for_role(role).retry_count for role in ROLES},
            max_in_flight={role: config.endpoints.for_role(role).max_in_flight for role in ROLES},
        )

    def backend(self, role: str) -> ModelBackend:
        if role not in self._backends:
            raise ValueError(f"No backend configured for role: {role}")
        return self._backends[role]

    def max_in_flight(self, role: str) -> int:
        return self._caps.get(role, 1)

    def _call(self, role: str, operation):
        backend = self.backend(role)
        self.metrics.record(role)
        attempts = self._retries.get(role, 0) + 1
        for attempt in range(1, attempts + 1):
            try:
                with self._slots[role]:
                    return operation(backend)
            except GatewayError as e:
                if not e.retryable or attempt == attempts:
                    self.metrics.record_failure(role)
                    logger.error(f"{role} call failed after {attempt} attempt(s): {e}")
                    raise
                logger.warning(f"{role} call attempt {attempt}/{attempts} failed, retrying: {e}")

    def complete(
        self,
        role: str,
        messages: Sequence[Message],
        params: Optional[GenerationParams] = None,
        template_id: str = "",
    ) -> str:
        """
        Text completion from the model serving a role.

        Raises:
            TransportFailure: Network failure after all retries
            GatewayTimeout: Timeout after all retries
            ProviderError: Error status, unusable body, or unscripted call
        """
        if not messages:
            raise ValueError("messages must be non-empty")
        effective = params or self.params
        text = self._call(role, lambda backend: backend.complete(messages, effective, template_id))
        logger.debug(f"{role} completed template={template_id} chars={len(text)}")
        return text

    def embed(self, texts: Sequence[str], role: str = "embedder") -> list[Vector]:
        """
        Unit vectors, one per text, in input order.

        Raises:
            DimensionMismatch: If vectors disagree with the pinned dimension
            ProviderError: If the backend returns the wrong count or a zero vector
        """
        texts = list(texts)
        if not texts:
            raise ValueError("texts must be non-empty")
        raw = self._call(role, lambda backend: backend.embed(texts))
        if len(raw) != len(texts):
            raise ProviderError(None, f"expected {len(texts)} embeddings, got {len(raw)}")

        vectors = []
        for vector in raw:
            self._check_dimension(len(vector))
            try:
                vectors.append(l2_normalize(vector))
            except ZeroNorm as e:
                raise ProviderError(None, "embedding has zero norm") from e
        return vectors

    def embed_one(self, text: str, role: str = "embedder") -> Vector:
        return self.embed([text], role=role)[0]

    def _check_dimension(self, actual: int) -> None:
        with self._dimension_lock:
            if self.dimension is None:
                self.dimension = actual
                logger.debug(f"Embedding dimension pinned to {actual}")
            elif actual != self.dimension:
                logger.error(f"Embedding dimension {actual} != expected {self.dimension}")
                raise DimensionMismatch(self.dimension, actual)

    def close(self) -> None:
        for backend in {id(b): b for b in self._backends.values()}.values():
            backend.close()
