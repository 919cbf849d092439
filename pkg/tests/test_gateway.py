"""
Unit tests for the model gateway
HTTP calls go through httpx.MockTransport; no network is used
"""
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest

from mistake_notebook.config import EndpointConfig, EndpointSet, RunConfig
from mistake_notebook.errors import (
    DimensionMismatch,
    GatewayTimeout,
    IoFailure,
    MalformedLine,
    ProviderError,
    TransportFailure,
)
from mistake_notebook.fixtures import ScriptBuilder
from mistake_notebook.gateway import (
    ROLES,
    BackendFactory,
    HttpBackend,
    ModelBackend,
    ModelGateway,
    ScriptedBackend,
    hash_to_sphere,
    message_digest,
)
from mistake_notebook.prompts import build_solve_prompt
from mistake_notebook.schemas import GenerationParams, Message


def http_endpoint(**overrides):
    values = {"backend": "http", "base_url": "https://api.test/v1", "model_name": "m-test"}
    values.update(overrides)
    return EndpointConfig(**values)


def http_gateway(handler, retry_count=0, **endpoint_overrides):
    backend = HttpBackend(http_endpoint(**endpoint_overrides), transport=httpx.MockTransport(handler))
    return ModelGateway({"tuning": backend, "embedder": backend}, retry_counts={"tuning": retry_count})


def chat_body(content):
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}


USER = [Message(role="user", content="What is 2+2?")]


@pytest.mark.unit
class TestScriptedBackend:
    """Test cases for the scripted backend"""

    def test_scripted_hit(self, make_gateway):
        prompt = build_solve_prompt("What is 2+2?", "")
        gateway = make_gateway(ScriptBuilder().add(prompt, "4"))
        assert gateway.complete("tuning", prompt.messages, template_id=prompt.template_id) == "4"

    def test_unscripted_call(self, make_gateway):
        gateway = make_gateway()
        with pytest.raises(ProviderError) as exc_info:
            gateway.complete("tuning", USER, template_id="solve")
        assert "unscripted" in exc_info.value.body

    def test_template_id_is_part_of_the_key(self, make_gateway):
        prompt = build_solve_prompt("What is 2+2?", "")
        gateway = make_gateway(ScriptBuilder().add(prompt, "4"))
        with pytest.raises(ProviderError):
            gateway.complete("tuning", prompt.messages, template_id="extract")

    def test_digest_depends_on_roles_and_content(self):
        system = [Message(role="system", content="What is 2+2?")]
        assert message_digest(USER) != message_digest(system)
        assert message_digest(USER) == message_digest([Message(role="user", content="What is 2+2?")])

    def test_fallback_embedding_deterministic(self, make_gateway):
        first = make_gateway().embed_one("some text")
        second = make_gateway().embed_one("some text")
        assert first == second
        assert np.linalg.norm(first) == pytest.approx(1.0)
        assert first != make_gateway().embed_one("other text")

    def test_hash_to_sphere_depends_on_seed(self):
        assert hash_to_sphere("x", 1, 8) != hash_to_sphere("x", 2, 8)
        assert len(hash_to_sphere("x", 1, 5)) == 5

    def test_scripted_embedding_is_normalized(self, make_gateway):
        gateway = make_gateway(ScriptBuilder().embed("text", [3.0, 4.0, 0, 0, 0, 0, 0, 0]))
        assert gateway.embed_one("text")[:2] == pytest.approx((0.6, 0.8))

    def test_embedding_dimension_mismatch(self, make_gateway):
        gateway = make_gateway(ScriptBuilder().embed("short", [1.0, 0.0, 0.0]))
        with pytest.raises(DimensionMismatch):
            gateway.embed_one("short")

    def test_zero_embedding(self, make_gateway):
        gateway = make_gateway(ScriptBuilder().embed("zero", [0.0] * 8))
        with pytest.raises(ProviderError):
            gateway.embed_one("zero")

    def test_embed_keeps_input_order(self, make_gateway):
        builder = ScriptBuilder().embed("a", [1.0] + [0.0] * 7).embed("b", [0.0, 1.0] + [0.0] * 6)
        vectors = make_gateway(builder).embed(["b", "a"])
        assert vectors[0][1] == 1.0
        assert vectors[1][0] == 1.0


@pytest.mark.unit
class TestScriptFile:
    """Test cases for loading scripts from JSONL"""

    def test_written_script_round_trips(self, tmp_path):
        prompt = build_solve_prompt("What is 2+2?", "")
        path = ScriptBuilder().add(prompt, "4").write(tmp_path / "script.jsonl")
        backend = ScriptedBackend.from_jsonl(path, dimension=8)
        assert len(backend) == 1
        assert backend.complete(prompt.messages, GenerationParams(), prompt.template_id) == "4"

    def test_conflicting_duplicate(self, tmp_path):
        lines = [
            {"template": "solve", "digest": "abc", "response": "4"},
            {"template": "solve", "digest": "abc", "response": "5"},
        ]
        path = tmp_path / "script.jsonl"
        path.write_text("\n".join(json.dumps(line) for line in lines) + "\n", encoding="utf-8")
        with pytest.raises(MalformedLine) as exc_info:
            ScriptedBackend.from_jsonl(path)
        assert exc_info.value.line_no == 2

    def test_identical_duplicate_is_accepted(self, tmp_path):
        line = json.dumps({"template": "solve", "digest": "abc", "response": "4"})
        path = tmp_path / "script.jsonl"
        path.write_text(line + "\n" + line + "\n", encoding="utf-8")
        assert len(ScriptedBackend.from_jsonl(path)) == 1

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "script.jsonl"
        path.write_text('{"template": "solve"}\n', encoding="utf-8")
        with pytest.raises(MalformedLine):
            ScriptedBackend.from_jsonl(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            ScriptedBackend.from_jsonl(tmp_path / "absent.jsonl")

    def test_builder_rejects_conflicts(self):
        prompt = build_solve_prompt("What is 2+2?", "")
        builder = ScriptBuilder().add(prompt, "4")
        with pytest.raises(ValueError):
            builder.add(prompt, "5")


@pytest.mark.unit
class TestHttpBackend:
    """Test cases for the OpenAI-compatible HTTP backend"""

    def test_chat_completion(self, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "secret-token")
        seen = {}

        def handler(request):
            seen["path"] = request.url.path
            seen["auth"] = request.headers.get("Authorization")
            seen["payload"] = json.loads(request.content)
            return httpx.Response(200, json=chat_body("4"))

        gateway = http_gateway(handler, api_key_env="TEST_API_KEY")
        params = GenerationParams(temperature=0.0, presence_penalty=1.5, max_tokens=64, seed=7)
        assert gateway.complete("tuning", USER, params) == "4"
        assert seen["path"] == "/v1/chat/completions"
        assert seen["auth"] == "Bearer secret-token"
        assert seen["payload"]["model"] == "m-test"
        assert seen["payload"]["max_tokens"] == 64
        assert seen["payload"]["seed"] == 7
        assert seen["payload"]["messages"] == [{"role": "user", "content": "What is 2+2?"}]

    def test_embeddings_sorted_by_index(self):
        def handler(request):
            data = [
                {"index": 1, "embedding": [0.0, 2.0]},
                {"index": 0, "embedding": [3.0, 0.0]},
            ]
            return httpx.Response(200, json={"data": data})

        vectors = http_gateway(handler).embed(["first", "second"])
        assert vectors == [(1.0, 0.0), (0.0, 1.0)]

    def test_malformed_json(self):
        gateway = http_gateway(lambda request: httpx.Response(200, text="not json"))
        with pytest.raises(ProviderError) as exc_info:
            gateway.complete("tuning", USER)
        assert exc_info.value.body.startswith("parse")

    def test_missing_choices(self):
        gateway = http_gateway(lambda request: httpx.Response(200, json={"choices": []}))
        with pytest.raises(ProviderError):
            gateway.complete("tuning", USER)

    def test_server_error_not_retried(self):
        calls = []

        def handler(request):
            calls.append(request)
            return httpx.Response(500, text="boom")

        gateway = http_gateway(handler, retry_count=3)
        with pytest.raises(ProviderError) as exc_info:
            gateway.complete("tuning", USER)
        assert exc_info.value.status == 500
        assert len(calls) == 1

    def test_timeout_retried_then_raised(self):
        calls = []

        def handler(request):
            calls.append(request)
            raise httpx.ReadTimeout("slow", request=request)

        gateway = http_gateway(handler, retry_count=1)
        with pytest.raises(GatewayTimeout):
            gateway.complete("tuning", USER)
        assert len(calls) == 2
        assert gateway.metrics.failures("tuning") == 1

    def test_transport_failure_recovers_on_retry(self):
        calls = []

        def handler(request):
            calls.append(request)
            if len(calls) == 1:
                raise httpx.ConnectError("refused", request=request)
            return httpx.Response(200, json=chat_body("ok"))

        gateway = http_gateway(handler, retry_count=2)
        assert gateway.complete("tuning", USER) == "ok"
        assert len(calls) == 2

    def test_transport_failure_exhausted(self):
        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        with pytest.raises(TransportFailure):
            http_gateway(handler).complete("tuning", USER)

    def test_http_requires_base_url(self):
        with pytest.raises(ValueError):
            EndpointConfig(backend="http")


class _SlowBackend(ModelBackend):
    """Records the peak number of concurrent calls."""

    def __init__(self):
        self.active = 0
        self.peak = 0
        self._lock = threading.Lock()

    def complete(self, messages, params, template_id=""):
        with self._lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.02)
        with self._lock:
            self.active -= 1
        return "done"

    def embed(self, texts):
        return [[1.0] for _ in texts]


@pytest.mark.unit
class TestModelGateway:
    """Test cases for gateway composition"""

    def test_in_flight_cap(self):
        backend = _SlowBackend()
        gateway = ModelGateway({"tuning": backend}, max_in_flight={"tuning": 2})
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: gateway.complete("tuning", USER), range(8)))
        assert results == ["done"] * 8
        assert backend.peak <= 2
        assert gateway.metrics.calls("tuning") == 8

    def test_unknown_role(self, make_gateway):
        with pytest.raises(ValueError):
            make_gateway().complete("critic", USER)

    def test_empty_messages(self, make_gateway):
        with pytest.raises(ValueError):
            make_gateway().complete("tuning", [])

    def test_metrics_per_role(self, make_gateway):
        gateway = make_gateway()
        gateway.embed(["a", "b"])
        with pytest.raises(ProviderError):
            gateway.complete("tuner", USER)
        assert gateway.metrics.calls("embedder") == 1
        assert gateway.metrics.calls("tuner") == 1
        assert gateway.metrics.failures("tuner") == 1
        assert gateway.metrics.calls("tuning") == 0

    def test_self_tuning_shares_one_backend(self):
        gateway = ModelGateway.from_config(RunConfig())
        backends = {id(gateway.backend(role)) for role in ROLES}
        assert len(backends) == 1

    def test_cross_model_uses_distinct_backends(self):
        endpoints = EndpointSet(tuner=EndpointConfig(model_name="strong-tuner"))
        gateway = ModelGateway.from_config(RunConfig(tuning_configuration="cross_model", endpoints=endpoints))
        assert gateway.backend("tuning") is not gateway.backend("tuner")
        assert gateway.backend("tuning") is gateway.backend("judge")

    def test_from_config_with_http_transport(self):
        endpoint = http_endpoint()
        config = RunConfig(endpoints=EndpointSet(tuning=endpoint, tuner=endpoint, judge=endpoint, embedder=endpoint))
        transport = httpx.MockTransport(lambda request: httpx.Response(200, json=chat_body("hi")))
        gateway = ModelGateway.from_config(config, transport=transport)
        assert isinstance(gateway.backend("tuning"), HttpBackend)
        assert gateway.complete("tuner", USER) == "hi"
        gateway.close()

    def test_factory_registration(self):
        class EchoBackend(ModelBackend):
            def __init__(self, endpoint):
                self.endpoint = endpoint

            def complete(self, messages, params, template_id=""):
                return messages[-1].content

            def embed(self, texts):
                return [[1.0, 0.0] for _ in texts]

        saved = dict(BackendFactory._backends)
        try:
            BackendFactory.register_backend("scripted", EchoBackend)
            backend = BackendFactory.create(EndpointConfig())
            assert backend.complete(USER, GenerationParams()) == "What is 2+2?"
        finally:
            BackendFactory._backends = saved

    def test_factory_unknown_kind(self):
        endpoint = EndpointConfig.model_construct(backend="grpc", model_name="x", script_path=None)
        with pytest.raises(ValueError):
            BackendFactory.create(endpoint)
