import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geovocab.errors import (
    AuthError,
    ConfigError,
    FixtureMissing,
    MalformedScene,
    NoJsonFound,
    RateLimited,
    TransportError,
    UnbalancedJson,
)
from geovocab.gateway import (
    ChatRequest,
    Gateway,
    GatewayConfig,
    ImagePart,
    TextPart,
    complete_checked,
    extract_json,
    fixture_key,
    with_correction,
)
from geovocab.model import ImageRef


def text_request(text="describe the tile", schema="scene_anchor"):
    return ChatRequest(user_parts=(TextPart(text),), response_schema_id=schema)


def image_request(payload=b"fake png"):
    ref = ImageRef.from_bytes("tile.png", payload)
    return ChatRequest(
        user_parts=(TextPart("look"), ImagePart(ref)), response_schema_id="decouple"
    )


# ---------------------------------------------------------------------------
# Scripted HTTP stub


class _StubState:
    def __init__(self):
        self.script = []
        self.requests = []
        self.lock = threading.Lock()
        self.active = 0
        self.max_active = 0


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        state = self.server.state
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        with state.lock:
            index = len(state.requests)
            state.requests.append(
                {"path": self.path, "auth": self.headers.get("Authorization"), "body": body}
            )
            state.active += 1
            state.max_active = max(state.max_active, state.active)
            action = (
                state.script[index] if index < len(state.script) else state.script[-1]
            )
        try:
            kind = action[0]
            if kind == "status":
                self.send_response(action[1])
                self.end_headers()
            elif kind == "sleep_ok":
                time.sleep(action[1])
                self._send_ok("late reply")
            elif kind == "ok":
                self._send_ok(action[1])
            else:
                raise AssertionError(f"unknown stub action {action!r}")
        finally:
            with state.lock:
                state.active -= 1

    def _send_ok(self, text):
        payload = json.dumps(
            {"choices": [{"message": {"content": text}}]}
        ).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *_args):
        pass


@pytest.fixture()
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.state = _StubState()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture()
def http_config(stub_server, monkeypatch):
    monkeypatch.setenv("GEOVOCAB_API_KEY", "sk-test-not-a-real-key")

    def make(**overrides):
        settings = dict(
            endpoint_url=f"http://127.0.0.1:{stub_server.server_address[1]}",
            model_name="stub-model",
            timeout_ms=60_000,
            max_retries=3,
            backoff_base_ms=1,
        )
        settings.update(overrides)
        return GatewayConfig(**settings)

    return make


class TestRetryContract:
    def test_success_first_attempt(self, stub_server, http_config):
        stub_server.state.script = [("ok", "hello")]
        response = Gateway(http_config()).complete(text_request())
        assert response.text == "hello"
        assert response.attempt == 1
        assert len(stub_server.state.requests) == 1

    def test_429_then_success(self, stub_server, http_config):
        stub_server.state.script = [
            ("status", 429),
            ("status", 429),
            ("ok", "made it"),
        ]
        response = Gateway(http_config()).complete(text_request())
        assert response.text == "made it"
        assert response.attempt == 3
        assert len(stub_server.state.requests) == 3

    def test_429_exhaustion_is_rate_limited(self, stub_server, http_config):
        stub_server.state.script = [("status", 429)]
        with pytest.raises(RateLimited) as info:
            Gateway(http_config(max_retries=2)).complete(text_request())
        assert info.value.attempts == 3
        assert len(stub_server.state.requests) == 3

    def test_500_then_success(self, stub_server, http_config):
        stub_server.state.script = [("status", 500), ("ok", "recovered")]
        response = Gateway(http_config()).complete(text_request())
        assert response.attempt == 2
        assert len(stub_server.state.requests) == 2

    def test_500_exhaustion_is_transport_error(self, stub_server, http_config):
        stub_server.state.script = [("status", 503)]
        with pytest.raises(TransportError):
            Gateway(http_config(max_retries=1)).complete(text_request())
        assert len(stub_server.state.requests) == 2

    def test_zero_retries_means_single_attempt(self, stub_server, http_config):
        stub_server.state.script = [("status", 429)]
        with pytest.raises(RateLimited) as info:
            Gateway(http_config(max_retries=0)).complete(text_request())
        assert info.value.attempts == 1
        assert len(stub_server.state.requests) == 1

    def test_timeout_then_success(self, stub_server, http_config):
        stub_server.state.script = [("sleep_ok", 1.0), ("ok", "fast")]
        response = Gateway(http_config(timeout_ms=200)).complete(text_request())
        assert response.text == "fast"
        assert response.attempt == 2

    def test_timeout_exhaustion(self, stub_server, http_config):
        stub_server.state.script = [("sleep_ok", 0.4)]
        with pytest.raises(TransportError):
            Gateway(http_config(timeout_ms=150, max_retries=1)).complete(
                text_request()
            )

    def test_401_fails_immediately(self, stub_server, http_config):
        stub_server.state.script = [("status", 401)]
        with pytest.raises(AuthError) as info:
            Gateway(http_config()).complete(text_request())
        assert info.value.status_code == 401
        assert len(stub_server.state.requests) == 1

    def test_403_fails_immediately(self, stub_server, http_config):
        stub_server.state.script = [("status", 403)]
        with pytest.raises(AuthError):
            Gateway(http_config()).complete(text_request())
        assert len(stub_server.state.requests) == 1

    def test_other_4xx_fails_immediately(self, stub_server, http_config):
        stub_server.state.script = [("status", 404)]
        with pytest.raises(TransportError):
            Gateway(http_config()).complete(text_request())
        assert len(stub_server.state.requests) == 1

    def test_mixed_sequence(self, stub_server, http_config):
        # 500, timeout, 429, then success: four attempts, budget of five
        stub_server.state.script = [
            ("status", 500),
            ("sleep_ok", 0.6),
            ("status", 429),
            ("ok", "finally"),
        ]
        response = Gateway(http_config(timeout_ms=300, max_retries=4)).complete(
            text_request()
        )
        assert response.attempt == 4
        assert len(stub_server.state.requests) == 4


class TestHttpPlumbing:
    def test_bearer_token_sent_and_never_logged(self, stub_server, http_config, caplog):
        stub_server.state.script = [("ok", "fine")]
        Gateway(http_config()).complete(text_request())
        sent = stub_server.state.requests[0]
        assert sent["auth"] == "Bearer sk-test-not-a-real-key"
        assert "sk-test-not-a-real-key" not in caplog.text

    def test_request_body_shape(self, stub_server, http_config):
        stub_server.state.script = [("ok", "fine")]
        Gateway(http_config()).complete(image_request())
        body = stub_server.state.requests[0]["body"]
        assert body["model"] == "stub-model"
        content = body["messages"][-1]["content"]
        assert content[0]["type"] == "text"
        assert content[1]["type"] == "image_url"
        assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")

    def test_endpoint_from_env(self, stub_server, http_config, monkeypatch):
        stub_server.state.script = [("ok", "fine")]
        monkeypatch.setenv(
            "GEOVOCAB_API_URL", f"http://127.0.0.1:{stub_server.server_address[1]}"
        )
        monkeypatch.setenv("GEOVOCAB_MODEL", "env-model")
        config = GatewayConfig(backoff_base_ms=1)
        response = Gateway(config).complete(text_request())
        assert response.model == "env-model"

    def test_missing_api_key_is_config_error(self, stub_server, http_config, monkeypatch):
        monkeypatch.delenv("GEOVOCAB_API_KEY", raising=False)
        with pytest.raises(ConfigError):
            Gateway(http_config()).complete(text_request())

    def test_missing_endpoint_is_config_error(self, monkeypatch):
        monkeypatch.delenv("GEOVOCAB_API_URL", raising=False)
        monkeypatch.setenv("GEOVOCAB_API_KEY", "k")
        with pytest.raises(ConfigError):
            Gateway(GatewayConfig(model_name="m")).complete(text_request())

    def test_concurrency_bound_respected(self, stub_server, http_config):
        stub_server.state.script = [("sleep_ok", 0.15)]
        gateway = Gateway(http_config(max_concurrent_requests=2))
        threads = [
            threading.Thread(target=gateway.complete, args=(text_request(f"t{i}"),))
            for i in range(6)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert stub_server.state.max_active <= 2


class TestMockBackend:
    def test_fixture_served(self, tmp_path):
        request = text_request("what is here")
        (tmp_path / f"{fixture_key(request)}.json").write_text('{"scene": "urban"}')
        response = Gateway(GatewayConfig(mock_fixture_dir=tmp_path)).complete(request)
        assert response.backend == "mock"
        assert response.latency_ms == 0
        assert json.loads(response.text) == {"scene": "urban"}

    def test_missing_fixture_names_key(self, tmp_path):
        request = text_request("nothing prepared")
        with pytest.raises(FixtureMissing) as info:
            Gateway(GatewayConfig(mock_fixture_dir=tmp_path)).complete(request)
        assert fixture_key(request) in str(info.value)


class TestFixtureKeys:
    def test_text_key_uses_12_hex_digest(self):
        key = fixture_key(text_request("abc"))
        schema, _, suffix = key.partition("__")
        assert schema == "scene_anchor"
        assert len(suffix) == 12
        assert all(c in "0123456789abcdef" for c in suffix)

    def test_image_key_uses_content_hash(self):
        request = image_request(b"pixels")
        ref = request.image_parts()[0]
        assert fixture_key(request) == f"decouple__{ref.content_hash}"

    def test_same_text_same_key(self):
        assert fixture_key(text_request("x")) == fixture_key(text_request("x"))
        assert fixture_key(text_request("x")) != fixture_key(text_request("y"))


class TestWithCorrection:
    def test_appends_to_last_text_part(self):
        request = text_request("original")
        repaired = with_correction(request, "bad json", '{"scene": str}')
        assert repaired.user_parts[0].text.startswith("original")
        assert "bad json" in repaired.user_parts[0].text
        assert '{"scene": str}' in repaired.user_parts[0].text

    def test_key_changes_for_text_requests(self):
        request = text_request("original")
        repaired = with_correction(request, "bad", "{}")
        assert fixture_key(request) != fixture_key(repaired)

    def test_image_request_keeps_key(self):
        # image-keyed requests resolve to the same fixture after repair
        request = image_request()
        repaired = with_correction(request, "bad", "{}")
        assert fixture_key(request) == fixture_key(repaired)


class TestCompleteChecked:
    def _write(self, tmp_path, request, text):
        (tmp_path / f"{fixture_key(request)}.json").write_text(text)

    def test_parse_first_try(self, tmp_path):
        request = text_request()
        self._write(tmp_path, request, '{"scene": "urban"}')
        gateway = Gateway(GatewayConfig(mock_fixture_dir=tmp_path))
        checked = complete_checked(
            gateway,
            request,
            lambda obj: obj["scene"],
            '{"scene": str}',
            lambda exc: MalformedScene("tile", str(exc)),
        )
        assert checked.value == "urban"
        assert checked.request is request

    def test_repair_after_malformed(self, tmp_path):
        request = text_request()
        self._write(tmp_path, request, "not json at all")
        repaired = with_correction(
            request, "no JSON object in model output", '{"scene": str}'
        )
        self._write(tmp_path, repaired, '{"scene": "rural"}')
        gateway = Gateway(GatewayConfig(mock_fixture_dir=tmp_path))
        checked = complete_checked(
            gateway,
            request,
            lambda obj: obj["scene"],
            '{"scene": str}',
            lambda exc: MalformedScene("tile", str(exc)),
        )
        assert checked.value == "rural"
        assert checked.request.user_parts[0].text != request.user_parts[0].text

    def test_double_failure_raises_on_failure(self, tmp_path):
        request = text_request()
        self._write(tmp_path, request, "still not json")
        repaired = with_correction(
            request, "no JSON object in model output", '{"scene": str}'
        )
        self._write(tmp_path, repaired, "worse")
        gateway = Gateway(GatewayConfig(mock_fixture_dir=tmp_path))
        with pytest.raises(MalformedScene):
            complete_checked(
                gateway,
                request,
                lambda obj: obj["scene"],
                '{"scene": str}',
                lambda exc: MalformedScene("tile", str(exc)),
            )

    def test_schema_violation_triggers_repair(self, tmp_path):
        # valid JSON that fails the parse callback also gets one repair
        request = text_request()
        self._write(tmp_path, request, '{"wrong_field": 1}')
        gateway = Gateway(GatewayConfig(mock_fixture_dir=tmp_path))

        def parse(obj):
            if "scene" not in obj:
                raise ValueError("missing scene")
            return obj["scene"]

        repaired = with_correction(request, "missing scene", '{"scene": str}')
        self._write(tmp_path, repaired, '{"scene": "urban"}')
        checked = complete_checked(
            gateway,
            request,
            parse,
            '{"scene": str}',
            lambda exc: MalformedScene("tile", str(exc)),
        )
        assert checked.value == "urban"

    def test_transport_errors_pass_through(self, tmp_path):
        request = text_request()
        gateway = Gateway(GatewayConfig(mock_fixture_dir=tmp_path))
        with pytest.raises(FixtureMissing):
            complete_checked(
                gateway,
                request,
                lambda obj: obj,
                "{}",
                lambda exc: MalformedScene("tile", str(exc)),
            )


class TestExtractJson:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ('{"a": 1}', {"a": 1}),
            ('  {"a": 1}  ', {"a": 1}),
            ('```json\n{"a": 1}\n```', {"a": 1}),
            ('```\n{"a": [1, 2]}\n```', {"a": [1, 2]}),
            ('Sure! Here is the result: {"a": 1} Hope that helps.', {"a": 1}),
            ('{"text": "a { inside a string }"}', {"text": "a { inside a string }"}),
            ('{"nested": {"deep": {"deeper": 1}}}', {"nested": {"deep": {"deeper": 1}}}),
            ('prefix {"broken" then {"good": true}', {"good": True}),
            ("[1, 2, 3]", [1, 2, 3]),
            ('{"escaped": "quote \\" and brace }"}', {"escaped": 'quote " and brace }'}),
        ],
    )
    def test_extraction_cases(self, text, expected):
        assert extract_json(text) == expected

    def test_no_json_found(self):
        with pytest.raises(NoJsonFound):
            extract_json("there is nothing structured here")

    def test_unbalanced_braces(self):
        with pytest.raises(UnbalancedJson):
            extract_json('{"never": "closed"')

    json_values = st.recursive(
        st.none()
        | st.booleans()
        | st.integers(-(10**6), 10**6)
        | st.text(max_size=20),
        lambda children: st.lists(children, max_size=4)
        | st.dictionaries(st.text(max_size=8), children, max_size=4),
        max_leaves=10,
    )

    @settings(max_examples=150, deadline=None)
    @given(value=json_values)
    def test_roundtrips_serialized_values(self, value):
        dumped = json.dumps(value)
        assert extract_json(dumped) == value

    @settings(max_examples=80, deadline=None)
    @given(
        value=st.dictionaries(
            st.text(min_size=1, max_size=8),
            st.integers(-100, 100) | st.text(max_size=12),
            max_size=4,
        )
    )
    def test_roundtrips_prose_wrapped_objects(self, value):
        dumped = json.dumps(value)
        assert extract_json(f"The verdicts are: {dumped} as requested.") == value
