"""Client for multimodal chat-completion backends.

Two backends share one request shape: an HTTP backend speaking the common
``/chat/completions`` wire format, and a filesystem mock that resolves each
request to a canned response by a deterministic fixture key.  The mock is
what makes every pipeline test hermetic.

Endpoint, credential, and model name come from ``GatewayConfig`` with
environment fallbacks (``GEOVOCAB_API_URL``, ``GEOVOCAB_API_KEY``,
``GEOVOCAB_MODEL``).  Credentials never appear in logs or error messages.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import requests

from .errors import (
    AuthError,
    ConfigError,
    EmptyCompletion,
    ExtractionError,
    FixtureMissing,
    NoJsonFound,
    RateLimited,
    TransportError,
    UnbalancedJson,
)
from .model import ImageRef

logger = logging.getLogger(__name__)

DEFAULT_API_URL_ENV = "GEOVOCAB_API_URL"
DEFAULT_API_KEY_ENV = "GEOVOCAB_API_KEY"
DEFAULT_MODEL_ENV = "GEOVOCAB_MODEL"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: ImageRef


@dataclass(frozen=True)
class ChatRequest:
    """One completion request; parts are sent in order as the user turn."""

    user_parts: tuple[TextPart | ImagePart, ...]
    response_schema_id: str
    system_prompt: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.response_schema_id:
            raise ValueError("request needs a response_schema_id")
        if not self.user_parts:
            raise ValueError("request has no user parts")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def text_parts(self) -> tuple[str, ...]:
        return tuple(p.text for p in self.user_parts if isinstance(p, TextPart))

    def image_parts(self) -> tuple[ImageRef, ...]:
        return tuple(p.image for p in self.user_parts if isinstance(p, ImagePart))


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend: str
    model: str = ""
    latency_ms: int = 0
    attempt: int = 1


@dataclass(frozen=True)
class GatewayConfig:
    """Transport settings; ``mock_fixture_dir`` switches to the mock backend."""

    endpoint_url: str | None = None
    model_name: str | None = None
    api_key_env_name: str = DEFAULT_API_KEY_ENV
    timeout_ms: int = 60_000
    max_retries: int = 3
    backoff_base_ms: int = 500
    max_concurrent_requests: int = 4
    mock_fixture_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be at least 0")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be at least 1")


def fixture_key(request: ChatRequest) -> str:
    """Deterministic key for the mock backend.

    Requests carrying an image are keyed by the first image's content hash;
    text-only requests are keyed by the first 12 hex digits of a digest over
    the concatenated text parts.
    """
    images = request.image_parts()
    if images:
        suffix = images[0].content_hash
    else:
        joined = "".join(request.text_parts()).encode("utf-8")
        suffix = hashlib.sha256(joined).hexdigest()[:12]
    return f"{request.response_schema_id}__{suffix}"


def with_correction(request: ChatRequest, error: str, schema_hint: str) -> ChatRequest:
    """Build the one-shot repair request sent after a malformed response."""
    note = (
        f"\n\nThe previous response could not be used: {error}. "
        f"Respond again with only a JSON object of this shape: {schema_hint}"
    )
    parts = list(request.user_parts)
    for i in range(len(parts) - 1, -1, -1):
        if isinstance(parts[i], TextPart):
            parts[i] = TextPart(parts[i].text + note)
            break
    else:
        parts.append(TextPart(note.strip()))
    return replace(request, user_parts=tuple(parts))


class Gateway:
    """Shareable completion client enforcing a concurrent-request bound."""

    def __init__(self, config: GatewayConfig) -> None:
        self.config = config
        self._slots = threading.BoundedSemaphore(config.max_concurrent_requests)
        self._session = requests.Session()

    def complete(self, request: ChatRequest) -> ChatResponse:
        backend = "mock" if self.config.mock_fixture_dir is not None else "http"
        logger.debug(
            "completing request schema=%s backend=%s", request.response_schema_id, backend
        )
        if backend == "mock":
            return self._complete_mock(request)
        return self._complete_http(request)

    # -- mock backend

    def _complete_mock(self, request: ChatRequest) -> ChatResponse:
        key = fixture_key(request)
        path = Path(self.config.mock_fixture_dir) / f"{key}.json"
        if not path.is_file():
            raise FixtureMissing(key)
        return ChatResponse(
            text=path.read_text(encoding="utf-8"),
            backend="mock",
            model="mock",
            latency_ms=0,
            attempt=1,
        )

    # -- HTTP backend

    def _complete_http(self, request: ChatRequest) -> ChatResponse:
        cfg = self.config
        endpoint = cfg.endpoint_url or os.environ.get(DEFAULT_API_URL_ENV)
        if not endpoint:
            raise ConfigError(
                f"no endpoint configured; set {DEFAULT_API_URL_ENV} or pass endpoint_url"
            )
        api_key = os.environ.get(cfg.api_key_env_name)
        if not api_key:
            raise ConfigError(f"environment variable {cfg.api_key_env_name} is not set")
        model = cfg.model_name or os.environ.get(DEFAULT_MODEL_ENV)
        if not model:
            raise ConfigError(
                f"no model configured; set {DEFAULT_MODEL_ENV} or pass model_name"
            )

        url = endpoint.rstrip("/") + "/chat/completions"
        body = self._build_body(request, model)
        headers = {"Authorization": f"Bearer {api_key}"}
        timeout_s = cfg.timeout_ms / 1000.0

        max_attempts = cfg.max_retries + 1
        last_status: int | None = None
        last_detail = ""
        for attempt in range(1, max_attempts + 1):
            started = time.monotonic()
            try:
                with self._slots:
                    response = self._session.post(
                        url, json=body, headers=headers, timeout=timeout_s
                    )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_status = None
                last_detail = exc.__class__.__name__
                logger.warning(
                    "attempt %d/%d failed (%s)", attempt, max_attempts, last_detail
                )
            else:
                status = response.status_code
                if status == 200:
                    latency_ms = int((time.monotonic() - started) * 1000)
                    text = self._parse_completion(response)
                    return ChatResponse(
                        text=text,
                        backend="http",
                        model=model,
                        latency_ms=latency_ms,
                        attempt=attempt,
                    )
                if status in (401, 403):
                    raise AuthError(status)
                if status == 429 or 500 <= status < 600:
                    last_status = status
                    last_detail = f"HTTP {status}"
                    logger.warning(
                        "attempt %d/%d failed (HTTP %d)", attempt, max_attempts, status
                    )
                else:
                    raise TransportError(f"unexpected HTTP {status} from completion API")
            if attempt < max_attempts:
                self._sleep_backoff(attempt)
        if last_status == 429:
            raise RateLimited(max_attempts)
        raise TransportError(
            f"giving up after {max_attempts} attempts; last failure: {last_detail}"
        )

    def _sleep_backoff(self, attempt: int) -> None:
        base_s = self.config.backoff_base_ms / 1000.0
        delay = base_s * (2 ** (attempt - 1)) * (1.0 + random.random() * 0.25)
        time.sleep(delay)

    @staticmethod
    def _build_body(request: ChatRequest, model: str) -> dict:
        content: list[dict] = []
        for part in request.user_parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                payload = part.image.load_bytes()
                encoded = base64.b64encode(payload).decode("ascii")
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {
                            "url": f"data:{part.image.mime};base64,{encoded}"
                        },
                    }
                )
        messages: list[dict] = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": content})
        return {
            "model": model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": messages,
        }

    @staticmethod
    def _parse_completion(response: requests.Response) -> str:
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body: {exc}") from exc
        if not text:
            raise EmptyCompletion("completion returned no content")
        return text


def complete(request: ChatRequest, config: GatewayConfig) -> ChatResponse:
    """One-shot completion; long-lived callers should hold a Gateway."""
    return Gateway(config).complete(request)


# ---------------------------------------------------------------------------
# Checked completions


@dataclass(frozen=True)
class CheckedCompletion:
    """A parsed completion plus the request and response that produced it."""

    value: object
    response: ChatResponse
    request: ChatRequest


def complete_checked(
    gateway: Gateway,
    request: ChatRequest,
    parse,
    schema_hint: str,
    on_failure,
) -> CheckedCompletion:
    """Complete a request and parse its JSON payload, repairing once.

    ``parse`` receives the extracted JSON value and either returns the domain
    value or raises ValueError describing the schema violation.  On the first
    extraction or schema failure the request is re-sent with a correction
    note; a second failure raises ``on_failure(final_exception)``.  Transport
    errors pass through untouched.
    """
    response = gateway.complete(request)
    try:
        return CheckedCompletion(
            value=parse(extract_json(response.text)), response=response, request=request
        )
    except (ExtractionError, ValueError) as first:
        repaired = with_correction(request, str(first), schema_hint)
        logger.warning(
            "response for %s failed (%s); re-prompting once",
            request.response_schema_id,
            first,
        )
        response = gateway.complete(repaired)
        try:
            return CheckedCompletion(
                value=parse(extract_json(response.text)),
                response=response,
                request=repaired,
            )
        except (ExtractionError, ValueError) as second:
            raise on_failure(second) from second


# ---------------------------------------------------------------------------
# JSON extraction


def _balanced_end(text: str, start: int) -> int | None:
    """Index of the brace closing the object opened at ``start``, or None."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def extract_json(text: str):
    """Pull the first JSON value out of free-form model output.

    Accepts bare JSON, fenced code blocks, and prose-wrapped objects; brace
    scanning is string-aware, so braces inside string literals do not end an
    object early.  Raises NoJsonFound when the text has no candidate object
    and UnbalancedJson when braces never resolve to parseable JSON.
    """
    stripped = text.strip()
    if stripped:
        try:
            return json.loads(stripped)
        except ValueError:
            pass

    saw_brace = False
    start = text.find("{")
    while start != -1:
        saw_brace = True
        end = _balanced_end(text, start)
        if end is not None:
            candidate = text[start : end + 1]
            try:
                return json.loads(candidate)
            except ValueError:
                pass
        start = text.find("{", start + 1)

    if saw_brace:
        raise UnbalancedJson("braces present but no parseable JSON object")
    raise NoJsonFound("no JSON object in model output")
