import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from collections import deque
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import requests
from jsonschema import Draft7Validator
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from models import ChatTransportError, DataLoadError
from storage import load_jsonl

logger = logging.getLogger(__name__)

Message = Dict[str, str]

TRANSCRIPT_ROW_SCHEMA = {
    "type": "object",
    "required": ["turn", "role", "content"],
    "properties": {
        "turn": {"type": "integer", "minimum": 0},
        "role": {"enum": ["system", "user", "assistant"]},
        "content": {"type": "string"},
    },
}


class ChatClient(ABC):
    """Ordered messages in, one text completion out"""

    @abstractmethod
    def complete(self, messages: Sequence[Message], seed: Optional[int] = None) -> str:
        pass


class _TransientResponse(Exception):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


def _is_transient(error: BaseException) -> bool:
    return isinstance(error, (requests.exceptions.Timeout, requests.exceptions.ConnectionError, _TransientResponse))


class LiveChatClient(ChatClient):
    """Chat-completion endpoint over HTTP with retries on timeouts, dropped connections and 5xx"""

    def __init__(self, endpoint: str, model: str, api_key: Optional[str] = None, retries: int = 3,
                 timeout: float = 120.0, temperature: float = 0.0, backoff: float = 1.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.retries = max(0, int(retries))
        self.timeout = timeout
        self.temperature = temperature
        self.backoff = backoff

    @classmethod
    def from_profile(cls, profile: Mapping[str, Any]) -> "LiveChatClient":
        """Build from a `clients:` config entry; the key is read from the named environment variable"""
        if not profile.get("endpoint") or not profile.get("model"):
            raise ChatTransportError("Live client profile needs 'endpoint' and 'model'")
        api_key = None
        if profile.get("api_key_env"):
            api_key = os.environ.get(profile["api_key_env"])
            if api_key is None:
                logger.warning("Environment variable %s is not set", profile["api_key_env"])
        return cls(profile["endpoint"], profile["model"], api_key,
                   retries=profile.get("retries", 3),
                   timeout=profile.get("timeout", 120.0),
                   temperature=profile.get("temperature", 0.0))

    @property
    def headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        response = requests.post(self.endpoint, headers=self.headers, json=payload, timeout=self.timeout)
        if response.status_code >= 500:
            raise _TransientResponse(response.status_code, response.text)
        if response.status_code >= 400:
            raise ChatTransportError(f"Chat endpoint rejected the request ({response.status_code}): "
                                     f"{response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise ChatTransportError(f"Chat endpoint returned invalid JSON: {e}") from e

    def complete(self, messages: Sequence[Message], seed: Optional[int] = None) -> str:
        payload: Dict[str, Any] = {
            "model": self.model,
            "messages": [dict(m) for m in messages],
            "temperature": self.temperature,
        }
        if seed is not None:
            payload["seed"] = seed

        retrying = Retrying(
            stop=stop_after_attempt(self.retries + 1),
            wait=wait_exponential(multiplier=self.backoff, max=30),
            retry=retry_if_exception(_is_transient),
            reraise=True,
        )
        try:
            body = retrying(self._post, payload)
        except ChatTransportError:
            raise
        except (requests.exceptions.RequestException, _TransientResponse) as e:
            raise ChatTransportError(f"Chat endpoint failed after {self.retries + 1} attempts: {e}") from e
        return extract_completion_text(body)


def extract_completion_text(body: Mapping[str, Any]) -> str:
    """Text of an OpenAI-style or content-block style completion body"""
    try:
        if "choices" in body:
            return str(body["choices"][0]["message"]["content"])
        if "content" in body:
            blocks = body["content"]
            if isinstance(blocks, str):
                return blocks
            return "".join(b.get("text", "") for b in blocks if b.get("type", "text") == "text")
    except (KeyError, IndexError, TypeError) as e:
        raise ChatTransportError(f"Unrecognized completion body: {e}") from e
    raise ChatTransportError("Completion body has neither 'choices' nor 'content'")


class ScriptedChatClient(ChatClient):
    """Replays canned completions in order; Exception entries are raised as transport failures"""

    def __init__(self, responses: Iterable[Union[str, Exception]], default: Optional[str] = None):
        self._responses = deque(responses)
        self.default = default
        self.requests: List[List[Message]] = []
        self.lock = threading.Lock()

    @classmethod
    def from_transcript(cls, rows: Sequence[Mapping[str, Any]], default: Optional[str] = None) -> "ScriptedChatClient":
        ordered = sorted((r for r in rows if r["role"] == "assistant"), key=lambda r: r["turn"])
        return cls([r["content"] for r in ordered], default)

    @property
    def remaining(self) -> int:
        with self.lock:
            return len(self._responses)

    def complete(self, messages: Sequence[Message], seed: Optional[int] = None) -> str:
        with self.lock:
            self.requests.append([dict(m) for m in messages])
            if self._responses:
                response = self._responses.popleft()
            elif self.default is not None:
                response = self.default
            else:
                raise ChatTransportError("Scripted client has no responses left")

        if isinstance(response, Exception):
            raise ChatTransportError(str(response)) from response
        return response


class RecordingChatClient(ChatClient):
    """Wraps a client and keeps {turn, role, content} rows for later replay"""

    def __init__(self, inner: ChatClient):
        self.inner = inner
        self.rows: List[Dict[str, Any]] = []
        self.lock = threading.Lock()
        self._turn = 0

    def complete(self, messages: Sequence[Message], seed: Optional[int] = None) -> str:
        completion = self.inner.complete(messages, seed)
        with self.lock:
            turn = self._turn
            self._turn += 1
            if messages:
                last = messages[-1]
                self.rows.append({"turn": turn, "role": last.get("role", "user"), "content": last.get("content", "")})
            self.rows.append({"turn": turn, "role": "assistant", "content": completion})
        return completion

    def save(self, path: str, storage=None) -> str:
        return save_transcript(self.rows, path, storage)


def load_transcript(path: str) -> List[Dict[str, Any]]:
    """Read and check transcript rows"""
    rows = load_jsonl(path)
    validator = Draft7Validator(TRANSCRIPT_ROW_SCHEMA)
    for number, row in enumerate(rows, 1):
        errors = list(validator.iter_errors(row))
        if errors:
            raise DataLoadError(f"{path}: row {number}: {errors[0].message}")
    return rows


def save_transcript(rows: Sequence[Mapping[str, Any]], path: str, storage=None) -> str:
    if storage is not None:
        return storage.save_jsonl(path, rows)

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(dict(row), ensure_ascii=False) + "\n")
    return path


def client_from_spec(spec: str, profiles: Optional[Mapping[str, Mapping[str, Any]]] = None) -> ChatClient:
    """`replay:PATH` or `live:PROFILE` to a client"""
    kind, _, target = str(spec).partition(":")
    if not target:
        raise ChatTransportError(f"Client spec must look like replay:PATH or live:PROFILE, got '{spec}'")
    if kind == "replay":
        return ScriptedChatClient.from_transcript(load_transcript(target))
    if kind == "live":
        profile = (profiles or {}).get(target)
        if profile is None:
            raise ChatTransportError(f"No client profile named '{target}'")
        return LiveChatClient.from_profile(profile)
    raise ChatTransportError(f"Unknown client kind '{kind}'")
