"""LLM boundary: prompt templates, clients and token accounting.

Two clients are provided. :class:`RemoteClient` speaks the OpenAI-compatible
chat-completion protocol over HTTP; :class:`MockClient` answers from a script
and never touches the network. Both record every call in a
:class:`UsageLedger`.
"""

from __future__ import annotations

import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import yaml

from tabgr.errors import LlmAuthError, LlmUnavailable, LlmTimeout, MissingPlaceholder

logger = logging.getLogger(__name__)

API_KEY_ENV = "TABGR_LLM_API_KEY"
EXAMPLES_MARKER = "[Examples]"
TEMPLATE_NAMES = ("column_select", "sufficiency", "edge_select", "answer_gen")
TOKEN_BASIS_APPROX = "approx:ceil(chars/4)"
TOKEN_BASIS_PROVIDER = "provider"

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


# -- prompt templates -------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    few_shot_examples: tuple[str, ...] = ()

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER_RE.findall(self.body)))


def _read_prompt_file(filename: str) -> str:
    return resources.files("tabgr").joinpath("prompts", filename).read_text(encoding="utf-8")


def _parse_examples(text: str) -> tuple[str, ...]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("##")]
    blocks, current = [], []
    for ln in lines:
        if ln.strip() == "---":
            blocks.append("\n".join(current).strip())
            current = []
        else:
            current.append(ln)
    blocks.append("\n".join(current).strip())
    return tuple(b for b in blocks if b)


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    body = _read_prompt_file(f"{name}.txt").rstrip("\n")
    examples = _parse_examples(_read_prompt_file(f"examples_{name}.txt"))
    return PromptTemplate(name, body, examples)


def render(template: PromptTemplate | str, bindings: Mapping[str, Any]) -> str:
    """Fill placeholders, then splice few-shot examples in at ``[Examples]``.

    Bound values are inserted verbatim and never rescanned, so braces inside
    table content are safe.
    """
    if isinstance(template, str):
        template = load_template(template)
    for name in template.placeholders:
        if name not in bindings or bindings[name] is None:
            raise MissingPlaceholder(name)
    text = _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)
    examples = "\n\n".join(template.few_shot_examples)
    return text.replace(EXAMPLES_MARKER, examples, 1)


# -- requests, responses, usage --------------------------------------------

def count_tokens(text: str, provider_count: int | None = None) -> int:
    """Provider-reported count when known, else ``ceil(len(text) / 4)``."""
    if provider_count is not None:
        return int(provider_count)
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    prompt_type: str = "other"
    question_id: str | None = None
    model: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024


@dataclass(frozen=True)
class LlmResponse:
    text: str
    input_tokens: int
    output_tokens: int
    latency: float = 0.0
    token_basis: str = TOKEN_BASIS_APPROX


@dataclass
class _Usage:
    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    calls_by_type: dict[str, int] = field(default_factory=dict)

    def add(self, prompt_type: str, response: LlmResponse) -> None:
        self.calls += 1
        self.input_tokens += response.input_tokens
        self.output_tokens += response.output_tokens
        self.calls_by_type[prompt_type] = self.calls_by_type.get(prompt_type, 0) + 1

    def as_dict(self) -> dict[str, Any]:
        return {
            "calls": self.calls,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "calls_by_type": dict(sorted(self.calls_by_type.items())),
        }


class UsageLedger:
    """Thread-safe per-question and aggregate token totals."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._total = _Usage()
        self._per_question: dict[str, _Usage] = {}
        self.token_bases: set[str] = set()

    def record(self, request: LlmRequest, response: LlmResponse) -> None:
        key = request.question_id or ""
        with self._lock:
            self._total.add(request.prompt_type, response)
            self._per_question.setdefault(key, _Usage()).add(request.prompt_type, response)
            self.token_bases.add(response.token_basis)

    def question(self, question_id: str) -> dict[str, Any]:
        with self._lock:
            usage = self._per_question.get(question_id, _Usage())
            return usage.as_dict()

    def total(self) -> dict[str, Any]:
        with self._lock:
            return self._total.as_dict()

    def question_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._per_question)


# -- clients ----------------------------------------------------------------

class LlmClient:
    """Base client; subclasses implement :meth:`_send`."""

    model = ""
    temperature = 0.0

    def __init__(self, ledger: UsageLedger | None = None) -> None:
        self.ledger = ledger if ledger is not None else UsageLedger()

    def complete(self, request: LlmRequest) -> LlmResponse:
        response = self._send(request)
        self.ledger.record(request, response)
        return response

    def ask(self, prompt: str, prompt_type: str, question_id: str | None = None) -> str:
        request = LlmRequest(prompt=prompt, prompt_type=prompt_type,
                             question_id=question_id, model=self.model,
                             temperature=self.temperature)
        return self.complete(request).text

    def _send(self, request: LlmRequest) -> LlmResponse:
        raise NotImplementedError


def complete(client: LlmClient, request: LlmRequest) -> LlmResponse:
    return client.complete(request)


@dataclass
class ScriptRule:
    pattern: str
    responses: tuple[str, ...]


class MockClient(LlmClient):
    """Scripted client keyed by the longest pattern found in the prompt.

    A rule may hold a list of responses; they are served in order and the
    last one repeats. Prompts matching no rule get ``default``; without a
    default the call raises :class:`LlmUnavailable`.
    """

    model = "mock"

    def __init__(
        self,
        rules: Sequence[tuple[str, str | Sequence[str]]] | Mapping[str, str | Sequence[str]] = (),
        default: str | None = None,
        ledger: UsageLedger | None = None,
    ) -> None:
        super().__init__(ledger)
        items = rules.items() if isinstance(rules, Mapping) else rules
        self.rules = []
        for pattern, response in items:
            responses = (response,) if isinstance(response, str) else tuple(response)
            if not responses:
                raise ValueError(f"rule {pattern!r} has no responses")
            self.rules.append(ScriptRule(pattern, responses))
        self.default = default
        self._served: dict[int, int] = {}
        self._lock = threading.Lock()
        self.prompts: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path, ledger: UsageLedger | None = None) -> MockClient:
        """Load a YAML/JSON script: ``{default: str, rules: [{pattern, response}]}``."""
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        rules = [(r["pattern"], r["response"]) for r in data.get("rules", [])]
        return cls(rules, default=data.get("default"), ledger=ledger)

    def _send(self, request: LlmRequest) -> LlmResponse:
        prompt = request.prompt
        best = None
        for idx, rule in enumerate(self.rules):
            if rule.pattern in prompt and (best is None or len(rule.pattern) > len(self.rules[best].pattern)):
                best = idx
        with self._lock:
            self.prompts.append(prompt)
            if best is None:
                if self.default is None:
                    raise LlmUnavailable("mock script has no rule for this prompt")
                text = self.default
            else:
                served = self._served.get(best, 0)
                responses = self.rules[best].responses
                text = responses[min(served, len(responses) - 1)]
                self._served[best] = served + 1
        return LlmResponse(text, count_tokens(prompt), count_tokens(text))


class RemoteClient(LlmClient):
    """OpenAI-compatible chat-completion client with retry and backoff."""

    RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        transport: Any = None,
        sleep: Callable[[float], None] = time.sleep,
        ledger: UsageLedger | None = None,
    ) -> None:
        super().__init__(ledger)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep
        self.attempts = 0
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._http = httpx.Client(timeout=timeout, transport=transport, headers=headers)

    def close(self) -> None:
        self._http.close()

    def _send(self, request: LlmRequest) -> LlmResponse:
        payload = {
            "model": request.model or self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens or self.max_tokens,
        }
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        timed_out = False
        for attempt in range(1, self.max_attempts + 1):
            self.attempts += 1
            started = time.perf_counter()
            try:
                resp = self._http.post(url, json=payload)
            except httpx.TimeoutException as exc:
                last_error, timed_out = exc, True
            except httpx.TransportError as exc:
                last_error, timed_out = exc, False
            else:
                if resp.status_code in (401, 403):
                    raise LlmAuthError(f"endpoint rejected credentials ({resp.status_code})")
                if resp.status_code == 200:
                    return self._parse(resp.json(), request.prompt, time.perf_counter() - started)
                last_error, timed_out = RuntimeError(f"HTTP {resp.status_code}"), False
                if resp.status_code not in self.RETRY_STATUS:
                    break
            logger.warning("LLM call attempt %d/%d failed: %s", attempt, self.max_attempts, last_error)
            if attempt < self.max_attempts:
                self.sleep(self.backoff * 2 ** (attempt - 1))
        if timed_out:
            raise LlmTimeout(f"LLM request timed out: {last_error}")
        raise LlmUnavailable(f"LLM request failed: {last_error}")

    @staticmethod
    def _parse(body: Mapping[str, Any], prompt: str, latency: float) -> LlmResponse:
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmUnavailable(f"malformed completion payload: {exc}") from exc
        usage = body.get("usage") or {}
        prompt_tokens = usage.get("prompt_tokens")
        completion_tokens = usage.get("completion_tokens")
        basis = TOKEN_BASIS_PROVIDER if prompt_tokens is not None and completion_tokens is not None else TOKEN_BASIS_APPROX
        return LlmResponse(
            text=text,
            input_tokens=count_tokens(prompt, prompt_tokens),
            output_tokens=count_tokens(text, completion_tokens),
            latency=latency,
            token_basis=basis,
        )
