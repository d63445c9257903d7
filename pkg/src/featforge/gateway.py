"""Uniform access to chat-completion LMs: OpenAI-compatible HTTP endpoints,
structured-output enforcement with validate-and-reprompt, token accounting,
and a deterministic scripted LM for offline runs.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import jsonschema
import requests

Message = dict[str, str]  # {"role": ..., "content": ...}


def system(content: str) -> Message:
    return {"role": "system", "content": content}


def user(content: str) -> Message:
    return {"role": "user", "content": content}


def assistant(content: str) -> Message:
    return {"role": "assistant", "content": content}


class GatewayError(RuntimeError):
    pass


class Transport(GatewayError):
    """Transport-level failure (connection reset, DNS, ...)."""


class Timeout(GatewayError):
    pass


class EndpointRejected(GatewayError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"endpoint rejected request: HTTP {status}: {body[:200]}")

    @property
    def retryable(self) -> bool:
        return self.status == 429 or self.status >= 500


class ScriptedLmMiss(GatewayError):
    """A scripted LM received a request no transcript rule matches.

    Deliberately not retryable and never silently defaulted: an unmatched
    request means the transcript (or a prompt template) is wrong.
    """


class SchemaViolation(GatewayError):
    """Structured output still invalid after all reprompt retries."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("structured output invalid: " + "; ".join(self.errors))


@dataclass(frozen=True)
class GenerationParams:
    """Sampling parameters for one completion; temperature 0 means greedy."""

    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 2048
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0


GREEDY = GenerationParams(temperature=0.0, top_p=1.0)


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    model_id: str = ""

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.model_id or other.model_id,
        )


@dataclass(frozen=True)
class LmEndpoint:
    """An OpenAI-compatible chat-completions endpoint."""

    base_url: str
    model_id: str
    api_key: str | None = None
    request_timeout: float = 120.0
    max_retries: int = 2
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def proxy_token_count(text: str) -> int:
    """Whitespace-delimited token proxy, used when no tokenizer is available."""
    return len(text.split())


def _messages_text(messages: Sequence[Message], role: str = "any") -> str:
    parts = [m["content"] for m in messages if role == "any" or m["role"] == role]
    return "\n".join(parts)


@dataclass
class ScriptRule:
    """One transcript rule: a matcher over request role/content plus a reply.

    ``contains`` substrings must all appear in the concatenated content of the
    request messages with the matching role. ``ordinal``, when set, applies
    the rule only to the nth request this matcher matches (0-based), so a
    transcript can script different replies to repeated identical requests.
    ``response`` may be a callable of (messages, ordinal) for rule-driven
    transcripts whose replies depend on the request text.
    """

    contains: tuple[str, ...]
    response: str | Callable[[Sequence[Message], int], str]
    role: str = "any"
    ordinal: int | None = None
    prompt_tokens: int | None = None
    completion_tokens: int | None = None

    def matcher_key(self) -> tuple:
        return (self.role, self.contains)

    def matches(self, messages: Sequence[Message], haystacks: dict[str, str] | None = None) -> bool:
        if haystacks is not None:
            haystack = haystacks.get(self.role)
            if haystack is None:
                haystack = haystacks[self.role] = _messages_text(messages, self.role)
        else:
            haystack = _messages_text(messages, self.role)
        return all(needle in haystack for needle in self.contains)


def rule(
    contains: str | Sequence[str],
    response: str | dict | list | Callable[[Sequence[Message], int], str],
    role: str = "any",
    ordinal: int | None = None,
    prompt_tokens: int | None = None,
    completion_tokens: int | None = None,
) -> ScriptRule:
    """Convenience constructor for ScriptRule with friendlier input types."""
    if isinstance(contains, str):
        contains = (contains,)
    if isinstance(response, (dict, list)):
        response = json.dumps(response, ensure_ascii=False)
    return ScriptRule(
        contains=tuple(contains),
        response=response,
        role=role,
        ordinal=ordinal,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
    )


class ScriptedLm:
    """Deterministic transcript-driven stand-in for a chat endpoint."""

    model_id = "scripted"
    max_retries = 0
    max_in_flight = 1

    def __init__(self, rules: Sequence[ScriptRule]):
        self.rules = list(rules)
        self._hits: dict[tuple, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str) -> "ScriptedLm":
        """Load a transcript from a JSON file: a list of rule objects with
        fields contains (string or list), response (string or JSON value),
        and optional role, ordinal, prompt_tokens, completion_tokens."""
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, list):
            raise ValueError("transcript file must contain a JSON list of rules")
        rules = []
        for i, obj in enumerate(raw):
            if "contains" not in obj or "response" not in obj:
                raise ValueError(f"transcript rule #{i} needs 'contains' and 'response'")
            rules.append(
                rule(
                    obj["contains"],
                    obj["response"],
                    role=obj.get("role", "any"),
                    ordinal=obj.get("ordinal"),
                    prompt_tokens=obj.get("prompt_tokens"),
                    completion_tokens=obj.get("completion_tokens"),
                )
            )
        return cls(rules)

    def generate(self, messages: Sequence[Message], params: GenerationParams) -> tuple[str, TokenUsage]:
        haystacks: dict[str, str] = {}
        with self._lock:
            chosen: ScriptRule | None = None
            saw_match = False
            for r in self.rules:
                if not r.matches(messages, haystacks):
                    continue
                saw_match = True
                n = self._hits.get(r.matcher_key(), 0)
                if r.ordinal is None or r.ordinal == n:
                    chosen = r
                    break
            if chosen is None:
                head = _messages_text(messages)[:160].replace("\n", " ")
                detail = "matcher ordinals exhausted" if saw_match else "no matcher matches"
                raise ScriptedLmMiss(f"unmatched scripted request ({detail}): {head!r}")
            self._hits[chosen.matcher_key()] = self._hits.get(chosen.matcher_key(), 0) + 1
            ordinal = self._hits[chosen.matcher_key()] - 1
        text = chosen.response if isinstance(chosen.response, str) else chosen.response(messages, ordinal)
        usage = TokenUsage(
            prompt_tokens=(
                chosen.prompt_tokens
                if chosen.prompt_tokens is not None
                else proxy_token_count(_messages_text(messages))
            ),
            completion_tokens=(
                chosen.completion_tokens
                if chosen.completion_tokens is not None
                else proxy_token_count(text)
            ),
            model_id=self.model_id,
        )
        return text, usage


class HttpLm:
    """Chat-completions client over a single OpenAI-compatible POST route."""

    def __init__(self, endpoint: LmEndpoint, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.session = session or requests.Session()

    @property
    def model_id(self) -> str:
        return self.endpoint.model_id

    @property
    def max_retries(self) -> int:
        return self.endpoint.max_retries

    @property
    def max_in_flight(self) -> int:
        return self.endpoint.max_in_flight

    def generate(self, messages: Sequence[Message], params: GenerationParams) -> tuple[str, TokenUsage]:
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        body: dict[str, Any] = {
            "model": self.endpoint.model_id,
            "messages": list(messages),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        headers = {}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        try:
            resp = self.session.post(
                url, json=body, headers=headers, timeout=self.endpoint.request_timeout
            )
        except requests.Timeout as err:
            raise Timeout(f"request to {url} timed out") from err
        except requests.RequestException as err:
            raise Transport(f"request to {url} failed: {err}") from err
        if resp.status_code != 200:
            raise EndpointRejected(resp.status_code, resp.text)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as err:
            raise EndpointRejected(200, f"malformed response body: {err}") from err
        usage = data.get("usage") or {}
        return text, TokenUsage(
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            model_id=self.endpoint.model_id,
        )


@dataclass
class AuditEntry:
    seq: int
    role_tag: str
    candidate: str
    model_id: str
    messages: list[Message]
    response: str | None
    prompt_tokens: int
    completion_tokens: int
    attempt: int
    error: str | None
    started_at: float
    finished_at: float

    def to_json(self, include_timestamps: bool = True) -> str:
        doc = {
            "seq": self.seq,
            "role": self.role_tag,
            "candidate": self.candidate,
            "model": self.model_id,
            "messages": self.messages,
            "response": self.response,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "attempt": self.attempt,
            "error": self.error,
        }
        if include_timestamps:
            doc["started_at"] = self.started_at
            doc["finished_at"] = self.finished_at
        return json.dumps(doc, ensure_ascii=False)


@dataclass
class UsageTotals:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def add(self, usage: TokenUsage) -> None:
        self.prompt_tokens += usage.prompt_tokens
        self.completion_tokens += usage.completion_tokens
        self.calls += 1


def _is_retryable(err: GatewayError) -> bool:
    if isinstance(err, (Transport, Timeout)):
        return True
    return isinstance(err, EndpointRejected) and err.retryable


def schema_errors(doc: Any, schema: dict) -> list[str]:
    """All JSON Schema violations of doc, as human-readable strings."""
    validator = jsonschema.Draft202012Validator(schema)
    out = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "(root)"
        out.append(f"{where}: {err.message}")
    return out


def first_json_object(text: str) -> tuple[Any | None, str]:
    """Extract the first syntactically valid JSON object embedded in text."""
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text, idx)
            return obj, ""
        except ValueError:
            idx = text.find("{", idx + 1)
    return None, "no JSON object found in completion"


REPAIR_PROMPT = (
    "Your previous reply was not a valid response. Problems:\n{errors}\n"
    "Reply again with ONLY a single JSON object of the required shape, no other text."
)


class LmGateway:
    """Thread-safe front door to one LM backend.

    Enforces at most max_in_flight outstanding requests, retries transient
    transport failures with exponential backoff, tags every call with a
    (module-role, candidate) pair for the usage ledger, and records every
    attempted call in an audit log ordered by completion time.
    """

    def __init__(
        self,
        backend: ScriptedLm | HttpLm,
        max_retries: int | None = None,
        max_in_flight: int | None = None,
        backoff: float = 0.25,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.max_retries = backend.max_retries if max_retries is None else max_retries
        bound = backend.max_in_flight if max_in_flight is None else max_in_flight
        if bound < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = bound
        self._slots = threading.Semaphore(bound)
        self._backoff = backoff
        self._sleep = sleep
        self._lock = threading.Lock()
        self._audit: list[AuditEntry] = []
        self._ledger: dict[tuple[str, str], UsageTotals] = {}

    @property
    def model_id(self) -> str:
        return self.backend.model_id

    def _record(
        self,
        role_tag: str,
        candidate: str,
        messages: Sequence[Message],
        response: str | None,
        usage: TokenUsage,
        attempt: int,
        error: str | None,
        started_at: float,
    ) -> None:
        with self._lock:
            entry = AuditEntry(
                seq=len(self._audit),
                role_tag=role_tag,
                candidate=candidate,
                model_id=self.backend.model_id,
                messages=[dict(m) for m in messages],
                response=response,
                prompt_tokens=usage.prompt_tokens,
                completion_tokens=usage.completion_tokens,
                attempt=attempt,
                error=error,
                started_at=started_at,
                finished_at=time.time(),
            )
            self._audit.append(entry)
            key = (role_tag, candidate)
            if key not in self._ledger:
                self._ledger[key] = UsageTotals()
            self._ledger[key].add(usage)

    def complete(
        self,
        messages: Sequence[Message],
        params: GenerationParams,
        role: str = "unknown",
        candidate: str = "-",
    ) -> tuple[str, TokenUsage]:
        """One chat completion; retries transient failures up to max_retries."""
        if not messages:
            raise ValueError("messages must be non-empty")
        if messages[0]["role"] not in ("system", "user"):
            raise ValueError("first message must be a system or user role")
        with self._slots:
            attempt = 0
            while True:
                started = time.time()
                try:
                    text, usage = self.backend.generate(messages, params)
                except GatewayError as err:
                    self._record(
                        role, candidate, messages, None, TokenUsage(model_id=self.backend.model_id),
                        attempt, str(err), started,
                    )
                    if _is_retryable(err) and attempt < self.max_retries:
                        self._sleep(self._backoff * (2**attempt))
                        attempt += 1
                        continue
                    raise
                self._record(role, candidate, messages, text, usage, attempt, None, started)
                return text, usage

    def complete_structured(
        self,
        messages: Sequence[Message],
        params: GenerationParams,
        schema: dict,
        parse_retries: int = 2,
        role: str = "unknown",
        candidate: str = "-",
    ) -> tuple[Any, TokenUsage]:
        """Completion that must parse into a JSON object matching schema.

        On a parse or validation failure the request is re-issued with the
        validation errors appended, up to parse_retries extra times. Raises
        SchemaViolation carrying the final error list when retries run out.
        """
        convo = list(messages)
        usage_sum = TokenUsage(model_id=self.backend.model_id)
        errors: list[str] = []
        for _ in range(parse_retries + 1):
            text, usage = self.complete(convo, params, role=role, candidate=candidate)
            usage_sum = usage_sum + usage
            doc, parse_err = first_json_object(text)
            errors = [parse_err] if doc is None else schema_errors(doc, schema)
            if not errors:
                return doc, usage_sum
            convo = list(convo) + [
                assistant(text),
                user(REPAIR_PROMPT.format(errors="\n".join(f"- {e}" for e in errors))),
            ]
        raise SchemaViolation(errors)

    def usage_ledger(self) -> dict[tuple[str, str], UsageTotals]:
        """Aggregated token usage per (module-role, candidate). Exact sums."""
        with self._lock:
            return {
                k: UsageTotals(v.prompt_tokens, v.completion_tokens, v.calls)
                for k, v in self._ledger.items()
            }

    def totals_by_role(self) -> dict[str, UsageTotals]:
        out: dict[str, UsageTotals] = {}
        for (role_tag, _), totals in self.usage_ledger().items():
            slot = out.setdefault(role_tag, UsageTotals())
            slot.prompt_tokens += totals.prompt_tokens
            slot.completion_tokens += totals.completion_tokens
            slot.calls += totals.calls
        return out

    def usage_for_candidate(self, candidate: str) -> UsageTotals:
        out = UsageTotals()
        for (_, cand), totals in self.usage_ledger().items():
            if cand == candidate:
                out.prompt_tokens += totals.prompt_tokens
                out.completion_tokens += totals.completion_tokens
                out.calls += totals.calls
        return out

    def audit_entries(self) -> list[AuditEntry]:
        with self._lock:
            return list(self._audit)

    def audit_lines(self, include_timestamps: bool = False) -> list[str]:
        return [e.to_json(include_timestamps) for e in self.audit_entries()]
