"""Protocol client executing independent sampled runs per record.

Two wire dialects are supported. The native dialect posts to ``/v1/complete``::

    request  {"prompt", "temperature", "top_k", "top_p", "min_p", "max_tokens",
              "seed", "logprobs": true}
    response {"text", "tokens": [{"t", "lp"}], "prompt_tokens", "completion_tokens"}

The ``openai_chat`` dialect maps the same fields onto an OpenAI-style
``/v1/chat/completions`` exchange (llama.cpp, vLLM and similar servers).
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, NamedTuple, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

OK, FAILED = "ok", "failed"


class Token(NamedTuple):
    text: str
    logprob: float


@dataclass(frozen=True)
class RunOutput:
    """One sampled completion.

    Tokens are stored as two parallel tuples (``token_texts``, ``logprobs``);
    :attr:`tokens` offers them as ``Token`` pairs.
    """

    record: str
    run_index: int
    text: str
    token_texts: tuple[str, ...]
    logprobs: tuple[float, ...]
    prompt_token_count: int
    completion_token_count: int
    status: str = OK
    error: str | None = None

    def __post_init__(self) -> None:
        if len(self.token_texts) != len(self.logprobs):
            raise ValueError("token_texts and logprobs must have equal length")

    @property
    def ok(self) -> bool:
        return self.status == OK

    @property
    def tokens(self) -> tuple[Token, ...]:
        return tuple(map(Token, self.token_texts, self.logprobs))

    @classmethod
    def from_tokens(cls, record: str, run_index: int, text: str, tokens: Sequence[tuple[str, float]],
                    prompt_token_count: int = 0, completion_token_count: int | None = None) -> RunOutput:
        texts = tuple(t for t, _ in tokens)
        lps = tuple(float(lp) for _, lp in tokens)
        n = len(texts) if completion_token_count is None else completion_token_count
        return cls(record, run_index, text, texts, lps, prompt_token_count, n)

    @classmethod
    def failed(cls, record: str, run_index: int, error: str) -> RunOutput:
        return cls(record, run_index, "", (), (), 0, 0, FAILED, error)

    def to_dict(self) -> dict[str, Any]:
        return {
            "record": self.record,
            "run_index": self.run_index,
            "status": self.status,
            "error": self.error,
            "text": self.text,
            "token_texts": list(self.token_texts),
            "logprobs": list(self.logprobs),
            "prompt_token_count": self.prompt_token_count,
            "completion_token_count": self.completion_token_count,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunOutput:
        return cls(
            record=d["record"],
            run_index=int(d["run_index"]),
            text=d["text"],
            token_texts=tuple(d["token_texts"]),
            logprobs=tuple(map(float, d["logprobs"])),
            prompt_token_count=int(d["prompt_token_count"]),
            completion_token_count=int(d["completion_token_count"]),
            status=d.get("status", OK),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class InferenceConfig:
    temperature: float = 0.8
    top_k: int = 64
    top_p: float = 0.95
    min_p: float = 0.0
    max_tokens: int = 8192
    n_runs: int = 3
    seed_policy: str = "per_run"  # "per_run" | "fixed"
    base_seed: int = 0
    timeout_ms: int = 120_000
    max_retries: int = 3
    backoff_ms: int = 250
    parallelism: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if self.seed_policy not in ("per_run", "fixed"):
            raise ValueError(f"unknown seed policy {self.seed_policy!r}")

    def seed_for(self, run_index: int) -> int:
        return self.base_seed + run_index if self.seed_policy == "per_run" else self.base_seed

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class TransportError(RuntimeError):
    """The request did not produce a usable response; retrying may help."""


class DecodeError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _dumps(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _loads(data: bytes) -> Any:
    try:
        return json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise DecodeError("$", f"not valid JSON ({exc})") from None


def _expect(obj: Any, key: str, kind: type | tuple[type, ...], path: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise DecodeError(f"{path}.{key}" if path else key, "missing")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise DecodeError(f"{path}.{key}" if path else key, f"expected {getattr(kind, '__name__', kind)}")
    return value


def _token_arrays(raw: list, text_key: str, lp_key: str, path: str) -> tuple[tuple[str, ...], tuple[float, ...]]:
    """Split token objects into text and log-probability tuples, validating both."""
    try:
        texts = tuple(item[text_key] for item in raw)
        lps = tuple(item[lp_key] for item in raw)
        valid = all(type(t) is str for t in texts) and all(
            type(lp) in (int, float) and lp <= 0 and math.isfinite(lp) for lp in lps)
    except (TypeError, KeyError):
        valid = False
    if not valid:  # locate the first offending field for the error message
        for i, item in enumerate(raw):
            _expect(item, text_key, str, f"{path}[{i}]")
            lp = _expect(item, lp_key, (int, float), f"{path}[{i}]")
            if not math.isfinite(lp) or lp > 0:
                raise DecodeError(f"{path}[{i}].{lp_key}", "log-probability must be finite and <= 0")
    return texts, tuple(map(float, lps))


def _check_count(completion: int, n_tokens: int, path: str) -> None:
    if completion != n_tokens:
        raise DecodeError(path, f"{completion} != {n_tokens} tokens")


class NativeDialect:
    name = "native"
    path = "/v1/complete"

    def encode(self, prompt: str, cfg: InferenceConfig, run_index: int) -> bytes:
        return _dumps({
            "prompt": prompt,
            "temperature": cfg.temperature,
            "top_k": cfg.top_k,
            "top_p": cfg.top_p,
            "min_p": cfg.min_p,
            "max_tokens": cfg.max_tokens,
            "seed": cfg.seed_for(run_index),
            "logprobs": True,
        })

    def decode(self, data: bytes, record: str = "", run_index: int = 0) -> RunOutput:
        obj = _loads(data)
        text = _expect(obj, "text", str, "")
        texts, lps = _token_arrays(_expect(obj, "tokens", list, ""), "t", "lp", "tokens")
        prompt_tokens = _expect(obj, "prompt_tokens", int, "")
        completion = _expect(obj, "completion_tokens", int, "")
        _check_count(completion, len(texts), "completion_tokens")
        return RunOutput(record, run_index, text, texts, lps, prompt_tokens, completion)


@dataclass
class OpenAIChatDialect:
    model: str = "medgemma-27b-text-it"
    name: str = "openai_chat"
    path: str = "/v1/chat/completions"

    def encode(self, prompt: str, cfg: InferenceConfig, run_index: int) -> bytes:
        return _dumps({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "top_k": cfg.top_k,
            "top_p": cfg.top_p,
            "min_p": cfg.min_p,
            "max_tokens": cfg.max_tokens,
            "seed": cfg.seed_for(run_index),
            "logprobs": True,
        })

    def decode(self, data: bytes, record: str = "", run_index: int = 0) -> RunOutput:
        obj = _loads(data)
        choices = _expect(obj, "choices", list, "")
        if not choices:
            raise DecodeError("choices", "empty")
        choice = choices[0]
        message = _expect(choice, "message", dict, "choices[0]")
        text = _expect(message, "content", str, "choices[0].message")
        logprobs = choice.get("logprobs") if isinstance(choice, dict) else None
        if not isinstance(logprobs, dict):
            raise DecodeError("choices[0].logprobs", "missing")
        content = _expect(logprobs, "content", list, "choices[0].logprobs")
        texts, lps = _token_arrays(content, "token", "logprob", "choices[0].logprobs.content")
        usage = _expect(obj, "usage", dict, "")
        prompt_tokens = _expect(usage, "prompt_tokens", int, "usage")
        completion = _expect(usage, "completion_tokens", int, "usage")
        _check_count(completion, len(texts), "usage.completion_tokens")
        return RunOutput(record, run_index, text, texts, lps, prompt_tokens, completion)


def make_dialect(name: str, model: str | None = None) -> NativeDialect | OpenAIChatDialect:
    if name == "native":
        return NativeDialect()
    if name == "openai_chat":
        return OpenAIChatDialect(model=model) if model else OpenAIChatDialect()
    raise ValueError(f"unknown dialect {name!r}")


_NATIVE = NativeDialect()


def encode_request(prompt: str, cfg: InferenceConfig, run_index: int) -> bytes:
    """Native-dialect request body for one run."""
    return _NATIVE.encode(prompt, cfg, run_index)


def decode_response(data: bytes, record: str = "", run_index: int = 0) -> RunOutput:
    """Parse a native-dialect response body; raises :class:`DecodeError`."""
    return _NATIVE.decode(data, record, run_index)


class Transport(Protocol):
    def send(self, path: str, body: bytes) -> bytes: ...


class InProcessTransport:
    """Hands request bytes straight to a handler such as ``MockServer.respond``."""

    def __init__(self, handler: Callable[[bytes], bytes]):
        self.handler = handler

    def send(self, path: str, body: bytes) -> bytes:
        return self.handler(body)


class HttpTransport:
    def __init__(self, base_url: str, timeout_ms: int = 120_000, api_key: str | None = None):
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout_ms / 1000)

    def send(self, path: str, body: bytes) -> bytes:
        try:
            resp = self._client.post(path, content=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise DecodeError("$", f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.content

    def healthy(self) -> bool:
        try:
            return self._client.get("/healthz", timeout=5).status_code == 200
        except httpx.HTTPError:
            return False

    def close(self) -> None:
        self._client.close()


@dataclass
class InferenceClient:
    transport: Transport
    cfg: InferenceConfig = field(default_factory=InferenceConfig)
    dialect: NativeDialect | OpenAIChatDialect = field(default_factory=NativeDialect)
    sleep: Callable[[float], None] = time.sleep

    def run_once(self, record: str, prompt: str, run_index: int) -> RunOutput:
        body = self.dialect.encode(prompt, self.cfg, run_index)
        error = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self.sleep(self.cfg.backoff_ms / 1000 * 2 ** (attempt - 1))
            try:
                data = self.transport.send(self.dialect.path, body)
            except TransportError as exc:
                error = str(exc)
                continue
            try:
                return self.dialect.decode(data, record, run_index)
            except DecodeError as exc:
                error = f"decode error {exc}"
                break
        logger.warning("record %s run %d failed: %s", record, run_index, error)
        return RunOutput.failed(record, run_index, error)

    def execute_runs(self, record: str, prompt: str) -> list[RunOutput]:
        """All ``n_runs`` outputs for one prompt, ordered by run index."""
        return self.execute_batch([(record, prompt)])[0]

    def execute_batch(self, items: Sequence[tuple[str, str]]) -> list[list[RunOutput]]:
        """Run every (record, prompt) pair ``n_runs`` times with bounded parallelism."""
        n = self.cfg.n_runs
        jobs = [(r, p, i) for r, p in items for i in range(n)]
        if self.cfg.parallelism == 1:
            outputs = [self.run_once(*job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
                outputs = list(pool.map(lambda job: self.run_once(*job), jobs))
        grouped = [sorted(outputs[k * n:(k + 1) * n], key=lambda o: o.run_index) for k in range(len(items))]
        return grouped


def all_failed(runs: Sequence[RunOutput]) -> bool:
    return all(not r.ok for r in runs)

