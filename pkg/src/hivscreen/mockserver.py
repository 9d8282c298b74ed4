"""Deterministic inference server speaking the native wire protocol.

The server reads the machine-readable fact tags embedded in the prompt, asks the
guideline engine for the decision and replies with a synthetic step-by-step
rationale that ends in ``YES`` or ``NO``. Noise (decision flips, output length,
log-probabilities) is a pure function of ``(server_seed, request seed, prompt)``,
so identical requests always produce identical response bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import numpy as np

from .guideline import decide
from .prompts import load_template
from .synth import TagError, parse_tags

logger = logging.getLogger(__name__)

CP_MARKER = "Step 9 Final decision"
MIN_PADDING = 10
# Note length (words) at which the elasticity factor equals one.
REFERENCE_NOTE_WORDS = 80

# Neutral filler words for the rationale body; none of them is YES or NO.
_PADDING = (
    "the patient record was reviewed against the guideline criteria and the "
    "documented findings were compared with the listed indicator conditions "
    "medication history laboratory values and previous consultations were "
    "considered together before reaching a conclusion about testing"
).split()


@dataclass(frozen=True)
class MockPolicy:
    """Noise model of the mock server.

    Attributes:
        p_flip: probability that a run's final decision is inverted.
        verbosity: target mean completion length per prompt kind (SP/CP).
        length_sigma: log-normal spread of completion lengths.
        input_elasticity: exponent linking note length to output length.
        logprob_mean: mean per-token log-probability of an unflipped run.
        logprob_sd: per-token standard deviation.
        flip_penalty: amount subtracted from the mean for flipped runs.
        server_seed: mixes into every hash.
        latency_ms: artificial per-request delay (HTTP server only).
    """

    p_flip: float = 0.0
    verbosity: dict[str, int] = field(default_factory=lambda: {"SP": 751, "CP": 1403})
    length_sigma: float = 0.25
    input_elasticity: float = 0.3
    logprob_mean: float = -0.35
    logprob_sd: float = 0.2
    flip_penalty: float = 0.002
    server_seed: int = 0
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError(f"p_flip must lie in [0, 1], got {self.p_flip}")
        for kind, v in self.verbosity.items():
            if v < 16:
                raise ValueError(f"verbosity for {kind} must be >= 16, got {v}")
        if self.logprob_sd < 0 or self.flip_penalty < 0:
            raise ValueError("logprob_sd and flip_penalty must be non-negative")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MockPolicy:
        return cls(**d)


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(8, "big"))
        h.update(part)
    return h.digest()


def _unit(digest: bytes) -> float:
    """Uniform in [0, 1) from the first 8 bytes of a digest."""
    return int.from_bytes(digest[:8], "big") / 2**64


class MockServer:
    """Pure request handler plus bookkeeping counters."""

    def __init__(self, policy: MockPolicy | None = None):
        self.policy = policy or MockPolicy()
        self._lock = threading.Lock()
        self.active = 0
        self.peak_concurrency = 0
        self.requests = 0

    # -- bookkeeping (not part of the response) --------------------------
    def _enter(self) -> None:
        with self._lock:
            self.active += 1
            self.requests += 1
            self.peak_concurrency = max(self.peak_concurrency, self.active)

    def _exit(self) -> None:
        with self._lock:
            self.active -= 1

    # -- protocol ----------------------------------------------------------
    def respond(self, body: bytes) -> bytes:
        self._enter()
        try:
            if self.policy.latency_ms:
                time.sleep(self.policy.latency_ms / 1000)
            return json.dumps(self.complete(json.loads(body)), sort_keys=True, separators=(",", ":")).encode()
        finally:
            self._exit()

    def _key(self, prompt: str, seed: int) -> bytes:
        return _digest(str(self.policy.server_seed).encode(), str(seed).encode(),
                       hashlib.sha256(prompt.encode("utf-8")).digest())

    def is_flipped(self, prompt: str, seed: int) -> bool:
        """The flip coin for one run: a pure hash of server seed, run seed and prompt."""
        return _unit(_digest(self._key(prompt, seed), b"flip")) < self.policy.p_flip

    def complete(self, request: dict[str, Any]) -> dict[str, Any]:
        prompt = request["prompt"]
        seed = int(request.get("seed", 0))
        max_tokens = int(request.get("max_tokens", 8192))
        policy = self.policy
        key = self._key(prompt, seed)
        flipped = self.is_flipped(prompt, seed)
        rng = np.random.default_rng(np.frombuffer(_digest(key, b"draws")[:16], dtype=np.uint32))

        steps = self._reason(prompt)
        answer = steps[-1][1] == "YES"
        if flipped:
            answer = not answer
        kind = "CP" if CP_MARKER in prompt else "SP"
        length = self._length(rng, kind, len(prompt.split()))

        final = ["Final", "decision:", "YES" if answer else "NO"]
        rationale = [w for step, outcome in steps[:-1] for w in f"{step}: {outcome}.".split()]
        room = length - len(final) - MIN_PADDING
        rationale = rationale[:max(room, 0)]
        n_pad = length - len(final) - len(rationale)
        padding = [_PADDING[i] for i in rng.integers(0, len(_PADDING), size=n_pad)]
        words = (rationale + padding + final)[:max_tokens]

        mean = policy.logprob_mean - (policy.flip_penalty if flipped else 0.0)
        # + 0.0 turns -0.0 into 0.0 so serialized values never carry a sign on zero
        lps = (np.round(np.minimum(rng.normal(mean, policy.logprob_sd, size=len(words)), 0.0), 4) + 0.0).tolist()
        tokens = [{"t": w, "lp": lp} for w, lp in zip(words, lps)]
        return {
            "text": " ".join(words),
            "tokens": tokens,
            "prompt_tokens": len(prompt.split()),
            "completion_tokens": len(tokens),
        }

    def _length(self, rng: np.random.Generator, kind: str, prompt_words: int) -> int:
        policy = self.policy
        target = policy.verbosity.get(kind, policy.verbosity.get("SP", 751))
        scale = math.exp(policy.length_sigma * rng.standard_normal() - policy.length_sigma**2 / 2)
        reference = len(load_template(kind).body.split()) + REFERENCE_NOTE_WORDS
        elastic = (max(prompt_words, 1) / reference) ** policy.input_elasticity
        return max(16, round(target * scale * elastic))

    @staticmethod
    def _reason(prompt: str) -> list[tuple[str, str]]:
        try:
            facts = parse_tags(prompt)
        except TagError as exc:
            return [("step8", f"R3_no_ic: note tags unreadable ({exc})"), ("step9", "NO")]
        if facts.is_empty():
            return [("step8", "R3_no_ic: zero facts found in note"), ("step9", "NO")]
        return list(decide(facts).trace)


class _Handler(BaseHTTPRequestHandler):
    server_version = "hivscreen-mock/1"
    mock: MockServer  # set on the subclass created by make_http_server

    def log_message(self, fmt: str, *args: Any) -> None:
        logger.debug("mock: " + fmt, *args)

    def _send(self, status: int, payload: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self) -> None:
        if self.path == "/healthz":
            self._send(200, b'{"status":"ok"}')
        elif self.path == "/stats":
            m = self.mock
            self._send(200, json.dumps({"requests": m.requests, "peak_concurrency": m.peak_concurrency}).encode())
        else:
            self._send(404, b'{"error":"not found"}')

    def do_POST(self) -> None:
        if self.path != "/v1/complete":
            self._send(404, b'{"error":"not found"}')
            return
        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        try:
            payload = self.mock.respond(body)
        except (ValueError, KeyError, TypeError) as exc:
            self._send(400, json.dumps({"error": str(exc)}).encode())
            return
        self._send(200, payload)


def make_http_server(mock: MockServer, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind a threading HTTP server around ``mock`` (port 0 picks a free port)."""
    handler = type("MockHandler", (_Handler,), {"mock": mock})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class BackgroundServer:
    """Context manager running the HTTP mock on a daemon thread."""

    def __init__(self, policy: MockPolicy | None = None, host: str = "127.0.0.1", port: int = 0):
        self.mock = MockServer(policy)
        self.httpd = make_http_server(self.mock, host, port)
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> BackgroundServer:
        self._thread.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
