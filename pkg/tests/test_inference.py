import json
import random
import threading
import time

import pytest

from hivscreen.decide import parse_decision
from hivscreen.inference import (
    DecodeError, HttpTransport, InferenceClient, InferenceConfig, InProcessTransport, NativeDialect,
    OpenAIChatDialect, RunOutput, Token, TransportError, all_failed, decode_response, encode_request,
)
from hivscreen.mockserver import BackgroundServer, MockPolicy, MockServer
from hivscreen.prompts import build_prompt

NOTE = "Patiënt met hoesten. [[IC:31 excl=0 d=2022-03-01]] Geen HIV-test bekend."


def _native(tokens=(("Final", -0.1), ("YES", -0.2)), **extra):
    body = {"text": " ".join(t for t, _ in tokens), "tokens": [{"t": t, "lp": lp} for t, lp in tokens],
            "prompt_tokens": 5, "completion_tokens": len(tokens)}
    body.update(extra)
    return json.dumps(body).encode()


def test_config_defaults_match_inference_table():
    cfg = InferenceConfig()
    assert (cfg.temperature, cfg.top_k, cfg.top_p, cfg.min_p, cfg.n_runs) == (0.8, 64, 0.95, 0.0, 3)


@pytest.mark.parametrize("kw", [{"top_p": 0.0}, {"top_p": 1.5}, {"parallelism": 0}, {"n_runs": 0},
                                {"seed_policy": "random"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        InferenceConfig(**kw)


def test_seed_policies():
    assert [InferenceConfig(base_seed=10).seed_for(i) for i in range(3)] == [10, 11, 12]
    assert [InferenceConfig(base_seed=10, seed_policy="fixed").seed_for(i) for i in range(3)] == [10, 10, 10]


def test_request_body_defaults():
    body = json.loads(encode_request("prompt", InferenceConfig(base_seed=7), 2))
    assert body == {"prompt": "prompt", "temperature": 0.8, "top_k": 64, "top_p": 0.95, "min_p": 0.0,
                    "max_tokens": 8192, "seed": 9, "logprobs": True}


def test_decode_minimal_response():
    run = decode_response(_native(), "r1", 0)
    assert run.completion_token_count == 2 and run.ok
    assert run.tokens == (Token("Final", -0.1), Token("YES", -0.2))


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d.pop("tokens"), "tokens"),
    (lambda d: d["tokens"][1].pop("lp"), "tokens[1].lp"),
    (lambda d: d["tokens"][0].update(lp=0.5), "tokens[0].lp"),
    (lambda d: d["tokens"][0].update(t=3), "tokens[0].t"),
    (lambda d: d.update(completion_tokens=3), "completion_tokens"),
    (lambda d: d.update(prompt_tokens="5"), "prompt_tokens"),
    (lambda d: d.pop("text"), "text"),
])
def test_decode_schema_violations_name_the_field(mutate, path):
    doc = json.loads(_native())
    mutate(doc)
    with pytest.raises(DecodeError) as err:
        decode_response(json.dumps(doc).encode())
    assert err.value.path == path


def test_decode_rejects_non_json():
    with pytest.raises(DecodeError):
        decode_response(b"<html>")


def test_encode_decode_round_trip_on_mock():
    mock = MockServer()
    prompt = build_prompt("SP", NOTE)
    raw = mock.respond(encode_request(prompt, InferenceConfig(), 0))
    run = decode_response(raw)
    doc = json.loads(raw)
    assert run.text == doc["text"]
    assert [(t.text, t.logprob) for t in run.tokens] == [(t["t"], t["lp"]) for t in doc["tokens"]]


def test_run_output_serialization_round_trip():
    run = decode_response(_native(), "r", 1)
    assert RunOutput.from_dict(json.loads(json.dumps(run.to_dict()))) == run


def test_openai_chat_dialect():
    dialect = OpenAIChatDialect(model="m")
    body = json.loads(dialect.encode("hi", InferenceConfig(), 1))
    assert body["messages"] == [{"role": "user", "content": "hi"}] and body["seed"] == 1 and body["model"] == "m"
    resp = {"choices": [{"message": {"role": "assistant", "content": "Final YES"},
                         "logprobs": {"content": [{"token": "Final", "logprob": -0.5},
                                                  {"token": " YES", "logprob": -0.1}]}}],
            "usage": {"prompt_tokens": 4, "completion_tokens": 2}}
    run = dialect.decode(json.dumps(resp).encode(), "r", 1)
    assert run.text == "Final YES" and run.completion_token_count == 2
    del resp["choices"][0]["logprobs"]
    with pytest.raises(DecodeError, match="logprobs"):
        dialect.decode(json.dumps(resp).encode())


def test_execute_runs_zero_noise_mock():
    client = InferenceClient(InProcessTransport(MockServer().respond))
    runs = client.execute_runs("r", build_prompt("SP", NOTE))
    assert [r.run_index for r in runs] == [0, 1, 2]
    assert all(r.ok and r.completion_token_count == len(r.tokens) for r in runs)
    assert {r.token_texts[-1] for r in runs} == {"YES"}
    assert len({r.text for r in runs}) == 3  # independent samples


class _Flaky:
    def __init__(self, inner, failures):
        self.inner, self.failures, self.calls = inner, failures, 0

    def send(self, path, body):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError("connection reset")
        return self.inner(body)


def test_retries_then_success_with_exponential_backoff():
    sleeps = []
    transport = _Flaky(MockServer().respond, failures=2)
    client = InferenceClient(transport, InferenceConfig(n_runs=1, max_retries=3, backoff_ms=100), sleep=sleeps.append)
    (run,) = client.execute_runs("r", build_prompt("SP", NOTE))
    assert run.ok and transport.calls == 3 and sleeps == [0.1, 0.2]


def test_retries_exhausted_marks_failed():
    client = InferenceClient(_Flaky(None, failures=99), InferenceConfig(max_retries=2, backoff_ms=1),
                             sleep=lambda s: None)
    runs = client.execute_runs("r", "p")
    assert [r.status for r in runs] == ["failed"] * 3 and all_failed(runs)
    assert all(parse_decision(r).value == "Unparsed" for r in runs)


def test_decode_errors_are_not_retried():
    calls = []
    transport = InProcessTransport(lambda body: calls.append(1) or b"{}")
    (run,) = InferenceClient(transport, InferenceConfig(n_runs=1, max_retries=5)).execute_runs("r", "p")
    assert run.status == "failed" and "decode error" in run.error and len(calls) == 1


def test_unreachable_server_fails_all_runs():
    transport = HttpTransport("http://127.0.0.1:9", timeout_ms=500)
    client = InferenceClient(transport, InferenceConfig(max_retries=1, backoff_ms=1))
    runs = client.execute_runs("r", "prompt")
    assert len(runs) == 3 and all(r.status == "failed" for r in runs)
    assert not transport.healthy()


class _Shuffled:
    """Completes requests after random delays so completion order is scrambled."""

    def __init__(self, seed):
        self.mock, self.rng, self.lock = MockServer(), random.Random(seed), threading.Lock()

    def send(self, path, body):
        with self.lock:
            delay = self.rng.random() / 200
        time.sleep(delay)
        return self.mock.respond(body)


def test_ordering_independent_of_completion_order():
    items = [(f"r{i}", build_prompt("SP", NOTE + f" {i}")) for i in range(6)]
    serial = InferenceClient(InProcessTransport(MockServer().respond)).execute_batch(items)
    for seed in range(3):
        shuffled = InferenceClient(_Shuffled(seed), InferenceConfig(parallelism=8)).execute_batch(items)
        assert shuffled == serial


def test_parallelism_bound_observed_by_mock_counter():
    policy = MockPolicy(latency_ms=30, verbosity={"SP": 20, "CP": 20})
    with BackgroundServer(policy) as server:
        client = InferenceClient(HttpTransport(server.url), InferenceConfig(parallelism=3, n_runs=3))
        batches = client.execute_batch([(f"r{i}", build_prompt("SP", NOTE)) for i in range(4)])
        assert all(r.ok for runs in batches for r in runs)
        assert server.mock.requests == 12
        assert 2 <= server.mock.peak_concurrency <= 3


def test_http_transport_against_background_mock():
    with BackgroundServer() as server:
        transport = HttpTransport(server.url)
        assert transport.healthy()
        prompt = build_prompt("CP", NOTE)
        run = InferenceClient(transport, InferenceConfig(n_runs=1)).execute_runs("r", prompt)[0]
        direct = NativeDialect().decode(server.mock.respond(encode_request(prompt, InferenceConfig(), 0)), "r", 0)
        assert run == direct
