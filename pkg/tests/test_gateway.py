"""Generation backends: builtin sampling, remote retry behavior, replay
fixtures."""

import hashlib
import json

import pytest

import prefrank.gateway as gw
from prefrank.gateway import (
    GatewayError,
    GenRequest,
    builtin_backend,
    generate,
    record,
    remote_backend,
    replay_backend,
    request_key,
)
from prefrank.policy import build_vocab, create_policy, PolicyConfig


@pytest.fixture
def policy():
    vocab = build_vocab(["alpha beta gamma delta epsilon"])
    cfg = PolicyConfig(model_dim=8, n_layers=1, n_heads=2, context_len=16, ffn_dim=8)
    return create_policy(vocab, cfg, seed=0)


@pytest.fixture
def no_sleep(monkeypatch):
    slept = []
    monkeypatch.setattr(gw, "_sleep", slept.append)
    return slept


class TestRequestKey:
    def test_depends_only_on_sampling_fields(self):
        a = GenRequest(prompt="p", n=2, temperature=0.5, max_tokens=9, user_id=1)
        b = GenRequest(prompt="p", n=2, temperature=0.5, max_tokens=32, user_id=7)
        assert request_key(a) == request_key(b)
        assert request_key(a) != request_key(GenRequest(prompt="p", n=3, temperature=0.5))

    def test_is_sha256_of_canonical_json(self):
        req = GenRequest(prompt="x", n=1, temperature=0.0)
        want = hashlib.sha256(json.dumps(["x", 1, 0.0]).encode("utf-8")).hexdigest()
        assert request_key(req) == want


class TestValidation:
    def test_rejects_bad_requests(self, policy):
        be = builtin_backend(policy, seed=0)
        for bad in (
            GenRequest(prompt="p", n=0),
            GenRequest(prompt="p", n=1, temperature=-0.1),
            GenRequest(prompt="p", n=1, max_tokens=0),
        ):
            with pytest.raises(ValueError):
                generate(be, bad)


class TestBuiltin:
    def test_counts_and_determinism(self, policy):
        be = builtin_backend(policy, seed=3)
        req = GenRequest(prompt="alpha beta", n=4, temperature=0.9, max_tokens=6, user_id=2)
        a = generate(be, req)
        b = generate(be, req)
        assert len(a.texts) == 4 and len(a.logprobs) == 4
        assert a.texts == b.texts and a.logprobs == b.logprobs

    def test_greedy_samples_identical(self, policy):
        be = builtin_backend(policy, seed=0)
        resp = generate(be, GenRequest(prompt="alpha", n=2, temperature=0.0, max_tokens=5))
        assert resp.texts[0] == resp.texts[1]

    def test_different_users_decouple(self, policy):
        be = builtin_backend(policy, seed=0)
        a = generate(be, GenRequest(prompt="alpha", n=3, temperature=1.3, max_tokens=6, user_id=1))
        b = generate(be, GenRequest(prompt="alpha", n=3, temperature=1.3, max_tokens=6, user_id=2))
        assert a.texts != b.texts


class TestRemote:
    def _backend(self, transport, retry_budget=2):
        return remote_backend(
            "http://unit.test/v1", "toy-model", seed=0, transport=transport,
            retry_budget=retry_budget,
        )

    def test_success_parses_choices(self, no_sleep):
        def transport(url, payload, headers, timeout):
            assert payload["model"] == "toy-model" and payload["n"] == 2
            return 200, {"choices": [{"message": {"content": "a"}}, {"message": {"content": "b"}}]}

        resp = generate(self._backend(transport), GenRequest(prompt="p", n=2))
        assert resp.texts == ("a", "b")
        assert resp.logprobs == (None, None)

    def test_5xx_retries_then_fails_with_attempt_count(self, no_sleep):
        calls = []

        def transport(url, payload, headers, timeout):
            calls.append(1)
            return 503, {}

        with pytest.raises(GatewayError) as exc:
            generate(self._backend(transport, retry_budget=2), GenRequest(prompt="p", n=1))
        assert len(calls) == 3
        assert exc.value.attempts == 3
        assert len(no_sleep) == 2

    def test_5xx_then_success(self, no_sleep):
        calls = []

        def transport(url, payload, headers, timeout):
            calls.append(1)
            if len(calls) == 1:
                return 502, {}
            return 200, {"choices": [{"message": {"content": "ok"}}]}

        resp = generate(self._backend(transport), GenRequest(prompt="p", n=1))
        assert resp.texts == ("ok",) and len(calls) == 2

    def test_4xx_fails_immediately(self, no_sleep):
        calls = []

        def transport(url, payload, headers, timeout):
            calls.append(1)
            return 404, {}

        with pytest.raises(GatewayError) as exc:
            generate(self._backend(transport), GenRequest(prompt="p", n=1))
        assert len(calls) == 1 and exc.value.attempts == 1 and no_sleep == []

    def test_transport_exception_retries(self, no_sleep):
        calls = []

        def transport(url, payload, headers, timeout):
            calls.append(1)
            raise ConnectionError("refused")

        with pytest.raises(GatewayError, match="transport failure"):
            generate(self._backend(transport, retry_budget=1), GenRequest(prompt="p", n=1))
        assert len(calls) == 2

    def test_undercount_is_hard_error(self, no_sleep):
        def transport(url, payload, headers, timeout):
            return 200, {"choices": [{"message": {"content": "only one"}}]}

        with pytest.raises(GatewayError, match="1 texts for n=3"):
            generate(self._backend(transport), GenRequest(prompt="p", n=3))

    def test_malformed_body_is_hard_error(self, no_sleep):
        def transport(url, payload, headers, timeout):
            return 200, {"choices": [{"wrong": "shape"}]}

        with pytest.raises(GatewayError, match="malformed"):
            generate(self._backend(transport), GenRequest(prompt="p", n=1))

    def test_auth_header_from_env(self, no_sleep, monkeypatch):
        seen = {}

        def transport(url, payload, headers, timeout):
            seen.update(headers)
            return 200, {"choices": [{"message": {"content": "x"}}]}

        monkeypatch.setenv("UNIT_TOKEN", "sekret")
        be = remote_backend("http://unit.test/v1", "m", auth_env="UNIT_TOKEN", seed=0,
                            transport=transport)
        generate(be, GenRequest(prompt="p", n=1))
        assert seen["Authorization"] == "Bearer sekret"

    def test_backoff_is_exponential_with_jitter(self, no_sleep):
        def transport(url, payload, headers, timeout):
            return 500, {}

        with pytest.raises(GatewayError):
            generate(self._backend(transport, retry_budget=3), GenRequest(prompt="p", n=1))
        assert len(no_sleep) == 3
        for i, delay in enumerate(no_sleep):
            base = 0.5 * (2**i)
            assert base <= delay < base * 1.5
        # deterministic given (seed, request key)
        replay = []
        gw_sleep, gw._sleep = gw._sleep, replay.append
        try:
            with pytest.raises(GatewayError):
                generate(self._backend(transport, retry_budget=3), GenRequest(prompt="p", n=1))
        finally:
            gw._sleep = gw_sleep
        assert replay == no_sleep


class TestReplay:
    def test_record_then_replay(self, policy, tmp_path):
        be = builtin_backend(policy, seed=1)
        reqs = [
            GenRequest(prompt="alpha beta", n=2, temperature=0.8, max_tokens=5),
            GenRequest(prompt="gamma", n=1, temperature=0.0, max_tokens=5),
            GenRequest(prompt="alpha beta", n=2, temperature=0.8, max_tokens=5),  # dupe
        ]
        path = str(tmp_path / "fix.jsonl")
        n, failures = record(be, reqs, path)
        assert n == 2 and failures == []
        rb = replay_backend(path)
        for req in reqs:
            assert generate(rb, req).texts == generate(be, req).texts

    def test_fixture_sorted_by_key(self, policy, tmp_path):
        be = builtin_backend(policy, seed=1)
        path = str(tmp_path / "fix.jsonl")
        record(be, [GenRequest(prompt=p, n=1, max_tokens=4) for p in ("zz", "aa", "mm")], path)
        with open(path, encoding="utf-8") as f:
            keys = [json.loads(l)["key"] for l in f if l.strip()]
        assert keys == sorted(keys)

    def test_miss_names_key(self, tmp_path):
        path = str(tmp_path / "fix.jsonl")
        with open(path, "w") as f:
            f.write("")
        rb = replay_backend(path)
        req = GenRequest(prompt="nope", n=1)
        with pytest.raises(GatewayError, match=request_key(req)):
            generate(rb, req)

    def test_count_mismatch_rejected(self, tmp_path):
        req = GenRequest(prompt="p", n=3)
        path = str(tmp_path / "fix.jsonl")
        with open(path, "w") as f:
            f.write(json.dumps({"key": request_key(req), "texts": ["only", "two"]}) + "\n")
        with pytest.raises(GatewayError, match="2 texts"):
            generate(replay_backend(path), req)

    def test_logprobs_absent_on_replay(self, policy, tmp_path):
        be = builtin_backend(policy, seed=0)
        req = GenRequest(prompt="alpha", n=2, max_tokens=4)
        path = str(tmp_path / "fix.jsonl")
        record(be, [req], path)
        resp = generate(replay_backend(path), req)
        assert resp.logprobs == (None, None)
