"""Generator backends: builtin policy, remote chat-completion API, replay.

The remote path speaks the common chat-completion JSON shape and is reachable
only through an injectable transport callable, so the test suite never touches
a network. Replay serves recorded fixtures keyed by (prompt, n, temperature).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .kernel import Rng

log = logging.getLogger(__name__)

_sleep = time.sleep


class GatewayError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    n: int = 1
    temperature: float = 0.8
    max_tokens: int = 32
    user_id: int = 0


@dataclass(frozen=True)
class GenResponse:
    texts: tuple[str, ...]
    logprobs: tuple[float | None, ...]


def request_key(req: GenRequest) -> str:
    material = json.dumps([req.prompt, req.n, req.temperature], sort_keys=True)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def default_transport(url: str, payload: dict, headers: dict, timeout: float):
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    return resp.status_code, resp.json()


@dataclass
class GeneratorBackend:
    kind: str = "builtin"
    # builtin
    policy: Any = None
    seed: int = 0
    # remote
    endpoint: str = ""
    model_name: str = ""
    auth_env: str = ""
    timeout: float = 30.0
    retry_budget: int = 2
    transport: Callable | None = None
    # replay
    fixture_path: str = ""
    _fixture: dict[str, list[str]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("builtin", "remote", "replay"):
            raise ValueError(f"unknown backend kind {self.kind!r}")


def builtin_backend(policy, seed: int = 0) -> GeneratorBackend:
    return GeneratorBackend(kind="builtin", policy=policy, seed=seed)


def remote_backend(
    endpoint: str,
    model_name: str,
    auth_env: str = "",
    timeout: float = 30.0,
    retry_budget: int = 2,
    transport=None,
    seed: int = 0,
) -> GeneratorBackend:
    return GeneratorBackend(
        kind="remote",
        endpoint=endpoint,
        model_name=model_name,
        auth_env=auth_env,
        timeout=timeout,
        retry_budget=retry_budget,
        transport=transport or default_transport,
        seed=seed,
    )


def replay_backend(fixture_path: str) -> GeneratorBackend:
    return GeneratorBackend(kind="replay", fixture_path=fixture_path)


def _validate(req: GenRequest) -> None:
    if req.n < 1:
        raise ValueError(f"n must be >= 1, got {req.n}")
    if req.temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {req.temperature}")
    if req.max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {req.max_tokens}")


def _generate_builtin(backend: GeneratorBackend, req: GenRequest) -> GenResponse:
    from .policy import BOS, sample_n, tokenize

    model = backend.policy
    prompt_ids = [BOS] + tokenize(model.vocab, req.prompt)
    responses = sample_n(
        model,
        prompt_ids,
        n=req.n,
        max_new_tokens=req.max_tokens,
        temperature=req.temperature,
        seed=backend.seed,
        user_id=req.user_id,
    )
    return GenResponse(
        texts=tuple(r.text for r in responses),
        logprobs=tuple(r.logprob_policy for r in responses),
    )


def _generate_remote(backend: GeneratorBackend, req: GenRequest) -> GenResponse:
    payload = {
        "model": backend.model_name,
        "messages": [{"role": "user", "content": req.prompt}],
        "n": req.n,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(backend.auth_env, "") if backend.auth_env else ""
    if token:
        headers["Authorization"] = f"Bearer {token}"

    attempts = 0
    last_err = "no attempt made"
    jitter = Rng(backend.seed, "retry-jitter", request_key(req))
    while attempts <= backend.retry_budget:
        attempts += 1
        try:
            status, body = backend.transport(backend.endpoint, payload, headers, backend.timeout)
        except Exception as exc:
            last_err = f"transport failure: {exc}"
        else:
            if status == 200:
                try:
                    texts = tuple(c["message"]["content"] for c in body["choices"])
                except (KeyError, TypeError) as exc:
                    raise GatewayError(f"malformed response body: {exc}", attempts) from exc
                if len(texts) != req.n:
                    raise GatewayError(
                        f"backend returned {len(texts)} texts for n={req.n}", attempts
                    )
                return GenResponse(texts=texts, logprobs=(None,) * req.n)
            if 400 <= status < 500:
                raise GatewayError(f"request rejected with status {status}", attempts)
            last_err = f"status {status}"
        if attempts <= backend.retry_budget:
            delay = 0.5 * (2 ** (attempts - 1)) * (1.0 + float(jitter.uniform(0.0, 0.5)))
            _sleep(delay)
    raise GatewayError(f"remote generation failed after {attempts} attempts: {last_err}", attempts)


def _load_fixture(backend: GeneratorBackend) -> dict[str, list[str]]:
    if backend._fixture is None:
        table: dict[str, list[str]] = {}
        if backend.fixture_path and os.path.exists(backend.fixture_path):
            with open(backend.fixture_path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        table[rec["key"]] = list(rec["texts"])
        backend._fixture = table
    return backend._fixture


def _generate_replay(backend: GeneratorBackend, req: GenRequest) -> GenResponse:
    key = request_key(req)
    table = _load_fixture(backend)
    if key not in table:
        raise GatewayError(f"replay fixture miss for key {key}")
    texts = table[key]
    if len(texts) != req.n:
        raise GatewayError(f"fixture for key {key} has {len(texts)} texts, requested {req.n}")
    return GenResponse(texts=tuple(texts), logprobs=(None,) * req.n)


def generate(backend: GeneratorBackend, req: GenRequest) -> GenResponse:
    _validate(req)
    if backend.kind == "builtin":
        return _generate_builtin(backend, req)
    if backend.kind == "remote":
        return _generate_remote(backend, req)
    return _generate_replay(backend, req)


def record(backend: GeneratorBackend, requests_: list[GenRequest], fixture_path: str):
    """Run requests against a live backend and persist a replay fixture.

    Duplicate requests collapse to one entry. Failures don't abort the batch;
    they come back in the second element. Returns (n_written, failures).
    """
    entries: dict[str, list[str]] = {}
    failures: list[tuple[str, str]] = []
    for req in requests_:
        key = request_key(req)
        if key in entries:
            continue
        try:
            resp = generate(backend, req)
        except (GatewayError, ValueError) as exc:
            failures.append((key, str(exc)))
            continue
        entries[key] = list(resp.texts)
    with open(fixture_path, "w", encoding="utf-8") as f:
        for key in sorted(entries):
            f.write(json.dumps({"key": key, "texts": entries[key]}) + "\n")
    return len(entries), failures
