"""Transport to served chat models, plus a deterministic mock.

Wire format is the OpenAI-style ``/v1/chat/completions`` JSON body. Constrained
choices go out as ``structured_outputs: {"choice": [...]}`` with
``max_tokens=1``; per-choice scores are read from ``logprobs.content[0]
.top_logprobs`` when the server returns them.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import httpx
import numpy as np

from .kernels import content_hash, fnv1a64

log = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    def __init__(self, message: str, retryable: bool):
        super().__init__(message)
        self.retryable = retryable


@dataclass
class ChatRequest:
    messages: list[dict[str, str]]
    temperature: float = 1.0
    max_tokens: int = 2048
    choices: Optional[list[str]] = None
    tools: Optional[list[dict[str, Any]]] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.choices is not None:
            if not self.choices:
                raise ValueError("constrained request needs at least one choice")
            self.max_tokens = 1

    def digest(self) -> str:
        return content_hash(asdict(self))


@dataclass
class GatewayConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    timeout: float = 120.0
    max_retries: int = 2
    max_in_flight: int = 8
    backoff: float = 0.5
    audit_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_env(cls, **overrides: Any) -> "GatewayConfig":
        env = os.environ
        kw: dict[str, Any] = {}
        if "TRACEKIT_ENDPOINT" in env:
            kw["endpoint"] = env["TRACEKIT_ENDPOINT"]
        if "TRACEKIT_MODEL" in env:
            kw["model"] = env["TRACEKIT_MODEL"]
        if "TRACEKIT_TIMEOUT" in env:
            kw["timeout"] = float(env["TRACEKIT_TIMEOUT"])
        if "TRACEKIT_MAX_RETRIES" in env:
            kw["max_retries"] = int(env["TRACEKIT_MAX_RETRIES"])
        if "TRACEKIT_MAX_IN_FLIGHT" in env:
            kw["max_in_flight"] = int(env["TRACEKIT_MAX_IN_FLIGHT"])
        if "TRACEKIT_AUDIT_LOG" in env:
            kw["audit_path"] = env["TRACEKIT_AUDIT_LOG"]
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


class _AuditLog:
    def __init__(self, path: Optional[str]):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    def write(self, request: ChatRequest, response: Any) -> None:
        if self.path is None:
            return
        rec = {"request": asdict(request), "response": response}
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


class _InFlight:
    """Bounded semaphore that also records the peak number of holders."""

    def __init__(self, limit: int):
        self._sem = threading.BoundedSemaphore(limit)
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self) -> None:
        self._sem.acquire()
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)

    def __exit__(self, *exc: Any) -> None:
        with self._lock:
            self.current -= 1
        self._sem.release()


class HttpGateway:
    def __init__(self, config: GatewayConfig, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        self.in_flight = _InFlight(config.max_in_flight)
        self.audit = _AuditLog(config.audit_path)
        self._sleep = sleep

    def _body(self, req: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.config.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        if req.tools:
            body["tools"] = req.tools
        if req.choices is not None:
            body["structured_outputs"] = {"choice": list(req.choices)}
            body["logprobs"] = True
            body["top_logprobs"] = min(20, len(req.choices))
        return body

    def _post(self, req: ChatRequest) -> dict[str, Any]:
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        body = self._body(req)
        attempt = 0
        while True:
            try:
                with self.in_flight:
                    resp = self.client.post(url, json=body, timeout=self.config.timeout)
                if resp.status_code >= 300:
                    raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}", retryable=True)
                try:
                    data = resp.json()
                except ValueError as exc:
                    raise GatewayError(f"malformed response body: {exc}", retryable=False) from exc
                self.audit.write(req, data)
                return data
            except httpx.TimeoutException as exc:
                err = GatewayError(f"timeout: {exc}", retryable=True)
            except httpx.TransportError as exc:
                err = GatewayError(f"transport error: {exc}", retryable=True)
            except GatewayError as exc:
                err = exc
            if not err.retryable or attempt >= self.config.max_retries:
                raise err
            attempt += 1
            log.warning("request failed (%s); retry %d/%d", err, attempt, self.config.max_retries)
            self._sleep(self.config.backoff * 2 ** (attempt - 1))

    @staticmethod
    def _message(data: dict[str, Any]) -> dict[str, Any]:
        try:
            return data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed response body: {exc}", retryable=False) from exc

    def complete(self, request: ChatRequest) -> str:
        choice = self._message(self._post(request))
        content = (choice.get("message") or {}).get("content")
        if not isinstance(content, str):
            raise GatewayError("malformed response body: no message content", retryable=False)
        return content

    def choose(self, request: ChatRequest) -> tuple[str, Optional[dict[str, float]]]:
        if not request.choices:
            raise ValueError("choose() needs a constrained-choice request")
        choice = self._message(self._post(request))
        label = ((choice.get("message") or {}).get("content") or "").strip()
        scores: Optional[dict[str, float]] = None
        try:
            top = choice["logprobs"]["content"][0]["top_logprobs"]
            found = {t["token"].strip(): float(t["logprob"]) for t in top}
            scores = {c: found[c] for c in request.choices if c in found} or None
        except (KeyError, IndexError, TypeError):
            scores = None
        return label, scores


class MockGateway:
    """Deterministic stand-in for a served model.

    Responses are a pure function of ``(seed, request digest)``: the
    ``responder`` receives the request and an RNG seeded from both. With no
    responder, ``script`` turns are returned in order (cycling).
    """

    def __init__(self, seed: int = 0, responder: Optional[Callable[[ChatRequest, np.random.Generator], str]] = None,
                 scorer: Optional[Callable[[ChatRequest], Optional[dict[str, float]]]] = None,
                 script: Optional[list[str]] = None, max_in_flight: int = 8,
                 audit_path: Optional[str] = None):
        self.seed = seed
        self.responder = responder
        self.scorer = scorer
        self.script = list(script or [])
        self._turn = 0
        self._lock = threading.Lock()
        self.in_flight = _InFlight(max_in_flight)
        self.audit = _AuditLog(audit_path)
        self.calls = 0

    def _rng(self, request: ChatRequest) -> np.random.Generator:
        return np.random.default_rng([self.seed, fnv1a64(request.digest().encode())])

    def complete(self, request: ChatRequest) -> str:
        with self.in_flight:
            with self._lock:
                self.calls += 1
            if self.responder is not None:
                text = self.responder(request, self._rng(request))
            elif self.script:
                with self._lock:
                    text = self.script[self._turn % len(self.script)]
                    self._turn += 1
            else:
                text = ""
        self.audit.write(request, text)
        return text

    def choose(self, request: ChatRequest) -> tuple[str, Optional[dict[str, float]]]:
        if not request.choices:
            raise ValueError("choose() needs a constrained-choice request")
        with self.in_flight:
            scores = self.scorer(request) if self.scorer is not None else None
            if scores:
                from .adapters import argmax_label

                label = argmax_label({c: scores[c] for c in request.choices if c in scores})
            else:
                rng = self._rng(request)
                label = request.choices[int(rng.integers(len(request.choices)))]
        self.audit.write(request, {"label": label, "scores": scores})
        return label, scores
