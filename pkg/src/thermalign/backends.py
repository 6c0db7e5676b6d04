"""Inference backends: the local toy checkpoint and a remote chat-completions endpoint."""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import httpx
import numpy as np
import torch
from PIL import Image

from .errors import BackendError, BackendTimeout, ConfigError, ProtocolError
from .model import ToyVLM
from .scenegen import load_image, to_uint8

log = logging.getLogger(__name__)


@dataclass
class InferenceRequest:
    image: Any  # path or array
    prompt: str
    max_new_tokens: int = 8
    request_id: str = ""

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass
class BatchResult:
    request_id: str
    text: str | None = None
    error: Exception | None = None


class Backend:
    max_parallel = 1

    def infer(self, request: InferenceRequest) -> str:
        raise NotImplementedError

    def _safe_infer(self, request: InferenceRequest) -> BatchResult:
        try:
            return BatchResult(request.request_id, self.infer(request))
        except Exception as exc:  # per-item failures are values
            return BatchResult(request.request_id, error=exc)

    def batch_infer(self, requests: Sequence[InferenceRequest], parallelism: int = 1) -> list[BatchResult]:
        """One result per request, in input order; failures are returned, not raised."""
        if parallelism < 1 or parallelism > self.max_parallel:
            raise ValueError(f"parallelism must be in [1, {self.max_parallel}], got {parallelism}")
        if parallelism == 1:
            return [self._safe_infer(r) for r in requests]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(self._safe_infer, requests))


def batch_infer(requests: Sequence[InferenceRequest], backend: Backend, parallelism: int = 1) -> list[BatchResult]:
    return backend.batch_infer(requests, parallelism)


class LocalBackend(Backend):
    """Greedy decoding on a toy checkpoint; calls on one instance are serialized."""

    def __init__(self, model: ToyVLM, max_parallel: int = 4):
        self.model = model.eval()
        self.max_parallel = max_parallel
        self._lock = threading.Lock()

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike) -> "LocalBackend":
        from .checkpoint import load_checkpoint

        return cls(load_checkpoint(path))

    def infer(self, request: InferenceRequest) -> str:
        image = load_image(request.image) if isinstance(request.image, (str, Path)) else request.image
        vocab = self.model.vocab
        prompt_ids = [vocab.bos] + vocab.tokenize(request.prompt)
        with self._lock, torch.no_grad():
            z = self.model.project(self.model.encode_image(image))
            out = self.model.generate(z, prompt_ids, request.max_new_tokens)[0]
        return vocab.detokenize(out)


@dataclass
class RemoteConfig:
    base_url: str
    model: str
    auth_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    backoff_base: float = 1.0

    def validate(self) -> None:
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")


def encode_png(image: Any) -> bytes:
    if isinstance(image, (str, Path)):
        path = Path(image)
        data = path.read_bytes()
        if data[:8] == b"\x89PNG\r\n\x1a\n":
            return data
        image = load_image(path)
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def request_body(model: str, prompt: str, png: bytes, max_tokens: int) -> dict:
    url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
    return {
        "model": model,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": url}},
                ],
            }
        ],
        "max_tokens": max_tokens,
    }


class RemoteBackend(Backend):
    """Chat-completions client with retry on 429/5xx and a cap on in-flight requests."""

    RETRY_STATUS = {429} | set(range(500, 600))

    def __init__(self, config: RemoteConfig, client: httpx.Client | None = None, sleep=time.sleep, rng=None):
        config.validate()
        self.config = config
        self.max_parallel = config.max_parallel
        headers = {"Content-Type": "application/json"}
        if config.auth_env:
            token = os.environ.get(config.auth_env)
            if not token:
                raise ConfigError(
                    f"environment variable {config.auth_env} is not set; export the API token there"
                )
            headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(timeout=config.timeout)
        self._headers = headers
        self._slots = threading.BoundedSemaphore(config.max_parallel)
        self._sleep = sleep
        self._rng = rng or random.Random()

    @property
    def endpoint(self) -> str:
        return self.config.base_url.rstrip("/") + "/chat/completions"

    def _backoff(self, attempt: int) -> float:
        base = self.config.backoff_base * 2**attempt
        return base + self._rng.uniform(0, self.config.backoff_base)

    def infer(self, request: InferenceRequest) -> str:
        body = request_body(self.config.model, request.prompt, encode_png(request.image), request.max_new_tokens)
        payload = json.dumps(body).encode()
        attempt = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(
                        self.endpoint, content=payload, headers=self._headers, timeout=self.config.timeout
                    )
            except httpx.TimeoutException as exc:
                if attempt >= self.config.max_retries:
                    raise BackendTimeout(f"request {request.request_id} timed out") from exc
            except httpx.HTTPError as exc:
                if attempt >= self.config.max_retries:
                    raise BackendError(f"request {request.request_id} failed: {exc}") from exc
            else:
                if resp.status_code not in self.RETRY_STATUS:
                    return self._extract(resp)
                if attempt >= self.config.max_retries:
                    raise BackendError(f"HTTP {resp.status_code} after {attempt} retries")
            delay = self._backoff(attempt)
            log.info("retrying %s in %.2fs", request.request_id, delay)
            self._sleep(delay)
            attempt += 1

    @staticmethod
    def _extract(resp: httpx.Response) -> str:
        if resp.status_code != 200:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected response body: {resp.text[:200]}") from exc
        if not isinstance(content, str):
            raise ProtocolError("message content is not a string")
        return content
