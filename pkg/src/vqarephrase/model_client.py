"""Client layer for a multimodal LM endpoint.

Provides request/response types, an HTTP backend speaking a
chat-completions-style JSON protocol, a deterministic table-driven mock
backend for offline runs, a content-addressed response cache, and NLI
classification built on teacher-forced label scoring.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .datamodel import ImageRef

log = logging.getLogger(__name__)

NLI_LABELS = ("entailment", "neutral", "contradiction")

_NLI_PROMPT = (
    "Premise: {premise}\n"
    "Hypothesis: {hypothesis}\n"
    "Does the premise entail, contradict, or stay neutral toward the hypothesis? "
    "Answer with one word: entailment, neutral, or contradiction.\n"
    "Answer:"
)


class ModelError(Exception):
    """Base class for client-side model failures."""


class RequestError(ModelError):
    """The request itself is invalid; retrying will not help."""


class TransportError(ModelError):
    """Transient endpoint failure; safe to retry."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = True


class CapabilityError(ModelError):
    """The backend lacks a capability the caller needs."""


class NliError(ModelError):
    """NLI provider failure; callers decide fail-open vs fail-closed."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: ImageRef


@dataclass
class SamplingParams:
    mode: str = "greedy"  # greedy | top_p | beam
    p: float = 1.0
    temperature: float = 1.0
    beams: int = 1
    max_new_tokens: int = 64
    length_penalty: float | None = None
    num_samples: int = 1

    def validate(self) -> None:
        if self.mode not in ("greedy", "top_p", "beam"):
            raise RequestError(f"unknown sampling mode {self.mode!r}")
        if self.num_samples < 1:
            raise RequestError("num_samples must be >= 1")
        if self.mode == "top_p" and not 0.0 < self.p <= 1.0:
            raise RequestError(f"top_p requires 0 < p <= 1, got {self.p}")
        if self.mode == "beam" and self.beams < 1:
            raise RequestError("beam mode requires beams >= 1")


@dataclass
class ModelRequest:
    prompt_parts: list
    sampling: SamplingParams = field(default_factory=SamplingParams)
    want_logprobs: bool = False
    stop_markers: list[str] = field(default_factory=list)
    seed: int | None = None
    purpose: str = ""  # run-log tag only; never part of the cache key

    def validate(self) -> None:
        if not self.prompt_parts:
            raise RequestError("request needs at least one prompt part")
        images = [p for p in self.prompt_parts if isinstance(p, ImagePart)]
        if len(images) > 1:
            raise RequestError(f"at most one image attachment allowed, got {len(images)}")
        self.sampling.validate()

    @property
    def text(self) -> str:
        return "".join(p.text for p in self.prompt_parts if isinstance(p, TextPart))

    @property
    def image(self) -> ImageRef | None:
        for part in self.prompt_parts:
            if isinstance(part, ImagePart):
                return part.image
        return None


def text_request(prompt: str,
                 image: ImageRef | None = None,
                 sampling: SamplingParams | None = None,
                 want_logprobs: bool = False,
                 stop_markers: list[str] | None = None,
                 seed: int | None = None,
                 purpose: str = "") -> ModelRequest:
    """Convenience constructor: optional image part followed by one text part."""
    parts: list = []
    if image is not None:
        parts.append(ImagePart(image))
    parts.append(TextPart(prompt))
    return ModelRequest(
        prompt_parts=parts,
        sampling=sampling or SamplingParams(),
        want_logprobs=want_logprobs,
        stop_markers=list(stop_markers or []),
        seed=seed,
        purpose=purpose,
    )


@dataclass
class TokenLogprob:
    token: str
    logprob: float


@dataclass
class GenSample:
    text: str
    tokens: list[TokenLogprob] = field(default_factory=list)


@dataclass
class ModelResponse:
    samples: list[GenSample]
    usage: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "samples": [
                {"text": s.text, "tokens": [[t.token, t.logprob] for t in s.tokens]}
                for s in self.samples
            ],
            "usage": dict(self.usage),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelResponse":
        samples = [
            GenSample(
                text=s["text"],
                tokens=[TokenLogprob(tok, lp) for tok, lp in s.get("tokens", [])],
            )
            for s in payload["samples"]
        ]
        return cls(samples=samples, usage=dict(payload.get("usage", {})))


@dataclass
class NliVerdict:
    label: str
    probabilities: tuple[float, float, float]  # entailment, neutral, contradiction

    def validate(self) -> None:
        if self.label not in NLI_LABELS:
            raise ValueError(f"unknown NLI label {self.label!r}")
        if abs(sum(self.probabilities) - 1.0) > 1e-6:
            raise ValueError("NLI probabilities must sum to 1")
        argmax = max(range(3), key=lambda i: self.probabilities[i])
        if NLI_LABELS[argmax] != self.label:
            raise ValueError("NLI label must be the argmax of the probabilities")


def _stable_hash(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:16], 16)


def request_fingerprint(backend_id: str,
                        request: ModelRequest,
                        kind: str = "generate",
                        continuation: str | None = None) -> str:
    """Cache key over everything that can change the response."""
    parts = []
    for part in request.prompt_parts:
        if isinstance(part, TextPart):
            parts.append({"text": part.text})
        else:
            parts.append({"image": part.image.bytes_hash})
    blob = {
        "backend": backend_id,
        "kind": kind,
        "parts": parts,
        "sampling": asdict(request.sampling),
        "seed": request.seed,
        "want_logprobs": request.want_logprobs,
        "stop": list(request.stop_markers),
        "continuation": continuation,
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode("utf-8")).hexdigest()


class ResponseCache:
    """Directory of content-addressed JSON response files."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, OSError):
            # corrupt entry: treat as a miss; the next put rewrites it
            log.warning("corrupt cache entry %s treated as miss", path.name)
            return None

    def put(self, key: str, payload: dict) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        with self._lock:
            tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)


class Backend(ABC):
    """Uniform generation/scoring interface over one endpoint."""

    backend_id: str = "backend"

    @abstractmethod
    def generate(self, request: ModelRequest) -> ModelResponse:
        ...

    def score_text(self, request: ModelRequest, continuation: str) -> list[TokenLogprob]:
        raise CapabilityError(f"{self.backend_id} does not support teacher-forced scoring")


def _pseudo_logprob(key: str) -> float:
    # deterministic stand-in logprob in [-3, -1]
    return -(1.0 + (_stable_hash(key) % 2000) / 1000.0)


@dataclass
class MockCall:
    kind: str  # generate | score
    text: str
    has_image: bool
    purpose: str
    seed: int | None
    num_samples: int
    continuation: str | None = None


class MockBackend(Backend):
    """Deterministic, table-driven backend for offline runs.

    Table schema (JSON file or dict)::

        {"rules": [{"match": "<regex over prompt text>",
                    "requires_image": true,            # optional tri-state
                    "responses": ["text", ...],
                    "logprobs": [[-0.5, -1.5], ...]}],  # optional
         "scores": [{"match": "<regex over the continuation>",
                     "context_match": "<regex over prompt text>",  # optional
                     "logprobs": [-0.5, -1.5]}]}

    Greedy and beam requests pick the response indexed by a stable hash of
    the prompt text; sampling requests hash the request seed instead, so
    repeated sampling walks the response list deterministically. Unmatched
    generations echo the last non-empty prompt line; unmatched scoring
    produces hash-derived per-token logprobs. Every path is a pure function
    of (table, request), which keeps pipelines built on this backend
    bit-reproducible. All calls are recorded on ``self.requests`` for tests.
    """

    def __init__(self, table: dict, name: str = "mock"):
        self.backend_id = name
        self.requests: list[MockCall] = []
        self._rules = []
        for rule in table.get("rules", []):
            logprobs = rule.get("logprobs")
            if logprobs is not None:
                flat = logprobs if logprobs and isinstance(logprobs[0], list) else [logprobs]
                for lst in flat:
                    if any(lp > 0 for lp in lst):
                        raise ValueError("mock table logprobs must be <= 0")
            self._rules.append(
                (
                    re.compile(rule["match"]),
                    rule.get("requires_image"),
                    list(rule["responses"]),
                    logprobs,
                )
            )
        self._scores = []
        for rule in table.get("scores", []):
            lps = list(rule["logprobs"])
            if any(lp > 0 for lp in lps):
                raise ValueError("mock table logprobs must be <= 0")
            ctx = rule.get("context_match")
            self._scores.append(
                (re.compile(rule["match"]), re.compile(ctx) if ctx else None, lps)
            )

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "MockBackend":
        table = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(table, name=name or f"mock:{Path(path).name}")

    def _find_rule(self, text: str, has_image: bool):
        for pattern, requires_image, responses, logprobs in self._rules:
            if requires_image is not None and requires_image != has_image:
                continue
            if pattern.search(text):
                return responses, logprobs
        return None, None

    @staticmethod
    def _truncate(text: str, stop_markers: list[str]) -> str:
        cut = len(text)
        for marker in stop_markers:
            idx = text.find(marker)
            if idx != -1:
                cut = min(cut, idx)
        return text[:cut]

    @staticmethod
    def _fit_logprobs(values: list[float] | None, tokens: list[str]) -> list[float]:
        if not tokens:
            return []
        if not values:
            return [_pseudo_logprob(tok) for tok in tokens]
        out = list(values[: len(tokens)])
        while len(out) < len(tokens):
            out.append(values[-1])
        return out

    def generate(self, request: ModelRequest) -> ModelResponse:
        text = request.text
        has_image = request.image is not None
        sampling = request.sampling
        self.requests.append(
            MockCall("generate", text, has_image, request.purpose, request.seed, sampling.num_samples)
        )
        responses, logprobs = self._find_rule(text, has_image)
        if responses is None:
            lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
            responses, logprobs = [lines[-1] if lines else ""], None

        if sampling.mode == "top_p":
            base = _stable_hash(str(request.seed)) % len(responses)
        else:
            base = _stable_hash(text) % len(responses)

        per_response = None
        if logprobs is not None:
            per_response = logprobs if logprobs and isinstance(logprobs[0], list) else [logprobs]

        samples = []
        completion_tokens = 0
        for i in range(sampling.num_samples):
            idx = (base + i) % len(responses)
            raw = responses[idx]
            out_text = self._truncate(raw, request.stop_markers)
            tokens = out_text.split()
            given = per_response[min(idx, len(per_response) - 1)] if per_response else None
            lps = self._fit_logprobs(given, tokens)
            samples.append(GenSample(out_text, [TokenLogprob(t, lp) for t, lp in zip(tokens, lps)]))
            completion_tokens += len(tokens)
        usage = {"requests": 1, "prompt_tokens": len(text.split()), "completion_tokens": completion_tokens}
        return ModelResponse(samples=samples, usage=usage)

    def score_text(self, request: ModelRequest, continuation: str) -> list[TokenLogprob]:
        text = request.text
        self.requests.append(
            MockCall("score", text, request.image is not None, request.purpose,
                     request.seed, 1, continuation=continuation)
        )
        tokens = continuation.split()
        if not tokens:
            return []
        for pattern, ctx_pattern, lps in self._scores:
            if ctx_pattern is not None and not ctx_pattern.search(text):
                continue
            if pattern.search(continuation):
                fitted = self._fit_logprobs(lps, tokens)
                return [TokenLogprob(t, lp) for t, lp in zip(tokens, fitted)]
        return [
            TokenLogprob(tok, _pseudo_logprob(f"{text}|{tok}|{i}"))
            for i, tok in enumerate(tokens)
        ]


def _default_transport(url: str, payload: dict, headers: dict, timeout: float):
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"POST {url} failed: {exc}") from exc
    try:
        body = resp.json() if resp.content else {}
    except ValueError as exc:
        raise TransportError(f"non-JSON response from {url}") from exc
    return resp.status_code, body


class HttpBackend(Backend):
    """Chat-completions-style HTTP endpoint with optional image parts.

    Teacher-forced scoring uses a completions endpoint with echoed logprobs
    when ``supports_score`` is set; otherwise score_text raises
    CapabilityError and callers fall back or degrade explicitly.
    """

    def __init__(self,
                 base_url: str,
                 model: str,
                 api_key: str | None = None,
                 timeout: float = 120.0,
                 supports_score: bool = False,
                 transport: Callable | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.supports_score = supports_score
        self._transport = transport or _default_transport
        self.backend_id = f"http:{self.base_url}:{model}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    @staticmethod
    def _image_payload(image: ImageRef) -> dict:
        path = Path(image.source)
        if not path.is_file():
            raise RequestError(f"image file not found: {image.source}")
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        suffix = path.suffix.lstrip(".").lower() or "jpeg"
        return {"type": "image_url", "image_url": {"url": f"data:image/{suffix};base64,{encoded}"}}

    def _content_parts(self, request: ModelRequest) -> list[dict]:
        parts = []
        for part in request.prompt_parts:
            if isinstance(part, TextPart):
                parts.append({"type": "text", "text": part.text})
            else:
                parts.append(self._image_payload(part.image))
        return parts

    def generate(self, request: ModelRequest) -> ModelResponse:
        sampling = request.sampling
        body: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": self._content_parts(request)}],
            "max_tokens": sampling.max_new_tokens,
            "n": sampling.num_samples,
        }
        if sampling.mode == "greedy":
            body["temperature"] = 0.0
        elif sampling.mode == "top_p":
            body["temperature"] = sampling.temperature
            body["top_p"] = sampling.p
        else:  # beam: approximated for endpoints without beam controls
            body["temperature"] = sampling.temperature
            body["num_beams"] = sampling.beams
        if sampling.length_penalty is not None:
            body["length_penalty"] = sampling.length_penalty
        if request.stop_markers:
            body["stop"] = list(request.stop_markers)
        if request.seed is not None:
            body["seed"] = request.seed
        if request.want_logprobs:
            body["logprobs"] = True

        status, payload = self._transport(f"{self.base_url}/chat/completions",
                                          body, self._headers(), self.timeout)
        if status >= 500:
            raise TransportError(f"endpoint returned {status}")
        if status >= 400:
            raise RequestError(f"endpoint rejected request ({status}): {payload}")

        samples = []
        for choice in payload.get("choices", []):
            message = choice.get("message", {})
            content = message.get("content", "")
            if isinstance(content, list):
                content = "".join(c.get("text", "") for c in content)
            tokens = []
            lp_content = (choice.get("logprobs") or {}).get("content") or []
            for entry in lp_content:
                lp = entry.get("logprob")
                tokens.append(TokenLogprob(entry.get("token", ""), min(lp, 0.0) if lp is not None else 0.0))
            samples.append(GenSample(content, tokens))
        if not samples:
            raise TransportError("endpoint returned no choices")
        if request.want_logprobs and all(not s.tokens for s in samples):
            raise CapabilityError(f"{self.backend_id} did not return token logprobs")
        usage = {k: v for k, v in (payload.get("usage") or {}).items() if isinstance(v, int)}
        return ModelResponse(samples=samples, usage=usage)

    def score_text(self, request: ModelRequest, continuation: str) -> list[TokenLogprob]:
        if not self.supports_score:
            raise CapabilityError(f"{self.backend_id} does not support teacher-forced scoring")
        if not continuation:
            return []
        context = request.text
        body = {
            "model": self.model,
            "prompt": context + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        status, payload = self._transport(f"{self.base_url}/completions",
                                          body, self._headers(), self.timeout)
        if status >= 500:
            raise TransportError(f"endpoint returned {status}")
        if status >= 400:
            raise CapabilityError(f"endpoint rejected echo scoring ({status})")
        try:
            choice = payload["choices"][0]
            lp = choice["logprobs"]
            tokens = lp["tokens"]
            token_lps = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError) as exc:
            raise CapabilityError("endpoint response lacks echoed logprobs") from exc
        out = []
        for tok, tok_lp, offset in zip(tokens, token_lps, offsets):
            if offset < len(context):
                continue
            value = 0.0 if tok_lp is None else min(float(tok_lp), 0.0)
            out.append(TokenLogprob(tok, value))
        return out


class StubNliProvider:
    """Fixed-verdict provider for tests and degraded runs."""

    def __init__(self, label: str = "entailment"):
        if label not in NLI_LABELS:
            raise ValueError(f"unknown NLI label {label!r}")
        self.label = label

    def classify(self, premise: str, hypothesis: str) -> NliVerdict:
        probs = [0.01, 0.01, 0.01]
        probs[NLI_LABELS.index(self.label)] = 0.98
        verdict = NliVerdict(self.label, tuple(probs))
        verdict.validate()
        return verdict


class HttpNliProvider:
    """Dedicated NLI endpoint: POST {premise, hypothesis} -> probabilities."""

    def __init__(self, url: str, timeout: float = 30.0, transport: Callable | None = None):
        self.url = url
        self.timeout = timeout
        self._transport = transport or _default_transport

    def classify(self, premise: str, hypothesis: str) -> NliVerdict:
        try:
            status, payload = self._transport(
                self.url, {"premise": premise, "hypothesis": hypothesis}, {}, self.timeout
            )
        except TransportError as exc:
            raise NliError(str(exc)) from exc
        if status >= 400:
            raise NliError(f"NLI endpoint returned {status}")
        try:
            raw = [float(payload[label]) for label in NLI_LABELS]
        except (KeyError, TypeError, ValueError) as exc:
            raise NliError(f"unusable NLI response: {payload!r}") from exc
        total = sum(raw)
        if total <= 0:
            raise NliError("NLI probabilities must be positive")
        probs = tuple(p / total for p in raw)
        label = NLI_LABELS[max(range(3), key=lambda i: probs[i])]
        verdict = NliVerdict(label, probs)
        verdict.validate()
        return verdict


class ModelClient:
    """Shared entry point adding caching, retries, concurrency bounds, and NLI.

    Safe for concurrent use; at most ``max_inflight`` backend calls run at
    once. Cache hits never touch the backend and return the stored response
    unchanged.
    """

    def __init__(self,
                 backend: Backend,
                 cache_dir: str | Path | None = None,
                 max_inflight: int = 8,
                 max_attempts: int = 3,
                 backoff_base: float = 0.5,
                 nli_provider=None,
                 log_prompts: bool = False):
        self.backend = backend
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.nli_provider = nli_provider
        self.log_prompts = log_prompts
        self._sem = threading.BoundedSemaphore(max_inflight)
        self._trace = threading.local()

    # -- per-instance request tracing -------------------------------------

    def begin_trace(self) -> None:
        self._trace.items = []

    def take_trace(self) -> list[dict]:
        items = getattr(self._trace, "items", None)
        self._trace.items = None
        return items or []

    def _record(self, kind: str, request: ModelRequest, continuation: str | None = None) -> None:
        items = getattr(self._trace, "items", None)
        if items is None:
            return
        entry = {
            "purpose": request.purpose,
            "kind": kind,
            "sha256": hashlib.sha256(request.text.encode("utf-8")).hexdigest(),
            "has_image": request.image is not None,
        }
        if self.log_prompts:
            entry["text"] = request.text
            if continuation is not None:
                entry["continuation"] = continuation
        items.append(entry)

    # -- core calls --------------------------------------------------------

    def _with_retry(self, call: Callable):
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._sem:
                    return call()
            except TransportError as exc:
                if attempt >= self.max_attempts:
                    exc.attempts = attempt
                    raise
                delay = self.backoff_base * (2 ** (attempt - 1))
                log.warning("transient backend failure (attempt %d/%d), retrying in %.2fs: %s",
                            attempt, self.max_attempts, delay, exc)
                time.sleep(delay)

    def generate(self, request: ModelRequest) -> ModelResponse:
        request.validate()
        self._record("generate", request)
        key = request_fingerprint(self.backend.backend_id, request)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return ModelResponse.from_dict(hit["response"])
        response = self._with_retry(lambda: self.backend.generate(request))
        if len(response.samples) != request.sampling.num_samples:
            raise RequestError(
                f"backend returned {len(response.samples)} samples, "
                f"expected {request.sampling.num_samples}"
            )
        if self.cache is not None:
            self.cache.put(key, {"key": key, "response": response.to_dict()})
        return response

    def score_text(self, request: ModelRequest, continuation: str) -> list[TokenLogprob]:
        request.validate()
        self._record("score", request, continuation)
        if not continuation:
            return []
        key = request_fingerprint(self.backend.backend_id, request, kind="score",
                                  continuation=continuation)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return [TokenLogprob(tok, lp) for tok, lp in hit["logprobs"]]
        logprobs = self._with_retry(lambda: self.backend.score_text(request, continuation))
        if self.cache is not None:
            self.cache.put(key, {"key": key, "logprobs": [[t.token, t.logprob] for t in logprobs]})
        return logprobs

    def nli_classify(self, premise: str, hypothesis: str) -> NliVerdict:
        """3-way NLI verdict from the configured provider.

        The default provider prompts the same LM and renormalizes the
        teacher-forced probabilities of the three label words.
        """
        if not premise.strip() or not hypothesis.strip():
            raise ValueError("premise and hypothesis must be non-empty")
        if self.nli_provider is not None:
            return self.nli_provider.classify(premise, hypothesis)

        prompt = _NLI_PROMPT.format(premise=premise, hypothesis=hypothesis)
        request = text_request(prompt, seed=0, purpose="nli")
        try:
            weights = []
            for label in NLI_LABELS:
                lps = self.score_text(request, label)
                weights.append(math.exp(sum(t.logprob for t in lps)))
        except ModelError as exc:
            raise NliError(f"prompt-based NLI failed: {exc}") from exc
        total = sum(weights)
        if total <= 0:
            raise NliError("prompt-based NLI produced zero mass")
        probs = tuple(w / total for w in weights)
        label = NLI_LABELS[max(range(3), key=lambda i: probs[i])]
        verdict = NliVerdict(label, probs)
        verdict.validate()
        return verdict
