"""Model backends.

A backend turns (image ref, question, prompt mode) into a generation trace:
the text, per-token log-probabilities of the generated tokens, and pooled
image/text representation vectors. Two implementations ship here: a
bit-deterministic scripted mock for tests and offline runs, and a client
for an HTTP inference service that exposes logprobs and embeddings.

Wire protocol of the remote service (JSON over HTTP POST):
  request: {model, prompt, image_ref?, temperature, top_p, max_tokens,
            want_logprobs: true, want_embeddings: true}
  reply:   {text, logprobs: [float],
            embeddings: {prompt: [float], completion: [float]}}

A reply without logprobs is a hard capability error; a reply without
embeddings degrades to neutral orthogonal representation vectors (whose
similarity score is exactly 0.5) with a logged warning.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

__all__ = [
    "BackendError",
    "RetryableTransportError",
    "CapabilityError",
    "DecodingConfig",
    "BackendRequest",
    "GenerationTrace",
    "PROMPT_MODES",
    "build_prompt",
    "default_decoding",
    "MockBackend",
    "RemoteBackend",
    "dual_generate",
    "trace_to_dict",
    "trace_from_dict",
]

log = logging.getLogger(__name__)

PROMPT_MODES = ("direct", "cot")

DIRECT_PROMPT = (
    "You are answering a visual question.\n"
    "Question: {question}\n"
    "Answer with only the final answer. Do not include any reasoning."
)

COT_PROMPT = (
    "You are answering a visual question.\n"
    "Question: {question}\n"
    "Reason through the problem step by step, then state your conclusion on "
    'a new line in the form "The answer is <answer>."'
)

# Representation vectors used when a service cannot return embeddings:
# orthogonal unit vectors, so the similarity score is exactly the neutral 0.5.
NEUTRAL_IMG_REP = (1.0, 0.0)
NEUTRAL_TXT_REP = (0.0, 1.0)

DEFAULT_MAX_TOKENS = 1024


class BackendError(Exception):
    """Base class for backend failures."""


class RetryableTransportError(BackendError):
    """Transport kept failing; carries the number of attempts made."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class CapabilityError(BackendError):
    """The service reply lacks a required capability (e.g. logprobs)."""


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


def default_decoding(mode: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> DecodingConfig:
    """Mode defaults: direct samples at temperature 1.0, the step-by-step
    mode at temperature 0.4 with top_p 0.9."""
    if mode == "direct":
        return DecodingConfig(temperature=1.0, top_p=1.0, max_tokens=max_tokens)
    if mode == "cot":
        return DecodingConfig(temperature=0.4, top_p=0.9, max_tokens=max_tokens)
    raise ValueError(f"prompt mode must be one of {PROMPT_MODES}, got {mode!r}")


@dataclass(frozen=True)
class BackendRequest:
    image_ref: str
    question: str
    prompt_mode: str
    decoding: DecodingConfig = field(default_factory=DecodingConfig)

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(
                f"prompt mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}"
            )


@dataclass(frozen=True)
class GenerationTrace:
    """One backend call's output.

    ``token_logprobs`` covers generated tokens only (log P(w_t | w_<t)),
    every entry <= 0. ``img_rep``/``txt_rep`` are the pooled representation
    vectors used for the similarity score.
    """

    text: str
    token_logprobs: tuple
    img_rep: tuple
    txt_rep: tuple
    prompt_mode: str = "direct"

    def __post_init__(self):
        object.__setattr__(self, "token_logprobs", tuple(float(x) for x in self.token_logprobs))
        object.__setattr__(self, "img_rep", tuple(float(x) for x in self.img_rep))
        object.__setattr__(self, "txt_rep", tuple(float(x) for x in self.txt_rep))
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"bad prompt mode {self.prompt_mode!r}")
        if any(lp > 0.0 for lp in self.token_logprobs):
            raise ValueError("token logprobs must all be <= 0")
        if self.text and not self.token_logprobs:
            raise ValueError("non-empty generation must carry token logprobs")


def build_prompt(question: str, mode: str) -> str:
    """Expand the fixed task template for one question."""
    if mode == "direct":
        return DIRECT_PROMPT.format(question=question)
    if mode == "cot":
        return COT_PROMPT.format(question=question)
    raise ValueError(f"prompt mode must be one of {PROMPT_MODES}, got {mode!r}")


def trace_to_dict(trace: GenerationTrace) -> dict:
    return {
        "text": trace.text,
        "token_logprobs": list(trace.token_logprobs),
        "img_rep": list(trace.img_rep),
        "txt_rep": list(trace.txt_rep),
        "prompt_mode": trace.prompt_mode,
    }


def trace_from_dict(payload: dict, prompt_mode: str | None = None) -> GenerationTrace:
    mode = prompt_mode or payload.get("prompt_mode", "direct")
    return GenerationTrace(
        text=payload["text"],
        token_logprobs=payload.get("token_logprobs", ()),
        img_rep=payload.get("img_rep", NEUTRAL_IMG_REP),
        txt_rep=payload.get("txt_rep", NEUTRAL_TXT_REP),
        prompt_mode=mode,
    )


def _builtin_default_trace(mode: str) -> GenerationTrace:
    import math

    return GenerationTrace(
        text="A",
        token_logprobs=(math.log(0.5),),
        img_rep=NEUTRAL_IMG_REP,
        txt_rep=NEUTRAL_TXT_REP,
        prompt_mode=mode,
    )


class MockBackend:
    """Scripted backend: a total map from (image_ref, question, prompt_mode)
    to a fixed trace, falling back to a default trace for unscripted keys.

    Scripts load from JSON:
      {"default": {trace...}?,
       "entries": [{"image_ref":..., "question":..., "prompt_mode":..., "trace": {...}}],
       "completions": [{"contains": "substr", "reply": "..."}],
       "default_completion": "..."}

    ``completions`` drive ``complete_text`` (used by the curation pipeline):
    the first rule whose ``contains`` string occurs in the prompt wins.
    """

    def __init__(self, entries=None, default=None, completions=None, default_completion=None):
        self._script = dict(entries or {})
        self._default = default
        self._completions = list(completions or [])
        self._default_completion = default_completion

    @classmethod
    def from_json(cls, path) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
        entries = {}
        for entry in spec.get("entries", []):
            key = (entry["image_ref"], entry["question"], entry["prompt_mode"])
            entries[key] = trace_from_dict(entry["trace"], prompt_mode=entry["prompt_mode"])
        default = spec.get("default")
        return cls(
            entries=entries,
            default=default,
            completions=spec.get("completions"),
            default_completion=spec.get("default_completion"),
        )

    def generate(self, req: BackendRequest) -> GenerationTrace:
        key = (req.image_ref, req.question, req.prompt_mode)
        if key in self._script:
            return self._script[key]
        if self._default is not None:
            return trace_from_dict(dict(self._default), prompt_mode=req.prompt_mode)
        return _builtin_default_trace(req.prompt_mode)

    def complete_text(self, prompt: str, decoding: DecodingConfig | None = None) -> str:
        for rule in self._completions:
            if rule["contains"] in prompt:
                return rule["reply"]
        if self._default_completion is not None:
            return self._default_completion
        raise CapabilityError("mock backend has no completion script for this prompt")


class RemoteBackend:
    """Client for a logprob-capable HTTP inference service.

    Retries transport failures up to ``retries`` times and bounds the number
    of in-flight requests, so one instance can be shared across eval workers.
    Logprobs are never fabricated: a reply without them raises
    ``CapabilityError``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        retry_wait: float = 0.1,
        max_in_flight: int = 4,
    ):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.retry_wait = retry_wait
        self._slots = threading.Semaphore(max_in_flight)

    def _post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = None
        for attempt in range(1, self.retries + 1):
            request = urllib.request.Request(self.endpoint, data=body, headers=headers)
            try:
                with self._slots:
                    with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                        raw = resp.read()
                break
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise BackendError(f"service rejected request: HTTP {exc.code}") from exc
                last_error = exc
            except (urllib.error.URLError, OSError) as exc:
                last_error = exc
            if attempt < self.retries:
                time.sleep(self.retry_wait * attempt)
        else:
            raise RetryableTransportError(
                f"transport failed after {self.retries} attempts: {last_error}",
                attempts=self.retries,
            )
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BackendError(f"service returned malformed JSON: {exc}") from exc

    def _payload(self, prompt: str, decoding: DecodingConfig, image_ref: str | None) -> dict:
        payload = {
            "model": self.model,
            "prompt": prompt,
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "max_tokens": decoding.max_tokens,
            "want_logprobs": True,
            "want_embeddings": True,
        }
        if image_ref is not None:
            payload["image_ref"] = image_ref
        return payload

    def generate(self, req: BackendRequest) -> GenerationTrace:
        prompt = build_prompt(req.question, req.prompt_mode)
        reply = self._post(self._payload(prompt, req.decoding, req.image_ref))
        if "text" not in reply:
            raise BackendError("service reply lacks 'text'")
        logprobs = reply.get("logprobs")
        if logprobs is None:
            raise CapabilityError("service reply lacks logprobs; cannot score confidence")
        embeddings = reply.get("embeddings")
        if embeddings and "prompt" in embeddings and "completion" in embeddings:
            img_rep = tuple(embeddings["prompt"])
            txt_rep = tuple(embeddings["completion"])
        else:
            log.warning(
                "service reply lacks embeddings; falling back to neutral "
                "representations (similarity score pinned at 0.5)"
            )
            img_rep, txt_rep = NEUTRAL_IMG_REP, NEUTRAL_TXT_REP
        return GenerationTrace(
            text=reply["text"],
            token_logprobs=tuple(logprobs),
            img_rep=img_rep,
            txt_rep=txt_rep,
            prompt_mode=req.prompt_mode,
        )

    def complete_text(self, prompt: str, decoding: DecodingConfig | None = None) -> str:
        decoding = decoding or DecodingConfig()
        reply = self._post(self._payload(prompt, decoding, image_ref=None))
        if "text" not in reply:
            raise BackendError("service reply lacks 'text'")
        return reply["text"]


def dual_generate(
    backend, image_ref: str, question: str, max_tokens: int = DEFAULT_MAX_TOKENS
) -> tuple:
    """Run both task prompts for one instance; returns (direct, cot) traces.

    The two requests share image, question and token budget and differ only
    in the task prompt and the mode decoding defaults. A failing branch
    raises a BackendError naming the mode.
    """
    traces = []
    for mode in PROMPT_MODES:
        req = BackendRequest(
            image_ref=image_ref,
            question=question,
            prompt_mode=mode,
            decoding=default_decoding(mode, max_tokens=max_tokens),
        )
        try:
            traces.append(backend.generate(req))
        except BackendError as exc:
            raise BackendError(f"{mode} branch failed: {exc}") from exc
    return tuple(traces)
