"""Teacher CoT extraction over a chat-completions endpoint.

Two transports share one interface: :class:`HttpTransport` POSTs
``{model, messages}`` to a chat-completions URL, :class:`MockTransport`
answers deterministically from the prompt text so the pipeline runs offline.
Completions are cached on disk, one JSON file per prompt hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .corpus import AnalysisInstance, Label
from .cot_dataset import CoTRecord, ReservedSubstringError, validate_cot_record, wrap_training_target
from .prompts import GOLD_HEADER, PerspectiveSet, TeacherPrompt, build_teacher_prompt, count_perspective_blocks

logger = logging.getLogger(__name__)


class TeacherError(RuntimeError):
    pass


class TransientError(TeacherError):
    """Retryable failure (network error, 5xx)."""


class RateLimitError(TransientError):
    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message)
        self.retry_after = retry_after


class EmptyCompletionError(TeacherError):
    pass


class BatchFailedError(TeacherError):
    pass


@dataclass
class TeacherConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4.1"
    api_key_env: str = "OPENAI_API_KEY"
    max_retries: int = 5
    backoff_base: float = 1.0
    request_timeout: float = 60.0
    max_parallel: int = 4
    cache_dir: str = ".teacher_cache"
    # Unset fields are omitted from the request (provider defaults apply).
    decoding: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.backoff_base <= 0:
            raise ValueError("backoff_base must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class RawCompletion:
    text: str
    prompt_hash: str
    model_name: str
    retrieved_from_cache: bool


class Transport(Protocol):
    def complete(self, payload: dict) -> str: ...


class HttpTransport:
    def __init__(self, config: TeacherConfig):
        key = os.environ.get(config.api_key_env, "").strip()
        if not key:
            raise TeacherError(f"environment variable {config.api_key_env} is not set")
        import httpx

        self.url = config.endpoint_url
        self.client = httpx.Client(
            timeout=config.request_timeout,
            headers={"Authorization": f"Bearer {key}", "Content-Type": "application/json"},
        )

    def complete(self, payload: dict) -> str:
        import httpx

        try:
            resp = self.client.post(self.url, json=payload)
        except httpx.TransportError as e:
            raise TransientError(f"network error: {e}") from e
        if resp.status_code == 429:
            raise RateLimitError("rate limited", _retry_after(resp.headers.get("retry-after")))
        if resp.status_code >= 500:
            raise TransientError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise TeacherError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TeacherError(f"malformed response body: {e}") from e


def _retry_after(value: Optional[str]) -> Optional[float]:
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


_GOLD_RE = re.compile(re.escape(GOLD_HEADER) + r" (\S+)")


def mock_reasoning(prompt_text: str) -> str:
    """Deterministic stand-in for the teacher: one sentence per requested perspective."""
    m = _GOLD_RE.search(prompt_text)
    label = m.group(1) if m else Label.APPROPRIATE.value
    names = re.findall(r"^\d+\. <(\S+) 관점> ", prompt_text, re.MULTILINE)
    if not names:
        return f"대화 맥락을 고려하면 분석 대상 발화는 {label} 발화입니다."
    return " ".join(
        f"관점 {i}. {name} 관점에서 분석 대상 발화는 {label}로 판단됩니다."
        for i, name in enumerate(names, start=1)
    )


class MockTransport:
    """Offline transport. ``responder`` maps the user message to completion text.

    Tracks call counts and the peak number of concurrent calls, and can
    inject latency, so tests can observe batching behaviour.
    """

    def __init__(self, responder: Callable[[str], str] = mock_reasoning, latency: float = 0.0):
        self.responder = responder
        self.latency = latency
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def complete(self, payload: dict) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.latency:
                time.sleep(self.latency)
            return self.responder(payload["messages"][-1]["content"])
        finally:
            with self._lock:
                self.in_flight -= 1


def build_payload(prompt: TeacherPrompt, config: TeacherConfig) -> dict:
    payload = {"model": config.model_name, "messages": prompt.messages()}
    payload.update(config.decoding)
    return payload


def prompt_hash(prompt: TeacherPrompt, config: TeacherConfig) -> str:
    key = json.dumps(
        {"model": config.model_name, "prompt": prompt.rendered, "decoding": config.decoding},
        ensure_ascii=False,
        sort_keys=True,
    )
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


def _cache_path(config: TeacherConfig, digest: str) -> Path:
    return Path(config.cache_dir) / f"{digest}.json"


def _write_atomic(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def request_cot(
    prompt: TeacherPrompt,
    config: TeacherConfig,
    transport: Transport,
    sleep: Callable[[float], None] = time.sleep,
) -> RawCompletion:
    """Fetch one completion, from cache if present.

    Transient failures are retried up to ``config.max_retries`` times with
    exponential backoff; a rate-limit ``Retry-After`` hint overrides the
    computed delay. Empty completions raise and are never cached.
    """
    digest = prompt_hash(prompt, config)
    path = _cache_path(config, digest)
    if path.exists():
        cached = json.loads(path.read_text(encoding="utf-8"))
        return RawCompletion(cached["response"], digest, config.model_name, True)

    payload = build_payload(prompt, config)
    attempt = 0
    while True:
        try:
            text = transport.complete(payload)
            break
        except TransientError as e:
            if attempt >= config.max_retries:
                raise TeacherError(f"giving up after {attempt + 1} attempts: {e}") from e
            delay = config.backoff_base * (2**attempt)
            if isinstance(e, RateLimitError) and e.retry_after is not None:
                delay = e.retry_after
            logger.info("teacher request failed (%s); retrying in %.2fs", e, delay)
            sleep(delay)
            attempt += 1

    if not text or not text.strip():
        raise EmptyCompletionError("teacher returned an empty completion")
    _write_atomic(path, {"hash": digest, "request": payload, "response": text})
    return RawCompletion(text, digest, config.model_name, False)


def _make_record(
    instance: AnalysisInstance,
    perspectives: PerspectiveSet,
    config: TeacherConfig,
    transport: Transport,
    sleep: Callable[[float], None],
) -> CoTRecord:
    prompt = build_teacher_prompt(instance, perspectives)
    record = CoTRecord(
        instance_id=instance.instance_id,
        dialogue_id=instance.dialogue_id,
        gold_label=instance.gold_label,
        teacher_prompt=prompt.rendered,
        prompt_hash=prompt_hash(prompt, config),
    )
    try:
        completion = request_cot(prompt, config, transport, sleep)
    except TeacherError as e:
        record.error = f"{type(e).__name__}: {e}"
        return record
    record.teacher_text = completion.text
    record.from_cache = completion.retrieved_from_cache
    try:
        record.target = wrap_training_target(completion.text.strip(), instance.gold_label)
    except ReservedSubstringError as e:
        record.error = f"ReservedSubstringError: {e}"
        return record
    record.validation = validate_cot_record(record, len(count_perspective_blocks(prompt.rendered)))
    return record


def generate_cot_dataset(
    instances: Sequence[AnalysisInstance],
    perspectives: PerspectiveSet,
    config: TeacherConfig,
    transport: Transport,
    sleep: Callable[[float], None] = time.sleep,
) -> list[CoTRecord]:
    """One record per instance, in input order, with at most ``max_parallel`` requests in flight."""
    for inst in instances:
        if inst.gold_label is None:
            raise ValueError(f"instance {inst.instance_id} has no gold label")
    if not instances:
        return []
    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
        records = list(
            pool.map(lambda inst: _make_record(inst, perspectives, config, transport, sleep), instances)
        )
    if all(r.error for r in records):
        raise BatchFailedError(f"all {len(records)} teacher requests failed; first: {records[0].error}")
    return records


def write_records(records: Sequence[CoTRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[CoTRecord]:
    with Path(path).open(encoding="utf-8") as f:
        return [CoTRecord.from_dict(json.loads(line)) for line in f if line.strip()]
