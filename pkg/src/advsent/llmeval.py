"""Prompt rendering, a JSON-over-HTTP completion client and rating parsing for LLM baselines.

Wire protocol (POST to the configured endpoint, UTF-8 JSON both ways)::

    request:  {"model": str, "prompt": str, "temperature": float, "max_tokens": int}
    response: {"text": str}                       # preferred
              {"choices": [{"text": str}, ...]}   # also accepted
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .corpus import VALID_RATINGS, Dataset, Review
from .evaluation import MetricsReport, accuracy, build_report, macro_f1

logger = logging.getLogger(__name__)

HEADER = (
    "You are a review rating predictor. Given a review text, predict its rating on a scale of 1 to 5 (except 3).\n"
    "\n"
    "1 = Very negative\n"
    "2 = Negative\n"
    "4 = Positive\n"
    "5 = Very positive\n"
    "\n"
    "Only respond with a single number (1, 2, 4, or 5)."
)


class TemplateKind(str, Enum):
    ZERO_SHOT = "zero-shot"
    MULTI_SHOT = "multi-shot"


@dataclass(frozen=True)
class Shot:
    title: str
    review: str
    rating: int


@dataclass(frozen=True)
class PromptRequest:
    kind: TemplateKind
    title: str
    review: str
    shots: tuple[Shot, ...] = ()

    @classmethod
    def for_shots(cls, title: str, review: str, shots: Sequence[Shot] = ()) -> "PromptRequest":
        kind = TemplateKind.MULTI_SHOT if shots else TemplateKind.ZERO_SHOT
        return cls(kind, title, review, tuple(shots))


class PromptError(ValueError):
    pass


def render_prompt(req: PromptRequest) -> str:
    """Instantiate the zero-shot or multi-shot template. No trailing newline after ``Rating:``."""
    kind = TemplateKind(req.kind)
    if kind is TemplateKind.ZERO_SHOT:
        if req.shots:
            raise PromptError("zero-shot request must not carry shots")
        return f"{HEADER}\n\nTitle: {req.title}\nReview: {req.review}\nRating:"
    if not req.shots:
        raise PromptError("multi-shot request needs at least one shot")
    blocks = []
    for i, shot in enumerate(req.shots, start=1):
        if shot.rating not in VALID_RATINGS:
            raise PromptError(f"shot {i} has rating {shot.rating!r}; allowed ratings are {VALID_RATINGS}")
        blocks.append(f"Title{i}: {shot.title}\nReview{i}: {shot.review}\nRating{i}: {shot.rating}")
    examples = "\n\n".join(blocks)
    return (f"{HEADER}\n\nHere are some examples:\n\n{examples}\n\n"
            f"Now predict the rating for this review:\nTitle: {req.title}\nReview: {req.review}\nRating:")


def select_shots(train: Dataset, language, domain, k: int, seed: int = 42) -> list[Shot]:
    """Pick ``k`` same-cell examples, round-robin over ratings 1, 2, 4, 5 so classes stay balanced."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return []
    pool = train.where(language=language, domain=domain).records
    if k > len(pool):
        raise ValueError(f"asked for {k} shots but the cell has only {len(pool)} examples")
    rng = random.Random(seed)
    by_rating = {r: [x for x in pool if x.rating == r] for r in VALID_RATINGS}
    for items in by_rating.values():
        rng.shuffle(items)
    chosen: list[Review] = []
    while len(chosen) < k:
        for r in VALID_RATINGS:
            if by_rating[r] and len(chosen) < k:
                chosen.append(by_rating[r].pop())
    rng.shuffle(chosen)
    return [Shot(x.title, x.text, x.rating) for x in chosen]


_RATING_RE = re.compile(r"(?<![0-9A-Za-z])([1245])(?![0-9A-Za-z])")


def parse_rating(completion: str) -> int | None:
    """First standalone 1, 2, 4 or 5 in the completion; ``None`` marks a parse failure."""
    m = _RATING_RE.search(completion)
    return int(m.group(1)) if m else None


@dataclass
class CompletionConfig:
    endpoint: str = "http://127.0.0.1:8000/v1/completions"
    model: str = "llama-3.1-8b"
    temperature: float = 0.0
    max_new_tokens: int = 5
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5
    max_in_flight: int = 4

    def payload(self, prompt: str) -> dict:
        return {"model": self.model, "prompt": prompt, "temperature": self.temperature,
                "max_tokens": self.max_new_tokens}


class EndpointError(RuntimeError):
    """Transport failure after all retries."""


class ProtocolError(RuntimeError):
    """Non-success status or malformed response body."""


def _extract_text(body: bytes) -> str:
    try:
        data = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"response is not JSON: {body[:200]!r}") from exc
    if isinstance(data, dict):
        if isinstance(data.get("text"), str):
            return data["text"]
        choices = data.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict) \
                and isinstance(choices[0].get("text"), str):
            return choices[0]["text"]
    raise ProtocolError(f"response has no completion text: {body[:200]!r}")


def query(config: CompletionConfig, prompt: str) -> str:
    """POST one prompt and return the raw completion text (unparsed)."""
    body = json.dumps(config.payload(prompt)).encode("utf-8")
    last: Exception | None = None
    for attempt in range(config.retries + 1):
        if attempt:
            time.sleep(config.backoff * 2 ** (attempt - 1))
        req = urllib.request.Request(config.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=config.timeout) as resp:
                return _extract_text(resp.read())
        except urllib.error.HTTPError as exc:
            excerpt = exc.read()[:200].decode("utf-8", "replace")
            raise ProtocolError(f"HTTP {exc.code} from {config.endpoint}: {excerpt}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last = exc
            logger.warning("query attempt %d/%d failed: %s", attempt + 1, config.retries + 1, exc)
    raise EndpointError(f"{config.endpoint} unreachable after {config.retries + 1} attempts: {last}")


@dataclass
class Outcome:
    index: int
    prompt_sha256: str
    completion: str | None
    prediction: int | None
    gold: int
    latency: float
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LLMEvalResult:
    outcomes: list[Outcome]
    report: MetricsReport
    accuracy: float
    macro_f1: float
    parse_failures: int
    errors: int = 0
    extra: dict = field(default_factory=dict)


def evaluate(records: Sequence[Review], config: CompletionConfig, train: Dataset | None = None, k: int = 0,
             seed: int = 42, log_sink: Callable[[dict], None] | None = None,
             query_fn: Callable[[CompletionConfig, str], str] = query) -> LLMEvalResult:
    """Query once per record (order preserved) and score; failures count as wrong answers."""
    records = list(records)
    if k and train is None:
        raise ValueError("k > 0 needs a training set to draw shots from")
    shot_cache: dict[tuple[str, str], list[Shot]] = {}
    prompts = []
    for r in records:
        key = (r.language.value, r.domain.value)
        if key not in shot_cache:
            shot_cache[key] = select_shots(train, *key, k=k, seed=seed) if k else []
        prompts.append(render_prompt(PromptRequest.for_shots(r.title, r.text, shot_cache[key])))

    def run(i: int) -> Outcome:
        prompt = prompts[i]
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        start = time.perf_counter()
        try:
            text = query_fn(config, prompt)
        except (EndpointError, ProtocolError) as exc:
            return Outcome(i, digest, None, None, records[i].rating, time.perf_counter() - start, str(exc))
        return Outcome(i, digest, text, parse_rating(text), records[i].rating, time.perf_counter() - start)

    with ThreadPoolExecutor(max_workers=max(1, config.max_in_flight)) as pool:
        outcomes = list(pool.map(run, range(len(records))))
    if log_sink is not None:
        for o in outcomes:
            log_sink(o.to_dict())

    preds = [o.prediction for o in outcomes]
    gold = [r.rating for r in records]
    return LLMEvalResult(
        outcomes=outcomes,
        report=build_report(records, preds),
        accuracy=accuracy(gold, preds),
        macro_f1=macro_f1(gold, preds),
        parse_failures=sum(1 for o in outcomes if o.error is None and o.prediction is None),
        errors=sum(1 for o in outcomes if o.error is not None),
    )
