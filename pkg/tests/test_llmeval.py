import hashlib
import re
from collections import Counter

import pytest

from advsent.corpus import Dataset, Review
from advsent.llmeval import (CompletionConfig, EndpointError, PromptError, PromptRequest, ProtocolError, Shot,
                             TemplateKind, evaluate, parse_rating, query, render_prompt, select_shots)
from conftest import FIXTURES


def test_zero_shot_matches_golden():
    req = PromptRequest.for_shots("Un libro bellissimo", "Mi è piaciuto molto, lo consiglio a tutti.")
    assert req.kind is TemplateKind.ZERO_SHOT
    assert render_prompt(req).encode("utf-8") == (FIXTURES / "prompt_zero_shot.txt").read_bytes()


def test_five_shot_matches_golden():
    shots = [Shot("Dezamăgitor", "Acțiunea este lentă și personajele sunt plate.", 2),
             Shot("O capodoperă", "Cel mai bun film pe care l-am văzut anul acesta.", 5),
             Shot("", "Nu recomand, am pierdut doua ore.", 1),
             Shot("Bun", "Coloana sonoră este excelentă, finalul puțin previzibil.", 4),
             Shot("Groaznic", 'Regia e haotică & dialogurile "forțate".', 1)]
    req = PromptRequest.for_shots("Merită văzut", "Actori buni, poveste captivantă.", shots)
    assert req.kind is TemplateKind.MULTI_SHOT
    assert render_prompt(req).encode("utf-8") == (FIXTURES / "prompt_5_shot.txt").read_bytes()


def test_zero_shot_shape():
    text = render_prompt(PromptRequest.for_shots("t", "r"))
    assert "1 = Very negative" in text and text.endswith("Rating:")


def test_one_shot_has_single_block():
    text = render_prompt(PromptRequest.for_shots("t", "r", [Shot("a", "b", 4)]))
    assert len(re.findall(r"^Title\d+:", text, re.M)) == 1
    assert "Rating1: 4" in text and "Title2" not in text


def test_render_is_pure():
    req = PromptRequest.for_shots("t", "r", [Shot("a", "b", 4)])
    assert render_prompt(req) == render_prompt(req)


def test_shot_with_rating_three_rejected():
    with pytest.raises(PromptError):
        render_prompt(PromptRequest.for_shots("t", "r", [Shot("a", "b", 3)]))


def test_kind_and_shots_must_agree():
    with pytest.raises(PromptError):
        render_prompt(PromptRequest(TemplateKind.ZERO_SHOT, "t", "r", (Shot("a", "b", 4),)))
    with pytest.raises(PromptError):
        render_prompt(PromptRequest(TemplateKind.MULTI_SHOT, "t", "r", ()))


@pytest.mark.parametrize("completion, expected", [
    ("4", 4), (" 5\n", 5), ("Rating: 5 because", 5), ("3", None), ("", None), ("12", None),
    ("I'd say 2.", 2), ("3 or 4", 4), ("five", None),
])
def test_parse_rating(completion, expected):
    assert parse_rating(completion) == expected


def _train_cell(n_per_class=3):
    recs = [Review(f"t{r}{i}", f"x{r}{i}", r, "it", "books", "train") for r in (1, 2, 4, 5)
            for i in range(n_per_class)]
    recs.append(Review("o", "other cell", 5, "ro", "books", "train"))
    return Dataset(recs)


def test_select_shots():
    train = _train_cell()
    assert select_shots(train, "it", "books", 0) == []
    four = select_shots(train, "it", "books", 4, seed=1)
    assert sorted(s.rating for s in four) == [1, 2, 4, 5]
    assert all(s.title.startswith("t") for s in four)
    assert select_shots(train, "it", "books", 5, seed=3) == select_shots(train, "it", "books", 5, seed=3)
    counts = Counter(s.rating for s in select_shots(train, "it", "books", 10, seed=0))
    assert max(counts.values()) - min(counts.values()) <= 1
    with pytest.raises(ValueError):
        select_shots(train, "ro", "books", 2)


def test_query_echo_and_wire_config(mock_server):
    server = mock_server(lambda p: (200, {"text": " 5\n"}, 0))
    cfg = CompletionConfig(endpoint=server.url, model="m")
    assert query(cfg, "hello") == " 5\n"
    assert server.requests == [{"model": "m", "prompt": "hello", "temperature": 0.0, "max_tokens": 5}]


def test_query_accepts_choices_shape(mock_server):
    server = mock_server(lambda p: (200, {"choices": [{"text": "4"}]}, 0))
    assert query(CompletionConfig(endpoint=server.url), "x") == "4"


def test_http_error_is_protocol_error(mock_server):
    server = mock_server(lambda p: (500, b"model overloaded", 0))
    with pytest.raises(ProtocolError, match="500.*overloaded"):
        query(CompletionConfig(endpoint=server.url, retries=0), "x")


def test_malformed_body_is_protocol_error(mock_server):
    server = mock_server(lambda p: (200, b"<html>", 0))
    with pytest.raises(ProtocolError):
        query(CompletionConfig(endpoint=server.url), "x")


def test_timeout_retries_then_endpoint_error(mock_server):
    server = mock_server(lambda p: (200, {"text": "4"}, 0.5))
    cfg = CompletionConfig(endpoint=server.url, timeout=0.1, retries=1, backoff=0.01)
    with pytest.raises(EndpointError):
        query(cfg, "x")
    assert len(server.requests) == 2


def test_unreachable_endpoint():
    cfg = CompletionConfig(endpoint="http://127.0.0.1:9/none", timeout=0.2, retries=0)
    with pytest.raises(EndpointError):
        query(cfg, "x")


def _records():
    return [Review(f"t{i}", f"review number {i}", (1, 2, 4, 5)[i % 4], ("it", "ro")[i % 2],
                   ("books", "movies", "music")[i % 3], "test") for i in range(24)]


def _gold_responder(records):
    gold = {f"Review: {r.text}\nRating:": r.rating for r in records}

    def respond(payload):
        for tail, rating in gold.items():
            if payload["prompt"].endswith(tail):
                return 200, {"text": f" {rating}"}, 0
        return 200, {"text": "?"}, 0
    return respond


def test_gold_mock_scores_perfectly(mock_server):
    records = _records()
    server = mock_server(_gold_responder(records))
    log = []
    result = evaluate(records, CompletionConfig(endpoint=server.url, max_in_flight=3), log_sink=log.append)
    assert result.accuracy == 100.0 and result.macro_f1 == 100.0 and result.parse_failures == 0
    assert len(server.requests) == len(records) and len(result.outcomes) == len(records)
    assert [o.index for o in result.outcomes] == list(range(len(records)))
    sent = {hashlib.sha256(r["prompt"].encode()).hexdigest() for r in server.requests}
    assert {entry["prompt_sha256"] for entry in log} == sent


def test_parse_failures_scored_wrong():
    records = _records()[:4]
    result = evaluate(records, CompletionConfig(), query_fn=lambda cfg, prompt: "3")
    assert result.accuracy == 0.0 and result.parse_failures == 4


def test_endpoint_errors_recorded(mock_server):
    records = _records()[:3]
    server = mock_server(lambda p: (200, {"text": "4"}, 0.5))
    log = []
    result = evaluate(records, CompletionConfig(endpoint=server.url, timeout=0.1, retries=0), log_sink=log.append)
    assert result.errors == 3 and all(o.prediction is None for o in result.outcomes)
    assert all(entry["error"] for entry in log)


def test_multi_shot_prompts_use_same_cell_examples():
    records = [Review("q", "target", 4, "it", "books", "test")]
    seen = []
    result = evaluate(records, CompletionConfig(), train=_train_cell(), k=2, seed=0,
                      query_fn=lambda cfg, prompt: seen.append(prompt) or "4")
    assert result.accuracy == 100.0
    assert "Title2:" in seen[0] and "other cell" not in seen[0]
    with pytest.raises(ValueError):
        evaluate(records, CompletionConfig(), k=2)
