import json
import time

import pytest

from advsent.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, main
from advsent.corpus import read_jsonl

RECORD = {"title": "", "text": "ok", "rating": 5, "language": "it", "domain": "books", "split": "train"}

SMALL_TRAIN = ["--hash-dim", "256", "--hidden", "16", "--max-epochs", "2", "--lr", "1e-3", "--no-figures"]


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o, ensure_ascii=False) + "\n" for o in objs), encoding="utf-8")
    return path


def test_prepare_reports_removed(tmp_path, capsys):
    src = write_lines(tmp_path / "in.jsonl", [
        {**RECORD, "text": "Bello!!!!!"}, {**RECORD, "text": "Bello!!!"}, {**RECORD, "text": " Bello!!! "},
        {**RECORD, "text": "altro"}])
    assert main(["prepare", str(src), str(tmp_path / "out.jsonl")]) == EXIT_OK
    assert "2 removed" in capsys.readouterr().out
    assert [r.text for r in read_jsonl(tmp_path / "out.jsonl")] == ["Bello!!!", "altro"]


def test_prepare_clean_file_is_byte_identical(tmp_path):
    src = write_lines(tmp_path / "in.jsonl", [{**RECORD, "text": "già pulito"}, {**RECORD, "text": "due", "rating": 1}])
    assert main(["prepare", str(src), str(tmp_path / "out.jsonl")]) == EXIT_OK
    assert (tmp_path / "out.jsonl").read_bytes() == src.read_bytes()


def test_prepare_flags_with_detector(tmp_path, capsys):
    src = write_lines(tmp_path / "in.jsonl", [{**RECORD, "text": "il libro è bello"},
                                              {**RECORD, "text": "cartea este foarte bună"}])
    flags = tmp_path / "flags.jsonl"
    assert main(["prepare", str(src), str(tmp_path / "out.jsonl"), "--detector", "keyword",
                 "--flags-out", str(flags)]) == EXIT_OK
    assert "1 flagged" in capsys.readouterr().out
    assert json.loads(flags.read_text())["reason"] == "LanguageMismatch"


def test_malformed_line_exit_code(tmp_path, capsys):
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps(RECORD) + "\n" + json.dumps({**RECORD, "rating": 3}) + "\n")
    assert main(["prepare", str(src), str(tmp_path / "out.jsonl")]) == EXIT_DATA
    assert "line 2" in capsys.readouterr().err


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", str(out), "--per-cell", "40", "--seed", "3"]) == EXIT_OK
    return out


def test_generate_writes_splits(corpus_dir):
    for split in ("train", "valid", "test"):
        assert len(read_jsonl(corpus_dir / f"{split}.jsonl")) == 240
    eff = json.loads((corpus_dir / "effective_config.json").read_text())
    assert eff["generate"]["per_cell"] == 40 and eff["generate"]["rho_test"] == -0.9


def test_train_then_evaluate(corpus_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", str(corpus_dir / "train.jsonl"), str(corpus_dir / "valid.jsonl"),
                 "--out-dir", str(run), *SMALL_TRAIN]) == EXIT_OK
    assert (run / "model.ckpt").exists() and (run / "train_log.jsonl").exists()
    ev = tmp_path / "eval"
    assert main(["evaluate", str(run / "model.ckpt"), str(corpus_dir / "test.jsonl"), "--out-dir", str(ev)]) == EXIT_OK
    report = json.loads((ev / "report.json").read_text())
    assert len(report["cells"]) == 6 and all(report["cells"].values())
    assert (ev / "report.txt").read_text().count("Avg") == 1
    assert (ev / "report.png").stat().st_size > 0


def _log(run):
    return [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]


def test_baseline_and_loss_reversal_logs(corpus_dir, tmp_path):
    for mode in ("baseline", "loss-reversal"):
        assert main(["train", str(corpus_dir / "train.jsonl"), str(corpus_dir / "valid.jsonl"), "--mode", mode,
                     "--out-dir", str(tmp_path / mode), *SMALL_TRAIN]) == EXIT_OK
    base, lr = _log(tmp_path / "baseline"), _log(tmp_path / "loss-reversal")
    assert base != lr
    assert all(e["lambda1"] == 0 and e["lambda2"] == 0 for e in base if e["type"] == "step")
    assert all(e["lambda1"] == 0.5 for e in lr if e["type"] == "step")


def test_identical_config_identical_artifacts(corpus_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["train", str(corpus_dir / "train.jsonl"), str(corpus_dir / "valid.jsonl"),
                     "--out-dir", str(tmp_path / name), "--seed", "42", *SMALL_TRAIN]) == EXIT_OK
    for artifact in ("train_log.jsonl", "model.ckpt", "effective_config.json"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_config_precedence_and_snapshot(corpus_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"lr": 5e-3, "batch_size": 16, "hidden": 8}}))
    run = tmp_path / "run"
    assert main(["train", str(corpus_dir / "train.jsonl"), str(corpus_dir / "valid.jsonl"), "--config", str(cfg),
                 "--out-dir", str(run), "--batch-size", "64", "--max-epochs", "1", "--hash-dim", "128",
                 "--no-figures"]) == EXIT_OK
    eff = json.loads((run / "effective_config.json").read_text())["train"]
    assert eff["lr"] == 5e-3  # from file
    assert eff["batch_size"] == 64  # flag beats file
    assert eff["hidden"] == 8
    assert eff["weight_decay"] == 0.01 and eff["meta_interval"] == 100  # defaults recorded
    # the snapshot alone reconstructs the run
    rerun = tmp_path / "rerun"
    cfg.write_text(json.dumps({"train": eff}))
    assert main(["train", str(corpus_dir / "train.jsonl"), str(corpus_dir / "valid.jsonl"), "--config", str(cfg),
                 "--out-dir", str(rerun), "--no-figures"]) == EXIT_OK
    assert (rerun / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()


@pytest.mark.parametrize("content", ['{"train": {"no_such_key": 1}}', "{not json", '{"train": {"lr": -1}}', "[1]"])
def test_config_errors(corpus_dir, tmp_path, content, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(content)
    code = main(["train", str(corpus_dir / "train.jsonl"), str(corpus_dir / "valid.jsonl"), "--config", str(cfg),
                 "--out-dir", str(tmp_path / "run")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_runtime_error_exit_code(corpus_dir, tmp_path):
    assert main(["evaluate", str(tmp_path / "missing.ckpt"), str(corpus_dir / "test.jsonl"),
                 "--out-dir", str(tmp_path / "e")]) == EXIT_RUNTIME


def test_stats_outputs(corpus_dir, tmp_path, capsys):
    out = tmp_path / "stats"
    assert main(["stats", str(corpus_dir / "train.jsonl"), str(corpus_dir / "test.jsonl"),
                 "--out-dir", str(out)]) == EXIT_OK
    stats = json.loads((out / "stats.json").read_text())
    assert stats["size"] == 480 and sum(stats["rating_histogram"].values()) == 480
    assert (out / "stats.txt").exists()
    assert (out / "rating_distribution.png").exists() and (out / "token_distribution.png").exists()
    assert main(["stats", str(corpus_dir / "train.jsonl"), "--out-dir", str(tmp_path / "nf"),
                 "--no-figures"]) == EXIT_OK
    assert not list((tmp_path / "nf").glob("*.png"))


def test_stats_empty_input_is_data_error(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["stats", str(empty), "--out-dir", str(tmp_path / "s")]) == EXIT_DATA


def test_llm_eval_against_mock(corpus_dir, tmp_path, mock_server):
    test_records = read_jsonl(corpus_dir / "test.jsonl").records[:12]
    gold = {r.text: r.rating for r in test_records}

    def respond(payload):
        text = payload["prompt"].rsplit("Review: ", 1)[1].rsplit("\nRating:", 1)[0]
        return 200, {"text": str(gold[text])}, 0

    server = mock_server(respond)
    subset = tmp_path / "subset.jsonl"
    write_lines(subset, [r.to_dict() for r in test_records])
    out = tmp_path / "llm"
    assert main(["llm-eval", str(subset), "--train", str(corpus_dir / "train.jsonl"), "--shots", "2",
                 "--endpoint", server.url, "--model", "mock", "--out-dir", str(out), "--no-figures"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["average"]["acc"] == 100.0 and report["parse_failures"] == 0
    assert len((out / "llm_log.jsonl").read_text().splitlines()) == 12
    assert all(r["temperature"] == 0.0 and r["max_tokens"] == 5 for r in server.requests)


def test_llm_eval_rejects_sampling_temperature(corpus_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"llm": {"temperature": 0.7}}))
    assert main(["llm-eval", str(corpus_dir / "test.jsonl"), "--config", str(cfg),
                 "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG


@pytest.mark.slow
def test_demo_pipeline_within_budget(tmp_path):
    from pathlib import Path
    demo = Path(__file__).resolve().parents[1] / "configs" / "demo.json"
    start = time.perf_counter()
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["generate", str(data), "--config", str(demo)]) == EXIT_OK
    assert main(["train", str(data / "train.jsonl"), str(data / "valid.jsonl"), "--config", str(demo),
                 "--out-dir", str(run)]) == EXIT_OK
    assert main(["evaluate", str(run / "model.ckpt"), str(data / "test.jsonl"),
                 "--out-dir", str(tmp_path / "eval")]) == EXIT_OK
    assert time.perf_counter() - start < 300
