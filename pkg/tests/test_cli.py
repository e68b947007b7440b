"""End-to-end command line workflow."""

import json
import textwrap

import pytest

from nclust.cli import main
from nclust.core import canonicalize
from nclust.synth import read_corpus


def run_cli(argv):
    """Invoke the CLI in-process, normalising SystemExit to a code."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0


def gen(path, meetings=4, seed=0, segments="10,14", concentration=30.0):
    rc = run_cli([
        "gen-data", "--out", str(path), "--meetings", str(meetings),
        "--dim", "8", "--seed", str(seed), "--segments", segments,
        "--concentration", str(concentration),
    ])
    assert rc == 0
    return path


TRAIN_CONFIG = textwrap.dedent(
    """
    seed: 7
    model:
      dim_model: 16
      heads: 2
      encoder_blocks: 1
      decoder_blocks: 1
      ff_dim: 32
    schedule:
      warmup_steps: 20
    curriculum:
      steps: [6, 4, 3, 2]
      batch_size: 4
      eval_interval: 5
      examples_per_meeting: 3
    """
)


class TestPipeline:
    def test_full_round_trip(self, tmp_path, capsys):
        train = gen(tmp_path / "train.jsonl", meetings=5, seed=1)
        dev = gen(tmp_path / "dev.jsonl", meetings=2, seed=2)
        eval_set = gen(tmp_path / "eval.jsonl", meetings=2, seed=3)

        rc = run_cli([
            "augment", "--corpus", str(train), "--out", str(tmp_path / "aug.jsonl"),
            "--seed", "5", "--mode", "meeting", "--rotate",
            "--max-len", "8", "--per-meeting", "2",
        ])
        assert rc == 0
        records = [
            json.loads(line)
            for line in (tmp_path / "aug.jsonl").read_text().splitlines()
        ]
        assert len(records) == 10
        for record in records:
            labels = record["labels"]
            assert canonicalize([str(l) for l in labels]) == tuple(labels)
            assert len(record["embeddings"]) == len(labels)

        config = tmp_path / "run.yaml"
        config.write_text(TRAIN_CONFIG)
        run_dir = tmp_path / "run"
        rc = run_cli([
            "train", "--config", str(config), "--out", str(run_dir),
            "--train-corpus", str(train), "--dev-corpus", str(dev),
            "--no-dev-ser",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "stage len50:" in out and "stage full:" in out
        assert (run_dir / "model.json").exists()
        assert (run_dir / "train_log.jsonl").exists()
        log_lines = [
            json.loads(line)
            for line in (run_dir / "train_log.jsonl").read_text().splitlines()
        ]
        assert all("dev_loss" in line for line in log_lines)

        rc = run_cli([
            "decode", "--checkpoint", str(run_dir / "model.json"),
            "--corpus", str(eval_set), "--out", str(tmp_path / "dnc.json"),
        ])
        assert rc == 0

        rc = run_cli([
            "baseline", "--corpus", str(eval_set),
            "--out", str(tmp_path / "sc.json"), "--p", "0.6",
        ])
        assert rc == 0

        for hyp, score_name in (("dnc.json", "dnc-score.json"),
                                ("sc.json", "sc-score.json")):
            rc = run_cli([
                "score", "--corpus", str(eval_set),
                "--hyp", str(tmp_path / hyp),
                "--out", str(tmp_path / score_name),
            ])
            assert rc == 0
            payload = json.loads((tmp_path / score_name).read_text())
            assert 0.0 <= payload["ser_percent"] <= 100.0
            assert payload["collar_s"] == 0.25
            assert payload["per_chunk"]

        capsys.readouterr()
        rc = run_cli([
            "report",
            f"dnc={tmp_path / 'dnc-score.json'}",
            f"sc={tmp_path / 'sc-score.json'}",
            "--out-md", str(tmp_path / "table.md"),
            "--out-csv", str(tmp_path / "table.csv"),
        ])
        assert rc == 0
        table = capsys.readouterr().out
        assert table.splitlines()[0] == "| arm | SER % | DER % | scored s |"
        assert (tmp_path / "table.md").read_text() == table
        csv_lines = (tmp_path / "table.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "arm,ser_percent,der_percent,scored_time_s"
        assert len(csv_lines) == 3

    def test_decode_with_beam_and_chunks(self, tmp_path):
        corpus = gen(tmp_path / "c.jsonl", meetings=2, seed=4)
        config = tmp_path / "run.yaml"
        config.write_text(TRAIN_CONFIG.replace("steps: [6, 4, 3, 2]", "steps: [2, 1, 1, 1]"))
        run_dir = tmp_path / "run"
        assert run_cli([
            "train", "--config", str(config), "--out", str(run_dir),
            "--train-corpus", str(corpus), "--dev-corpus", str(corpus),
            "--no-dev-ser",
        ]) == 0
        assert run_cli([
            "decode", "--checkpoint", str(run_dir / "model.json"),
            "--corpus", str(corpus), "--out", str(tmp_path / "hyp.json"),
            "--max-len", "6", "--beam", "2",
        ]) == 0
        payload = json.loads((tmp_path / "hyp.json").read_text())
        assert payload["max_len"] == 6
        assert any("[" in key for key in payload["hypotheses"])  # chunk ids
        assert run_cli([
            "score", "--corpus", str(corpus),
            "--hyp", str(tmp_path / "hyp.json"),
            "--out", str(tmp_path / "score.json"),
        ]) == 0


class TestScoreSemantics:
    def write_reference_hypotheses(self, corpus_path, hyp_path):
        corpus = read_corpus(corpus_path)
        payload = {
            "format": "nclust-hypotheses",
            "version": 1,
            "source": "test",
            "max_len": None,
            "hypotheses": {
                m.meeting_id: list(canonicalize(m.identities)) for m in corpus
            },
        }
        hyp_path.write_text(json.dumps(payload))

    def test_perfect_hypothesis_scores_zero(self, tmp_path):
        corpus = gen(tmp_path / "c.jsonl", meetings=3, seed=6)
        hyp = tmp_path / "hyp.json"
        self.write_reference_hypotheses(corpus, hyp)
        rc = run_cli([
            "score", "--corpus", str(corpus), "--hyp", str(hyp),
            "--out", str(tmp_path / "score.json"),
        ])
        assert rc == 0
        payload = json.loads((tmp_path / "score.json").read_text())
        assert payload["ser_percent"] == 0.0
        assert payload["der_percent"] == 0.0

    def test_missing_meeting_fails_without_output(self, tmp_path):
        corpus = gen(tmp_path / "c.jsonl", meetings=2, seed=7)
        records = read_corpus(corpus)
        payload = {
            "format": "nclust-hypotheses",
            "version": 1,
            "max_len": None,
            "hypotheses": {
                records[0].meeting_id: list(canonicalize(records[0].identities))
            },
        }
        hyp = tmp_path / "hyp.json"
        hyp.write_text(json.dumps(payload))
        out = tmp_path / "score.json"
        rc = run_cli([
            "score", "--corpus", str(corpus), "--hyp", str(hyp),
            "--out", str(out),
        ])
        assert rc == 2
        assert not out.exists()


class TestDeterminism:
    def test_gen_data_is_reproducible(self, tmp_path):
        a = gen(tmp_path / "a.jsonl", seed=11)
        b = gen(tmp_path / "b.jsonl", seed=11)
        assert a.read_bytes() == b.read_bytes()

    def test_decode_and_score_are_reproducible(self, tmp_path):
        corpus = gen(tmp_path / "c.jsonl", meetings=3, seed=12)
        config = tmp_path / "run.yaml"
        config.write_text(TRAIN_CONFIG.replace("steps: [6, 4, 3, 2]", "steps: [2, 1, 1, 1]"))
        run_dir = tmp_path / "run"
        assert run_cli([
            "train", "--config", str(config), "--out", str(run_dir),
            "--train-corpus", str(corpus), "--dev-corpus", str(corpus),
            "--no-dev-ser",
        ]) == 0
        outputs = []
        for tag in ("x", "y"):
            hyp = tmp_path / f"hyp-{tag}.json"
            score = tmp_path / f"score-{tag}.json"
            assert run_cli([
                "decode", "--checkpoint", str(run_dir / "model.json"),
                "--corpus", str(corpus), "--out", str(hyp),
            ]) == 0
            assert run_cli([
                "score", "--corpus", str(corpus), "--hyp", str(hyp),
                "--out", str(score),
            ]) == 0
            outputs.append((hyp.read_bytes(), score.read_bytes()))
        assert outputs[0] == outputs[1]


class TestExitCodes:
    def test_usage_errors_exit_one(self, tmp_path):
        assert run_cli(["gen-data", "--out", str(tmp_path / "c.jsonl")]) == 1
        assert run_cli(["no-such-command"]) == 1
        assert run_cli([
            "augment", "--corpus", "x", "--out", "y", "--seed", "0",
            "--mode", "bogus",
        ]) == 1

    def test_validation_errors_exit_two(self, tmp_path):
        missing = tmp_path / "missing.jsonl"
        assert run_cli([
            "baseline", "--corpus", str(missing), "--out", str(tmp_path / "o.json"),
        ]) == 2

        corrupt = tmp_path / "corrupt.jsonl"
        corrupt.write_text("{ not json\n")
        assert run_cli([
            "baseline", "--corpus", str(corrupt), "--out", str(tmp_path / "o.json"),
        ]) == 2

        corpus = gen(tmp_path / "c.jsonl", meetings=2, seed=13)
        assert run_cli([
            "train", "--out", str(tmp_path / "run"),
            "--train-corpus", str(corpus), "--dev-corpus", str(corpus),
        ]) == 2  # no seed anywhere

        assert run_cli([
            "train", "--out", str(tmp_path / "run"), "--seed", "1",
            "--train-corpus", str(corpus), "--dev-corpus", str(corpus),
            "--steps", "1,2,3",
        ]) == 2  # curriculum needs four stage steps

        bad_checkpoint = tmp_path / "bad.json"
        bad_checkpoint.write_text("{}")
        assert run_cli([
            "decode", "--checkpoint", str(bad_checkpoint),
            "--corpus", str(corpus), "--out", str(tmp_path / "h.json"),
        ]) == 2

        not_hyp = tmp_path / "nothyp.json"
        not_hyp.write_text(json.dumps({"format": "other"}))
        assert run_cli([
            "score", "--corpus", str(corpus), "--hyp", str(not_hyp),
            "--out", str(tmp_path / "s.json"),
        ]) == 2

    def test_report_validation(self, tmp_path):
        assert run_cli(["report", "missing-equals-sign"]) == 2
        empty = tmp_path / "empty.json"
        empty.write_text("{}")
        assert run_cli(["report", f"arm={empty}"]) == 2


class TestOutputRoot:
    def test_relative_paths_land_under_root(self, tmp_path, monkeypatch):
        root = tmp_path / "outputs"
        monkeypatch.setenv("NCLUST_OUTPUT_ROOT", str(root))
        monkeypatch.chdir(tmp_path)
        assert run_cli([
            "gen-data", "--out", "corpus.jsonl", "--meetings", "2",
            "--dim", "8", "--seed", "1", "--segments", "10,12",
        ]) == 0
        assert (root / "corpus.jsonl").exists()
        assert not (tmp_path / "corpus.jsonl").exists()

    def test_absolute_paths_ignore_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NCLUST_OUTPUT_ROOT", str(tmp_path / "outputs"))
        target = tmp_path / "direct.jsonl"
        assert run_cli([
            "gen-data", "--out", str(target), "--meetings", "2",
            "--dim", "8", "--seed", "1", "--segments", "10,12",
        ]) == 0
        assert target.exists()
