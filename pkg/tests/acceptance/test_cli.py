"""
Tests for the bt-robustness command line: exit codes, stdout reports and JSON
error summaries on stderr.
"""

import json

import pytest

from bt_robustness.corpus import Corpus, load_corpus
from bt_robustness.main import build_parser, main


pytestmark = pytest.mark.usefixtures("restore_logging")


@pytest.fixture(autouse=True)
def no_endpoint_env(monkeypatch):
    for key in (
        "BT_TTS_ENDPOINT",
        "BT_ASR_ENDPOINT",
        "BT_NLU_ENDPOINT",
        "BT_CACHE_DIRECTORY",
        "BT_STRIP_TERMINAL_PUNCTUATION",
        "HTTP_HOST",
    ):
        monkeypatch.delenv(key, raising=False)


def last_json_line(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


def last_record(path) -> dict:
    return json.loads(path.read_text(encoding="utf-8").splitlines()[-1])


class TestParser:
    """Test argument parsing and usage errors."""

    def test_subcommands(self):
        args = build_parser().parse_args(["rank-errors", "--corpus", "c.jsonl", "--policy", "R13+"])
        assert args.command == "rank-errors"
        assert args.policy == "R13+"
        assert args.top == 20
        assert args.by == "coefficient"

    def test_usage_error_is_json(self, capsys):
        """
        Test that a missing required option exits with 2 and a JSON summary on stderr.

        Args:
            capsys: Captured stdout and stderr.
        """
        assert main(["evaluate"]) == 2
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "UsageError"
        assert "--corpus" in summary["message"]

    def test_unknown_metric(self, capsys):
        assert main(["evaluate", "--corpus", "c.jsonl", "--metric", "R2"]) == 2
        assert last_json_line(capsys.readouterr().err)["error"] == "UsageError"


class TestEvaluate:
    """Test the evaluate command."""

    def test_single_metric(self, capsys, corpus_file, metric_corpus):
        """Test that --metric prints only the value."""
        path = corpus_file(metric_corpus)
        assert main(["--log-level", "error", "evaluate", "--corpus", str(path), "--metric", "R123"]) == 0
        assert capsys.readouterr().out == "0.25\n"

    def test_markdown_report(self, capsys, corpus_file, hermetic_expected_corpus):
        """
        Test that the markdown report carries every section and the fixture's values.

        Args:
            capsys: Captured stdout.
            corpus_file: Writes a corpus to a JSONL file.
            hermetic_expected_corpus: The 20-sample fixture after back transcription.
        """
        path = corpus_file(hermetic_expected_corpus)
        rc = main(
            ["evaluate", "--corpus", str(path), "--nlu-label", "intent-nlu", "--tts-label", "tts-a"]
        )
        out = capsys.readouterr().out
        assert rc == 0
        for heading in ("## Outcome changes", "## Robustness", "## Standard metrics", "## F-measure components"):
            assert heading in out
        assert "| intent-nlu | tts-a | 0.7500 | 0.8000 | 0.8000 | 0.8571 | 0.8125 | 0.8667 |" in out
        assert "| intent-nlu | tts-a | 2 | 1 | 1 | 16 |" in out

    def test_csv_report_to_file(self, corpus_file, metric_corpus, tmp_path):
        out = tmp_path / "reports" / "metrics.csv"
        assert main(["evaluate", "--corpus", str(corpus_file(metric_corpus)), "--format", "csv", "--out", str(out)]) == 0
        assert out.read_text(encoding="utf-8").splitlines()[1] == "R123,1,4,0.25"

    def test_skips_samples_without_results(self, capsys, corpus_file, metric_corpus, make_sample):
        """Test that samples without a hypothesis are left out of the metrics."""
        corpus = Corpus((*metric_corpus, make_sample("s5", "book a cab", None, "a")))
        assert main(["evaluate", "--corpus", str(corpus_file(corpus)), "--metric", "R1"]) == 0
        assert capsys.readouterr().out == "0.5\n"

    def test_undefined_metric(self, capsys, corpus_file, make_sample):
        """Test that a metric with an empty domain exits with 1 and names the metric."""
        path = corpus_file(Corpus((make_sample("s1", "x", "x", "a", "a", "a"),)))
        assert main(["evaluate", "--corpus", str(path), "--metric", "R123"]) == 1
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "UndefinedMetricError"
        assert summary["details"]["metric_id"] == "R123"

    def test_missing_corpus_file(self, capsys, tmp_path):
        missing = tmp_path / "absent.jsonl"
        assert main(["evaluate", "--corpus", str(missing)]) == 1
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "FileNotFoundError"
        assert summary["details"]["path"] == str(missing)

    def test_schema_error(self, capsys, tmp_path):
        """Test that a malformed corpus line is reported with its line number."""
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        assert main(["evaluate", "--corpus", str(path)]) == 1
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "SchemaError"
        assert summary["details"]["line"] == 1


class TestRunCommands:
    """Test the backtranscribe and transcribe commands."""

    def test_backtranscribe_with_mock_adapters(
        self, capsys, hermetic_corpus_file, mock_dir, tmp_path, hermetic_expected_corpus
    ):
        """
        Test a full back transcription over the mock adapters with metadata output.

        Args:
            capsys: Captured stdout with the JSON summary.
            hermetic_corpus_file: The fixture corpus before back transcription.
            mock_dir: Mock tables of the fixture.
            tmp_path: Directory for the output corpus and metadata.
            hermetic_expected_corpus: The fixture as the run must produce it.
        """
        out = tmp_path / "bt.jsonl"
        metadata = tmp_path / "bt.meta.json"
        rc = main(
            [
                "backtranscribe",
                "--corpus", str(hermetic_corpus_file),
                "--out", str(out),
                "--mock-dir", str(mock_dir),
                "--metadata-out", str(metadata),
                "--parallel", "3",
            ]
        )
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert (summary["samples"], summary["completed"], summary["failed"]) == (20, 20, [])
        assert load_corpus(out) == hermetic_expected_corpus
        meta = json.loads(metadata.read_text(encoding="utf-8"))
        assert meta["run_kind"] == "back_transcription"
        assert meta["adapters"]["tts"]["identity"].startswith("mock-tts:")

    def test_missing_endpoints(self, capsys, hermetic_corpus_file, tmp_path):
        """Test that transcribe without ASR and NLU endpoints names both missing keys."""
        rc = main(
            ["transcribe", "--corpus", str(hermetic_corpus_file), "--out", str(tmp_path / "o.jsonl"), "--audio-dir", str(tmp_path)]
        )
        assert rc == 1
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "ConfigError"
        assert summary["details"]["missing"] == ["BT_ASR_ENDPOINT", "BT_NLU_ENDPOINT"]

    def test_config_file_endpoints(self, capsys, hermetic_corpus_file, tmp_path):
        """Test that an invalid value in the --config file is reported by key."""
        config = tmp_path / "bt.env"
        config.write_text("BT_TTS_ENDPOINT=http://localhost:1/tts\nBT_MAX_PARALLEL_REQUESTS=zero\n", encoding="utf-8")
        rc = main(
            ["backtranscribe", "--corpus", str(hermetic_corpus_file), "--out", str(tmp_path / "o.jsonl"), "--config", str(config)]
        )
        assert rc == 1
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "ConfigError"
        assert summary["details"]["key"] == "BT_MAX_PARALLEL_REQUESTS"


class TestAnalysisCommands:
    """Test the edit-operation and comparison commands."""

    def test_rank_by_coefficient(self, capsys, corpus_file, hermetic_expected_corpus, tmp_path):
        """Test that rank-errors trains a model, ranks all six operations and saves the model."""
        model = tmp_path / "model.json"
        rc = main(["rank-errors", "--corpus", str(corpus_file(hermetic_expected_corpus)), "--model-out", str(model)])
        lines = capsys.readouterr().out.splitlines()
        assert rc == 0
        assert lines[0] == "rank,feature,score"
        assert len(lines) == 7
        assert lines[1].startswith("1,mail[add_prefix_e],")
        assert lines[-1].startswith("6,a[del],")
        assert json.loads(model.read_text(encoding="utf-8"))["metadata"]["policy"] == "R123"

    def test_rank_by_frequency(self, capsys, corpus_file, hermetic_expected_corpus):
        """Test the frequency ranking with --top."""
        path = corpus_file(hermetic_expected_corpus)
        assert main(["rank-errors", "--corpus", str(path), "--by", "frequency", "--top", "2"]) == 0
        assert capsys.readouterr().out == "rank,feature,score\n1,a[del],8\n2,mail[add_prefix_e],2\n"

    def test_rank_single_class(self, capsys, corpus_file, make_sample):
        path = corpus_file(Corpus((make_sample("s1", "play jazz", "play a jazz", "m", "m", "m"),)))
        assert main(["rank-errors", "--corpus", str(path)]) == 1
        assert last_json_line(capsys.readouterr().err)["error"] == "SingleClassError"

    def test_editops_dump(self, corpus_file, hermetic_expected_corpus, tmp_path):
        """
        Test the per-sample edit-op dump with positions and the frequency CSV.

        Args:
            corpus_file: Writes a corpus to a JSONL file.
            hermetic_expected_corpus: The 20-sample fixture after back transcription.
            tmp_path: Directory for the dump files.
        """
        out, freq = tmp_path / "ops.jsonl", tmp_path / "freq.csv"
        path = corpus_file(hermetic_expected_corpus)
        assert main(["editops", "--corpus", str(path), "--out", str(out), "--freq-out", str(freq)]) == 0
        records = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
        assert len(records) == 20
        assert records[0] == {"id": "s01", "ops": ["a[del]"], "positions": [1]}
        assert records[10] == {"id": "s11", "ops": [], "positions": []}
        assert freq.read_text(encoding="utf-8").splitlines()[:2] == ["op,count", "a[del],8"]

    @pytest.fixture
    def punctuated_corpus(self, corpus_file, metric_corpus, make_sample):
        """The metric corpus plus a CtoI sample whose hypothesis only adds a full stop."""
        extra = make_sample("s5", "set a timer", "set a timer.", "a", "a", "b")
        return corpus_file(Corpus((*metric_corpus.samples, extra)))

    @pytest.fixture
    def strip_punctuation_config(self, tmp_path):
        path = tmp_path / "bt.env"
        path.write_text("BT_STRIP_TERMINAL_PUNCTUATION=true\n", encoding="utf-8")
        return path

    def test_config_normalization_reaches_analysis(
        self, capsys, tmp_path, punctuated_corpus, strip_punctuation_config
    ):
        """
        evaluate, rank-errors and editops apply the normalization of --config.

        Args:
            capsys: Captured stdout
            tmp_path: Output directory for the edit-op dumps
            punctuated_corpus: Corpus file with one punctuation-only difference
            strip_punctuation_config: Config file that strips terminal punctuation
        """
        corpus, config = str(punctuated_corpus), str(strip_punctuation_config)

        assert main(["evaluate", "--corpus", corpus, "--metric", "R123"]) == 0
        assert capsys.readouterr().out == "0.2\n"
        assert main(["evaluate", "--corpus", corpus, "--metric", "R123", "--config", config]) == 0
        assert capsys.readouterr().out == "0.25\n"

        assert main(["rank-errors", "--corpus", corpus, "--by", "frequency"]) == 0
        assert "timer.[del_suffix_1]" in capsys.readouterr().out
        assert main(["rank-errors", "--corpus", corpus, "--by", "frequency", "--config", config]) == 0
        assert "timer" not in capsys.readouterr().out

        plain, stripped = tmp_path / "plain.jsonl", tmp_path / "stripped.jsonl"
        assert main(["editops", "--corpus", corpus, "--out", str(plain)]) == 0
        assert main(["editops", "--corpus", corpus, "--out", str(stripped), "--config", config]) == 0
        assert last_record(plain) == {"id": "s5", "ops": ["timer.[del_suffix_1]"], "positions": [2]}
        assert last_record(stripped) == {"id": "s5", "ops": [], "positions": []}

    def test_compare(self, corpus_file, metric_corpus, hermetic_expected_corpus, tmp_path):
        """Test that compare reports per-metric differences between two corpora."""
        out = tmp_path / "compare.json"
        a = corpus_file(metric_corpus, "a.jsonl")
        b = corpus_file(hermetic_expected_corpus, "b.jsonl")
        assert main(["compare", "--corpus-a", str(a), "--corpus-b", str(b), "--out", str(out)]) == 0
        payload = json.loads(out.read_text(encoding="utf-8"))
        assert payload["differences"]["R123"] == pytest.approx(0.25 - 0.75)
        assert payload["max_abs_difference"] >= payload["mean_abs_difference"] > 0


class TestWer:
    """Test the wer command."""

    def test_identical(self, capsys, tmp_path):
        refs = tmp_path / "refs.txt"
        refs.write_text("set an alarm\nwake me up\n", encoding="utf-8")
        assert main(["wer", "--refs", str(refs), "--hyps", str(refs)]) == 0
        assert capsys.readouterr().out == "0.0\n"

    def test_details(self, capsys, tmp_path):
        """Test that --details prints the edit counts behind the rate."""
        refs, hyps = tmp_path / "refs.txt", tmp_path / "hyps.txt"
        refs.write_text("set an alarm\nwake me up\n", encoding="utf-8")
        hyps.write_text("Set and alarm\nwake up now\n", encoding="utf-8")
        assert main(["wer", "--refs", str(refs), "--hyps", str(hyps), "--details"]) == 0
        details = json.loads(capsys.readouterr().out)
        assert details["reference_tokens"] == 6
        assert details["substitutions"] + details["insertions"] + details["deletions"] == 3
        assert details["rate"] == 0.5

    def test_case_counts_without_normalization(self, capsys, tmp_path):
        """Test that --no-normalize counts a case difference as an error."""
        refs, hyps = tmp_path / "refs.txt", tmp_path / "hyps.txt"
        refs.write_text("set an alarm\n", encoding="utf-8")
        hyps.write_text("Set an alarm\n", encoding="utf-8")
        assert main(["wer", "--refs", str(refs), "--hyps", str(hyps), "--no-normalize"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(1 / 3)

    def test_length_mismatch(self, capsys, tmp_path):
        refs, hyps = tmp_path / "refs.txt", tmp_path / "hyps.txt"
        refs.write_text("a\nb\n", encoding="utf-8")
        hyps.write_text("a\n", encoding="utf-8")
        assert main(["wer", "--refs", str(refs), "--hyps", str(hyps)]) == 1
        assert last_json_line(capsys.readouterr().err)["error"] == "WerInputError"


class TestTtsAudit:
    """Test the tts-audit make-sheet and score commands."""

    def test_make_sheet_and_score(self, capsys, corpus_file, hermetic_expected_corpus, tmp_path):
        """
        Test drawing a sheet, filling it with "both" and scoring it.

        Args:
            capsys: Captured stdout with the JSON score.
            corpus_file: Writes a corpus to a JSONL file.
            hermetic_expected_corpus: The 20-sample fixture after back transcription.
            tmp_path: Directory for the sheet and key.
        """
        sheet, key = tmp_path / "sheet.csv", tmp_path / "key.csv"
        path = corpus_file(hermetic_expected_corpus)
        assert main(
            ["tts-audit", "make-sheet", "--corpus", str(path), "--fraction", "0.25", "--seed", "4", "--out", str(sheet), "--key-out", str(key)]
        ) == 0

        lines = sheet.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 5
        sheet.write_text("\n".join([lines[0], *(line + "both" for line in lines[1:])]) + "\n", encoding="utf-8")

        assert main(["tts-audit", "score", "--sheet", str(sheet), "--key", str(key), "--format", "json"]) == 0
        assert json.loads(capsys.readouterr().out) == {
            "total": 4,
            "utt": 0,
            "aug": 0,
            "both": 4,
            "resemblance": 1.0,
        }

    def test_score_with_missing_verdicts(self, capsys, corpus_file, hermetic_expected_corpus, tmp_path):
        """Test that scoring an unfilled sheet lists the empty rows."""
        sheet, key = tmp_path / "sheet.csv", tmp_path / "key.csv"
        path = corpus_file(hermetic_expected_corpus)
        main(["tts-audit", "make-sheet", "--corpus", str(path), "--out", str(sheet), "--key-out", str(key)])
        capsys.readouterr()
        assert main(["tts-audit", "score", "--sheet", str(sheet), "--key", str(key)]) == 1
        summary = last_json_line(capsys.readouterr().err)
        assert summary["error"] == "MissingVerdictError"
        assert summary["details"]["rows"] == [1, 2]


class TestImport:
    """Test the import command."""

    def test_show_partitions_and_import(self, capsys, tmp_path):
        """Test that import prints partition sizes and writes the corpus in one call."""
        massive = tmp_path / "en-US.jsonl"
        massive.write_text(
            json.dumps(
                {
                    "id": "0",
                    "utt": "wake me up at nine am",
                    "annot_utt": "wake me up at [time : nine am]",
                    "scenario": "alarm",
                    "intent": "alarm_set",
                    "partition": "test",
                }
            )
            + "\n",
            encoding="utf-8",
        )
        out = tmp_path / "corpus.jsonl"
        rc = main(["import", "--massive", str(massive), "--task", "slots", "--show-partitions", "--out", str(out)])
        assert rc == 0
        assert json.loads(capsys.readouterr().out) == {"test": 1}
        assert len(load_corpus(out)) == 1

    def test_import_needs_an_output(self, capsys, tmp_path):
        assert main(["import", "--massive", str(tmp_path / "x.jsonl"), "--task", "intent"]) == 1
        assert last_json_line(capsys.readouterr().err)["error"] == "ConfigError"


class TestServeMock:
    """Test the serve-mock command."""

    def test_passes_options_to_the_service(self, mocker, mock_dir):
        serve = mocker.patch("bt_robustness.main.run_mock_service")
        rc = main(["--log-level", "debug", "serve-mock", "--mock-dir", str(mock_dir), "--port", "9001"])
        assert rc == 0
        serve.assert_called_once_with(
            str(mock_dir), host="127.0.0.1", port=9001, workers=1, log_level="debug"
        )
