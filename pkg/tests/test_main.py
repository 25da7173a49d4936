"""
End-to-end tests of the command-line entry point.
"""
import csv
from collections import defaultdict

import pytest

from targeted_detector.dataprep import load_targeted_dataset
from targeted_detector.evaluation import parse_report_text
from targeted_detector.main import main
from targeted_detector.tokenizer import ALL


@pytest.fixture
def config_file(tmp_path, run_config_factory):
    """A config file for the small test model with paths under tmp_path."""
    path = tmp_path / "test.conf"
    path.write_text(run_config_factory(train__steps=2).to_text(), encoding="utf-8")
    return path


@pytest.fixture
def prepared(config_file, tmp_path):
    """Generated shapes converted into a targeted dataset."""
    assert main(["gen", "--config", str(config_file), "--n", "12"]) == 0
    assert main(["convert", "--config", str(config_file)]) == 0
    return config_file


@pytest.fixture
def trained(prepared):
    assert main(["train", "--config", str(prepared)]) == 0
    return prepared


class TestGen:
    """Synthetic data generation."""

    def test_same_seed_byte_identical(self, tmp_path, capsys):
        """Two runs with one seed write identical files."""
        for name in ("a", "b"):
            assert main(["gen", "--n", "32", "--size", "16", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        assert len(list((tmp_path / "a" / "images").glob("*.ppm"))) == 32
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        assert "images = 32" in capsys.readouterr().out

    def test_missing_seed(self, tmp_path):
        """Without a seed the command fails with status 1."""
        assert main(["gen", "--n", "2", "--out", str(tmp_path)]) == 1

    def test_config_without_seed(self, tmp_path, config_file):
        """A config file lacking the seed line is refused."""
        text = "\n".join(
            line for line in config_file.read_text(encoding="utf-8").splitlines() if not line.startswith("seed ")
        )
        no_seed = tmp_path / "no_seed.conf"
        no_seed.write_text(text + "\n", encoding="utf-8")
        assert main(["gen", "--config", str(no_seed), "--n", "2"]) == 1


class TestConvertAndStats:
    """Conversion and dataset statistics."""

    def test_all_probability_one(self, config_file, run_config_factory):
        """With all-probability 1 every non-empty record targets [all]."""
        assert main(["gen", "--config", str(config_file), "--n", "6"]) == 0
        assert main(["convert", "--config", str(config_file), "--all-prob", "1.0"]) == 0
        samples = load_targeted_dataset(run_config_factory().paths.dataset)
        assert len(samples) == 6
        assert all(s.target_phrases == (ALL,) for s in samples if s.instances)

    def test_convert_deterministic(self, prepared, run_config_factory):
        """Converting twice writes the same bytes."""
        path = run_config_factory().paths.dataset
        with open(path, "rb") as handle:
            first = handle.read()
        assert main(["convert", "--config", str(prepared), "--workers", "3"]) == 0
        with open(path, "rb") as handle:
            assert handle.read() == first

    def test_deceptive_rate(self, config_file, run_config_factory):
        """Converting generated shapes with a deceptive rate succeeds and records the injected phrases."""
        assert main(["gen", "--config", str(config_file), "--n", "32"]) == 0
        assert main(["convert", "--config", str(config_file), "--deceptive-rate", "0.1"]) == 0
        samples = load_targeted_dataset(run_config_factory().paths.dataset)
        assert len(samples) == 32
        assert any(s.deceptive_count for s in samples)

    def test_missing_annotations(self, config_file):
        """Converting without an annotation file fails."""
        assert main(["convert", "--config", str(config_file)]) == 1

    def test_stats_report(self, prepared, capsys):
        """Stats print the distribution summary and source ratios."""
        assert main(["stats", "--config", str(prepared)]) == 0
        out = capsys.readouterr().out
        assert "instances per target = 1:" in out
        assert "category ratio" in out

    def test_stats_on_empty_file(self, config_file, tmp_path):
        """An empty dataset is an error."""
        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        assert main(["stats", "--config", str(config_file), str(empty)]) == 1

    def test_stats_on_missing_file(self, config_file, tmp_path):
        """A missing dataset is an error."""
        assert main(["stats", "--config", str(config_file), str(tmp_path / "nope.jsonl")]) == 1


class TestTrainEvalAttn:
    """Training, evaluation and attention dumps through the CLI."""

    def test_train_writes_outputs(self, capsys, trained):
        """Training leaves a checkpoint, a loss log and the effective config."""
        assert "step = 2" in capsys.readouterr().out
        runs = trained.parent / "runs"
        assert (runs / "config.txt").exists()
        assert (runs / "loss_log.csv").exists()
        assert (runs / "model.manifest").exists()

    def test_train_without_dataset(self, config_file):
        """Training without a converted dataset fails."""
        assert main(["gen", "--config", str(config_file), "--n", "2"]) == 0
        assert main(["train", "--config", str(config_file)]) == 1

    def test_eval_without_checkpoint(self, prepared):
        """Evaluating before training fails."""
        assert main(["eval", "--config", str(prepared)]) == 1

    def test_eval_report_is_key_value(self, trained):
        """The written report parses as key = value lines."""
        assert main(["eval", "--config", str(trained), "--protocol", "every", "--rates", "0,0.5", "--purity"]) == 0
        text = (trained.parent / "runs" / "eval_report.txt").read_text(encoding="utf-8")
        lines = [line for line in text.splitlines() if line.strip()]
        assert all(" = " in line for line in lines)
        pairs = parse_report_text(text)
        for protocol in ("all", "targeted_only", "all_named"):
            assert f"{protocol}.AP" in pairs
        assert "deceptive.0.0.AP" in pairs
        assert "deceptive.0.5.AP" in pairs
        assert "purity" in pairs

    def test_eval_report_repeatable(self, trained):
        """Evaluating the same checkpoint twice gives the same report."""
        report = trained.parent / "runs" / "eval_report.txt"
        assert main(["eval", "--config", str(trained), "--protocol", "targeted_only"]) == 0
        first = report.read_bytes()
        assert main(["eval", "--config", str(trained), "--protocol", "targeted_only", "--workers", "2"]) == 0
        assert report.read_bytes() == first

    def test_attention_dump(self, trained, run_config_factory):
        """Every layer and head is dumped and every attention row sums to 1."""
        assert main(["attn", "--config", str(trained), "--image-id", "1", "--target", "circle"]) == 0
        cfg = run_config_factory()
        out_dir = trained.parent / "runs" / "attention"
        for layer in range(cfg.model.n_decoder_layers):
            for head in range(cfg.model.n_heads):
                for kind in ("target", "self"):
                    path = out_dir / f"layer{layer}_head{head}_{kind}_attention.csv"
                    sums = defaultdict(float)
                    with open(path, newline="", encoding="utf-8") as handle:
                        for row in csv.DictReader(handle):
                            sums[row["query_index"]] += float(row["weight"])
                    assert sums
                    assert all(abs(total - 1.0) < 1e-9 for total in sums.values())
                for query in range(cfg.model.n_object_queries):
                    assert (out_dir / f"layer{layer}_head{head}_query{query}.pgm").exists()
        assert (out_dir / "predictions.csv").exists()

    def test_attention_unknown_image(self, trained):
        """An image id outside the dataset fails."""
        assert main(["attn", "--config", str(trained), "--image-id", "999"]) == 1
