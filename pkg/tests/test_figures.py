"""Tests for report figure rendering (headless, file-based)."""

import numpy as np
import pytest

from smoothproxy.figures import (
    save_ablation_figures,
    save_comparison_figures,
    save_grid_figures,
    save_report_figures,
    save_run_figures,
)
from smoothproxy.pipeline import ExperimentConfig, run_comparison, run_experiment

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def tiny_config(**overrides):
    base = dict(class_count=4, per_class=12, raw_dim=8, feature_dim=8,
                embed_dim=4, center_rank=2, noise_rate=0.2, epochs_phase1=2,
                epochs_phase2=2, batch_size=16, clean_val_per_class=4,
                eval_ks=(1, 2), seed=3)
    base.update(overrides)
    return ExperimentConfig(**base)


def run_report():
    return run_experiment(tiny_config()).to_dict()


def assert_png_files(paths):
    assert paths
    for path in paths:
        with open(path, "rb") as fh:
            assert fh.read(8) == PNG_MAGIC


class TestRunFigures:
    def test_writes_named_pngs(self, tmp_path):
        paths = save_run_figures(run_report(), tmp_path)
        assert [p.split("/")[-1] for p in paths] == ["loss_curves.png",
                                                     "recall_at_k.png"]
        assert_png_files(paths)

    def test_overwrite_is_silent(self, tmp_path):
        report = run_report()
        save_run_figures(report, tmp_path)
        paths = save_run_figures(report, tmp_path)
        assert_png_files(paths)

    def test_creates_directory(self, tmp_path):
        out = tmp_path / "nested" / "figs"
        paths = save_run_figures(run_report(), out)
        assert_png_files(paths)


class TestComparisonFigures:
    def test_writes_recall_and_curves(self, tmp_path):
        report = run_comparison(tiny_config(),
                                losses=["smooth_proxy_anchor", "proxy_anchor"])
        paths = save_comparison_figures(report, tmp_path)
        assert [p.split("/")[-1] for p in paths] == ["comparison_recall.png",
                                                     "comparison_curves.png"]
        assert_png_files(paths)


class TestGridFigures:
    def test_heatmap_with_failed_cell(self, tmp_path):
        report = {
            "kind": "grid",
            "lambdas": [0.1, 0.2],
            "betas": [50.0, 100.0],
            "recall1_table": [[0.5, 0.6], [None, 0.4]],
        }
        paths = save_grid_figures(report, tmp_path)
        assert paths[0].endswith("grid_recall1.png")
        assert_png_files(paths)


class TestAblationFigures:
    def test_paired_bars(self, tmp_path):
        def run(recall):
            return {"recall": {"recall_at": {"1": recall}}}

        report = {
            "kind": "ablation",
            "loss": "proxy_anchor",
            "lambda_c": 0.1,
            "pairs": [
                {"seed": 0, "full": run(0.4), "filtered": run(0.45)},
                {"seed": 1000, "full": run(0.42), "filtered": run(0.44)},
            ],
            "mean_recall1_full": 0.41,
            "mean_recall1_filtered": 0.445,
        }
        paths = save_ablation_figures(report, tmp_path)
        assert_png_files(paths)


class TestDispatch:
    def test_by_kind(self, tmp_path):
        paths = save_report_figures(run_report(), tmp_path)
        assert_png_files(paths)

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="recall"):
            save_report_figures({"kind": "recall"}, tmp_path)
