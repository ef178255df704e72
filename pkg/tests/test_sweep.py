import csv

import numpy as np
import pytest

from eegsr.model import FlowAutoencoder, ModelConfig
from eegsr.pipeline import Epoch
from eegsr.sampling import SamplerConfig
from eegsr.sweep import (
    SweepError,
    SweepSpec,
    dropped_count,
    run_sweep,
    write_sweep_csv,
)
from eegsr.synth import SynthSpec, synth_generate
from eegsr.pipeline import preprocess_recording

from conftest import make_epoch


@pytest.fixture(scope="module")
def smooth_epochs():
    spec = SynthSpec(n_channels=16, n_recordings=5, duration=60.0, seed=12)
    epochs = []
    for rec in synth_generate(spec):
        eps, _ = preprocess_recording(rec)
        epochs.extend(eps)
    return epochs


class TestDroppedCount:
    def test_rate_02_on_16_channels(self):
        assert dropped_count(0.2, 16) == 3

    def test_high_rate_capped_for_spline(self):
        assert dropped_count(0.9, 16) == 13  # leaves 3 observed

    def test_at_least_one(self):
        assert dropped_count(0.01, 16) == 1


class TestSweepSpec:
    def test_validation(self):
        with pytest.raises(SweepError):
            SweepSpec(methods=())
        with pytest.raises(SweepError):
            SweepSpec(methods=("magic",))
        with pytest.raises(SweepError):
            SweepSpec(dropout_rates=(0.0, 0.5))
        with pytest.raises(SweepError):
            SweepSpec(seeds=())


class TestRunSweep:
    def test_spline_nmse_increases_with_rate(self, smooth_epochs):
        spec = SweepSpec(
            dropout_rates=(0.2, 0.9),
            n_epochs=10,
            seeds=tuple(range(5)),
            methods=("spline",),
        )
        rows = run_sweep(smooth_epochs, None, spec)
        by_rate = {r["rate"]: r["mean_nmse"] for r in rows}
        assert by_rate[0.9] > by_rate[0.2]
        assert all(r["n"] == 50 for r in rows)

    def test_rows_cover_every_pair(self, smooth_epochs):
        spec = SweepSpec(
            dropout_rates=(0.3, 0.6),
            n_epochs=2,
            seeds=(0,),
            methods=("spline",),
        )
        rows = run_sweep(smooth_epochs, None, spec)
        assert {(r["method"], r["rate"]) for r in rows} == {
            ("spline", 0.3),
            ("spline", 0.6),
        }

    def test_reproducible(self, smooth_epochs):
        spec = SweepSpec(
            dropout_rates=(0.5,), n_epochs=4, seeds=(1, 2), methods=("spline",)
        )
        a = run_sweep(smooth_epochs, None, spec)
        b = run_sweep(smooth_epochs, None, spec)
        assert a == b

    def test_model_method_requires_model(self, smooth_epochs):
        spec = SweepSpec(methods=("model",))
        with pytest.raises(SweepError, match="no model"):
            run_sweep(smooth_epochs, None, spec)

    def test_model_rows_populated(self, smooth_epochs):
        model = FlowAutoencoder(
            ModelConfig(d_model=32, n_heads=1, head_dim=32, n_layers_enc=1, n_layers_dec=1),
            seed=0,
        )
        spec = SweepSpec(
            dropout_rates=(0.5,), n_epochs=2, seeds=(0,), methods=("model", "spline")
        )
        rows = run_sweep(
            smooth_epochs[:4], model, spec, sampler=SamplerConfig(n_steps=1, seed=0)
        )
        model_row = next(r for r in rows if r["method"] == "model")
        assert model_row["n"] == 2
        assert np.isfinite(model_row["mean_nmse"])

    def test_infeasible_spline_marked_not_skipped(self, rng):
        epochs = [make_epoch(3, rng) for _ in range(4)]
        spec = SweepSpec(
            dropout_rates=(0.5,), n_epochs=2, seeds=(0,), methods=("spline",)
        )
        rows = run_sweep(epochs, None, spec)
        (row,) = rows
        assert row["n"] == 0
        assert row["infeasible"] == 2
        assert np.isnan(row["mean_nmse"])

    def test_empty_corpus_rejected(self):
        with pytest.raises(SweepError):
            run_sweep([], None, SweepSpec(methods=("spline",)))


class TestSweepCsv:
    def test_schema_and_values(self, tmp_path, smooth_epochs):
        spec = SweepSpec(
            dropout_rates=(0.25, 0.75),
            n_epochs=2,
            seeds=(0,),
            methods=("spline",),
        )
        rows = run_sweep(smooth_epochs, None, spec)
        path = tmp_path / "sweep.csv"
        write_sweep_csv(path, rows)
        with open(path) as fh:
            parsed = list(csv.reader(fh))
        assert parsed[0] == ["method", "rate", "mean_nmse", "sd_nmse", "n"]
        assert len(parsed) == 3
        assert parsed[1][0] == "spline"
        assert float(parsed[1][2]) >= 0.0

    def test_infeasible_rows_written_empty(self, tmp_path, rng):
        epochs = [make_epoch(3, rng) for _ in range(2)]
        spec = SweepSpec(
            dropout_rates=(0.5,), n_epochs=2, seeds=(0,), methods=("spline",)
        )
        rows = run_sweep(epochs, None, spec)
        path = tmp_path / "sweep.csv"
        write_sweep_csv(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[1].startswith("spline,0.5,,,0")
