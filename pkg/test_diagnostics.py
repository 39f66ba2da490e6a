import math

import numpy as np
import arviz as az
import pandas as pd
import pytest

from app.core.errors import InsufficientDrawsError
from app.core.services.diagnostics import (
    convergence_frame,
    effective_sample_size,
    gelman_rubin,
    split_rhat,
    trace_export,
)


def _ar1(phi: float, shape: tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(shape)
    out = np.empty(shape)
    out[:, 0] = noise[:, 0] / math.sqrt(1.0 - phi**2)
    for t in range(1, shape[1]):
        out[:, t] = phi * out[:, t - 1] + noise[:, t]
    return out


@pytest.fixture
def random_draws(make_draws):
    rng = np.random.default_rng(30)
    draws = make_draws(w=rng.uniform(50.0, 150.0, size=(2, 100, 3)), z=[1, 0, 1])
    draws.columns["lambda_h"] = rng.normal(100.0, 5.0, size=(2, 100, 4))
    return draws


class TestSplitRhat:
    def test_identical_chains(self):
        half = np.random.default_rng(31).standard_normal(50)
        chain = np.concatenate((half, half))
        rhat, flagged = split_rhat(np.vstack((chain, chain)))
        assert rhat == 1.0
        assert not flagged

    def test_separated_chains(self):
        rng = np.random.default_rng(32)
        chains = np.vstack((rng.normal(0.0, 1.0, 500), rng.normal(10.0, 1.0, 500)))
        rhat, _ = split_rhat(chains)
        assert rhat > 3.0

    def test_well_mixed_chains(self):
        chains = np.random.default_rng(33).standard_normal((4, 1000))
        rhat, _ = split_rhat(chains)
        assert rhat < 1.01

    def test_matches_arviz_split_rhat(self):
        chains = _ar1(0.5, (3, 400), seed=37) + np.array([[0.0], [0.3], [-0.2]])
        rhat, flagged = split_rhat(chains)
        assert rhat == pytest.approx(max(1.0, float(az.rhat(chains, method="split"))), rel=1e-12)
        assert rhat > 1.0
        assert not flagged

    def test_constant_series_flagged(self):
        assert split_rhat(np.full((2, 20), 3.0)) == (1.0, True)

    @pytest.mark.parametrize("shape", [(1, 50), (2, 5)])
    def test_too_few_draws(self, shape):
        with pytest.raises(InsufficientDrawsError):
            split_rhat(np.zeros(shape))


class TestEffectiveSampleSize:
    def test_independent_draws(self):
        ess = effective_sample_size(np.random.default_rng(34).standard_normal((4, 1000)))
        assert 3000.0 < ess < 5000.0

    def test_autocorrelated_draws(self):
        ess = effective_sample_size(_ar1(0.9, (4, 1000), seed=35))
        assert 100.0 < ess < 400.0

    def test_single_chain_input(self):
        assert effective_sample_size(np.random.default_rng(36).standard_normal(400)) > 200.0

    def test_matches_arviz_mean_ess(self):
        chains = _ar1(0.7, (2, 600), seed=38)
        assert effective_sample_size(chains) == pytest.approx(float(az.ess(chains, method="mean")), rel=1e-12)

    def test_constant_is_nan(self):
        assert math.isnan(effective_sample_size(np.ones((2, 50))))


class TestGelmanRubin:
    def test_selected_parameters(self, random_draws):
        results = gelman_rubin(random_draws, ["lambda_h.mu1", "w[1]"])
        assert [item.parameter for item in results] == ["lambda_h.mu1", "w[1]"]
        assert all(item.rhat >= 1.0 for item in results)
        assert all(item.ess > 0 for item in results)

    def test_default_names_flag_constant_columns(self, random_draws):
        results = {item.parameter: item for item in gelman_rubin(random_draws)}
        assert not results["lambda_h.tau0"].flagged
        assert results["lambda_w.mu1"].flagged
        assert results["lambda_w.mu1"].rhat == 1.0

    def test_frame(self, random_draws):
        frame = convergence_frame(gelman_rubin(random_draws, ["lambda_h.mu0"]))
        assert list(frame.columns) == ["parameter", "rhat", "ess", "flagged"]
        assert frame.shape == (1, 4)


class TestTraceExport:
    def test_rows_and_columns(self, random_draws, tmp_path):
        path = trace_export(random_draws, ["lambda_h.mu1", "w[0]", "w[2]"], tmp_path / "traces.csv")
        frame = pd.read_csv(path)
        assert frame.shape == (200, 5)
        assert list(frame.columns) == ["chain", "iter", "lambda_h.mu1", "w[0]", "w[2]"]
        assert frame["chain"].tolist() == [0] * 100 + [1] * 100
        assert frame["iter"].tolist()[:3] == [0, 1, 2]

    def test_values_round_trip(self, random_draws, tmp_path):
        frame = pd.read_csv(trace_export(random_draws, ["w[1]"], tmp_path / "traces.csv"), float_precision="round_trip")
        np.testing.assert_array_equal(frame["w[1]"].to_numpy(), random_draws.series("w[1]").reshape(-1))

    def test_empty_selection_writes_header(self, random_draws, tmp_path):
        path = trace_export(random_draws, [], tmp_path / "nested" / "traces.csv")
        assert path.read_text().strip() == "chain,iter"

    def test_unknown_parameter(self, random_draws, tmp_path):
        with pytest.raises(KeyError):
            trace_export(random_draws, ["nope"], tmp_path / "traces.csv")
