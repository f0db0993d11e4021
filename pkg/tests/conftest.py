import numpy as np
import pytest

from duq.predictive import fuse_samples
from duq.synth import regress1d
from duq.toynet import (
    ToyNetConfig,
    TrainSettings,
    ensemble_sample,
    mc_dropout_sample,
    train,
    train_ensemble,
)

# in-distribution inputs lie inside the training range [-3, 3]
ID_GRID = np.linspace(-2.5, 2.5, 51)
OOD_GRID = np.concatenate([np.linspace(-9.0, -6.0, 16), np.linspace(6.0, 9.0, 16)])
N_TRIALS = 50
OOD_SETTINGS = TrainSettings(lr=3e-3, epochs=60)


def _epistemic(samples, n_id, n_ood):
    v = fuse_samples(samples).var_epistemic
    return {"id": v[:n_id].mean(), "ood": v[n_id:n_id + n_ood].mean(), "x0": v[-2], "x8": v[-1]}


@pytest.fixture(scope="session")
def ood_trials():
    """Per-trial epistemic variances for MC dropout (M=32) and 8-member ensembles.

    Each trial draws its own 300-point training set and trains its own
    models; inputs are the ID grid, the OOD grid, then the points 0 and 8.
    """
    x_eval = np.concatenate([ID_GRID, OOD_GRID, [0.0, 8.0]])
    mc_cfg = ToyNetConfig.from_preset((1, 32, 32, 2), "all", 0.3)
    ens_cfg = ToyNetConfig.from_preset((1, 32, 32, 2))
    out = {"mc": [], "ensemble": []}
    for trial in range(N_TRIALS):
        data = regress1d(300, 1000 + trial)
        params = train(mc_cfg, data, OOD_SETTINGS, seed=trial)
        out["mc"].append(_epistemic(mc_dropout_sample(params, mc_cfg, x_eval, 32, trial),
                                    ID_GRID.size, OOD_GRID.size))
        ens = train_ensemble(ens_cfg, data, OOD_SETTINGS, seeds=[8 * trial + k for k in range(8)])
        out["ensemble"].append(_epistemic(ensemble_sample(ens, ens_cfg, x_eval), ID_GRID.size, OOD_GRID.size))
    return out


SWEEP_PAIRS = 64
SWEEP_SEED = 0


def _timed_sweep(corrupt):
    import time

    from duq.geometry import DEFAULT_PERCENTILES, IcpConfig, percentile_sweep
    from duq.synth import make_pairset

    t0 = time.perf_counter()
    pairs = [v.to_pose_pair() for v in make_pairset(SWEEP_PAIRS, SWEEP_SEED, corrupt=corrupt)]
    rows = percentile_sweep(pairs, DEFAULT_PERCENTILES, IcpConfig())
    return {r.percentile: r for r in rows}, time.perf_counter() - t0


@pytest.fixture(scope="session")
def corrupt_sweep():
    """Rows by percentile and wall time for 64 corrupted synthetic pairs."""
    return _timed_sweep(True)


@pytest.fixture(scope="session")
def clean_sweep():
    return _timed_sweep(False)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def verdict():
    """Print and record one PASS/FAIL line per acceptance criterion, then assert it."""

    def check(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
