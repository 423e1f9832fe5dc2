import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from chnet.datasets import SparseDataset, generate_synthetic
from chnet.numerics import Rng
from chnet.pvae import FrozenBase, PvaeConfig, init_pvae

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = PvaeConfig(e_dim=4, point_hidden=(5,), set_dim=4, latent_dim=3, encoder_hidden=(5,),
                  decoder_hidden=(4,), output_variance=0.1)


def mixed_dataset(seed=0, n_rows=12, n_features=6, p=0.6):
    """Small dense-ish dataset whose even features are binary and odd ones continuous."""
    gen = np.random.default_rng(seed)
    mask = gen.random((n_rows, n_features)) < p
    mask[:, 0] = True
    r, c = np.nonzero(mask)
    kinds = ["binary" if j % 2 == 0 else "continuous" for j in range(n_features)]
    raw = np.where(np.array(kinds)[c] == "binary", gen.integers(0, 2, len(r)), gen.random(len(r)))
    return SparseDataset.build(n_rows, n_features, r, c, raw.astype(float), kinds,
                               np.zeros(n_features), np.ones(n_features))


@pytest.fixture
def toy_dataset():
    return mixed_dataset()


@pytest.fixture
def toy_model(toy_dataset):
    return init_pvae(toy_dataset.n_features, toy_dataset.feature_kinds, [0, 1, 2, 3], TINY,
                     np.random.default_rng(3))


@pytest.fixture
def toy_base(toy_dataset, toy_model):
    # perturb biases so no unit sits at an exact symmetry point
    gen = np.random.default_rng(11)
    for b in toy_model.point_net.biases + toy_model.encoder.biases + toy_model.decoder.biases:
        b += 0.1 * gen.standard_normal(b.shape)
    toy_model.freeze()
    return FrozenBase(toy_model, toy_dataset, [0, 1, 2, 3])


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_synthetic(120, 20, 3, 0.0, 0.4, "binary", 4, Rng(5).generator())


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the detail each test recorded."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            label = rep.nodeid.split("test_criterion_", 1)[1].split("_", 1)[0].lstrip("0")
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((label, "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(lines, key=lambda x: (int(x[0].rstrip("abcd")), x[0])):
        terminalreporter.write_line(f"criterion {label:<3} {status}  {detail}")
