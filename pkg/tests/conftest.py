import numpy as np
import pytest

from rallycast.ingest import GeneratorConfig, encode_rally, fit_preprocessing, generate_synthetic
from rallycast.model import ModelConfig, MuLMINet
from rallycast.training import _resolve_model_config, collate


@pytest.fixture
def rallies():
    return generate_synthetic(12, seed=5)


@pytest.fixture
def tiny_setup():
    """Three length-6 rallies, fitted preprocessing, a d=8 L=1 model and one batch."""
    r = generate_synthetic(3, seed=11, params=GeneratorConfig(min_length=6, max_length=6))
    prep = fit_preprocessing(r)
    enc = [encode_rally(x, prep.vocabularies) for x in prep.normalize(r)]
    cfg = _resolve_model_config(ModelConfig(dim=8, layers=1, dropout=0.0), prep)
    return r, prep, enc, MuLMINet(cfg, seed=3), collate(enc)


def make_model(prep, seed=0, **kw):
    kw.setdefault("dropout", 0.0)
    return MuLMINet(_resolve_model_config(ModelConfig(**kw), prep), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    label = getattr(item.function, "criterion", None)
    if label is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _ACCEPTANCE[label] = ("PASS" if rep.passed else "FAIL", item.function.__doc__.strip().splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=int):
        status, text = _ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label}: {status}  {text}")
