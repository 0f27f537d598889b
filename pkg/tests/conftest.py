import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from narasr import kernels  # noqa: E402
from narasr.model import ModelConfig, init_params  # noqa: E402
from narasr.synthetic import SyntheticSpec, gen_synthetic  # noqa: E402
from narasr.training import TrainConfig, train  # noqa: E402
from narasr.vocab import Vocabulary  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run a test once per kernel backend (compiled and numpy)."""
    mod = kernels.available_backends()[request.param]
    monkeypatch.setattr(kernels, "ctc_forward_backward", mod.ctc_forward_backward)
    monkeypatch.setattr(kernels, "prefix_extend", mod.prefix_extend)
    return request.param


@pytest.fixture
def tiny_vocab():
    # blank, unk, 3 real tokens, eos
    return Vocabulary.synthetic(3)


def make_tiny_model(vocab, d=8, heads=2, d_in=3, seed=0, n_enc=1, n_lm=1, scale=1.0):
    cfg = ModelConfig(vocab_size=vocab.V, d_in=d_in, d_model=d, heads=heads, n_enc=n_enc,
                      n_lm=n_lm, d_ff=2 * d)
    params = init_params(cfg, vocab, seed)
    if scale != 1.0:
        for name, t in params.tensors.items():
            if t.ndim == 2:
                t.data *= scale
    return params


@pytest.fixture
def tiny_model(tiny_vocab):
    return make_tiny_model(tiny_vocab)


# ---------------------------------------------------------------- acceptance reporting

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "status": "PASS", "seconds": 0.0, "failed": []})
    # setup time counts: the trained-model fixture is part of criterion 6
    entry["seconds"] += rep.duration
    if rep.when != "call" and rep.outcome == "passed":
        return
    if rep.failed:
        entry["status"] = "FAIL"
        entry["failed"].append(item.name)
    elif rep.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n}: {e['status']:4s}  {e['title']}  ({e['seconds']:.1f} s)"
        if e["failed"]:
            line += "  failing: " + ", ".join(e["failed"])
        terminalreporter.write_line(line, red=e["status"] == "FAIL", green=e["status"] == "PASS")


# ---------------------------------------------------------------- trained toy model


@dataclass
class TrainedRun:
    dataset: object
    params: object
    history: list
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def trained():
    """Default synthetic task, default model and training config, seed 0."""
    t0 = time.perf_counter()
    spec = SyntheticSpec()
    ds = gen_synthetic(spec, 0)
    t1 = time.perf_counter()
    params = init_params(ModelConfig(vocab_size=ds.vocab.V, d_in=spec.d_in), ds.vocab, seed=0)
    ckpt = train(ds["train"], TrainConfig(), params)
    t2 = time.perf_counter()
    return TrainedRun(ds, ckpt.params, ckpt.history, {"gen": t1 - t0, "train": t2 - t1})
