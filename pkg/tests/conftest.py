import os

# must be set before the encoder module is imported
os.environ.setdefault("CODO_CHECK_NORMS", "1")

import numpy as np
import pytest
import torch

from codo.corpus import SyntheticCorpusConfig, generate_corpus, load_corpus
from codo.encoder import EncoderConfig

torch.set_num_threads(1)

TINY_MODEL = EncoderConfig(stem_channels=8, stage_channels=(8, 8, 16, 16), fpn_channels=8, head_channels=8, head_hidden=16, embed_dim=8)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[CRITERIA] = {}


CRITERIA = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = item.config.stash[CRITERIA].setdefault(number, {"title": title, "outcomes": [], "details": []})
    entry["outcomes"].append(report.outcome)
    entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = config.stash.get(CRITERIA, {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        entry = criteria[number]
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            status = "FAIL"
        elif outcomes and all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}")
        for detail in entry["details"]:
            terminalreporter.write_line(f"             {detail}")


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    cfg = SyntheticCorpusConfig(n_images=48, pool_size=12, n_probe_instances=40, seed=3)
    return load_corpus(generate_corpus(cfg, tmp_path_factory.mktemp("tiny_corpus")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """The default synthetic corpus used by the acceptance runs."""
    return load_corpus(generate_corpus(SyntheticCorpusConfig(), tmp_path_factory.mktemp("corpus")))
