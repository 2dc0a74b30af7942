import numpy as np
import pytest

from diibench.encoded import ForwardMemo, encode_examples
from diibench.synthetic import fixture_config, fixture_model, random_weights, write_model_dir
from diibench.taskgen import build_dataset, bundled_task_names, load_bundled_task
from diibench.tokenizer import build_lookup_tokenizer


@pytest.fixture(scope="session")
def bundled_templates():
    return [load_bundled_task(n) for n in bundled_task_names()]


@pytest.fixture(scope="session")
def tok(bundled_templates):
    return build_lookup_tokenizer(bundled_templates)


@pytest.fixture(scope="session")
def agr():
    return load_bundled_task("agr_sv_num_pp")


@pytest.fixture(scope="session")
def model(tok):
    return fixture_model(len(tok), seed=7)


@pytest.fixture(scope="session")
def model64(tok):
    return fixture_model(len(tok), seed=7, dtype=np.float64)


@pytest.fixture(scope="session")
def agr_data(agr):
    return build_dataset(agr, 200, 50, seed=0)


@pytest.fixture(scope="session")
def agr_pairs(tok, agr, agr_data):
    """(train, eval) encoded pairs for the bundled agreement task."""
    return encode_examples(tok, agr, agr_data.train), encode_examples(tok, agr, agr_data.eval)


@pytest.fixture(scope="session")
def memo(model):
    return ForwardMemo(model)


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory, tok):
    cfg = fixture_config(len(tok))
    return write_model_dir(tmp_path_factory.mktemp("fixture") / "model", cfg, random_weights(cfg, 7), tok)


def pytest_terminal_summary(terminalreporter):
    outcome = {}
    for key in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::test_criterion_", 1)[1]
            # a failure in any phase wins over a pass
            if outcome.get(name) != "FAIL":
                outcome[name] = {"passed": "PASS", "skipped": "SKIP"}.get(key, "FAIL")
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(outcome):
        num, _, title = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {outcome[name]:4s} {title.replace('_', ' ')}")
