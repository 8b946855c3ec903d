import numpy as np
import pytest

from fedfleet.engine.data import make_blobs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return make_blobs(600, 8, 4, separation=3.0, seed=3)


@pytest.fixture
def make_agent(tmp_path):
    """Start client agents (no broker) holding a small blob dataset."""
    from fedfleet.client import ClientAgent, ClientConfig
    from fedfleet.engine.data import save_dataset, train_val_split

    agents = []

    def factory(cid="c1", delay=0.0, n=200, seed=0, with_val=True, **kw):
        data = make_blobs(n, 8, 4, separation=3.0, seed=seed)
        root = tmp_path / cid
        if with_val:
            tr, va = train_val_split(data, 0.25, seed)
            save_dataset(tr, root / "blobs", "train")
            save_dataset(va, root / "blobs", "val")
        else:
            save_dataset(data, root / "blobs", "train")
        cfg = ClientConfig(client_id=cid, data_dir=str(root), cache_dir=str(root / ".cache"),
                           minibatch_delay_s=delay, **kw)
        agent = ClientAgent(cfg).start()
        agents.append(agent)
        return agent

    yield factory
    for a in agents:
        a.stop()


# ---- acceptance reporting: one PASS/FAIL line per numbered criterion

_criteria: dict[int, dict[str, tuple[bool, list]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    tests = _criteria.setdefault(int(mark.args[0]), {})
    ok, _ = tests.get(item.nodeid, (True, []))
    if rep.failed or rep.skipped:
        ok = False
    tests[item.nodeid] = (ok, list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        tests = _criteria[n].values()
        ok = all(passed for passed, _ in tests)
        measured = ", ".join(f"{k}={v}" for _, props in tests for k, v in props)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {measured}")
