from pathlib import Path

import numpy as np
import pytest

from stallbound.model import ServerParams, SystemConfig, VideoFile, load_config

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def small_cfg():
    return load_config(CONFIGS / "small.cfg")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_server_cfg(lam=0.5, L=3, alphas=(10.0, 10.0), beta=0.01, k=1, tau=1.0, ds=1.0, x=2.0, theta=0.5):
    servers = tuple(ServerParams(a, beta) for a in alphas)
    files = (VideoFile(L, k, len(alphas), lam, id="0"),)
    return SystemConfig(servers=servers, files=files, tau=tau, ds=ds, x=x, theta=theta)


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.when == "call" or report.failed:
        ok = report.passed and report.when == "call"
        _ACCEPTANCE[key] = (ok, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        ok, title, detail = _ACCEPTANCE[key]
        line = f"criterion {key:>2} {title}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
