import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from epbalance.core import ClusterSpec, EfficiencyCurve

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_spec(ep=2, num_experts=4, top_k=1, n_sat=1.0, **kw):
    base = dict(ep=ep, num_experts=num_experts, top_k=top_k, hidden_bytes=4096.0, expert_weight_bytes=1e8,
                per_token_flops=1e8, peak_flops=1e15, net_bandwidth=9e11,
                efficiency_curve=EfficiencyCurve(n_sat=n_sat))
    base.update(kw)
    return ClusterSpec(**base)


@pytest.fixture
def spec2():
    return make_spec()


@pytest.fixture
def hot_spec():
    return make_spec(ep=2, num_experts=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
