import numpy as np
import pytest

from monosurv.network import NetworkConfig, init_params

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}"
    if detail:
        line += f" -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_net(seed, head="survival", p=None, cov=None, mixed=None, scale=1.0, **kw):
    """A randomly shaped, randomly initialised net with perturbed biases."""
    rng = np.random.default_rng(seed)
    p = p or int(rng.integers(1, 4))
    cov = cov if cov is not None else tuple(int(w) for w in rng.integers(1, 6, size=rng.integers(0, 3)))
    mixed = mixed or tuple(int(w) for w in rng.integers(1, 6, size=rng.integers(1, 4)))
    cfg = NetworkConfig(covariate_dim=p, cov_widths=cov, mixed_widths=mixed, head=head, **kw)
    params = init_params(cfg, int(rng.integers(2 ** 31)))
    theta = params.flat()
    noise = scale * rng.normal(size=theta.size)
    return params.with_flat(theta + 0.3 * noise)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
