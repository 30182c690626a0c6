import numpy as np
import pytest


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    if not x.flags.c_contiguous:
        raise ValueError("central_difference needs a contiguous array")
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_network():
    from univmatch.network import NetworkConfig

    return NetworkConfig(
        encoder_widths=[8, 16],
        deform_point_widths=[8, 16],
        deform_head_widths=[16],
        latent=8,
        rounds=2,
        score_hidden=8,
    )


@pytest.fixture(scope="session")
def tiny_data():
    """Small labelled synthetic set: (manifest, prepared train, prepared test)."""
    from univmatch.dataset import SyntheticConfig, generate_synthetic
    from univmatch.training import prepare_instances

    res = generate_synthetic(
        SyntheticConfig(points=6, instances=12, test_instances=4, amplitude=0.05, noise=0.002, seed=3)
    )
    m = res.manifest
    return m, prepare_instances(m, m.split("train")), prepare_instances(m, m.split("test"))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE_LINES.append(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
