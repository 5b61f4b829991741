import numpy as np
import pytest


def direct_conv(x, kernel, bias):
    """Quadruple-loop same-padded cross-correlation; the conv oracle."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    p = (k - 1) // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xc = y + dy - p, xx + dx - p
                            if 0 <= yy < h and 0 <= xc < w:
                                acc += kernel[o, c, dy, dx] * x[c, yy, xc]
                out[o, y, xx] = acc
    return out


def central_diff(f, arr, idx, eps=1e-5):
    """d f() / d arr[idx] by central differences; restores arr."""
    orig = arr[idx]
    arr[idx] = orig + eps
    up = f()
    arr[idx] = orig - eps
    down = f()
    arr[idx] = orig
    return (up - down) / (2 * eps)


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


# acceptance support: one desk model per session and a per-criterion report

ACCEPTANCE_LINES: list[str] = []


def pytest_addoption(parser):
    parser.addoption("--full-scale", action="store_true", help="include the 100x100 grid in the scalability check")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Desk:
    """The standard desk experiment: 8x8 binary, 5 shapes x 100 placements, 50/50 split."""

    DATA_SEED = 7
    TRAIN_SEED = 1
    EVAL_SEED = 3

    def __init__(self):
        import time

        from nca_sensing.training import TrainConfig, split_dataset, train
        from nca_sensing.world import default_shapes, generate_dataset

        self.data = generate_dataset(default_shapes(), 100, (8, 8), "binary", seed=self.DATA_SEED)
        self.train_set, self.test_set = split_dataset(self.data, 0.5, seed=self.DATA_SEED)
        self.cfg = TrainConfig(total_steps=5000, lr=2e-3, lr_decay_at=2500, seed=self.TRAIN_SEED)
        start = time.perf_counter()
        self.model, self.curve = train(self.train_set, self.cfg)
        self.train_seconds = time.perf_counter() - start


@pytest.fixture(scope="session")
def desk():
    return Desk()
