import contextlib
import socket
import threading
import time

import numpy as np
import pytest
import uvicorn

from fusebed.data import SynthConfig, generate_synthetic
from fusebed.experiments import build_vocab
from fusebed.model import HybridRetriever, ModelConfig

TINY = dict(d=8, n_layers=1, n_heads=2, ff_mult=2, fusion_layers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """60 items, 12 in test; frame width 6."""
    return generate_synthetic(SynthConfig(n_items=60, n_topics=4, frame_width=6, frames_min=3,
                                          frames_max=6, vocab_size=80, seed=3))


@pytest.fixture(scope="session")
def small_vocab(small_dataset):
    return build_vocab(small_dataset, "OS")


def tiny_model(mode, vocab, seed=0, **overrides):
    cfg = ModelConfig(mode=mode, frame_width=6, **{**TINY, **overrides})
    return HybridRetriever(cfg, vocab, seed)


@contextlib.contextmanager
def live_server(app):
    """Run ``app`` under uvicorn on a free local port; yields the base URL."""
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 20
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.02)
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=10)


ACCEPTANCE: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
