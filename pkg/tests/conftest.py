import numpy as np
import pytest

from splitlora.lora import AdapterSet, LoraAdapter
from splitlora.model import (build_model, client_backward, client_forward, compute_loss, init_adapters,
                             server_backward, server_forward, split, toy_architecture)
from splitlora.numerics import SeededRng


def randomize(adapters: AdapterSet, rng: SeededRng, sigma: float = 0.3) -> AdapterSet:
    """Same structure with nonzero A and B, so every gradient path is exercised."""
    out = []
    for a in adapters:
        A = sigma * rng.normal(a.A.size).reshape(a.A.shape)
        B = sigma * rng.normal(a.B.size).reshape(a.B.shape)
        out.append(LoraAdapter(a.site_id, A, B, a.alpha))
    return AdapterSet(tuple(out))


class TinySplit:
    """A 4-block toy model with dims <= 16, cut at ``cut``, two clients with distinct adapters."""

    def __init__(self, cut: int, seed: int = 0, block: str = "simplified_transformer_block"):
        rng = SeededRng(seed)
        self.model = build_model(toy_architecture(12, 8, 16, 4, block), 12, 4, None, rng.derive("base"))
        self.split = split(self.model, cut)
        full = init_adapters(self.model, 2, None, 0.02, rng.derive("ad"))
        self.client_ads = [randomize(full.subset(self.split.client_site_ids), rng.derive("c", i))
                           for i in range(2)]
        self.server_ads = randomize(full.subset(self.split.server_site_ids), rng.derive("s"))
        data = rng.derive("data")
        self.xs = [data.next_u64(3 * 4).astype(np.int64).reshape(3, 4) % 12 for _ in range(2)]
        self.ys = [data.next_u64(3 * 4).astype(np.int64).reshape(3, 4) % 12 for _ in range(2)]
        self.weights = [0.4, 0.6]

    def loss_and_grads(self, client_ads=None, server_ads=None):
        client_ads = client_ads or self.client_ads
        server_ads = server_ads or self.server_ads
        outs, caches = [], []
        for ads, x in zip(client_ads, self.xs):
            s, c = client_forward(self.split, ads, x)
            outs.append(s)
            caches.append(c)
        rows = [s.shape[0] for s in outs]
        bounds = np.cumsum([0, *rows])
        logits, sc = server_forward(self.split, server_ads, np.concatenate(outs))
        labels = np.concatenate([y.reshape(-1) for y in self.ys])
        rep, g = compute_loss(logits, labels, list(zip(bounds[:-1], bounds[1:])), self.weights)
        sgrads, dS = server_backward(self.split, server_ads, sc, g, rows)
        cgrads = [client_backward(self.split, ads, c, ds) for ads, c, ds in zip(client_ads, caches, dS)]
        return rep.mean_ce, cgrads, sgrads


def rel_err(got, ref) -> float:
    """Largest absolute deviation relative to the largest reference entry."""
    scale = max(float(np.abs(ref).max()), 1e-12)
    return float(np.abs(got - ref).max()) / scale


@pytest.fixture
def tiny_split():
    return TinySplit


# acceptance verdicts, filled in by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
