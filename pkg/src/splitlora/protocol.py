"""The split federated LoRA round loop, its transport, and the two baselines.

One SplitLoRA round: every client runs its part of the model on a fresh
mini-batch (a1) and ships activations plus labels to the server (a2); the
server runs its part on the client-ordered concatenation, computes the
loss, steps its adapters (a3) and returns each client's slice of the
activation gradient (a4); clients finish backpropagation and step their
own adapters (a5). Every ``agg_interval`` rounds the clients upload their
adapters (b1), the aggregator averages A and B separately with weights
|D_i|/|D| (b2) and broadcasts the result, which every client adopts (b3).

Clients run one after another in ascending id; nothing depends on that
order except the fixed reduction order, and the latency model treats
client phases as parallel.
"""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TrainingConfig
from .costs import CostLedger, RoundTrace, flops_of_pass, payload_bytes, round_latency
from .data import Dataset, data_weights, gen_synthetic, partition, sample_minibatch
from .errors import SplitLoraError, StateError, StructureError
from .lora import AdapterSet, aggregate, apply_sgd, count_trainable
from .model import (BaseModel, SplitModel, LossReport, build_model, client_backward, client_forward,
                    compute_loss, evaluate, init_adapters, model_backward, model_forward,
                    server_backward, server_forward, split)
from .numerics import SeededRng

log = logging.getLogger(__name__)


def client_server_link(client_id: int) -> str:
    return f"client{client_id}-server"


def client_aggregator_link(client_id: int) -> str:
    return f"client{client_id}-aggregator"


# ---------------------------------------------------------------- messages

@dataclass(frozen=True, eq=False)
class Activations:
    client_id: int
    round: int
    s: np.ndarray
    y: np.ndarray

    @property
    def link_id(self) -> str:
        return client_server_link(self.client_id)

    def payloads(self):
        return (self.s, self.y)


@dataclass(frozen=True, eq=False)
class ActivationGrads:
    client_id: int
    round: int
    ds: np.ndarray

    @property
    def link_id(self) -> str:
        return client_server_link(self.client_id)

    def payloads(self):
        return (self.ds,)


@dataclass(frozen=True, eq=False)
class AdapterUpload:
    client_id: int
    round: int
    adapters: AdapterSet

    @property
    def link_id(self) -> str:
        return client_aggregator_link(self.client_id)

    def payloads(self):
        return (self.adapters,)


@dataclass(frozen=True, eq=False)
class AdapterBroadcast:
    """Aggregated adapters on one client's downlink."""
    client_id: int
    round: int
    adapters: AdapterSet

    @property
    def link_id(self) -> str:
        return client_aggregator_link(self.client_id)

    def payloads(self):
        return (self.adapters,)


@dataclass(frozen=True)
class MessageRecord:
    kind: str
    round: int
    client_id: int
    link_id: str
    nbytes: int


class Transport:
    """In-memory FIFO that books every message's wire size on the ledger."""

    def __init__(self, ledger: CostLedger, bytes_per_element: int = 4, header_bytes: int = 64):
        self.ledger = ledger
        self.bytes_per_element = bytes_per_element
        self.header_bytes = header_bytes
        self.queue: list = []
        self.sent: list[MessageRecord] = []

    def send(self, msg) -> int:
        n = payload_bytes(msg, self.bytes_per_element, self.header_bytes)
        self.ledger.add_bytes(msg.link_id, n)
        self.queue.append(msg)
        self.sent.append(MessageRecord(type(msg).__name__, msg.round, msg.client_id, msg.link_id, n))
        return n

    def receive(self, kind: type, client_id: int | None = None):
        for i, msg in enumerate(self.queue):
            if isinstance(msg, kind) and (client_id is None or msg.client_id == client_id):
                return self.queue.pop(i)
        raise StateError(f"no pending {kind.__name__} message"
                         + ("" if client_id is None else f" for client {client_id}"))

    def bytes_by_client(self, kind: type, n_clients: int) -> list[int]:
        out = [0] * n_clients
        for rec in self.sent:
            if rec.kind == kind.__name__:
                out[rec.client_id] += rec.nbytes
        return out


# ---------------------------------------------------------------- nodes

@dataclass(eq=False)
class ClientNode:
    client_id: int
    dataset: Dataset
    adapters: AdapterSet
    rng: SeededRng
    lr: float


@dataclass(eq=False)
class ServerNode:
    adapters: AdapterSet
    lr: float


@dataclass(eq=False)
class AggregatorNode:
    adapters: AdapterSet | None = None
    round: int | None = None


@dataclass
class RoundOutcome:
    loss: LossReport
    trace: RoundTrace


@dataclass
class TrainingLog:
    mode: str
    records: list[dict] = field(default_factory=list)
    final_adapters: AdapterSet | None = None
    client_adapters: list[AdapterSet] = field(default_factory=list)
    server_adapters: AdapterSet | None = None
    checkpoints: list[tuple[int, str, AdapterSet]] = field(default_factory=list)
    aggregation_rounds: list[int] = field(default_factory=list)
    messages: list[MessageRecord] = field(default_factory=list)
    trainable: dict[str, int] = field(default_factory=dict)
    final_eval_ce: float | None = None
    ledger: CostLedger = field(default_factory=CostLedger)


@contextmanager
def _phase(t: int, name: str):
    try:
        yield
    except SplitLoraError as exc:
        raise type(exc)(f"round {t}, phase {name}: {exc}") from exc


# ---------------------------------------------------------------- setup

@dataclass(eq=False)
class Experiment:
    config: TrainingConfig
    model: BaseModel
    split_model: SplitModel
    parts: list[Dataset]
    eval_set: Dataset
    initial_adapters: AdapterSet
    root: SeededRng

    @property
    def weights(self) -> list[float]:
        return data_weights(self.parts)

    def client_rng(self, client_id: int) -> SeededRng:
        return self.root.derive("client", client_id)


def build_experiment(config: TrainingConfig) -> Experiment:
    """Model, data and initial adapters; every random stream derives from ``config.seed``."""
    root = SeededRng(config.seed)
    mc, dc = config.model, config.data
    model = build_model(mc.architecture(), mc.vocab_size, mc.seq_len, mc.init_sigma, root.derive("base"))
    adapters = init_adapters(model, config.rank, config.alpha, config.lora_sigma, root.derive("adapters"),
                             targets=mc.lora_targets, include_embedding=mc.lora_on_embedding,
                             include_head=mc.lora_on_head)
    full = gen_synthetic(dc.task, mc.vocab_size, mc.seq_len, dc.n_train + dc.n_eval, root.derive("data"),
                         groups=dc.groups, noise=dc.noise)
    train = full.take(np.arange(dc.n_train))
    eval_set = full.take(np.arange(dc.n_train, dc.n_train + dc.n_eval))
    parts = partition(train, config.num_clients, dc.partition_spec, root.derive("partition"))
    return Experiment(config, model, split(model, config.cut_layer), parts, eval_set, adapters, root)


def _record(t: int, loss: LossReport, ledger: CostLedger, aggregated: bool) -> dict:
    return {
        "round": t,
        "mean_ce": loss.mean_ce,
        "ppl": loss.ppl,
        "per_client_ce": list(loss.per_client_mean_ce),
        "cum_bytes": dict(ledger.bytes),
        "cum_flops": dict(ledger.flops),
        "sim_time_s": ledger.sim_time_s,
        "aggregated": aggregated,
    }


def _book_flops(ledger: CostLedger, trace: RoundTrace, client_ids: Sequence[int]) -> None:
    for pos, cid in enumerate(client_ids):
        ledger.add_flops(f"client{cid}", trace.a1[pos] + trace.a5[pos])
    ledger.add_flops("server", trace.a3)
    if trace.has_aggregation:
        ledger.add_flops("aggregator", trace.b2)


# ---------------------------------------------------------------- SplitLoRA

def run_round(t: int, clients: Sequence[ClientNode], server: ServerNode, split_model: SplitModel,
              transport: Transport, config: TrainingConfig,
              weights: Sequence[float] | None = None) -> RoundOutcome:
    """One split fine-tuning round (a1-a5). ``weights`` default to |D_i|/|D|."""
    clients = sorted(clients, key=lambda c: c.client_id)
    if weights is None:
        weights = data_weights([c.dataset for c in clients])
    caches = {}
    a1 = []
    with _phase(t, "a1/a2 client forward"):
        for c in clients:
            batch = sample_minibatch(c.dataset, config.batch_size, c.rng)
            s, cache = client_forward(split_model, c.adapters, batch.x)
            caches[c.client_id] = cache
            a1.append(flops_of_pass(split_model.client_part, s.shape[0], "forward", c.adapters))
            transport.send(Activations(c.client_id, t, s, batch.y.reshape(-1)))
    with _phase(t, "a3 server forward/backward"):
        acts = [transport.receive(Activations, c.client_id) for c in clients]
        rows = [m.s.shape[0] for m in acts]
        bounds = np.cumsum([0, *rows])
        S = np.concatenate([m.s for m in acts])
        labels = np.concatenate([m.y for m in acts])
        logits, scache = server_forward(split_model, server.adapters, S)
        report, g_logits = compute_loss(logits, labels, list(zip(bounds[:-1], bounds[1:])), weights)
        sgrads, dS = server_backward(split_model, server.adapters, scache, g_logits, rows)
        server.adapters = apply_sgd(server.adapters, sgrads, server.lr)
        total = int(bounds[-1])
        a3 = (flops_of_pass(split_model.server_part, total, "forward", server.adapters)
              + flops_of_pass(split_model.server_part, total, "backward", server.adapters))
    with _phase(t, "a4 gradient downlink"):
        for m, ds in zip(acts, dS):
            transport.send(ActivationGrads(m.client_id, t, ds))
    a5 = []
    with _phase(t, "a5 client backward"):
        for c in clients:
            msg = transport.receive(ActivationGrads, c.client_id)
            grads = client_backward(split_model, c.adapters, caches[c.client_id], msg.ds)
            c.adapters = apply_sgd(c.adapters, grads, c.lr)
            a5.append(flops_of_pass(split_model.client_part, msg.ds.shape[0], "backward", c.adapters))
    trace = RoundTrace(a1=a1, a2=transport.bytes_by_client(Activations, len(clients)), a3=a3,
                       a4=transport.bytes_by_client(ActivationGrads, len(clients)), a5=a5)
    return RoundOutcome(report, trace)


def run_aggregation(t: int, clients: Sequence[ClientNode], aggregator: AggregatorNode,
                    transport: Transport, weights: Sequence[float] | None = None) -> AdapterSet:
    """Upload (b1), separate A/B weighted averaging (b2), broadcast and adoption (b3)."""
    clients = sorted(clients, key=lambda c: c.client_id)
    if weights is None:
        weights = data_weights([c.dataset for c in clients])
    with _phase(t, "b1 adapter upload"):
        for c in clients:
            transport.send(AdapterUpload(c.client_id, t, c.adapters))
        uploads = [transport.receive(AdapterUpload, c.client_id).adapters for c in clients]
    with _phase(t, "b2 aggregation"):
        merged = aggregate(uploads, weights)
        aggregator.adapters, aggregator.round = merged, t
    with _phase(t, "b3 broadcast"):
        for c in clients:
            transport.send(AdapterBroadcast(c.client_id, t, merged))
        for c in clients:
            c.adapters = transport.receive(AdapterBroadcast, c.client_id).adapters
    return merged


def _add_aggregation_trace(trace: RoundTrace, transport: Transport, n: int) -> None:
    trace.b1 = transport.bytes_by_client(AdapterUpload, n)
    trace.b2 = 0
    trace.b3 = transport.bytes_by_client(AdapterBroadcast, n)


def _checkpoint_due(config: TrainingConfig, t: int) -> bool:
    return config.checkpoint_every > 0 and t % config.checkpoint_every == 0


def _init_ledger(entities: Sequence[str], links: Sequence[str]) -> CostLedger:
    ledger = CostLedger()
    for e in entities:
        ledger.add_flops(e, 0)
    for link in links:
        ledger.add_bytes(link, 0)
    return ledger


def run_training(config: TrainingConfig, experiment: Experiment | None = None) -> TrainingLog:
    """SplitLoRA for ``config.rounds`` rounds, aggregating when ``t % agg_interval == 0``."""
    exp = experiment or build_experiment(config)
    sm = exp.split_model
    client_ids = range(config.num_clients)
    client_init = exp.initial_adapters.subset(sm.client_site_ids)
    clients = [ClientNode(i, exp.parts[i], client_init, exp.client_rng(i), config.lr_client)
               for i in client_ids]
    server = ServerNode(exp.initial_adapters.subset(sm.server_site_ids), config.lr_server)
    aggregator = AggregatorNode()
    weights = exp.weights
    ledger = _init_ledger([*(f"client{i}" for i in client_ids), "server", "aggregator"],
                          [f(i) for i in client_ids for f in (client_server_link, client_aggregator_link)])
    out = TrainingLog("splitlora", ledger=ledger)
    cc = config.costs
    for t in range(1, config.rounds + 1):
        transport = Transport(ledger, cc.bytes_per_element, cc.header_bytes)
        outcome = run_round(t, clients, server, sm, transport, config, weights)
        aggregated = t % config.agg_interval == 0
        if aggregated:
            run_aggregation(t, clients, aggregator, transport, weights)
            _add_aggregation_trace(outcome.trace, transport, len(clients))
            out.aggregation_rounds.append(t)
        _book_flops(ledger, outcome.trace, client_ids)
        ledger.advance(round_latency(outcome.trace, cc.compute, cc.links))
        out.records.append(_record(t, outcome.loss, ledger, aggregated))
        out.messages.extend(transport.sent)
        if _checkpoint_due(config, t):
            for c in clients:
                out.checkpoints.append((t, f"client{c.client_id}", c.adapters))
            out.checkpoints.append((t, "server", server.adapters))
    out.client_adapters = [c.adapters for c in clients]
    out.server_adapters = server.adapters
    out.final_adapters = aggregate(out.client_adapters, weights).union(server.adapters)
    n_client, n_server = count_trainable(client_init), count_trainable(server.adapters)
    out.trainable = {"client": n_client, "server": n_server, "total": n_client + n_server}
    out.final_eval_ce = evaluate(exp.model, out.final_adapters, exp.eval_set.x, exp.eval_set.y)
    return out


# ---------------------------------------------------------------- baselines

def _local_step(model: BaseModel, adapters: AdapterSet, dataset: Dataset, b: int, rng: SeededRng,
                lr: float) -> tuple[AdapterSet, float, int]:
    batch = sample_minibatch(dataset, b, rng)
    logits, cache = model_forward(model, adapters, batch.x)
    report, g = compute_loss(logits, batch.y.reshape(-1), [(0, logits.shape[0])], [1.0])
    grads = model_backward(model, adapters, cache, g)
    rows = logits.shape[0]
    flops = (flops_of_pass(model.layers, rows, "forward", adapters)
             + flops_of_pass(model.layers, rows, "backward", adapters))
    return apply_sgd(adapters, grads, lr), report.mean_ce, flops


def _local_trace(flops: Sequence[int]) -> RoundTrace:
    n = len(flops)
    return RoundTrace(a1=list(flops), a2=[0] * n, a3=0, a4=[0] * n, a5=[0] * n)


def run_baseline_cenlora(config: TrainingConfig, experiment: Experiment | None = None) -> TrainingLog:
    """One client server trains the unsplit model on the pooled client data.

    Each round draws ``num_clients * batch_size`` samples, the same number
    the SplitLoRA server sees, using client 0's random stream; all adapters
    step with ``lr_client``.
    """
    exp = experiment or build_experiment(config)
    pooled = exp.parts[0] if len(exp.parts) == 1 else Dataset.concat(exp.parts)
    rng = exp.client_rng(0)
    adapters = exp.initial_adapters
    b = config.num_clients * config.batch_size
    ledger = _init_ledger(["client0"], [])
    out = TrainingLog("cenlora", ledger=ledger)
    cc = config.costs
    for t in range(1, config.rounds + 1):
        with _phase(t, "centralized step"):
            adapters, ce, flops = _local_step(exp.model, adapters, pooled, b, rng, config.lr_client)
        trace = _local_trace([flops])
        ledger.add_flops("client0", flops)
        ledger.advance(round_latency(trace, cc.compute, cc.links))
        out.records.append(_record(t, LossReport(ce, math.exp(ce), (ce,), (1.0,)), ledger, False))
        if _checkpoint_due(config, t):
            out.checkpoints.append((t, "full", adapters))
    out.final_adapters = adapters
    out.client_adapters = [adapters]
    n = count_trainable(adapters)
    out.trainable = {"client": n, "server": 0, "total": n}
    out.final_eval_ce = evaluate(exp.model, adapters, exp.eval_set.x, exp.eval_set.y)
    return out


def run_baseline_fedlora(config: TrainingConfig, experiment: Experiment | None = None) -> TrainingLog:
    """Every client trains all adapters of the unsplit model on its own data;
    the aggregator averages them every ``agg_interval`` rounds."""
    exp = experiment or build_experiment(config)
    client_ids = range(config.num_clients)
    clients = [ClientNode(i, exp.parts[i], exp.initial_adapters, exp.client_rng(i), config.lr_client)
               for i in client_ids]
    aggregator = AggregatorNode()
    weights = exp.weights
    ledger = _init_ledger([*(f"client{i}" for i in client_ids), "aggregator"],
                          [client_aggregator_link(i) for i in client_ids])
    out = TrainingLog("fedlora", ledger=ledger)
    cc = config.costs
    for t in range(1, config.rounds + 1):
        transport = Transport(ledger, cc.bytes_per_element, cc.header_bytes)
        losses, flops = [], []
        with _phase(t, "local steps"):
            for c in clients:
                c.adapters, ce, f = _local_step(exp.model, c.adapters, c.dataset, config.batch_size,
                                                c.rng, c.lr)
                losses.append(ce)
                flops.append(f)
        mean = 0.0
        for w, ce in zip(weights, losses):
            mean += w * ce
        trace = _local_trace(flops)
        aggregated = t % config.agg_interval == 0
        if aggregated:
            run_aggregation(t, clients, aggregator, transport, weights)
            _add_aggregation_trace(trace, transport, len(clients))
            out.aggregation_rounds.append(t)
        for i in client_ids:
            ledger.add_flops(f"client{i}", flops[i])
        if aggregated:
            ledger.add_flops("aggregator", trace.b2)
        ledger.advance(round_latency(trace, cc.compute, cc.links))
        out.records.append(_record(t, LossReport(mean, math.exp(mean), tuple(losses), tuple(weights)),
                                   ledger, aggregated))
        out.messages.extend(transport.sent)
        if _checkpoint_due(config, t):
            for c in clients:
                out.checkpoints.append((t, f"client{c.client_id}", c.adapters))
    out.client_adapters = [c.adapters for c in clients]
    out.final_adapters = aggregate(out.client_adapters, weights)
    n = count_trainable(exp.initial_adapters)
    out.trainable = {"client": n, "server": 0, "total": n}
    out.final_eval_ce = evaluate(exp.model, out.final_adapters, exp.eval_set.x, exp.eval_set.y)
    return out


RUNNERS = {
    "splitlora": run_training,
    "cenlora": run_baseline_cenlora,
    "fedlora": run_baseline_fedlora,
}
