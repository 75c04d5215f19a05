"""Round-based federation: broadcast, parallel local training, aggregation.

Each round the server broadcasts the current parameters and global
prototypes, every client trains locally (cross-entropy on the first view
of each sample, plus the prototype contrastive term against the global
set when enabled), runs a full-dataset prototype pass, and sends back its
parameters, local prototypes and dataset size.  The server then averages
prototypes per class over the clients holding that class and takes the
dataset-size-weighted mean of parameters, summing in ascending client id
so results do not depend on arrival order or thread scheduling.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import wire
from .augment import AugmentPolicy, Sample, make_views
from .autodiff import Tensor
from .data import ClientDataset
from .errors import (EmptyDataset, EmptyUpdates, LengthMismatch,
                     TransportError)
from .losses import (LossConfig, LossReport, apc_loss, apc_skip_count,
                     cross_entropy, fedproto_reg, total_loss)
from .model import (Model, ModelConfig, classify, encode, flatten_params,
                    model_from_params, unflatten_params)
from .prototypes import PrototypeSet, aggregate_global, empty_set, local_prototypes
from .transport import (InprocServerTransport, TcpClientConn,
                        TcpServerTransport)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalSpec:
    batch_size: int = 32
    learning_rate: float = 0.01
    local_epochs: int = 2


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    model_config: ModelConfig
    loss_config: LossConfig
    policy: AugmentPolicy
    hyper: LocalSpec
    rng: np.random.Generator
    # test hook: start local training from these params instead of the broadcast
    params_override: np.ndarray | None = None
    history: list[tuple[int, list[LossReport]]] = field(default_factory=list)


@dataclass(frozen=True)
class ServerState:
    round: int  # completed rounds so far
    params: np.ndarray
    global_protos: PrototypeSet
    registry: dict[int, int]  # client id -> declared dataset size


def _flat_batch(views: list[Sample]) -> np.ndarray:
    return np.stack([v.values.reshape(-1) for v in views])


def _selector(rows: list[int], width: int) -> Tensor:
    sel = np.zeros((len(rows), width))
    sel[np.arange(len(rows)), rows] = 1.0
    return Tensor(sel)


def _view_average(batch: int, n_views: int) -> Tensor:
    avg = np.zeros((batch, batch * n_views))
    for i in range(batch):
        avg[i, i * n_views:(i + 1) * n_views] = 1.0 / n_views
    return Tensor(avg)


def _train_batch(model: Model, client: ClientState, x_all: np.ndarray,
                 labels: np.ndarray, globals_: PrototypeSet) -> tuple[Model, LossReport]:
    cfg = client.loss_config
    batch = len(labels)
    n_views = client.policy.num_views

    with ad.GradTape() as tape:
        wm = model.watched(tape)
        z_all = encode(wm, Tensor(x_all))
        first_rows = [i * n_views for i in range(batch)]
        logits = classify(wm, ad.matmul(_selector(first_rows, batch * n_views), z_all))
        ce = cross_entropy(logits, labels)

        apc = Tensor(0.0)
        active, skipped = False, 0
        if cfg.apc_enabled and not globals_.is_empty():
            if cfg.apc_on_mean_features:
                feats = ad.matmul(_view_average(batch, n_views), z_all)
                apc_labels = labels
            else:
                feats = z_all
                apc_labels = np.repeat(labels, n_views)
            skipped = apc_skip_count(apc_labels, globals_)
            apc = apc_loss(feats, apc_labels, globals_, cfg.temperature)
            active = True

        aux = Tensor(0.0)
        if cfg.baseline_mode == "fedproto" and not globals_.is_empty():
            zbar = ad.matmul(_view_average(batch, n_views), z_all)
            aux = fedproto_reg(zbar, labels, globals_, cfg.fedproto_weight)

        loss = total_loss(ce, apc)
        if cfg.baseline_mode == "fedproto":
            loss = ad.add(loss, aux)
        grads = ad.backward(loss)
        new_params = ad.sgd_step(wm.param_tensors(), grads,
                                 client.hyper.learning_rate)

    report = LossReport(ce=ce.item(), apc=apc.item(), total=loss.item(),
                        batch_size=batch, apc_active=active,
                        apc_skipped=skipped, aux=aux.item())
    return model_from_params(client.model_config, new_params), report


def _prototype_pass(model: Model, client: ClientState) -> PrototypeSet:
    """Full-dataset pass after training: mean view features per sample,
    then per-class means."""
    ds = client.dataset
    mean_feats, labels = [], []
    bs = client.hyper.batch_size
    for start in range(0, len(ds), bs):
        chunk = range(start, min(start + bs, len(ds)))
        views: list[Sample] = []
        for i in chunk:
            views.extend(make_views(Sample(ds.x[i], int(ds.y[i]), ds.domain),
                                    client.policy, client.rng))
        feats = encode(model, Tensor(_flat_batch(views))).data
        n_views = client.policy.num_views
        for j, i in enumerate(chunk):
            rows = feats[j * n_views:(j + 1) * n_views]
            mean_feats.append(rows.mean(axis=0))
            labels.append(int(ds.y[i]))
    return local_prototypes(mean_feats, labels, owner=client.client_id)


def local_training(client: ClientState, params: np.ndarray,
                   globals_: PrototypeSet) -> tuple[np.ndarray, PrototypeSet,
                                                    list[LossReport]]:
    """One client's round: load params, train for the local epochs, then
    extract prototypes; eta=0 or zero epochs leave the params bit-intact."""
    if len(client.dataset) == 0:
        raise EmptyDataset(f"client {client.client_id} has no data")
    start = params if client.params_override is None else client.params_override
    model = unflatten_params(client.model_config, start)

    reports: list[LossReport] = []
    ds = client.dataset
    for _ in range(client.hyper.local_epochs):
        order = client.rng.permutation(len(ds))
        for lo in range(0, len(ds), client.hyper.batch_size):
            idx = order[lo:lo + client.hyper.batch_size]
            views: list[Sample] = []
            for i in idx:
                views.extend(make_views(Sample(ds.x[i], int(ds.y[i]), ds.domain),
                                        client.policy, client.rng))
            model, report = _train_batch(model, client, _flat_batch(views),
                                         ds.y[idx], globals_)
            reports.append(report)

    protos = _prototype_pass(model, client)
    return flatten_params(model), protos, reports


def aggregate_models(updates: list[tuple[np.ndarray, int]]) -> np.ndarray:
    """Dataset-size-weighted average of flat parameter vectors."""
    if not updates:
        raise EmptyUpdates("no client updates to aggregate")
    length = updates[0][0].size
    if any(vec.size != length for vec, _ in updates):
        raise LengthMismatch("parameter vectors differ in length")
    if any(size < 1 for _, size in updates):
        raise ValueError("dataset sizes must be >= 1")
    total = float(sum(size for _, size in updates))
    acc = np.zeros(length)
    for vec, size in updates:
        acc = acc + (size / total) * vec
    return acc


def client_worker(client: ClientState, conn) -> None:
    """Loop run on the client's own thread until SHUTDOWN arrives."""
    try:
        while True:
            msg = wire.decode(conn.recv())
            if msg.kind == wire.SHUTDOWN:
                break
            params, protos, reports = local_training(client, msg.params,
                                                     msg.protos)
            client.history.append((msg.round, reports))
            conn.send(wire.encode(wire.RoundMessage(
                kind=wire.UPDATE, round=msg.round, params=params,
                protos=protos, dataset_size=len(client.dataset))))
    except Exception as e:  # fail-fast: surface on the server side
        logger.error("client %d failed: %r", client.client_id, e)
        conn.abort(e)
    finally:
        conn.close()


def run_round(state: ServerState, transport, *,
              proto_mode: str = "average") -> ServerState:
    """Broadcast, synchronous barrier on all updates, aggregate."""
    rnd = state.round + 1
    transport.broadcast(wire.encode(wire.RoundMessage(
        kind=wire.BROADCAST, round=rnd, params=state.params,
        protos=state.global_protos)))

    msgs = []
    for frame in transport.gather():
        msg = wire.decode(frame)
        if msg.kind != wire.UPDATE or msg.round != rnd:
            raise TransportError(f"unexpected message kind={msg.kind} "
                                 f"round={msg.round} during round {rnd}")
        owner = msg.protos.owner
        if owner not in state.registry:
            raise TransportError(f"update from unregistered client {owner!r}")
        if msg.dataset_size != state.registry[owner]:
            raise TransportError(
                f"client {owner} declared size {state.registry[owner]} but "
                f"sent {msg.dataset_size}")
        if msg.params.size != state.params.size:
            raise LengthMismatch(
                f"client {owner} sent {msg.params.size} params, expected "
                f"{state.params.size}")
        msgs.append(msg)

    msgs.sort(key=lambda m: m.protos.owner)
    new_protos = aggregate_global([m.protos for m in msgs], mode=proto_mode)
    new_params = aggregate_models([(m.params, m.dataset_size) for m in msgs])
    return ServerState(rnd, new_params, new_protos, state.registry)


def run(initial_params: np.ndarray, clients: list[ClientState], rounds: int,
        *, transport: str = "inproc", tcp_port: int = 0,
        proto_mode: str = "average", eval_hook=None) -> ServerState:
    """Drive the full loop over a chosen transport; returns the final state.

    eval_hook(round_index, state) runs on the server thread after each
    round's aggregation.
    """
    registry = {c.client_id: len(c.dataset) for c in clients}
    state = ServerState(0, np.asarray(initial_params, dtype=np.float64),
                        empty_set(), registry)

    ordered = sorted(clients, key=lambda c: c.client_id)
    threads: list[threading.Thread] = []
    if transport == "inproc":
        server_tr = InprocServerTransport([c.client_id for c in ordered])
        conns = {c.client_id: server_tr.client_conn(c.client_id)
                 for c in ordered}
    elif transport == "tcp":
        server_tr = TcpServerTransport(len(ordered), port=tcp_port)
        conns = {c.client_id: TcpClientConn(c.client_id, "127.0.0.1",
                                            server_tr.port)
                 for c in ordered}
    else:
        raise ValueError(f"unknown transport: {transport}")

    for c in ordered:
        t = threading.Thread(target=client_worker, args=(c, conns[c.client_id]),
                             name=f"client-{c.client_id}", daemon=True)
        threads.append(t)
        t.start()
    if transport == "tcp":
        server_tr.accept_all()

    try:
        for _ in range(rounds):
            state = run_round(state, server_tr, proto_mode=proto_mode)
            if eval_hook is not None:
                eval_hook(state.round, state)
    finally:
        try:
            server_tr.broadcast(wire.encode(wire.RoundMessage(
                kind=wire.SHUTDOWN, round=state.round)))
        except Exception:  # dead connections during fail-fast teardown
            pass
        server_tr.close()
        for t in threads:
            t.join(timeout=10.0)
    return state
