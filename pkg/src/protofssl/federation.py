"""Round-based protocol: client sampling, helper selection, local training
with prototype pseudo-labels, FedAvg/FedProx aggregation and the prototype
store.

Only :class:`~protofssl.numerics.ParameterSet` and
:class:`~protofssl.protonet.PrototypeSet` values leave a client.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import cost
from .data import ClientData
from .errors import ConfigurationError, NonFiniteError, SizingError
from .numerics import NetworkConfig, OptimizerConfig, ParameterSet, backward, forward, rmsprop_step
from .protonet import (PrototypeSet, SslHyperparams, build_prototypes, episode_loss_and_grads,
                       pseudo_label)

log = logging.getLogger(__name__)

CLIENT_MODES = ("protofssl", "global_prototype_alt", "labeled_only")
AGGREGATIONS = ("fedavg", "fedprox")

# sub-generator tags; see ServerState.rng
_CLIENT_SAMPLING, _HELPER_SAMPLING, _LOCAL_TRAINING, _NOISE = 1, 2, 3, 4


@dataclass
class RoundConfig:
    total_clients: int = 20
    active_per_round: int = 5
    helper_count: int = 5
    helper_update_interval: int = 1
    local_epochs: int = 1
    total_rounds: int = 60
    noise_sigma: float = 0.0
    client_mode: str = "protofssl"
    aggregation: str = "fedavg"
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.active_per_round <= self.total_clients:
            raise ConfigurationError("need 1 <= active_per_round <= total_clients")
        if not 0 <= self.helper_count <= self.total_clients:
            raise ConfigurationError("need 0 <= helper_count <= total_clients")
        if self.helper_update_interval < 1 or self.local_epochs < 1 or self.total_rounds < 0:
            raise ConfigurationError("helper_update_interval and local_epochs must be >= 1, total_rounds >= 0")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.client_mode not in CLIENT_MODES:
            raise ConfigurationError(f"client_mode must be one of {CLIENT_MODES}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


@dataclass
class LocalSetup:
    """Everything a client needs besides its data and the broadcast state."""

    network: NetworkConfig
    optimizer: OptimizerConfig
    ssl: SslHyperparams
    epochs: int = 1


@dataclass
class ServerState:
    global_params: ParameterSet
    seed: int = 0
    round: int = 0
    prototype_store: dict[int, PrototypeSet] = field(default_factory=dict)
    prev_active: list[int] = field(default_factory=list)
    helpers: list[PrototypeSet] = field(default_factory=list)
    helpers_round: int | None = None

    def rng(self, purpose: int, *extra: int) -> np.random.Generator:
        """Generator keyed by (seed, round, purpose, extra): independent of call order."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.round, purpose, *extra]))


@dataclass
class ClientUpdate:
    client_id: int
    params: ParameterSet
    protos: PrototypeSet
    weight: int
    labeled_loss: float
    unlabeled_loss: float


@dataclass
class RoundResult:
    round: int
    active: list[int]
    helper_owners: list[int]
    labeled_loss: float
    unlabeled_loss: float
    flops: float
    bytes: float


def select_clients(server: ServerState, m: int, total_clients: int) -> list[int]:
    if not 1 <= m <= total_clients:
        raise ConfigurationError(f"cannot sample {m} of {total_clients} clients")
    rng = server.rng(_CLIENT_SAMPLING)
    return sorted(int(i) for i in rng.choice(total_clients, size=m, replace=False))


def select_helpers(server: ServerState, prev_active, h: int, interval: int = 1) -> list[PrototypeSet]:
    """Helper prototype sets for the current round.

    Sampled from the previous round's active clients, topped up from the
    rest of the store when they are too few. The list is reused for
    ``interval`` rounds; an empty list is always refreshed.
    """
    if h == 0 or not server.prototype_store:
        server.helpers, server.helpers_round = [], None
        return []
    if (server.helpers and server.helpers_round is not None
            and server.round - server.helpers_round < interval):
        return list(server.helpers)
    rng = server.rng(_HELPER_SAMPLING)
    primary = sorted(c for c in set(prev_active) if c in server.prototype_store)
    if len(primary) >= h:
        chosen = [primary[i] for i in rng.choice(len(primary), size=h, replace=False)]
    else:
        rest = sorted(c for c in server.prototype_store if c not in set(primary))
        extra = min(h - len(primary), len(rest))
        chosen = primary + [rest[i] for i in rng.choice(len(rest), size=extra, replace=False)]
    server.helpers = [server.prototype_store[c] for c in chosen]
    server.helpers_round = server.round
    return list(server.helpers)


def _check_finite(value, what, round):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what} in round {round}", round=round)


def _sample_episode(client: ClientData, hp: SslHyperparams, rng):
    sup, sup_y, qry, qry_y = [], [], [], []
    need = hp.n_support + hp.n_query_labeled
    for k in sorted(client.labeled):
        x = client.labeled[k]
        if len(x) == 0:
            continue
        if len(x) < need:
            raise SizingError(f"client {client.client_id} class {k}: {len(x)} labeled samples, "
                              f"need {need} for support+query")
        perm = rng.permutation(len(x))
        sup.append(x[perm[:hp.n_support]])
        qry.append(x[perm[hp.n_support:need]])
        sup_y += [k] * hp.n_support
        qry_y += [k] * hp.n_query_labeled
    if not qry:
        raise SizingError(f"client {client.client_id} has no labeled data")
    return np.concatenate(sup), np.array(sup_y), np.concatenate(qry), np.array(qry_y)


def _sample_unlabeled(client: ClientData, hp: SslHyperparams, rng) -> np.ndarray:
    n = client.n_unlabeled
    take = min(hp.n_query_unlabeled, n)
    return client.unlabeled[np.sort(rng.choice(n, size=take, replace=False))]


def _final_prototypes(client: ClientData, params, net, round) -> PrototypeSet:
    classes = [k for k in sorted(client.labeled) if len(client.labeled[k])]
    x = np.concatenate([client.labeled[k] for k in classes])
    y = np.concatenate([[k] * len(client.labeled[k]) for k in classes])
    emb = forward(params, net, x, training=False)
    params.cache = None
    _check_finite(emb, f"embeddings on client {client.client_id}", round)
    return build_prototypes(emb, y, client.n_classes, owner_id=client.client_id, round=round)


def _local_loop(client, theta_in, helpers, setup: LocalSetup, rng, round, fixed_protos=None):
    hp, net = setup.ssl, setup.network
    params = theta_in.fresh_optimizer_state()
    anchor = theta_in if setup.optimizer.prox_mu > 0 else None
    lam = hp.unlabeled_weight
    use_unlabeled = bool(helpers) and lam > 0 and client.n_unlabeled > 0
    dim = net.input_dim
    labeled_losses, unlabeled_losses = [], []
    for _ in range(setup.epochs):
        if fixed_protos is None:
            sup, sup_y, qry, qry_y = _sample_episode(client, hp, rng)
        else:
            # every local labeled sample is a query against the averaged helper prototypes
            classes = [k for k in sorted(client.labeled) if k in fixed_protos.vectors]
            sup, sup_y = np.zeros((0, dim), np.float32), np.zeros(0, np.int64)
            qry = np.concatenate([client.labeled[k] for k in classes])
            qry_y = np.concatenate([[k] * len(client.labeled[k]) for k in classes])
        unl = _sample_unlabeled(client, hp, rng) if use_unlabeled else np.zeros((0, dim), np.float32)
        batch = np.concatenate([sup, qry, unl]).astype(np.float32)
        emb = forward(params, net, batch, training=True)
        _check_finite(emb, f"embeddings on client {client.client_id}", round)
        ns, nq = len(sup), len(qry)
        e_sup, e_qry, e_unl = emb[:ns], emb[ns:ns + nq], emb[ns + nq:]
        pseudo = pseudo_label(e_unl, helpers, hp.temperature, hp.metric) if len(unl) else None
        res = episode_loss_and_grads(e_sup, sup_y, e_qry, qry_y, e_unl, pseudo,
                                     lam if len(unl) else 0.0, client.n_classes, hp.metric,
                                     fixed_protos=fixed_protos)
        _check_finite(res.total, f"loss on client {client.client_id}", round)
        backward(params, net, np.concatenate([res.grad_support, res.grad_query, res.grad_unlabeled]))
        rmsprop_step(params, setup.optimizer, anchor)
        labeled_losses.append(res.labeled_loss)
        if len(unl):
            unlabeled_losses.append(res.unlabeled_loss)
    protos = _final_prototypes(client, params, net, round)
    for w in params.state_arrays():
        if not np.all(np.isfinite(w)):
            raise NonFiniteError(f"non-finite weights on client {client.client_id} in round {round}",
                                 round=round)
    return ClientUpdate(client.client_id, params, protos, len(client),
                        float(np.mean(labeled_losses)),
                        float(np.mean(unlabeled_losses)) if unlabeled_losses else 0.0)


def run_client(client: ClientData, theta_in: ParameterSet, helpers, setup: LocalSetup,
               rng, round: int = 0) -> ClientUpdate:
    """Local ProtoFSSL training; with no helpers the unlabeled term is skipped."""
    return _local_loop(client, theta_in, list(helpers), setup, rng, round)


def average_helper_prototypes(helpers, owner_id=-1, round=0) -> PrototypeSet:
    """Per-class mean of the helpers' prototypes over the helpers that have that class."""
    if not helpers:
        raise ConfigurationError("global-prototype client mode requires at least one helper")
    n_classes = helpers[0].n_classes
    vectors, counts = {}, {}
    for k in range(n_classes):
        rows = [h.vectors[k] for h in helpers if k in h.vectors]
        if rows:
            vectors[k] = np.mean(np.stack(rows), axis=0)
            counts[k] = len(rows)
    return PrototypeSet(owner_id, round, n_classes, vectors, counts)


def run_client_global_proto(client: ClientData, theta_in: ParameterSet, helpers, setup: LocalSetup,
                            rng, round: int = 0) -> ClientUpdate:
    """Variant whose training prototypes are the helpers' averaged prototypes."""
    fixed = average_helper_prototypes(list(helpers), owner_id=client.client_id, round=round)
    return _local_loop(client, theta_in, list(helpers), setup, rng, round, fixed_protos=fixed)


def fedavg_aggregate(local_models) -> ParameterSet:
    """Weighted mean of ``(ParameterSet, weight)`` pairs, weights normalised to sum to 1.

    Contributions are summed in sorted order so the result does not depend
    on the order of ``local_models``.
    """
    local_models = list(local_models)
    if not local_models:
        raise ValueError("fedavg_aggregate needs at least one model")
    weights = np.array([float(w) for _, w in local_models])
    if np.any(weights <= 0):
        raise ValueError("aggregation weights must be positive")
    frac = weights / weights.sum()
    ref = local_models[0][0]
    for p, _ in local_models[1:]:
        if [a.shape for a in p.state_arrays()] != [a.shape for a in ref.state_arrays()]:
            raise ValueError("cannot aggregate parameter sets with different shapes")
    out = ref.fresh_optimizer_state()
    for j, target in enumerate(out.state_arrays()):
        terms = np.stack([f * p.state_arrays()[j].astype(np.float64) for (p, _), f in zip(local_models, frac)])
        target[...] = np.sort(terms, axis=0).sum(axis=0).astype(target.dtype)
    return out


def add_prototype_noise(protos: PrototypeSet, sigma: float, rng) -> PrototypeSet:
    if sigma < 0:
        raise ConfigurationError("noise sigma must be >= 0")
    out = protos.copy()
    if sigma == 0:
        return out
    for k in sorted(out.vectors):
        v = out.vectors[k]
        out.vectors[k] = v + rng.normal(0.0, sigma, size=v.shape)
    return out


def client_cost_params(client: ClientData, params: ParameterSet, network: NetworkConfig,
                       epochs: int, helpers: int, helper_interval: int = 1) -> cost.CostParams:
    dims = [network.input_dim, *network.hidden_dims, network.embedding_dim]
    return cost.CostParams(
        F=cost.forward_flops(cost.mlp_arch(dims)),
        theta_bytes=cost.BYTES_PER_REAL * sum(a.size for a in params.state_arrays()),
        proto_bytes=cost.BYTES_PER_REAL * network.embedding_dim,
        n_labeled=client.n_labeled,
        n_unlabeled=client.n_unlabeled if helpers else 0,
        epochs=epochs,
        helpers=helpers,
        n_classes=client.n_classes,
        helper_interval=helper_interval,
    )


def run_round(server: ServerState, clients, cfg: RoundConfig, setup: LocalSetup) -> RoundResult:
    """Advance ``server`` by one round in place and return the round summary."""
    server.round += 1
    r = server.round
    active = select_clients(server, cfg.active_per_round, cfg.total_clients)
    h = 0 if cfg.client_mode == "labeled_only" else cfg.helper_count
    helpers = select_helpers(server, server.prev_active, h, cfg.helper_update_interval)
    if cfg.client_mode == "labeled_only":
        setup = LocalSetup(setup.network, setup.optimizer,
                           SslHyperparams(**{**setup.ssl.__dict__, "unlabeled_weight": 0.0}), setup.epochs)
    if cfg.aggregation == "fedavg" and setup.optimizer.prox_mu > 0:
        setup = LocalSetup(setup.network, OptimizerConfig(**{**setup.optimizer.__dict__, "prox_mu": 0.0}),
                           setup.ssl, setup.epochs)
    theta = server.global_params

    def work(cid):
        client = clients[cid]
        rng = server.rng(_LOCAL_TRAINING, cid)
        if cfg.client_mode == "global_prototype_alt" and helpers:
            upd = run_client_global_proto(client, theta, helpers, setup, rng, r)
        else:
            upd = run_client(client, theta, helpers, setup, rng, r)
        if cfg.noise_sigma > 0:
            upd.protos = add_prototype_noise(upd.protos, cfg.noise_sigma, server.rng(_NOISE, cid))
        return upd

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            updates = list(pool.map(work, active))
    else:
        updates = [work(cid) for cid in active]
    updates.sort(key=lambda u: u.client_id)

    server.global_params = fedavg_aggregate([(u.params, u.weight) for u in updates])
    for u in updates:
        server.prototype_store[u.client_id] = u.protos
    server.prev_active = list(active)

    flops = bytes_ = 0.0
    for u in updates:
        p = client_cost_params(clients[u.client_id], theta, setup.network, setup.epochs,
                               len(helpers), cfg.helper_update_interval)
        flops += cost.comp_cost("protofssl", p)
        bytes_ += cost.comm_cost("protofssl", p)
    with_unl = [u.unlabeled_loss for u in updates] if helpers and setup.ssl.unlabeled_weight > 0 else []
    log.debug("round %d active=%s helpers=%s", r, active, [p.owner_id for p in helpers])
    return RoundResult(
        round=r,
        active=active,
        helper_owners=[p.owner_id for p in helpers],
        labeled_loss=float(np.mean([u.labeled_loss for u in updates])),
        unlabeled_loss=float(np.mean(with_unl)) if with_unl else 0.0,
        flops=flops,
        bytes=bytes_,
    )
