"""Single-process FedAvg simulation: label-shard partitioning, client selection,
weighted aggregation and DP-FL with per-client accounting."""

import copy
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .accountant import PrivacyAccountant, calibrate_sigma
from .errors import ConfigError, ContractError
from .metrics import MetricsRecord
from .training import TrainSettings, evaluate, local_epochs, steps_per_epoch

log = logging.getLogger(__name__)


@dataclass
class ClientPartition:
    client_id: int
    indices: np.ndarray

    @property
    def n(self):
        return len(self.indices)


@dataclass
class FederationConfig:
    n_clients: int = 10
    selection: str = "all"  # all | sample
    k_selected: int = 0
    classes_per_client: int = 2
    local_epochs: int = 1
    rounds: int = 10
    mode: str = "plain"  # plain | dp
    parallel: bool = False
    workers: int = 1
    eval_every: int = 1

    def validate(self):
        if self.selection not in ("all", "sample"):
            raise ConfigError(f"selection must be 'all' or 'sample', got {self.selection!r}")
        if self.selection == "sample" and not 1 <= self.k_selected <= self.n_clients:
            raise ConfigError(f"sample({self.k_selected}) needs 1 <= K <= {self.n_clients}")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.mode not in ("plain", "dp"):
            raise ConfigError(f"mode must be 'plain' or 'dp', got {self.mode!r}")


@dataclass
class GlobalState:
    round: int
    params: np.ndarray
    metrics: list = field(default_factory=list)
    epsilon: dict = field(default_factory=dict)
    client_steps: dict = field(default_factory=dict)
    accountants: dict = field(default_factory=dict)
    exhausted: set = field(default_factory=set)


# --------------------------------------------------------------------------
# partitioning and aggregation


def partition_label_shard(labels, n_clients, classes_per_client, seed, rng=None):
    """Split every class into shards and deal them so each client gets
    ``classes_per_client`` shards of distinct classes.

    Shards are laid out class by class (class order and within-class order
    shuffled by ``seed``); client j takes shard positions j, j+n, j+2n, ...
    """
    from .rng import Rng

    labels = np.asarray(labels)
    classes = np.unique(labels)
    nc = len(classes)
    if n_clients < 1 or classes_per_client < 1:
        raise ConfigError("need at least one client and one class per client")
    if classes_per_client > nc:
        raise ConfigError(f"classes_per_client {classes_per_client} exceeds the {nc} classes present")
    total = n_clients * classes_per_client
    if total < nc:
        raise ConfigError(f"{n_clients} clients x {classes_per_client} classes cannot cover {nc} classes")
    gen = (rng or Rng(seed)).stream("partition")
    class_order = gen.permutation(classes)
    per_class = [total // nc + (1 if i < total % nc else 0) for i in range(nc)]
    shards = []
    for c, k in zip(class_order, per_class):
        idx = gen.permutation(np.nonzero(labels == c)[0])
        if len(idx) < k:
            raise ConfigError(f"class {c} has {len(idx)} samples but needs {k} shards")
        shards.extend(np.array_split(idx, k))
    parts = []
    for j in range(n_clients):
        mine = [shards[j + t * n_clients] for t in range(classes_per_client)]
        parts.append(ClientPartition(j, np.sort(np.concatenate(mine))))
    return parts


def fedavg_aggregate(local_params, sizes):
    """Sample-count weighted mean of parameter vectors."""
    if len(local_params) == 0:
        raise ContractError("fedavg_aggregate needs at least one client")
    if len(local_params) != len(sizes):
        raise ContractError(f"{len(local_params)} parameter vectors but {len(sizes)} sizes")
    n0 = len(local_params[0])
    for j, v in enumerate(local_params):
        if len(v) != n0:
            raise ContractError(f"client {j} vector has length {len(v)}, expected {n0}")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ContractError("client sizes must be positive")
    # offsets from the first vector keep identical inputs an exact fixed point
    ref = np.asarray(local_params[0], dtype=np.float64)
    acc = np.zeros(n0)
    total = sizes.sum()
    for v, s in zip(local_params[1:], sizes[1:]):
        acc += (s / total) * (np.asarray(v, dtype=np.float64) - ref)
    return (ref + acc).astype(np.asarray(local_params[0]).dtype)


def select_clients(fed, round_index, rng):
    ids = np.arange(fed.n_clients)
    if fed.selection == "all":
        return ids
    return np.sort(rng.stream("select", round_index).choice(ids, size=fed.k_selected, replace=False))


# --------------------------------------------------------------------------
# rounds


def _client_privacy(settings, fed, part):
    base = settings.privacy
    q = min(1.0, settings.batch_size / part.n)
    steps = fed.rounds * fed.local_epochs * steps_per_epoch(part.n, settings.batch_size)
    sigma = base.sigma if base.sigma else calibrate_sigma(base.epsilon, base.delta, q, steps)
    return replace(base, q=q, steps=steps, sigma=sigma)


def init_state(model, fed, partitions, settings):
    state = GlobalState(round=0, params=model.get_flat())
    if fed.mode == "dp":
        for p in partitions:
            spec = _client_privacy(settings, fed, p)
            state.accountants[p.client_id] = (spec, PrivacyAccountant(spec.q, spec.sigma, spec.delta))
            state.epsilon[p.client_id] = 0.0
    return state


def _train_client(model, state, part, train, settings, fed, rng):
    local = model.clone()
    local.set_flat(state.params)
    step0 = state.client_steps.get(part.client_id, 0)
    acct = None
    s = settings
    if fed.mode == "dp":
        spec, acct = state.accountants[part.client_id]
        s = replace(settings, privacy=spec)
    epoch0 = state.round * fed.local_epochs
    step = local_epochs(local, train.images, train.labels, part.indices, s, rng, epoch0, fed.local_epochs,
                        client=part.client_id, step0=step0, accountant=acct)
    return local.get_flat(), step


def run_round(state, model, partitions, fed, settings, rng, train, test=None, seed=0, wall_clock=False):
    """One FedAvg round; returns a new GlobalState (``state`` is not modified)."""
    t0 = time.perf_counter()
    new = copy.copy(state)
    new.metrics = list(state.metrics)
    new.epsilon = dict(state.epsilon)
    new.client_steps = dict(state.client_steps)
    new.exhausted = set(state.exhausted)
    by_id = {p.client_id: p for p in partitions}
    chosen = []
    for cid in select_clients(fed, state.round, rng):
        part = by_id[int(cid)]
        if part.n == 0:
            log.warning("round %d: client %d has an empty shard; skipped", state.round, cid)
            continue
        if fed.mode == "dp":
            spec, acct = state.accountants[part.client_id]
            need = fed.local_epochs * steps_per_epoch(part.n, settings.batch_size)
            if part.client_id in new.exhausted or acct.epsilon(acct.steps + need) > spec.epsilon:
                if part.client_id not in new.exhausted:
                    log.warning("client %d: privacy budget exhausted; no further participation", part.client_id)
                new.exhausted.add(part.client_id)
                continue
        chosen.append(part)

    if chosen:
        if fed.parallel and fed.workers > 1:
            with ThreadPoolExecutor(max_workers=fed.workers) as ex:
                results = list(ex.map(lambda p: _train_client(model, state, p, train, settings, fed, rng), chosen))
        else:
            results = [_train_client(model, state, p, train, settings, fed, rng) for p in chosen]
        new.params = fedavg_aggregate([r[0] for r in results], [p.n for p in chosen])
        for p, (_, step) in zip(chosen, results):
            new.client_steps[p.client_id] = step
            if fed.mode == "dp":
                spec, acct = state.accountants[p.client_id]
                eps = acct.epsilon()
                if eps > spec.epsilon + 1e-12:
                    raise ContractError(f"client {p.client_id} exceeded its budget: {eps} > {spec.epsilon}")
                new.epsilon[p.client_id] = eps
    new.round = state.round + 1

    if test is not None and (new.round % max(1, fed.eval_every) == 0 or new.round == fed.rounds):
        g = model.clone()
        g.set_flat(new.params)
        loss, acc = evaluate(g, test.images, test.labels, settings.eval_batch)
        eps = max(new.epsilon.values()) if fed.mode == "dp" and new.epsilon else None
        wall = time.perf_counter() - t0 if wall_clock else 0.0
        new.metrics.append(MetricsRecord(new.round, "test", loss, acc, eps, wall, seed))
    return new


def run_federation(model, train, test, partitions, fed, settings, rng, seed=0, wall_clock=False, on_round=None):
    """``fed.rounds`` rounds of FedAvg; returns the final GlobalState with the global params loaded into ``model``."""
    fed.validate()
    state = init_state(model, fed, partitions, settings)
    for _ in range(fed.rounds):
        state = run_round(state, model, partitions, fed, settings, rng, train, test, seed, wall_clock)
        if on_round is not None:
            on_round(state)
    model.set_flat(state.params)
    return state
