"""Parallel (FedAVG, FedAVGM, FedProx, FedAVG-Share) and serial (CWT, CWT+EWC)
federated training.

Conventions:

* Model state travels as ``dict[str, np.ndarray]`` (parameters, then
  BatchNorm buffers). Client updates are float64 deltas ``trained - start``;
  the server adds the aggregated delta in float64 and rounds back to
  float32, so a one-client federation reproduces centralized training bit
  for bit.
* Every client keeps its own optimizer state and step counter across rounds,
  and draws batches from an RNG keyed by ``(seed, round, client_id)``, so the
  order in which clients run never changes the result.
"""
from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset
from .metrics import ForgettingTrace, RoundRecord, evaluate, record_forgetting
from .models import Model, ModelSpec, build_model, param_count
from .partition import ClientShard, PartitionReport, share_globally
from .tensor import LrSchedule, OptimizerState, Tensor, clip_global_norm, lr_at, optimizer_step
from .tensor import functional as F

ALGORITHMS = ("fedavg", "fedavgm", "fedprox", "fedavg-share", "cwt", "cwt-ewc")
PARALLEL = ("fedavg", "fedavgm", "fedprox", "fedavg-share")
SERIAL = ("cwt", "cwt-ewc")

ParameterSet = dict  # str -> np.ndarray


class BatchClampWarning(UserWarning):
    """Batch size exceeded a client's sample count and was reduced."""


@dataclass
class ScheduleConfig:
    kind: str = "warmup-cosine"
    base_lr: float = 0.03
    warmup_steps: int = 0
    total_steps: int | None = None  # None: derived per client from rounds, E and shard size
    step_period: int | None = None
    step_period_rounds: int | None = None
    step_factor: float = 0.5


@dataclass
class OptimizerConfig:
    kind: str = "sgd-momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def new_state(self) -> OptimizerState:
        return OptimizerState(self.kind, self.momentum, self.weight_decay, tuple(self.betas), self.eps)


@dataclass
class FederationConfig:
    algorithm: str = "fedavg"
    local_epochs: int = 1
    rounds: int = 50
    sample_fraction: float = 1.0
    batch_size: int = 32
    mu: float = 0.0
    beta: float = 0.0
    share_fraction: float = 0.0
    lambda_ewc: float = 5000.0
    fisher_batches: int = 4
    fisher_labels: str = "sampled"
    accumulate_across_cycles: bool = False
    clip_norm: float | None = 1.0
    aggregation: str = "samples"
    num_clients: int | None = None
    workers: int = 1
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def violations(self) -> list[tuple[str, str]]:
        """(field, message) pairs for every violated constraint."""
        errs: list[tuple[str, str]] = []

        def check(ok: bool, name: str, msg: str):
            if not ok:
                errs.append((name, msg))

        check(self.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}")
        check(self.local_epochs >= 1, "local_epochs", "must be >= 1")
        check(self.rounds >= 1, "rounds", "must be >= 1")
        check(0 < self.sample_fraction <= 1, "sample_fraction", "must lie in (0, 1]")
        check(self.batch_size >= 1, "batch_size", "must be >= 1")
        check(self.mu >= 0, "mu", "must be >= 0")
        check(0 <= self.beta < 1, "beta", "must lie in [0, 1)")
        check(0 <= self.share_fraction <= 1, "share_fraction", "must lie in [0, 1]")
        check(self.lambda_ewc >= 0, "lambda_ewc", "must be >= 0")
        check(self.fisher_batches >= 1, "fisher_batches", "must be >= 1")
        check(self.fisher_labels in ("sampled", "argmax"), "fisher_labels", "must be 'sampled' or 'argmax'")
        check(self.clip_norm is None or self.clip_norm > 0, "clip_norm", "must be > 0 or null")
        check(self.aggregation in ("samples", "equal"), "aggregation", "must be 'samples' or 'equal'")
        check(self.workers >= 1, "workers", "must be >= 1")
        check(self.num_clients is None or self.num_clients >= 1, "num_clients", "must be >= 1")
        check(self.seed >= 0, "seed", "must be >= 0")
        if self.algorithm == "fedavg-share":
            check(self.share_fraction > 0, "share_fraction", "fedavg-share needs share_fraction > 0")
        if self.algorithm == "fedavgm":
            check(self.beta > 0, "beta", "fedavgm needs beta > 0")
        s = self.schedule
        check(s.kind in ("warmup-cosine", "step-decay", "constant"), "schedule.kind",
              "must be warmup-cosine, step-decay or constant")
        check(s.base_lr >= 0, "schedule.base_lr", "must be >= 0")
        check(s.warmup_steps >= 0, "schedule.warmup_steps", "must be >= 0")
        check(s.total_steps is None or s.total_steps >= 1, "schedule.total_steps", "must be >= 1 or null (auto)")
        check(s.step_period is None or s.step_period >= 1, "schedule.step_period", "must be >= 1")
        check(s.step_period_rounds is None or s.step_period_rounds >= 1, "schedule.step_period_rounds", "must be >= 1")
        check(0 < s.step_factor <= 1, "schedule.step_factor", "must lie in (0, 1]")
        o = self.optimizer
        check(o.kind in ("sgd-momentum", "adamw"), "optimizer.kind", "must be sgd-momentum or adamw")
        check(0 <= o.momentum < 1, "optimizer.momentum", "must lie in [0, 1)")
        check(o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")
        return errs

    def validate(self) -> "FederationConfig":
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(f"{k}: {m}" for k, m in errs))
        return self


@dataclass
class ClientState:
    """What a client keeps between rounds: optimizer moments and its step count."""

    optimizer: OptimizerState
    step: int = 0


@dataclass
class ServerState:
    global_params: ParameterSet
    momentum_buffer: ParameterSet | None = None
    round: int = 0
    rng_root: int = 0


@dataclass
class EwcAnchor:
    anchor_params: ParameterSet
    fisher_diag: ParameterSet


@dataclass
class RunResult:
    records: list[RoundRecord]
    final_state: ParameterSet
    param_count: int
    num_clients: int
    forgetting: ForgettingTrace | None = None
    report: PartitionReport | None = None

    @property
    def accuracies(self) -> list[float]:
        return [r.global_test_acc for r in self.records]


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


_CLIENT_STREAM, _SAMPLING_STREAM, _FISHER_STREAM = 0, 1, 2


def client_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return derive_rng(seed, _CLIENT_STREAM, round_idx, client_id)


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------

def batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous batch ranges over ``n`` samples; a trailing single sample is
    merged into the previous batch so BatchNorm never sees a batch of one."""
    b = max(1, min(batch_size, n))
    starts = list(range(0, n, b))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    ends = starts[1:] + [n]
    return list(zip(starts, ends))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return len(batch_bounds(n, batch_size))


def client_schedule(config: FederationConfig, n: int) -> LrSchedule:
    s = config.schedule
    per_epoch = steps_per_epoch(n, config.batch_size)
    total = s.total_steps or max(1, config.rounds * config.local_epochs * per_epoch)
    if s.step_period_rounds is not None:
        period = s.step_period_rounds * config.local_epochs * per_epoch
    else:
        period = s.step_period or 1
    return LrSchedule(s.kind, s.base_lr, min(s.warmup_steps, total), total, period, s.step_factor)


def _add_penalty_grads(model: Model, start: ParameterSet | None, mu: float,
                       anchors: Sequence[EwcAnchor], lambda_ewc: float) -> None:
    for name, p in model.params.items():
        if mu and start is not None:
            p.grad += np.float32(mu) * (p.data - start[name])
        for anchor in anchors:
            p.grad += np.float32(lambda_ewc) * anchor.fisher_diag[name] * (p.data - anchor.anchor_params[name])


def fit_epochs(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    config: FederationConfig,
    rng: np.random.Generator,
    state: ClientState,
    schedule: LrSchedule,
    *,
    prox_center: ParameterSet | None = None,
    anchors: Sequence[EwcAnchor] = (),
) -> None:
    """Run ``config.local_epochs`` epochs of mini-batch training in place."""
    n = labels.shape[0]
    model.train()
    params = model.params
    use_penalty = (config.mu > 0 and prox_center is not None) or (anchors and config.lambda_ewc > 0)
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for lo, hi in batch_bounds(n, config.batch_size):
            idx = order[lo:hi]
            lr = lr_at(schedule, min(state.step, schedule.total_steps))
            logits = model(Tensor(images[idx]))
            loss = F.cross_entropy(logits, labels[idx])
            loss.backward(wrt=params.values())
            if use_penalty:
                _add_penalty_grads(model, prox_center, config.mu, anchors, config.lambda_ewc)
            if config.clip_norm is not None:
                clip_global_norm(params, config.clip_norm)
            optimizer_step(state.optimizer, params, lr)
            state.step += 1


def local_train(
    shard: ClientShard,
    start: ParameterSet,
    config: FederationConfig,
    round_idx: int,
    client_id: int,
    *,
    spec: ModelSpec,
    dataset: Dataset,
    state: ClientState | None = None,
) -> tuple[ParameterSet, int]:
    """Train a private copy of ``start`` on ``shard`` for E epochs.

    Returns ``(trained - start, n)`` with the delta in float64, covering
    parameters and BatchNorm buffers. FedProx adds ``mu * (w - start)`` to
    every gradient before clipping.
    """
    if shard.n == 0:
        raise ValueError(f"client {client_id} has no training samples")
    if config.local_epochs < 1:
        raise ValueError("local_epochs must be >= 1")
    if config.batch_size > shard.n:
        warnings.warn(
            f"client {client_id}: batch size {config.batch_size} clamped to {shard.n} samples",
            BatchClampWarning,
            stacklevel=2,
        )
    if state is None:
        state = ClientState(config.optimizer.new_state())
    model = Model.from_state(spec, start)
    images = dataset.images[shard.train_indices]
    labels = dataset.labels[shard.train_indices]
    prox = {k: start[k] for k in model.params} if config.algorithm == "fedprox" and config.mu > 0 else None
    fit_epochs(model, images, labels, config, client_rng(config.seed, round_idx, client_id),
               state, client_schedule(config, shard.n), prox_center=prox)
    trained = model.state_dict()
    delta = {k: trained[k].astype(np.float64) - start[k].astype(np.float64) for k in start}
    return delta, shard.n


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------

def aggregate(updates: Sequence[tuple[ParameterSet, int]], weighting: str = "samples") -> ParameterSet:
    """Sample-weighted mean of deltas, ``sum(n_i * d_i) / sum(n_i)``, summed in
    the order given (callers pass ascending client id)."""
    if not updates:
        raise ValueError("aggregate needs at least one update")
    first = updates[0][0]
    for delta, _ in updates[1:]:
        if set(delta) != set(first):
            raise ValueError("aggregate: updates carry different parameter names")
        for k, v in delta.items():
            if v.shape != first[k].shape:
                raise ValueError(f"aggregate: shape mismatch for {k}: {v.shape} vs {first[k].shape}")
    weights = [float(n) if weighting == "samples" else 1.0 for _, n in updates]
    total = sum(weights)
    if total <= 0:
        raise ValueError("aggregate: total weight must be positive")
    out = {}
    for k in first:
        acc = np.zeros(first[k].shape, dtype=np.float64)
        for (delta, _), w in zip(updates, weights):
            acc += w * np.asarray(delta[k], dtype=np.float64)
        out[k] = acc / total
    return out


def server_apply(state: ServerState, agg_delta: ParameterSet, beta: float) -> ServerState:
    """``w += delta`` (beta == 0) or ``v = beta*v + delta; w += v`` for the
    momentum-tracked names; untracked names (BatchNorm buffers) always take
    the plain update."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    momentum = None
    if beta > 0:
        if state.momentum_buffer is None:
            raise ValueError("server momentum requested but no momentum buffer initialised")
        momentum = {k: beta * v + agg_delta[k] for k, v in state.momentum_buffer.items()}
    new = {}
    for k, w in state.global_params.items():
        step = momentum[k] if momentum is not None and k in momentum else agg_delta[k]
        new[k] = (w.astype(np.float64) + step).astype(np.float32)
    return ServerState(new, momentum if momentum is not None else state.momentum_buffer, state.round + 1, state.rng_root)


def weight_divergence(client_params: Mapping[str, np.ndarray], global_params: Mapping[str, np.ndarray]) -> float:
    """``||w_c - w_g|| / (||w_g|| + 1e-12)`` over all named parameters."""
    if set(client_params) != set(global_params):
        raise ValueError("weight_divergence: parameter names differ")
    num = 0.0
    den = 0.0
    for k in global_params:
        c = np.asarray(client_params[k], dtype=np.float64)
        g = np.asarray(global_params[k], dtype=np.float64)
        if c.shape != g.shape:
            raise ValueError(f"weight_divergence: shape mismatch for {k}")
        d = (c - g).reshape(-1)
        num += float(d @ d)
        gg = g.reshape(-1)
        den += float(gg @ gg)
    return math.sqrt(num) / (math.sqrt(den) + 1e-12)


def fisher_estimate(
    model,
    images: np.ndarray,
    batches: int = 1,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
    labels: str = "sampled",
) -> ParameterSet:
    """Diagonal empirical Fisher: mean squared per-sample gradient of
    ``log p(y|x)`` with ``y`` drawn from the model's own predictive
    distribution (``labels="sampled"``) or its argmax (``"argmax"``).

    ``batches * batch_size`` samples are drawn without replacement (capped at
    the shard size). Runs in eval mode.
    """
    if batches < 1:
        raise ValueError("batches must be >= 1")
    n_avail = images.shape[0]
    if n_avail == 0:
        raise ValueError("fisher_estimate needs a non-empty shard")
    rng = rng if rng is not None else np.random.default_rng(0)
    count = min(n_avail, batches * batch_size)
    chosen = np.sort(rng.choice(n_avail, size=count, replace=False))
    fisher = {k: np.zeros(p.shape, dtype=np.float64) for k, p in model.params.items()}
    was_training = model.training
    model.eval()
    try:
        for i in chosen:
            logits = model(Tensor(images[i : i + 1]))
            z = logits.data[0].astype(np.float64)
            probs = np.exp(z - z.max())
            probs /= probs.sum()
            y = int(rng.choice(probs.size, p=probs)) if labels == "sampled" else int(np.argmax(z))
            F.cross_entropy(logits, np.array([y])).backward(wrt=model.params.values())
            for k, p in model.params.items():
                fisher[k] += p.grad.astype(np.float64) ** 2
    finally:
        model.training = was_training
    return {k: (v / count).astype(np.float32) for k, v in fisher.items()}


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def _client_val_accuracies(model: Model, dataset: Dataset, shards: Sequence[ClientShard]) -> tuple[float | None, ...]:
    out = []
    for shard in shards:
        if shard.val_indices.size == 0:
            out.append(None)
        else:
            out.append(evaluate(model, dataset.images[shard.val_indices], dataset.labels[shard.val_indices]))
    return tuple(out)


def _test_accuracy(model: Model, dataset: Dataset) -> float:
    idx = dataset.test_indices
    return evaluate(model, dataset.images[idx], dataset.labels[idx])


def _ordered_shards(report: PartitionReport, dataset: Dataset, config: FederationConfig) -> list[ClientShard]:
    """Shards sorted by client id, so the in-memory order never matters."""
    if config.num_clients is not None and config.num_clients != report.num_clients:
        raise ValueError(f"config expects {config.num_clients} clients, partition has {report.num_clients}")
    shards = sorted(report.shards, key=lambda s: s.client_id)
    if [s.client_id for s in shards] != list(range(len(shards))):
        raise ValueError("partition shards must carry client ids 0..K-1")
    for shard in shards:
        if shard.train_indices.size and shard.train_indices.max() >= len(dataset):
            raise ValueError(f"client {shard.client_id} references samples outside the dataset")
    return shards


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def run_parallel(config: FederationConfig, report: PartitionReport, spec: ModelSpec, dataset: Dataset,
                 *, record_wall_time: bool = False) -> RunResult:
    """Synchronous rounds: sample clients, train locally, aggregate, apply."""
    config.validate()
    if config.algorithm not in PARALLEL:
        raise ValueError(f"run_parallel does not handle {config.algorithm!r}")
    shards = _ordered_shards(report, dataset, config)
    if config.algorithm == "fedavg-share" and config.share_fraction > 0:
        report = share_globally(dataset, replace(report, shards=tuple(shards)), config.share_fraction, config.seed)
        shards = list(report.shards)
    k = len(shards)

    model = build_model(spec, config.seed)
    count = param_count(model)
    param_keys = list(model.params)
    momentum = {n: np.zeros(model.params[n].shape) for n in param_keys} if config.algorithm == "fedavgm" else None
    server = ServerState(model.state_dict(), momentum, 0, config.seed)
    beta = config.beta if config.algorithm == "fedavgm" else 0.0
    clients: dict[int, ClientState] = {}
    per_round = math.ceil(config.sample_fraction * k)

    records = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for r in range(config.rounds):
            t0 = time.perf_counter()
            sampled = np.sort(derive_rng(config.seed, _SAMPLING_STREAM, r).choice(k, size=per_round, replace=False))
            for cid in sampled:
                clients.setdefault(int(cid), ClientState(config.optimizer.new_state()))
            start = server.global_params

            def job(cid: int):
                return local_train(shards[cid], start, config, r, cid, spec=spec, dataset=dataset, state=clients[cid])

            if pool is None:
                results = [job(int(c)) for c in sampled]
            else:
                results = list(pool.map(job, [int(c) for c in sampled]))

            server = server_apply(server, aggregate(results, config.aggregation), beta)
            new_params = {n: server.global_params[n] for n in param_keys}
            divergences = [
                weight_divergence({n: start[n].astype(np.float64) + delta[n] for n in param_keys}, new_params)
                for delta, _ in results
            ]
            model.load_state_dict(server.global_params)
            records.append(RoundRecord(
                round=r + 1,
                global_test_acc=_test_accuracy(model, dataset),
                per_client_val_acc=_client_val_accuracies(model, dataset, shards),
                cumulative_transmitted_params=(r + 1) * count,
                mean_weight_divergence=float(np.mean(divergences)),
                wall_ms=int((time.perf_counter() - t0) * 1000) if record_wall_time else 0,
            ))
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(records, server.global_params, count, k, None, report)


def run_cwt(config: FederationConfig, report: PartitionReport, spec: ModelSpec, dataset: Dataset,
            *, record_wall_time: bool = False) -> RunResult:
    """Cyclic weight transfer: one model visits clients 0..K-1 in turn; one
    round is one full cycle. ``cwt-ewc`` anchors every visited client with a
    Fisher-weighted quadratic penalty for the clients that follow."""
    config.validate()
    if config.algorithm not in SERIAL:
        raise ValueError(f"run_cwt does not handle {config.algorithm!r}")
    shards = _ordered_shards(report, dataset, config)
    k = len(shards)
    model = build_model(spec, config.seed)
    count = param_count(model)
    clients = {s.client_id: ClientState(config.optimizer.new_state()) for s in shards}
    use_ewc = config.algorithm == "cwt-ewc" and config.lambda_ewc > 0
    anchors: dict[tuple[int, int], EwcAnchor] = {}
    trace = ForgettingTrace(k)
    records = []
    visit = 0
    for r in range(config.rounds):
        t0 = time.perf_counter()
        if not config.accumulate_across_cycles:
            anchors = {}
        for shard in shards:
            cid = shard.client_id
            if shard.n == 0:
                raise ValueError(f"client {cid} has no training samples")
            active = [a for (owner, _), a in sorted(anchors.items()) if owner != cid]
            images = dataset.images[shard.train_indices]
            fit_epochs(model, images, dataset.labels[shard.train_indices], config,
                       client_rng(config.seed, r, cid), clients[cid], client_schedule(config, shard.n),
                       anchors=active)
            visit += 1
            trace = record_forgetting(trace, visit, cid, _client_val_accuracies(model, dataset, shards))
            if use_ewc:
                fisher = fisher_estimate(model, images, config.fisher_batches, config.batch_size,
                                         derive_rng(config.seed, _FISHER_STREAM, r, cid), config.fisher_labels)
                key = (cid, 0) if config.accumulate_across_cycles else (cid, r)
                anchors[key] = EwcAnchor(model.param_state(), fisher)
        records.append(RoundRecord(
            round=r + 1,
            global_test_acc=_test_accuracy(model, dataset),
            per_client_val_acc=trace.rows[-1][2],
            cumulative_transmitted_params=(r + 1) * count,
            mean_weight_divergence=math.nan,
            wall_ms=int((time.perf_counter() - t0) * 1000) if record_wall_time else 0,
        ))
    return RunResult(records, model.state_dict(), count, k, trace, report)


def train_centralized(config: FederationConfig, spec: ModelSpec, dataset: Dataset) -> RunResult:
    """Single-site baseline: ``rounds`` blocks of E epochs over the whole train
    split, seeded like client 0 of a one-client federation."""
    idx = dataset.train_indices
    model = build_model(spec, config.seed)
    state = ClientState(config.optimizer.new_state())
    schedule = client_schedule(config, idx.size)
    images, labels = dataset.images[idx], dataset.labels[idx]
    records = []
    for r in range(config.rounds):
        fit_epochs(model, images, labels, config, client_rng(config.seed, r, 0), state, schedule)
        records.append(RoundRecord(r + 1, _test_accuracy(model, dataset), (), 0, math.nan))
    return RunResult(records, model.state_dict(), param_count(model), 1)


def run(config: FederationConfig, report: PartitionReport, spec: ModelSpec, dataset: Dataset,
        *, record_wall_time: bool = False) -> RunResult:
    driver = run_cwt if config.algorithm in SERIAL else run_parallel
    return driver(config, report, spec, dataset, record_wall_time=record_wall_time)

