"""The federated round loop with the spectral/health defense."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedsar import aggregation
from fedsar import defense as dfn
from fedsar import model as nn
from fedsar.adversary import AttackPlan, TriggerPattern, attack_schedule, poison_shard
from fedsar.datasim import ChipSet, build_probe_set, dirichlet_partition, make_dataset
from fedsar.errors import RoundError
from fedsar.harness.config import ExperimentConfig
from fedsar.harness.metrics import evaluate
from fedsar.numerics import RngStream


@dataclass
class Federation:
    """Everything fixed for the whole run: data, shards, attackers."""

    cfg: ExperimentConfig
    arch: nn.Architecture
    train: ChipSet
    test: ChipSet
    probe: ChipSet
    shards: list[np.ndarray]
    malicious: tuple[int, ...]
    plan: AttackPlan
    root: RngStream

    @property
    def defended(self) -> bool:
        return self.cfg.aggregator == "nadafd"

    @property
    def naat_enabled(self) -> bool:
        return self.defended and not self.cfg.ablation.no_naat


@dataclass
class ClientHistory:
    update: np.ndarray | None = None
    probe: np.ndarray | None = None
    health: float = 0.0


@dataclass
class ServerState:
    global_params: nn.ModelParams
    defense: dfn.DefenseParams
    round_index: int = 0
    history: dict[int, ClientHistory] = field(default_factory=dict)
    adv_set: ChipSet | None = None
    prev_adv_var: float | None = None


@dataclass
class ClientRecord:
    client_id: int
    malicious: bool
    selected: bool
    health: float
    weight: float


@dataclass
class RoundMetrics:
    round: int
    acc: float
    asr: float
    macro_f1: float
    mask_density: float
    tau: float
    xi: float
    zeta: float
    client_time_s: float
    server_time_s: float
    fallback: bool
    clients: list[ClientRecord]


def build_federation(cfg: ExperimentConfig) -> Federation:
    d = cfg.data
    root = RngStream(cfg.seed)
    arch = nn.Architecture(num_classes=d.num_classes, height=d.chip_size, width=d.chip_size)
    train = make_dataset(d.train_per_class, d.looks, root.child("train"), d.num_classes, d.chip_size, d.chip_size)
    test = make_dataset(d.test_per_class, d.looks, root.child("test"), d.num_classes, d.chip_size, d.chip_size)
    probe = build_probe_set(d.probe_size, d.looks, root.child("server", "probe"), d.num_classes,
                            d.chip_size, d.chip_size)
    part = dirichlet_partition(train.labels, cfg.num_clients, d.alpha, d.min_per_client,
                               root.child("partition"))
    a = cfg.attack
    if a.malicious_ids is not None:
        malicious = tuple(sorted(set(int(i) for i in a.malicious_ids)))
    else:
        count = int(round(a.malicious_fraction * cfg.num_clients))
        gen = root.child("malicious").generator()
        malicious = tuple(sorted(int(i) for i in gen.choice(cfg.num_clients, size=count, replace=False)))
    trigger = TriggerPattern(a.trigger_mode, tuple(a.trigger_location), a.trigger_amplitude)
    plan = AttackPlan(malicious, a.ratio, a.target, a.schedule, a.start_round, trigger)
    return Federation(cfg, arch, train, test, probe, part.shards, malicious, plan, root)


def initial_state(fed: Federation) -> ServerState:
    d = fed.cfg.defense
    params = dfn.DefenseParams(
        zeta=d.zeta, gamma=d.gamma, delta=d.delta, xi=d.xi, beta=d.beta, levels=d.levels,
        looks=d.looks, tau_percentile=d.tau_percentile,
        xi_floor=min(0.05, d.xi), xi_cap=max(0.15, d.xi),
    )
    init = nn.init_params(fed.arch, fed.root.child("init").generator())
    return ServerState(init, params)


# --------------------------------------------------------------------------
# Client side


@dataclass
class ClientJob:
    client_id: int
    round_index: int
    images: np.ndarray
    labels: np.ndarray
    global_flat: np.ndarray
    arch: nn.Architecture
    opt: nn.OptState
    epochs: int
    batch_size: int
    stream: RngStream
    probe_images: np.ndarray
    adv_images: np.ndarray | None = None
    adv_labels: np.ndarray | None = None
    beta: float = 0.0


@dataclass
class ClientResult:
    client_id: int
    params: np.ndarray
    update: np.ndarray
    probe_probs: np.ndarray
    adv_loss: float | None
    num_samples: int
    train_loss: float
    seconds: float


def train_client(job: ClientJob) -> ClientResult:
    """Local SGD on the client's (possibly poisoned) shard."""
    start = time.perf_counter()
    params = nn.ModelParams(job.global_flat.copy(), job.arch)
    opt = job.opt
    gen = job.stream.generator()
    n = job.labels.size
    use_adv = job.adv_images is not None and job.beta > 0
    adv_order = np.zeros(0, dtype=np.int64)
    adv_pos = 0
    losses = []
    for _ in range(job.epochs):
        order = gen.permutation(n)
        for s in range(0, n, job.batch_size):
            idx = order[s:s + job.batch_size]
            xa = ya = None
            if use_adv:
                take = min(idx.size, job.adv_labels.size)
                if adv_pos + take > adv_order.size:
                    adv_order = gen.permutation(job.adv_labels.size)
                    adv_pos = 0
                aidx = adv_order[adv_pos:adv_pos + take]
                adv_pos += take
                xa, ya = job.adv_images[aidx], job.adv_labels[aidx]
            total, _, _, grad = dfn.composite_loss_and_grad(
                params, job.images[idx], xa, ya, job.labels[idx], job.beta
            )
            losses.append(total)
            params, opt = nn.sgd_step(params, grad, opt)
    probe_probs = nn.forward(params, job.probe_images)
    adv_loss = None
    if use_adv:
        probs = nn.forward(params, job.adv_images)
        adv_loss = float(-np.mean(np.log(probs[np.arange(job.adv_labels.size), job.adv_labels])))
    return ClientResult(
        job.client_id, params.flat, params.flat - job.global_flat, probe_probs, adv_loss,
        int(n), float(np.mean(losses)) if losses else 0.0, time.perf_counter() - start,
    )


# --------------------------------------------------------------------------
# Server side


def select_clients(fed: Federation, round_index: int) -> list[int]:
    gen = fed.root.child("sample", round_index).generator()
    chosen = gen.choice(fed.cfg.num_clients, size=fed.cfg.clients_per_round, replace=False)
    return sorted(int(c) for c in chosen)


def _client_jobs(fed: Federation, state: ServerState, r: int, selected: list[int]) -> list[ClientJob]:
    cfg = fed.cfg
    active, _, trigger = attack_schedule(fed.plan, r, fed.root.child("attack-jitter"))
    naat = fed.naat_enabled and state.adv_set is not None
    jobs = []
    for cid in selected:
        shard = fed.train.subset(fed.shards[cid])
        if cid in fed.malicious and active and fed.plan.ratio > 0:
            shard, _ = poison_shard(shard, fed.plan.ratio, trigger, fed.plan.target,
                                    fed.root.child("poison", cid, r))
        opt = nn.OptState.fresh(
            fed.arch.num_params, round_index=r - 1, lr=cfg.lr, momentum=cfg.momentum,
            weight_decay=cfg.weight_decay, total_rounds=cfg.rounds,
        )
        jobs.append(ClientJob(
            cid, r, shard.images, shard.labels, state.global_params.flat, fed.arch, opt,
            cfg.local_epochs, cfg.batch_size, fed.root.child("local", cid, r), fed.probe.images,
            state.adv_set.images if naat else None,
            state.adv_set.labels if naat else None,
            state.defense.beta if naat else 0.0,
        ))
    return jobs


def _health_scores(fed: Federation, state: ServerState, results: list[ClientResult], r: int) -> dict[int, float]:
    p = state.defense
    scores: dict[int, float | None] = {}
    for res in results:
        hist = state.history.get(res.client_id)
        if r == 1 or hist is None or hist.update is None:
            scores[res.client_id] = None
        else:
            scores[res.client_id] = dfn.health_score(
                res.update, hist.update, res.probe_probs, hist.probe, p.gamma, p.delta
            )
    known = [v for v in scores.values() if v is not None]
    neutral = float(np.median(known)) if known else 0.0
    return {cid: (neutral if v is None else v) for cid, v in scores.items()}


def run_round(fed: Federation, state: ServerState, executor=None) -> RoundMetrics:
    """Advance ``state`` by one round in place and return its metrics."""
    cfg = fed.cfg
    r = state.round_index + 1
    selected = select_clients(fed, r)

    jobs = _client_jobs(fed, state, r, selected)
    if executor is not None:
        results = list(executor.map(train_client, jobs))
    else:
        results = [train_client(j) for j in jobs]
    results.sort(key=lambda res: res.client_id)
    client_time = sum(res.seconds for res in results)

    t0 = time.perf_counter()
    p = state.defense
    side = fed.arch.height

    # spectral inversion over this round's updates
    if len(results) >= 2 and not (fed.defended and cfg.ablation.no_fdci):
        energies = [dfn.energy_map(res.update, p.levels, side, side) for res in results]
        freq_mask = dfn.threshold_mask(dfn.discrepancy(energies), p.zeta)
    else:
        freq_mask = np.zeros((side, side))
    spatial = dfn.spatialize_mask(freq_mask, p.levels)

    if fed.naat_enabled:
        adv = dfn.generate_adversarial(fed.probe.images, p, spatial, fed.root.child("server", "adv", r))
        state.adv_set = ChipSet(adv, fed.probe.labels.copy())

    # health scores and weights
    scores = _health_scores(fed, state, results, r)
    sizes = {res.client_id: res.num_samples for res in results}
    total_size = float(sum(sizes.values()))
    fallback = False
    tau = float("nan")
    pruned: list[int] = []
    if fed.defended and not cfg.ablation.no_dhat:
        if r == 1:
            weights = {cid: 1.0 / len(results) for cid in scores}
            tau = 0.0
        else:
            wres = dfn.health_weights(scores, p.gamma, p.tau_percentile)
            weights, tau, pruned, fallback = wres.weights, wres.tau, wres.pruned, wres.fallback
    else:
        weights = {cid: sizes[cid] / total_size for cid in scores}

    inputs = [
        aggregation.ClientUpdate(res.client_id, res.params, res.num_samples, weights[res.client_id])
        for res in results
    ]
    new_flat = aggregation.aggregate(cfg.aggregator, inputs, cfg.krum_f)
    if cfg.aggregator == "krum":
        stack = np.stack([res.params for res in results])
        best = int(np.argmin(aggregation.krum_scores(stack, cfg.krum_f)))
        weights = {res.client_id: float(i == best) for i, res in enumerate(results)}
    elif cfg.aggregator == "median":
        weights = {cid: 1.0 / len(results) for cid in scores}

    for res in results:
        hist = state.history.setdefault(res.client_id, ClientHistory())
        hist.update, hist.probe, hist.health = res.update, res.probe_probs, scores[res.client_id]

    if fed.defended and cfg.defense.adapt:
        adv_losses = [res.adv_loss for res in results if res.adv_loss is not None]
        var = float(np.var(adv_losses)) if len(adv_losses) >= 2 else None
        state.defense = dfn.adapt_params(
            p, dfn.RoundFeedback(len(pruned) / len(results), var, state.prev_adv_var)
        )
        state.prev_adv_var = var
    server_time = time.perf_counter() - t0

    state.global_params = nn.ModelParams(new_flat, fed.arch)
    state.round_index = r
    acc, asr, f1 = evaluate(state.global_params, fed.test, fed.plan.trigger, fed.plan.target)

    records = []
    for cid in range(cfg.num_clients):
        hist = state.history.get(cid)
        records.append(ClientRecord(
            cid, cid in fed.malicious, cid in weights,
            hist.health if hist is not None else 0.0,
            weights.get(cid, 0.0),
        ))
    return RoundMetrics(
        r, acc, asr, f1, float(freq_mask.mean()), tau, p.xi, p.zeta,
        client_time, server_time, fallback, records,
    )


def run_rounds(fed: Federation, state: ServerState | None = None, rounds: int | None = None,
               on_round=None) -> tuple[ServerState, list[RoundMetrics]]:
    state = state or initial_state(fed)
    rounds = fed.cfg.rounds if rounds is None else rounds
    history = []
    executor = ProcessPoolExecutor(fed.cfg.workers) if fed.cfg.workers > 1 else None
    try:
        for _ in range(rounds):
            try:
                m = run_round(fed, state, executor)
            except Exception as exc:  # surface the failing round
                raise RoundError(state.round_index + 1, exc) from exc
            history.append(m)
            if on_round is not None:
                on_round(m)
    finally:
        if executor is not None:
            executor.shutdown()
    return state, history
