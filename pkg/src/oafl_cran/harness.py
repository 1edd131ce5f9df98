"""Experiment runner: federated rounds through the two-stage aggregation with
one of several fronthaul schemes, plus metrics output."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import codec
from .channel import (ChannelRealization, Dims, PathlossParams, contiguous_topology, db_to_linear,
                      sample_channel)
from .edge import edge_aggregate_round
from .errors import ConfigError, DataError, FeasibilityError, OaflError, StageError
from .fl import (ConvergenceParams, Dataset, GlobalModel, LogisticTask, RidgeTask, apply_global_update,
                 convergence_bound, load_mnist, local_gradient, pad_even, decaying_lr_schedule,
                 partition_dataset, synthetic_ridge)
from .ldsc import MAX_APS, SIGMA_V_FLOOR, SourceStats, d_system, estimate_sigma_s, ldsc_bound_decode
from .optimizer import (AOState, alternating_optimize, feasible_start, initial_beamformers, mm_sigma_v,
                        normalize_gauge)

log = logging.getLogger(__name__)

SCHEMES = ("error-free", "ldsc-bound", "practical", "practical-zero-side", "quantization")
TASKS = ("ridge", "logistic-mnist")
METRICS_HEADER = ("round", "scheme", "train_loss", "test_metric", "mse", "d_system", "bound", "wall_ms")


@dataclass
class SeedConfig:
    channel: int = 1
    noise: int = 2
    data: int = 3
    init: int = 4
    training: int = 5

    def shifted(self, offset: int) -> "SeedConfig":
        return SeedConfig(**{k: v + offset for k, v in asdict(self).items()})


@dataclass
class ExperimentConfig:
    schemes: tuple = ("ldsc-bound",)
    task: str = "ridge"
    rounds: int = 50
    # network
    n_ap: int = 3
    n_dev: int = 20
    n_rx: int = 8
    n_tx: int = 3
    cell_sizes: tuple = (5, 8, 7)
    pathloss: dict = field(default_factory=dict)
    noise_dbm: float = -80.0
    fading: str = "static"
    power: float | list = 1.0
    rates: float | list = 1.0
    # codec
    sigma: float = 0.5
    layers: int = 2
    hidden: int = 16
    train_epochs: int = 1000
    train_vectors: int = 40
    retrain_every: int = 0
    retrain_epochs: int = 200
    train_feedback: bool = False
    # optimizer
    sweeps: int = 5
    ao_tol: float = 1e-6
    mm_iters: int = 20
    mm_tol: float = 1e-6
    sigma_s_subsample: int = 512
    # learning
    lr: float | str = "inverse-lipschitz"
    dim: int = 64
    n_samples: int = 4000
    n_test: int = 1000
    reg: float = 0.1
    ridge_noise: float = 0.1
    q: int = 10
    local_steps: int = 1
    local_lr: float = 0.01
    mnist_dir: str | None = None
    seeds: SeedConfig = field(default_factory=SeedConfig)
    record_wall_ms: bool = False

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = SeedConfig(**self.seeds)
        if isinstance(self.schemes, str):
            self.schemes = (self.schemes,)
        self.schemes = tuple(self.schemes)
        self.cell_sizes = tuple(int(s) for s in self.cell_sizes)
        self.validate()

    def validate(self):
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"unknown scheme(s) {bad}; choose from {SCHEMES}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not 1 <= self.n_ap <= MAX_APS:
            raise ConfigError(f"n_ap must lie in [1, {MAX_APS}]")
        if len(self.cell_sizes) != self.n_ap or sum(self.cell_sizes) != self.n_dev:
            raise ConfigError("cell_sizes must have n_ap entries summing to n_dev")
        if self.fading not in ("static", "per_round"):
            raise ConfigError("fading must be 'static' or 'per_round'")
        if self.rounds < 1:
            raise ConfigError("rounds must be positive")
        if not 0 < self.sigma <= 1:
            raise ConfigError("sigma must lie in (0, 1]")
        if isinstance(self.lr, str) and self.lr not in ("inverse-lipschitz", "decay"):
            raise ConfigError("lr must be a number, 'inverse-lipschitz' or 'decay'")
        if self.task == "logistic-mnist":
            if self.mnist_dir is None or not Path(self.mnist_dir).is_dir():
                raise ConfigError(f"mnist_dir {self.mnist_dir!r} does not exist")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schemes"] = list(self.schemes)
        d["cell_sizes"] = list(self.cell_sizes)
        return d

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        return replace(self, seeds=self.seeds.shifted(offset))


@dataclass
class MetricsRecord:
    round: int
    scheme: str
    train_loss: float
    test_metric: float
    mse: float
    d_system: float
    bound: float
    wall_ms: float

    def row(self) -> list:
        fmt = lambda x: format(float(x), ".17g")
        return [str(self.round), self.scheme, fmt(self.train_loss), fmt(self.test_metric),
                fmt(self.mse), fmt(self.d_system), fmt(self.bound), fmt(self.wall_ms)]


@dataclass
class ExperimentResult:
    records: list
    trace: dict

    def scheme_records(self, scheme: str) -> list:
        return [r for r in self.records if r.scheme == scheme]

    def final_loss(self, scheme: str) -> float:
        return self.scheme_records(scheme)[-1].train_loss

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "trace.json").write_text(json.dumps(self.trace, indent=1, sort_keys=True))


# --- setup -------------------------------------------------------------------

@dataclass
class Problem:
    task: object
    train: Dataset
    test: Dataset
    shards: list
    theta0: np.ndarray
    constants: tuple | None
    optimum_loss: float | None


def build_problem(cfg: ExperimentConfig) -> Problem:
    seed = cfg.seeds.data
    if cfg.task == "ridge":
        full = synthetic_ridge(cfg.n_samples + cfg.n_test, cfg.dim, seed, noise=cfg.ridge_noise)
        pool = full.subset(np.arange(cfg.n_samples))
        test = full.subset(np.arange(cfg.n_samples, cfg.n_samples + cfg.n_test))
    else:
        pool, test = load_mnist(cfg.mnist_dir, cfg.n_samples, cfg.n_test, seed)
    n_classes = len(np.unique(pool.labels))
    per_device = cfg.n_samples // cfg.n_dev // 2 if n_classes > 1 else None
    shards = partition_dataset(pool, cfg.n_dev, min(cfg.q, n_classes), seed, per_device)
    union = np.concatenate(shards)
    train = pool.subset(union)
    offsets = np.cumsum([0] + [len(s) for s in shards])
    shards = [train.subset(np.arange(offsets[k], offsets[k + 1])) for k in range(cfg.n_dev)]
    if cfg.task == "ridge":
        task = RidgeTask(cfg.reg, len(train))
        theta0 = np.zeros(cfg.dim)
        constants = task.constants(train)
        optimum_loss = task.loss(task.optimum(train), train)
    else:
        task = LogisticTask(train.features.shape[1], 10, cfg.reg, len(train))
        theta0 = np.zeros(task.n_params)
        constants = task.constants(train)
        optimum_loss = None
    return Problem(task, train, test, shards, theta0, constants, optimum_loss)


def _learning_rate(cfg, problem, t):
    if cfg.lr == "inverse-lipschitz":
        return 1.0 / problem.constants[1]
    if cfg.lr == "decay":
        return decaying_lr_schedule(t)
    return float(cfg.lr)


def _channel(cfg: ExperimentConfig, t: int) -> ChannelRealization:
    dims = Dims(cfg.n_ap, cfg.n_dev, cfg.n_rx, cfg.n_tx)
    pl = PathlossParams.uniform(cfg.n_ap, cfg.n_dev, **cfg.pathloss)
    noise_w = float(db_to_linear(cfg.noise_dbm)) * 1e-3
    key = [cfg.seeds.channel] if cfg.fading == "static" else [cfg.seeds.channel, t]
    return sample_channel(pl, dims, contiguous_topology(cfg.cell_sizes), np.random.default_rng(key), noise_w)


def device_gram(g_norms) -> np.ndarray:
    """Pairwise ``g_k^T g_l / N`` of the normalized device updates."""
    g = np.asarray(g_norms, dtype=float)
    return g @ g.T / g.shape[1]


def _subsample(s, size, rng) -> np.ndarray:
    n = s.shape[1]
    if n <= size:
        return s
    return s[:, np.sort(rng.choice(n, size, replace=False))]


def baseline_quantization(edge_updates, c, rates, states=None) -> np.ndarray:
    """Direct per-AP A-law quantization of ``s_i`` and weighted sum at the CS."""
    s = np.asarray([getattr(e, "s", e) for e in edge_updates], dtype=float)
    rates = np.broadcast_to(np.asarray(rates, dtype=float), (s.shape[0],))
    deq = []
    for i, (row, r) in enumerate(zip(s, rates)):
        bits = codec.bits_per_element(len(row), r, len(row))
        deq.append(codec.quantize_vector(row, bits, i).dequantize())
    return codec.fuse(c, np.asarray(deq))


# --- rounds ------------------------------------------------------------------

@dataclass
class SchemeState:
    model: GlobalModel
    bf: object = None
    sigma_s: np.ndarray | None = None
    sigma_v: np.ndarray | None = None
    encoders: list | None = None
    weights: codec.DecoderWeights | None = None
    trained_round: int = 0


def _scale_floor(sigma_s) -> float:
    d = float(np.mean(np.diag(sigma_s)))
    return SIGMA_V_FLOOR * (d if d > 0 else 1.0)


def run_scheme(cfg: ExperimentConfig, scheme: str, problem: Problem):
    task = problem.task
    rates = np.broadcast_to(np.asarray(cfg.rates, dtype=float), (cfg.n_ap,)).copy()
    power = np.broadcast_to(np.asarray(cfg.power, dtype=float), (cfg.n_dev,)).copy()
    state = SchemeState(GlobalModel(problem.theta0.copy(), _learning_rate(cfg, problem, 0)))
    records, trace, d_hist = [], [], []
    bound_params = None
    if problem.optimum_loss is not None and cfg.lr == "inverse-lipschitz":
        gap0 = task.loss(problem.theta0, problem.train) - problem.optimum_loss
        bound_params = ConvergenceParams(problem.constants[0], problem.constants[1], gap0)
    n_params = pad_even(problem.theta0).size
    if scheme in ("practical", "practical-zero-side"):
        a_mat = codec.compression_matrix(n_params, cfg.sigma, np.random.default_rng([cfg.seeds.init, 7]))
        state.encoders = [codec.EncoderState.create(n_params, cfg.sigma, r, a_mat) for r in rates]

    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        stage = "local"
        try:
            ups = [local_gradient(state.model, shard, task, cfg.local_steps, cfg.local_lr)
                   for shard in problem.shards]
            g_norms = np.stack([pad_even(u.g_norm) for u in ups])
            v = np.array([u.v for u in ups])
            z = np.sqrt(v) @ g_norms
            gbar = np.array([u.gbar for u in ups])
            info = {"round": t}
            if scheme == "error-free":
                z_hat, d_sys = z, 0.0
            else:
                z_hat, d_sys, info = _communicate(cfg, scheme, state, t, g_norms, v, rates, power, n_params)
            stage = "update"
            eta = _learning_rate(cfg, problem, t - 1)
            state.model = apply_global_update(state.model, z_hat[: problem.theta0.size], gbar, eta)
        except StageError as exc:
            raise StageError(f"round {t}, {scheme}: {exc}", exc.stage, t) from exc
        except (OaflError, np.linalg.LinAlgError, ValueError) as exc:
            raise StageError(f"round {t}, {scheme}, stage {stage}: {exc}", stage, t) from exc
        d_hist.append(d_sys)
        bound = (float(convergence_bound(bound_params, d_hist, n_params)[-1]) + problem.optimum_loss
                 if bound_params is not None else float("nan"))
        err = z_hat - z
        wall = (time.perf_counter() - start) * 1e3 if cfg.record_wall_ms else 0.0
        records.append(MetricsRecord(t, scheme, task.loss(state.model.theta, problem.train),
                                     task.metric(state.model.theta, problem.test),
                                     float(err @ err), d_sys, bound, wall))
        trace.append(info)
    return records, trace


def _communicate(cfg, scheme, state: SchemeState, t, g_norms, v, rates, power, n_params):
    ch = _channel(cfg, t)
    eps = ch.aggregate_noise_power(n_params)
    corr = device_gram(g_norms)
    sub_rng = np.random.default_rng([cfg.seeds.training, t])
    noise_seed = np.random.default_rng([cfg.seeds.noise, t])
    practical = scheme != "ldsc-bound"

    stage = "init"
    try:
        if state.bf is None:
            state.bf = initial_beamformers(ch, power, np.random.default_rng([cfg.seeds.init]))
            pilot = edge_aggregate_round(g_norms, ch, state.bf, np.random.default_rng([cfg.seeds.noise, 0]))
            sub = _subsample(np.stack([e.s for e in pilot]), cfg.sigma_s_subsample, sub_rng)
            state.sigma_s = estimate_sigma_s(sub)
            if practical:
                state.sigma_v = np.maximum(codec.estimate_sigma_v(sub, rates), _scale_floor(state.sigma_s))
            else:
                state.sigma_v = feasible_start(state.sigma_s, rates)
        stats = SourceStats(state.sigma_s, state.sigma_v, rates, corr)
        stage = "optimize"
        ao = alternating_optimize(AOState(state.bf, stats), ch, v, eps, sweeps=cfg.sweeps, tol=cfg.ao_tol,
                                  optimize_sigma_v=not practical, mm_iters=cfg.mm_iters,
                                  mm_tol=cfg.mm_tol)
        ao = normalize_gauge(ao, ch)
        state.bf = ao.bf
        c = state.bf.c
        stage = "edge"
        edge = edge_aggregate_round(g_norms, ch, state.bf, noise_seed)
        s = np.stack([e.s for e in edge])
        stage = "estimate"
        sub = _subsample(s, cfg.sigma_s_subsample, sub_rng)
        sigma_s = estimate_sigma_s(sub)
        stage = "fronthaul"
        if practical:
            sigma_v = np.maximum(codec.estimate_sigma_v(sub, rates), _scale_floor(sigma_s))
            new_stats = SourceStats(sigma_s, sigma_v, rates, corr)
            if scheme == "quantization":
                z_hat = baseline_quantization(edge, c, rates)
            else:
                z_hat = _practical_decode(cfg, scheme, state, t, s, sigma_s, c)
        else:
            new_stats = SourceStats(sigma_s, ao.stats.sigma_v, rates, corr)
            mm = mm_sigma_v(new_stats, c, max_iters=cfg.mm_iters, tol=cfg.mm_tol)
            new_stats = new_stats.with_sigma_v(mm.v_diag)
            z_hat = ldsc_bound_decode(edge, new_stats, c, np.random.default_rng([cfg.seeds.noise, t, 1]))
        rep = d_system(new_stats, state.bf, ch, v, eps)
    except StageError:
        raise
    except (OaflError, np.linalg.LinAlgError, ValueError) as exc:
        raise StageError(f"{stage}: {exc}", stage, t) from exc
    state.sigma_s, state.sigma_v = new_stats.sigma_s, new_stats.v_diag
    info = {"round": t, "ao": ao.trace_dict(), "c": c.tolist(), "sigma_v": state.sigma_v.tolist(),
            "distortion": rep.to_dict()}
    return z_hat, rep.d_system, info


def _practical_decode(cfg, scheme, state: SchemeState, t, s, sigma_s, c):
    zero_side = scheme == "practical-zero-side"
    if state.weights is not None:
        state.weights = replace(state.weights, in_scale=np.sqrt(np.clip(np.diag(sigma_s), 1e-300, None)),
                                side_scale=codec.side_scales(sigma_s))
    due = state.weights is None or (cfg.retrain_every > 0 and t - state.trained_round >= cfg.retrain_every)
    if due:
        arch = codec.TrainConfig(layers=cfg.layers, hidden=cfg.hidden, epochs=cfg.train_epochs,
                                 n_vectors=cfg.train_vectors, zero_side=zero_side,
                                 feedback=cfg.train_feedback)
        epochs = cfg.train_epochs if state.weights is None else cfg.retrain_epochs
        fresh = [replace(e, delta=np.zeros_like(e.delta)) for e in state.encoders]
        state.weights = codec.train_decoder(sigma_s, c, fresh, arch, epochs,
                                            np.random.default_rng([cfg.seeds.training, t, 1]),
                                            init=state.weights)
        state.trained_round = t
    payloads = []
    for i, row in enumerate(s):
        payload, state.encoders[i] = codec.encode(row, state.encoders[i], i)
        payloads.append(payload)
    return codec.decode(payloads, state.encoders[0].a_mat, state.weights, c)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    problem = build_problem(cfg)
    records, trace = [], {"config": cfg.to_dict(), "schemes": {}}
    for scheme in cfg.schemes:
        recs, tr = run_scheme(cfg, scheme, problem)
        records.extend(recs)
        trace["schemes"][scheme] = tr
    return ExperimentResult(records, trace)


def optimize_frozen_round(cfg: ExperimentConfig) -> dict:
    """Run the alternating optimizer once on the first round's statistics.

    Local gradients at the initial model fix the device variances, a pilot
    transmission with the initial beamformers fixes ``sigma_s``; the returned
    trace holds the per-sweep objective and the final operating point.
    """
    problem = build_problem(cfg)
    rates = np.broadcast_to(np.asarray(cfg.rates, dtype=float), (cfg.n_ap,)).copy()
    power = np.broadcast_to(np.asarray(cfg.power, dtype=float), (cfg.n_dev,)).copy()
    model = GlobalModel(problem.theta0.copy(), _learning_rate(cfg, problem, 0))
    ups = [local_gradient(model, shard, problem.task, cfg.local_steps, cfg.local_lr)
           for shard in problem.shards]
    g_norms = np.stack([pad_even(u.g_norm) for u in ups])
    v = np.array([u.v for u in ups])
    ch = _channel(cfg, 1)
    eps = ch.aggregate_noise_power(g_norms.shape[1])
    bf = initial_beamformers(ch, power, np.random.default_rng([cfg.seeds.init]))
    pilot = edge_aggregate_round(g_norms, ch, bf, np.random.default_rng([cfg.seeds.noise, 0]))
    sub = _subsample(np.stack([e.s for e in pilot]), cfg.sigma_s_subsample,
                     np.random.default_rng([cfg.seeds.training, 1]))
    sigma_s = estimate_sigma_s(sub)
    stats = SourceStats(sigma_s, feasible_start(sigma_s, rates), rates,
                        device_gram(g_norms))
    ao = alternating_optimize(AOState(bf, stats), ch, v, eps, sweeps=cfg.sweeps, tol=cfg.ao_tol,
                              mm_iters=cfg.mm_iters, mm_tol=cfg.mm_tol)
    return {"config": cfg.to_dict(), **ao.trace_dict(), "beamformers": ao.bf.to_dict(),
            "stats": ao.stats.to_dict(), "distortion": d_system(ao.stats, ao.bf, ch, v, eps).to_dict()}
