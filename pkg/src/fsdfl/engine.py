"""Experiment orchestration: config, round loop, metrics, sweeps, cost accounting."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import data as datamod
from . import fsadmm, graph
from .fsadmm import ConfigError, HyperParams
from .nnmodel import (ModelSpec, ModelState, NumericError, forward_batch,
                      init_params)

ALGORITHMS = ("propalg", "cmfd", "decfedavg", "decfedprox", "dfedavgm")
OUTPUT_SHARING = ("propalg", "cmfd")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "propalg"
    rounds: int = 300
    global_seed: int = 1
    eval_every: int = 10
    # topology
    topology_kind: str = "ring"
    n_devices: int = 10
    edge_count: int | None = None        # random topology only
    topology_seed: int = 0
    # data
    num_classes: int = 10
    per_class: int = 200
    input_dim: int = 20
    data_seed: int = 0
    separation: float = 4.0
    partition_kind: str = "k_class"      # k_class | dirichlet
    classes_per_device: int = 1
    dirichlet_alpha: float = 0.1
    shared_count: int = 200
    shared_mode: str = "iid"
    shared_alpha: float = 10.0
    # model
    hidden_dims: tuple[int, ...] = (64, 64, 64)
    normalization: str = "none"
    # hyperparameters
    eta: float = 5e-3
    rho_hat: float = 5e-3
    nu: float = 0.01
    local_batch: int = 20
    local_steps: int = 10
    kd_batch: int = 20
    beta: float = 0.5           # averaging rate (parameter baselines)
    prox_alpha: float = 0.01    # decfedprox
    epsilon: float = 0.9        # dfedavgm momentum
    q_out: int = 8
    q_param: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"experiment.algorithm: unknown {self.algorithm!r}")
        if self.rounds < 1:
            raise ConfigError("experiment.rounds: must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("experiment.eval_every: must be >= 1")
        if self.topology_kind not in ("ring", "star", "random"):
            raise ConfigError(f"topology.kind: unknown {self.topology_kind!r}")
        if self.topology_kind == "random" and self.edge_count is None:
            raise ConfigError("topology.edge_count: required for random topologies")
        if self.partition_kind not in ("k_class", "dirichlet"):
            raise ConfigError(f"data.partition: unknown {self.partition_kind!r}")

    def hyper(self) -> HyperParams:
        return HyperParams(eta=self.eta, rho_hat=self.rho_hat, nu=self.nu,
                           local_batch=self.local_batch,
                           local_steps=self.local_steps, kd_batch=self.kd_batch,
                           q_out=self.q_out, q_param=self.q_param)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(input_dim=self.input_dim, hidden_dims=self.hidden_dims,
                         num_classes=self.num_classes,
                         normalization=self.normalization)


_TOML_KEYS = {
    ("experiment", "algorithm"): "algorithm",
    ("experiment", "rounds"): "rounds",
    ("experiment", "global_seed"): "global_seed",
    ("experiment", "eval_every"): "eval_every",
    ("topology", "kind"): "topology_kind",
    ("topology", "n"): "n_devices",
    ("topology", "edge_count"): "edge_count",
    ("topology", "seed"): "topology_seed",
    ("data", "k"): "num_classes",
    ("data", "per_class"): "per_class",
    ("data", "input_dim"): "input_dim",
    ("data", "seed"): "data_seed",
    ("data", "separation"): "separation",
    ("data", "partition"): "partition_kind",
    ("data", "classes_per_device"): "classes_per_device",
    ("data", "dirichlet_alpha"): "dirichlet_alpha",
    ("data", "shared_count"): "shared_count",
    ("data", "shared_mode"): "shared_mode",
    ("data", "shared_alpha"): "shared_alpha",
    ("model", "hidden_dims"): "hidden_dims",
    ("model", "normalization"): "normalization",
    ("hyper", "eta"): "eta",
    ("hyper", "rho_hat"): "rho_hat",
    ("hyper", "nu"): "nu",
    ("hyper", "local_batch"): "local_batch",
    ("hyper", "local_steps"): "local_steps",
    ("hyper", "kd_batch"): "kd_batch",
    ("hyper", "beta"): "beta",
    ("hyper", "prox_alpha"): "prox_alpha",
    ("hyper", "epsilon"): "epsilon",
    ("hyper", "q_out"): "q_out",
    ("hyper", "q_param"): "q_param",
}


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse the TOML config file; unknown keys are rejected with their path."""
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}")
    kwargs = {}
    for section, table in raw.items():
        if not isinstance(table, dict):
            raise ConfigError(f"{section}: expected a table")
        for key, value in table.items():
            target = _TOML_KEYS.get((section, key))
            if target is None:
                raise ConfigError(f"{section}.{key}: unknown key")
            kwargs[target] = value
    if overrides:
        kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def _json_floats(obj) -> str:
    """JSON with every float rendered at 17 significant digits."""
    if isinstance(obj, float):
        return f"{obj:.17g}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_json_floats(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_json_floats(v)}"
                              for k, v in obj.items()) + "}"
    return json.dumps(obj)


@dataclass(frozen=True)
class Metrics:
    round_idx: int
    per_device_acc: tuple[float, ...]
    avg_acc: float
    acc_gap: float
    consensus_dist: float
    cum_bytes_outputs: int
    cum_bytes_params: int


def build_topology(cfg: ExperimentConfig) -> graph.Topology:
    if cfg.topology_kind == "ring":
        return graph.build_ring(cfg.n_devices)
    if cfg.topology_kind == "star":
        return graph.build_star(cfg.n_devices)
    return graph.build_random_connected(cfg.n_devices, cfg.edge_count,
                                        cfg.topology_seed)


def build_data(cfg: ExperimentConfig):
    splits = datamod.make_synthetic(cfg.num_classes, cfg.per_class, cfg.input_dim,
                                    cfg.data_seed, separation=cfg.separation)
    if cfg.partition_kind == "k_class":
        part = datamod.partition_k_class(splits.train, cfg.n_devices,
                                         cfg.classes_per_device, cfg.data_seed)
    else:
        part = datamod.partition_dirichlet(splits.train, cfg.n_devices,
                                           cfg.dirichlet_alpha, cfg.data_seed)
    shared = datamod.sample_shared(splits.pool, cfg.shared_count,
                                   mode=cfg.shared_mode, seed=cfg.data_seed,
                                   alpha=cfg.shared_alpha)
    return splits, part, shared


def _accuracy(model: ModelState, test: datamod.Dataset) -> float:
    preds = forward_batch(model, test.inputs).argmax(axis=1)
    return float(np.mean(preds == test.labels))


def consensus_distance(outputs: np.ndarray) -> float:
    """Mean over shared samples of the mean pairwise L2 distance of outputs."""
    n = outputs.shape[0]
    if n < 2:
        return 0.0
    dists = []
    for i in range(n):
        for j in range(i + 1, n):
            dists.append(np.linalg.norm(outputs[i] - outputs[j], axis=1))
    return float(np.mean(np.stack(dists)))


def evaluate(devices, shared, test, round_idx, cum_out, cum_par) -> Metrics:
    accs = tuple(_accuracy(d.model, test) for d in devices)
    outputs = np.stack([forward_batch(d.model, shared.inputs) for d in devices])
    return Metrics(round_idx=round_idx, per_device_acc=accs,
                   avg_acc=float(np.mean(accs)),
                   acc_gap=float(max(accs) - min(accs)),
                   consensus_dist=consensus_distance(outputs),
                   cum_bytes_outputs=cum_out, cum_bytes_params=cum_par)


@dataclass
class RunResult:
    config: ExperimentConfig
    devices: list
    metrics: list[Metrics]
    traces: list

    @property
    def final(self) -> Metrics:
        return self.metrics[-1]


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   keep_outputs: bool = False) -> RunResult:
    """Fixed-round training loop; fully deterministic for a given config."""
    topo = build_topology(cfg)
    splits, part, shared = build_data(cfg)
    hp = cfg.hyper()
    w0 = init_params(cfg.model_spec(), cfg.global_seed)
    devices = fsadmm.make_devices([w0] * cfg.n_devices, splits.train, part, shared)

    records = []
    metrics: list[Metrics] = []
    traces = []
    cum_out = cum_par = 0
    for t in range(1, cfg.rounds + 1):
        if cfg.algorithm == "propalg":
            tr = fsadmm.propalg_round(devices, topo, shared, hp, t,
                                      cfg.global_seed, keep_outputs=keep_outputs)
        elif cfg.algorithm == "cmfd":
            tr = fsadmm.cmfd_round(devices, topo, shared, hp, t,
                                   cfg.global_seed, keep_outputs=keep_outputs)
        elif cfg.algorithm == "decfedavg":
            tr = fsadmm.decfedavg_round(devices, topo, hp, cfg.beta, t,
                                        cfg.global_seed)
        elif cfg.algorithm == "decfedprox":
            tr = fsadmm.decfedprox_round(devices, topo, hp, cfg.prox_alpha,
                                         cfg.beta, t, cfg.global_seed)
        else:
            tr = fsadmm.dfedavgm_round(devices, topo, hp, cfg.beta, cfg.epsilon,
                                       t, cfg.global_seed)
        cum_out += tr.bytes_outputs
        cum_par += tr.bytes_params
        traces.append(tr)
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            m = evaluate(devices, shared, splits.test, t, cum_out, cum_par)
            metrics.append(m)
            records.append({
                "round": m.round_idx,
                "per_device_acc": list(m.per_device_acc),
                "avg_acc": m.avg_acc,
                "acc_gap": m.acc_gap,
                "consensus_dist": m.consensus_dist,
                "cum_bytes_outputs": m.cum_bytes_outputs,
                "cum_bytes_params": m.cum_bytes_params,
                "hyper": {"algorithm": cfg.algorithm, "eta": cfg.eta,
                          "rho_hat": cfg.rho_hat, "nu": cfg.nu,
                          "beta": cfg.beta, "local_steps": cfg.local_steps},
            })

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
            for rec in records:
                f.write(_json_floats(rec) + "\n")
        with open(os.path.join(out_dir, "topology.txt"), "w") as f:
            f.write(topo.to_edge_list())
    return RunResult(config=cfg, devices=devices, metrics=metrics, traces=traces)


DEFAULT_ETAS = (1e-3, 6e-3, 9e-3)
DEFAULT_RHOS = (1e-3, 3e-3, 1e-2)


def cell_seed(global_seed: int, cell_index: int) -> int:
    return int(np.random.SeedSequence([global_seed, cell_index])
               .generate_state(1)[0])


def sweep(base: ExperimentConfig, etas=DEFAULT_ETAS, rhos=DEFAULT_RHOS,
          nus=None, out_path=None) -> list[dict]:
    """Deterministic grid over (eta, rho_hat[, nu]); returns one row per cell."""
    nus = [base.nu] if nus is None else list(nus)
    rows = []
    idx = 0
    for nu in nus:
        for eta in etas:
            for rho in rhos:
                cfg = replace(base, eta=eta, rho_hat=rho, nu=nu,
                              global_seed=cell_seed(base.global_seed, idx))
                try:
                    res = run_experiment(cfg)
                    acc, gap, diverged = res.final.avg_acc, res.final.acc_gap, False
                except (NumericError, FloatingPointError):
                    # runaway cell (e.g. too-large step size); score as failed
                    acc, gap, diverged = 0.0, 1.0, True
                rows.append({"eta": eta, "rho_hat": rho, "nu": nu,
                             "seed": cfg.global_seed,
                             "final_avg_acc": acc,
                             "final_acc_gap": gap,
                             "diverged": diverged})
                idx += 1
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write("eta,rho_hat,nu,seed,final_avg_acc,final_acc_gap,diverged\n")
            for r in rows:
                f.write(f"{r['eta']:.17g},{r['rho_hat']:.17g},{r['nu']:.17g},"
                        f"{r['seed']},{r['final_avg_acc']:.17g},"
                        f"{r['final_acc_gap']:.17g},{int(r['diverged'])}\n")
    return rows


def bytes_per_message(cfg: ExperimentConfig) -> int:
    """Closed-form per-link payload for the configured algorithm."""
    if cfg.algorithm in OUTPUT_SHARING:
        return cfg.q_out * cfg.num_classes * cfg.shared_count
    return cfg.q_param * cfg.model_spec().param_count


def messages_per_round(cfg: ExperimentConfig, topology: graph.Topology) -> int:
    links = 2 * len(topology.edges)   # each device receives from every neighbor
    if cfg.algorithm == "decfedprox":
        return 2 * links              # frozen prox centers plus mixing exchange
    return links


def cost_report(cfg: ExperimentConfig, measure_rounds: int = 1) -> dict:
    """Closed-form byte costs, checked against a short measured run."""
    topo = build_topology(cfg)
    per_msg = bytes_per_message(cfg)
    per_round = per_msg * messages_per_round(cfg, topo)
    res = run_experiment(replace(cfg, rounds=measure_rounds, eval_every=1))
    measured = (res.final.cum_bytes_outputs if cfg.algorithm in OUTPUT_SHARING
                else res.final.cum_bytes_params)
    return {
        "algorithm": cfg.algorithm,
        "n_params": cfg.model_spec().param_count,
        "bytes_per_message": per_msg,
        "bytes_per_round_closed_form": per_round,
        "measured_rounds": measure_rounds,
        "measured_bytes": measured,
        "closed_form_total": per_round * measure_rounds,
        "exact_match": measured == per_round * measure_rounds,
    }


def param_sharing_bytes(n_params: int, q_param: int = 4) -> int:
    return q_param * n_params


def output_sharing_bytes(num_classes: int, shared_count: int, q_out: int = 4) -> int:
    return q_out * num_classes * shared_count


def kd_overhead_ratio(cfg: ExperimentConfig) -> float:
    """Measured ratio of KD gradient steps to local gradient steps per round."""
    if cfg.algorithm not in OUTPUT_SHARING:
        raise ConfigError("kd overhead is defined for KD-based algorithms only")
    res = run_experiment(replace(cfg, rounds=1, eval_every=1))
    tr = res.traces[0]
    return tr.kd_grad_steps / tr.local_grad_steps
