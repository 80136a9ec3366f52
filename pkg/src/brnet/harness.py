"""Experiment orchestration: configs, training runs, checkpoints and sweeps."""
import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import core
from .data import LabeledDataset, load_mnist, synth_blobs
from .network import (
    MODES, UMAX, DivergenceError, MeanBank, NetworkParams, OptimizerConfig,
    RegularizerConfig, evaluate, global_mi_estimate, init_weights, lr_decay,
    output_entropy, train_epoch,
)
from .neuron import EPS

DATA_DIR_ENV = "BRNET_DATA_DIR"
CSV_VERSION = 1
METRIC_COLUMNS = [
    "epoch", "mode", "beta", "train_utility", "test_utility", "train_error",
    "test_error", "global_mi", "mean_output_entropy", "alpha",
]
SWEEP_COLUMNS = ["beta", "mode", "split", "utility", "error", "status"]
CHECKPOINT_FORMAT = "brnet-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


def _none_or(cast):
    def parse(text):
        return None if text in ("", "none", "None") else cast(text)
    return parse


def _ints(text):
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


@dataclass(frozen=True)
class ExperimentConfig:
    hidden: tuple = (529, 529)
    mode: str = UMAX
    beta: float = 0.0
    tau: float = 1000.0
    epsilon: float = EPS
    alpha: float = 0.01
    gamma: float = 0.9
    eta: float = 0.002
    epochs: int = 70
    seed: int = 0
    dataset: str = "mnist"
    data_dir: str = ""
    subset: int = None
    test_subset: int = None
    blob_classes: int = 3
    blob_dim: int = 2
    blob_train: int = 200
    blob_test: int = 100
    blob_separation: float = 0.5
    blob_seed: int = 0
    max_norm: float = None
    engine: str = "auto"
    metrics: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        if self.dataset not in ("mnist", "blobs"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.engine not in ("auto", "fast", "reference"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        try:
            self.regularizer()
            self.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def regularizer(self):
        return RegularizerConfig(self.mode, self.beta, self.tau, self.epsilon)

    def optimizer(self):
        return OptimizerConfig(self.alpha, self.gamma, self.eta, self.epochs, self.seed)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return (base or cls()).updated(values)

    def updated(self, values):
        """Copy with string-valued overrides parsed to each field's type."""
        known = {f.name for f in fields(self)}
        parsed = {}
        for key, text in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                parsed[key] = _PARSERS[key](text) if isinstance(text, str) else text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
        return replace(self, **parsed)

    def data_root(self):
        return self.data_dir or os.environ.get(DATA_DIR_ENV, "data/mnist")


_PARSERS = {
    "hidden": _ints, "mode": str, "beta": float, "tau": float, "epsilon": float,
    "alpha": float, "gamma": float, "eta": float, "epochs": int, "seed": int,
    "dataset": str, "data_dir": str, "subset": _none_or(int), "test_subset": _none_or(int),
    "blob_classes": int, "blob_dim": int, "blob_train": int, "blob_test": int,
    "blob_separation": float, "blob_seed": int, "max_norm": _none_or(float),
    "engine": str, "metrics": str, "checkpoint": str,
}

PRESETS = {
    "pilot": {"hidden": (529, 529), "epochs": 50, "dataset": "mnist"},
    "full": {"epochs": 70, "dataset": "mnist"},
    "smoke": {"hidden": (16, 16), "epochs": 5, "dataset": "blobs", "alpha": 0.05, "tau": 100.0},
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(ExperimentConfig(), **{**PRESETS[name], **overrides})


def load_config(path, base=None):
    with open(path) as f:
        return ExperimentConfig.from_text(f.read(), base)


def load_datasets(config):
    if config.dataset == "blobs":
        full = synth_blobs(config.blob_classes, config.blob_train + config.blob_test,
                           config.blob_dim, config.blob_separation, seed=config.blob_seed)
        per = config.blob_train + config.blob_test
        pos = np.arange(len(full)) % per
        train = LabeledDataset(full.images[pos < config.blob_train], full.labels[pos < config.blob_train],
                               full.name + "-train", full.n_classes)
        test = LabeledDataset(full.images[pos >= config.blob_train], full.labels[pos >= config.blob_train],
                              full.name + "-test", full.n_classes)
    else:
        root = config.data_root()
        train, test = load_mnist(root, "train"), load_mnist(root, "test")
    return train.subset(config.subset), test.subset(config.test_subset)


def architecture(config, train):
    return [train.images.shape[1], *config.hidden, train.n_classes]


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, params, velocity, means, epoch=0, alpha=None, rng=None, config=None):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": params.sizes,
        "epoch": epoch,
        "alpha": alpha,
        "tau": means.tau,
        "means_warm": means.warm,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "config": config.to_text() if config is not None else None,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for l in range(params.depth):
        arrays[f"weight_{l}"] = params.weights[l]
        arrays[f"bias_{l}"] = params.biases[l]
        arrays[f"velocity_weight_{l}"] = velocity.weights[l]
        arrays[f"velocity_bias_{l}"] = velocity.biases[l]
    for l, h in enumerate(means.hidden):
        arrays[f"mean_hidden_{l}"] = h
    arrays["mean_output"] = means.output
    with open(path, "wb") as f:
        np.savez(f, **arrays)


@dataclass
class Checkpoint:
    params: NetworkParams
    velocity: NetworkParams
    means: MeanBank
    meta: dict

    @property
    def config(self):
        text = self.meta.get("config")
        return ExperimentConfig.from_text(text) if text else None


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        depth = len(meta["sizes"]) - 1
        params = NetworkParams([z[f"weight_{l}"] for l in range(depth)], [z[f"bias_{l}"] for l in range(depth)])
        velocity = NetworkParams([z[f"velocity_weight_{l}"] for l in range(depth)],
                                 [z[f"velocity_bias_{l}"] for l in range(depth)])
        means = MeanBank([z[f"mean_hidden_{l}"] for l in range(depth - 1)], z["mean_output"],
                         meta["tau"], meta["means_warm"])
    return Checkpoint(params, velocity, means, meta)


# -- commands ------------------------------------------------------------

@dataclass
class TrainResult:
    params: NetworkParams
    rows: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    @property
    def final(self):
        return self.rows[-1] if self.rows else None


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def metrics_header():
    return ",".join(METRIC_COLUMNS)


def run_training(config, datasets=None, log=None):
    """Train per ``config``; writes the metrics CSV / checkpoint named in it, if any."""
    train, test = datasets if datasets is not None else load_datasets(config)
    sizes = architecture(config, train)
    reg, opt = config.regularizer(), config.optimizer()
    params = init_weights(sizes, config.seed)
    velocity = params.zeros_like()
    means = MeanBank.for_sizes(sizes, config.tau)
    rng = np.random.default_rng(config.seed)
    alpha = config.alpha
    result = TrainResult(params)
    sink = open(config.metrics, "w", newline="") if config.metrics else io.StringIO()
    try:
        sink.write(f"# brnet-metrics v{CSV_VERSION}\n{metrics_header()}\n")
        for epoch in range(1, config.epochs + 1):
            try:
                params, velocity, means, _ = train_epoch(
                    params, velocity, means, train, reg, opt, rng=rng, alpha=alpha,
                    max_norm=config.max_norm, engine=config.engine)
            except DivergenceError as exc:
                result.diverged, result.message = True, f"epoch {epoch}: {exc}"
                break
            train_u, train_e, f_train = evaluate(params, train, config.epsilon)
            test_u, test_e, _ = evaluate(params, test, config.epsilon)
            row = {
                "epoch": epoch, "mode": config.mode, "beta": config.beta,
                "train_utility": train_u, "test_utility": test_u,
                "train_error": train_e, "test_error": test_e,
                "global_mi": global_mi_estimate(f_train, f_train.mean(axis=0), config.epsilon),
                "mean_output_entropy": output_entropy(f_train), "alpha": alpha,
            }
            result.rows.append(row)
            sink.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")
            sink.flush()
            if log:
                log(f"epoch {epoch}: train_error={train_e:.4f} test_error={test_e:.4f} test_utility={test_u:.4f}")
            alpha = lr_decay(alpha, epoch, config.eta)
    finally:
        if config.metrics:
            sink.close()
    result.params = params
    if config.checkpoint and not result.diverged:
        save_checkpoint(config.checkpoint, params, velocity, means, epoch=len(result.rows),
                        alpha=alpha, rng=rng, config=config)
    return result


def read_metrics(path):
    """Rows of a metrics or sweep CSV with numeric columns converted."""
    with open(path) as f:
        lines = [line for line in f if not line.startswith("#")]
    rows = list(csv.DictReader(lines))
    for row in rows:
        for key, value in row.items():
            if key == "epoch":
                row[key] = int(value)
            elif key not in ("mode", "split", "status"):
                row[key] = float(value)
    return rows


def run_eval(checkpoint_path, config=None, split="test"):
    """Mean utility and error of a checkpoint on the train or test split."""
    ck = load_checkpoint(checkpoint_path)
    config = config or ck.config or ExperimentConfig()
    train, test = load_datasets(config)
    dataset = train if split == "train" else test
    if dataset.images.shape[1] != ck.params.sizes[0] or dataset.n_classes != ck.params.sizes[-1]:
        raise ValueError(f"checkpoint architecture {ck.params.sizes} does not fit dataset {dataset.name}")
    utility, error, _ = evaluate(ck.params, dataset, config.epsilon)
    return utility, error


def parse_matrix(path):
    try:
        m = np.loadtxt(path, delimiter=None if _whitespace(path) else ",", ndmin=2)
    except ValueError as exc:
        raise ValueError(f"cannot parse utility matrix {path}: {exc}") from None
    return m


def _whitespace(path):
    with open(path) as f:
        return "," not in f.read()


def run_ba_solve(u, px=None, beta=0.5, tol=core.DEFAULT_TOL, max_iter=core.DEFAULT_MAX_ITER):
    u = np.asarray(u, dtype=np.float64)
    if px is None:
        px = np.full(u.shape[0], 1.0 / u.shape[0])
    report = core.blahut_arimoto(px, u, beta, tol=tol, max_iter=max_iter)
    out = report.to_dict()
    out["beta"] = beta
    out["mutual_information"] = core.mutual_information(px, report.policy)
    out["expected_utility"] = float(np.sum(np.asarray(px)[:, None] * report.policy * u))
    return out


def _sweep_one(args):
    config, beta = args
    config = replace(config, mode=UMAX if beta == 0 else config.mode, beta=beta)
    try:
        result = run_training(config)
        final = result.final or {}
        status = "diverged" if result.diverged else "ok"
    except Exception as exc:  # recorded; the sweep goes on
        final, status = {}, "failed: " + str(exc).replace(",", ";").replace("\n", " ")
    return [
        {
            "beta": beta, "mode": config.mode, "split": split,
            "utility": final.get(f"{split}_utility", float("nan")),
            "error": final.get(f"{split}_error", float("nan")),
            "status": status,
        }
        for split in ("train", "test")
    ]


def sweep_configs(config, betas, run_dir=""):
    out = []
    for beta in betas:
        c = config
        if run_dir:
            c = replace(c, metrics=os.path.join(run_dir, f"beta={beta!r}.csv"),
                        checkpoint=os.path.join(run_dir, f"beta={beta!r}.npz"))
        out.append((c, beta))
    return out


def run_sweep(config, betas, output="", run_dir="", jobs=1):
    """One training run per beta (0 means umax); returns long-form rows."""
    betas = [float(b) for b in betas]
    if not betas:
        raise ConfigError("empty beta grid")
    for b in betas:
        if not 0.0 <= b < 1.0:
            raise ConfigError(f"beta {b} outside [0, 1)")
    if config.mode == UMAX and any(b > 0 for b in betas):
        raise ConfigError("a beta sweep needs mode lrdi or grdi")
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    tasks = sweep_configs(config, betas, run_dir)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            chunks = list(pool.map(_sweep_one, tasks))
    else:
        chunks = [_sweep_one(task) for task in tasks]
    rows = [r for chunk in chunks for r in chunk]
    if output:
        with open(output, "w", newline="") as f:
            f.write(f"# brnet-sweep v{CSV_VERSION}\n" + ",".join(SWEEP_COLUMNS) + "\n")
            for r in rows:
                f.write(",".join(_fmt(r[c]) for c in SWEEP_COLUMNS) + "\n")
    return rows


__all__ = [
    "ExperimentConfig", "ConfigError", "PRESETS", "preset", "load_config", "load_datasets",
    "run_training", "run_eval", "run_ba_solve", "run_sweep", "save_checkpoint", "load_checkpoint",
    "read_metrics", "METRIC_COLUMNS", "SWEEP_COLUMNS", "MODES",
]
