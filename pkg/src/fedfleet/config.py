"""Declarative session configuration (YAML).

The schema has five sections: ``session_config``, ``benchmark_config``,
``server_training_config``, ``client_training_config`` and ``model_config``.
Unknown keys are rejected with the offending key and its line number.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .engine.models import FAMILIES, LOSSES, OPTIMIZERS

DEFAULT_CHECKPOINT_INTERVAL = 5
DEFAULT_MISS_THRESHOLD = 5
DEFAULT_DEADLINE_FACTOR = 1.5


class SchemaError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f" (key {key!r}" + (f", line {line})" if line else ")") if key else ""
        super().__init__(message + where)
        self.key, self.line = key, line


# section -> key -> (required, default)
_REQ = object()
SCHEMA: dict[str, dict[str, object]] = {
    "session_config": {
        "session_id": _REQ, "use_gpu": False, "aggregator": _REQ, "aggregator_args": None,
        "client_selection": _REQ, "client_selection_args": None,
        "checkpoint_interval": DEFAULT_CHECKPOINT_INTERVAL, "validation_round_interval": 1,
        "generate_plots": False,
        # extensions
        "termination": None, "seed": 0, "heartbeat_miss_threshold": DEFAULT_MISS_THRESHOLD,
        "deadline_factor": DEFAULT_DEADLINE_FACTOR, "state": None,
    },
    "benchmark_config": {"skip_benchmark": False, "benchmark_minibatches": 10},
    "server_training_config": {
        "model_dir": None, "global_model_validation_batch_size": None, "num_training_rounds": _REQ,
        "validation_data": None,
    },
    "client_training_config": {
        "model_id": _REQ, "model_class": None, "dataset": _REQ, "epochs": 1, "batch_size": 32,
        "learning_rate": 0.01, "train_timeout_duration_s": None, "loss_function": "crossentropy",
        "loss_function_custom": False, "optimizer": "sgd", "optimizer_custom": False,
    },
    "model_config": {
        "use_custom_dataloader": False, "custom_loader_args": None, "use_custom_trainer": False,
        "custom_trainer_args": None, "use_custom_validator": False, "custom_validator_args": None,
        "model_args": None,
    },
}
OPTIONAL_SECTIONS = {"benchmark_config", "model_config"}
TERMINATION_KEYS = {"rounds", "time_budget_s", "accuracy_threshold"}
STATE_KEYS = {"backend", "directory", "checkpoint_dir", "fsync"}
MODEL_ARG_KEYS = {"num_classes", "num_features", "family", "hidden"}
MODEL_ALIASES = {"logreg": "logreg", "logisticregression": "logreg", "logistic": "logreg", "mlp": "mlp"}


@dataclass
class Termination:
    rounds: int
    time_budget_s: float | None = None
    accuracy_threshold: float | None = None


@dataclass
class SessionConfig:
    session_id: str
    aggregator: str
    client_selection: str
    num_training_rounds: int
    model_id: str
    dataset: str
    aggregator_args: dict = field(default_factory=dict)
    client_selection_args: dict = field(default_factory=dict)
    checkpoint_interval: int = DEFAULT_CHECKPOINT_INTERVAL
    validation_round_interval: int = 1
    termination: Termination | None = None
    skip_benchmark: bool = False
    benchmark_minibatches: int = 10
    model_family: str | None = "logreg"
    hidden: int = 32
    num_classes: int | None = None
    num_features: int | None = None
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    train_timeout_duration_s: float | None = None
    loss_function: str = "crossentropy"
    optimizer: str = "sgd"
    heartbeat_miss_threshold: int = DEFAULT_MISS_THRESHOLD
    deadline_factor: float = DEFAULT_DEADLINE_FACTOR
    seed: int = 0
    validation_data: str | None = None
    state_backend: str = "memory"
    state_dir: str | None = None
    checkpoint_dir: str | None = None
    fsync: bool = False
    use_gpu: bool = False
    generate_plots: bool = False
    model_class: str | None = None
    model_dir: str | None = None
    validation_batch_size: int | None = None

    def __post_init__(self):
        if self.termination is None:
            self.termination = Termination(self.num_training_rounds)
        if self.checkpoint_interval < 1:
            raise SchemaError("checkpoint_interval must be >= 1", "checkpoint_interval")

    def hyperparameters(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "optimizer": self.optimizer, "loss": self.loss_function}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        d = dict(d)
        if isinstance(d.get("termination"), dict):
            d["termination"] = Termination(**d["termination"])
        return cls(**d)


def _null(v):
    # the sample configuration writes Python-style None
    return None if isinstance(v, str) and v.strip() == "None" else v


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """1-based line number for every mapping key path in the document."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = (*path, str(k.value))
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        walk(yaml.compose(text), ())
    except yaml.YAMLError:
        pass
    return lines


def parse_session_config(text: str) -> SessionConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise SchemaError(f"invalid YAML: {e}", line=mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise SchemaError("session file must be a mapping of sections")
    lines = _key_lines(text)

    def err(msg, *path):
        raise SchemaError(msg, ".".join(path), lines.get(tuple(path)))

    values: dict[str, dict] = {}
    for section, body in doc.items():
        if section not in SCHEMA:
            err("unknown section", section)
        body = _null(body) or {}
        if not isinstance(body, dict):
            err("section must be a mapping", section)
        for key in body:
            if key not in SCHEMA[section]:
                err("unknown key", section, key)
        values[section] = {k: _null(v) for k, v in body.items()}
    for section, keys in SCHEMA.items():
        got = values.setdefault(section, {})
        if section not in doc and section not in OPTIONAL_SECTIONS:
            err("missing section", section)
        for key, default in keys.items():
            if key not in got or got[key] is None:
                if default is _REQ:
                    err("missing required key", section, key)
                got[key] = default

    s, b = values["session_config"], values["benchmark_config"]
    srv, c, m = values["server_training_config"], values["client_training_config"], values["model_config"]

    for flag in ("use_custom_dataloader", "use_custom_trainer", "use_custom_validator"):
        if m[flag]:
            err("custom code is not supported; use the built-in trainer", "model_config", flag)
    for flag in ("loss_function_custom", "optimizer_custom"):
        if c[flag]:
            err("custom code is not supported; use a built-in choice", "client_training_config", flag)

    def mapping(v, *path) -> dict:
        if v is None:
            return {}
        if not isinstance(v, dict):
            err("expected a mapping", *path)
        return dict(v)

    def number(v, kind, *path, minimum=None):
        try:
            out = kind(v)
        except (TypeError, ValueError):
            err(f"expected {kind.__name__}", *path)
        if isinstance(v, bool) or (kind is float and not math.isfinite(out)):
            err(f"expected {kind.__name__}", *path)
        if minimum is not None and out < minimum:
            err(f"must be >= {minimum}", *path)
        return out

    model_args = mapping(m["model_args"], "model_config", "model_args")
    for key in model_args:
        if key not in MODEL_ARG_KEYS:
            err("unknown key", "model_config", "model_args", key)
    family = model_args.get("family") or MODEL_ALIASES.get(str(c["model_id"]).replace("_", "").lower())
    # an unrecognised model_id is allowed at parse time; the session refuses to start without a family
    if model_args.get("family") is not None and family not in FAMILIES:
        err(f"family must be one of {FAMILIES}", "model_config", "model_args", "family")
    loss = str(c["loss_function"]).lower().replace("_", "")
    loss = {"crossentropyloss": "crossentropy", "ce": "crossentropy", "mseloss": "mse"}.get(loss, loss)
    if loss not in LOSSES:
        err(f"loss_function must be one of {LOSSES}", "client_training_config", "loss_function")
    opt = str(c["optimizer"]).lower()
    if opt not in OPTIMIZERS:
        err(f"optimizer must be one of {OPTIMIZERS}", "client_training_config", "optimizer")

    rounds = number(srv["num_training_rounds"], int, "server_training_config", "num_training_rounds", minimum=1)
    term = mapping(s["termination"], "session_config", "termination")
    for key in term:
        if key not in TERMINATION_KEYS:
            err("unknown key", "session_config", "termination", key)
    termination = Termination(
        rounds=number(term.get("rounds", rounds), int, "session_config", "termination", "rounds", minimum=1),
        time_budget_s=None if term.get("time_budget_s") is None else
        number(term["time_budget_s"], float, "session_config", "termination", "time_budget_s", minimum=0),
        accuracy_threshold=None if term.get("accuracy_threshold") is None else
        number(term["accuracy_threshold"], float, "session_config", "termination", "accuracy_threshold"))
    state = mapping(s["state"], "session_config", "state")
    for key in state:
        if key not in STATE_KEYS:
            err("unknown key", "session_config", "state", key)
    backend = state.get("backend", "memory")
    if backend not in ("memory", "durable"):
        err("backend must be memory or durable", "session_config", "state", "backend")
    if backend == "durable" and not state.get("directory"):
        err("durable backend needs a directory", "session_config", "state", "directory")
    timeout = c["train_timeout_duration_s"]

    return SessionConfig(
        session_id=str(s["session_id"]),
        aggregator=str(s["aggregator"]),
        client_selection=str(s["client_selection"]),
        num_training_rounds=rounds,
        model_id=str(c["model_id"]),
        dataset=str(c["dataset"]),
        aggregator_args=mapping(s["aggregator_args"], "session_config", "aggregator_args"),
        client_selection_args=mapping(s["client_selection_args"], "session_config", "client_selection_args"),
        checkpoint_interval=number(s["checkpoint_interval"], int, "session_config", "checkpoint_interval",
                                   minimum=1),
        validation_round_interval=number(s["validation_round_interval"], int, "session_config",
                                         "validation_round_interval", minimum=0),
        termination=termination,
        skip_benchmark=bool(b["skip_benchmark"]),
        benchmark_minibatches=number(b["benchmark_minibatches"], int, "benchmark_config",
                                     "benchmark_minibatches", minimum=1),
        model_family=family,
        hidden=number(model_args.get("hidden", 32), int, "model_config", "model_args", "hidden", minimum=1),
        num_classes=None if model_args.get("num_classes") is None else
        number(model_args["num_classes"], int, "model_config", "model_args", "num_classes", minimum=2),
        num_features=None if model_args.get("num_features") is None else
        number(model_args["num_features"], int, "model_config", "model_args", "num_features", minimum=1),
        epochs=number(c["epochs"], int, "client_training_config", "epochs", minimum=0),
        batch_size=number(c["batch_size"], int, "client_training_config", "batch_size", minimum=1),
        learning_rate=number(c["learning_rate"], float, "client_training_config", "learning_rate"),
        train_timeout_duration_s=None if timeout is None else
        number(timeout, float, "client_training_config", "train_timeout_duration_s"),
        loss_function=loss,
        optimizer=opt,
        heartbeat_miss_threshold=number(s["heartbeat_miss_threshold"], int, "session_config",
                                        "heartbeat_miss_threshold", minimum=1),
        deadline_factor=number(s["deadline_factor"], float, "session_config", "deadline_factor"),
        seed=number(s["seed"], int, "session_config", "seed"),
        validation_data=srv["validation_data"],
        state_backend=backend,
        state_dir=state.get("directory"),
        checkpoint_dir=state.get("checkpoint_dir"),
        fsync=bool(state.get("fsync", False)),
        use_gpu=bool(s["use_gpu"]),
        generate_plots=bool(s["generate_plots"]),
        model_class=c["model_class"],
        model_dir=srv["model_dir"],
        validation_batch_size=srv["global_model_validation_batch_size"],
    )


def load_session_config(path) -> SessionConfig:
    """Parse a session file; relative server-side paths resolve against the
    file's own directory."""
    with open(path, encoding="utf-8") as fh:
        cfg = parse_session_config(fh.read())
    base = Path(path).resolve().parent
    for name in ("validation_data", "state_dir", "checkpoint_dir"):
        value = getattr(cfg, name)
        if value and not Path(value).is_absolute():
            setattr(cfg, name, str(base / value))
    return cfg
