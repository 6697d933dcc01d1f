"""Federated QoS regression: a small numpy MLP trained with FedAvg.

Clients hold their records privately (:class:`Client`); the coordinator only
ever sees :class:`ModelParams` and shard sizes.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fogfed.qos_data import EncodedInputs, Normalization, encode_coords

ACTIVATIONS = ("relu", "tanh", "identity")
MODEL_FORMAT = "fogfed-model"
MODEL_VERSION = 1
PREDICTION_FLOOR = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("need input width, at least one hidden layer, and the output width")
        if self.widths[-1] != 1:
            raise ValueError("output width must be 1")
        if min(self.widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def layer_slices(self):
        """(weight slice, weight shape, bias slice) per layer in the flat vector."""
        out = []
        pos = 0
        for i, o in zip(self.widths[:-1], self.widths[1:]):
            w = slice(pos, pos + i * o)
            pos += i * o
            b = slice(pos, pos + o)
            pos += o
            out.append((w, (i, o), b))
        return out


@dataclass(frozen=True)
class ModelParams:
    vector: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        v = np.array(self.vector, dtype=float)
        if v.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def layers(self):
        return [(self.vector[w].reshape(shape), self.vector[b]) for w, shape, b in self.spec.layer_slices()]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    local_epochs: int = 1
    batch_size: int = 32
    rounds: int = 20
    clients_per_round: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.local_epochs < 0 or self.batch_size < 1 or self.rounds < 0 or self.clients_per_round < 1:
            raise ValueError("invalid training configuration")


@dataclass
class EvalReport:
    mse: float
    mae: float
    history: list[tuple[int, float, float]] = field(default_factory=list)


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)) (variance 1/fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(spec.n_params)
    for w, (fan_in, fan_out), _ in spec.layer_slices():
        bound = math.sqrt(3.0 / fan_in)
        vec[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return ModelParams(vec, spec)


# --------------------------------------------------------------------------
# Forward / backward


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _first_linear(X, W, b):
    if isinstance(X, EncodedInputs):
        nu = X.n_users
        nn_ = X.n_nodes
        z = X.coords @ W[nu + nn_:] + b
        uz = X.user_index >= 0
        z[uz] += W[X.user_index[uz]]
        vz = X.node_index >= 0
        z[vz] += W[nu + X.node_index[vz]]
        return z
    return np.asarray(X) @ W + b


def _first_weight_grad(X, delta, shape):
    if isinstance(X, EncodedInputs):
        nu, nn_ = X.n_users, X.n_nodes
        g = np.zeros(shape)
        g[nu + nn_:] = X.coords.T @ delta
        uz = X.user_index >= 0
        np.add.at(g, X.user_index[uz], delta[uz])
        vz = X.node_index >= 0
        np.add.at(g, nu + X.node_index[vz], delta[vz])
        return g
    return np.asarray(X).T @ delta


def _input_width(X) -> int:
    return X.width if isinstance(X, EncodedInputs) else np.asarray(X).shape[1]


def forward(params: ModelParams, X) -> np.ndarray:
    layers = params.layers()
    act = params.spec.activation
    h = None
    for k, (W, b) in enumerate(layers):
        z = _first_linear(X, W, b) if k == 0 else h @ W + b
        h = z if k == len(layers) - 1 else _act(act, z)
    return h[:, 0]


def loss_and_grad(params: ModelParams, X, y) -> tuple[float, np.ndarray]:
    """Mean squared error over the batch and its gradient w.r.t. the flat parameter vector."""
    layers = params.layers()
    act = params.spec.activation
    zs, hs = [], []
    h = None
    for k, (W, b) in enumerate(layers):
        z = _first_linear(X, W, b) if k == 0 else h @ W + b
        zs.append(z)
        h = z if k == len(layers) - 1 else _act(act, z)
        hs.append(h)
    y = np.asarray(y, dtype=float)
    n = len(y)
    err = hs[-1][:, 0] - y
    loss = float(np.mean(err * err))
    grad = np.zeros(params.spec.n_params)
    delta = (2.0 / n) * err[:, None]
    slices = params.spec.layer_slices()
    for k in range(len(layers) - 1, -1, -1):
        wsl, shape, bsl = slices[k]
        if k == 0:
            gW = _first_weight_grad(X, delta, shape)
        else:
            gW = hs[k - 1].T @ delta
        grad[wsl] = gW.ravel()
        grad[bsl] = delta.sum(axis=0)
        if k > 0:
            W = layers[k][0]
            delta = (delta @ W.T) * _act_grad(act, zs[k - 1], hs[k - 1])
    return loss, grad


def _take(X, idx):
    if isinstance(X, EncodedInputs):
        return X.take(idx)
    return np.asarray(X)[idx]


def local_train(params: ModelParams, X, y, config: TrainConfig, *, client_id: int = 0, epoch_offset: int = 0) -> ModelParams:
    """Mini-batch SGD for ``config.local_epochs`` epochs.

    The shuffle of global epoch ``k`` for a client depends only on
    ``(config.seed, client_id, k)``, so splitting a run into consecutive
    calls with matching ``epoch_offset`` reproduces a single long run exactly.
    """
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    if _input_width(X) != params.spec.widths[0]:
        raise ValueError(f"feature width {_input_width(X)} != model input width {params.spec.widths[0]}")
    y = np.asarray(y, dtype=float)
    vec = params.vector.copy()
    spec = params.spec
    bs = config.batch_size
    for e in range(config.local_epochs):
        epoch = epoch_offset + e
        order = np.random.default_rng([config.seed, client_id, epoch]).permutation(n)
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            loss, grad = loss_and_grad(ModelParams(vec, spec), _take(X, idx), y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            vec = vec - config.learning_rate * grad
            if not np.all(np.isfinite(vec)):
                raise TrainingError(f"non-finite parameters at epoch {epoch}, batch {bi}")
    return ModelParams(vec, spec)


def fed_avg(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Shard-size weighted mean of client parameters, reduced in the order given."""
    if not updates:
        raise ValueError("no updates to average")
    spec = updates[0][0].spec
    for p, size in updates:
        if p.spec != spec:
            raise ValueError("cannot average models with different specs")
        if size <= 0:
            raise ValueError("shard sizes must be positive")
    total = float(sum(size for _, size in updates))
    base = updates[0][0].vector
    # accumulating offsets from the first vector keeps identical inputs exact
    acc = np.zeros_like(base)
    for p, size in updates[1:]:
        acc += (size / total) * (p.vector - base)
    out = base + acc
    stack = np.stack([p.vector for p, _ in updates])
    return ModelParams(np.clip(out, stack.min(axis=0), stack.max(axis=0)), spec)


def select_clients(shard_sizes: Sequence[int], k: int, rng: np.random.Generator, weighted: bool = True) -> np.ndarray:
    """Sample ``k`` distinct non-empty clients, with probability proportional to shard size if ``weighted``."""
    sizes = np.asarray(shard_sizes, dtype=float)
    eligible = np.flatnonzero(sizes > 0)
    if k > len(eligible):
        raise ValueError(f"cannot select {k} clients from {len(eligible)} non-empty shards")
    if k == len(eligible):
        return eligible
    w = sizes[eligible] if weighted else np.ones(len(eligible))
    chosen = rng.choice(len(eligible), size=k, replace=False, p=w / w.sum())
    return np.sort(eligible[chosen])


def evaluate(params: ModelParams, X, y) -> EvalReport:
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty test set")
    err = forward(params, X) - y
    return EvalReport(float(np.mean(err * err)), float(np.mean(np.abs(err))))


class Client:
    """A federated participant; its records stay inside this object."""

    def __init__(self, client_id: int, X, y):
        self.client_id = client_id
        self._X = X
        self._y = np.asarray(y, dtype=float)

    @property
    def n_samples(self) -> int:
        return len(self._y)

    def train(self, global_params: ModelParams, config: TrainConfig, round_index: int) -> tuple[ModelParams, int]:
        p = local_train(
            global_params, self._X, self._y, config,
            client_id=self.client_id, epoch_offset=round_index * config.local_epochs,
        )
        return p, self.n_samples


def run_federated_training(
    clients: Sequence[Client],
    spec: ModelSpec,
    config: TrainConfig,
    selection: str = "weighted",
    test=None,
    initial: ModelParams | None = None,
) -> tuple[ModelParams, EvalReport]:
    """FedAvg over ``config.rounds`` rounds.

    Each round samples ``clients_per_round`` clients (uniformly or weighted by
    shard size), trains them from the current global model, and averages
    their updates in ascending client-id order.  ``test`` is an ``(X, y)``
    pair evaluated after every round; round 0 is the initial model.
    """
    if selection not in ("uniform", "weighted"):
        raise ValueError(f"unknown selection {selection!r}")
    if not any(c.n_samples for c in clients):
        raise ValueError("need at least one non-empty shard")
    params = initial if initial is not None else init_model(spec, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    sizes = [c.n_samples for c in clients]
    k = min(config.clients_per_round, sum(1 for s in sizes if s > 0))
    history = []

    def record(r):
        if test is not None:
            rep = evaluate(params, *test)
            history.append((r, rep.mse, rep.mae))

    record(0)
    for r in range(config.rounds):
        chosen = select_clients(sizes, k, rng, weighted=(selection == "weighted"))
        updates = []
        for i in sorted(chosen, key=lambda i: clients[i].client_id):
            try:
                updates.append(clients[i].train(params, config, r))
            except TrainingError as exc:
                raise TrainingError(f"round {r}, client {clients[i].client_id}: {exc}") from exc
        params = fed_avg(updates)
        record(r + 1)
    if history:
        _, mse, mae = history[-1]
        report = EvalReport(mse, mae, history)
    else:
        report = EvalReport(float("nan"), float("nan"), history)
    return params, report


# --------------------------------------------------------------------------
# Prediction


@dataclass(frozen=True)
class TrainedModel:
    """A fitted model for one target plus what is needed to encode inputs and decode outputs."""

    target: str
    params: ModelParams
    normalization: Normalization
    n_users: int
    n_nodes: int

    def predict_normalized(self, inputs: EncodedInputs) -> np.ndarray:
        return forward(self.params, inputs)

    def predict(self, inputs: EncodedInputs) -> np.ndarray:
        z = self.predict_normalized(inputs)
        return np.maximum(self.normalization.denormalize(self.target, z), PREDICTION_FLOOR)


def encode_pairs(users, servers, n_users: int, n_nodes: int) -> EncodedInputs:
    """Encode every (user, server) pair, users major.  Unknown ids get an all-zero one-hot block."""
    def known(ident, n):
        return ident if ident is not None and 0 <= ident < n else -1

    ui = np.array([known(u.dataset_user_id, n_users) for u in users], dtype=np.int64)
    si = np.array([known(s.node_id, n_nodes) for s in servers], dtype=np.int64)
    ulat = np.array([u.lat for u in users], dtype=float)
    ulon = np.array([u.lon for u in users], dtype=float)
    slat = np.array([s.lat for s in servers], dtype=float)
    slon = np.array([s.lon for s in servers], dtype=float)
    nu, ns = len(users), len(servers)
    return EncodedInputs(
        np.repeat(ui, ns), np.tile(si, nu),
        encode_coords(np.repeat(ulat, ns), np.repeat(ulon, ns), np.tile(slat, nu), np.tile(slon, nu)),
        n_users, n_nodes,
    )


class QosPredictor:
    """QoS oracle backed by a response-time model and a throughput model."""

    def __init__(self, rt_model: TrainedModel, tp_model: TrainedModel):
        if (rt_model.n_users, rt_model.n_nodes) != (tp_model.n_users, tp_model.n_nodes):
            raise ValueError("rt and tp models use different encodings")
        self.rt_model = rt_model
        self.tp_model = tp_model

    def predict_matrix(self, users, servers) -> tuple[np.ndarray, np.ndarray]:
        inputs = encode_pairs(users, servers, self.rt_model.n_users, self.rt_model.n_nodes)
        shape = (len(users), len(servers))
        return self.rt_model.predict(inputs).reshape(shape), self.tp_model.predict(inputs).reshape(shape)

    def predict(self, user, server) -> tuple[float, float]:
        rt, tp = self.predict_matrix([user], [server])
        return float(rt[0, 0]), float(tp[0, 0])


def predict_qos(rt_model: TrainedModel, tp_model: TrainedModel, user, server) -> tuple[float, float]:
    return QosPredictor(rt_model, tp_model).predict(user, server)


# --------------------------------------------------------------------------
# Persistence


def save_model(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = model.normalization
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "target": model.target,
        "widths": list(model.params.spec.widths),
        "activation": model.params.spec.activation,
        "normalization": {"rt_min": n.rt_min, "rt_max": n.rt_max, "tp_min": n.tp_min, "tp_max": n.tp_max},
        "encoding": {"n_users": model.n_users, "n_nodes": model.n_nodes},
        "params": [float(x) for x in model.params.vector],
    }
    path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
    return path


def load_model(path) -> TrainedModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {doc.get('version')}")
    spec = ModelSpec(tuple(doc["widths"]), doc["activation"])
    return TrainedModel(
        target=doc["target"],
        params=ModelParams(np.array(doc["params"], dtype=float), spec),
        normalization=Normalization(**doc["normalization"]),
        n_users=doc["encoding"]["n_users"],
        n_nodes=doc["encoding"]["n_nodes"],
    )


def write_history(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("round,mse,mae\n")
        for r, mse, mae in report.history:
            fh.write(f"{r},{mse!r},{mae!r}\n")
    return path


def with_rounds(config: TrainConfig, rounds: int) -> TrainConfig:
    return replace(config, rounds=rounds)
