"""Horizontal federated boosting with learnable per-tree learning rates.

Protocol, per forecasting task:

1. every client boosts a local ensemble of ``M`` trees (padded with zero
   leaves when early stopping cuts it short);
2. the server sorts the ensembles by client id, concatenates them into a global
   forest and broadcasts it;
3. each client evaluates the forest on its own rows once, giving a
   ``rows x (K*M)`` tree-output matrix that never leaves the client;
4. for ``e_global`` rounds the server samples clients, each runs FedProx
   mini-batch SGD on an :class:`AggLayer` (a stride-``M`` 1-d convolution plus a
   dense head) and the server averages the returned parameters weighted by
   sample count.

Everything crossing the client/server boundary goes through a :class:`Channel`
whose transcript can be audited with :func:`audit_transcript`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import gbt
from .gbt import BoostParams, Ensemble

logger = logging.getLogger(__name__)

LAYER_SCHEMA_VERSION = 1


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss (learning rate too high)."""


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 8
    p_train: float = 0.25
    e_local: int = 10
    e_global: int = 15
    patience: int = 5
    mu_prox: float = 0.125
    trees_per_client: int = 37
    channels: int = 4
    lr: float = 0.01
    batch: int = 256
    seed: int = 0
    init: str = "warm_start"

    def __post_init__(self):
        if not 0 < self.p_train <= 1:
            raise ValueError("p_train must lie in (0, 1]")
        if self.mu_prox < 0:
            raise ValueError("mu_prox must be >= 0")
        if self.trees_per_client < 1 or self.channels < 1:
            raise ValueError("trees_per_client and channels must be >= 1")
        if self.e_local < 0 or self.e_global < 0 or self.patience < 1 or self.batch < 1:
            raise ValueError("epochs/rounds must be >= 0, patience and batch >= 1")
        if self.init not in ("warm_start", "random_participant"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientData:
    """One client's private train/validation matrices for a single task."""

    client_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_valid: np.ndarray
    y_valid: np.ndarray
    feature_names: list[str] = field(default_factory=list)


@dataclass
class GlobalForest:
    client_order: list[int]
    ensembles: list[Ensemble]

    @property
    def n_clients(self) -> int:
        return len(self.ensembles)

    @property
    def trees_per_client(self) -> int:
        return len(self.ensembles[0].trees)

    @property
    def feature_names(self) -> list[str]:
        return self.ensembles[0].feature_names

    @property
    def base_scores(self) -> np.ndarray:
        return np.array([e.base_score for e in self.ensembles])

    def to_document(self) -> dict:
        return {
            "version": gbt.SCHEMA_VERSION,
            "client_order": list(self.client_order),
            "ensembles": [gbt.to_document(e) for e in self.ensembles],
        }

    @classmethod
    def from_document(cls, doc: dict) -> GlobalForest:
        if doc.get("version") != gbt.SCHEMA_VERSION:
            raise gbt.ModelFormatError(f"unsupported forest version {doc.get('version')!r}")
        return cls([int(c) for c in doc["client_order"]], [gbt.from_document(e) for e in doc["ensembles"]])


@dataclass
class AggLayer:
    """Conv kernels ``(C, M)``, conv bias ``(C,)``, dense weights ``(C*K,)`` and bias.

    The dense weights index the flattened activation ``z[c_out, k]`` in row-major
    order, i.e. position ``c_out * K + k``.
    """

    conv_weights: np.ndarray
    conv_bias: np.ndarray
    dense_weights: np.ndarray
    dense_bias: float

    @property
    def channels(self) -> int:
        return self.conv_weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.conv_weights.shape[1]

    @property
    def n_blocks(self) -> int:
        return len(self.dense_weights) // self.channels

    @property
    def n_params(self) -> int:
        return self.conv_weights.size + self.conv_bias.size + self.dense_weights.size + 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.conv_weights.ravel(), self.conv_bias, self.dense_weights, [self.dense_bias]]
        )

    def with_vector(self, v: np.ndarray) -> AggLayer:
        C, M = self.conv_weights.shape
        v = np.asarray(v, dtype=float)
        if len(v) != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {len(v)}")
        a, b = C * M, C * M + C
        return AggLayer(v[:a].reshape(C, M).copy(), v[a:b].copy(), v[b:-1].copy(), float(v[-1]))

    def copy(self) -> AggLayer:
        return self.with_vector(self.to_vector())

    def to_dict(self) -> dict:
        return {
            "version": LAYER_SCHEMA_VERSION,
            "conv_weights": self.conv_weights.tolist(),
            "conv_bias": self.conv_bias.tolist(),
            "dense_weights": self.dense_weights.tolist(),
            "dense_bias": float(self.dense_bias),
        }

    @classmethod
    def from_dict(cls, d: dict) -> AggLayer:
        if d.get("version") != LAYER_SCHEMA_VERSION:
            raise gbt.ModelFormatError(f"unsupported layer version {d.get('version')!r}")
        layer = cls(
            np.array(d["conv_weights"], dtype=float),
            np.array(d["conv_bias"], dtype=float),
            np.array(d["dense_weights"], dtype=float),
            float(d["dense_bias"]),
        )
        if not np.isfinite(layer.to_vector()).all():
            raise gbt.ModelFormatError("non-finite layer parameter")
        return layer


# -- forest ----------------------------------------------------------------------


def local_fit_ensembles(
    clients: Sequence[ClientData],
    params: BoostParams,
    trees_per_client: int,
    patience: int = 5,
    n_jobs: int = 1,
) -> list[Ensemble]:
    """One early-stopped ensemble per client, zero-padded to ``trees_per_client``."""
    p = BoostParams(**{**asdict(params), "n_trees": trees_per_client})
    out = []
    for c in clients:
        if len(c.y_train) == 0:
            raise ValueError(f"client {c.client_id} has no training rows")
        eval_set = (c.X_valid, c.y_valid) if len(c.y_valid) else None
        ens = gbt.fit_ensemble(
            c.X_train, c.y_train, p, c.feature_names or None, eval_set=eval_set,
            patience=patience if eval_set else None, n_jobs=n_jobs,
        )
        out.append(ens.padded(trees_per_client))
    return out


def aggregate_forest(ensembles: Sequence[Ensemble], client_ids: Sequence[int]) -> GlobalForest:
    if len(ensembles) != len(client_ids) or not ensembles:
        raise ValueError("need one ensemble per client id")
    names = ensembles[0].feature_names
    M = len(ensembles[0].trees)
    for e in ensembles:
        if e.feature_names != names:
            raise ValueError("client ensembles disagree on feature names")
        if len(e.trees) != M:
            raise ValueError("client ensembles must have equal tree counts")
    order = sorted(range(len(client_ids)), key=lambda i: client_ids[i])
    return GlobalForest([int(client_ids[i]) for i in order], [ensembles[i] for i in order])


def forest_outputs(forest: GlobalForest, X) -> np.ndarray:
    """Unscaled leaf outputs; column ``c*M + m`` is tree ``m`` of client block ``c``."""
    return np.hstack([e.tree_outputs(X) for e in forest.ensembles])


# -- aggregation layer -----------------------------------------------------------


def init_agg_layer(forest: GlobalForest, eta: float, channels: int) -> AggLayer:
    """Initial weights whose output is the mean of the clients' local predictions."""
    K, M = forest.n_clients, forest.trees_per_client
    if channels < 1:
        raise ValueError("channels must be >= 1")
    return AggLayer(
        np.full((channels, M), float(eta)),
        np.zeros(channels),
        np.full(channels * K, 1.0 / (K * channels)),
        float(np.mean(forest.base_scores)),
    )


def init_from_participant(forest: GlobalForest, eta: float, channels: int, block: int) -> AggLayer:
    """Initial weights reproducing a single client's local model."""
    K, M = forest.n_clients, forest.trees_per_client
    dense = np.zeros((channels, K))
    dense[:, block] = 1.0 / channels
    return AggLayer(
        np.full((channels, M), float(eta)),
        np.zeros(channels),
        dense.ravel(),
        float(forest.base_scores[block]),
    )


def _activations(layer: AggLayer, T: np.ndarray) -> np.ndarray:
    """``z[n, c_out, k]`` for tree outputs ``T`` of shape ``(n, K*M)``."""
    n = len(T)
    M = layer.kernel
    if T.ndim != 2 or T.shape[1] % M or T.shape[1] // M != layer.n_blocks:
        raise ValueError(f"tree-output width {T.shape[-1]} does not match the layer")
    blocks = T.reshape(n, -1, M)
    return np.einsum("nkm,cm->nck", blocks, layer.conv_weights) + layer.conv_bias[None, :, None]


def agg_forward(layer: AggLayer, tree_vec) -> np.ndarray | float:
    """Layer output for one tree-output vector or a batch of them."""
    T = np.asarray(tree_vec, dtype=float)
    single = T.ndim == 1
    T = np.atleast_2d(T)
    z = _activations(layer, T)
    out = z.reshape(len(T), -1) @ layer.dense_weights + layer.dense_bias
    return float(out[0]) if single else out


def prox_objective(layer: AggLayer, T, y, anchor: AggLayer | None = None, mu: float = 0.0) -> float:
    """Mean squared error plus ``mu/2 * ||w - anchor||^2``."""
    r = agg_forward(layer, np.atleast_2d(T)) - np.asarray(y, dtype=float)
    loss = float(np.mean(r**2))
    if anchor is not None and mu > 0:
        d = layer.to_vector() - anchor.to_vector()
        loss += 0.5 * mu * float(d @ d)
    return loss


def prox_gradient(layer: AggLayer, T, y, anchor: AggLayer | None = None, mu: float = 0.0) -> np.ndarray:
    """Gradient of :func:`prox_objective`, flattened like :meth:`AggLayer.to_vector`."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(T)
    M, C, K = layer.kernel, layer.channels, layer.n_blocks
    z = _activations(layer, T)
    zf = z.reshape(n, -1)
    r = zf @ layer.dense_weights + layer.dense_bias - y
    d_out = 2.0 * r / n
    g_dense = zf.T @ d_out
    g_dbias = d_out.sum()
    g_z = d_out[:, None, None] * layer.dense_weights.reshape(C, K)[None]
    g_conv = np.einsum("nck,nkm->cm", g_z, T.reshape(n, K, M))
    g_cbias = g_z.sum(axis=(0, 2))
    grad = np.concatenate([g_conv.ravel(), g_cbias, g_dense, [g_dbias]])
    if anchor is not None and mu > 0:
        grad = grad + mu * (layer.to_vector() - anchor.to_vector())
    return grad


def local_prox_epochs(
    layer_global: AggLayer,
    T_train: np.ndarray,
    y_train: np.ndarray,
    T_valid: np.ndarray | None,
    y_valid: np.ndarray | None,
    cfg: FedConfig,
    rng: np.random.Generator,
) -> tuple[AggLayer, dict]:
    """FedProx local solver with validation early stopping.

    Runs up to ``cfg.e_local`` epochs of shuffled mini-batch SGD on
    ``MSE + mu/2 ||w - w_global||^2`` and returns the epoch snapshot with the
    lowest validation MSE (training MSE when the client has no validation rows).
    """
    info = {"epochs": 0, "train": prox_objective(layer_global, T_train, y_train), "valid": None}
    if cfg.e_local == 0:
        return layer_global.copy(), info
    has_valid = T_valid is not None and len(T_valid) > 0
    # overflow is detected and reported below, so numpy's warnings are noise here
    with np.errstate(over="ignore", invalid="ignore"):
        best_w = _prox_epochs_loop(layer_global, T_train, y_train, T_valid, y_valid, has_valid, cfg, rng, info)
    return layer_global.with_vector(best_w), info


def _prox_epochs_loop(layer_global, T_train, y_train, T_valid, y_valid, has_valid, cfg, rng, info):
    layer = layer_global.copy()
    w = layer_global.to_vector()
    best_w, best_score, stale = None, np.inf, 0
    n = len(y_train)
    for epoch in range(cfg.e_local):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = perm[start : start + cfg.batch]
            layer = layer.with_vector(w)
            grad = prox_gradient(layer, T_train[idx], y_train[idx], layer_global, cfg.mu_prox)
            w = w - cfg.lr * grad
        layer = layer.with_vector(w)
        train_mse = prox_objective(layer, T_train, y_train)
        if not np.isfinite(train_mse) or not np.isfinite(w).all():
            raise DivergenceError(f"non-finite loss in local epoch {epoch + 1}; lower the learning rate")
        score = prox_objective(layer, T_valid, y_valid) if has_valid else train_mse
        info["epochs"] = epoch + 1
        if score < best_score:
            best_w, best_score, stale = w.copy(), score, 0
            info["train"], info["valid"] = train_mse, score if has_valid else None
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_w


def fedprox_aggregate(updates: Sequence[tuple[AggLayer, int]]) -> AggLayer:
    """Parameter-wise average weighted by sample count."""
    if not updates:
        raise ValueError("no updates to aggregate")
    weights = np.array([float(n) for _, n in updates])
    if weights.sum() <= 0:
        weights = np.ones(len(updates))
    V = np.stack([layer.to_vector() for layer, _ in updates])
    return updates[0][0].with_vector(weights @ V / weights.sum())


def predict_global(forest: GlobalForest, layer: AggLayer, X, clamp: bool = True) -> np.ndarray:
    out = agg_forward(layer, forest_outputs(forest, X))
    out = np.atleast_1d(out)
    return np.maximum(out, 0.0) if clamp else out


# -- simulated wire ----------------------------------------------------------------

SERVER = "server"
ALLOWED_KINDS = ("ensemble", "forest", "agg_layer", "agg_update")


@dataclass
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    payload: Any


class Channel:
    """In-process message channel; payloads are JSON-encoded on send."""

    def __init__(self):
        self.transcript: list[Message] = []

    def send(self, round_: int, sender: str, receiver: str, kind: str, payload: Any) -> Any:
        if kind not in ALLOWED_KINDS:
            raise ValueError(f"message kind {kind!r} may not cross the client boundary")
        wire = json.dumps(payload, allow_nan=False, separators=(",", ":"))
        self.transcript.append(Message(round_, sender, receiver, kind, wire))
        return json.loads(wire)


def _client_name(cid: int) -> str:
    return f"client-{cid}"


_UPDATE_KEYS = {"layer", "n_samples", "train_loss", "valid_loss"}
_LAYER_KEYS = {"version", "conv_weights", "conv_bias", "dense_weights", "dense_bias"}


def audit_transcript(transcript: Sequence[Message], n_params: int | None = None) -> list[str]:
    """Return a list of violations; empty means only model payloads crossed the wire.

    Allowed payloads: ensemble documents, the broadcast forest, layer parameters,
    and client updates made of layer parameters plus scalar bookkeeping
    (sample count and losses).
    """
    problems = []

    def check_layer(d, where):
        if not isinstance(d, dict) or set(d) != _LAYER_KEYS:
            problems.append(f"{where}: malformed layer payload")
            return
        try:
            layer = AggLayer.from_dict(d)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"{where}: {exc}")
            return
        if n_params is not None and layer.n_params != n_params:
            problems.append(f"{where}: layer has {layer.n_params} parameters, expected {n_params}")

    for i, msg in enumerate(transcript):
        where = f"message {i} ({msg.kind} {msg.sender}->{msg.receiver})"
        if msg.kind not in ALLOWED_KINDS:
            problems.append(f"{where}: kind not allowed")
            continue
        payload = json.loads(msg.payload)
        if msg.kind == "ensemble":
            try:
                gbt.from_document(payload)
            except Exception as exc:  # noqa: BLE001
                problems.append(f"{where}: not an ensemble document ({exc})")
        elif msg.kind == "forest":
            try:
                GlobalForest.from_document(payload)
            except Exception as exc:  # noqa: BLE001
                problems.append(f"{where}: not a forest document ({exc})")
        elif msg.kind == "agg_layer":
            check_layer(payload, where)
        elif msg.kind == "agg_update":
            if not isinstance(payload, dict) or set(payload) != _UPDATE_KEYS:
                problems.append(f"{where}: unexpected update fields")
                continue
            check_layer(payload["layer"], where)
            if not isinstance(payload["n_samples"], int):
                problems.append(f"{where}: n_samples must be an integer count")
            for key in ("train_loss", "valid_loss"):
                v = payload[key]
                if v is not None and not isinstance(v, (int, float)):
                    problems.append(f"{where}: {key} must be a scalar")
    return problems


class _Client:
    """Client-side state; its data is only read through its own methods."""

    def __init__(self, data: ClientData):
        self._data = data
        self.client_id = data.client_id
        self._T_train = None
        self._T_valid = None

    @property
    def n_samples(self) -> int:
        return len(self._data.y_train)

    def fit_local(self, params: BoostParams, cfg: FedConfig, n_jobs: int) -> dict:
        (ens,) = local_fit_ensembles([self._data], params, cfg.trees_per_client, cfg.patience, n_jobs)
        return gbt.to_document(ens)

    def receive_forest(self, doc: dict) -> None:
        forest = GlobalForest.from_document(doc)
        self._T_train = forest_outputs(forest, self._data.X_train)
        self._T_valid = forest_outputs(forest, self._data.X_valid) if len(self._data.y_valid) else None

    def train_round(self, layer_doc: dict, cfg: FedConfig, round_: int) -> dict:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, round_, self.client_id + 1]))
        layer, info = local_prox_epochs(
            AggLayer.from_dict(layer_doc),
            self._T_train,
            self._data.y_train,
            self._T_valid,
            self._data.y_valid if self._T_valid is not None else None,
            cfg,
            rng,
        )
        return {
            "layer": layer.to_dict(),
            "n_samples": self.n_samples,
            "train_loss": float(info["train"]),
            "valid_loss": None if info["valid"] is None else float(info["valid"]),
        }


@dataclass
class FederationRun:
    config: FedConfig
    rounds: list[dict]
    forest: GlobalForest
    layer: AggLayer
    initial_layer: AggLayer
    transcript: list[Message] = field(default_factory=list, repr=False)

    def log_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.rounds]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")

    def predict(self, X, clamp: bool = True) -> np.ndarray:
        return predict_global(self.forest, self.layer, X, clamp=clamp)


def select_clients(client_ids: Sequence[int], p: float, rng: np.random.Generator) -> list[int]:
    """Independent Bernoulli(p) selection, redrawn until non-empty."""
    ids = sorted(client_ids)
    while True:
        chosen = [c for c, u in zip(ids, rng.random(len(ids))) if u < p]
        if chosen:
            return chosen


def run_federation(
    clients: Sequence[ClientData],
    cfg: FedConfig,
    params: BoostParams = BoostParams(),
    n_jobs: int = 1,
) -> FederationRun:
    if not clients:
        raise ValueError("no clients")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    channel = Channel()
    nodes = {c.client_id: _Client(c) for c in clients}

    # stage 1-2: local ensembles up, sorted forest down
    docs, doc_ids = [], []
    for cid in sorted(nodes):
        doc = nodes[cid].fit_local(params, cfg, n_jobs)
        docs.append(channel.send(0, _client_name(cid), SERVER, "ensemble", doc))
        doc_ids.append(cid)
    forest = aggregate_forest([gbt.from_document(d) for d in docs], doc_ids)
    forest_doc = forest.to_document()
    for cid in sorted(nodes):
        # stage 3: each client computes tree outputs on its own rows
        nodes[cid].receive_forest(channel.send(0, SERVER, _client_name(cid), "forest", forest_doc))

    if cfg.init == "random_participant":
        pick_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        block = int(pick_rng.integers(forest.n_clients))
        layer = init_from_participant(forest, params.eta, cfg.channels, block)
    else:
        layer = init_agg_layer(forest, params.eta, cfg.channels)
    initial = layer.copy()

    rounds = []
    for r in range(1, cfg.e_global + 1):
        sel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r]))
        selected = select_clients(list(nodes), cfg.p_train, sel_rng)
        layer_doc = layer.to_dict()
        updates, losses = [], {}
        for cid in selected:
            received = channel.send(r, SERVER, _client_name(cid), "agg_layer", layer_doc)
            upd = channel.send(r, _client_name(cid), SERVER, "agg_update", nodes[cid].train_round(received, cfg, r))
            updates.append((AggLayer.from_dict(upd["layer"]), upd["n_samples"]))
            losses[str(cid)] = {"train": upd["train_loss"], "valid": upd["valid_loss"]}
        layer = fedprox_aggregate(updates)
        rounds.append(
            {
                "round": r,
                "selected": selected,
                "client_losses": losses,
                "global_param_l2": float(np.linalg.norm(layer.to_vector())),
            }
        )
        logger.debug("round %d: clients %s, |w| = %.6g", r, selected, rounds[-1]["global_param_l2"])
    return FederationRun(cfg, rounds, forest, layer, initial, channel.transcript)


# -- model files -------------------------------------------------------------------


def global_model_document(run_or_forest, layer: AggLayer | None = None) -> dict:
    if isinstance(run_or_forest, FederationRun):
        forest, layer = run_or_forest.forest, run_or_forest.layer
    else:
        forest = run_or_forest
    return {"forest": forest.to_document(), "layer": layer.to_dict()}


def load_global_model(doc: dict) -> tuple[GlobalForest, AggLayer]:
    return GlobalForest.from_document(doc["forest"]), AggLayer.from_dict(doc["layer"])
