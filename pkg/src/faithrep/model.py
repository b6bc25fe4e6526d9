"""Prediction model g, explanation model h, and the shared feature network f.

``g(x) = softmax(W^T f(x))`` and ``h(x) = softmax(sum_n alpha_n f(x_n)^T f(x))``.
Both read the same feature network, so every parameter update to f changes
the training-set features used by h.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .gates import GateParams, deterministic_gates, effective_influence

CHECKPOINT_VERSION = 1


class StaleFeaturesError(RuntimeError):
    """Training features were computed for an older feature-network version."""


def layer_names(n_layers: int) -> list[str]:
    names = []
    for i in range(n_layers):
        names += [f"theta.W{i}", f"theta.b{i}"]
    return names


@dataclass
class FeatureNet:
    """ReLU MLP producing the penultimate representation f(x)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0
    version: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else self._in_dim

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1] if self.weights else self._in_dim

    # zero-layer nets are the identity; they still need to know their width
    _in_dim: int = field(default=0, repr=False)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"theta.W{i}"] = w
            out[f"theta.b{i}"] = b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.weights = [params[f"theta.W{i}"] for i in range(self.n_layers)]
        self.biases = [params[f"theta.b{i}"] for i in range(self.n_layers)]
        self.version += 1


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_feature_net(
    in_dim: int, hidden: int, n_layers: int, dropout: float, rng: np.random.Generator
) -> FeatureNet:
    weights, biases = [], []
    width = in_dim
    for _ in range(n_layers):
        weights.append(glorot(width, hidden, rng))
        biases.append(np.zeros((1, hidden)))
        width = hidden
    return FeatureNet(weights, biases, dropout=dropout, _in_dim=in_dim)


def dropout_mask(shape: tuple[int, int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def features(
    net: FeatureNet, X: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None
) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise dc.ShapeError(f"expected {net.in_dim} feature columns, got shape {X.shape}")
    train = mode == "train" and net.dropout > 0.0
    if train and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    h = X
    for w, b in zip(net.weights, net.biases):
        h = np.maximum(h @ w + b, 0.0)
        if train:
            h = h * dropout_mask(h.shape, net.dropout, rng)
    return h


def similarity(net: FeatureNet, x_n: np.ndarray, x: np.ndarray) -> float:
    """Inner product of eval-mode features."""
    f = features(net, np.vstack([np.ravel(x_n), np.ravel(x)]))
    return float(f[0] @ f[1])


@dataclass
class PredictionModel:
    net: FeatureNet
    W: np.ndarray


def predict_g(
    model: PredictionModel, X: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None
) -> np.ndarray:
    return dc.softmax(features(model.net, X, mode, rng) @ model.W)


class ExplanationModel:
    """Representer-point explainer sharing the feature network of g."""

    def __init__(self, net: FeatureNet, X_train: np.ndarray) -> None:
        self.net = net
        self.X_train = np.asarray(X_train, dtype=np.float64)
        self.refresh()

    def refresh(self) -> None:
        self.F_train = features(self.net, self.X_train)
        self._version = self.net.version

    def logits(self, X: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
        if self._version != self.net.version:
            raise StaleFeaturesError(
                f"training features at version {self._version}, network at {self.net.version}"
            )
        if coefficients.shape[0] != self.F_train.shape[0]:
            raise dc.ShapeError(
                f"coefficients have {coefficients.shape[0]} rows, training set has {self.F_train.shape[0]}"
            )
        # (B x K) @ (K x C): same as sum_n alpha_n k(x_n, x), cheaper for N > C
        return features(self.net, X) @ (self.F_train.T @ coefficients)


def predict_h(expl: ExplanationModel, X: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    return dc.softmax(expl.logits(X, coefficients))


def truncate_top_u(coefficients: np.ndarray, ranking: np.ndarray, U: int) -> np.ndarray:
    """Keep coefficients at the U highest-ranked entries, zero the rest.

    Ties are broken toward the lowest row-major (n, c) position.
    """
    if U < 0:
        raise ValueError("U must be non-negative")
    flat_rank = np.asarray(ranking, dtype=np.float64).reshape(-1)
    if U >= flat_rank.size:
        return coefficients.copy()
    # stable sort on -rank keeps lower flat index first among equals
    keep = np.argsort(-flat_rank, kind="stable")[:U]
    out = np.zeros(flat_rank.size)
    out[keep] = np.asarray(coefficients).reshape(-1)[keep]
    return out.reshape(coefficients.shape)


def argmax_rows(P: np.ndarray) -> np.ndarray:
    """Row argmax; numpy already returns the lowest index on ties."""
    return np.argmax(P, axis=1)


@dataclass
class TrainedModel:
    """Everything needed to predict with g and explain with h."""

    method: str
    net: FeatureNet
    W: np.ndarray | None
    X_train: np.ndarray
    A: np.ndarray | None = None
    gates: GateParams | None = None
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.explainer = ExplanationModel(self.net, self.X_train)

    @property
    def uses_gates(self) -> bool:
        return self.gates is not None

    def coefficients(self) -> np.ndarray:
        return effective_influence(self.gates) if self.gates is not None else self.A

    def ranking(self) -> np.ndarray:
        return deterministic_gates(self.gates) if self.gates is not None else self.A

    def truncated(self, U: int | None) -> np.ndarray:
        coef = self.coefficients()
        if U is None:
            return coef
        return truncate_top_u(coef, self.ranking(), U)

    def g_proba(self, X: np.ndarray) -> np.ndarray:
        if self.W is None:
            raise ValueError(f"method {self.method} has no prediction model g")
        return predict_g(PredictionModel(self.net, self.W), X)

    def h_proba(self, X: np.ndarray, U: int | None = None) -> np.ndarray:
        return predict_h(self.explainer, X, self.truncated(U))

    def h_logits(self, X: np.ndarray, U: int | None = None) -> np.ndarray:
        return self.explainer.logits(X, self.truncated(U))


# -- checkpoint ------------------------------------------------------------


def save_checkpoint(path, model: TrainedModel) -> None:
    arrays = {f"net.{k}": v for k, v in model.net.params().items()}
    arrays["X_train"] = model.X_train
    if model.W is not None:
        arrays["W"] = model.W
    if model.A is not None:
        arrays["A"] = model.A
    if model.gates is not None:
        arrays["M"] = model.gates.M
        arrays["S"] = model.gates.S
    header = {
        "version": CHECKPOINT_VERSION,
        "method": model.method,
        "n_layers": model.net.n_layers,
        "in_dim": model.net.in_dim,
        "dropout": model.net.dropout,
        "sigma": model.gates.sigma if model.gates is not None else None,
        "fingerprint": model.fingerprint,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "meta": model.meta,
    }
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> TrainedModel:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "header"}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"checkpoint array {k} has shape {arrays[k].shape}, header says {shape}")
    n = header["n_layers"]
    net = FeatureNet(
        [arrays[f"net.theta.W{i}"] for i in range(n)],
        [arrays[f"net.theta.b{i}"] for i in range(n)],
        dropout=header["dropout"],
        _in_dim=header["in_dim"],
    )
    gates = None
    if "M" in arrays:
        gates = GateParams(arrays["M"], arrays["S"], header["sigma"])
    return TrainedModel(
        method=header["method"],
        net=net,
        W=arrays.get("W"),
        X_train=arrays["X_train"],
        A=arrays.get("A"),
        gates=gates,
        fingerprint=header["fingerprint"],
        meta=header["meta"],
    )
