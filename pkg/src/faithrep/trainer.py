"""Minibatch Adam training with gate sampling, early stopping, and eta tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Dataset, Splits
from .evaluation import accuracy, faithfulness
from .gates import PRNG_NAME, GateParams, GateSample, draw_noise, make_rng, open_gate_count
from .model import FeatureNet, TrainedModel, dropout_mask, features, glorot, init_feature_net
from .objectives import Batch, LossBreakdown, Method, build_graph, build_loss, gated, trainable_names

log = logging.getLogger(__name__)

ETA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    lam: float = 1.0
    eta: float = 0.0
    sigma: float = 0.5
    mc_samples: int = 1
    batch: int = 32
    lr: float = 1e-3
    dropout: float = 0.3
    hidden: int = 64
    n_layers: int = 3
    max_epochs: int = 10000
    patience: int = 100
    seed: int = 0
    top_u: int = 10
    eta_grid: tuple[float, ...] = ETA_GRID
    early_stop: str = "loss"
    joint_uses_gates: bool = False
    init_scale: float = 0.01
    init_mu: float = 0.5

    def __post_init__(self) -> None:
        self.eta_grid = tuple(float(e) for e in self.eta_grid)
        for name in ("sigma", "lr", "batch", "mc_samples", "max_epochs", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.early_stop not in ("loss", "accuracy"):
            raise ValueError("early_stop must be 'loss' or 'accuracy'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta_grid"] = list(self.eta_grid)
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; returns new arrays for the updated entries."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = dict(params)
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise dc.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
            v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        # an overflowed second moment would silently freeze the parameter
        if not (np.isfinite(m).all() and np.isfinite(v).all()):
            raise dc.NonFiniteError(f"non-finite Adam moments for {k}")
        out[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


@dataclass
class EpochLog:
    phase: int
    epoch: int
    data: float
    match: float
    reg: float
    total: float
    val_metric: float


@dataclass
class TrainHistory:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: dict[int, int] = field(default_factory=dict)
    best_metric: dict[int, float] = field(default_factory=dict)
    steps: int = 0
    gate_draws_per_step: int = 0
    seconds: float = 0.0

    def lines(self) -> list[str]:
        out = ["phase\tepoch\tdata\tmatch\treg\ttotal\tval_metric"]
        for e in self.epochs:
            out.append(
                f"{e.phase}\t{e.epoch}\t{e.data!r}\t{e.match!r}\t{e.reg!r}\t{e.total!r}\t{e.val_metric!r}"
            )
        return out

    def comparable(self) -> tuple:
        """Everything except wall-clock time."""
        return (
            [asdict(e) for e in self.epochs],
            self.best_epoch,
            self.best_metric,
            self.steps,
            self.gate_draws_per_step,
        )


def init_params(method: Method, D: int, C: int, N: int, hp: Hyperparams) -> dict[str, np.ndarray]:
    # separate streams so the network init does not depend on the method
    rng = make_rng([hp.seed, 0])
    net = init_feature_net(D, hp.hidden, hp.n_layers, hp.dropout, rng)
    params = dict(net.params())
    K = net.out_dim
    W = glorot(K, C, rng)
    if method.trains_g:
        params["W"] = W
    rng = make_rng([hp.seed, 1])
    if gated(method, hp.joint_uses_gates):
        params["S"] = hp.init_scale * rng.standard_normal((N, C))
        params["M"] = np.full((N, C), hp.init_mu)
    else:
        params["A"] = hp.init_scale * rng.standard_normal((N, C))
    return params


def to_model(
    method: Method, params: dict, hp: Hyperparams, X_train: np.ndarray, fingerprint: str = "", meta=None
) -> TrainedModel:
    n = hp.n_layers
    net = FeatureNet(
        [params[f"theta.W{i}"] for i in range(n)],
        [params[f"theta.b{i}"] for i in range(n)],
        dropout=hp.dropout,
        _in_dim=X_train.shape[1],
    )
    gates = GateParams(params["M"], params["S"], hp.sigma) if "M" in params else None
    return TrainedModel(
        method=method.value,
        net=net,
        W=params.get("W"),
        X_train=X_train,
        A=params.get("A"),
        gates=gates,
        fingerprint=fingerprint,
        meta=meta or {},
    )


class _Phase:
    """One early-stopped optimization phase over a fixed trainable set."""

    def __init__(self, method: Method, phase: int, hp: Hyperparams, X_tr, Y_tr, X_val, Y_val):
        self.method = method
        self.phase = phase
        self.hp = hp
        self.X_tr, self.Y_tr, self.X_val, self.Y_val = X_tr, Y_tr, X_val, Y_val
        self.raw = (X_tr, X_val)
        self.frozen_features = method.two_phase and phase == 2
        self.trainable = trainable_names(method, hp.n_layers, phase, hp.joint_uses_gates)
        self.needs_h = not (method.two_phase and phase == 1)
        self.use_gates = gated(method, hp.joint_uses_gates) and self.needs_h
        # frozen features in the second pretrain phase run without dropout
        self.dropout = hp.dropout > 0 and hp.n_layers > 0 and not self.frozen_features
        self.J = hp.mc_samples if self.use_gates else 0
        n_layers = 0 if self.frozen_features else hp.n_layers
        kw = dict(n_layers=n_layers, sigma=hp.sigma, phase=phase, joint_uses_gates=hp.joint_uses_gates)
        self.train_tape = build_graph(method, n_samples=self.J, dropout=self.dropout, **kw)
        self.val_tape = build_graph(method, n_samples=1 if self.use_gates else 0, dropout=False, **kw)
        self.kw = kw

    def _masks(self, B: int, rng) -> dict[str, np.ndarray] | None:
        if not self.dropout:
            return None
        hp = self.hp
        masks = {}
        for i in range(hp.n_layers):
            masks[f"mask.batch{i}"] = dropout_mask((B, hp.hidden), hp.dropout, rng)
        for i in range(hp.n_layers if self.needs_h else 0):
            masks[f"mask.train{i}"] = dropout_mask((len(self.X_tr), hp.hidden), hp.dropout, rng)
        return masks

    def _samples(self, params, rng) -> list[GateSample] | None:
        if not self.use_gates:
            return None
        out = []
        for _ in range(self.J):
            eps = draw_noise(params["M"].shape, self.hp.sigma, rng)
            out.append(GateSample(Z=np.clip(params["M"] + eps, 0.0, 1.0), eps=eps))
        return out

    def step(self, params, batch: Batch, adam: AdamState, rng) -> tuple[dict, LossBreakdown]:
        masks = self._masks(len(batch.X), rng)
        samples = self._samples(params, rng)
        br, tape = build_loss(
            self.method, batch, params, samples, self.hp.lam, self.hp.eta,
            X_train=self.X_tr, masks=masks, tape=self.train_tape, **self.kw,
        )
        grads = dc.backward(tape, 1.0, "total")
        return adam_step(adam, params, {k: grads[k] for k in self.trainable}, self.hp.lr), br

    def validate(self, params) -> float:
        """Lower is better."""
        hp = self.hp
        if hp.early_stop == "accuracy":
            X_tr, X_val = self.raw
            model = to_model(self.method, params, hp, X_tr)
            y = np.argmax(self.Y_val, axis=1)
            if self.needs_h and self.method.trains_g:
                return -faithfulness(model, X_val)
            return -accuracy(model, X_val, y)
        samples = None
        if self.use_gates:
            zero = np.zeros_like(params["M"])
            samples = [GateSample(Z=np.clip(params["M"], 0.0, 1.0), eps=zero)]
        br, _ = build_loss(
            self.method, Batch(self.X_val, self.Y_val), params, samples, hp.lam, hp.eta,
            X_train=self.X_tr, masks=None, tape=self.val_tape, **self.kw,
        )
        return br.total

    def run(self, params, rng, history: TrainHistory) -> dict[str, np.ndarray]:
        hp = self.hp
        if self.frozen_features:
            # f is fixed and dropout-free here: feed its outputs through an
            # identity feature graph instead of recomputing it every step
            net = to_model(self.method, params, hp, self.raw[0]).net
            self.X_tr = features(net, self.raw[0])
            self.X_val = features(net, self.raw[1])
        N = len(self.X_tr)
        B = min(hp.batch, N)
        adam = AdamState.init({k: params[k] for k in self.trainable})
        best = self.validate(params)
        best_params, best_epoch, wait = params, 0, 0
        for epoch in range(1, hp.max_epochs + 1):
            perm = rng.permutation(N)
            sums = np.zeros(4)
            for start in range(0, N, B):
                idx = perm[start : start + B]
                try:
                    params, br = self.step(params, Batch(self.X_tr[idx], self.Y_tr[idx]), adam, rng)
                except dc.NonFiniteError as exc:
                    raise TrainingError(f"phase {self.phase} epoch {epoch}: {exc}") from exc
                history.steps += 1
                sums += len(idx) * np.array([br.data_loss, br.match_loss, br.reg_loss, br.total])
            sums /= N
            metric = self.validate(params)
            if not np.isfinite(metric):
                raise TrainingError(f"phase {self.phase} epoch {epoch}: non-finite validation metric")
            history.epochs.append(EpochLog(self.phase, epoch, *map(float, sums), float(metric)))
            if metric < best:
                best, best_params, best_epoch, wait = metric, params, epoch, 0
            else:
                wait += 1
                if wait >= hp.patience:
                    break
        history.best_epoch[self.phase] = best_epoch
        history.best_metric[self.phase] = float(best)
        return best_params


def train(
    method: Method,
    ds: Dataset,
    splits: Splits,
    hp: Hyperparams,
    pretrained: dict[str, np.ndarray] | None = None,
    phase1_only: bool = False,
) -> tuple[TrainedModel, TrainHistory]:
    """Fit one method on the training split, early-stopping on validation.

    ``pretrained`` may carry phase-1 parameters (``theta.*`` and ``W``) for a
    two-phase method; phase 1 is then skipped.  ``phase1_only`` stops a
    two-phase method after fitting g.
    """
    if len(splits.train) == 0 or len(splits.val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    method = Method(method)
    t0 = time.perf_counter()
    X_tr, Y_tr = ds.X[splits.train], ds.Y[splits.train]
    X_val, Y_val = ds.X[splits.val], ds.Y[splits.val]
    params = init_params(method, ds.d, ds.c, len(X_tr), hp)
    history = TrainHistory()

    phases = [1, 2] if method.two_phase and not phase1_only else [1]
    if method.two_phase and pretrained is not None:
        params.update({k: pretrained[k] for k in trainable_names(method, hp.n_layers, 1)})
        phases = [2]
    for phase in phases:
        runner = _Phase(method, phase, hp, X_tr, Y_tr, X_val, Y_val)
        history.gate_draws_per_step = runner.J * params["M"].size if runner.use_gates else 0
        # per-phase stream: a cached phase 1 leaves phase 2 bit-identical
        params = runner.run(params, make_rng([hp.seed, 10 + phase]), history)
        log.debug("%s phase %d best epoch %d", method.value, phase, history.best_epoch[phase])
    history.seconds = time.perf_counter() - t0
    meta = {
        "hyperparams": hp.to_dict(),
        "prng": PRNG_NAME,
        "split_seed": splits.seed,
        "best_epoch": history.best_epoch,
        "class_names": ds.class_names,
    }
    return to_model(method, params, hp, X_tr, ds.fingerprint, meta), history


def phase1_params(model: TrainedModel) -> dict[str, np.ndarray]:
    out = dict(model.net.params())
    out["W"] = model.W
    return out


@dataclass
class TuneResult:
    best_eta: float
    scores: dict[float, float]
    runs: dict[float, tuple[TrainedModel, TrainHistory]] = field(default_factory=dict)


def validation_score(model: TrainedModel, ds: Dataset, splits: Splits, U: int) -> float:
    X, y = ds.X[splits.val], ds.labels[splits.val]
    return float(np.sqrt(accuracy(model, X, y, U) * faithfulness(model, X, U)))


def tune_eta(
    method: Method,
    ds: Dataset,
    splits: Splits,
    hp: Hyperparams,
    pretrained: dict[str, np.ndarray] | None = None,
) -> TuneResult:
    """Grid-search eta by the validation geometric mean of accuracy and faithfulness."""
    method = Method(method)
    if not method.uses_gates:
        model, hist = train(method, ds, splits, _with(hp, eta=0.0), pretrained)
        return TuneResult(0.0, {0.0: validation_score(model, ds, splits, hp.top_u)}, {0.0: (model, hist)})
    if method.two_phase and pretrained is None:
        base, _ = train(Method.PRETRAIN, ds, splits, _with(hp, eta=0.0))
        pretrained = phase1_params(base)
    scores, runs = {}, {}
    for eta in sorted(hp.eta_grid):
        model, hist = train(method, ds, splits, _with(hp, eta=eta), pretrained)
        scores[eta] = validation_score(model, ds, splits, hp.top_u)
        runs[eta] = (model, hist)
        log.info("%s eta=%g score=%.4f open=%d", method.value, eta, scores[eta], open_gate_count(model.gates))
    best = max(scores.values())
    best_eta = min(e for e, s in scores.items() if s == best)
    return TuneResult(best_eta, scores, runs)


def _with(hp: Hyperparams, **changes) -> Hyperparams:
    d = hp.to_dict()
    d.update(changes)
    return Hyperparams(**d)
