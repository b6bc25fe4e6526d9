"""Loss builders for the six training methods.

Every method is expressed as a :class:`~faithrep.diffcore.Tape` over the
parameter leaves ``theta.*``, ``W``, and either a dense influence matrix ``A``
or gate parameters ``S``/``M``.  Per-step randomness (dropout masks, gate
noise) enters as bound inputs so a loss evaluation is a pure function of its
bindings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .gates import GateSample
from .model import layer_names


class Method(str, enum.Enum):
    OURS = "ours"
    JOINT = "joint"
    RPS = "rps"
    RPSR = "rpsr"
    PRETRAIN = "pretrain"
    PRETRAIN_R = "pretrainr"

    @property
    def trains_g(self) -> bool:
        return self not in (Method.RPS, Method.RPSR)

    @property
    def trains_h(self) -> bool:
        return True

    @property
    def two_phase(self) -> bool:
        return self in (Method.PRETRAIN, Method.PRETRAIN_R)

    @property
    def uses_gates(self) -> bool:
        return self in (Method.OURS, Method.RPSR, Method.PRETRAIN_R)

    @property
    def predicts_with_h(self) -> bool:
        return self in (Method.RPS, Method.RPSR)

    @classmethod
    def parse(cls, name: str) -> "Method":
        key = name.strip().lower().replace("_", "").replace("-", "")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(m.value for m in cls)}")


def gated(method: Method, joint_uses_gates: bool = False) -> bool:
    return method.uses_gates or (method is Method.JOINT and joint_uses_gates)


@dataclass
class LossBreakdown:
    data_loss: float = 0.0
    match_loss: float = 0.0
    reg_loss: float = 0.0
    total: float = 0.0
    lam: float = 0.0
    eta: float = 0.0


@dataclass
class Batch:
    X: np.ndarray
    Y: np.ndarray


def cross_entropy(
    target: np.ndarray, pred: np.ndarray | None = None, *, logits: np.ndarray | None = None
) -> float:
    """Mean over rows of ``-sum_c target_c log pred_c``.

    Pass ``logits`` instead of ``pred`` to get the fused log-softmax path.
    """
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if logits is not None:
        logp = dc._log_softmax(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
    else:
        pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
        with np.errstate(divide="ignore"):
            logp = np.log(pred)
        # 0 * log 0 contributes nothing
        logp = np.where(target > 0, logp, 0.0)
    return float(-(target * logp).sum() / target.shape[0])


def param_names(method: Method, n_layers: int, joint_uses_gates: bool = False) -> list[str]:
    names = layer_names(n_layers)
    if method.trains_g:
        names.append("W")
    names += ["S", "M"] if gated(method, joint_uses_gates) else ["A"]
    return names


def trainable_names(
    method: Method, n_layers: int, phase: int = 1, joint_uses_gates: bool = False
) -> list[str]:
    if not method.two_phase:
        return param_names(method, n_layers, joint_uses_gates)
    if phase == 1:
        return layer_names(n_layers) + ["W"]
    return ["S", "M"] if method.uses_gates else ["A"]


def _feature_graph(tape: dc.Tape, x: dc.Node, n_layers: int, masks: str | None, frozen: bool):
    h = x
    for i in range(n_layers):
        w = tape.leaf(f"theta.W{i}", frozen=frozen)
        b = tape.leaf(f"theta.b{i}", frozen=frozen)
        h = tape.relu(tape.add(tape.matmul(h, w), b))
        if masks is not None:
            h = tape.dropout(h, tape.leaf(f"mask.{masks}{i}", frozen=True))
    return h


def build_graph(
    method: Method,
    *,
    n_layers: int,
    n_samples: int,
    sigma: float,
    phase: int = 1,
    dropout: bool = False,
    joint_uses_gates: bool = False,
) -> dc.Tape:
    """Assemble the loss tape for one method/phase.

    Leaves: parameters, ``X``/``Y``/``X_train``, ``lam``/``eta``, dropout
    masks ``mask.batch{i}``/``mask.train{i}`` when ``dropout``, and gate noise
    ``eps{j}`` for each Monte Carlo sample when the method is gated.
    Outputs: ``total``, ``data``, ``match``, ``reg``.
    """
    t = dc.Tape()
    use_gates = gated(method, joint_uses_gates)
    frozen_g = method.two_phase and phase == 2
    X = t.leaf("X", frozen=True)
    Y = t.leaf("Y", frozen=True)
    lam = t.leaf("lam", frozen=True)
    eta = t.leaf("eta", frozen=True)

    f_b = _feature_graph(t, X, n_layers, "batch" if dropout else None, frozen_g)

    data = match = reg = None
    g_prob = None
    if method.trains_g:
        W = t.leaf("W", frozen=frozen_g)
        g_logits = t.matmul(f_b, W)
        if not frozen_g:
            data = t.softmax_xent(Y, g_logits)
        g_prob = t.softmax(g_logits)

    needs_h = not (method.two_phase and phase == 1)
    if needs_h:
        X_train = t.leaf("X_train", frozen=True)
        f_t = _feature_graph(t, X_train, n_layers, "train" if dropout else None, frozen_g)
        f_t_T = t.transpose(f_t)
        if use_gates:
            S = t.leaf("S")
            M = t.leaf("M")
            coefs = [
                t.mul(t.clamp01(t.add(M, t.leaf(f"eps{j}", frozen=True))), S)
                for j in range(n_samples)
            ]
            reg = t.total_sum(t.gauss_cdf(t.scale(M, 1.0 / sigma)))
        else:
            coefs = [t.leaf("A")]
        terms = []
        for A in coefs:
            h_logits = t.matmul(f_b, t.matmul(f_t_T, A))
            target = Y if method.predicts_with_h else g_prob
            terms.append(t.softmax_xent(target, h_logits))
        acc = terms[0]
        for term in terms[1:]:
            acc = t.add(acc, term)
        if len(terms) > 1:
            acc = t.scale(acc, 1.0 / len(terms))
        if method.predicts_with_h:
            data = acc
        else:
            match = acc

    total = data
    for term, weight in ((match, lam), (reg, eta)):
        if term is None:
            continue
        weighted = t.scale_by(term, weight)
        total = weighted if total is None else t.add(total, weighted)
    t.output("total", total)
    for name, node in (("data", data), ("match", match), ("reg", reg)):
        if node is not None:
            t.output(name, node)
    return t


def build_loss(
    method: Method,
    batch: Batch,
    params: Mapping[str, np.ndarray],
    gate_samples: Sequence[GateSample] | None,
    lam: float,
    eta: float,
    *,
    X_train: np.ndarray,
    n_layers: int,
    sigma: float = 0.5,
    phase: int = 1,
    masks: Mapping[str, np.ndarray] | None = None,
    joint_uses_gates: bool = False,
    tape: dc.Tape | None = None,
) -> tuple[LossBreakdown, dc.Tape]:
    """Evaluate one method's minibatch objective; the returned tape is ready for backward."""
    if lam < 0 or eta < 0:
        raise ValueError(f"lambda and eta must be non-negative, got {lam}, {eta}")
    use_gates = gated(method, joint_uses_gates)
    needs_h = not (method.two_phase and phase == 1)
    if gate_samples and not (use_gates and needs_h):
        raise ValueError(f"method {method.value} (phase {phase}) takes no gate samples")
    if use_gates and needs_h and not gate_samples:
        raise ValueError(f"method {method.value} needs at least one gate sample")
    n_samples = len(gate_samples) if gate_samples else 0
    if tape is None:
        tape = build_graph(
            method,
            n_layers=n_layers,
            n_samples=n_samples,
            sigma=sigma,
            phase=phase,
            dropout=masks is not None,
            joint_uses_gates=joint_uses_gates,
        )
    bind = {
        "X": batch.X,
        "Y": batch.Y,
        "X_train": X_train,
        "lam": np.array([[lam]]),
        "eta": np.array([[eta]]),
    }
    bind.update({k: v for k, v in params.items()})
    if masks is not None:
        bind.update(masks)
    for j, s in enumerate(gate_samples or ()):
        bind[f"eps{j}"] = s.eps
    bind = {k: v for k, v in bind.items() if k in tape.leaves}
    out = dc.forward(tape, bind)
    br = LossBreakdown(
        data_loss=float(out["data"][0, 0]) if "data" in out else 0.0,
        match_loss=float(out["match"][0, 0]) if "match" in out else 0.0,
        reg_loss=float(out["reg"][0, 0]) if "reg" in out else 0.0,
        total=float(out["total"][0, 0]),
        lam=lam,
        eta=eta,
    )
    return br, tape
