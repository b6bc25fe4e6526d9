"""Random problem instances shared by the objective and acceptance tests."""

from dataclasses import dataclass

import numpy as np

from faithrep import diffcore as dc
from faithrep.gates import GateSample
from faithrep.model import dropout_mask, glorot, init_feature_net
from faithrep.objectives import Batch, Method, build_loss, gated, trainable_names

from oracles import ref_objective

N_LAYERS = 3
SIGMA = 0.5


@dataclass
class Instance:
    method: Method
    phase: int
    batch: Batch
    X_train: np.ndarray
    params: dict
    eps: np.ndarray | None
    masks: dict
    lam: float
    eta: float

    @property
    def trainable(self) -> list[str]:
        return trainable_names(self.method, N_LAYERS, self.phase)

    def objective(self, p):
        samples = [GateSample(None, self.eps)] if self.eps is not None else None
        br, tape = build_loss(
            self.method, self.batch, p, samples, self.lam, self.eta,
            X_train=self.X_train, n_layers=N_LAYERS, sigma=SIGMA, phase=self.phase, masks=self.masks,
        )
        return br.total, dc.backward(tape, 1.0, "total")

    def reference(self, p):
        return ref_objective(
            self.method.value, self.phase, p, self.batch.X, self.batch.Y, self.X_train,
            n_layers=N_LAYERS, lam=self.lam, eta=self.eta, sigma=SIGMA,
            eps_list=[self.eps] if self.eps is not None else None, masks=self.masks,
        )


def random_instances(trial: int, N=8, D=5, C=3, K=4, B=4):
    """One instance per method and phase, with weights at a realistic scale."""
    rng = np.random.default_rng(trial)
    X_tr = rng.standard_normal((N, D))
    Y_tr = np.eye(C)[rng.integers(0, C, N)]
    idx = rng.choice(N, B, replace=False)
    batch = Batch(X_tr[idx], Y_tr[idx])
    out = []
    for m in Method:
        for phase in [1, 2] if m.two_phase else [1]:
            net = init_feature_net(D, K, N_LAYERS, 0.3, rng)
            params = dict(net.params())
            for i in range(N_LAYERS):
                params[f"theta.b{i}"] = rng.normal(0, 0.1, (1, K))
            params["W"] = glorot(K, C, rng)
            params["A"] = rng.normal(0, 0.3, (N, C))
            params["S"] = rng.normal(0, 0.3, (N, C))
            params["M"] = rng.uniform(0.2, 0.8, (N, C))
            uses = gated(m) and not (m.two_phase and phase == 1)
            eps = rng.normal(0, SIGMA, (N, C)) if uses else None
            masks = {}
            for i in range(N_LAYERS):
                masks[f"mask.batch{i}"] = dropout_mask((B, K), 0.3, rng)
                masks[f"mask.train{i}"] = dropout_mask((N, K), 0.3, rng)
            out.append(Instance(m, phase, batch, X_tr, params, eps, masks, 1.0, 0.1 if uses else 0.0))
    return out
