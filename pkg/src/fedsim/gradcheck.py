"""Finite-difference verification of every training-loss gradient.

For each random configuration a tiny encoder/classifier is built, the
requested objective is evaluated as a function of the flat parameter
vector, and the tape gradient is compared against central differences
with the relative error |analytic - numeric| / max(1, |numeric|).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import apc_loss, cross_entropy, fedproto_reg, total_loss
from .model import ModelConfig, classify, encode, unflatten_params, parameter_count
from .prototypes import PrototypeSet

LOSS_KINDS = ("ce", "apc", "ce+apc", "fedproto")


@dataclass(frozen=True)
class GradcheckResult:
    kind: str
    trial: int
    max_rel_err: float


@dataclass(frozen=True)
class GradcheckReport:
    results: list[GradcheckResult]
    elapsed_s: float

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.results)

    def worst(self) -> GradcheckResult:
        return max(self.results, key=lambda r: r.max_rel_err)


def _random_case(rng: np.random.Generator):
    cfg = ModelConfig(
        input_dim=int(rng.integers(3, 6)),
        hidden_dims=(int(rng.integers(4, 7)),),
        feature_dim=int(rng.integers(3, 6)),
        num_classes=int(rng.integers(2, 5)),
        seed=int(rng.integers(0, 2**31)))
    batch = int(rng.integers(2, 6))
    n_views = int(rng.integers(1, 3))
    x_all = rng.normal(size=(batch * n_views, cfg.input_dim))
    labels = rng.integers(0, cfg.num_classes, size=batch).astype(np.int64)
    # prototypes for a random subset of classes so the skip path is exercised
    n_protos = int(rng.integers(1, cfg.num_classes + 1))
    classes = rng.choice(cfg.num_classes, size=n_protos, replace=False)
    protos = PrototypeSet(
        {int(c): rng.normal(size=cfg.feature_dim) for c in classes},
        {int(c): 1 for c in classes})
    tau = float(rng.uniform(0.3, 1.5))
    lam = float(rng.uniform(0.2, 1.5))
    theta = rng.normal(size=parameter_count(cfg)) * 0.6
    return cfg, batch, n_views, x_all, labels, protos, tau, lam, theta


def _loss_value(kind, cfg, theta, batch, n_views, x_all, labels, protos,
                tau, lam) -> Tensor:
    model = unflatten_params(cfg, theta) if isinstance(theta, np.ndarray) \
        else theta
    z_all = encode(model, Tensor(x_all))
    width = batch * n_views
    first = np.zeros((batch, width))
    first[np.arange(batch), np.arange(batch) * n_views] = 1.0
    avg = np.zeros((batch, width))
    for i in range(batch):
        avg[i, i * n_views:(i + 1) * n_views] = 1.0 / n_views

    if kind in ("ce", "ce+apc"):
        logits = classify(model, ad.matmul(Tensor(first), z_all))
        ce = cross_entropy(logits, labels)
    if kind in ("apc", "ce+apc"):
        apc = apc_loss(z_all, np.repeat(labels, n_views), protos, tau)
    if kind == "ce":
        return ce
    if kind == "apc":
        return apc
    if kind == "ce+apc":
        return total_loss(ce, apc)
    zbar = ad.matmul(Tensor(avg), z_all)
    return fedproto_reg(zbar, labels, protos, lam)


def _numeric_grad(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        out[i] = (f(up) - f(down)) / (2.0 * h)
    return out


def run_gradcheck(trials: int = 20, seed: int = 0,
                  kinds=LOSS_KINDS) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    results: list[GradcheckResult] = []
    start = time.perf_counter()
    for trial in range(trials):
        cfg, batch, n_views, x_all, labels, protos, tau, lam, theta = \
            _random_case(rng)
        # make sure at least one label has a prototype (loss would be
        # constant zero otherwise and the check would be vacuous)
        labels[0] = protos.classes[0]
        args = (batch, n_views, x_all, labels, protos, tau, lam)
        for kind in kinds:
            with ad.GradTape() as tape:
                model = unflatten_params(cfg, theta).watched(tape)
                loss = _loss_value(kind, cfg, model, *args)
                grads = ad.backward(loss)
                flat_grad = np.concatenate(
                    [grads[p].data.reshape(-1) for p in model.param_tensors()])

            def f(vec, _kind=kind):
                return _loss_value(_kind, cfg, vec, *args).item()

            numeric = _numeric_grad(f, theta)
            err = float(np.max(np.abs(flat_grad - numeric)
                               / np.maximum(1.0, np.abs(numeric))))
            results.append(GradcheckResult(kind, trial, err))
    return GradcheckReport(results, time.perf_counter() - start)
