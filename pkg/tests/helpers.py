"""Shared fixtures-as-functions for the test modules and the acceptance suite."""

import numpy as np

from oracles import numeric_grad, rel_error
from rrn.data import SynthTemplate, generate_synthetic
from rrn.model import RrnModel, branch_loss
from rrn.nn import TRAIN


def grad_check(layer, x, mode=TRAIN, seed=3, with_reg=False):
    """Largest relative error over the input and every parameter."""
    rng = np.random.default_rng(99)
    probe = rng.standard_normal(layer.forward(x, mode, np.random.default_rng(seed)).shape)

    def objective():
        out = layer.forward(x, mode, np.random.default_rng(seed))
        return float(np.sum(out * probe)) + (layer.regularizer() if with_reg else 0.0)

    layer.zero_grad()
    layer.forward(x, mode, np.random.default_rng(seed))
    dx = layer.backward(probe)
    if with_reg:
        layer.regularizer_backward(1.0)
    errors = {"input": rel_error(dx, numeric_grad(objective, x))}
    for name, p in layer.named_params():
        analytic = p.grad.copy()
        errors[name] = rel_error(analytic, numeric_grad(objective, p.value))
    return errors


def cohort(count=40, seed=0):
    return generate_synthetic(SynthTemplate(), count, np.random.default_rng(seed))


def trained_ish(config, seed=0, data=None):
    """A model with fitted normalisers and non-trivial BatchNorm statistics."""
    data = data or cohort()
    model = RrnModel(config, seed)
    coords = data.coords()
    model.fit_normalizers(coords)
    feats = model.features(coords)
    for _ in range(3):
        model.forward_features(feats, TRAIN, np.random.default_rng(1))
    return model, data


def rrn_grad_errors(cfg, seed=0):
    model, data = trained_ish(cfg, data=cohort(12, 3))
    coords = data.coords()
    feats, targets = model.features(coords), model.normalized_targets(coords)
    variational = cfg.dropout.kind == "variational"

    def objective():
        out = model.forward_features(feats, TRAIN, np.random.default_rng(seed))
        return branch_loss(out, targets)[0] + (model.regularizer() / 12 if variational else 0.0)

    model.zero_grad()
    out = model.forward_features(feats, TRAIN, np.random.default_rng(seed))
    model.backward(branch_loss(out, targets)[1])
    if variational:
        model.regularizer_backward(1 / 12)
    return {name: rel_error(p.grad.copy(), numeric_grad(objective, p.value)) for name, p in model.named_params()}


