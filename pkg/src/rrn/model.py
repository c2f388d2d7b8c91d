"""Two-stage relational reasoning network.

Stage one runs one relation unit per ordered input pair ``(i, j)`` on the
19-D pair descriptor; the outputs are averaged over partners ``j`` to give a
relation vector per input landmark. Stage two runs one fusion unit per input
landmark on that vector and predicts all targets. The terminal prediction is
the mean of the ``n`` branch predictions; training uses the per-branch loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DatasetError, ShapeError
from .landmarks import (
    ALL_LANDMARKS,
    FEATURE_DIM,
    FeatureNormalizer,
    LandmarkName,
    LandmarkSet,
    canonical_order,
    ordered_pairs,
    pair_feature_tensor,
)
from .nn import (
    EVAL,
    TRAIN,
    BatchNorm,
    DenseBlock,
    Dropout,
    GaussianDropout,
    Linear,
    ReLU,
    Sequential,
)

RU_VARIANTS = ("mlp", "dense")
DROPOUT_KINDS = ("none", "regular", "variational", "targeted")


@dataclass(frozen=True)
class DropoutConfig:
    kind: str = "none"
    p: float = 0.2
    gamma: float = 0.5
    alpha: float = 0.5
    # None: match the noise variance of regular dropout, p / (1 - p)
    init_log_alpha: float | None = None

    def __post_init__(self):
        if self.kind not in DROPOUT_KINDS:
            raise ConfigurationError(f"dropout must be one of {DROPOUT_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigurationError(f"dropout rate p must lie in [0, 1), got {self.p}")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.alpha <= 1.0):
            raise ConfigurationError("targeted dropout gamma and alpha must lie in [0, 1]")

    @property
    def log_alpha(self) -> float:
        if self.init_log_alpha is not None:
            return self.init_log_alpha
        return math.log(self.p / (1.0 - self.p)) if self.p > 0 else -20.0


@dataclass(frozen=True)
class RrnConfig:
    input_names: tuple[LandmarkName, ...]
    target_names: tuple[LandmarkName, ...]
    ru_variant: str = "dense"
    relation_dim: int = 64
    hidden_dim: int = 256
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    shared_pairwise: bool = False
    normalize: bool = True

    def __post_init__(self):
        inputs = tuple(LandmarkName.parse(n) for n in self.input_names)
        targets = tuple(LandmarkName.parse(n) for n in self.target_names)
        object.__setattr__(self, "input_names", inputs)
        object.__setattr__(self, "target_names", targets)
        if isinstance(self.dropout, dict):
            object.__setattr__(self, "dropout", DropoutConfig(**self.dropout))
        if len(inputs) < 2:
            raise ConfigurationError("at least two input landmarks are required")
        if len(targets) < 1:
            raise ConfigurationError("at least one target landmark is required")
        for label, names in (("input", inputs), ("target", targets)):
            if len(set(names)) != len(names):
                raise ConfigurationError(f"duplicate {label} landmarks: {[str(n) for n in names]}")
        if LandmarkName.Me not in inputs:
            raise ConfigurationError("Me must be an input landmark (it is the feature reference)")
        overlap = set(inputs) & set(targets)
        if overlap:
            raise ConfigurationError(
                f"landmarks both input and target: {', '.join(str(n) for n in canonical_order(overlap))}"
            )
        if self.ru_variant not in RU_VARIANTS:
            raise ConfigurationError(f"ru_variant must be one of {RU_VARIANTS}, got {self.ru_variant!r}")
        if self.relation_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigurationError("relation_dim and hidden_dim must be positive")

    @property
    def n(self) -> int:
        return len(self.input_names)

    @property
    def m(self) -> int:
        return len(self.target_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_names"] = [str(n) for n in self.input_names]
        d["target_names"] = [str(n) for n in self.target_names]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RrnConfig":
        d = dict(d)
        d["dropout"] = DropoutConfig(**d.get("dropout", {}))
        return cls(**d)


def relation_unit(variant, in_dim, out_dim, units, rng, dropout: DropoutConfig, hidden_dim=256):
    """Build a stack of ``units`` independent relation units.

    ``mlp``: 3 FC layers with BatchNorm+ReLU after the first two.
    ``dense``: one dense block (4 layers, growth 4) followed by an FC layer.
    """
    targeted = (dropout.gamma, dropout.alpha) if dropout.kind == "targeted" else None

    def drop(dim):
        if dropout.kind == "regular":
            return [Dropout(dropout.p)]
        if dropout.kind == "variational":
            return [GaussianDropout(dim, units, dropout.log_alpha)]
        return []

    if variant == "mlp":
        h = hidden_dim
        return Sequential(
            Linear(in_dim, h, units, rng, targeted), BatchNorm(h, units), ReLU(), *drop(h),
            Linear(h, h, units, rng, targeted), BatchNorm(h, units), ReLU(), *drop(h),
            Linear(h, out_dim, units, rng, targeted),
        )
    block = DenseBlock(in_dim, units, rng=rng, targeted=targeted)
    return Sequential(block, *drop(block.out_dim), Linear(block.out_dim, out_dim, units, rng, targeted))


@dataclass
class Prediction:
    """Per-branch and terminal predictions in pixel space."""

    input_names: tuple[LandmarkName, ...]
    target_names: tuple[LandmarkName, ...]
    branches: np.ndarray  # (n, m, 3)
    terminal: np.ndarray  # (m, 3)

    def as_dict(self) -> dict[LandmarkName, np.ndarray]:
        return dict(zip(self.target_names, self.terminal))


def branch_loss(branches, targets):
    """Mean over batch of (1/(n m)) sum_i sum_k ||branch_i[k] - target_k||^2.

    ``branches`` is ``(n, B, 3m)``, ``targets`` is ``(B, 3m)``. Returns the
    loss and its gradient w.r.t. ``branches``.
    """
    n, b, width = branches.shape
    if targets.shape != (b, width):
        raise ShapeError(f"targets shape {targets.shape} does not match branches {branches.shape}")
    m = width // 3
    diff = branches - targets[None]
    scale = 1.0 / (n * m * b)
    return float(np.sum(diff * diff) * scale), 2.0 * scale * diff


def loss(prediction: Prediction, truth: LandmarkSet, kl: float = 0.0) -> float:
    """Per-branch squared error of one subject in pixel units, plus ``kl``."""
    targets = truth.as_array(prediction.target_names).reshape(1, -1)
    n, m, _ = prediction.branches.shape
    value, _ = branch_loss(prediction.branches.reshape(n, 1, 3 * m), targets)
    return value + kl


class RrnModel:
    def __init__(self, config: RrnConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.inputs = canonical_order(config.input_names)
        self.targets = list(config.target_names)
        self.pairs = ordered_pairs(self.inputs)
        n, m = config.n, config.m
        rng = np.random.default_rng([seed, 0])
        g_units = 1 if config.shared_pairwise else len(self.pairs)
        self.g = relation_unit(config.ru_variant, FEATURE_DIM, config.relation_dim, g_units, rng,
                               config.dropout, config.hidden_dim)
        self.f = relation_unit(config.ru_variant, config.relation_dim, 3 * m, n, rng,
                               config.dropout, config.hidden_dim)
        self.feature_norm = FeatureNormalizer.identity((len(self.pairs), FEATURE_DIM))
        self.target_norm = FeatureNormalizer.identity((3 * m,))

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def ru_count(self) -> int:
        """Relation units: n(n-1) pairwise plus n fusion units."""
        return len(self.pairs) + self.n

    # ------------------------------------------------------------------ data

    def pixel_features(self, coords) -> np.ndarray:
        return pair_feature_tensor(coords, self.inputs)

    def features(self, coords) -> np.ndarray:
        """Normalised pair features ``(P, N, 19)`` for coords ``(N, 14, 3)``."""
        raw = self.pixel_features(coords)
        return self.feature_norm.transform(raw.transpose(1, 0, 2)).transpose(1, 0, 2)

    def target_array(self, coords) -> np.ndarray:
        idx = [t.index for t in self.targets]
        return np.asarray(coords)[:, idx, :].reshape(len(coords), -1)

    def normalized_targets(self, coords) -> np.ndarray:
        return self.target_norm.transform(self.target_array(coords))

    def fit_normalizers(self, coords) -> None:
        if not self.config.normalize:
            return
        self.feature_norm = FeatureNormalizer.fit(self.pixel_features(coords).transpose(1, 0, 2))
        self.target_norm = FeatureNormalizer.fit(self.target_array(coords))

    # --------------------------------------------------------------- compute

    def forward_features(self, feats, mode=TRAIN, rng=None) -> np.ndarray:
        """Branch outputs ``(n, B, 3m)`` in normalised target units."""
        p, b, d = feats.shape
        if p != len(self.pairs) or d != FEATURE_DIM:
            raise ShapeError(f"expected features of shape ({len(self.pairs)}, batch, {FEATURE_DIM}), got {feats.shape}")
        x = feats.reshape(1, p * b, d) if self.config.shared_pairwise else feats
        rel = self.g.forward(x, mode, rng).reshape(p, b, -1)
        pooled = rel.reshape(self.n, self.n - 1, b, -1).mean(axis=1)
        return self.f.forward(pooled, mode, rng)

    def backward(self, grad_branches) -> np.ndarray:
        """Backpropagate a branch-output gradient; returns the feature gradient."""
        d_pooled = self.f.backward(grad_branches)
        n, b, r = d_pooled.shape
        d_rel = np.broadcast_to(d_pooled[:, None] / (n - 1), (n, n - 1, b, r)).reshape(n * (n - 1), b, r)
        if self.config.shared_pairwise:
            d_rel = d_rel.reshape(1, -1, r)
        return self.g.backward(np.ascontiguousarray(d_rel)).reshape(n * (n - 1), b, FEATURE_DIM)

    def regularizer(self) -> float:
        return self.g.regularizer() + self.f.regularizer()

    def regularizer_backward(self, scale: float) -> None:
        self.g.regularizer_backward(scale)
        self.f.regularizer_backward(scale)

    def predict_coords(self, coords, mode=EVAL, rng=None):
        """Pixel-space branches ``(n, N, m, 3)`` and terminal ``(N, m, 3)``."""
        coords = np.asarray(coords, dtype=np.float64)
        out = self.forward_features(self.features(coords), mode, rng)
        branches = self.target_norm.inverse(out).reshape(self.n, len(coords), self.m, 3)
        return branches, branches.mean(axis=0)

    def forward(self, lset: LandmarkSet, mode=EVAL, rng=None) -> Prediction:
        missing = lset.missing(self.inputs)
        if missing:
            raise DatasetError(
                f"subject {lset.subject_id!r} lacks input landmarks: {', '.join(map(str, missing))}"
            )
        coords = np.zeros((1, len(ALL_LANDMARKS), 3))
        for name, value in lset.coords.items():
            coords[0, name.index] = value
        if mode == TRAIN:
            raise ShapeError("train-mode forward needs a batch; use forward_features on several subjects")
        branches, terminal = self.predict_coords(coords, mode, rng)
        return Prediction(tuple(self.inputs), tuple(self.targets), branches[:, 0], terminal[0])

    def predict(self, lset: LandmarkSet) -> Prediction:
        return self.forward(lset, EVAL)

    def predict_mm(self, lset: LandmarkSet) -> dict[LandmarkName, np.ndarray]:
        pred = self.predict(lset)
        return {name: lset.to_mm(p) for name, p in zip(pred.target_names, pred.terminal)}

    # ----------------------------------------------------------------- state

    def named_params(self):
        return self.g.named_params("g.") + self.f.named_params("f.")

    def params(self):
        return dict(self.named_params())

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": p.value.copy() for k, p in self.named_params()}
        for k, v in self.g.named_buffers("g.") + self.f.named_buffers("f."):
            state[f"buffer/{k}"] = v.copy()
        state["norm/feature_shift"] = self.feature_norm.shift
        state["norm/feature_scale"] = self.feature_norm.scale
        state["norm/target_shift"] = self.target_norm.shift
        state["norm/target_scale"] = self.target_norm.scale
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_params())
        for k, p in params.items():
            value = np.asarray(state[f"param/{k}"], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.value = value.copy()
            p.grad = np.zeros_like(p.value)
        for module, prefix in ((self.g, "g."), (self.f, "f.")):
            _load_buffers(module, prefix, state)
        self.feature_norm = FeatureNormalizer(np.array(state["norm/feature_shift"]),
                                              np.array(state["norm/feature_scale"]))
        self.target_norm = FeatureNormalizer(np.array(state["norm/target_shift"]),
                                             np.array(state["norm/target_scale"]))

    def layer_specs(self) -> dict:
        return {"g": self.g.spec(), "f": self.f.spec()}


def _load_buffers(module: Sequential, prefix: str, state) -> None:
    names = [k for k, _ in module.named_buffers(prefix)]
    bns = [layer for layer in module.modules() if isinstance(layer, BatchNorm)]
    # named_buffers lists (running_mean, running_var) per BatchNorm in module order
    for bn, (mean_key, var_key) in zip(bns, zip(names[0::2], names[1::2])):
        bn.load_buffer("running_mean", state[f"buffer/{mean_key}"])
        bn.load_buffer("running_var", state[f"buffer/{var_key}"])


def build(config: RrnConfig, rng_seed: int = 0) -> RrnModel:
    return RrnModel(config, rng_seed)


def ru_count(input_names: Sequence) -> int:
    n = len(input_names)
    return n * (n - 1) + n
