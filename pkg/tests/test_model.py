import numpy as np
import pytest

from helpers import rrn_grad_errors
from helpers import trained_ish as _trained_ish
from oracles import branch_loss as loop_loss
from oracles import numeric_grad, rel_error, rrn_forward
from rrn.checkpoint import load_checkpoint, save_checkpoint
from rrn.errors import ConfigurationError, DatasetError, LoadError, ShapeError
from rrn.landmarks import LandmarkName, LandmarkSet
from rrn.model import DropoutConfig, Prediction, RrnConfig, RrnModel, branch_loss, build, loss, ru_count
from rrn.nn import EVAL, Adam
from rrn.training import PRESETS

L = LandmarkName


# -------------------------------------------------------------- structure


@pytest.mark.parametrize("name, expected", [
    ("5-landmarks", 25), ("3-regular", 9), ("3-cross", 9), ("6-landmarks", 36), ("9-landmarks", 81)])
def test_relation_unit_count(name, expected):
    inputs, targets = PRESETS[name]
    model = build(RrnConfig(inputs, targets, relation_dim=4, hidden_dim=8))
    assert model.ru_count == expected == ru_count(inputs)
    assert model.g.layers[-1].units == len(inputs) * (len(inputs) - 1)
    assert model.f.layers[-1].units == len(inputs)
    assert model.f.layers[-1].out_dim == 3 * len(targets)


@pytest.mark.parametrize("kwargs, match", [
    (dict(input_names=["CdL", "CdR"], target_names=["Gn"]), "Me"),
    (dict(input_names=["Me", "CdL"], target_names=["CdL", "Gn"]), "both input and target"),
    (dict(input_names=["Me", "Me"], target_names=["Gn"]), "duplicate"),
    (dict(input_names=["Me"], target_names=["Gn"]), "two input"),
    (dict(input_names=["Me", "CdL"], target_names=[]), "target"),
    (dict(input_names=["Me", "CdL"], target_names=["Gn"], ru_variant="conv"), "ru_variant"),
])
def test_invalid_configs(kwargs, match):
    with pytest.raises(ConfigurationError, match=match):
        RrnConfig(**kwargs)


def test_config_round_trips_through_dict():
    cfg = RrnConfig(["Me", "CdL", "CdR"], ["Gn"], "mlp", 8, 16, DropoutConfig("targeted", gamma=0.3))
    assert RrnConfig.from_dict(cfg.to_dict()) == cfg


# ----------------------------------------------------------------- forward


@pytest.mark.parametrize("variant", ["dense", "mlp"])
def test_forward_matches_per_unit_oracle(variant):
    cfg = RrnConfig(["Me", "CdL", "CdR", "CorL"], ["Gn", "Na"], variant, 8, 16)
    model, cohort = _trained_ish(cfg)
    state = model.state_dict()
    pair_units = {(str(a), str(b)): p for p, (a, b) in enumerate(model.pairs)}
    fusion_units = {str(a): i for i, a in enumerate(model.inputs)}
    order = [str(n) for n in model.inputs]
    for s in list(cohort)[:5]:
        raw = {str(k): v.tolist() for k, v in s.coords.items()}
        branches, terminal = rrn_forward(raw, order, ["Gn", "Na"], state, pair_units, fusion_units, variant)
        pred = model.predict(s)
        np.testing.assert_allclose(pred.branches, branches, atol=1e-9)
        np.testing.assert_allclose(pred.terminal, terminal, atol=1e-9)


def test_two_inputs_pool_is_single_relation():
    cfg = RrnConfig(["Me", "CdL"], ["Gn"], "dense", 6)
    model, cohort = _trained_ish(cfg)
    feats = model.features(cohort.coords()[:4])
    rel = model.g.forward(feats, EVAL)
    direct = model.f.forward(rel, EVAL)
    np.testing.assert_array_equal(model.forward_features(feats, EVAL), direct)


def test_terminal_is_mean_of_branches():
    cfg = RrnConfig(["Me", "CdL", "CdR"], ["Gn", "Pg"], relation_dim=8)
    model, cohort = _trained_ish(cfg)
    pred = model.predict(cohort.subjects[0])
    np.testing.assert_allclose(pred.terminal, pred.branches.mean(axis=0), rtol=0, atol=1e-12)
    assert pred.branches.shape == (3, 2, 3)


def test_input_order_permutation_does_not_change_predictions():
    inputs, targets = PRESETS["5-landmarks"]
    a, cohort = _trained_ish(RrnConfig(inputs, targets, relation_dim=8))
    b = RrnModel(RrnConfig(tuple(reversed(inputs)), targets, relation_dim=8), seed=0)
    b.load_state_dict(a.state_dict())
    for s in list(cohort)[:10]:
        np.testing.assert_allclose(a.predict(s).terminal, b.predict(s).terminal, atol=1e-12)


def test_forward_requires_inputs_and_batch_for_train():
    cfg = RrnConfig(["Me", "CdL"], ["Gn"], relation_dim=4)
    model = RrnModel(cfg)
    partial = LandmarkSet("p", (1, 1, 1), {"Me": (0, 0, 0), "Gn": (1, 1, 1)})
    with pytest.raises(DatasetError, match="CdL"):
        model.predict(partial)
    with pytest.raises(ShapeError):
        model.forward_features(np.zeros((3, 2, 19)))


def test_eval_forward_is_deterministic_with_dropout():
    for kind in ("regular", "variational", "targeted"):
        model, cohort = _trained_ish(RrnConfig(["Me", "CdL", "CdR"], ["Gn"], "mlp", 8, 16, DropoutConfig(kind)))
        s = cohort.subjects[3]
        np.testing.assert_array_equal(model.predict(s).terminal, model.predict(s).terminal)


def test_predict_mm_multiplies_by_spacing():
    cfg = RrnConfig(["Me", "CdL"], ["Gn"], relation_dim=4)
    model, cohort = _trained_ish(cfg)
    s = cohort.subjects[0]
    scaled = LandmarkSet("t", (0.5, 0.5, 0.25), s.coords)
    px = model.predict(scaled).terminal[0]
    np.testing.assert_allclose(model.predict_mm(scaled)[L.Gn], px * [0.5, 0.5, 0.25])
    assert scaled.to_mm([10, 10, 100]).tolist() == [5.0, 5.0, 25.0]


# -------------------------------------------------------------------- loss


def test_branch_loss_hand_example():
    branches = np.array([[[1.0, 0.0, 0.0]], [[0.0, 2.0, 0.0]]])  # (n=2, B=1, 3m=3)
    value, _ = branch_loss(branches, np.zeros((1, 3)))
    assert value == pytest.approx(2.5, abs=1e-12)


def test_branch_loss_matches_loop_oracle_and_gradient():
    rng = np.random.default_rng(5)
    br, tg = rng.standard_normal((4, 1, 6)), rng.standard_normal((1, 6))
    value, grad = branch_loss(br, tg)
    expect = loop_loss(br[:, 0].reshape(4, 2, 3).tolist(), tg[0].reshape(2, 3).tolist())
    assert value == pytest.approx(expect, abs=1e-12)
    num = numeric_grad(lambda: branch_loss(br, tg)[0], br)
    assert rel_error(grad, num) < 1e-8


def test_loss_zero_iff_exact_match():
    truth = LandmarkSet("t", (1, 1, 1), {"Gn": (1.0, 2.0, 3.0)})
    exact = Prediction((L.Me, L.CdL), (L.Gn,), np.array([[[1.0, 2.0, 3.0]]] * 2), np.array([[1.0, 2.0, 3.0]]))
    assert loss(exact, truth) == 0.0
    off = Prediction((L.Me, L.CdL), (L.Gn,), np.array([[[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.5]]]),
                     np.array([[1.0, 2.0, 3.25]]))
    assert loss(off, truth) == pytest.approx(0.25 / 2)
    assert loss(off, truth, kl=1.5) == pytest.approx(0.125 + 1.5)


# ---------------------------------------------------------- gradient check


@pytest.mark.parametrize("variant", ["dense", "mlp"])
@pytest.mark.parametrize("kind", ["none", "regular", "variational"])
def test_full_rrn_gradients(variant, kind):
    cfg = RrnConfig(["Me", "CdL", "CdR"], ["Gn", "Pg"], variant, 8, 8, DropoutConfig(kind))
    errors = rrn_grad_errors(cfg)
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}


def test_shared_pairwise_gradients():
    cfg = RrnConfig(["Me", "CdL", "CdR"], ["Gn"], "dense", 8, shared_pairwise=True)
    assert max(rrn_grad_errors(cfg).values()) < 1e-4


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = RrnConfig(["Me", "CdL", "CdR"], ["Gn", "Na"], "mlp", 8, 16, DropoutConfig("variational"))
    model, cohort = _trained_ish(cfg, seed=4)
    opt = Adam(model.named_params())
    for p in model.params().values():
        p.grad[:] = 0.01
    opt.step()
    rng = np.random.default_rng(9)
    save_checkpoint(tmp_path / "m.npz", model, opt, rng, extra={"fold": 2})
    loaded, meta, opt2 = load_checkpoint(tmp_path / "m.npz")
    assert meta["extra"] == {"fold": 2} and meta["layers"] == model.layer_specs()
    assert loaded.config == cfg and opt2.t == 1
    s = cohort.subjects[0]
    np.testing.assert_array_equal(loaded.predict(s).terminal, model.predict(s).terminal)
    for k in opt.m:
        np.testing.assert_array_equal(opt2.m[k], opt.m[k])
    restored = np.random.default_rng()
    restored.bit_generator.state = meta["rng_state"]
    assert restored.random() == rng.random()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "junk.npz")
