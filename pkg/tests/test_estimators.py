import numpy as np
import pytest

from fbgforce.dataio import CorruptCheckpoint, save_arrays
from fbgforce.estimators import (
    InvalidSpec,
    KindMismatch,
    ModelKind,
    ModelParams,
    ModelSpec,
    SequencePredictor,
    build_model,
    default_heads,
    flatten_windows,
    loss_and_grads,
    param_shapes,
    predict_batch,
    predict_episode,
    predict_instant,
    predict_sequence,
)
from fbgforce.nn import ShapeMismatch, grad_check


def _make_model(kind: str = "fcn", layers: int = 2, hidden: int = 8, seed: int = 0, **spec) -> ModelParams:
    model = build_model(ModelSpec(kind=ModelKind(kind), layers=layers, hidden=hidden, **spec), seed=seed)
    model.x_scale = 100.0
    return model


def _windows(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 0.01, size=(n, 100, 3))


class TestModelSpec:
    def test_label(self):
        assert ModelSpec(kind=ModelKind.RNN, layers=4, hidden=64).label == "rnn-4-64"

    def test_kind_from_string(self):
        assert ModelSpec(kind="transformer").kind is ModelKind.TRANSFORMER

    def test_unknown_kind(self):
        with pytest.raises(InvalidSpec):
            ModelSpec(kind="lstm")

    def test_default_heads(self):
        assert default_heads(64) == 8
        assert default_heads(24) == 12
        assert default_heads(7) == 1
        assert ModelSpec(kind=ModelKind.TRANSFORMER, hidden=64).heads == 8

    def test_heads_must_divide_hidden(self):
        with pytest.raises(InvalidSpec):
            ModelSpec(kind=ModelKind.TRANSFORMER, hidden=10, heads=4)

    def test_heads_only_for_transformer(self):
        with pytest.raises(InvalidSpec):
            ModelSpec(kind=ModelKind.FCN, heads=2)

    @pytest.mark.parametrize("field,value", [("layers", 0), ("hidden", 0), ("output_dim", 2)])
    def test_invalid_sizes(self, field, value):
        with pytest.raises(InvalidSpec):
            ModelSpec(kind=ModelKind.FCN, **{field: value})

    def test_dict_round_trip(self):
        spec = ModelSpec(kind=ModelKind.TRANSFORMER, layers=3, hidden=16, heads=4)
        assert ModelSpec.from_dict(spec.as_dict()) == spec


class TestParameters:
    def test_fcn_parameter_count(self):
        model = build_model(ModelSpec(kind=ModelKind.FCN, layers=2, hidden=64))
        assert model.n_params == 300 * 64 + 64 + 2 * (64 * 64 + 64) + 64 + 1

    def test_rnn_shapes(self):
        shapes = param_shapes(ModelSpec(kind=ModelKind.RNN, layers=2, hidden=16))
        assert shapes["gru1.W_ih"] == (48, 16)
        assert shapes["gru1.W_hh"] == (48, 16)
        assert shapes["dec.W"] == (1, 16)

    def test_transformer_shapes(self):
        shapes = param_shapes(ModelSpec(kind=ModelKind.TRANSFORMER, layers=1, hidden=16))
        assert shapes["blk0.Wq"] == (16, 16)
        assert shapes["blk0.W1"] == (64, 16)
        assert shapes["blk0.W2"] == (16, 64)

    def test_seeded_init(self):
        a, b = _make_model(seed=3), _make_model(seed=3)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        assert not np.array_equal(_make_model(seed=4).tensors["enc.W"], a.tensors["enc.W"])

    def test_init_bounds(self):
        model = build_model(ModelSpec(kind=ModelKind.FCN, hidden=16))
        assert np.abs(model.tensors["enc.W"]).max() <= 1.0 / np.sqrt(300)
        assert np.abs(model.tensors["fc0.b"]).max() <= 1.0 / np.sqrt(16)

    def test_copy_is_deep(self):
        model = _make_model()
        clone = model.copy()
        clone.tensors["enc.b"][0] += 1.0
        assert clone.tensors["enc.b"][0] != model.tensors["enc.b"][0]


class TestFlatten:
    def test_shapes(self):
        assert flatten_windows(np.zeros((5, 100, 3))).shape == (5, 300)
        assert flatten_windows(np.zeros((2, 5, 300))).shape == (2, 5, 300)

    def test_bad_shape(self):
        with pytest.raises(ShapeMismatch):
            flatten_windows(np.zeros((99, 3)))


class TestPrediction:
    def test_instant_rejects_short_window(self):
        with pytest.raises(ShapeMismatch):
            predict_instant(_make_model(), np.zeros((99, 3)))

    def test_fcn_windows_are_independent(self):
        model = _make_model()
        x = _windows(6)
        batch = predict_batch(model, x)
        single = [predict_instant(model, w) for w in x]
        np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)

    def test_kind_mismatch(self):
        with pytest.raises(KindMismatch):
            predict_sequence(_make_model("fcn"), _windows(3))
        with pytest.raises(KindMismatch):
            predict_batch(_make_model("rnn"), _windows(3))

    @pytest.mark.parametrize("kind", ["rnn", "transformer"])
    def test_sequence_is_causal(self, kind):
        model = _make_model(kind)
        x = _windows(10)
        full = predict_sequence(model, x)
        np.testing.assert_allclose(predict_sequence(model, x[:4]), full[:4], rtol=0, atol=1e-12)
        changed = x.copy()
        changed[6:] += 1.0
        np.testing.assert_allclose(predict_sequence(model, changed)[:6], full[:6], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kind", ["rnn", "transformer"])
    def test_future_windows_never_change_the_past(self, kind):
        model = _make_model(kind)
        rng = np.random.default_rng(21)
        for case in range(25):
            T = int(rng.integers(2, 13))
            cut = int(rng.integers(1, T))
            x = _windows(T, seed=100 + case)
            changed = x.copy()
            changed[cut:] += rng.normal(0.0, 0.05, size=changed[cut:].shape)
            np.testing.assert_array_equal(
                predict_sequence(model, changed)[:cut],
                predict_sequence(model, x)[:cut],
                err_msg=f"case {case}: T={T}, cut={cut}",
            )

    @pytest.mark.parametrize("kind", ["fcn", "rnn", "transformer"])
    def test_stepwise_matches_sequence(self, kind):
        model = _make_model(kind)
        x = _windows(8)
        predictor = SequencePredictor(model)
        stepped = [predictor.step(w) for w in x]
        np.testing.assert_allclose(stepped, predict_episode(model, x), rtol=1e-9, atol=1e-12)
        predictor.reset()
        assert predictor.step(x[0]) == pytest.approx(stepped[0], rel=1e-9)

    def test_history_cap(self):
        model = _make_model("transformer")
        x = _windows(6)
        predictor = SequencePredictor(model, max_history=3)
        stepped = [predictor.step(w) for w in x]
        assert len(predictor._tokens) == 3
        assert stepped[-1] == pytest.approx(predict_sequence(model, x[3:6])[-1], rel=1e-9)
        np.testing.assert_allclose(stepped[:3], predict_sequence(model, x[:3]), rtol=1e-9, atol=1e-12)

    def test_history_cap_must_be_positive(self):
        with pytest.raises(InvalidSpec):
            SequencePredictor(_make_model("transformer"), max_history=0)

    def test_empty_episode(self):
        assert predict_episode(_make_model("rnn"), np.zeros((0, 100, 3))).size == 0
        assert predict_episode(_make_model("fcn"), np.zeros((0, 100, 3))).size == 0

    def test_output_in_grams(self):
        model = _make_model()
        x = _windows(3)
        base = predict_batch(model, x)
        model.y_scale = 20.0
        np.testing.assert_allclose(predict_batch(model, x), 20.0 * base)


class TestGradients:
    def _check(self, model, name, x, y, eps=1e-5):
        def f(value):
            trial = model.copy()
            trial.tensors[name] = value
            loss, grads, _ = loss_and_grads(trial, x, y, 1.0)
            return loss, grads[name]

        return grad_check(f, model.tensors[name], eps=eps, max_coords=20)

    @pytest.mark.parametrize("name", ["enc.W", "fc0.b", "fc1.W", "dec.W", "dec.b"])
    def test_fcn(self, name):
        model = _make_model("fcn", hidden=8)
        x = _windows(4).reshape(4, 300)
        assert self._check(model, name, x, np.full(4, 10.0), eps=1e-6) < 1e-4

    @pytest.mark.parametrize("name", ["enc.W", "gru0.W_hh", "gru1.W_ih", "gru1.b_hh", "dec.W"])
    def test_rnn(self, name):
        model = _make_model("rnn", hidden=6, slope=1.0)
        x = _windows(8).reshape(2, 4, 300)
        assert self._check(model, name, x, np.full((2, 4), 10.0)) < 1e-4

    @pytest.mark.parametrize("name", ["enc.W", "blk0.Wq", "blk0.Wk", "blk1.Wv", "blk1.W1", "blk0.bo"])
    def test_transformer(self, name):
        model = _make_model("transformer", hidden=8, heads=2, slope=1.0)
        x = _windows(8).reshape(2, 4, 300)
        assert self._check(model, name, x, np.full((2, 4), 10.0)) < 1e-4

    @pytest.mark.parametrize(
        "kind,layers,hidden,extra,eps",
        [
            ("fcn", 2, 64, {}, 1e-7),
            ("rnn", 2, 16, {"slope": 1.0}, 1e-6),
            ("transformer", 2, 32, {"heads": 2, "slope": 1.0}, 1e-6),
        ],
    )
    def test_whole_model_direction(self, kind, layers, hidden, extra, eps):
        model = _make_model(kind, layers=layers, hidden=hidden, seed=5, **extra)
        if kind == "fcn":
            x, y = _windows(4).reshape(4, 300), np.full(4, 10.0)
        else:
            x, y = _windows(8).reshape(2, 4, 300), np.full((2, 4), 10.0)
        rng = np.random.default_rng(6)
        direction = {name: rng.normal(size=value.shape) for name, value in model.tensors.items()}

        def f(alpha):
            trial = model.copy()
            for name, d in direction.items():
                trial.tensors[name] = model.tensors[name] + alpha[0] * d
            loss, grads, _ = loss_and_grads(trial, x, y, 1.0)
            return loss, np.array([sum(float(np.sum(grads[name] * d)) for name, d in direction.items())])

        assert grad_check(f, np.zeros(1), eps=eps) < 1e-4

    def test_rnn_returns_carry(self):
        model = _make_model("rnn", hidden=6)
        x = _windows(6).reshape(2, 3, 300)
        _, _, state = loss_and_grads(model, x, np.zeros((2, 3)))
        assert len(state) == 2
        assert state[0].shape == (2, 6)

    def test_loss_uses_grams(self):
        model = _make_model()
        x = _windows(4).reshape(4, 300)
        pred = predict_batch(model, x)
        loss, _, _ = loss_and_grads(model, x, pred + 3.0)
        assert loss == pytest.approx(2.5)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["fcn", "rnn", "transformer"])
    def test_save_load(self, tmp_path, kind):
        model = _make_model(kind)
        model.y_scale = 12.5
        model.meta["note"] = "x"
        path = model.save(tmp_path / "model.npz")
        loaded = ModelParams.load(path)
        assert loaded.spec == model.spec
        assert loaded.x_scale == 100.0
        assert loaded.y_scale == 12.5
        assert loaded.meta == {"note": "x"}
        x = _windows(5)
        np.testing.assert_array_equal(predict_episode(loaded, x), predict_episode(model, x))

    def test_wrong_tensor_shape(self, tmp_path):
        model = _make_model()
        model.tensors["fc0.W"] = np.zeros((3, 3))
        model.save(tmp_path / "model.npz")
        with pytest.raises(KindMismatch):
            ModelParams.load(tmp_path / "model.npz")

    def test_not_a_checkpoint(self, tmp_path):
        save_arrays(tmp_path / "other.npz", {"a": np.zeros(2)}, {"kind": "windows", "version": 1})
        with pytest.raises(CorruptCheckpoint):
            ModelParams.load(tmp_path / "other.npz")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "model.npz"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(CorruptCheckpoint):
            ModelParams.load(path)
