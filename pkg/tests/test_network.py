"""Model assembly, loss, optimizer, metrics, checkpointing, training loop."""

import numpy as np
import pytest

from grasens import antialias, csi, network
from grasens import tensor as T
from grasens.errors import (ConfigurationError, DataError, DivergenceError,
                            ParseError, UsageError)

from conftest import gradcheck, model_gradcheck


def small_model(classes=2, lam=1, width=4, in_channels=2, hw=(8, 8), **block_kw):
    block = network.BlockConfig(width=width, **block_kw)
    cfg = network.ModelConfig(classes=classes, lam=lam, seed=0)
    return network.GraSensModel(cfg, block, in_channels=in_channels, input_hw=hw)


def tiny_dataset(classes=2, per_class=6, duration=16, seed=0):
    geometry = csi.CsiGeometry(n_tx=1, n_rx=1, n_sub=12)
    spec = csi.SegmentSpec(phi=16, upsilon=16)
    splits = {"train": [], "val": []}
    for cls in range(classes):
        for i in range(per_class):
            trace = csi.generate_synthetic(geometry, cls, duration,
                                           seed=seed + i, n_classes=classes)
            split = "val" if i % 5 == 4 else "train"
            for seg in csi.segment(trace, spec):
                splits[split].append((seg.data, cls))
    return splits


# -- generation stage -------------------------------------------------------------

def test_generation_stage_doubles_extents():
    model = small_model(width=32, in_channels=4, hw=(30, 200), lam=1)
    out = model.generation_stage(T.Tensor(np.ones((4, 30, 200))))
    assert out.shape == (32, 60, 400)


def test_generation_stage_zero_weights_zero_output():
    model = small_model()
    model.gen_kernel.data[:] = 0.0
    out = model.generation_stage(T.Tensor(np.ones((2, 8, 8))))
    assert np.all(out.data == 0.0)


def test_generation_stage_gradient():
    rng = np.random.default_rng(0)
    gradcheck(lambda x, k: T.tsum(T.sigmoid(T.deconv2d(x, k, stride=2))),
              [rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 3, 4, 4))])


# -- block ------------------------------------------------------------------------------

def test_block_halves_extents():
    block = network.GraSensBlock(network.BlockConfig(width=32), seed=0)
    out = block.forward(T.Tensor(np.random.default_rng(1).normal(size=(32, 64, 64))))
    assert out.shape == (32, 32, 32)


def test_block_all_toggles_off_keeps_shape():
    cfg = network.BlockConfig(width=8, use_gabor=False, use_antialias=False,
                              use_temporal_att=False, use_frequency_att=False)
    block = network.GraSensBlock(cfg, seed=0)
    out = block.forward(T.Tensor(np.random.default_rng(2).normal(size=(8, 16, 16))))
    assert out.shape == (8, 8, 8)
    names = set(block.parameters())
    assert "plain.kernel" in names and "gabor.omega" not in names


def test_block_rejects_degenerate_extent():
    block = network.GraSensBlock(network.BlockConfig(width=4), seed=0)
    with pytest.raises(ConfigurationError):
        block.forward(T.Tensor(np.ones((4, 1, 8))))


@pytest.mark.parametrize("toggles", [
    {},
    {"use_gabor": False},
    {"use_antialias": False},
    {"use_temporal_att": False, "use_frequency_att": False},
])
def test_ablation_keeps_shapes(toggles):
    cfg = network.BlockConfig(width=8, **toggles)
    block = network.GraSensBlock(cfg, seed=3)
    out = block.forward(T.Tensor(np.random.default_rng(3).normal(size=(8, 16, 16))))
    assert out.shape == (8, 8, 8)


# -- forward / shape contracts -------------------------------------------------------------

def test_forward_logit_length():
    model = small_model(classes=3, lam=1, width=8, in_channels=4, hw=(8, 8))
    logits = model.forward(np.random.default_rng(4).normal(size=(4, 8, 8)))
    assert logits.shape == (3,)


def test_forward_deterministic():
    model = small_model()
    x = np.random.default_rng(5).normal(size=(2, 8, 8))
    assert np.array_equal(model.forward(x).data, model.forward(x).data)


def test_forward_rejects_wrong_shape():
    model = small_model()
    with pytest.raises(ConfigurationError):
        model.forward(np.ones((2, 9, 9)))


def test_build_rejects_excessive_lam():
    with pytest.raises(ConfigurationError) as err:
        small_model(lam=6, hw=(8, 8))
    assert "lam" in str(err.value)


def test_smoothing_matrix_rows_sum_one_and_invertible():
    for n in range(2, 9):
        m = network._smoothing_matrix(n)
        assert np.allclose(m.sum(axis=1), 1.0)
        assert abs(np.linalg.det(m)) > 1e-6


# -- loss ----------------------------------------------------------------------------------

def test_loss_uniform_logits():
    loss = network.loss_fn(T.Tensor(np.zeros(4)), 2)
    assert abs(float(loss.data) - np.log(4)) < 1e-12


def test_loss_saturated_correct_class():
    logits = np.zeros(3)
    logits[1] = 30.0
    assert float(network.loss_fn(T.Tensor(logits), 1).data) < 1e-9


def test_loss_nonnegative_property():
    rng = np.random.default_rng(6)
    for _ in range(20):
        logits = rng.normal(size=4)
        assert float(network.loss_fn(T.Tensor(logits), int(rng.integers(4))).data) >= 0


# -- optimizer -------------------------------------------------------------------------------

def test_sgd_no_momentum_single_step():
    p = T.Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.ones(1)
    cfg = network.TrainConfig(lr=0.1, momentum=0.0, epochs=1)
    network.sgd_momentum_step({"p": p}, {}, cfg)
    assert np.allclose(p.data, [-0.1])


def test_sgd_momentum_hand_iteration():
    p = T.Tensor(np.zeros(1), requires_grad=True)
    cfg = network.TrainConfig(lr=0.1, momentum=0.9, epochs=1)
    state = {}
    p.grad = np.ones(1)
    network.sgd_momentum_step({"p": p}, state, cfg)
    assert np.allclose(state["p"], [1.0])
    assert np.allclose(p.data, [-0.1])
    p.grad = np.ones(1)
    network.sgd_momentum_step({"p": p}, state, cfg)
    assert np.allclose(state["p"], [1.9])
    assert np.allclose(p.data, [-0.29])


def test_sgd_minimizes_quadratic():
    p = T.Tensor(np.array([3.0]), requires_grad=True)
    cfg = network.TrainConfig(lr=0.1, momentum=0.9, epochs=1)
    state = {}
    for _ in range(200):
        p.grad = 2 * p.data
        network.sgd_momentum_step({"p": p}, state, cfg)
    assert abs(p.data[0]) < 1e-3


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        network.TrainConfig(lr=-0.1)
    with pytest.raises(ConfigurationError):
        network.TrainConfig(momentum=1.0)
    network.TrainConfig(lr=0.0)  # zero is allowed: freezes parameters


# -- metrics -----------------------------------------------------------------------------------

def test_metrics_all_correct():
    preds = list(np.random.default_rng(7).integers(0, 4, size=50))
    m = network.metrics(preds, preds, n_classes=4)
    assert m["accuracy"] == 1.0
    for v in m["precision"].values():
        assert v is None or v == 1.0


def test_metrics_precision_formula():
    # class 0: TP=8, FP=2 -> precision 0.8
    truths = [0] * 8 + [1] * 2 + [1] * 3
    preds = [0] * 8 + [0] * 2 + [1] * 3
    m = network.metrics(preds, truths, n_classes=2)
    assert m["precision"][0] == pytest.approx(0.8)
    assert m["accuracy"] == pytest.approx(11 / 13)


def test_metrics_undefined_precision_is_none():
    m = network.metrics([0, 0], [0, 1], n_classes=3)
    assert m["precision"][2] is None
    assert m["precision"][1] is None


def test_metrics_confusion_row_sums():
    rng = np.random.default_rng(8)
    truths = rng.integers(0, 3, size=40)
    preds = rng.integers(0, 3, size=40)
    m = network.metrics(list(preds), list(truths), n_classes=3)
    for c in range(3):
        assert m["confusion"][c].sum() == np.sum(truths == c)


def test_metrics_empty_errors():
    with pytest.raises(UsageError):
        network.metrics([], [])


# -- checkpoint --------------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = small_model(classes=3, lam=1, width=4, in_channels=2, hw=(8, 8))
    x = np.random.default_rng(9).normal(size=(2, 8, 8))
    before = model.forward(x).data.copy()
    path = tmp_path / "model.grck"
    network.save_checkpoint(model, path, optimizer_state={"p": np.arange(3.0)})
    loaded, opt_state, header = network.load_checkpoint(path)
    assert np.array_equal(loaded.forward(x).data, before)
    assert np.array_equal(opt_state["p"], np.arange(3.0))
    for name, p in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name].data, p.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "broken.grck"
    model = small_model()
    network.save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ParseError) as err:
        network.load_checkpoint(path)
    assert err.value.offset == 0


# -- training loop ------------------------------------------------------------------------------

def test_train_lr_zero_leaves_parameters_unchanged():
    splits = tiny_dataset()
    model = small_model(in_channels=1, hw=(12, 16), width=4, lam=1)
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    cfg = network.TrainConfig(lr=0.0, momentum=0.9, epochs=1, batch_size=4, seed=0)
    network.train(splits, model, cfg)
    for k, v in model.parameters().items():
        assert np.array_equal(v.data, before[k]), k


def test_train_deterministic_same_seed():
    cfg = network.TrainConfig(lr=0.001, momentum=0.9, epochs=2, batch_size=4, seed=1)
    rows = []
    for _ in range(2):
        model = small_model(in_channels=1, hw=(12, 16), width=4, lam=1)
        rows.append(network.train(tiny_dataset(), model, cfg))
    assert rows[0] == rows[1]


def test_train_divergence_reported():
    splits = tiny_dataset()
    model = small_model(in_channels=1, hw=(12, 16), width=4, lam=1)
    model.task_weight.data[:] = np.nan
    cfg = network.TrainConfig(lr=0.001, epochs=1, batch_size=4, seed=0)
    with pytest.raises(DivergenceError) as err:
        network.train(splits, model, cfg)
    assert "step" in str(err.value)


def test_train_requires_train_split():
    model = small_model(in_channels=1, hw=(12, 16), width=4, lam=1)
    with pytest.raises(DataError):
        network.train({"val": [(np.ones((1, 12, 16)), 0)]}, model,
                      network.TrainConfig(epochs=1))


def test_train_writes_metrics_and_best_checkpoint(tmp_path):
    splits = tiny_dataset()
    model = small_model(in_channels=1, hw=(12, 16), width=4, lam=1)
    cfg = network.TrainConfig(lr=0.001, epochs=2, batch_size=4, seed=0)
    metrics_path = tmp_path / "metrics.csv"
    ckpt = tmp_path / "best.grck"
    rows = network.train(splits, model, cfg, metrics_path=metrics_path,
                         checkpoint_path=ckpt)
    lines = metrics_path.read_text().strip().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy,precision_macro"
    assert len(lines) == 1 + len(rows)
    assert len(rows) == 2 * cfg.epochs  # train + val per epoch
    best, _, header = network.load_checkpoint(ckpt)
    assert header["extra"]["val_accuracy"] == max(
        r["accuracy"] for r in rows if r["split"] == "val")


# -- full-model gradient check ---------------------------------------------------------------------

def test_full_model_gradient_small():
    model = small_model(classes=2, lam=1, width=4, in_channels=2, hw=(8, 8))
    x = np.random.default_rng(10).normal(size=(2, 8, 8))
    model_gradcheck(model, x, label=1, rel=1e-3, max_coords_per_param=3)
