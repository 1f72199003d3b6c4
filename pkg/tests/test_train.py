import numpy as np
import pytest

import seistile.train as train_mod
from seistile.data import SynthConfig, TileConfig, generate_synthetic_volume, tile_volume
from seistile.errors import ConfigError, DivergenceError
from seistile.network import build_model
from seistile.tensor import Tensor
from seistile.topology import count_parameters, parse_topology
from seistile.train import (
    OptimizerConfig,
    RMSProp,
    TrainConfig,
    checkpoint_from_model,
    load_checkpoint,
    lr_at_epoch,
    restore_model,
    save_checkpoint,
    train,
)

TINY_DSL = "c3 s2 6\nru s2 8\ntru s2 6\ntc3 s2 4\nout 7"


def tiny_tiles(slices=3, tile=16, classes=7):
    vol, masks = generate_synthetic_volume(
        SynthConfig(slices=slices, height=32, width=32, num_classes=classes, horizon_waviness=0.5)
    )
    cfg = TileConfig(tile_h=tile, tile_w=tile, overlap_fraction=0.5)
    return vol, masks, tile_volume(vol, masks, range(slices), cfg)


# ---------------------------------------------------------------- optimizer

def test_rmsprop_hand_recurrence():
    w = Tensor(np.array([0.5]), requires_grad=True)
    opt = RMSProp([("w", w, False)], OptimizerConfig(weight_decay=0.0))
    w.grad = np.array([1.0])
    opt.step(lr=0.01)
    np.testing.assert_allclose(opt.ms["w"], [0.1])
    np.testing.assert_allclose(opt.mom["w"], [0.01 / np.sqrt(1.1)], rtol=1e-12)
    np.testing.assert_allclose(w.data, [0.5 - 0.01 / np.sqrt(1.1)], rtol=1e-12)


def test_rmsprop_zero_grad_is_fixed_point():
    w = Tensor(np.array([1.25]), requires_grad=True)
    opt = RMSProp([("w", w, False)], OptimizerConfig(weight_decay=0.0))
    w.grad = np.array([0.0])
    opt.step(lr=0.1)
    np.testing.assert_array_equal(w.data, [1.25])


def test_rmsprop_momentum_decays_after_pulse():
    w = Tensor(np.array([0.0]), requires_grad=True)
    cfg = OptimizerConfig(weight_decay=0.0)
    opt = RMSProp([("w", w, False)], cfg)
    w.grad = np.array([1.0])
    opt.step(lr=0.01)
    first_mom = opt.mom["w"].copy()
    positions = [w.data.item()]
    for _ in range(2):
        w.grad = np.array([0.0])
        opt.step(lr=0.01)
        positions.append(w.data.item())
    # momentum decays by the momentum factor each step but keeps moving w
    np.testing.assert_allclose(opt.mom["w"], first_mom * 0.9**2, rtol=1e-12)
    assert positions[1] < positions[0] and positions[2] < positions[1]


def test_rmsprop_monotone_on_quadratic():
    # f(w) = a/2 w^2 with decay=momentum=0: step = lr*a*w/sqrt((a*w)^2 + 1)
    a, lr = 4.0, 0.4  # lr below 2/a
    w = Tensor(np.array([1.5]), requires_grad=True)
    opt = RMSProp([("w", w, False)], OptimizerConfig(decay=0.0, momentum=0.0, weight_decay=0.0))
    prev = a / 2 * w.data.item() ** 2
    for _ in range(60):
        w.grad = np.array([a * w.data.item()])
        opt.step(lr)
        cur = a / 2 * w.data.item() ** 2
        assert cur <= prev
        prev = cur
    assert prev < 1e-3


def test_weight_decay_touches_only_kernels():
    rng = np.random.default_rng(0)
    kernel_data = rng.normal(size=(3, 3, 2, 2))
    gamma_data = rng.normal(size=4)
    grad_k = rng.normal(size=(3, 3, 2, 2))
    grad_g = rng.normal(size=4)

    results = {}
    for wd in (0.0, 5e-4):
        kernel = Tensor(kernel_data.copy(), requires_grad=True)
        gamma = Tensor(gamma_data.copy(), requires_grad=True)
        opt = RMSProp(
            [("conv.kernel", kernel, True), ("bn.gamma", gamma, False)],
            OptimizerConfig(weight_decay=wd),
        )
        kernel.grad, gamma.grad = grad_k.copy(), grad_g.copy()
        opt.step(lr=0.01)
        results[wd] = (kernel.data.copy(), gamma.data.copy())
    np.testing.assert_array_equal(results[0.0][1], results[5e-4][1])  # BN identical
    assert not np.array_equal(results[0.0][0], results[5e-4][0])  # kernel differs


def test_rmsprop_rejects_non_finite_grads():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = RMSProp([("layer3.kernel", w, True)], OptimizerConfig())
    w.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="layer3.kernel"):
        opt.step(0.01)


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(decay=1.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(epsilon=0.0)


# ----------------------------------------------------------------- schedule

def test_lr_schedule_boundaries_inclusive():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg) == 0.01
    assert lr_at_epoch(49, cfg) == 0.01
    assert lr_at_epoch(50, cfg) == 0.001
    assert lr_at_epoch(99, cfg) == 0.001
    assert lr_at_epoch(100, cfg) == 5e-4
    assert lr_at_epoch(149, cfg) == 5e-4
    assert lr_at_epoch(150, cfg) == 1e-5
    assert lr_at_epoch(199, cfg) == 1e-5


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule=((10, 0.1), (5, 0.01)))
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule=((0, -0.1),))
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_forward_bitwise(tmp_path):
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=3, dtype=np.float32)
    model.buffers()[0][1][:] = 0.25  # make running stats non-trivial
    x = Tensor(np.random.default_rng(1).normal(size=(2, 16, 16, 1)).astype(np.float32))
    before = model.forward(x, train=False).data

    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model, epoch=5, val_miou=0.5), path)
    restored = restore_model(load_checkpoint(path))
    after = restored.forward(x, train=False).data
    assert np.array_equal(before, after)


def test_checkpoint_param_blob_length(tmp_path):
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=0, dtype=np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model), path)
    ckpt = load_checkpoint(path)
    param_bytes = sum(a.size * 4 for a in ckpt.params.values())
    assert param_bytes == 4 * count_parameters(spec)

    # the on-disk directory agrees: params are one contiguous leading section
    import json as _json

    blob = path.read_bytes()
    (hlen,) = np.frombuffer(blob[8:12], dtype="<u4")
    header = _json.loads(blob[12 : 12 + int(hlen)].decode())
    param_entries = [e for e in header["tensors"] if e["kind"] == "param"]
    assert param_entries[0]["offset"] == 0
    assert sum(e["nbytes"] for e in param_entries) == 4 * count_parameters(spec)


def test_checkpoint_preserves_optimizer_and_rng_state(tmp_path):
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=0, dtype=np.float32)
    opt = RMSProp(model.parameters(), OptimizerConfig())
    for _, t, _ in model.parameters():
        t.grad = np.ones_like(t.data)
    opt.step(0.01)
    rng = np.random.default_rng(77)
    rng.normal(size=10)

    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model, opt, epoch=1, val_miou=0.4, rng=rng), path)
    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 1 and abs(ckpt.val_miou - 0.4) < 1e-9
    for name, ms, mom in opt.state_arrays():
        np.testing.assert_allclose(ckpt.opt_ms[name], ms.astype(np.float32), rtol=1e-6)
    resumed = np.random.default_rng(1)
    resumed.bit_generator.state = ckpt.rng_state
    np.testing.assert_array_equal(resumed.normal(size=3), rng.normal(size=3))


# ------------------------------------------------------------- training loop

def _val_pairs(vol, masks, indices):
    return [(vol.slice(i), masks.slice(i)) for i in indices]


def test_epoch0_loss_bitwise_deterministic():
    vol, masks, tiles = tiny_tiles()
    spec = parse_topology(TINY_DSL, name="tiny")
    losses = []
    for _ in range(2):
        model = build_model(spec, seed=11, dtype=np.float64)
        _, log = train(model, tiles, _val_pairs(vol, masks, [2]),
                       TrainConfig(batch_size=4, max_epochs=1, seed=5),
                       OptimizerConfig())
        losses.append(log[0]["loss"])
    assert losses[0] == losses[1]


def test_best_checkpoint_argmax_with_earliest_tie(monkeypatch):
    vol, masks, tiles = tiny_tiles()
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=0, dtype=np.float32)
    sequence = iter([0.5, 0.9, 0.7])
    monkeypatch.setattr(train_mod, "_validation_miou", lambda *a, **k: next(sequence))
    best, log = train(model, tiles, _val_pairs(vol, masks, [2]),
                      TrainConfig(batch_size=8, max_epochs=3, seed=1),
                      OptimizerConfig())
    assert best.epoch == 1
    assert best.val_miou == 0.9
    assert [row["val_miou"] for row in log] == [0.5, 0.9, 0.7]


def test_bn_running_stats_update_in_train_frozen_in_validation():
    vol, masks, tiles = tiny_tiles()
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=2, dtype=np.float64)

    before = [arr.copy() for _, arr in model.buffers()]
    x = Tensor(tiles.images[:4][..., None])
    model.forward(x, train=True)
    after_train = [arr.copy() for _, arr in model.buffers()]
    assert any(not np.array_equal(a, b) for a, b in zip(before, after_train))

    train_mod._validation_miou(model, _val_pairs(vol, masks, [0]), tiles.tile_h, tiles.tile_w)
    after_val = [arr.copy() for _, arr in model.buffers()]
    for a, b in zip(after_train, after_val):
        np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_preserves_checkpoint():
    vol, masks, tiles = tiny_tiles()
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=4, dtype=np.float64)
    # poison one kernel after epoch 0 via a huge lr jump
    cfg = TrainConfig(batch_size=8, max_epochs=4, seed=0,
                      lr_schedule=((0, 1e-3), (1, 1e300)))
    with pytest.raises(DivergenceError) as excinfo:
        train(model, tiles, _val_pairs(vol, masks, [2]), cfg, OptimizerConfig())
    ckpt = excinfo.value.checkpoint
    assert ckpt is not None
    assert ckpt.epoch == 0  # the completed epoch


def test_partial_final_batch_kept(monkeypatch):
    vol, masks, tiles = tiny_tiles()  # 27 tiles
    steps = []
    original = RMSProp.step
    monkeypatch.setattr(RMSProp, "step", lambda self, lr: (steps.append(lr), original(self, lr))[1])
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=8, dtype=np.float32)
    train(model, tiles, _val_pairs(vol, masks, [2]),
          TrainConfig(batch_size=6, max_epochs=1, seed=0), OptimizerConfig())
    assert len(tiles) == 27
    assert len(steps) == 5  # 4 full batches of 6 plus the final batch of 3


def test_empty_tileset_rejected():
    vol, masks, tiles = tiny_tiles()
    empty = type(tiles)(images=tiles.images[:0], masks=tiles.masks[:0],
                        provenance=tiles.provenance[:0], tile_h=tiles.tile_h, tile_w=tiles.tile_w)
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=0)
    with pytest.raises(ConfigError):
        train(model, empty, [(np.zeros((16, 16)), np.zeros((16, 16), dtype=np.uint8))],
              TrainConfig(max_epochs=1), OptimizerConfig())


def test_log_csv_format(tmp_path):
    vol, masks, tiles = tiny_tiles()
    spec = parse_topology(TINY_DSL, name="tiny")
    model = build_model(spec, seed=6, dtype=np.float32)
    path = tmp_path / "log.csv"
    train(model, tiles, _val_pairs(vol, masks, [2]),
          TrainConfig(batch_size=8, max_epochs=2, seed=3), OptimizerConfig(),
          log_path=path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,val_miou,lr,seconds"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[3]) == 0.01
