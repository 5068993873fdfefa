"""Backbone topology, determinism, fusion wiring, end-to-end gradients."""

import time

import numpy as np
import pytest

from osteograde import autodiff as ad
from osteograde.attention import cbam_param_count
from osteograde.autodiff import Tensor
from osteograde.backbone import (
    NetworkConfig,
    build_network,
    stage_branches,
    toy_config,
)
from osteograde.errors import ConfigError, DimensionError

from util import numeric_grad, rel_err

RNG = np.random.default_rng(7)


def micro_config(**overrides):
    defaults = dict(
        base_width=4,
        input_size=64,
        blocks_per_stage=(1, 1, 1, 1),
        head_width=8,
        cbam_ratio=4,
        dtype="float64",
    )
    defaults.update(overrides)
    return NetworkConfig(**defaults)


def random_input(cfg, rng=RNG):
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    return Tensor(rng.normal(size=(cfg.in_channels, cfg.input_size, cfg.input_size)).astype(dtype))


def test_build_is_deterministic_bit_identical():
    cfg = micro_config()
    a = build_network(cfg, seed=3)
    b = build_network(cfg, seed=3)
    assert set(a.params) == set(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name


def test_different_seed_changes_parameters():
    cfg = micro_config()
    a = build_network(cfg, seed=3)
    b = build_network(cfg, seed=4)
    assert not np.array_equal(a.params["stem.conv1.weight"].data, b.params["stem.conv1.weight"].data)


def test_stage_topology_one_to_four_branches():
    cfg = micro_config()
    for stage in range(1, 5):
        specs = stage_branches(cfg, stage)
        assert len(specs) == stage
        assert [s.scale_denominator for s in specs] == [2 ** j for j in range(stage)]
        assert [s.width for s in specs] == [cfg.base_width * 2 ** j for j in range(stage)]


def test_branch_scales_through_forward():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    capture = {}
    model.forward(random_input(cfg), training=False, capture=capture)
    s1 = capture["stage1.branch1.out"].shape[1]  # stage-1 resolution
    for j in range(1, 5):
        shape = capture[f"stage4.branch{j}.out"].shape
        assert shape[0] == cfg.base_width * 2 ** (j - 1)
        assert shape[1] == shape[2] == s1 // 2 ** (j - 1)
    assert s1 == cfg.input_size // 4  # two stride-2 stem convolutions


def test_fusion_output_widths_match_branch_widths():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    capture = {}
    model.forward(random_input(cfg), training=False, capture=capture)
    for stage in (2, 3, 4):
        for j in range(1, stage + 1):
            assert capture[f"fuse{stage}.branch{j}.out"].shape[0] == cfg.base_width * 2 ** (j - 1)


def test_transitions_appear_exactly_three_times():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    transitions = {n.split(".")[0] for n in model.params if n.startswith("transition")}
    assert transitions == {"transition1", "transition2", "transition3"}


def test_new_branch_halves_spatial_and_doubles_width():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    feat = Tensor(RNG.normal(size=(4, 16, 16)))
    out = model.new_branch(feat, stage=1, training=False)
    assert out.shape == (8, 8, 8)


def test_residual_block_zero_kernels_identity_on_nonneg_input():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    for name, tensor in model.params.items():
        if name.startswith("stage2.") and name.endswith("weight"):
            tensor.data[:] = 0
    feats = [
        Tensor(np.abs(RNG.normal(size=(4, 16, 16)))),
        Tensor(np.abs(RNG.normal(size=(8, 8, 8)))),
    ]
    outs = model.stage_forward(feats, stage=2, training=False)
    for fin, fout in zip(feats, outs):
        np.testing.assert_allclose(fout.data, fin.data, rtol=1e-6)


def test_stage_preserves_spatial_sizes():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    feats = [Tensor(RNG.normal(size=(4, 16, 16))), Tensor(RNG.normal(size=(8, 8, 8)))]
    outs = model.stage_forward(feats, stage=2, training=False)
    assert [f.shape for f in outs] == [(4, 16, 16), (8, 8, 8)]


def test_fuse_zeroed_lowres_transform_keeps_identity_path():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    model.params["fuse2.to1.from2.conv.weight"].data[:] = 0
    f1 = Tensor(np.abs(RNG.normal(size=(4, 16, 16))))
    f2 = Tensor(RNG.normal(size=(8, 8, 8)))
    outs = model.fuse([f1, f2], stage=2, training=False)
    # zero contribution from branch 2 -> branch 1 keeps its identity path
    # (batchnorm of a zero map is the shift, which is zero at init)
    np.testing.assert_allclose(outs[0].data, np.maximum(f1.data, 0), rtol=1e-6)


def test_fuse_gradient_flows_between_all_branch_pairs():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    shapes = [(4, 8, 8), (8, 4, 4), (16, 2, 2)]
    base = [RNG.normal(size=s) for s in shapes]

    def out_sum(j, feats_np):
        feats = [Tensor(f, dtype=np.float64) for f in feats_np]
        return float(model.fuse(feats, stage=3, training=False)[j].data.sum())

    h = 1e-4
    for k in range(3):
        for j in range(3):
            # finite-difference sensitivity probe along a random direction
            direction = RNG.normal(size=shapes[k])
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k] += h * direction
            minus[k] -= h * direction
            delta = out_sum(j, plus) - out_sum(j, minus)
            assert abs(delta) > 1e-8, f"no sensitivity from branch {k + 1} to branch {j + 1}"


def test_head_outputs_five_logits_and_probabilities_normalize():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    logits = model.forward(random_input(cfg), training=False)
    assert logits.shape == (5,)
    probs = ad.softmax(logits).data
    assert abs(probs.sum() - 1.0) < 1e-6


def test_forward_rejects_wrong_input_shape():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    with pytest.raises(DimensionError):
        model.forward(Tensor(np.zeros((3, 32, 32))))


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        NetworkConfig(base_width=0).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(input_size=50).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(num_classes=4).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(head_width=10, cbam_ratio=16).validate()


def test_toy_config_builds_and_runs_under_a_second():
    cfg = toy_config()
    model = build_network(cfg, seed=0)
    x = random_input(cfg)
    start = time.perf_counter()
    model.forward(x, training=False)
    assert time.perf_counter() - start < 1.0
    assert model.param_count() > 0


def test_cbam_parameter_count_delta_is_analytic():
    cfg_on = micro_config(cbam=True)
    cfg_off = micro_config(cbam=False)
    on = build_network(cfg_on, seed=0).param_count()
    off = build_network(cfg_off, seed=0).param_count()
    assert on - off == cbam_param_count(cfg_on.resolved_head_width, cfg_on.cbam_ratio)


def test_cbam_block_is_live_but_bypass_matches_no_cbam_model():
    cfg_on = micro_config(cbam=True)
    cfg_off = micro_config(cbam=False)
    m_on = build_network(cfg_on, seed=5)
    m_off = build_network(cfg_off, seed=5)
    x = random_input(cfg_on)
    with_attention = m_on.forward(x, training=False).data
    bypassed = m_on.forward(x, training=False, cbam_bypass=True).data
    plain = m_off.forward(x, training=False).data
    assert not np.allclose(with_attention, bypassed)  # the block changes logits
    np.testing.assert_array_equal(bypassed, plain)  # identity attention == no block


def test_end_to_end_gradient_check():
    cfg = micro_config()
    model = build_network(cfg, seed=2)
    x0 = RNG.normal(size=(3, 64, 64))
    seed_vec = RNG.normal(size=5)

    def value(xv):
        out = model.forward(Tensor(xv, dtype=np.float64), training=False)
        return float((out.data * seed_vec).sum())

    x = Tensor(x0, dtype=np.float64, requires_grad=True)
    logits = model.forward(x, training=False)
    logits.backward(seed_vec)
    picks = [tuple(RNG.integers(0, s) for s in x0.shape) for _ in range(12)]
    h = 1e-5
    numeric = []
    analytic = []
    for idx in picks:
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric.append((value(xp) - value(xm)) / (2 * h))
        analytic.append(x.grad[idx])
    assert rel_err(np.asarray(analytic), np.asarray(numeric)) < 1e-3


def test_end_to_end_parameter_gradient_check_training_mode():
    cfg = micro_config()
    model = build_network(cfg, seed=2)
    x0 = RNG.normal(size=(3, 64, 64))
    seed_vec = RNG.normal(size=5)
    names = [
        "stem.conv1.weight",
        "stage3.branch2.block1.conv1.weight",
        "fuse4.to1.from4.conv.weight",
        "cbam.mlp.fc1.weight",
        "cbam.spatial.conv.weight",
        "head.fc.weight",
        "head.expand.bn.scale",
    ]

    stats0 = {
        n: t.data.copy() for n, t in model.params.items() if n.endswith(("running_mean", "running_var"))
    }

    def reset_stats():
        for n, saved in stats0.items():
            model.params[n].data = saved.copy()

    def value():
        # training forwards move the normalization buffers; pin them so
        # every finite-difference evaluation sees the same function
        reset_stats()
        out = model.forward(Tensor(x0, dtype=np.float64), training=True)
        return float((out.data * seed_vec).sum())

    model.zero_grads()
    reset_stats()
    logits = model.forward(Tensor(x0, dtype=np.float64), training=True)
    logits.backward(seed_vec)
    h = 1e-5
    analytic, numeric = [], []
    for name in names:
        tensor = model.params[name]
        flat_idx = int(RNG.integers(0, tensor.data.size))
        idx = np.unravel_index(flat_idx, tensor.data.shape)
        orig = tensor.data[idx]
        tensor.data[idx] = orig + h
        fp = value()
        tensor.data[idx] = orig - h
        fm = value()
        tensor.data[idx] = orig
        numeric.append((fp - fm) / (2 * h))
        analytic.append(tensor.grad[idx])
    assert rel_err(np.asarray(analytic), np.asarray(numeric)) < 1e-3


def test_no_dead_parameters_probabilistic():
    # hidden width 8 in the attention MLP: small enough to stay fast, wide
    # enough that ReLU units dead on every probe are overwhelmingly unlikely
    cfg = micro_config(head_width=16, cbam_ratio=2)
    model = build_network(cfg, seed=1)
    totals = {name: 0.0 for name, _ in model.trainable()}
    for trial in range(3):
        model.zero_grads()
        x = Tensor(np.random.default_rng(trial).normal(size=(3, 64, 64)), dtype=np.float64)
        logits = model.forward(x, training=True)
        logits.backward(np.random.default_rng(100 + trial).normal(size=5))
        for name, tensor in model.trainable():
            if tensor.grad is not None:
                totals[name] += float(np.abs(tensor.grad).sum())
    dead = [name for name, total in totals.items() if total == 0.0]
    assert not dead, f"parameters with zero gradient on all probes: {dead}"


def test_feature_names_cover_captures():
    cfg = micro_config()
    model = build_network(cfg, seed=0)
    capture = {}
    model.forward(random_input(cfg), training=False, capture=capture)
    assert set(model.feature_names()) == set(capture)
