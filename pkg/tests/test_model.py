import numpy as np
import pytest

from shadingnet import model
from shadingnet.autograd import Tape, Tensor
from shadingnet.errors import CheckpointError
from shadingnet.losses import LossWeights, Targets, total_loss
from shadingnet.model import ArchConfig, build, encode, forward
from shadingnet.optim import adam_step

# small variant keeps forward passes cheap; the default layout is covered by the count test
SMALL = ArchConfig(encoder_channels=(4, 4, 8, 8, 8, 8), res_blocks=1, decoder_channels=8,
                   fusion_channels=4, refine_channels=4)


def _count_oracle(cfg: ArchConfig) -> int:
    """Parameter count from the layer table alone, independent of the builder."""
    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def block(c):
        return 2 * (2 * c + conv(c, c, 3))

    ch = cfg.encoder_channels
    total = conv(cfg.in_channels, ch[0], 3)
    for s in range(1, len(ch)):
        total += conv(ch[s - 1], ch[s], 3) + cfg.res_blocks * block(ch[s])
    total += 3 * cfg.eca_kernel
    for _ in range(3):
        cin = ch[-1]
        for skip_c in reversed(ch[:-1]):
            total += conv(cin + skip_c, cfg.decoder_channels, 3) + 2 * cfg.decoder_channels
            cin = cfg.decoder_channels
        total += conv(cin, 3, 3) + conv(cin, 1, 3)
    total += conv(9, cfg.fusion_channels, 1)
    total += conv(cfg.fusion_channels + 3, cfg.refine_channels, 3)
    total += len(cfg.dilations) * block(cfg.refine_channels)
    total += conv(cfg.refine_channels, 3, 3)
    return total


def test_default_parameter_count():
    net = build(0)
    assert net.count() == _count_oracle(ArchConfig()) == 16_494_478


def test_small_parameter_count_and_names():
    net = build(0, SMALL)
    assert net.count() == _count_oracle(SMALL)
    names = list(net.params)
    assert len(names) == len(set(names))
    assert all(p.name == n for n, p in net.params.items())


def test_build_is_deterministic_in_seed():
    a, b, c = build(5, SMALL), build(5, SMALL), build(6, SMALL)
    assert model.checkpoint_bytes(a) == model.checkpoint_bytes(b)
    assert model.checkpoint_bytes(a) != model.checkpoint_bytes(c)


def test_he_init_statistics():
    net = build(1)
    w = net["encoder.stage5.block0.conv1.weight"].data
    assert abs(w.mean()) < 2e-3
    assert w.std() == pytest.approx(np.sqrt(2 / (256 * 9)), rel=0.02)
    assert not net["encoder.stage5.block0.conv1.bias"].data.any()


@pytest.mark.parametrize("size,bottleneck", [(64, 2), (32, 1)])
def test_encode_shapes(size, bottleneck):
    net = build(0, SMALL)
    x = Tensor(np.random.default_rng(0).random((2, 3, size, size), dtype=np.float32))
    feat, skips = encode(net, x)
    assert feat.shape == (2, SMALL.encoder_channels[-1], bottleneck, bottleneck)
    assert [s.shape[2] for s in skips] == [size >> i for i in range(5)]
    assert [s.shape[1] for s in skips] == list(SMALL.encoder_channels[:-1])


@pytest.mark.parametrize("h,w", [(33, 33), (64, 48), (32, 31)])
def test_encode_rejects_indivisible_sizes(h, w):
    net = build(0, SMALL)
    with pytest.raises(ValueError, match="divisible by 32"):
        encode(net, Tensor(np.zeros((1, 3, h, w), np.float32)))


def test_encode_rejects_wrong_channel_count():
    with pytest.raises(ValueError, match="3-channel"):
        encode(build(0, SMALL), Tensor(np.zeros((1, 4, 32, 32), np.float32)))


@pytest.mark.parametrize("size", [32, 64, 96])
def test_forward_outputs_full_model(size):
    net = build(0)
    x = Tensor(np.random.default_rng(size).random((2, 3, size, size), dtype=np.float32))
    out = forward(net, x)
    chans = [t.shape[1] for _, t in out.items()]
    assert chans == [3, 3, 3, 1, 1, 1, 3]
    for name, t in out.items():
        assert t.shape[0] == 2 and t.shape[2:] == (size, size), name
        assert np.isfinite(t.data).all() and (t.data >= 0).all(), name


def test_each_decoder_feeds_the_refined_output():
    net = build(3, SMALL)
    x = Tensor(np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32))
    base = forward(net, x, mode="eval").rho_final.data
    for br in model.BRANCHES:
        probe = build(3, SMALL)
        for name, p in probe.params.items():
            if name.startswith(f"decoder.{br}.head_rho"):
                p.tensor.data[...] = 0
        changed = forward(probe, x, mode="eval").rho_final.data
        assert not np.array_equal(base, changed), br


def test_zero_eca_weights_halve_the_bottleneck():
    net = build(0, SMALL)
    x = Tensor(np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32))
    feat, _ = encode(net, x, mode="eval")
    for br in model.BRANCHES:
        net[f"eca.{br}.weight"].data[...] = 0
    half = {br: Tensor(feat.data * 0.5) for br in model.BRANCHES}
    a = forward(net, x, mode="eval")
    b = forward(net, x, mode="eval", gate_override=half)
    for (name, ta), (_, tb) in zip(a.items(), b.items()):
        np.testing.assert_allclose(ta.data, tb.data, rtol=1e-5, atol=1e-6, err_msg=name)


def test_gate_override_changes_only_downstream_outputs():
    net = build(0, SMALL)
    x = Tensor(np.random.default_rng(1).random((2, 3, 32, 32), dtype=np.float32))
    feat, _ = encode(net, x, mode="eval")
    a = forward(net, x, mode="eval")
    b = forward(net, x, mode="eval", gate_override={"ambient": Tensor(np.zeros_like(feat.data))})
    assert np.array_equal(a.rho_u.data, b.rho_u.data)
    assert np.array_equal(a.s_u.data, b.s_u.data)
    assert not np.array_equal(a.rho_amb.data, b.rho_amb.data)
    assert not np.array_equal(a.rho_final.data, b.rho_final.data)


def test_eval_mode_is_deterministic_and_leaves_stats():
    net = build(0, SMALL)
    x = Tensor(np.random.default_rng(2).random((2, 3, 32, 32), dtype=np.float32))
    stats = {k: (v.mean.copy(), v.var.copy()) for k, v in net.stats.items()}
    a = forward(net, x, mode="eval").rho_final.data
    b = forward(net, x, mode="eval").rho_final.data
    assert np.array_equal(a, b)
    for k, (m, v) in stats.items():
        assert np.array_equal(net.stats[k].mean, m) and np.array_equal(net.stats[k].var, v)


def test_eval_single_image_matches_batch_member():
    net = build(0, SMALL)
    x = np.random.default_rng(3).random((2, 3, 32, 32), dtype=np.float32)
    both = forward(net, Tensor(x), mode="eval").rho_final.data
    one = forward(net, Tensor(x[1:]), mode="eval").rho_final.data
    np.testing.assert_allclose(one[0], both[1], rtol=1e-5, atol=1e-6)


def _random_targets(rng, n, size):
    def m(c):
        return Tensor(rng.random((n, c, size, size), dtype=np.float32))
    return Targets(image=m(3), reflectance=m(3), shading_unified=m(1), shading_direct=m(1),
                   ambient=m(1), shadow=Tensor(-rng.random((n, 1, size, size), dtype=np.float32)))


def test_one_step_gives_every_parameter_a_finite_gradient():
    net = build(0)
    rng = np.random.default_rng(0)
    targets = _random_targets(rng, 2, 32)
    with Tape() as tape:
        out = forward(net, targets.image)
        total = total_loss(out, targets, LossWeights()).total
    tape.backward(total)
    tape.release()
    missing = [p.name for p in net if p.grad is None]
    assert not missing
    bad = [p.name for p in net if not np.isfinite(p.grad).all()]
    assert not bad
    assert sum(float(np.abs(p.grad).sum()) > 0 for p in net) == len(net)
    before = net["refine.exit.conv.weight"].data.copy()
    assert adam_step(net, 1e-3) == 0
    assert not np.array_equal(before, net["refine.exit.conv.weight"].data)


def _trained_small():
    net = build(0, SMALL)
    rng = np.random.default_rng(9)
    targets = _random_targets(rng, 2, 32)
    with Tape() as tape:
        total = total_loss(forward(net, targets.image), targets, LossWeights()).total
    tape.backward(total)
    tape.release()
    adam_step(net, 1e-3)
    return net


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = _trained_small()
    path = tmp_path / "m.shdn"
    model.save_checkpoint(net, path)
    back = model.load_checkpoint(path, SMALL)
    for name, p in net.params.items():
        q = back.params[name]
        assert p.data.tobytes() == q.data.tobytes()
        assert p.adam_m.tobytes() == q.adam_m.tobytes()
        assert p.adam_v.tobytes() == q.adam_v.tobytes()
        assert p.step_count == q.step_count == 1
    for name, st in net.stats.items():
        assert st.mean.tobytes() == back.stats[name].mean.tobytes()
        assert st.var.tobytes() == back.stats[name].var.tobytes()
    assert model.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_damage(tmp_path):
    blob = model.checkpoint_bytes(build(0, SMALL))
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x40
    cases = {
        "empty": b"",
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + (99).to_bytes(4, "little") + blob[8:],
        "truncated": blob[: len(blob) // 3],
        "tail": blob[:-1],
        "flipped": bytes(flipped),
    }
    for name, data in cases.items():
        with pytest.raises(CheckpointError):
            model.checkpoint_from_bytes(data, SMALL, where=name)
    with pytest.raises(CheckpointError):
        model.load_checkpoint(tmp_path / "absent.shdn", SMALL)
    assert CheckpointError("x").exit_code == 2


def test_checkpoint_rejects_config_mismatch():
    blob = model.checkpoint_bytes(build(0, SMALL))
    other = ArchConfig(encoder_channels=SMALL.encoder_channels, res_blocks=1, decoder_channels=16,
                       fusion_channels=4, refine_channels=4)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        model.checkpoint_from_bytes(blob, other)
    deeper = ArchConfig(encoder_channels=SMALL.encoder_channels, res_blocks=2, decoder_channels=8,
                        fusion_channels=4, refine_channels=4)
    with pytest.raises(CheckpointError, match="missing"):
        model.checkpoint_from_bytes(blob, deeper)
