"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance and time budget."""
import time

import numpy as np
import pytest

from shadingnet import dataio, model
from shadingnet.autograd import Tape, Tensor
from shadingnet.cli import main
from shadingnet.errors import CheckpointError, FormatError
from shadingnet.experiments import BRANCH_COMPONENTS, overfit
from shadingnet.gradcheck import check_gradients
from shadingnet.losses import LossWeights, Targets, total_loss
from shadingnet.metrics import PairJudgment, dssim, lmse, mse, smse, whdr
from shadingnet.model import ForwardOutputs, build, encode, forward
from shadingnet.physics import compose_unified, reconstruct_direct
from shadingnet.scene import random_scene, render
from shadingnet.train import read_log

from test_losses import LOSS_CASES, _kink_free_pair, _outputs, _targets
from test_metrics import naive_lmse
from test_tensor_core import GRAD_CASES

TERMS = ("rho_u", "rho_amb", "rho_shad", "s_u", "ambient", "shadow", "imf", "is", "refine_l1", "refine_grad")


def test_criterion_1_physics_identities(acceptance_line):
    t0 = time.perf_counter()
    bad = []
    for i in range(100):
        s = render(random_scene(dataio.sample_seed(0, i)), (64, 64))
        checks = {
            "sum": np.array_equal(s.shading_unified, s.shading_direct + s.ambient + s.shadow),
            "disjoint": not np.any(s.ambient * s.shadow),
            "reconstruct": np.array_equal(reconstruct_direct(s.shading_unified, s.ambient, s.shadow),
                                          s.shading_direct),
            "composite": np.abs(s.composite - compose_unified(s.reflectance, s.shading_unified)).max() <= 1e-6,
        }
        bad += [f"{i}:{k}" for k, ok in checks.items() if not ok]
    dt = time.perf_counter() - t0
    ok = not bad and dt < 30
    assert acceptance_line(1, ok, f"100 samples, violations={bad[:5] or 'none'}", dt)


def test_criterion_2_gradients(acceptance_line):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(5):
        for name, case in GRAD_CASES.items():
            fn, inputs = case(np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), max(check_gradients(fn, inputs, h=1e-3, seed=seed)))
        for name, case in LOSS_CASES.items():
            fn, inputs = case(np.random.default_rng(seed))
            worst[f"loss:{name}"] = max(worst.get(f"loss:{name}", 0.0),
                                        max(check_gradients(fn, inputs, h=1e-3, seed=seed)))
        for term in TERMS:
            rng = np.random.default_rng(seed)
            out, t = _outputs(rng, n=2, hw=3), _targets(rng, n=2, hw=3)
            out.rho_final, t.reflectance = _kink_free_pair(rng, (2, 3, 3, 3))
            preds = [getattr(out, k) for k in ForwardOutputs.FIELDS]

            def fn(*p, term=term, t=t):
                return total_loss(ForwardOutputs(*p), t).terms[term]

            key = f"term:{term}"
            worst[key] = max(worst.get(key, 0.0), max(check_gradients(fn, preds, h=1e-3, seed=seed)))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and dt < 120
    assert acceptance_line(2, ok, f"{len(worst)} ops/losses x 5 seeds, max rel err {worst[top]:.2e} ({top})", dt)


def test_criterion_3_metric_oracles(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    j, g = rng.random((3, 24, 24)), rng.random((3, 24, 24))
    grid = min(mse(a * j, g) for a in np.arange(0.0, 3.0 + 1e-9, 1e-4))
    checks = {
        "alpha_vs_grid": smse(j, g) <= grid + 1e-6,
        "scale_invariance": max(abs(smse(c * j, g) - smse(j, g)) for c in (0.1, 1.0, 10.0)) < 1e-7,
    }
    a, b = rng.random((3, 47, 33)), rng.random((3, 47, 33))
    checks["lmse_vs_naive"] = abs(lmse(a, b) - naive_lmse(a, b)) < 1e-7
    d = dssim(a, b)
    checks["dssim"] = dssim(a, a) == 0 and 0 <= d <= 1
    r = np.zeros((3, 1, 4))
    r[:, 0, :] = [0.2, 0.8, 0.5, 0.52]
    checks["whdr"] = (
        whdr(r, [PairJudgment((0, 0), (0, 1), "1"), PairJudgment((0, 2), (0, 3), "equal")]) == 0.0
        and whdr(r, [PairJudgment((0, 0), (0, 1), "2")]) == 1.0
        and whdr(r, [PairJudgment((0, 0), (0, 1), "1"), PairJudgment((0, 0), (0, 1), "equal")]) == 0.5)
    dt = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    assert acceptance_line(3, not failed and dt < 30, f"failed={failed or 'none'}", dt)


def test_criterion_4_architecture(acceptance_line):
    t0 = time.perf_counter()
    net = build(0)
    problems = []
    for size in (32, 64, 96):
        x = Tensor(np.random.default_rng(size).random((2, 3, size, size), dtype=np.float32))
        out = forward(net, x)
        if [t.shape[1] for _, t in out.items()] != [3, 3, 3, 1, 1, 1, 3]:
            problems.append(f"{size}:channels")
        if any(t.shape[2:] != (size, size) or (t.data < 0).any() for _, t in out.items()):
            problems.append(f"{size}:shape/sign")
    try:
        encode(net, Tensor(np.zeros((1, 3, 33, 33), np.float32)))
        problems.append("33 accepted")
    except ValueError:
        pass
    rng = np.random.default_rng(1)

    def m(c):
        return Tensor(rng.random((2, c, 32, 32), dtype=np.float32))

    t = Targets(image=m(3), reflectance=m(3), shading_unified=m(1), shading_direct=m(1), ambient=m(1),
                shadow=Tensor(-rng.random((2, 1, 32, 32), dtype=np.float32)))
    with Tape() as tape:
        total = total_loss(forward(net, t.image), t, LossWeights()).total
    tape.backward(total)
    tape.release()
    no_grad = [p.name for p in net if p.grad is None or not np.isfinite(p.grad).all()]
    if no_grad:
        problems.append(f"{len(no_grad)} params without finite grad")
    dt = time.perf_counter() - t0
    assert acceptance_line(4, not problems and dt < 60, f"problems={problems or 'none'}", dt)


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    t0 = time.perf_counter()
    summary = overfit(tmp_path_factory.mktemp("overfit"), n=10, seed=0, epochs=200, batch_size=4)
    return summary, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_toy_overfit(overfit_run, acceptance_line):
    s, dt = overfit_run
    ratio = s["final_loss"] / s["epoch1_mean_loss"]
    rho = s["smse"]["rho_final"]
    checks = {"n_train=8": s["n_train"] == 8, "loss<10%": ratio < 0.1, "smse<0.005": rho < 0.005,
              "is_gt==0": s["max_is_loss_gt"] == 0.0, "time<20min": dt < 1200}
    failed = [k for k, v in checks.items() if not v]
    detail = (f"final/epoch1 loss {s['final_loss']:.4f}/{s['epoch1_mean_loss']:.4f} = {ratio:.3f}, "
              f"rho_final SMSE {rho:.5f}, max is_loss(GT) {s['max_is_loss_gt']}, failed={failed or 'none'}")
    assert acceptance_line(5, not failed, detail, dt)


@pytest.mark.slow
def test_criterion_6_refinement_trend(overfit_run, acceptance_line):
    s, _ = overfit_run
    smses = s["smse"]
    best = min(smses[b] for b in BRANCH_COMPONENTS)
    ok = set(smses) == {"rho_final", *BRANCH_COMPONENTS} and smses["rho_final"] <= 1.1 * best
    detail = "SMSE " + ", ".join(f"{k} {v:.5f}" for k, v in smses.items()) + f", 1.1 x best branch {1.1 * best:.5f}"
    assert acceptance_line(6, ok, detail, 0.0)


def test_criterion_7_determinism(tmp_path, acceptance_line):
    t0 = time.perf_counter()
    step0, ckpts = [], []
    for name in ("a", "b"):
        data, run = tmp_path / f"data_{name}", tmp_path / f"run_{name}"
        assert main(["synth", "--n", "10", "--seed", "11", "--res", "64", "--out", str(data)]) == 0
        assert main(["train", "--data", str(data), "--out", str(run), "--res", "64", "--batch-size", "4",
                     "--epochs", "1", "--seed", "11", "--checkpoint-every", "0"]) == 0
        step0.append(read_log(run / "train_log.jsonl")[0]["total"])
        ckpts.append((run / "checkpoint_epoch001.shdn").read_bytes())
    dt = time.perf_counter() - t0
    ok = step0[0] == step0[1] and ckpts[0] == ckpts[1]
    detail = f"step-0 loss {step0[0]!r} vs {step0[1]!r}, epoch-1 checkpoints identical={ckpts[0] == ckpts[1]}"
    assert acceptance_line(7, ok, detail, dt)


def test_criterion_8_format_round_trips(tmp_path, acceptance_line):
    t0 = time.perf_counter()
    problems = []
    rng = np.random.default_rng(0)
    for shape in ((1, 5, 7), (3, 64, 64)):
        a = rng.standard_normal(shape).astype(np.float32)
        dataio.write_f32(tmp_path / "m.f32", a)
        if dataio.read_f32(tmp_path / "m.f32").tobytes() != a.tobytes():
            problems.append(f"f32 {shape}")
    raw = (tmp_path / "m.f32").read_bytes()
    for name, blob in {"header": b"XXXX" + raw[4:], "truncated": raw[:-5]}.items():
        (tmp_path / "bad.f32").write_bytes(blob)
        try:
            dataio.read_f32(tmp_path / "bad.f32")
            problems.append(f"f32 {name} accepted")
        except FormatError as e:
            if e.exit_code != 2:
                problems.append(f"f32 {name} code {e.exit_code}")
    net = build(0)
    model.save_checkpoint(net, tmp_path / "m.shdn")
    blob = (tmp_path / "m.shdn").read_bytes()
    if model.checkpoint_bytes(model.load_checkpoint(tmp_path / "m.shdn")) != blob:
        problems.append("checkpoint round trip")
    for name, bad in {"header": b"SHDX" + blob[4:], "truncated": blob[: len(blob) // 2]}.items():
        try:
            model.checkpoint_from_bytes(bad)
            problems.append(f"checkpoint {name} accepted")
        except CheckpointError as e:
            if e.exit_code != 2:
                problems.append(f"checkpoint {name} code {e.exit_code}")
    dt = time.perf_counter() - t0
    assert acceptance_line(8, not problems, f"problems={problems or 'none'}", dt)
