"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``. The two training
fixtures dominate the runtime (several minutes together).
"""

import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import moleseg.tensor as T
from moleseg import checkpoint as ckpt
from moleseg import data as data_mod
from moleseg.config import parse_config
from moleseg.data import NoiseSpec, decode_tensor, encode_tensor
from moleseg.decoder import Decoder
from moleseg.evaluation import Scenario, all_subset_scenarios, run_scenarios
from moleseg.fusion import fuse_streams, make_routers, route
from moleseg.model import MultiModalSegmenter
from moleseg.neck import FeatureTriple, topdown_fuse
from moleseg.tensor import ParameterRegistry, Tensor
from moleseg.training import (AdamW, OhemConfig, Schedule, head_losses, lr_at,
                              ohem_ce, total_loss, train_loop)

import oracles
from fd import central_diff, max_rel_error


def report(n, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {n} [{name}]: {status} {detail}")
    assert ok, f"criterion {n} ({name}) failed: {detail}"


# -- shared training runs -------------------------------------------------------

OVERFIT_2MOD_CFG = """
[model]
d = 64
classes = 3
r = 8
window = 4
dropout = 0.0
[data]
root = {root}
modalities = rgb, depth
height = 64
width = 64
[optim]
base_lr = 0.0042
epochs = 500
batch = 32
warmup_epochs = 2
checkpoint_every = 1000
seed = 0
"""

OVERFIT_4MOD_CFG = """
[model]
d = 64
classes = 3
r = 8
window = 4
dropout = 0.0
[data]
root = {root}
modalities = rgb, depth, event, lidar
height = 64
width = 64
[optim]
base_lr = 0.0035
epochs = 63
batch = 8
warmup_epochs = 2
checkpoint_every = 1000
seed = 0
"""


@pytest.fixture(scope="session")
def overfit_2mod(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept2")
    data_mod.gen_synthetic(root / "ds", seed=11, count=32, classes=3,
                           height=64, width=64, modalities=["rgb", "depth"])
    cfg = parse_config(OVERFIT_2MOD_CFG.format(root=root / "ds"))
    model = ckpt.build_model(cfg)
    samples = data_mod.load_split(root / "ds", "train")
    start = time.monotonic()
    summary = train_loop(model, samples, cfg, root / "run")
    elapsed = time.monotonic() - start
    return {"root": root, "cfg": cfg, "summary": summary, "elapsed": elapsed,
            "samples": samples}


@pytest.fixture(scope="session")
def overfit_4mod(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept4")
    data_mod.gen_synthetic(root / "ds", seed=11, count=32, classes=3,
                           height=64, width=64,
                           modalities=["rgb", "depth", "event", "lidar"])
    cfg = parse_config(OVERFIT_4MOD_CFG.format(root=root / "ds"))
    model = ckpt.build_model(cfg)
    samples = data_mod.load_split(root / "ds", "train")
    start = time.monotonic()
    train_loop(model, samples, cfg, root / "run")
    elapsed = time.monotonic() - start
    best, _, _ = ckpt.load_checkpoint(root / "run" / "checkpoints" / "best")
    return {"root": root, "model": best, "samples": samples, "elapsed": elapsed}


# -- criterion 1: gradient suite ----------------------------------------------

def _op_cases():
    return [
        ("matmul", lambda t: T.matmul(t[0], t[1]), [(3, 4), (4, 2)]),
        ("softmax", lambda t: T.mul(T.softmax(t[0], axis=1), t[1]), [(3, 5), (3, 5)]),
        ("conv1x1", lambda t: T.conv1x1(t[0], t[1], t[2]), [(3, 4, 4), (2, 3), (2,)]),
        ("upsample", lambda t: T.mul(T.upsample_bilinear(t[0], 7, 9), t[1]),
         [(2, 3, 4), (2, 7, 9)]),
        ("mean_spatial", lambda t: T.mul(T.mean_spatial(t[0]), t[1]), [(3, 4, 5), (3,)]),
        ("concat", lambda t: T.mul(T.concat_channels([t[0], t[1]]), t[2]),
         [(2, 3, 3), (1, 3, 3), (3, 3, 3)]),
        ("avgpool", lambda t: T.mul(T.avgpool2x2(t[0]), t[1]), [(2, 4, 6), (2, 2, 3)]),
        ("add", lambda t: T.add(t[0], t[1]), [(3, 4), (4,)]),
        ("mul", lambda t: T.mul(t[0], t[1]), [(3, 4), (3, 4)]),
        ("relu", lambda t: T.relu(T.add(t[0], 0.2)), [(4, 4)]),
        ("pad_crop", lambda t: T.mul(T.crop2d(T.pad2d(t[0], 1, 2, axes=(1, 2)),
                                              3, 4, axes=(1, 2)), t[1]),
         [(2, 3, 4), (2, 3, 4)]),
        ("dropout_free_reshape",
         lambda t: T.mul(T.reshape(T.transpose(t[0], (1, 0, 2)), (12, 2)), t[1]),
         [(3, 4, 2), (12, 2)]),
    ]


def test_criterion_1_gradient_suite():
    start = time.monotonic()
    worst_op = 0.0
    for name, build, shapes in _op_cases():
        for seed in range(5):
            rng = np.random.default_rng(seed)
            arrays = [rng.standard_normal(s) for s in shapes]
            tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
            T.sum_all(build(tensors)).backward()

            def f(arrs):
                with T.no_grad():
                    return float(build([Tensor(a, dtype=np.float64)
                                        for a in arrs]).data.sum())

            numeric = central_diff(f, arrays, eps=1e-3)
            for t, n in zip(tensors, numeric):
                worst_op = max(worst_op, max_rel_error(t.grad, n))
    ops_ok = worst_op <= 1e-6

    # full model at the pinned configuration, 20 random parameters
    model = MultiModalSegmenter({"rgb": 3, "depth": 1}, num_classes=3, d=32,
                                rank=4, seed=42)
    model.cast(np.float64)
    r = np.random.default_rng(7)
    sample = {"rgb": r.uniform(0, 255, (3, 64, 64)),
              "depth": r.uniform(0, 255, (1, 64, 64))}
    labels = r.integers(0, 3, (64, 64)).astype(np.uint8)
    labels[:4, :4] = 255

    def model_loss():
        with T.no_grad():
            dual, _, _ = model.forward(sample)
            return float(total_loss(dual, labels).data)

    dual, _, _ = model.forward(sample)
    total_loss(dual, labels).backward()
    params = model.trainable_parameters()
    pick = np.random.default_rng(0)
    worst_model = 0.0
    for _ in range(20):
        p = params[int(pick.integers(len(params)))]
        idx = tuple(int(pick.integers(s)) for s in p.data.shape)
        analytic = p.grad[idx]
        orig = p.data[idx]
        eps = 1e-3
        p.tensor.data[idx] = orig + eps
        hi = model_loss()
        p.tensor.data[idx] = orig - eps
        lo = model_loss()
        p.tensor.data[idx] = orig
        numeric = (hi - lo) / (2 * eps)
        worst_model = max(worst_model,
                          abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
    model_ok = worst_model <= 1e-4
    elapsed = time.monotonic() - start
    report(1, "gradient suite", ops_ok and model_ok and elapsed < 120,
           f"per-op max rel {worst_op:.2e} (<=1e-6), "
           f"end-to-end max rel {worst_model:.2e} (<=1e-4), {elapsed:.1f}s")


# -- criterion 2: equation oracles ----------------------------------------------

def test_criterion_2_equation_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    worst = {"topdown": 0.0, "fusion": 0.0, "refine": 0.0, "aux": 0.0, "loss": 0.0}

    # top-down pyramid recurrence vs the hand-unrolled oracle
    for _ in range(100):
        zs = [rng.standard_normal((2, s, s)).astype(np.float32) for s in (8, 4, 2)]
        got = topdown_fuse([Tensor(z) for z in zs], {0, 1})
        want = oracles.fpn_topdown([z.astype(np.float64) for z in zs], {0, 1},
                                   oracles.upsample_bilinear_loops)
        for g, e in zip(got, want):
            worst["topdown"] = max(worst["topdown"], float(np.abs(g.data - e).max()))

    # averaging + routing + top-k + combination vs the composed oracle
    reg = ParameterRegistry()
    routers = make_routers({"sfm": 8, "ifp": 2, "ffp": 1}, reg, np.random.default_rng(1))
    for trial in range(100):
        m = int(rng.integers(1, 5))
        k = int(rng.integers(1, m + 1))
        triples = []
        for i in range(m):
            triples.append((f"m{i}", FeatureTriple(
                sfm=Tensor(rng.standard_normal((8, 2, 2)).astype(np.float32)),
                ifp=Tensor(rng.standard_normal((2, 4, 4)).astype(np.float32)),
                ffp=Tensor(rng.standard_normal((1, 8, 8)).astype(np.float32)))))
        fused, _ = fuse_streams(triples, routers, k)
        for level, fmap in fused.level_maps().items():
            router = routers[level]
            maps = [t.level_maps()[level].data for _, t in triples]
            _, _, _, _, unified = oracles.routed_fusion(
                maps, router.weight.data, float(router.bias.data), k)
            worst["fusion"] = max(worst["fusion"], float(np.abs(fmap.data - unified).max()))

    # both decoder pathways vs compositions of the library primitives
    dec_reg = ParameterRegistry()
    dec = Decoder(16, 3, dec_reg, np.random.default_rng(2), dropout=0.0)
    dec.refine_ifp[0].tensor.data[:] = rng.standard_normal((3, 4)) * 0.3
    dec.refine_ffp[0].tensor.data[:] = rng.standard_normal((3, 2)) * 0.3
    dec.aux_pred[0].tensor.data[:] = rng.standard_normal((3, 2)) * 0.3
    for _ in range(100):
        s_low = Tensor(rng.standard_normal((3, 2, 2)).astype(np.float32))
        ifp = Tensor(rng.standard_normal((4, 4, 4)).astype(np.float32))
        ffp = Tensor(rng.standard_normal((2, 8, 8)).astype(np.float32))
        got = dec.refine(s_low, ifp, ffp)
        inter = T.add(T.upsample_bilinear(s_low, 4, 4),
                      T.conv1x1(ifp, dec.refine_ifp[0].tensor, dec.refine_ifp[1].tensor))
        want = T.add(T.upsample_bilinear(inter, 8, 8),
                     T.conv1x1(ffp, dec.refine_ffp[0].tensor, dec.refine_ffp[1].tensor))
        worst["refine"] = max(worst["refine"], float(np.abs(got.data - want.data).max()))

        sfm = Tensor(rng.standard_normal((16, 2, 2)).astype(np.float32))
        got_aux = dec.aux_head(sfm, ifp, ffp, train=False)
        ups = []
        for name, fmap in (("sfm", sfm), ("ifp", ifp), ("ffp", ffp)):
            w1, b1, w2, b2 = dec.aux_mlp[name]
            hid = T.relu(T.conv1x1(fmap, w1.tensor, b1.tensor))
            ups.append(T.upsample_bilinear(T.conv1x1(hid, w2.tensor, b2.tensor), 8, 8))
        cat = T.concat_channels(ups)
        fused = T.conv1x1(cat, dec.aux_fuse[0].tensor, dec.aux_fuse[1].tensor)
        want_aux = T.conv1x1(fused, dec.aux_pred[0].tensor, dec.aux_pred[1].tensor)
        worst["aux"] = max(worst["aux"], float(np.abs(got_aux.data - want_aux.data).max()))

    # mining loss vs the literal oracle, including the combined form
    for _ in range(100):
        logits = rng.standard_normal((3, 3, 3)).astype(np.float32) * 3
        labels = rng.integers(0, 4, (3, 3)).astype(np.uint8)
        labels[labels == 3] = 255
        got = float(ohem_ce(Tensor(logits), labels).data)
        want = oracles.ohem_loss(logits, labels)
        worst["loss"] = max(worst["loss"], abs(got - want))
    for combo in itertools.product([0, 1, 255], repeat=4):
        labels = np.array(combo, dtype=np.uint8).reshape(2, 2)
        logits = rng.standard_normal((2, 2, 2)).astype(np.float32) * 2
        got = float(ohem_ce(Tensor(logits), labels).data)
        want = oracles.ohem_loss(logits, labels)
        worst["loss"] = max(worst["loss"], abs(got - want))

    elapsed = time.monotonic() - start
    ok = all(v <= 1e-6 for v in worst.values()) and elapsed < 60
    report(2, "equation oracles", ok,
           " ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f" (<=1e-6), {elapsed:.1f}s")


# -- criterion 3: adapter contract ----------------------------------------------

def test_criterion_3_lora_contract(tmp_path):
    start = time.monotonic()
    model = MultiModalSegmenter({"rgb": 3, "depth": 1}, num_classes=3, d=16,
                                stages=3, window=2, rank=2, seed=4)
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32))
    fresh_ok = all(
        np.array_equal(a.data, b.data)
        for a, b in zip(model.encoder.encode(x, "rgb", use_adapters=True),
                        model.encoder.encode(x, "rgb", use_adapters=False)))

    data_mod.gen_synthetic(tmp_path / "ds", seed=21, count=8, classes=3,
                           height=32, width=32, modalities=["rgb", "depth"])
    cfg = parse_config(f"""
[model]
d = 16
classes = 3
r = 2
window = 2
[data]
root = {tmp_path / 'ds'}
modalities = rgb, depth
height = 32
width = 32
[optim]
base_lr = 0.002
epochs = 25
batch = 4
warmup_epochs = 2
checkpoint_every = 100
""")
    model = ckpt.build_model(cfg)
    frozen_before = {p.name: p.data.tobytes() for p in model.registry.frozen()}
    samples = data_mod.load_split(tmp_path / "ds", "train")
    summary = train_loop(model, samples, cfg, tmp_path / "run")
    steps_ok = summary["steps"] == 50

    frozen_ok = all(model.registry[n].data.tobytes() == raw
                    for n, raw in frozen_before.items())
    rank_ok = True
    for adapters in model.encoder.adapters.values():
        for ad in adapters:
            for delta in (ad.delta_q().data, ad.delta_v().data):
                sv = np.linalg.svd(delta, compute_uv=False)
                if sv[0] > 0 and int((sv > 1e-4 * sv[0]).sum()) > ad.rank:
                    rank_ok = False
    elapsed = time.monotonic() - start
    report(3, "adapter contract", fresh_ok and steps_ok and frozen_ok and rank_ok
           and elapsed < 60,
           f"fresh-noop={fresh_ok} 50-steps={steps_ok} frozen-bytes={frozen_ok} "
           f"rank-bound={rank_ok}, {elapsed:.1f}s")


# -- criterion 4: routing laws --------------------------------------------------

def test_criterion_4_routing_laws():
    rng = np.random.default_rng(6)
    reg = ParameterRegistry()
    routers = make_routers({"sfm": 8, "ifp": 2, "ffp": 1}, reg,
                           np.random.default_rng(7))

    def triple(tag):
        return (tag, FeatureTriple(
            sfm=Tensor(rng.standard_normal((8, 2, 2)).astype(np.float32)),
            ifp=Tensor(rng.standard_normal((2, 4, 4)).astype(np.float32)),
            ffp=Tensor(rng.standard_normal((1, 8, 8)).astype(np.float32)), tag=tag))

    sums_ok = perm_ok = mix_ok = True
    for trial in range(25):
        triples = [triple(f"m{i}") for i in range(int(rng.integers(2, 5)))]
        k = int(rng.integers(1, len(triples) + 1))
        fused, decisions = fuse_streams(triples, routers, k)
        for dec in decisions.values():
            sums_ok &= abs(float(dec.weights.data.sum()) - 1.0) <= 1e-6
        perm = list(rng.permutation(len(triples)))
        fused_p, dec_p = fuse_streams([triples[i] for i in perm], routers, k)
        for level in ("sfm", "ifp", "ffp"):
            perm_ok &= bool(np.allclose(fused.level_maps()[level].data,
                                        fused_p.level_maps()[level].data, atol=1e-6))
            wa, wb = decisions[level].weight_floats(), dec_p[level].weight_floats()
            perm_ok &= all(abs(wa[m] - wb[m]) <= 1e-6 for m in wa)

        fused_all, dec_all = fuse_streams(triples, routers, k=len(triples))
        for level in ("sfm", "ifp", "ffp"):
            maps = [t.level_maps()[level].data.astype(np.float64) for _, t in triples]
            w = dec_all[level].weights.data.astype(np.float64)
            mixture = sum(wi * mi for wi, mi in zip(w, maps))
            mean = sum(maps) / len(maps)
            mix_ok &= bool(np.allclose(fused_all.level_maps()[level].data,
                                       (mean + mixture) / 2.0, atol=1e-6))

    mono_reg = ParameterRegistry()
    router = type(routers["sfm"])(
        level="sfm", weight=mono_reg.register("w", np.array([1.0])),
        bias=mono_reg.register("b", np.array(0.0)))
    mono_ok = True
    for trial in range(500):
        m = int(rng.integers(2, 5))
        k = int(rng.integers(1, m + 1))
        logits = rng.standard_normal(m)
        maps = [Tensor(np.full((1, 2, 2), v, dtype=np.float32)) for v in logits]
        names = [str(i) for i in range(m)]
        before = route(maps, names, router, k)
        tgt = int(rng.integers(m))
        logits2 = logits.copy()
        logits2[tgt] += float(rng.uniform(0.05, 2.0))
        after = route([Tensor(np.full((1, 2, 2), v, dtype=np.float32))
                       for v in logits2], names, router, k)
        if tgt in before.selected and tgt not in after.selected:
            mono_ok = False
    report(4, "routing laws", sums_ok and perm_ok and mix_ok and mono_ok,
           f"gate-sum={sums_ok} permutation={perm_ok} k=M-mixture={mix_ok} "
           f"monotone(500)={mono_ok}")


# -- criterion 5: overfit smoke --------------------------------------------------

def test_criterion_5_overfit_smoke(overfit_2mod):
    rows = [line.split(",") for line in
            Path(overfit_2mod["summary"]["metrics"]).read_text().splitlines()]
    initial = float(rows[0][4])
    final = float(rows[-1][4])
    best_miou = overfit_2mod["summary"]["best_train_miou"]
    steps = overfit_2mod["summary"]["steps"]
    elapsed = overfit_2mod["elapsed"]
    ok = (steps <= 500 and best_miou >= 0.90 and final <= 0.2 * initial
          and elapsed < 600)
    report(5, "overfit smoke", ok,
           f"steps={steps} (<=500) miou={best_miou:.4f} (>=0.90) "
           f"loss {initial:.3f}->{final:.3f} ratio={final / initial:.3f} (<=0.2) "
           f"{elapsed:.0f}s (<600)")


# -- criterion 6: robustness grid -------------------------------------------------

def test_criterion_6_robustness_grid(overfit_4mod):
    start = time.monotonic()
    model = overfit_4mod["model"]
    samples = overfit_4mod["samples"]
    scenarios = all_subset_scenarios(model.modalities)
    scenarios += [
        Scenario("noise-rgb", tuple(model.modalities),
                 NoiseSpec("gaussian", "rgb", seed=5)),
        Scenario("noise-event", tuple(model.modalities),
                 NoiseSpec("gaussian", "event", seed=5)),
    ]
    results = {r.scenario.name: r.miou
               for r in run_scenarios(model, samples, scenarios)}
    full = results["rgb+depth+event+lidar"]
    subset_names = [s.name for s in scenarios[:15] if len(s.keep) < 4]
    a_ok = all(full >= results[name] - 0.02 for name in subset_names)
    b_ok = results["rgb+depth"] > results["event+lidar"]
    c_ok = (full - results["noise-rgb"]) > (full - results["noise-event"])
    elapsed = time.monotonic() - start
    total_elapsed = elapsed + overfit_4mod["elapsed"]
    ok = a_ok and b_ok and c_ok and total_elapsed < 300
    report(6, "robustness grid", ok,
           f"(a) full({full:.3f})>=subsets-0.02: {a_ok}; "
           f"(b) dense {results['rgb+depth']:.3f} > sparse {results['event+lidar']:.3f}: {b_ok}; "
           f"(c) rgb-noise drop {full - results['noise-rgb']:.3f} > "
           f"event-noise drop {full - results['noise-event']:.3f}: {c_ok}; "
           f"{total_elapsed:.0f}s (<300)")


# -- criterion 7: scheduler / optimizer -------------------------------------------

def test_criterion_7_scheduler_optimizer():
    s = Schedule(base_lr=3e-4, total_epochs=100, warmup_epochs=10,
                 warmup_ratio=0.1, poly_power=0.9)
    points = {0: 3e-5, 10: 3e-4, 55: 3e-4 * 0.5 ** 0.9}
    sched_ok = all(abs(lr_at(e, s) - v) <= 1e-9 * v for e, v in points.items())

    rng = np.random.default_rng(8)
    arr = rng.standard_normal(64).astype(np.float32)
    from moleseg.tensor import Parameter
    p = Parameter("p", arr)
    opt = AdamW([p], weight_decay=0.01)
    lr = 0.05
    opt.step(lr=lr)
    decay_ok = np.array_equal(p.data, arr * np.float32(1.0 - lr * 0.01))
    report(7, "scheduler/optimizer", sched_ok and decay_ok,
           f"lr-points={sched_ok} exact-decay={decay_ok}")


# -- criterion 8: determinism & persistence ---------------------------------------

def test_criterion_8_determinism_persistence(tmp_path):
    start = time.monotonic()
    data_mod.gen_synthetic(tmp_path / "ds", seed=31, count=6, classes=3,
                           height=32, width=32, modalities=["rgb", "depth"])
    cfg_text = f"""
[model]
d = 16
classes = 3
r = 2
window = 2
[data]
root = {tmp_path / 'ds'}
modalities = rgb, depth
height = 32
width = 32
[optim]
epochs = 3
batch = 2
warmup_epochs = 0
checkpoint_every = 1
seed = 9
"""
    (tmp_path / "run.cfg").write_text(cfg_text)
    for sub in ("a", "b"):
        proc = subprocess.run(
            [sys.executable, "-m", "moleseg", "train",
             "--config", str(tmp_path / "run.cfg"),
             "--out", str(tmp_path / sub), "--threads", "1"],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    logs_ok = ((tmp_path / "a" / "metrics.log").read_bytes()
               == (tmp_path / "b" / "metrics.log").read_bytes())

    model, _, _ = ckpt.load_checkpoint(tmp_path / "a" / "checkpoints" / "last")
    model2, _, _ = ckpt.load_checkpoint(tmp_path / "a" / "checkpoints" / "last")
    sample = data_mod.load_split(tmp_path / "ds", "test")[0]
    ckpt_ok = (model.logits(sample.modalities).tobytes()
               == model2.logits(sample.modalities).tobytes())

    rng = np.random.default_rng(10)
    arr = rng.standard_normal((3, 5, 7)).astype(np.float32)
    mmt_ok = decode_tensor(encode_tensor(arr)).tobytes() == arr.tobytes()

    fuzz_ok = True
    fuzz_rng = np.random.default_rng(11)
    for trial in range(10000):
        n = int(fuzz_rng.integers(0, 48))
        blob = fuzz_rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        if fuzz_rng.random() < 0.5:
            blob = b"MMT1" + blob
        try:
            data_mod.decode_tensor(blob)
        except data_mod.TensorFileError:
            pass
        except Exception:
            fuzz_ok = False
    elapsed = time.monotonic() - start
    report(8, "determinism & persistence",
           logs_ok and ckpt_ok and mmt_ok and fuzz_ok,
           f"logs={logs_ok} checkpoint={ckpt_ok} container={mmt_ok} "
           f"fuzz(10k)={fuzz_ok}, {elapsed:.1f}s")
