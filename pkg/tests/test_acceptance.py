"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criterion 7 needs the CIFAR-10 binary batches; point KNORMLAB_CIFAR10_DIR at
the directory holding them, otherwise it is skipped with a SKIP line.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

import conftest
import oracles
from knormlab import build_knresnet13, build_resnet8, build_vgg6, describe
from knormlab import norm as N
from knormlab import ops
from knormlab.accountant import DEFAULT_ORDERS, calibrate_sigma, rdp_epsilon
from knormlab.architectures import count_layers
from knormlab.autodiff import Tensor
from knormlab.checkpoint import load_checkpoint, save_checkpoint
from knormlab.config import ExperimentConfig
from knormlab.data import CIFAR_RECORD, decode_cifar_records, make_synthetic
from knormlab.dp import PrivacySpec, clip_per_sample, dp_sgd_step, noisy_aggregate, per_sample_gradients
from knormlab.experiment import train
from knormlab.fl import FederationConfig, fedavg_aggregate, partition_label_shard, run_federation
from knormlab.gradcheck import check_function, finite_difference_check
from knormlab.layers import Context
from knormlab.metrics import MetricsRecord, read_csv, summarize
from knormlab.plot import emit_plots
from knormlab.rng import Rng
from knormlab.training import TrainSettings, local_epochs, sgd_step
from test_norm import masks_by_convention, random_kn_config, random_stat_shape, unit_stats_all_kinds
from test_ops import random_conv_config

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def report(number, title, checks, elapsed=None, limit=None):
    """checks: list of (name, ok, detail).  Prints one line and asserts."""
    if limit is not None:
        checks = checks + [("runtime", elapsed < limit, f"{elapsed:.1f}s < {limit:.0f}s")]
    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{name} {d}" + ("" if good else " [FAILED]") for name, good, d in checks)
    line = f"criterion {number:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------

def _layer_checks(gen):
    w3 = lambda shape: Tensor(gen.normal(size=shape))  # noqa: E731
    x4 = gen.normal(size=(2, 3, 5, 6))
    cases = {
        "conv2d": (lambda t: ops.sum(ops.mul(ops.conv2d(t[0], t[1], t[2], (1, 2), 1), wc)),
                   [x4, gen.normal(size=(2, 3, 3, 3)), gen.normal(size=2)]),
        "linear": (lambda t: ops.sum(ops.mul(ops.linear(t[0], t[1], t[2]), wl)),
                   [gen.normal(size=(4, 5)), gen.normal(size=(3, 5)), gen.normal(size=3)]),
        "maxpool": (lambda t: ops.sum(ops.mul(ops.max_pool2d(t[0], 2), wm)), [gen.normal(size=(2, 2, 4, 6))]),
        "adaptive_avgpool": (lambda t: ops.sum(ops.mul(ops.adaptive_avg_pool2d(t[0], 2, 2), wa)),
                             [gen.normal(size=(2, 2, 5, 3))]),
        "mish": (lambda t: ops.sum(ops.mul(ops.mish(t[0]), wx)), [gen.normal(size=(3, 7)) * 3]),
        "relu": (lambda t: ops.sum(ops.mul(ops.relu(t[0]), wx)), [gen.normal(size=(3, 7))]),
        "kernelnorm_unit": (lambda t: ops.sum(ops.mul(N.kernel_normalize_unit(t[0], 0.5, Rng(2), stream=(1,))[0], wu)),
                            [gen.normal(size=(3, 2, 2))]),
        "kernelnorm_layer": (lambda t: ops.sum(ops.mul(N.kernelnorm_layer(t[0], 2, None, 0.5, Rng(5), key=(1,)), wk)),
                             [gen.normal(size=(2, 3, 4, 4))]),
        "knconv": (lambda t: ops.sum(ops.mish(N.knconv(t[0], t[1], t[2], 1, 1, 0.1, Rng(3), key=(0, 0)))),
                   [gen.normal(size=(2, 2, 4, 5)), gen.normal(size=(3, 2, 3, 3)), gen.normal(size=3)]),
        "layernorm": (lambda t: ops.sum(ops.mul(N.layer_normalize(t[0], t[1], t[2]), wn)),
                      [gen.normal(size=(2, 4, 3, 3)), gen.normal(size=4), gen.normal(size=4)]),
        "groupnorm": (lambda t: ops.sum(ops.mul(N.group_normalize(t[0], 2, t[1], t[2]), wn)),
                      [gen.normal(size=(2, 4, 3, 3)), gen.normal(size=4), gen.normal(size=4)]),
    }
    wc, wl, wm = w3((2, 2, 5, 3)), w3((4, 3)), w3((2, 2, 2, 3))
    wa, wx, wu, wk, wn = w3((2, 2, 2, 2)), w3((3, 7)), w3((3, 2, 2)), w3((2, 3, 4, 4)), w3((2, 4, 3, 3))
    return {name: check_function(fn, arrays).max_rel_error for name, (fn, arrays) in cases.items()}


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    errs = _layer_checks(np.random.default_rng(101))
    worst_layer = max(errs, key=errs.get)
    checks = [("layers", max(errs.values()) < 1e-4, f"max {errs[worst_layer]:.1e} ({worst_layer}) < 1e-4")]
    x16 = np.random.default_rng(5).uniform(size=(2, 3, 16, 16))
    y = np.array([0, 1])
    models = {
        "vgg6/kernel": build_vgg6(norm_kind="kernel", widths=(4, 4, 4, 4), hidden=8, image_size=16, num_classes=2),
        "vgg6/none": build_vgg6(norm_kind="none", widths=(4, 4, 4, 4), hidden=8, image_size=16, num_classes=2),
        "resnet8/group": build_resnet8(norm_kind="group", widths=(4, 8, 8), group_size=4, image_size=16,
                                       num_classes=2),
        "resnet8/kernel": build_resnet8(norm_kind="kernel", widths=(4, 8, 8), image_size=16, num_classes=2),
        "knresnet13/kernel": build_knresnet13(channel_schedule=(4, 4, 4, 4), image_size=16, num_classes=2),
    }
    worst = {}
    for name, m in models.items():
        worst[name] = finite_difference_check(m, x16, y, n_coords=200, seed=1).max_rel_error
    wm = max(worst, key=worst.get)
    checks.append(("models", worst[wm] < 1e-3, f"max {worst[wm]:.1e} ({wm}) < 1e-3 on 200 coords"))
    report(1, "gradient suite", checks, time.perf_counter() - t0, 300)


# -- 2 -------------------------------------------------------------------------

def test_criterion_02_normalization_statistics():
    t0 = time.perf_counter()
    gen = np.random.default_rng(21)
    mu = var = aff = 0.0
    for _ in range(100):
        shape, kernel, stride, padding, g = random_stat_shape(gen)
        x = gen.normal(size=shape) * gen.uniform(0.1, 10) + gen.uniform(-5, 5)
        for _, units in unit_stats_all_kinds(x, kernel, stride, padding, g):
            mu = max(mu, float(np.abs(units.mean(axis=1)).max()))
            var = max(var, float(np.abs(units.var(axis=1) - 1).max()))
        a, b = gen.uniform(0.2, 5.0), gen.uniform(-3, 3)
        base = unit_stats_all_kinds(x, kernel, stride, (0, 0), g)
        moved = unit_stats_all_kinds(a * x + b, kernel, stride, (0, 0), g)
        for (_, u), (_, v) in zip(base, moved):
            aff = max(aff, float(np.abs(u - v).max()))
    report(2, "normalization statistics", [
        ("mean", mu < 1e-8, f"{mu:.1e} < 1e-8"), ("var", var < 1e-6, f"{var:.1e} < 1e-6"),
        ("affine", aff <= 1e-9, f"{aff:.1e} <= 1e-9")], time.perf_counter() - t0, 60)


# -- 3 -------------------------------------------------------------------------

def test_criterion_03_oracle_equivalence():
    t0 = time.perf_counter()
    gen = np.random.default_rng(31)
    kc = kl = cv = 0.0
    for t in range(100):
        n, c, h, w, kh, kw, sh, sw = random_kn_config(gen)
        ph, pw = int(gen.integers(0, kh)), int(gen.integers(0, kw))
        p = (0.0, 0.5)[t % 2]
        f = int(gen.integers(1, 4))
        x = gen.normal(size=(n, c, h, w)) * 2 + 1
        wt, b = gen.normal(size=(f, c, kh, kw)), gen.normal(size=f)
        rng = Rng(t)
        got = N.knconv(Tensor(x), Tensor(wt), Tensor(b), (sh, sw), (ph, pw), p, rng, key=(5, t)).data
        ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
        m = masks_by_convention(rng, p, n, ho * wo, c * kh * kw, (5, t))
        kc = max(kc, float(np.max(np.abs(got - oracles.knconv_naive(x, wt, b, (sh, sw), (ph, pw), m)))))

        got = N.kernelnorm_layer(Tensor(x), (kh, kw), (sh, sw), p, rng, key=(9, t)).data
        lh, lw = (h - kh) // sh + 1, (w - kw) // sw + 1
        m = masks_by_convention(rng, p, n, lh * lw, c * kh * kw, (9, t))
        kl = max(kl, float(np.max(np.abs(got - oracles.kernelnorm_naive(x, (kh, kw), (sh, sw), m)))))

        cfg = random_conv_config(gen)
        got = ops.conv2d(Tensor(cfg["x"]), Tensor(cfg["w"]), Tensor(cfg["b"]), cfg["stride"], cfg["pad"]).data
        cv = max(cv, float(np.max(np.abs(got - oracles.conv2d_naive(cfg["x"], cfg["w"], cfg["b"], cfg["stride"],
                                                                   cfg["pad"])))))
    report(3, "oracle equivalence", [
        ("knconv", kc <= 1e-10, f"{kc:.1e} <= 1e-10"), ("kernelnorm_layer", kl <= 1e-10, f"{kl:.1e} <= 1e-10"),
        ("conv2d", cv <= 1e-12, f"{cv:.1e} <= 1e-12")], time.perf_counter() - t0, 120)


# -- 4 -------------------------------------------------------------------------

def test_criterion_04_dp_sgd():
    gen = np.random.default_rng(41)
    x = gen.uniform(size=(6, 3, 16, 16))
    y = np.arange(6) % 3
    ids = np.array([4, 0, 9, 2, 7, 5])
    psg = 0.0
    for m in (build_knresnet13(channel_schedule=(4, 4, 4, 4), image_size=16, num_classes=3),
              build_resnet8(norm_kind="group", widths=(4, 8, 8), group_size=4, image_size=16, num_classes=3)):
        a = per_sample_gradients(m, x, y, rng=Rng(1), step=2, sample_ids=ids, method="vectorized")
        b = per_sample_gradients(m, x, y, rng=Rng(1), step=2, sample_ids=ids, method="loop")
        psg = max(psg, float(np.max(np.abs(a - b))))

    clip_excess = -math.inf
    for t in range(200):
        g = gen.normal(size=(8, 50)) * 10.0 ** gen.uniform(-4, 4)
        c = float(10.0 ** gen.uniform(-3, 1))
        clip_excess = max(clip_excess, float(np.linalg.norm(clip_per_sample(g, c), axis=1).max() - c))

    a = build_knresnet13(channel_schedule=(4, 4, 4, 4), image_size=16, num_classes=3, seed=1)
    b = a.clone()
    spec = PrivacySpec(epsilon=1.0, clip=math.inf, sigma=0.0)
    xs, ys = gen.uniform(size=(12, 3, 16, 16)), np.arange(12) % 3
    rng = Rng(9)
    for step in range(10):
        ii = np.arange(step, step + 4) % 12
        sgd_step(a, xs[ii], ys[ii], 0.05, rng, step, ii)
        dp_sgd_step(b, xs[ii], ys[ii], spec, 0.05, rng=rng, step=step, sample_ids=ii)
    sgd = float(np.max(np.abs(a.get_flat() - b.get_flat())))

    sigma, clip, bsz = 1.3, 0.7, 8
    noise = noisy_aggregate(np.zeros((bsz, 100_000)), clip, sigma, bsz, Rng(0), ("noise", 0)) * bsz
    rel = abs(noise.std() / (sigma * clip) - 1)
    report(4, "dp-sgd correctness", [
        ("per-sample", psg <= 1e-10, f"{psg:.1e} <= 1e-10"),
        ("clip", clip_excess <= 1e-6, f"max norm - C = {clip_excess:.1e} <= 1e-6"),
        ("plain-sgd", sgd <= 1e-10, f"{sgd:.1e} <= 1e-10 over 10 steps"),
        ("noise-std", rel <= 0.01, f"rel dev {rel:.2%} <= 1% at 1e5 draws")])


# -- 5 -------------------------------------------------------------------------

def test_criterion_05_accountant():
    t0 = time.perf_counter()
    cf = 0.0
    for sigma in (0.5, 0.8, 1.0, 2.0, 5.0):
        want = oracles.gaussian_eps_closed_form(sigma, 1, 1e-5, DEFAULT_ORDERS)
        cf = max(cf, abs(rdp_epsilon(1.0, sigma, 1, 1e-5) - want) / want)
    trips = []
    for bsz in (512, 1024, 2048, 3072):
        q, steps = bsz / 50_000, 50 * math.ceil(50_000 / bsz)
        e = rdp_epsilon(q, calibrate_sigma(6.0, 1e-5, q, steps), steps, 1e-5)
        trips.append(e)
    rt_ok = all(5.94 <= e <= 6.0 for e in trips)
    qs, sigmas, ts = (0.005, 0.02, 0.08), (0.6, 1.2, 3.0), (10, 300, 5000)
    grid = {k: rdp_epsilon(k[0], k[1], k[2], 1e-5) for k in itertools.product(qs, sigmas, ts)}
    viol = 0
    for (q, s, t), e in grid.items():
        i, j, k = qs.index(q), sigmas.index(s), ts.index(t)
        viol += i < 2 and grid[(qs[i + 1], s, t)] < e
        viol += j < 2 and grid[(q, sigmas[j + 1], t)] > e
        viol += k < 2 and grid[(q, s, ts[k + 1])] < e
        viol += rdp_epsilon(q, s, 2 * t, 1e-5) < e
    report(5, "accountant", [
        ("q=1 closed form", cf <= 1e-3, f"rel err {cf:.1e} <= 0.1%"),
        ("round-trip", rt_ok, "eps " + ",".join(f"{e:.4f}" for e in trips) + " in [5.94, 6]"),
        ("monotonicity", viol == 0 and len(grid) == 27, f"{viol} violations on 27 points")],
        time.perf_counter() - t0, 60)


# -- 6 -------------------------------------------------------------------------

def test_criterion_06_fl_correctness():
    gen = np.random.default_rng(61)
    tr = make_synthetic(2, 40, seed=2, margin=24.0)
    te = make_synthetic(2, 20, seed=2, margin=24.0, split="test")
    s = TrainSettings(lr=0.05, batch_size=16, epochs=3, milestones="none")
    central = build_knresnet13(channel_schedule=(4, 4, 4, 4), image_size=16, num_classes=2, seed=4)
    fl_model = central.clone()
    step = 0
    for e in range(3):
        step = local_epochs(central, tr.images, tr.labels, np.arange(len(tr)), s, Rng(11), e, 1, step0=step)
    run_federation(fl_model, tr, te, partition_label_shard(tr.labels, 1, 2, 0), FederationConfig(1, rounds=3), s,
                   Rng(11))
    single = float(np.max(np.abs(central.get_flat() - fl_model.get_flat())))

    agg = 0.0
    for _ in range(50):
        k = int(gen.integers(1, 8))
        vecs = [gen.normal(size=13) for _ in range(k)]
        sizes = [int(v) for v in gen.integers(1, 1000, size=k)]
        agg = max(agg, float(np.max(np.abs(fedavg_aggregate(vecs, sizes) - oracles.weighted_mean_loop(vecs, sizes)))))

    good = 0
    tries = 0
    while good < 50:
        tries += 1
        nc = int(gen.integers(2, 11))
        n_clients = int(gen.integers(1, 13))
        cpc = int(gen.integers(1, nc + 1))
        if n_clients * cpc < nc:
            continue
        labels = np.concatenate([np.arange(nc), gen.integers(0, nc, size=int(gen.integers(3 * n_clients * cpc, 400)))])
        try:
            parts = partition_label_shard(labels, n_clients, cpc, int(gen.integers(1000)))
        except Exception:
            continue
        sets = [set(p.indices.tolist()) for p in parts]
        disjoint = sum(len(x) for x in sets) == len(labels)
        covered = set().union(*sets) == set(range(len(labels)))
        labels_ok = all(len(np.unique(labels[p.indices])) <= cpc for p in parts)
        if not (disjoint and covered and labels_ok):
            break
        good += 1

    labels = np.repeat(np.arange(10), 5000)
    gen.shuffle(labels)
    parts = partition_label_shard(labels, 10, 2, seed=0)
    structure = len(parts) == 10 and all(p.n == 5000 and len(np.unique(labels[p.indices])) == 2 for p in parts)
    report(6, "fl correctness", [
        ("single-client", single <= 1e-10, f"{single:.1e} <= 1e-10"),
        ("aggregate", agg <= 1e-12, f"{agg:.1e} <= 1e-12"),
        ("partition", good == 50, f"{good}/50 configs disjoint and covering"),
        ("10x2 structure", structure, "each of 10 clients: 2 classes, N/10 samples")])


# -- 7 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_fl_trend():
    path = os.environ.get("KNORMLAB_CIFAR10_DIR")
    if not path:
        line = "criterion  7 fl trend (kernel vs none): SKIP (set KNORMLAB_CIFAR10_DIR to the CIFAR-10 binary batches)"
        print(line)
        conftest.ACCEPTANCE_LINES.append(line)
        pytest.skip("CIFAR-10 binary batches not available")
    t0 = time.perf_counter()
    wins = 0
    parts = []
    for seed in range(3):
        acc = {}
        for norm in ("kernel", "none"):
            cfg = ExperimentConfig.from_file(os.path.join(CONFIGS, f"fl_trend_vgg6_{norm}.cfg"))
            cfg.override([f"data.path={path}", f"run.seed={seed}"])
            acc[norm] = train(cfg, write=False).summary
        wins += acc["kernel"] > acc["none"]
        parts.append(f"seed {seed}: {acc['kernel']:.3f} vs {acc['none']:.3f}")
    report(7, "fl trend (kernel vs none)", [("wins", wins >= 2, f"{wins}/3 ({', '.join(parts)})")],
           time.perf_counter() - t0, 7200)


# -- 8 -------------------------------------------------------------------------

def _final_train_acc(res):
    return [r.accuracy for r in res.records if r.split == "train"][-1]


def test_criterion_08_smoke_learning():
    t0 = time.perf_counter()
    central = []
    for seed in range(3):
        cfg = ExperimentConfig.from_file(os.path.join(CONFIGS, "smoke_central.cfg"))
        cfg.set("run.seed", seed)
        central.append(_final_train_acc(train(cfg, write=False)))
    cfg = ExperimentConfig.from_file(os.path.join(CONFIGS, "smoke_dp.cfg"))
    res = train(cfg, write=False)
    dp_acc = _final_train_acc(res)
    report(8, "smoke learning", [
        ("central", all(a >= 0.9 for a in central), "train acc " + ",".join(f"{a:.3f}" for a in central) + " >= 0.90"),
        ("dp", dp_acc >= 0.75 and res.epsilon <= 8.0, f"train acc {dp_acc:.3f} >= 0.75 at eps {res.epsilon:.3f}")],
        time.perf_counter() - t0, 600)


# -- 9 -------------------------------------------------------------------------

def test_criterion_09_architecture_audit():
    def oracle(w, classes=10):
        w0, w1, w2, w3 = w
        convs = [(3, w0), (w0, w0), (w0, w0), (w0, w1), (w1, w1), (w1, w1), (w1, w2), (w2, w2), (w2, w2),
                 (w2, w3), (w3, w3), (w3, w3)]
        return sum(a * b * 9 + b for a, b in convs) + w3 * 4 * classes + classes

    counts_ok = norm_ok = params_ok = True
    detail = []
    for w in ((64, 128, 256, 256), (8, 16, 16, 16)):
        m = build_knresnet13(channel_schedule=w)
        counts_ok &= count_layers(m, "knconv") == 12 and count_layers(m, "linear") == 1 and count_layers(m, "conv") == 0
        params_ok &= m.n_params() == oracle(w) == describe(m)["total_params"]
        detail.append(f"{m.n_params()}")
    for m in (build_knresnet13(), build_vgg6(norm_kind="kernel"), build_resnet8(norm_kind="kernel")):
        norm_ok &= m.norm_param_count() == 0
    report(9, "architecture audit", [
        ("layers", counts_ok, "12 knconv + 1 linear"),
        ("norm params", norm_ok, "0 for kernel variants"),
        ("param count", params_ok, "/".join(detail) + " match the walk-through oracle")])


# -- 10 ------------------------------------------------------------------------

def test_criterion_10_determinism_io(tmp_path):
    over = ["model.name=vgg6", "model.widths=4,4,4,4", "model.hidden=8", "data.synthetic_train=48",
            "data.synthetic_test=16", "train.epochs=2", "train.batch_size=16", "optim.lr=0.05"]
    runs = []
    for tag in ("a", "b"):
        cfg = ExperimentConfig().override(over)
        train(cfg, str(tmp_path / tag))
        runs.append((tmp_path / tag / "metrics.csv").read_bytes())
    csv_same = runs[0] == runs[1]

    m, _ = load_checkpoint(str(tmp_path / "a" / "checkpoint"))
    m.set_flat(m.get_flat() + np.random.default_rng(0).normal(size=m.n_params()))
    save_checkpoint(m, str(tmp_path / "ck"))
    back, _ = load_checkpoint(str(tmp_path / "ck"))
    x = np.random.default_rng(1).uniform(size=(3, 3, 16, 16))
    ck = max(float(np.max(np.abs(back(x).data - m(x).data))), float(np.max(np.abs(back.get_flat() - m.get_flat()))))

    rec = bytearray(CIFAR_RECORD)
    rec[0] = 3
    for k in range(3072):
        rec[1 + k] = (31 * k + 5) % 256
    images, labels = decode_cifar_records(bytes(rec))
    want = np.zeros((3, 32, 32))
    for ch in range(3):
        for r in range(32):
            for c in range(32):
                want[ch, r, c] = rec[1 + ch * 1024 + r * 32 + c] / 255.0
    cifar_ok = labels.tolist() == [3] and np.array_equal(images[0], want)

    p = str(tmp_path / "a" / "metrics.csv")
    emit_plots([p, str(tmp_path / "b" / "metrics.csv")], str(tmp_path / "1.svg"), ["a", "b"])
    emit_plots([p, str(tmp_path / "b" / "metrics.csv")], str(tmp_path / "2.svg"), ["a", "b"])
    svg_same = (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()
    report(10, "determinism and i/o", [
        ("csv", csv_same, "byte-identical across reruns"),
        ("checkpoint", ck <= 1e-12, f"{ck:.1e} <= 1e-12"),
        ("cifar record", cifar_ok, "3073-byte hand record decoded exactly"),
        ("svg", svg_same, "identical bytes")])
