"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Criterion 6 trains 4 presets x 5 seeds x k in {1, 5} and takes over an hour
on one CPU core.
"""

import copy
import inspect
import random
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aaf import ops
from aaf.cli import main
from aaf.config import ConfigError, check_shapes, parse, print_config
from aaf.gradcheck import gradcheck_params
from aaf.harness.data import DEFAULT_SPLIT
from aaf.harness.metrics import average_precision, compute_iou, match_detections
from aaf.harness.training import TREND_SCHEDULE, evaluate, finetune, register_novel, train_base
from aaf.harness.verify import GRADCHECK_TOL, detector_gradcheck, overfit_episode
from aaf.operators import AffinityKind, FusionParams, align
from aaf.pipeline import AAF, PRESETS, PipelineConfig, aaf_forward, preset
from aaf.tensor import ShapeError, Tensor
from oracles import brute_force_ap, iou_by_area, mutate, random_ap_instance, random_box, random_config


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# -- 1: gradients ---------------------------------------------------------------


def _away(rng, shape, gap=0.2):
    """Uniform values kept ``gap`` away from zero (clear of relu/abs kinks)."""
    x = rng.uniform(gap, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _op_cases(rng):
    """``name -> (fn(*tensors) -> Tensor or list, [input arrays])`` for every differentiable op."""
    distinct = rng.permutation(24).reshape(2, 3, 4) / 4.0 - 3.0
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    labels = (rng.random((3, 4)) < 0.3).astype(float)
    return {
        "add": (ops.add, [a, rng.uniform(-2, 2, (1, 4))]),
        "sub": (ops.sub, [a, b]),
        "mul": (ops.mul, [a, rng.uniform(-2, 2, (4,))]),
        "div": (ops.div, [a, pos]),
        "elementwise": (lambda x, y: ops.concat_channels([ops.elementwise(o, x, y) for o in ("mul", "sub", "add")]),
                        [a, b]),
        "scale": (lambda x: ops.scale(x, -1.7), [a]),
        "minimum": (ops.minimum, [distinct[0], distinct[1]]),
        "exp": (ops.exp, [a]),
        "log": (ops.log, [pos]),
        "sigmoid": (ops.sigmoid, [a]),
        "relu": (ops.relu, [_away(rng, (3, 4))]),
        "sum": (lambda x: ops.add(ops.sum(x, axis=1, keepdims=True), ops.scale(ops.sum(x, axis=(0, 1)), 0.3)),
                [rng.uniform(-2, 2, (2, 3, 4))]),
        "mean": (lambda x: ops.mean(x, axis=0), [a]),
        "reshape": (lambda x: ops.reshape(x, (4, 3)), [a]),
        "broadcast_to": (lambda x: ops.broadcast_to(x, (2, 3, 4)), [rng.uniform(-2, 2, (3, 1))]),
        "swap_last": (ops.swap_last, [rng.uniform(-2, 2, (2, 3, 4))]),
        "stack": (lambda x, y: ops.stack([x, y], axis=1), [a, b]),
        "take": (lambda x: ops.take(x, 1, axis=1), [rng.uniform(-2, 2, (2, 3, 4))]),
        "matmul": (ops.matmul, [rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (2, 4, 5))]),
        "softmax": (lambda x: ops.softmax(x, axis=-2), [rng.uniform(-3, 3, (2, 3, 4))]),
        "concat_channels": (lambda x, y: ops.concat_channels([x, y]), [a, b]),
        "split_channels": (lambda x: ops.concat_channels(ops.split_channels(x, [1, 3])[::-1]), [a]),
        "global_pool": (lambda x: ops.concat_channels([ops.global_pool(x, "max"), ops.global_pool(x, "avg")]),
                        [distinct[0]]),
        "pointwise_linear": (ops.pointwise_linear, [a, rng.uniform(-2, 2, (4, 2)), rng.uniform(-2, 2, (2,))]),
        "conv2d": (lambda x, w, bias: ops.concat_channels([
            ops.reshape(ops.conv2d(x, w, bias, stride=1, padding=1), (1, 50)),
            ops.reshape(ops.conv2d(x, w, bias, stride=2, padding=1), (1, 18))]),
            [rng.uniform(-1, 1, (1, 5, 5, 3)), rng.uniform(-1, 1, (3, 3, 3, 2)), rng.uniform(-1, 1, (2,))]),
        "sigmoid_focal_loss": (lambda x: ops.sigmoid_focal_loss(x, labels), [rng.uniform(-3, 3, (3, 4))]),
    }


def _public_ops():
    return {n for n, f in vars(ops).items()
            if inspect.isfunction(f) and f.__module__ == ops.__name__ and not n.startswith("_")}


@pytest.mark.criterion(1, "gradient correctness: every op and every preset end to end, <= 1e-4, < 2 min")
def test_c1_gradients(request):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cases = _op_cases(rng)
    assert set(cases) == _public_ops()
    worst = {}
    for name, (fn, arrays) in cases.items():
        tensors = {f"{name}.{i}": Tensor(x) for i, x in enumerate(arrays)}
        readout = Tensor(rng.uniform(-1, 1, np.shape(fn(*tensors.values()).data)))
        errs = gradcheck_params(lambda: ops.sum(ops.mul(fn(*tensors.values()), readout)), tensors, eps=1e-6)
        worst[name] = max(errs.values())
    for name in PRESETS:
        errs = detector_gradcheck(preset(name), max_coords=32)
        worst[f"preset:{name}"] = max(errs.values())
    errs = detector_gradcheck(preset("mfrcn_lite"), levels=2, max_coords=8)
    worst["preset:mfrcn_lite@2 levels"] = max(errs.values())
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    detail(request, f"max rel err {worst[top]:.2e} ({top}), {elapsed:.0f}s")
    assert worst[top] <= GRADCHECK_TOL, worst
    assert elapsed < 120


# -- 2: identity ------------------------------------------------------------------


@pytest.mark.criterion(2, "identity exactness: all-identity config returns the query map within 1e-12")
def test_c2_identity(request):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        m, n, d, k = (int(v) for v in rng.integers(1, 9, 4))
        q = Tensor(rng.normal(size=(m, d)) * 10 ** rng.uniform(-3, 3))
        sup = {c: [Tensor(rng.normal(size=(n, d))) for _ in range(k)] for c in range(3)}
        for out in aaf_forward(PipelineConfig(), q, sup).values():
            worst = max(worst, float(np.max(np.abs(out.data - q.data))))
        model = AAF(PipelineConfig(), d, rng)
        stacked = model.stacked(Tensor(q.data[None]), Tensor(rng.normal(size=(2, k, n, d))))
        worst = max(worst, float(np.max(np.abs(stacked.data - q.data))))
    detail(request, f"max deviation {worst:.1e}")
    assert worst <= 1e-12


# -- 3: AP and IoU oracles ----------------------------------------------------------


@pytest.mark.criterion(3, "oracle equivalence: AP on 1000 instances (<= 10 boxes), IoU on 1000 pairs to 1e-12")
def test_c3_oracles(request):
    ap_gap, flag_mismatch = 0.0, 0
    for seed in range(1000):
        preds, gts = random_ap_instance(np.random.default_rng(seed), max_boxes=10)
        assert len(preds) + len(gts) <= 10
        want, flags = brute_force_ap(preds, gts)
        ap_gap = max(ap_gap, abs(average_precision(preds, gts) - float(want)))
        if preds and gts and list(match_detections(preds, gts)) != flags:
            flag_mismatch += 1
    rng = np.random.default_rng(2)
    iou_gap = 0.0
    for i in range(1000):
        a, b = random_box(rng, integer=i % 2 == 0), random_box(rng, integer=i % 2 == 0)
        iou_gap = max(iou_gap, abs(compute_iou(a, b) - float(iou_by_area(a, b))))
    detail(request, f"AP gap {ap_gap:.1e}, matching mismatches {flag_mismatch}, IoU gap {iou_gap:.1e}")
    assert flag_mismatch == 0 and ap_gap <= 1e-12 and iou_gap <= 1e-12


# -- 4: convex bound ---------------------------------------------------------------


_C4_CASES = []


@st.composite
def _align_case(draw):
    m, n, d = draw(st.integers(1, 8)), draw(st.integers(1, 8)), draw(st.integers(1, 6))
    mag = draw(st.sampled_from([1e-3, 1.0, 10.0, 100.0]))
    elems = st.floats(-1, 1, allow_nan=False)
    phi = draw(hnp.arrays(np.float64, (m, d), elements=elems)) * mag
    rho = draw(hnp.arrays(np.float64, (n, d), elements=elems)) * mag
    scale = draw(st.one_of(st.none(), st.floats(1e-3, 10.0)))
    return phi, rho, scale


@settings(max_examples=10_000, database=None)
@given(_align_case())
def _convex_property(case):
    phi, rho, scale = case
    out = align(Tensor(phi), Tensor(rho), AffinityKind("softmax_dot_product", scale)).data
    lo, hi = phi.min(axis=0), phi.max(axis=0)
    tol = 1e-12 * np.maximum(1.0, np.abs(phi).max())
    assert np.all(out >= lo - tol) and np.all(out <= hi + tol)
    _C4_CASES.append(1)


@pytest.mark.criterion(4, "convex-combination bound: 10,000 softmax-alignment cases stay in [min, max]")
def test_c4_convex_bound(request):
    _C4_CASES.clear()
    _convex_property()
    detail(request, f"{len(_C4_CASES)} cases")
    assert len(_C4_CASES) >= 10_000


# -- 5: shape contracts -------------------------------------------------------------


@pytest.mark.criterion(5, "shape contracts: preset outputs and check_shapes soundness")
def test_c5_shapes(request):
    rng = np.random.default_rng(3)
    for name in PRESETS:
        for _ in range(50):
            m, n, d = (int(v) for v in rng.integers(1, 10, 3))
            model = AAF(preset(name), d, rng)
            sup = {c: [Tensor(rng.normal(size=(n, d))) for _ in range(2)] for c in range(2)}
            q = Tensor(rng.normal(size=(m, d)))
            check_shapes(model.config, (m, d), (n, d))
            for out in model(q, sup).values():
                assert out.shape == (m, preset(name).fusion.out_channels(d))
    rnd = random.Random(4)
    accepted = rejected = 0
    for _ in range(2000):
        cfg = random_config(rnd)
        m, n, d, d2 = rnd.randint(1, 5), rnd.randint(1, 5), rnd.randint(1, 3), rnd.randint(1, 3)
        params = FusionParams.init(cfg.fusion, d, rng)
        q = Tensor(rng.normal(size=(m, d)))
        sup = {0: [Tensor(rng.normal(size=(n, d2)))]}
        try:
            check_shapes(cfg, (m, d), (n, d2))
        except ConfigError:
            rejected += 1
            with pytest.raises(ShapeError):
                aaf_forward(cfg, q, sup, params)
        else:
            accepted += 1
            out = aaf_forward(cfg, q, sup, params)[0]
            assert out.shape == (m, cfg.out_channels(d))
    detail(request, f"{accepted} accepted ran, {rejected} rejected would raise")
    assert accepted > 100 and rejected > 100


# -- 6: desk-scale trend ------------------------------------------------------------

TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_EVAL_SEEDS = (0, 1)


@pytest.mark.criterion(6, "desk trend: novel mAP k=5 beats k=1 by >= 0.05, base within 0.05, 5 seeds/preset")
def test_c6_trend(request):
    results = {}  # (preset, k) -> list of (base, novel)
    slowest = 0.0
    for name in PRESETS:
        for seed in TREND_SEEDS:
            t0 = time.perf_counter()
            base = train_base(preset(name), DEFAULT_SPLIT, TREND_SCHEDULE, seed)
            base_time = time.perf_counter() - t0
            for k in (1, 5):
                t1 = time.perf_counter()
                det = copy.deepcopy(base)
                registry = register_novel(DEFAULT_SPLIT, k, seed)
                finetune(det, DEFAULT_SPLIT, k, TREND_SCHEDULE, seed, registry)
                rep = evaluate(det, DEFAULT_SPLIT, k, TREND_EVAL_SEEDS, registry, TREND_SCHEDULE.eval_scenes,
                               seed=seed)
                slowest = max(slowest, base_time + time.perf_counter() - t1)
                results.setdefault((name, k), []).append((rep.base_map, rep.novel_map))
    summary, ok = [], True
    for name in PRESETS:
        b1, n1 = np.mean(results[(name, 1)], axis=0)
        b5, n5 = np.mean(results[(name, 5)], axis=0)
        ok &= (n5 - n1 >= 0.05) and abs(b5 - b1) <= 0.05
        summary.append(f"{name} dnovel {n5 - n1:+.3f} dbase {b5 - b1:+.3f}")
    detail(request, "; ".join(summary) + f"; slowest run {slowest / 60:.1f} min")
    print("\n".join(f"{p} k={k}: " + " ".join(f"{b:.3f}/{n:.3f}" for b, n in v) for (p, k), v in results.items()))
    assert slowest <= 30 * 60
    assert ok, summary


# -- 7: overfit -----------------------------------------------------------------------


@pytest.mark.criterion(7, "overfit: every preset reaches >= 0.9 mAP on a frozen 2-class episode in 500 steps")
def test_c7_overfit(request):
    reached = {}
    for name in PRESETS:
        steps, score, _ = overfit_episode(preset(name), max_steps=500, target=0.9)
        reached[name] = (steps, score)
    detail(request, ", ".join(f"{n} {s:.2f}@{k}" for n, (k, s) in reached.items()))
    assert all(score >= 0.9 and steps <= 500 for steps, score in reached.values()), reached


# -- 8: parser robustness -------------------------------------------------------------


@pytest.mark.criterion(8, "parser: round trip on presets + 1000 random configs, 10,000 mutations give ConfigErrors")
def test_c8_parser(request):
    for name in PRESETS:
        assert parse(print_config(preset(name))) == preset(name)
    rnd = random.Random(5)
    for _ in range(1000):
        cfg = random_config(rnd)
        assert parse(print_config(cfg)) == cfg
    errors = accepted = 0
    for i in range(10_000):
        rnd = random.Random(10_000 + i)
        text = mutate(print_config(random_config(rnd)), rnd)
        try:
            parse(text)
            accepted += 1
        except ConfigError as exc:
            assert isinstance(exc.line, int) and exc.line >= 1, text
            errors += 1
    detail(request, f"{errors} structured errors, {accepted} mutants still valid, 0 crashes")


# -- 9: determinism -------------------------------------------------------------------


@pytest.mark.criterion(9, "determinism: identical seed, config and flags give byte-identical metrics CSVs")
def test_c9_determinism(request, tmp_path, capsys):
    flags = ["--preset", "mfrcn_lite", "--seed", "7", "--k", "3", "--episodes", "4", "--queries-per-class", "2",
             "--finetune-updates", "6", "--eval-scenes", "5", "--eval-every", "2"]
    blobs = []
    for run in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / run)] + flags) == 0
        blobs.append((tmp_path / run / "metrics.csv").read_bytes())
    capsys.readouterr()
    rows = len(blobs[0].splitlines()) - 1
    detail(request, f"{len(blobs[0])} bytes, {rows} rows")
    assert blobs[0] == blobs[1]
