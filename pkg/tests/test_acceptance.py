"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (or ``python tests/test_acceptance.py``).
Criteria 8 and 9 train real models and take a few minutes together.
"""

import contextlib
import time
from dataclasses import replace

import numpy as np
import pytest

from amdcn import kernels
from amdcn.metrics import count_mae, game, game_batch, scaled_mae_loss
from amdcn.model import default_config, init_params
from amdcn.optim import AdamState, adam_step
from amdcn.patchwork import PatchPolicy, cut_tiles, dense_scan_average, sample_patches, stitch_tiles
from amdcn.supervision import PerspectiveMap, PointAnnotations, make_density, ucsd_density
from amdcn.synthdata import SceneSpec, generate
from amdcn.tensor import (
    ConvSpec,
    GradTape,
    Tensor,
    abs_,
    add,
    concat_channels,
    conv2d,
    mul,
    relu,
    sub,
)
from amdcn.train import (
    AblationGrid,
    TrainPlan,
    ablate,
    evaluate,
    mean_baseline_mae,
    model_predictor,
    plot_ablation,
    read_ablation_table,
    train,
    write_ablation_table,
)
from gradcheck import max_rel_error, numeric_grad

GRAD_TOL = 1e-4
FD_STEP = 1e-5
MAX_GRAD_SHAPE = (2, 3, 9, 9)


@pytest.fixture
def criterion(capsys):
    """Context manager that prints ``criterion N: PASS|FAIL`` whatever the outcome."""

    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        status, detail = "FAIL", ""
        try:
            yield
            status = "PASS"
        except BaseException as exc:
            detail = f" ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
            raise
        finally:
            with capsys.disabled():
                print(f"\ncriterion {number}: {status} - {title} [{time.perf_counter() - t0:.1f}s]{detail}")

    return run


# ---------------------------------------------------------------------------
# 1. gradients


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _small_shape(rng, channels=None):
    return (
        int(rng.integers(1, 3)),
        int(channels or rng.integers(1, 4)),
        int(rng.integers(1, 10)),
        int(rng.integers(1, 10)),
    )


def _case_conv(rng):
    B, Ci, H, W = _small_shape(rng)
    Co = int(rng.integers(1, 3))  # keeps the kernel within 2x3x9x9 too
    k = int(rng.choice([1, 3, 5]))
    spec = ConvSpec(Ci, Co, (k, k), int(rng.integers(1, 5)))
    arrays = [rng.normal(size=(B, Ci, H, W)), rng.normal(size=spec.kernel_shape), rng.normal(size=Co)]
    return arrays, lambda x, w, b: conv2d(x, w, b, spec)


def _case_relu(rng):
    return [_away_from_zero(rng, _small_shape(rng))], relu


def _case_abs(rng):
    return [_away_from_zero(rng, _small_shape(rng))], abs_


def _case_binary(op):
    def make(rng):
        shape = _small_shape(rng)
        return [rng.normal(size=shape), rng.normal(size=shape)], op

    return make


def _case_concat(rng):
    B, _, H, W = _small_shape(rng)
    n = int(rng.integers(1, 4))
    arrays = [rng.normal(size=(B, int(rng.integers(1, 4)), H, W)) for _ in range(n)]
    return arrays, lambda *xs: concat_channels(xs)


def _case_loss(rng):
    shape = _small_shape(rng)
    y = rng.uniform(0, 0.02, size=shape)
    pred = 255 * y + _away_from_zero(rng, shape)
    return [pred], lambda p: scaled_mae_loss(p, y)


GRAD_CASES = {
    "conv2d": _case_conv,
    "relu": _case_relu,
    "abs": _case_abs,
    "add": _case_binary(add),
    "sub": _case_binary(sub),
    "mul": _case_binary(mul),
    "concat": _case_concat,
    "loss": _case_loss,
}


def _check_case(arrays, op, rng):
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)

    def scalar(*xs):
        return float(np.sum(op(*[Tensor(x) for x in xs]).data * proj))

    leaves = [Tensor._wrap(np.array(a), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = op(*leaves)
    grads = tape.gradient(out, leaves, grad_target=proj)
    return max(max_rel_error(g, numeric_grad(scalar, arrays, i, FD_STEP)) for i, g in enumerate(grads))


def test_criterion_1_gradient_correctness(criterion):
    with criterion(1, "analytic adjoints match central finite differences"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        names = list(GRAD_CASES)
        worst, cases = {}, 0
        for k in range(30 * len(names)):  # 240 cases, 30 per op
            name = names[k % len(names)]
            arrays, op = GRAD_CASES[name](rng)
            assert all(a.ndim < 4 or all(np.array(a.shape) <= MAX_GRAD_SHAPE) for a in arrays)
            err = _check_case(arrays, op, rng)
            worst[name] = max(worst.get(name, 0.0), err)
            cases += 1
        elapsed = time.perf_counter() - t0
        print("worst relative error per op:", {k: f"{v:.2e}" for k, v in worst.items()})
        assert cases >= 200
        assert max(worst.values()) < GRAD_TOL, worst
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. convolution oracle


def _undilated_direct(x, w, b):
    """Ordinary same-padded convolution written with explicit zero padding."""
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    ph, pw = (KH - 1) // 2, (KW - 1) // 2
    xp = np.zeros((B, Ci, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph:ph + H, pw:pw + W] = x
    out = np.zeros((B, Co, H, W))
    for n in range(B):
        for co in range(Co):
            for y in range(H):
                for xx in range(W):
                    s = float(b[co])
                    for ci in range(Ci):
                        for i in range(KH):
                            for j in range(KW):
                                s += xp[n, ci, y + i, xx + j] * w[co, ci, i, j]
                    out[n, co, y, xx] = s
    return out


def test_criterion_2_conv_oracle(criterion):
    with criterion(2, "fast conv2d equals the direct-sum oracle, dilations 1-16"):
        rng = np.random.default_rng(7)
        worst = 0.0
        for d in range(1, 17):
            for _ in range(2):
                B, Ci, Co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
                H, W = (int(v) for v in rng.integers(max(2, d - 3), 2 * d + 6, size=2))
                k = int(rng.choice([1, 3, 5]))
                x = rng.normal(size=(B, Ci, H, W))
                w = rng.normal(size=(Co, Ci, k, k))
                b = rng.normal(size=Co)
                ref = kernels.conv2d_reference(x, w, b, d)
                for backend in kernels.BACKENDS:
                    if backend == "numba" and not kernels.HAS_NUMBA:
                        continue
                    worst = max(worst, float(np.max(np.abs(kernels.conv2d_forward(x, w, b, d, backend) - ref))))
        assert worst <= 1e-12, worst
        x = rng.normal(size=(2, 2, 7, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        assert np.array_equal(kernels.conv2d_reference(x, w, b, 1), _undilated_direct(x, w, b))
        assert np.max(np.abs(kernels.conv2d_forward(x, w, b, 1) - _undilated_direct(x, w, b))) <= 1e-12


# ---------------------------------------------------------------------------
# 3. receptive field


def _influence_mask(n):
    """Brute force: perturb each input pixel of a zero image and watch the center output."""
    side = 2 ** (n + 1) + 3
    specs = [ConvSpec(1, 1, (3, 3), 2 ** i) for i in range(n)]
    weights = [np.ones((1, 1, 3, 3)) for _ in specs]
    zero_b = np.zeros(1)
    c = side // 2
    mask = np.zeros((side, side), dtype=bool)
    pixels = [(y, x) for y in range(side) for x in range(side)]
    for start in range(0, len(pixels), 512):
        chunk = pixels[start:start + 512]
        batch = np.zeros((len(chunk), 1, side, side))
        for k, (y, x) in enumerate(chunk):
            batch[k, 0, y, x] = 1.0
        h = Tensor._wrap(batch)
        for spec, w in zip(specs, weights):
            h = relu(conv2d(h, Tensor._wrap(w), Tensor._wrap(zero_b), spec))
        changed = h.data[:, 0, c, c] != 0.0
        for k, (y, x) in enumerate(chunk):
            mask[y, x] = changed[k]
    return mask


def test_criterion_3_receptive_field(criterion):
    with criterion(3, "receptive field side 2^(n+1)-1 with linearly growing parameters"):
        params = []
        for n in range(1, 6):
            mask = _influence_mask(n)
            rows, cols = np.nonzero(mask)
            side_y, side_x = rows.max() - rows.min() + 1, cols.max() - cols.min() + 1
            expected = 2 ** (n + 1) - 1
            assert (side_y, side_x) == (expected, expected), (n, side_y, side_x)
            assert mask.sum() == expected ** 2  # the influence region is a full square
            fm = 8
            stack = [ConvSpec(fm, fm, (3, 3), 2 ** i) for i in range(n)]
            params.append(sum(s.num_params for s in stack))
        steps = np.diff(params)
        assert np.all(steps == steps[0]) and steps[0] > 0, params


# ---------------------------------------------------------------------------
# 4. supervision mass


def test_criterion_4_mass_conservation(criterion):
    with criterion(4, "density maps integrate to the annotation count"):
        rng = np.random.default_rng(11)
        H, W = 320, 320
        n = 100

        def interior(margin):
            return np.column_stack([rng.uniform(margin, W - 1 - margin, n), rng.uniform(margin, H - 1 - margin, n)])

        ucsd_p = PerspectiveMap(rng.uniform(0.25, 16.0, size=(H, W)), "ucsd_divisor")
        # WorldExpo: M up to 12 px/m puts the body kernel 10.5 px below the head with sigma_y 6
        meters = PerspectiveMap(rng.uniform(4.0, 12.0, size=(H, W)), "worldexpo_meters")
        cases = [
            ("fixed sigma=15", interior(61), "fixed-sigma", 15.0, None),
            ("ucsd, no perspective", interior(13), "ucsd-perspective", None, None),
            ("ucsd, perspective", interior(24), "ucsd-perspective", None, ucsd_p),
            ("worldexpo", interior(40), "worldexpo-perspective", None, meters),
        ]
        worst = {}
        for label, pts, regime, sigma, persp in cases:
            ann = PointAnnotations(pts, (H, W))
            total = make_density(ann, regime, sigma or 15.0, persp)
            errs = [abs(float(total.sum()) - n)]
            for p in pts:
                single = make_density(PointAnnotations(p[None], (H, W)), regime, sigma or 15.0, persp)
                errs.append(abs(float(single.sum()) - 1.0))
            worst[label] = max(errs)
        print("worst |sum - count| per regime:", {k: f"{v:.1e}" for k, v in worst.items()})
        assert max(worst.values()) < 1e-4, worst
        ann = PointAnnotations(interior(13), (H, W))
        ones = PerspectiveMap(np.ones((H, W)), "ucsd_divisor")
        assert np.array_equal(ucsd_density(ann, perspective=ones), ucsd_density(ann))


# ---------------------------------------------------------------------------
# 5. metrics


def test_criterion_5_metric_properties(criterion):
    with criterion(5, "GAME(0)=MAE, GAME monotone in L, 4x4 hand case"):
        rng = np.random.default_rng(5)
        for _ in range(20):
            k = int(rng.integers(1, 8))
            preds = [rng.uniform(0, 1, size=(16, 16)) for _ in range(k)]
            truths = [rng.uniform(0, 1, size=(16, 16)) for _ in range(k)]
            mae = count_mae([p.sum() for p in preds], [t.sum() for t in truths])
            assert abs(game_batch(preds, truths, 0) - mae) <= 1e-9
        for _ in range(100):
            size = 2 ** int(rng.integers(5, 7))
            pred, truth = rng.uniform(size=(size, size)), rng.uniform(size=(size, size))
            values = [game(pred, truth, L) for L in range(6)]
            for a, b in zip(values, values[1:]):
                # equality holds when every sub-region error shares a sign; allow fsum rounding only
                assert b >= a - 1e-12 * max(1.0, a), values
        pred, truth = np.zeros((4, 4)), np.zeros((4, 4))
        pred[0, 0], truth[3, 3] = 1.0, 1.0
        assert game(pred, truth, 0) == 0.0 and game(pred, truth, 1) == 2.0


# ---------------------------------------------------------------------------
# 6. patches


def test_criterion_6_patch_pipeline(criterion):
    with criterion(6, "tile/stitch round trip, dense scan at stride=patch, flip involution"):
        rng = np.random.default_rng(6)
        for shape, patch in [((1, 480, 640), (80, 80)), ((3, 158, 238), (79, 119)), ((2, 30, 42), (10, 7))]:
            x = rng.normal(size=shape)
            tiles, layout = cut_tiles(x, patch)
            assert np.array_equal(stitch_tiles(tiles, layout), x)
        cfg = default_config(2, True, 1, 4)
        predictor = model_predictor(init_params(cfg, 3), cfg)
        img = rng.normal(size=(1, 48, 64))
        scanned, cover = dense_scan_average(img, predictor, (16, 16), 16)
        tiles, layout = cut_tiles(img, (16, 16))
        assert np.all(cover == 1)
        assert np.array_equal(scanned, stitch_tiles([predictor(t) for t in tiles], layout))
        img, den = rng.normal(size=(2, 20, 30)), rng.uniform(size=(20, 30))
        pairs = sample_patches(img, den, PatchPolicy((9, 13), num_samples=10, flip_augment=True), 0)
        for (ip, dp), (fi, fd) in zip(pairs[::2], pairs[1::2]):
            assert np.array_equal(fi[..., ::-1], ip) and np.array_equal(fd[:, ::-1], dp)
            assert np.array_equal(fi[..., ::-1][..., ::-1], fi)


# ---------------------------------------------------------------------------
# 7. Adam


def test_criterion_7_adam(criterion):
    with criterion(7, "Adam reaches the quadratic optimum within 1e-3 in <= 2000 steps"):
        rng = np.random.default_rng(9)
        for trial in range(5):
            target = rng.normal(scale=2.0, size=int(rng.integers(1, 20)))
            params = {"theta": np.zeros_like(target)}
            state = AdamState(lr=0.05)
            for step in range(1, 2001):
                params, state = adam_step(params, {"theta": 2.0 * (params["theta"] - target)}, state)
                if np.max(np.abs(params["theta"] - target)) < 1e-3:
                    break
            err = float(np.max(np.abs(params["theta"] - target)))
            assert err < 1e-3, (trial, step, err)


# ---------------------------------------------------------------------------
# 8 and 9. end to end

SCENE = SceneSpec(image_size=(64, 64), count_range=(5, 20), r_min=1.5, r_max=4.0, seed=1)


@pytest.fixture(scope="module")
def synthetic_split():
    return generate(SCENE, 200), generate(replace(SCENE, seed=2), 50)


@pytest.mark.slow
def test_criterion_8_end_to_end(criterion, synthetic_split):
    with criterion(8, "3 columns + aggregator halves its loss and beats the mean baseline"):
        t0 = time.perf_counter()
        train_set, test_set = synthetic_split
        config = default_config(3, True, 1, 16)
        plan = TrainPlan(epochs=10, seed=0, preset="synthetic")
        result = train(config, plan, train_set)
        report = evaluate(result.params, config, test_set, "synthetic", result.channel_means)
        baseline = mean_baseline_mae(result.train_mean_count, test_set)
        elapsed = time.perf_counter() - t0
        print(f"loss {result.history[0]:.4f} -> {result.history[-1]:.4f}; "
              f"test MAE {report['mae']:.3f} vs baseline {baseline:.3f}; {elapsed:.0f}s")
        assert result.history[-1] <= 0.5 * result.history[0], result.history
        assert report["mae"] < baseline
        assert elapsed < 15 * 60


@pytest.mark.slow
def test_criterion_9_ablation(criterion, synthetic_split, tmp_path):
    with criterion(9, "10-cell ablation completes, writes table and plot, re-runs identically"):
        train_set, test_set = synthetic_split
        plan = TrainPlan(epochs=10, seed=0, preset="synthetic", num_samples=96)
        grid = AblationGrid(plan=plan, feature_maps=8)
        tables = []
        for run in range(2):
            rows = ablate(grid, train_set, test_set)
            assert len(rows) == 10
            assert {(r["columns"], r["aggregator"]) for r in rows} == {(c, a) for c in range(1, 6) for a in (True, False)}
            path = tmp_path / f"ablation{run}.csv"
            write_ablation_table(rows, path)
            tables.append(path.read_bytes())
            back = read_ablation_table(path)
            assert all(np.isfinite(r["mae"]) for r in back)
        plot_ablation(rows, tmp_path / "ablation.png")
        print(tables[0].decode().strip())
        assert (tmp_path / "ablation.png").stat().st_size > 1000
        assert tables[0] == tables[1]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
