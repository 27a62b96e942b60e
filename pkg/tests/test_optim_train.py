import math
import os
from dataclasses import replace

import numpy as np
import pytest

from amdcn.metrics import scaled_mae_loss
from amdcn.model import default_config, forward, init_params, zero_params
from amdcn.optim import AdamState, adam_step
from amdcn.patchwork import get_preset
from amdcn.supervision import PointAnnotations, make_density
from amdcn.synthdata import Record, SceneSpec, generate
from amdcn.tensor import GradTape, Tensor
from amdcn.train import (
    ABLATION_HEADER,
    AblationGrid,
    NumericalError,
    TrainPlan,
    ablate,
    evaluate,
    mean_baseline_mae,
    plot_ablation,
    read_ablation_table,
    train,
    write_ablation_table,
)

TINY_SCENE = SceneSpec(image_size=(20, 20), count_range=(1, 4), r_min=1.0, r_max=2.0, seed=3)
TINY_PLAN = TrainPlan(epochs=2, batch_size=4, learning_rate=1e-3, seed=7, num_samples=8, patch_size=(12, 12))


def tiny_config(cols=2, agg=True):
    return default_config(cols, agg, input_channels=1, feature_maps=3)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self, rng):
        p = {"w": rng.normal(size=(3, 2))}
        st = AdamState(lr=0.1)
        for _ in range(5):
            new, st = adam_step(p, {"w": np.zeros((3, 2))}, st)
            assert np.array_equal(new["w"], p["w"])
            p = new

    def test_first_step_is_signed_lr(self, rng):
        p = {"w": rng.normal(size=10)}
        g = rng.normal(size=10)
        new, _ = adam_step(p, {"w": g}, AdamState(lr=1e-3))
        np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g), rtol=1e-6)

    def test_quadratic_converges(self):
        target = np.array([1.5, -2.0, 0.25])
        p = {"w": np.zeros(3)}
        st = AdamState(lr=0.05)
        for step in range(2000):
            p, st = adam_step(p, {"w": 2 * (p["w"] - target)}, st)
            if np.max(np.abs(p["w"] - target)) < 1e-3:
                break
        assert np.max(np.abs(p["w"] - target)) < 1e-3 and step < 2000

    def test_tensor_type_preserved(self):
        p = {"w": Tensor(np.ones(2), requires_grad=True)}
        new, st = adam_step(p, {"w": np.ones(2)}, AdamState())
        assert isinstance(new["w"], Tensor) and new["w"].requires_grad and st.t == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState())


class TestTrain:
    def test_zero_lr_keeps_params(self):
        data = generate(TINY_SCENE, 4)
        cfg = tiny_config()
        init = init_params(cfg, 1)
        res = train(cfg, replace(TINY_PLAN, learning_rate=0.0, epochs=3), data, params=init)
        for k in init:
            assert np.array_equal(res.params[k].data, init[k].data)
        # every epoch visits the same patches, so the mean loss cannot move
        assert len(set(res.history)) == 1 or np.ptp(res.history) < 1e-12 * max(res.history)

    def test_same_seed_same_history(self):
        data = generate(TINY_SCENE, 4)
        cfg = tiny_config()
        a = train(cfg, TINY_PLAN, data)
        b = train(cfg, TINY_PLAN, data)
        assert a.history == b.history
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
        params, history = a
        assert history == a.history and len(history) == 2

    def test_gradient_reaches_every_layer(self, rng):
        cfg = tiny_config(3, True)
        params = {k: Tensor._wrap(v.data, requires_grad=True) for k, v in init_params(cfg, 2).items()}
        x = Tensor._wrap(rng.uniform(size=(2, 1, 12, 12)))
        y = rng.uniform(0, 0.01, size=(2, 1, 12, 12))
        with GradTape() as tape:
            loss = scaled_mae_loss(forward(params, cfg, x), y)
        names = [k for k in params if k.endswith(".kernel")]
        grads = tape.gradient(loss, [params[k] for k in names])
        for k, g in zip(names, grads):
            assert np.any(g != 0), k
        assert any(k.startswith("col3") for k in names) and any(k.startswith("agg") for k in names)

    def test_nan_raises(self):
        data = generate(TINY_SCENE, 2)
        cfg = tiny_config()
        bad = init_params(cfg, 0)
        k = next(iter(bad))
        arr = bad[k].data.copy()
        arr.flat[0] = np.nan
        bad[k] = Tensor._wrap(arr)
        with pytest.raises(NumericalError, match="epoch 1, batch 0"):
            train(cfg, TINY_PLAN, data, params=bad)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(tiny_config(), TINY_PLAN, [])

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            TrainPlan(epochs=0)
        with pytest.raises(ValueError):
            TrainPlan(learning_rate=-1)

    def test_float32(self):
        data = generate(TINY_SCENE, 2)
        res = train(tiny_config(), replace(TINY_PLAN, dtype="float32", epochs=1), data)
        assert all(v.dtype == np.float32 for v in res.params.values())
        assert math.isfinite(res.history[0])


def oracle_records(size, points_list, scale, preset):
    recs = []
    for pts in points_list:
        ann = PointAnnotations(np.asarray(pts, dtype=float), size)
        d = make_density(ann, preset.regime, preset.sigma)
        recs.append(Record(d[None] * scale, ann))
    return recs


def oracle_predictor(scale, gamma=255.0):
    return lambda w: w[0] * (gamma / scale)


class TestEvaluate:
    SCALE = 50.0

    def _check_oracle(self, preset, size, pts):
        recs = oracle_records(size, pts, self.SCALE, preset)
        rep = evaluate(None, None, recs, preset, [0.0], predictor=oracle_predictor(self.SCALE))
        for key in ("mae", "game0", "game1", "game2", "game3"):
            assert rep[key] < 1e-9, (key, rep[key])
        assert rep["images"] == len(recs)

    def test_full(self):
        self._check_oracle(get_preset("synthetic"), (32, 32), [[(10, 12), (20, 20.5)], [(16, 16)]])

    def test_tile(self):
        p = replace(get_preset("trancos"), sigma=2.0, test_patch=(16, 16))
        self._check_oracle(p, (32, 48), [[(24.0, 16.0), (10, 10)], [(36, 20)]])

    def test_pad(self):
        p = replace(get_preset("ucf"), sigma=2.0, pad_to=(40, 40))
        self._check_oracle(p, (30, 25), [[(12, 15), (12, 10)]])

    def test_dense_scan(self):
        p = replace(get_preset("worldexpo"), sigma=2.0, test_patch=(15, 15), test_stride=10)
        self._check_oracle(p, (33, 41), [[(16.5, 16.5), (30, 20)], [(9, 9)]])

    def test_zero_model_is_total_count(self):
        data = generate(TINY_SCENE, 5)
        cfg = tiny_config()
        rep = evaluate(zero_params(cfg), cfg, data, "synthetic", [0.0])
        assert rep["mae"] == pytest.approx(np.mean([r.count for r in data]), abs=1e-12)
        assert mean_baseline_mae(0.0, data) == pytest.approx(rep["mae"])

    def test_channel_mismatch(self):
        data = generate(TINY_SCENE, 1)
        cfg = default_config(1, False, input_channels=3, feature_maps=2)
        with pytest.raises(ValueError, match="channels"):
            evaluate(zero_params(cfg), cfg, data, "synthetic", [0.0])


@pytest.fixture(scope="module")
def tiny_ablation():
    train_set = generate(TINY_SCENE, 4)
    test_set = generate(replace(TINY_SCENE, seed=99), 3)
    grid = AblationGrid(plan=replace(TINY_PLAN, epochs=1), feature_maps=2)
    return grid, train_set, test_set, ablate(grid, train_set, test_set)


class TestAblation:
    def test_grid_shape(self, tiny_ablation):
        *_, rows = tiny_ablation
        assert len(rows) == 10
        assert [(r["columns"], r["aggregator"]) for r in rows] == [(c, a) for c in range(1, 6) for a in (False, True)]
        assert all(math.isfinite(r["mae"]) and r["seconds"] > 0 for r in rows)

    def test_deterministic_mae(self, tiny_ablation):
        grid, tr, te, rows = tiny_ablation
        again = ablate(replace(grid, column_counts=(1, 4)), tr, te)
        ref = {(r["columns"], r["aggregator"]): r["mae"] for r in rows}
        for r in again:
            assert r["mae"] == ref[(r["columns"], r["aggregator"])]

    def test_table_and_plot(self, tiny_ablation, tmp_path):
        *_, rows = tiny_ablation
        csv_path, png = tmp_path / "a.csv", tmp_path / "a.png"
        write_ablation_table(rows, csv_path)
        back = read_ablation_table(csv_path)
        assert back == [{k: r[k] for k in ABLATION_HEADER} for r in rows]
        assert csv_path.read_text().splitlines()[0] == ",".join(ABLATION_HEADER)
        plot_ablation(rows, png)
        assert os.path.getsize(png) > 1000

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            AblationGrid(column_counts=(0,))
        with pytest.raises(ValueError):
            AblationGrid(aggregator_options=())
