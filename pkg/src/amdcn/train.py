"""Training loop, evaluation protocols and the column/aggregator ablation."""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from amdcn import patchwork
from amdcn.metrics import count_mae, metric_report, scaled_mae_loss
from amdcn.model import GAMMA, default_config, forward, init_params
from amdcn.optim import AdamState, adam_step
from amdcn.supervision import make_density
from amdcn.tensor import GradTape, Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    preset: str = "synthetic"
    gamma: float = GAMMA
    num_samples: int = None  # overrides the preset's patch count
    patch_size: tuple = None  # overrides the preset's patch size
    sigma: float = None  # overrides the preset's fixed sigma
    regime: str = None  # overrides the preset's supervision regime
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")

    def resolved_preset(self):
        p = patchwork.get_preset(self.preset)
        policy = p.train_policy
        if self.num_samples is not None:
            policy = replace(policy, num_samples=int(self.num_samples))
        if self.patch_size is not None:
            policy = replace(policy, patch_size=tuple(self.patch_size))
        changes = {"train_policy": policy}
        if self.sigma is not None:
            changes["sigma"] = float(self.sigma)
        if self.regime is not None:
            changes["regime"] = self.regime
        return replace(p, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    history: list
    channel_means: np.ndarray
    train_mean_count: float
    seconds: float

    def __iter__(self):
        # allows ``params, history = train(...)``
        return iter((self.params, self.history))


def dataset_densities(records, preset):
    return [make_density(r.annotations, preset.regime, preset.sigma, r.perspective) for r in records]


def _stack(patches, means, dtype):
    imgs = np.stack([patchwork.normalize(p[0], means) for p in patches]).astype(dtype, copy=False)
    dens = np.stack([p[1][None] for p in patches]).astype(dtype, copy=False)
    return imgs, dens


def train_step(params, config, images, densities, state, gamma):
    """Forward, loss, backward and one Adam update on a single batch."""
    leaves = {k: Tensor._wrap(v.data, requires_grad=True) for k, v in params.items()}
    with GradTape() as tape:
        pred = forward(leaves, config, Tensor._wrap(images))
        loss = scaled_mae_loss(pred, densities, gamma)
    value = loss.item()
    if not math.isfinite(value):
        return params, value
    names = list(leaves)
    grads = dict(zip(names, tape.gradient(loss, [leaves[n] for n in names])))
    new_params, _ = adam_step(leaves, grads, state)
    return {k: Tensor._wrap(v.data) for k, v in new_params.items()}, value


def train(config, plan, dataset, params=None, callback=None):
    """Train on ``dataset`` (a list of :class:`amdcn.synthdata.Record`).

    Patches are sampled once up front; each epoch is one shuffled pass over them.
    Returns a :class:`TrainResult`.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    dtype = np.dtype(plan.dtype)
    preset = plan.resolved_preset()
    ss_init, ss_sample, ss_order = np.random.SeedSequence(plan.seed).spawn(3)
    order_rng = np.random.default_rng(ss_order)

    images = [r.image for r in dataset]
    means = patchwork.channel_means(images)
    densities = dataset_densities(dataset, preset)
    patches = patchwork.sample_training_set(images, densities, preset.train_policy, ss_sample)

    if params is None:
        params = init_params(config, seed=int(ss_init.generate_state(1)[0]), dtype=dtype)
    else:
        params = {k: Tensor._wrap(np.asarray(v.data, dtype=dtype)) for k, v in params.items()}
    state = AdamState(lr=plan.learning_rate)
    history = []
    n = len(patches)
    batch_index = 0
    for epoch in range(plan.epochs):
        perm = order_rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, plan.batch_size):
            idx = perm[start:start + plan.batch_size]
            x, y = _stack([patches[i] for i in idx], means, dtype)
            params, loss = train_step(params, config, x, y, state, plan.gamma)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch + 1}, batch {batch_index}")
            losses.append(loss * len(idx))
            weights.append(len(idx))
            batch_index += 1
        history.append(math.fsum(losses) / sum(weights))
        log.info("epoch %d/%d loss %.6g", epoch + 1, plan.epochs, history[-1])
        if callback is not None:
            callback(epoch, history[-1], params)

    mean_count = float(np.mean([r.count for r in dataset]))
    return TrainResult(params, history, means, mean_count, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# inference


def model_predictor(params, config, dtype=np.float64):
    """Callable mapping a normalized ``[C,h,w]`` window to its network-space ``[h,w]`` output."""

    def predict(window):
        x = np.ascontiguousarray(window[None], dtype=dtype)
        return forward(params, config, Tensor._wrap(x)).data[0, 0]

    return predict


def infer_density(image, preset, predictor, means, gamma=GAMMA):
    """Run the preset's test protocol on one raw image; returns a true-units density map."""
    x = patchwork.normalize(image, means)
    mode = preset.test_mode
    if mode == "full":
        out = predictor(x)
    elif mode == "pad":
        padded, mask = patchwork.pad_and_mask(x, patchwork.PadSpec(preset.pad_to))
        full = patchwork.apply_suppression(predictor(padded), mask)
        out = full[: x.shape[1], : x.shape[2]]
    elif mode == "tile":
        tiles, layout = patchwork.cut_tiles(x, preset.test_patch)
        out = patchwork.stitch_tiles([predictor(t) for t in tiles], layout)
    elif mode == "dense_scan":
        out, _ = patchwork.dense_scan_average(x, predictor, preset.test_patch, preset.test_stride)
    else:  # pragma: no cover - Preset validates modes
        raise ValueError(mode)
    return np.asarray(out, dtype=np.float64) / gamma


def evaluate(params, config, dataset, preset, channel_means, gamma=GAMMA, predictor=None):
    """MAE and GAME(0..3) of a model under a preset's inference protocol.

    ``predictor`` replaces the network (it receives normalized windows and must
    return network-space maps).  True counts are annotation counts; GAME compares
    against the preset's ground-truth density maps.
    """
    if isinstance(preset, str):
        preset = patchwork.get_preset(preset)
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    C = dataset[0].image.shape[0]
    if config is not None and C != config.input_channels:
        raise ValueError(f"preset/dataset mismatch: images have {C} channels, model expects {config.input_channels}")
    t0 = time.perf_counter()
    predictor = predictor or model_predictor(params, config)
    truths = dataset_densities(dataset, preset)
    pred_maps, pred_counts = [], []
    for rec in dataset:
        dmap = infer_density(rec.image, preset, predictor, channel_means, gamma)
        pred_maps.append(dmap)
        pred_counts.append(max(0.0, float(dmap.sum())))
    true_counts = [rec.count for rec in dataset]
    return metric_report(pred_counts, true_counts, pred_maps, truths, time.perf_counter() - t0)


def mean_baseline_mae(train_mean_count, dataset):
    return count_mae([train_mean_count] * len(dataset), [r.count for r in dataset])


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationGrid:
    column_counts: tuple = (1, 2, 3, 4, 5)
    aggregator_options: tuple = (True, False)
    plan: TrainPlan = TrainPlan()
    feature_maps: int = 32

    def __post_init__(self):
        if not self.column_counts or not self.aggregator_options:
            raise ValueError("ablation grid must be nonempty")
        if any(not 1 <= c <= 5 for c in self.column_counts):
            raise ValueError("column counts must be in 1..5")


# wall-clock time is kept out of the table so a re-run reproduces it byte for byte
ABLATION_HEADER = ("columns", "aggregator", "mae")


def ablate(grid, train_set, test_set, progress=None):
    """Train and evaluate every (columns, aggregator) cell under the same plan.

    Rows come back sorted by (columns, aggregator) as dicts keyed by
    :data:`ABLATION_HEADER` plus ``seconds``.
    """
    rows = []
    preset = grid.plan.resolved_preset()
    C = train_set[0].image.shape[0]
    for cols in sorted(set(grid.column_counts)):
        for agg in sorted(set(grid.aggregator_options)):
            t0 = time.perf_counter()
            config = default_config(cols, agg, input_channels=C, feature_maps=grid.feature_maps)
            result = train(config, grid.plan, train_set)
            report = evaluate(result.params, config, test_set, preset, result.channel_means, grid.plan.gamma)
            row = {"columns": cols, "aggregator": agg, "mae": report["mae"], "seconds": time.perf_counter() - t0}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def write_ablation_table(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["columns"], "on" if r["aggregator"] else "off", repr(float(r["mae"]))])


def read_ablation_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ABLATION_HEADER:
            raise ValueError(f"{path}: header {reader.fieldnames} != {list(ABLATION_HEADER)}")
        return [
            {"columns": int(r["columns"]), "aggregator": r["aggregator"] == "on", "mae": float(r["mae"])}
            for r in reader
        ]


def plot_ablation(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for agg, marker in ((True, "o"), (False, "s")):
        pts = sorted((r["columns"], r["mae"]) for r in rows if r["aggregator"] == agg)
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker=marker, label="aggregator" if agg else "no aggregator")
    ax.set_xlabel("number of columns")
    ax.set_ylabel("test MAE")
    ax.set_xticks(sorted({r["columns"] for r in rows}))
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
