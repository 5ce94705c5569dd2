"""Synthetic spiral experiments and decision-region analysis.

One-arm spiral regression (time point -> plane point) and three-arm spiral
classification, fit by a two-layer net with a swappable activation; the
quadratic-activation boundary construction A*h1^2 + B*h2^2 = C; and a grid
labeler that counts 4-connected decision regions per class by flood fill.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .models import Model, build_two_layer
from .tensor import Tape, Tensor, backward, mse, softmax_ce
from .train import (EpochRecord, ExperimentResult, TrainConfig, adam_step,
                    lr_at)

TURNS = 3
TMAX = TURNS * 2.0 * math.pi

_SPLIT_INDEX = {"train": 0, "test": 1}


def spiral_point(t):
    """Point on the unit-max-radius spiral at time t in [0, TMAX]."""
    t = np.asarray(t, dtype=np.float64)
    r = t / TMAX
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)


@dataclass
class SpiralDataset:
    """Inputs/targets for one split; a pure function of (n, noise_sd, seed, split)."""

    inputs: np.ndarray
    targets: np.ndarray
    split: str
    seed: int

    @property
    def task(self) -> str:
        return "reg" if self.targets.ndim == 2 else "cls"

    def __len__(self) -> int:
        return self.inputs.shape[0]


def gen_one_arm(n: int, noise_sd: float = 0.02, seed: int = 0,
                split: str = "train") -> SpiralDataset:
    """Regression data: normalized time in [0,1] -> noisy spiral point.

    Train and test draw from disjoint substreams of the same root seed.
    """
    if n < 2:
        raise ValueError("need at least 2 points")
    rng = np.random.default_rng([seed, _SPLIT_INDEX[split]])
    t = rng.uniform(0.0, TMAX, size=n)
    targets = spiral_point(t) + rng.normal(0.0, noise_sd, size=(n, 2))
    return SpiralDataset((t / TMAX)[:, None], targets, split, seed)


def gen_three_arm(n_per_arm: int, noise_sd: float = 0.02, seed: int = 0,
                  split: str = "train") -> SpiralDataset:
    """Classification data: three arms, each the one-arm spiral rotated by
    2*pi*j/3 and labeled j; arms share the same time draws so classes are
    balanced and exact rotations of each other before noise."""
    if n_per_arm < 2:
        raise ValueError("need at least 2 points per arm")
    rng = np.random.default_rng([seed, _SPLIT_INDEX[split], 3])
    t = rng.uniform(0.0, TMAX, size=n_per_arm)
    base = spiral_point(t)
    points, labels = [], []
    for arm in range(3):
        ang = 2.0 * math.pi * arm / 3.0
        rot = np.array([[math.cos(ang), -math.sin(ang)],
                        [math.sin(ang), math.cos(ang)]])
        pts = base @ rot.T + rng.normal(0.0, noise_sd, size=(n_per_arm, 2))
        points.append(pts)
        labels.append(np.full(n_per_arm, arm, dtype=np.int64))
    return SpiralDataset(np.concatenate(points), np.concatenate(labels),
                         split, seed)


def dataset_to_csv(ds: SpiralDataset, path) -> None:
    lines = []
    if ds.task == "reg":
        lines.append("t,x,y")
        for t, (x, y) in zip(ds.inputs[:, 0], ds.targets):
            lines.append(f"{t:.6g},{x:.6g},{y:.6g}")
    else:
        lines.append("x,y,label")
        for (x, y), lab in zip(ds.inputs, ds.targets):
            lines.append(f"{x:.6g},{y:.6g},{int(lab)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# two-layer fits

def spiral_fit_config(task: str, seed: int) -> TrainConfig:
    """Full-batch recipe for the two-layer fits: cosine-decayed Adam at 1e-2.

    6000 epochs for regression, 4000 for classification. Plain momentum SGD
    cannot train either activation on these badly conditioned losses; Adam
    with identical settings for both activations reproduces the intended
    comparison.
    """
    return TrainConfig(lr0=0.01, momentum=0.9, nesterov=True, weight_decay=0.0,
                       batch_size=1 << 30,
                       epochs=6000 if task == "reg" else 4000,
                       warmup_epochs=0, seed=seed, dropout_rate=0.0,
                       augmentation="none")


def fit_two_layer(train: SpiralDataset, test: SpiralDataset | None = None,
                  hidden: int = 32, activation: str = "relu",
                  config: TrainConfig | None = None, eval_every: int = 10):
    """Fit the two-layer net full-batch with Adam; returns (model, result).

    Regression uses mean squared error, classification softmax cross-entropy.
    Test metrics are recorded every `eval_every` epochs plus the final one.
    A NaN loss marks the run diverged instead of raising.
    """
    task = train.task
    if config is None:
        config = spiral_fit_config(task, seed=train.seed)
    out_dim = 2 if task == "reg" else int(train.targets.max()) + 1
    spec = build_two_layer(train.inputs.shape[1], hidden, out_dim, activation)
    spec.head = "mse" if task == "reg" else "softmax_ce"
    model = Model(spec, seed=config.seed)

    total = config.epochs
    result = ExperimentResult()
    if total == 0:
        train_loss, train_acc = _eval_loss(model, train, task)
        test_loss, test_acc = (_eval_loss(model, test, task)
                               if test is not None else (math.nan, math.nan))
        result.final_train_loss, result.final_train_acc = train_loss, train_acc
        result.final_test_loss, result.final_test_acc = test_loss, test_acc
        result.best_test_loss, result.best_test_acc = test_loss, test_acc
        return model, result

    mom = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    var = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    x_train = Tensor(train.inputs)
    for epoch in range(total):
        lr = lr_at(epoch, total, 0, config.lr0)
        with Tape() as tape:
            pred = model.forward(x_train, mode="training")
            loss = (mse(pred, train.targets) if task == "reg"
                    else softmax_ce(pred, train.targets))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            result.diverged = True
            break
        backward(tape, loss)
        grads = {k: p.grad for k, p in model.params.items()}
        adam_step({k: p.data for k, p in model.params.items()}, grads,
                  mom, var, lr, epoch + 1)
        model.zero_grads()
        if epoch % eval_every == 0 or epoch == total - 1:
            train_acc = math.nan
            if task == "cls":
                train_acc = float((np.argmax(pred.data, axis=1) == train.targets).mean())
            test_loss, test_acc = (_eval_loss(model, test, task)
                                   if test is not None else (math.nan, math.nan))
            result.records.append(EpochRecord(epoch, lr, loss_val, train_acc,
                                              test_loss, test_acc))

    if result.records:
        last = result.records[-1]
        result.final_train_loss = last.train_loss
        result.final_train_acc = last.train_acc
        result.final_test_loss = last.test_loss
        result.final_test_acc = last.test_acc
        valid = [r for r in result.records if not math.isnan(r.test_loss)]
        if valid:
            result.best_test_loss = min(r.test_loss for r in valid)
            if task == "cls":
                result.best_test_acc = max(r.test_acc for r in valid)
    return model, result


def _eval_loss(model: Model, ds: SpiralDataset, task: str):
    pred = model.forward(Tensor(ds.inputs), mode="inference")
    if task == "reg":
        return mse(pred, ds.targets).item(), math.nan
    loss = softmax_ce(pred, ds.targets).item()
    acc = float((np.argmax(pred.data, axis=1) == ds.targets).mean())
    return loss, acc


# ---------------------------------------------------------------------------
# quadratic decision boundaries

@dataclass
class BoundaryProblem:
    """Second-layer weights/bias of the width-2 analysis net y = W^T sigma(h) + b."""

    w11: float
    w12: float
    w21: float
    w22: float
    b1: float
    b2: float
    activation: str = "square"


@dataclass
class BoundaryCoefficients:
    a: float  # w11 - w12
    b: float  # w21 - w22
    c: float  # b2 - b1
    kind: str


def boundary_coefficients(problem: BoundaryProblem) -> BoundaryCoefficients:
    """Coefficients of the boundary A*h1^2 + B*h2^2 = C and its conic type.

    Hyperbola iff A*B < 0 and C != 0; that shape splits one class into two
    disconnected regions.
    """
    if problem.activation != "square":
        raise ValueError("boundary analysis applies to the square activation")
    a = problem.w11 - problem.w12
    b = problem.w21 - problem.w22
    c = problem.b2 - problem.b1
    if a * b < 0 and c != 0:
        kind = "hyperbola"
    elif c == 0:
        kind = "degenerate"
    elif a * b > 0:
        kind = "ellipse" if c * a > 0 else "empty"
    elif a == 0 and b == 0:
        kind = "empty"
    else:
        coeff = a if a != 0 else b
        kind = "parallel-lines" if c / coeff > 0 else "empty"
    return BoundaryCoefficients(a, b, c, kind)


def problem_to_model(problem: BoundaryProblem) -> Model:
    """Width-2 net with identity first layer realizing a BoundaryProblem."""
    model = Model(build_two_layer(2, 2, 2, problem.activation), seed=0)
    model.params["L0.w"].data[...] = np.eye(2)
    model.params["L0.b"].data[...] = 0.0
    model.params["L2.w"].data[...] = [[problem.w11, problem.w12],
                                      [problem.w21, problem.w22]]
    model.params["L2.b"].data[...] = [problem.b1, problem.b2]
    return model


def model_predictor(model: Model):
    return lambda pts: model.forward(Tensor(pts), mode="inference").data


# ---------------------------------------------------------------------------
# decision-region counting

@dataclass
class RegionReport:
    """Class labels over a grid plus per-class 4-connected component counts."""

    grid: np.ndarray  # (ny, nx) int labels, row y / col x
    components_per_class: dict
    bounds: tuple
    resolution: tuple
    boundary_type: str | None = None

    def cell_centers(self):
        xmin, xmax, ymin, ymax = self.bounds
        nx, ny = self.resolution
        xs = xmin + (xmax - xmin) * (np.arange(nx) + 0.5) / nx
        ys = ymin + (ymax - ymin) * (np.arange(ny) + 0.5) / ny
        return xs, ys

    def to_csv(self, path) -> None:
        xs, ys = self.cell_centers()
        lines = ["x,y,class"]
        for yi, y in enumerate(ys):
            for xi, x in enumerate(xs):
                lines.append(f"{x:.6g},{y:.6g},{int(self.grid[yi, xi])}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {
            "components_per_class": {str(k): int(v)
                                     for k, v in sorted(self.components_per_class.items())},
            "boundary_type": self.boundary_type,
            "bounds": list(self.bounds),
            "resolution": list(self.resolution),
        }


def count_decision_regions(predict, bounds=(-3.0, 3.0, -3.0, 3.0),
                           resolution=(400, 400)) -> RegionReport:
    """Label every grid cell center by argmax class (ties to the lower index)
    and count 4-connected components per class by flood fill."""
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    nx, ny = resolution
    if nx < 2 or ny < 2:
        raise ValueError("resolution must be at least 2 per axis")
    xmin, xmax, ymin, ymax = bounds
    xs = xmin + (xmax - xmin) * (np.arange(nx) + 0.5) / nx
    ys = ymin + (ymax - ymin) * (np.arange(ny) + 0.5) / ny
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    logits = np.asarray(predict(pts))
    labels = np.argmax(logits, axis=1).reshape(ny, nx)
    return RegionReport(labels, _count_components(labels), tuple(bounds),
                        (nx, ny))


def _count_components(grid: np.ndarray) -> dict:
    ny, nx = grid.shape
    cells = grid.tolist()
    seen = [[False] * nx for _ in range(ny)]
    counts: dict = {}
    for sy in range(ny):
        row = cells[sy]
        for sx in range(nx):
            if seen[sy][sx]:
                continue
            label = row[sx]
            counts[label] = counts.get(label, 0) + 1
            queue = deque([(sy, sx)])
            seen[sy][sx] = True
            while queue:
                y, x = queue.popleft()
                if y > 0 and not seen[y - 1][x] and cells[y - 1][x] == label:
                    seen[y - 1][x] = True
                    queue.append((y - 1, x))
                if y + 1 < ny and not seen[y + 1][x] and cells[y + 1][x] == label:
                    seen[y + 1][x] = True
                    queue.append((y + 1, x))
                if x > 0 and not seen[y][x - 1] and cells[y][x - 1] == label:
                    seen[y][x - 1] = True
                    queue.append((y, x - 1))
                if x + 1 < nx and not seen[y][x + 1] and cells[y][x + 1] == label:
                    seen[y][x + 1] = True
                    queue.append((y, x + 1))
    return counts
