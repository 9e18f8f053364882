"""Training loop, checkpointing, checkpoint selection and cohort splits.

One optimizer step is one "iteration"; ``max_iter`` counts steps. Inputs are
whole volumes whitened and resized to the network window, labels are
resized with nearest neighbour. Nothing is augmented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from brainstrip import autodiff as ad
from brainstrip.densevnet import (
    INPUT_MODES,
    DenseVnetConfig,
    Network,
    build_dense_vnet,
    forward,
    network_input,
    predict_mask,
)
from brainstrip.metrics import dice_score
from brainstrip.nifti import read_nifti
from brainstrip.volume import Volume3D, resample_to_grid


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 500
    save_every_n: int = 20
    batch_size: int = 6
    lr: float = 0.001
    # whole-volume sampling gives exactly one window per draw
    samples_per_volume: int = 1
    input_mode: str = "both"
    seed: int = 0
    spatial_window_size: int = 48
    num_classes: int = 2
    stack_growth: tuple[int, int, int] = (4, 8, 16)
    units_per_stack: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        object.__setattr__(self, "stack_growth", tuple(int(v) for v in self.stack_growth))
        object.__setattr__(self, "units_per_stack", tuple(int(v) for v in self.units_per_stack))
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 1 <= self.save_every_n <= self.max_iter:
            raise ValueError("save_every_n must lie in [1, max_iter]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.samples_per_volume != 1:
            raise ValueError("only samples_per_volume=1 is supported (whole-volume windows)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {sorted(INPUT_MODES)}")

    def network_config(self) -> DenseVnetConfig:
        return DenseVnetConfig(
            in_channels=len(INPUT_MODES[self.input_mode]),
            num_classes=self.num_classes,
            stack_growth=self.stack_growth,
            units_per_stack=self.units_per_stack,
            input_window=self.spatial_window_size,
            input_mode=self.input_mode,
        )


_INT_KEYS = ("max_iter", "save_every_n", "batch_size", "samples_per_volume", "seed", "spatial_window_size", "num_classes")
_TUPLE_KEYS = ("stack_growth", "units_per_stack")


def parse_config(text: str) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _TUPLE_KEYS:
                values[key] = tuple(int(v) for v in val.split(","))
            elif key == "lr":
                values[key] = float(val)
            elif key == "input_mode":
                values[key] = val
            else:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if "unknown key" in str(exc):
                raise
            raise ValueError(f"config line {lineno}: bad value for {key}: {val!r}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key in TrainConfig.__dataclass_fields__:
        val = getattr(cfg, key)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LabeledCase:
    case_id: str
    label: Volume3D
    t1gd: Optional[Volume3D] = None
    flair: Optional[Volume3D] = None

    def channels(self, mode: str) -> list[Volume3D]:
        missing = [c for c in INPUT_MODES[mode] if getattr(self, c) is None]
        if missing:
            raise DataError(f"case {self.case_id}: missing channel(s) {', '.join(missing)}")
        return [getattr(self, c) for c in INPUT_MODES[mode]]


def load_case(directory, label: str = "label") -> LabeledCase:
    """Case directory with ``t1gd.nii``/``flair.nii`` and ``<label>.nii``.

    Falls back to ``truth.nii`` when the requested label file is absent.
    """
    d = Path(directory)
    label_path = d / f"{label}.nii"
    if not label_path.exists():
        label_path = d / "truth.nii"
    if not label_path.exists():
        raise DataError(f"{d}: no {label}.nii or truth.nii")
    chans = {c: read_nifti(d / f"{c}.nii") if (d / f"{c}.nii").exists() else None for c in ("t1gd", "flair")}
    return LabeledCase(d.name, read_nifti(label_path), **chans)


def load_cases(root, label: str = "label") -> list[LabeledCase]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"{root}: no case directories")
    return [load_case(d, label) for d in dirs]


@dataclass
class Checkpoint:
    iteration: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, ad.AdamState] = field(default_factory=dict)


@dataclass(frozen=True)
class CohortSplit:
    train: list[str]
    validation: list[str]
    test: list[str]


def split_dataset(cohort: Sequence[str], fractions=(0.8, 0.07, 0.13), seed: int = 0) -> CohortSplit:
    ids = list(cohort)
    if not ids:
        raise DataError("cannot split an empty cohort")
    if len(set(ids)) != len(ids):
        raise DataError("cohort contains duplicate case ids")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(ids)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_val = min(n_val, n)
    n_test = min(n_test, n - n_val)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return CohortSplit(shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :])


def prepare_case(case: LabeledCase, net_cfg: DenseVnetConfig) -> tuple[np.ndarray, np.ndarray]:
    """(channels, window label) at the network window."""
    if case.label is None:
        raise DataError(f"case {case.case_id}: missing label")
    x = network_input(net_cfg, case.channels(net_cfg.input_mode))
    window = (net_cfg.input_window,) * 3
    y = resample_to_grid(case.label, window, "nearest").data.astype(np.float64)
    return x, y


def checkpoint_iterations(max_iter: int, save_every_n: int) -> list[int]:
    its = list(range(save_every_n, max_iter + 1, save_every_n))
    if not its or its[-1] != max_iter:
        its.append(max_iter)
    return its


class TrainResult(NamedTuple):
    network: Network
    checkpoints: list[Checkpoint]
    losses: list[float]


def train(
    dataset: Sequence[LabeledCase],
    net: Network,
    cfg: TrainConfig,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run ``cfg.max_iter`` Adam steps on dice loss. ``net`` is not modified."""
    if not dataset:
        raise DataError("training set is empty")
    if net.config.input_mode != cfg.input_mode:
        raise DataError(f"network built for {net.config.input_mode!r}, config says {cfg.input_mode!r}")
    prepared = [prepare_case(c, net.config) for c in dataset]
    xs = np.stack([p[0] for p in prepared])
    ys = np.stack([p[1] for p in prepared])

    net = net.copy()
    names = list(net.params)
    states = {k: ad.AdamState.zeros_like(net.params[k].values, lr=cfg.lr) for k in names}
    rng = np.random.default_rng(cfg.seed)
    saves = set(checkpoint_iterations(cfg.max_iter, cfg.save_every_n))
    n = len(dataset)
    checkpoints, losses = [], []
    for step in range(1, cfg.max_iter + 1):
        if n >= cfg.batch_size:
            idx = rng.choice(n, size=cfg.batch_size, replace=False)
        else:
            idx = rng.integers(0, n, size=cfg.batch_size)
        net.zero_grad()
        loss = ad.dice_loss(forward(net, ad.Tensor(xs[idx])), ys[idx])
        value = float(loss.values)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value}", step)
        ad.backward(loss)
        for k in names:
            p = net.params[k]
            p.values, states[k] = ad.adam_step(p.values, p.grad, states[k])
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if step in saves:
            ckpt = Checkpoint(step, net.arrays(), dict(states))
            checkpoints.append(ckpt)
            if on_checkpoint is not None:
                on_checkpoint(ckpt)
    return TrainResult(net, checkpoints, losses)


def network_from(checkpoint: Checkpoint, net_cfg: DenseVnetConfig) -> Network:
    net = build_dense_vnet(net_cfg, 0)
    net.load(checkpoint.params)
    return net


def validation_loss(net: Network, validation: Sequence[LabeledCase]) -> float:
    """Mean per-case dice loss at the network window."""
    frozen = net.frozen()
    losses = []
    for case in validation:
        x, y = prepare_case(case, net.config)
        losses.append(float(ad.dice_loss(forward(frozen, x[None]), y[None]).values))
    return float(np.mean(losses))


def select_checkpoint(
    checkpoints: Sequence[Checkpoint],
    validation: Sequence[LabeledCase],
    net_cfg: Optional[DenseVnetConfig] = None,
    loss_fn: Optional[Callable[[Checkpoint], float]] = None,
) -> Checkpoint:
    """Checkpoint with the lowest validation loss; ties go to the earliest.

    ``loss_fn`` overrides the default (mean validation dice loss of the
    checkpoint's network built from ``net_cfg``).
    """
    if not checkpoints:
        raise DataError("no checkpoints to select from")
    if loss_fn is None:
        if not validation:
            raise DataError("validation set is empty")
        if net_cfg is None:
            raise DataError("net_cfg is needed to score checkpoints")
        loss_fn = lambda c: validation_loss(network_from(c, net_cfg), validation)  # noqa: E731
    best, best_loss = None, math.inf
    for ckpt in sorted(checkpoints, key=lambda c: c.iteration):
        loss = loss_fn(ckpt)
        if best is None or loss < best_loss:
            best, best_loss = ckpt, loss
    return best


def predict_case(net: Network, case: LabeledCase) -> Volume3D:
    return predict_mask(net, case.t1gd, case.flair)


def evaluate_dice(net: Network, cases: Sequence[LabeledCase]) -> list[float]:
    """Native-resolution dice of each case's predicted mask against its label."""
    scores = []
    for case in cases:
        d = dice_score(predict_case(net, case), case.label)
        scores.append(1.0 if d is None else d)
    return scores


@dataclass(frozen=True)
class EfficiencyRow:
    train_size: int
    mean_dice: float
    std_dice: float


def nested_subsets(n: int, sizes: Sequence[int], seed: int) -> dict[int, list[int]]:
    """Index subsets; a smaller size is always a prefix of one permutation."""
    order = np.random.default_rng(seed).permutation(n)
    return {k: sorted(int(i) for i in order[:k]) for k in sizes}


def run_data_efficiency(
    dataset: Sequence[LabeledCase],
    sizes: Sequence[int],
    cfg: TrainConfig,
    eval_set: Sequence[LabeledCase],
    validation: Sequence[LabeledCase],
    on_row: Optional[Callable[[EfficiencyRow], None]] = None,
) -> list[EfficiencyRow]:
    if not sizes:
        raise DataError("no training sizes given")
    if any(k < 1 for k in sizes):
        raise DataError("training sizes must be positive")
    if max(sizes) > len(dataset):
        raise DataError(f"size {max(sizes)} exceeds the {len(dataset)} available cases")
    train_ids = {c.case_id for c in dataset}
    held = {c.case_id for c in eval_set} | {c.case_id for c in validation}
    if train_ids & held:
        raise DataError(f"evaluation/validation cases overlap training data: {sorted(train_ids & held)}")
    net_cfg = cfg.network_config()
    subsets = nested_subsets(len(dataset), sizes, cfg.seed)
    rows = []
    for k in sizes:
        subset = [dataset[i] for i in subsets[k]]
        result = train(subset, build_dense_vnet(net_cfg, cfg.seed), cfg)
        best = select_checkpoint(result.checkpoints, validation, net_cfg)
        scores = evaluate_dice(network_from(best, net_cfg), eval_set)
        std = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
        row = EfficiencyRow(k, float(np.mean(scores)), std)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def loss_csv(losses: Sequence[float]) -> str:
    return "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses, 1))


def efficiency_csv(rows: Sequence[EfficiencyRow]) -> str:
    return "train_size,mean_dice,std_dice\n" + "".join(
        f"{r.train_size},{r.mean_dice:.6f},{r.std_dice:.6f}\n" for r in rows
    )


def save_checkpoint(path, ckpt: Checkpoint, net_cfg: DenseVnetConfig) -> None:
    arrays = dict(ckpt.params)
    meta = {"kind": "densevnet", **net_cfg.to_record(), "iteration": str(ckpt.iteration)}
    for name, st in ckpt.optimizer.items():
        arrays[f"adam.m/{name}"] = st.m
        arrays[f"adam.v/{name}"] = st.v
        meta["adam_step"] = str(st.step)
        meta["adam_lr"] = repr(st.lr)
    ad.save_arrays(path, arrays, meta)


def load_checkpoint(path) -> tuple[Checkpoint, DenseVnetConfig]:
    arrays, meta = ad.load_arrays(path)
    if meta.get("kind") != "densevnet":
        raise DataError(f"{path}: not a network checkpoint")
    net_cfg = DenseVnetConfig.from_record(meta)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    optimizer = {}
    for k in params:
        if f"adam.m/{k}" in arrays:
            optimizer[k] = ad.AdamState(
                arrays[f"adam.m/{k}"], arrays[f"adam.v/{k}"], int(meta["adam_step"]), float(meta["adam_lr"])
            )
    return Checkpoint(int(meta.get("iteration", 0)), params, optimizer), net_cfg
