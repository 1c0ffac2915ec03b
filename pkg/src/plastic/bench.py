"""Synthetic plasticity benchmarks: input adaptation and label adaptation.

Input adaptation trains on a buffer that grows by one data chunk per phase.
Label adaptation keeps the whole training set but re-assigns class labels with a
fresh class-level permutation at every phase. Both accept any learner that
implements :class:`LearnerProtocol`; :class:`Learner` is the reference one.
"""
from __future__ import annotations

import itertools
import math
import struct
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from plastic import rng as rngs
from plastic import tensor as T
from plastic.nn import ArchSpec, ConvSpec, build_network
from plastic.optim import Optimizer, OptimizerConfig, SamConfig, sam_step, scope_mask
from plastic.plasticity import ProbeConfig, ResetPolicy, active_fraction, apply_reset, network_lambda_max
from plastic.tensor import ContractError, NumericError

INPUT_ADAPTATION = "input-adaptation"
LABEL_ADAPTATION = "label-adaptation"
PROVENANCES = ("generated-gaussian", "generated-image", "cifar10-binary")

METRIC_COLUMNS = ("phase", "step", "buffer_size", "train_loss", "grad_norm", "test_accuracy",
                  "lambda_max", "active_fraction")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = "generated-gaussian"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.inputs.shape[0] != self.labels.shape[0] or self.labels.ndim != 1:
            raise DataError(f"{self.inputs.shape[0]} inputs but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        counts = np.bincount(self.labels, minlength=self.class_count)
        if np.any(counts == 0):
            raise DataError(f"classes without examples: {np.flatnonzero(counts == 0).tolist()}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_shape(self) -> tuple:
        return self.inputs.shape[1:]


def _class_balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels


def generated_gaussian(seed: int = 0, n_train: int = 2000, n_test: int = 500, num_classes: int = 10,
                       dim: int = 16, sigma: float = 1.0, separation: float = 4.0
                       ) -> tuple[LabeledDataset, LabeledDataset]:
    """Isotropic Gaussian classes in R^dim with seeded, well-spread means."""
    g = rngs.stream(seed, "data/gaussian")
    means = g.standard_normal((num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n):
        y = _class_balanced_labels(n, num_classes, g)
        return LabeledDataset(means[y] + sigma * g.standard_normal((n, dim)), y, num_classes)

    return draw(n_train), draw(n_test)


def _blur(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge padding over the last two axes."""
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = img.shape[-2:]
    return sum(p[..., i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def generated_images(seed: int = 0, n_train: int = 5000, n_test: int = 1000, num_classes: int = 10,
                     shape: tuple = (1, 8, 8), modes_per_class: int = 2, sigma: float = 1.0
                     ) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian-mixture images: each class mixes ``modes_per_class`` smooth prototype images.

    Prototypes are blurred standard-normal images rescaled to unit RMS; samples add
    white noise of scale ``sigma``.
    """
    g = rngs.stream(seed, "data/images")
    protos = _blur(g.standard_normal((num_classes, modes_per_class) + tuple(shape)))
    rms = np.sqrt(np.mean(protos ** 2, axis=tuple(range(2, protos.ndim)), keepdims=True))
    protos = protos / rms

    def draw(n):
        y = _class_balanced_labels(n, num_classes, g)
        m = g.integers(0, modes_per_class, n)
        x = protos[y, m] + sigma * g.standard_normal((n,) + tuple(shape))
        return LabeledDataset(x, y, num_classes, "generated-image")

    return draw(n_train), draw(n_test)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_binary(paths: str | Path | Sequence[str | Path]) -> LabeledDataset:
    """Read CIFAR-10 binary batches: 3073-byte records, label byte then 3x32x32 pixels."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    raw = b"".join(Path(p).read_bytes() for p in paths)
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"CIFAR-10 binary size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataError("CIFAR-10 label byte out of range")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(x, labels, 10, "cifar10-binary")


def write_cifar10_binary(path: str | Path, ds: LabeledDataset) -> None:
    """Inverse of :func:`load_cifar10_binary` for [0, 1] images (rounded to bytes)."""
    px = np.clip(np.rint(ds.inputs.reshape(len(ds), -1) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        for y, row in zip(ds.labels, px):
            f.write(struct.pack("B", int(y)) + row.tobytes())


# ---------------------------------------------------------------------------
# protocol pieces
# ---------------------------------------------------------------------------

@dataclass
class AdaptationSchedule:
    kind: str = INPUT_ADAPTATION
    num_phases: int = 100
    updates_per_phase: int = 500
    batch_size: int = 128

    def __post_init__(self):
        if self.kind not in (INPUT_ADAPTATION, LABEL_ADAPTATION):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if min(self.num_phases, self.updates_per_phase, self.batch_size) < 1:
            raise ContractError("num_phases, updates_per_phase and batch_size must be positive")

    @property
    def total_updates(self) -> int:
        return self.num_phases * self.updates_per_phase


def chunk_stream(num_items: int | LabeledDataset, num_chunks: int, rng: np.random.Generator | int
                 ) -> list[np.ndarray]:
    """Seeded random partition of ``range(N)`` into ``num_chunks`` index arrays.

    Chunks hold ``N // num_chunks`` items; the last one also takes the remainder.
    """
    n = len(num_items) if isinstance(num_items, LabeledDataset) else int(num_items)
    if num_chunks < 1 or num_chunks > n:
        raise ContractError(f"cannot split {n} items into {num_chunks} chunks")
    if not isinstance(rng, np.random.Generator):
        rng = rngs.stream(int(rng), "chunks")
    order = rng.permutation(n)
    size = n // num_chunks
    cuts = [i * size for i in range(num_chunks)] + [n]
    return [order[cuts[i]:cuts[i + 1]] for i in range(num_chunks)]


def label_permutation(class_count: int, rng: np.random.Generator | int) -> np.ndarray:
    """Uniformly random bijection on ``0..C-1`` (the identity is allowed)."""
    if class_count < 2:
        raise ContractError(f"label permutation needs at least 2 classes, got {class_count}")
    if not isinstance(rng, np.random.Generator):
        rng = rngs.stream(int(rng), "labels")
    return rng.permutation(class_count)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


# ---------------------------------------------------------------------------
# learner
# ---------------------------------------------------------------------------

class LearnerProtocol(Protocol):
    def step(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]: ...
    def predict(self, x: np.ndarray) -> np.ndarray: ...
    def on_phase_start(self, phase: int) -> Any: ...
    def diagnostics(self, x: np.ndarray, y: np.ndarray) -> dict[str, float]: ...


def desk_arch(activation: str = "relu", layernorm: bool = False, num_classes: int = 10,
              input_shape: tuple = (1, 8, 8)) -> ArchSpec:
    """Small CNN for 8x8 inputs: two 3x3 convs (8, 16 channels) and FC 64-32-C."""
    return ArchSpec(tuple(input_shape), [ConvSpec(8, 3, 2, 1), ConvSpec(16, 3, 1, 1)], [64, 32, num_classes],
                    activation=activation, layernorm=layernorm)


@dataclass
class LearnerConfig:
    arch: ArchSpec = field(default_factory=desk_arch)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.01, momentum=0.9))
    sam: SamConfig = field(default_factory=lambda: SamConfig(enabled=False))
    reset: ResetPolicy | None = None  # interval counted in phases
    probe: ProbeConfig = field(default_factory=lambda: ProbeConfig(probe_batch_size=256, power_iters=20))
    probe_every: int = 0  # phases between curvature/activity probes; 0 disables
    eval_batch: int = 1000


class Learner:
    """CNN/MLP classifier trained with (optionally SAM-wrapped) SGD and phase-level resets."""

    def __init__(self, config: LearnerConfig, seed: int):
        self.config = config
        self.seed = seed
        self.net = build_network(config.arch, rngs.int_seed(seed, "init"))
        self.params = self.net.parameters()
        self.opt = Optimizer(self.params, config.optimizer)
        self.mask = scope_mask(self.net, config.sam.scope) if config.sam.active else None
        self.reset_rng = rngs.stream(seed, "reset")
        self.resets: list = []

    def _loss(self, batch):
        x, y = batch
        return T.softmax_cross_entropy(self.net(x), y)

    def step(self, x, y) -> tuple[float, float]:
        res = sam_step(self._loss, (x, y), self.params, self.opt, self.config.sam, self.mask)
        return res.loss, res.grad_norm

    def predict(self, x) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(x), self.config.eval_batch):
                out.append(np.argmax(self.net(x[i:i + self.config.eval_batch]).data, axis=1))
        return np.concatenate(out)

    def on_phase_start(self, phase: int):
        if self.config.reset is None:
            return None
        event = apply_reset(self.net, self.config.reset, phase, self.reset_rng, [self.opt])
        if event is not None:
            self.resets.append(event)
        return event

    def diagnostics(self, x, y) -> dict[str, float]:
        est = network_lambda_max(self.net, lambda out: T.softmax_cross_entropy(out, y), x, self.config.probe)
        return {"lambda_max": est.value,
                "active_fraction": active_fraction(self.net, x, self.config.probe.probe_layers)}


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def _accuracy(learner: LearnerProtocol, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(learner.predict(x) == y))


def _train_phase(learner, x, y, phase, schedule, sample_rng, step0):
    losses, norms = [], []
    n = len(y)
    for k in range(schedule.updates_per_phase):
        idx = sample_rng.integers(0, n, schedule.batch_size)
        try:
            loss, gnorm = learner.step(x[idx], y[idx])
        except (NumericError, ContractError) as exc:
            raise type(exc)(f"phase {phase}, update {step0 + k + 1}: {exc}") from exc
        losses.append(loss)
        norms.append(gnorm)
    return float(np.mean(losses)), float(np.mean(norms))


def _probe(learner, x, y, phase, probe_every, probe_rng, probe_size):
    if not probe_every or (phase + 1) % probe_every:
        return {"lambda_max": math.nan, "active_fraction": math.nan}
    idx = probe_rng.choice(len(y), size=min(probe_size, len(y)), replace=False)
    return learner.diagnostics(x[idx], y[idx])


def _probe_settings(learner) -> tuple[int, int]:
    cfg = getattr(learner, "config", None)
    if cfg is None:
        return 0, 0
    return cfg.probe_every, cfg.probe.probe_batch_size


def run_input_adaptation(learner: LearnerProtocol, train: LabeledDataset, test: LabeledDataset,
                         schedule: AdaptationSchedule, seed: int,
                         on_record: Callable[[dict], None] | None = None) -> list[dict]:
    """Grow the buffer by one chunk per phase and train on uniform draws from it."""
    if schedule.kind != INPUT_ADAPTATION:
        raise ContractError(f"run_input_adaptation needs an {INPUT_ADAPTATION} schedule, got {schedule.kind!r}")
    chunks = chunk_stream(len(train), schedule.num_phases, rngs.stream(seed, "chunks"))
    sample_rng, probe_rng = rngs.stream(seed, "batches"), rngs.stream(seed, "probe")
    probe_every, probe_size = _probe_settings(learner)
    records, buffer, step = [], np.empty(0, dtype=np.int64), 0
    for phase, chunk in enumerate(chunks):
        learner.on_phase_start(phase)
        buffer = np.concatenate([buffer, chunk])
        x, y = train.inputs[buffer], train.labels[buffer]
        loss, gnorm = _train_phase(learner, x, y, phase, schedule, sample_rng, step)
        step += schedule.updates_per_phase
        rec = {"phase": phase, "step": step, "buffer_size": len(buffer), "train_loss": loss, "grad_norm": gnorm,
               "test_accuracy": _accuracy(learner, test.inputs, test.labels)}
        rec.update(_probe(learner, x, y, phase, probe_every, probe_rng, probe_size))
        records.append(rec)
        if on_record:
            on_record(rec)
    return records


def run_label_adaptation(learner: LearnerProtocol, train: LabeledDataset, test: LabeledDataset,
                         schedule: AdaptationSchedule, seed: int,
                         on_record: Callable[[dict], None] | None = None) -> list[dict]:
    """Relabel train and test with a fresh class permutation each phase; train on the full set."""
    if schedule.kind != LABEL_ADAPTATION:
        raise ContractError(f"run_label_adaptation needs a {LABEL_ADAPTATION} schedule, got {schedule.kind!r}")
    perm_rng = rngs.stream(seed, "labels")
    sample_rng, probe_rng = rngs.stream(seed, "batches"), rngs.stream(seed, "probe")
    probe_every, probe_size = _probe_settings(learner)
    records, step = [], 0
    for phase in range(schedule.num_phases):
        perm = label_permutation(train.class_count, perm_rng)
        learner.on_phase_start(phase)
        y = perm[train.labels]
        loss, gnorm = _train_phase(learner, train.inputs, y, phase, schedule, sample_rng, step)
        step += schedule.updates_per_phase
        rec = {"phase": phase, "step": step, "buffer_size": len(train), "train_loss": loss, "grad_norm": gnorm,
               "test_accuracy": _accuracy(learner, test.inputs, perm[test.labels])}
        rec.update(_probe(learner, train.inputs, y, phase, probe_every, probe_rng, probe_size))
        records.append(rec)
        if on_record:
            on_record(rec)
    return records


def run_adaptation(learner, train, test, schedule, seed, on_record=None) -> list[dict]:
    fn = run_input_adaptation if schedule.kind == INPUT_ADAPTATION else run_label_adaptation
    return fn(learner, train, test, schedule, seed, on_record)


def final_accuracy(records: Sequence[dict]) -> float:
    return records[-1]["test_accuracy"]


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    params: dict
    scores: list[float]
    seconds: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def sem(self) -> float:
        return float(np.std(self.scores, ddof=1) / np.sqrt(len(self.scores))) if len(self.scores) > 1 else 0.0


def sweep(run: Callable[[dict, int], float], grid: dict[str, Iterable], seeds: Sequence[int]) -> list[SweepResult]:
    """Evaluate ``run(params, seed)`` over the Cartesian grid; best mean score first."""
    keys = list(grid)
    results = []
    for values in itertools.product(*(list(grid[k]) for k in keys)):
        params = dict(zip(keys, values))
        t0 = time.perf_counter()
        scores = [float(run(params, s)) for s in seeds]
        results.append(SweepResult(params, scores, time.perf_counter() - t0))
    results.sort(key=lambda r: -r.mean)
    return results


LR_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
WD_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
RHO_GRID = (0.1, 0.03, 0.01)
RESET_INTERVAL_GRID = (5, 10, 20)
