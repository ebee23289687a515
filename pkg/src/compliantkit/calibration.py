"""Capacitance -> wrench calibration with a small fully connected network.

The network, its backpropagation and the Adam optimiser are plain numpy so
that training is deterministic for a given seed and single-threaded.

Model file layout (little-endian)::

    8s   magic  b"CKMLP\\0\\0\\0"
    u16  version (1)
    u16  L = number of layer widths (inputs ... outputs)
    u32  widths[L]
    f64  input_mean[w0], input_scale[w0]
    f64  output_offset[wL-1], output_scale[wL-1]
    per layer i = 0 .. L-2:
        f64 weight[w_i][w_{i+1}]  row-major, input index first
        f64 bias[w_{i+1}]

``predict(x) = net((x - input_mean) / input_scale) * output_scale + output_offset``
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Wrench
from .stream_sync import SessionLog, read_log, write_log

log = logging.getLogger(__name__)

AXES = ("Fx", "Fy", "Fz", "Tx", "Ty", "Tz")
# calibration target box: +-20 N shear, 0..25 N normal, +-0.5 N m moment
AXIS_LOW = np.array([-20.0, -20.0, 0.0, -0.5, -0.5, -0.5])
AXIS_HIGH = np.array([20.0, 20.0, 25.0, 0.5, 0.5, 0.5])
AXIS_RANGE = AXIS_HIGH - AXIS_LOW
HIDDEN = (128, 64, 36, 24, 12)
# torque per newton used to express sensor noise in force units
NOISE_LEVER = 0.025
# hardware reference errors as published for the real sensor (N, N, N, mNm, mNm, mNm)
HARDWARE_REFERENCE = dict(zip(AXES, (0.18, 0.15, 0.58, 159.0, 231.0, 17.0)))

SPLITS = ("train", "validation", "test")
MODEL_MAGIC = b"CKMLP\0\0\0"
MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# --------------------------------------------------------------------------
# synthetic sensor

class SensorForwardModel:
    """Smooth nonlinear wrench -> capacitance map used as a desk-scale oracle.

    Per channel ``j``, with ``u`` the wrench scaled to [-1, 1] per axis and
    ``z = A u``::

        c_j = base_j + gain_j * (s tanh(z_j / s) + q z_j^2 + g z_j z_{j+1})

    ``s`` sets the saturation, ``q`` a square-law term and ``g`` the coupling
    to the neighbouring channel.  The parameters are fixed by
    ``structure_seed`` so every dataset shares one sensor.
    """

    def __init__(self, channels=8, structure_seed=2024, saturation=1.2,
                 square=0.05, coupling=0.05):
        if channels < 6:
            raise ValueError("need at least six channels to resolve six axes")
        rng = np.random.default_rng(structure_seed)
        a = rng.standard_normal((channels, 6))
        # keep |z| <= ~1.3 on the box
        self.a = a / np.abs(a).sum(axis=1, keepdims=True) * 1.3
        self.base = rng.uniform(800.0, 1200.0, channels)
        self.gain = rng.uniform(150.0, 250.0, channels)
        self.channels = channels
        self.saturation = saturation
        self.square = square
        self.coupling = coupling

    def __call__(self, wrench):
        w = np.atleast_2d(np.asarray(wrench, dtype=float))
        u = 2.0 * (w - AXIS_LOW) / AXIS_RANGE - 1.0
        z = u @ self.a.T
        s = self.saturation
        shape = s * np.tanh(z / s) + self.square * z**2 \
            + self.coupling * z * np.roll(z, -1, axis=1)
        return self.base + self.gain * shape


@dataclass(frozen=True, eq=False)
class CapacitanceSample:
    channels: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        c = np.array(self.channels, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValueError("capacitance must be finite")
        object.__setattr__(self, "channels", c)


@dataclass(eq=False)
class CalibrationDataset:
    capacitance: np.ndarray   # (n, C)
    wrench: np.ndarray        # (n, 6)
    times: np.ndarray         # (n,) seconds
    split: np.ndarray         # (n,) index into SPLITS

    def __post_init__(self):
        n = len(self.times)
        if self.capacitance.shape[0] != n or self.wrench.shape != (n, 6) \
                or self.split.shape != (n,):
            raise ValueError("dataset arrays are not aligned")
        if not (np.all(np.isfinite(self.capacitance)) and np.all(np.isfinite(self.wrench))):
            raise ValueError("dataset contains non-finite values")

    @property
    def channels(self) -> int:
        return self.capacitance.shape[1]

    def subset(self, name: str):
        m = self.split == SPLITS.index(name)
        return self.capacitance[m], self.wrench[m]


def generate_synthetic_dataset(seed: int, n: int, noise_sd: float = 0.0,
                               channels: int = 8, rate: float = 360.0,
                               fractions=(0.7, 0.15, 0.15),
                               sensor: SensorForwardModel | None = None) -> CalibrationDataset:
    """Random wrenches in the calibration box mapped through the sensor model.

    ``noise_sd`` is expressed in newtons: the sensor sees the wrench
    perturbed by N(0, noise_sd^2) per force axis and N(0, (noise_sd *
    NOISE_LEVER)^2) per torque axis.  Labels stay clean.
    """
    if n < 100:
        raise ValueError("need at least 100 samples")
    if not noise_sd >= 0 or not np.isfinite(noise_sd):
        raise ValueError("noise_sd must be a finite non-negative number")
    sensor = sensor or SensorForwardModel(channels)
    rng = np.random.default_rng(seed)
    w = rng.uniform(AXIS_LOW, AXIS_HIGH, size=(n, 6))
    seen = w
    if noise_sd > 0:
        sd = noise_sd * np.array([1, 1, 1, NOISE_LEVER, NOISE_LEVER, NOISE_LEVER])
        seen = w + rng.standard_normal((n, 6)) * sd
    cap = sensor(seen)
    split = np.empty(n, dtype=np.int64)
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split[order[:n_train]] = 0
    split[order[n_train:n_train + n_val]] = 1
    split[order[n_train + n_val:]] = 2
    return CalibrationDataset(cap, w, np.arange(n) / rate, split)


def noise_axis_sd(noise_sd: float) -> np.ndarray:
    return noise_sd * np.array([1, 1, 1, NOISE_LEVER, NOISE_LEVER, NOISE_LEVER])


def save_dataset(ds: CalibrationDataset, path, rate: float = 360.0):
    slog = SessionLog("calibration", 0, {"kind": "calibration"})
    slog.add_stream("capacitance", rate, ds.channels)
    slog.add_stream("wrench_gt", rate, 6, columns=AXES)
    slog.add_stream("split", rate, 1)
    t = np.round(ds.times * 1e9).astype(np.uint64)
    slog.extend("capacitance", t, ds.capacitance)
    slog.extend("wrench_gt", t, ds.wrench)
    slog.extend("split", t, ds.split.astype(float)[:, None])
    write_log(slog, path)


def load_dataset(path) -> CalibrationDataset:
    slog = read_log(path)
    for name in ("capacitance", "wrench_gt"):
        if name not in slog.streams:
            raise ValueError(f"calibration log lacks a {name!r} stream")
    t = slog.times("capacitance")
    if not np.array_equal(t, slog.times("wrench_gt")):
        raise ValueError("capacitance and wrench_gt are not time-aligned")
    if "split" in slog.streams:
        split = slog.values("split")[:, 0].astype(np.int64)
    else:
        split = np.zeros(len(t), dtype=np.int64)
    return CalibrationDataset(slog.values("capacitance").copy(),
                              slog.values("wrench_gt").copy(),
                              t.astype(float) * 1e-9, split)


# --------------------------------------------------------------------------
# network

@dataclass(eq=False)
class MLPModel:
    widths: tuple
    weights: list
    biases: list
    input_mean: np.ndarray
    input_scale: np.ndarray
    output_offset: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match widths")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @classmethod
    def initialize(cls, widths, rng, input_mean=None, input_scale=None,
                   output_offset=None, output_scale=None) -> "MLPModel":
        """Glorot-uniform weights and biases.

        Non-zero biases keep the narrow late layers from starting with dead
        rectifiers.
        """
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, fan_out))
        n_in, n_out = widths[0], widths[-1]
        return cls(tuple(widths), ws, bs,
                   np.zeros(n_in) if input_mean is None else input_mean,
                   np.ones(n_in) if input_scale is None else input_scale,
                   np.zeros(n_out) if output_offset is None else output_offset,
                   np.ones(n_out) if output_scale is None else output_scale)

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLPModel":
        return MLPModel(self.widths, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.input_mean.copy(),
                        self.input_scale.copy(), self.output_offset.copy(),
                        self.output_scale.copy())


def forward(model: MLPModel, xn):
    """Network output for normalised inputs; also returns pre-activations."""
    acts = [xn]
    h = xn
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def loss_and_grads(model: MLPModel, xn, yn):
    """Mean squared error over samples and outputs, and its gradients."""
    out, acts = forward(model, xn)
    diff = out - yn
    n = diff.size
    loss = float(np.sum(diff * diff) / n)
    delta = 2.0 * diff / n
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    return loss, grads


def predict_batch(model: MLPModel, capacitance) -> np.ndarray:
    x = np.atleast_2d(np.asarray(capacitance, dtype=float))
    if x.shape[1] != model.widths[0]:
        raise ValueError(f"model expects {model.widths[0]} channels, got {x.shape[1]}")
    out, _ = forward(model, (x - model.input_mean) / model.input_scale)
    return out * model.output_scale + model.output_offset


def predict(model: MLPModel, sample: CapacitanceSample, frame: str = "sensor") -> Wrench:
    return Wrench.from_vector(predict_batch(model, sample.channels)[0], frame)


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 400
    batch_size: int = 64
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden: tuple = HIDDEN


@dataclass
class TrainingResult:
    model: MLPModel
    best_epoch: int
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)

    @property
    def checkpoints(self):
        best = np.inf
        out = []
        for epoch, tr, va in self.history:
            if va < best:
                best = va
                out.append((epoch, tr, va))
        return out


def _normalized_loss(model, x, y):
    xn = (x - model.input_mean) / model.input_scale
    yn = (y - model.output_offset) / model.output_scale
    out, _ = forward(model, xn)
    return float(np.mean((out - yn) ** 2))


def train_calibration(ds: CalibrationDataset, cfg: TrainingConfig = TrainingConfig(),
                      epoch_callback=None) -> TrainingResult:
    """Fit the network; returns the weights with the lowest validation loss.

    Targets are centred and divided by the per-axis calibration range, so
    newton and newton-metre axes weigh equally in the loss.
    """
    x_tr, y_tr = ds.subset("train")
    x_va, y_va = ds.subset("validation")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("dataset needs train and validation samples")
    rng = np.random.default_rng(cfg.seed)
    mean = x_tr.mean(axis=0)
    scale = x_tr.std(axis=0)
    scale[scale == 0] = 1.0
    widths = (ds.channels,) + tuple(cfg.hidden) + (6,)
    model = MLPModel.initialize(widths, rng, mean, scale,
                                0.5 * (AXIS_LOW + AXIS_HIGH), AXIS_RANGE.copy())
    xn = (x_tr - mean) / scale
    yn = (y_tr - model.output_offset) / model.output_scale

    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    n = len(xn)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    decay = (cfg.final_learning_rate / cfg.learning_rate) ** (1.0 / max(total - 1, 1))

    best = model.copy()
    best_val = _normalized_loss(model, x_va, y_va)
    best_epoch = 0
    result = TrainingResult(best, 0, [(0, _normalized_loss(model, x_tr, y_tr), best_val)])
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, xn[idx], yn[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            step += 1
            lr = cfg.learning_rate * decay ** (step - 1)
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            for p, g, a, b in zip(params, grads, m1, m2):
                a *= cfg.beta1
                a += (1.0 - cfg.beta1) * g
                b *= cfg.beta2
                b += (1.0 - cfg.beta2) * g * g
                p -= lr * (a / c1) / (np.sqrt(b / c2) + cfg.eps)
        tr = _normalized_loss(model, x_tr, y_tr)
        va = _normalized_loss(model, x_va, y_va)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDiverged(epoch)
        result.history.append((epoch, tr, va))
        if va < best_val:
            best_val, best_epoch = va, epoch
            best = model.copy()
        if epoch_callback is not None:
            epoch_callback(epoch, tr, va)
        log.debug("epoch %d train %.3e val %.3e", epoch, tr, va)
    result.model = best
    result.best_epoch = best_epoch
    return result


# --------------------------------------------------------------------------
# evaluation

@dataclass
class CalibrationReport:
    mse: dict       # reporting units squared (N^2, mNm^2)
    rmse: dict      # N, mNm
    n: int

    @staticmethod
    def units(axis):
        return "N" if axis.startswith("F") else "mNm"

    def format(self) -> str:
        lines = [f"{'axis':<5}{'MSE':>14}{'RMSE':>12}  unit   hardware ref (n={self.n})"]
        for a in AXES:
            u = self.units(a)
            lines.append(f"{a:<5}{self.mse[a]:>14.6g}{self.rmse[a]:>12.6g}  {u:<5}"
                         f"  {HARDWARE_REFERENCE[a]:g} {u}")
        return "\n".join(lines)


def _report(pred, truth) -> CalibrationReport:
    if len(truth) == 0:
        raise ValueError("empty evaluation split")
    err = pred - truth
    err = err * np.array([1, 1, 1, 1e3, 1e3, 1e3])
    mse = np.mean(err**2, axis=0)
    return CalibrationReport(dict(zip(AXES, mse.tolist())),
                             dict(zip(AXES, np.sqrt(mse).tolist())), len(truth))


def evaluate(model: MLPModel, ds: CalibrationDataset, split: str = "test") -> CalibrationReport:
    x, y = ds.subset(split)
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    return _report(predict_batch(model, x), y)


def evaluate_predictions(pred, truth) -> CalibrationReport:
    return _report(np.asarray(pred, dtype=float), np.asarray(truth, dtype=float))


# --------------------------------------------------------------------------
# serialization

def save_model(model: MLPModel, path):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HH", MODEL_VERSION, len(model.widths)))
        fh.write(struct.pack(f"<{len(model.widths)}I", *model.widths))
        for arr in (model.input_mean, model.input_scale,
                    model.output_offset, model.output_scale):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> MLPModel:
    buf = open(path, "rb").read()
    if buf[:8] != MODEL_MAGIC:
        raise ValueError("not a model file")
    version, nw = struct.unpack_from("<HH", buf, 8)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    widths = struct.unpack_from(f"<{nw}I", buf, 12)
    pos = 12 + 4 * nw

    def take(count):
        nonlocal pos
        if pos + 8 * count > len(buf):
            raise ValueError("model file truncated")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(float)
        pos += 8 * count
        return arr

    mean, scale = take(widths[0]), take(widths[0])
    off, oscale = take(widths[-1]), take(widths[-1])
    ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        ws.append(take(a * b).reshape(a, b))
        bs.append(take(b))
    return MLPModel(widths, ws, bs, mean, scale, off, oscale)
