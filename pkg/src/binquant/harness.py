"""Desk-scale QAT experiments E0..E5 on a tiny dense encoder.

The model is an input projection (float), a stack of dense blocks
``linear -> relu -> layernorm_lite`` whose linear weights are fake-quantized,
mean pooling over the sequence, and a float classifier.  The data is a
synthetic sequence-classification task labelled by a random teacher network.

Final accuracy is measured through the packed inference kernels with the
metadata rounded to the configured dtype, so the lossy storage path is what
gets evaluated.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels, modelpack
from . import quantcore as qc
from .autodiff import Tensor
from .modelpack import LayerSpec, ModelManifest

EXPERIMENTS = ("E0", "E1", "E2", "E3", "E4", "E5")
# Iteration budget relative to the float run (200k / 270k / 446k).
STEP_MULTIPLIER = {"E0": 1.0, "E1": 1.35, "E2": 1.35, "E3": 2.23, "E4": 2.23, "E5": 2.23}
RESULTS_HEADER = ["exp_id", "seed", "steps", "final_loss", "eval_acc", "diverged", "total_bits", "reduction"]


def experiment_scheme(exp_id: str) -> Optional[qc.QuantScheme]:
    exp_id = exp_id.upper()
    if exp_id not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {exp_id!r}, expected one of {EXPERIMENTS}")
    return None if exp_id == "E0" else qc.SCHEMES[exp_id.lower()]


@dataclass
class ExperimentConfig:
    exp_id: str = "E0"
    seed: int = 42
    layers: int = 2
    hidden: int = 128
    in_dim: int = 16
    seq_len: int = 8
    classes: int = 4
    teacher_hidden: int = 32
    teacher_depth: int = 2
    margin_quantile: float = 0.2
    base_steps: int = 4000
    steps: Optional[int] = None  # overrides base_steps * multiplier
    batch: int = 128
    lr: float = 1e-2
    n_train: int = 65536
    n_eval: int = 4096
    eval_every: int = 0
    meta_dtype: str = "int8"
    scale_backprop: Optional[bool] = None  # None: on for absmax schemes, off for absmean
    ste: str = "identity"
    scheme: Optional[qc.QuantScheme] = field(default=None)

    def __post_init__(self):
        self.exp_id = self.exp_id.upper()
        if self.scheme is None:
            self.scheme = experiment_scheme(self.exp_id)
        if self.scale_backprop is None:
            self.scale_backprop = self.scheme is not None and self.scheme.asymmetric
        if self.steps is None:
            self.steps = int(round(self.base_steps * STEP_MULTIPLIER[self.exp_id]))


@dataclass
class RunReport:
    exp_id: str
    seed: int
    steps: int
    final_loss: float
    eval_acc: float
    diverged: bool
    wall_time: float
    size: modelpack.SizeReport
    fake_quant_acc: float = float("nan")
    history: list = field(default_factory=list, repr=False)
    params: dict = field(default_factory=dict, repr=False)

    @property
    def total_bits(self) -> int:
        return self.size.total_bits_quantized

    @property
    def reduction(self) -> Optional[float]:
        return None if self.exp_id == "E0" else self.size.reduction_factor


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray   # [n, seq_len, in_dim] float32
    y: np.ndarray   # [n] int64

    def __len__(self):
        return len(self.y)


def synth_dataset(seed: int, n: int, seq_len: int = 8, classes: int = 4, in_dim: int = 16,
                  teacher_hidden: int = 32, margin_quantile: float = 0.2, split: int = 0,
                  teacher_depth: int = 1) -> Dataset:
    """Sequence classification labelled by a random relu teacher.

    ``label = argmax_c mean_t relu(x_t U) V[:, c]``, with ``teacher_depth - 1``
    further per-token ``relu(. U_i)`` layers before pooling.  The lowest-margin
    ``margin_quantile`` of candidates are dropped and classes are drawn in
    equal numbers, so the float model can learn the task almost exactly.
    The teacher depends only on ``seed``; ``split`` selects disjoint sample
    streams (0 = train, 1 = eval).
    """
    if min(n, seq_len, classes, in_dim, teacher_depth) <= 0:
        raise ValueError("dataset sizes must be positive")
    rng = np.random.default_rng([seed, 0xDA7A])
    u = rng.standard_normal((in_dim, teacher_hidden)) / math.sqrt(in_dim)
    v = rng.standard_normal((teacher_hidden, classes))
    deeper = [rng.standard_normal((teacher_hidden, teacher_hidden)) * math.sqrt(2 / teacher_hidden)
              for _ in range(teacher_depth - 1)]
    rng = np.random.default_rng([seed, 0xDA7A, split + 1])

    def teacher(x):
        h = np.maximum(x @ u, 0)
        for w in deeper:
            h = np.maximum((h - h.mean(axis=-1, keepdims=True)) @ w, 0)
        return h.mean(axis=1)

    center = teacher(rng.standard_normal((4096, seq_len, in_dim))).mean(axis=0)
    per_class = -(-n // classes)
    xs = [[] for _ in range(classes)]
    have = np.zeros(classes, dtype=int)
    for _ in range(1000):
        if have.min() >= per_class:
            break
        x = rng.standard_normal((min(4 * n, 200_000) + 64, seq_len, in_dim))
        logits = (teacher(x) - center) @ v
        top2 = np.sort(logits, axis=1)[:, -2:]
        margin = top2[:, 1] - top2[:, 0]
        keep = margin > np.quantile(margin, margin_quantile)
        labels = logits.argmax(axis=1)
        for c in range(classes):
            take = x[keep & (labels == c)][: per_class - have[c]]
            xs[c].append(take)
            have[c] += len(take)
    else:
        raise RuntimeError("teacher never produced enough samples of every class")
    x = np.concatenate([np.concatenate(xs[c]) for c in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(len(y))[:n]
    ds = Dataset(x[order].astype(np.float32), y[order].astype(np.int64))
    if n >= 10_000:
        freq = np.bincount(ds.y, minlength=classes) / n
        assert np.all(np.abs(freq - 1 / classes) <= 0.05), "label distribution is not balanced"
    return ds


def make_data(cfg: ExperimentConfig, n: int, split: int = 0) -> Dataset:
    return synth_dataset(cfg.seed, n, cfg.seq_len, cfg.classes, cfg.in_dim, cfg.teacher_hidden,
                         cfg.margin_quantile, split, cfg.teacher_depth)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def init_params(cfg: ExperimentConfig, rng: np.random.Generator) -> dict:
    h = cfg.hidden
    p = {
        "in_proj.w": rng.standard_normal((cfg.in_dim, h)) / math.sqrt(cfg.in_dim),
        "in_proj.b": np.zeros(h),
    }
    for i in range(cfg.layers):
        p[f"block{i}.w"] = rng.standard_normal((h, h)) / math.sqrt(h)  # [out, in]
        p[f"block{i}.b"] = np.zeros(h)
        p[f"block{i}.gamma"] = np.ones(h)
        p[f"block{i}.beta"] = np.zeros(h)
    p["classifier.w"] = rng.standard_normal((h, cfg.classes)) / math.sqrt(h)
    p["classifier.b"] = np.zeros(cfg.classes)
    return {k: v.astype(np.float32) for k, v in p.items()}


def quantized_names(cfg: ExperimentConfig) -> list:
    return [f"block{i}.w" for i in range(cfg.layers)] if cfg.scheme is not None else []


def model_manifest(cfg: ExperimentConfig, params: dict) -> ModelManifest:
    q = set(quantized_names(cfg))
    return ModelManifest([LayerSpec(k, tuple(v.shape), cfg.scheme if k in q else None)
                          for k, v in params.items()], name=f"toy-{cfg.exp_id}")


def forward(cfg: ExperimentConfig, params: dict, x: np.ndarray, linear=None) -> Tensor:
    """Logits for a batch ``x`` of shape ``[B, T, in_dim]``.

    ``params`` maps names to Tensors.  ``linear(name, h)`` overrides how a
    quantized block computes ``h @ W.T`` (used for the packed eval path).
    """
    b, t, _ = x.shape
    h = ad.matmul(Tensor(x.reshape(b * t, -1)), params["in_proj.w"]) + params["in_proj.b"]
    for i in range(cfg.layers):
        name = f"block{i}.w"
        if linear is not None and cfg.scheme is not None:
            z = Tensor(linear(name, h.data))
        else:
            w = params[name]
            if cfg.scheme is not None:
                w = ad.fake_quant_node(w, cfg.scheme, cfg.scale_backprop, cfg.ste)
            z = ad.matmul(h, ad.transpose(w))
        z = ad.relu(z + params[f"block{i}.b"])
        h = ad.layernorm_lite(z, params[f"block{i}.gamma"], params[f"block{i}.beta"])
    pooled = ad.reduce_mean(ad.reshape(h, (b, t, -1)), axis=1)
    return ad.matmul(pooled, params["classifier.w"]) + params["classifier.b"]


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def evaluate(cfg: ExperimentConfig, params: dict, data: Dataset, packed: bool = True,
             batch: int = 256) -> float:
    """Accuracy on ``data``; ``packed`` routes quantized layers through the kernels."""
    tensors = {k: Tensor(v) for k, v in params.items()}
    linear = None
    if packed and cfg.scheme is not None:
        layers = {}
        for name in quantized_names(cfg):
            q = modelpack.compress_metadata(qc.quantize(params[name], cfg.scheme), cfg.meta_dtype)
            layers[name] = kernels.PackedLinear(q)

        def linear(name, h):
            return layers[name](h).astype(np.float32)

    correct = 0.0
    for i in range(0, len(data), batch):
        logits = forward(cfg, tensors, data.x[i:i + batch], linear).data
        correct += _accuracy(logits, data.y[i:i + batch]) * len(data.y[i:i + batch])
    return correct / len(data)


def export_tensors(cfg: ExperimentConfig, params: dict) -> tuple[ModelManifest, dict]:
    """Trained model as a manifest plus BQW1-ready tensors."""
    q = set(quantized_names(cfg))
    tensors = {k: (modelpack.compress_metadata(qc.quantize(v, cfg.scheme), cfg.meta_dtype) if k in q else v)
               for k, v in params.items()}
    return model_manifest(cfg, params), tensors


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def train(cfg: ExperimentConfig, data: Optional[Dataset] = None):
    """Run QAT; returns ``(params, loss_history, diverged_by_loss)``."""
    rng = np.random.default_rng([cfg.seed, 1])
    if data is None:
        data = make_data(cfg, cfg.n_train)
    params = init_params(cfg, rng)
    names = list(params)
    opt = ad.Adam(lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), cfg.batch)
        tensors = {k: Tensor(params[k], requires_grad=True) for k in names}
        loss = ad.softmax_cross_entropy(forward(cfg, tensors, data.x[idx]), data.y[idx])
        value = float(loss.data)
        history.append(value)
        if not math.isfinite(value):
            return params, history, True
        ad.backward(loss)
        # linear decay over the last half keeps the final weights settled
        opt.lr = cfg.lr * min(1.0, 2.0 * (1.0 - step / cfg.steps))
        new = opt.step([params[k] for k in names], [tensors[k].grad for k in names])
        params = dict(zip(names, new))
    return params, history, False


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    t0 = time.perf_counter()
    data = make_data(cfg, cfg.n_train)
    eval_data = make_data(cfg, cfg.n_eval, split=1)
    params, history, blew_up = train(cfg, data)
    tail = history[-50:]
    final_loss = float(np.mean(tail)) if tail else float("nan")
    finite = all(np.all(np.isfinite(v)) for v in params.values())
    if blew_up or not finite or not math.isfinite(final_loss):
        acc = fq_acc = 1.0 / cfg.classes
        diverged = True
        final_loss = float("nan") if not math.isfinite(final_loss) else final_loss
    else:
        acc = evaluate(cfg, params, eval_data, packed=True)
        fq_acc = evaluate(cfg, params, eval_data, packed=False)
        diverged = acc <= 1.0 / cfg.classes + 0.1
    size = modelpack.size_report(model_manifest(cfg, params), cfg.meta_dtype)
    return RunReport(cfg.exp_id, cfg.seed, cfg.steps, final_loss, acc, diverged,
                     time.perf_counter() - t0, size, fq_acc, history, params)


def run_suite(exp_ids: Sequence[str] = EXPERIMENTS, seeds: Sequence[int] = (0, 1, 2), **overrides) -> list:
    return [run_experiment(ExperimentConfig(exp_id=e, seed=s, **overrides)) for s in seeds for e in exp_ids]


def _fmt(x, spec: str) -> str:
    return "N/A" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, spec)


def report_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in reports:
        w.writerow([r.exp_id, r.seed, r.steps, _fmt(r.final_loss, ".6f"), f"{r.eval_acc:.4f}",
                    str(r.diverged).lower(), r.total_bits, _fmt(r.reduction, ".3f")])
    return buf.getvalue()


def report_table(reports: Sequence[RunReport]) -> tuple[str, str]:
    """One row per run: accuracy, model bits and reduction vs float32."""
    lines = [f"{'exp':<4} {'seed':>4} {'steps':>6} {'loss':>8} {'acc[%]':>7} {'diverged':>8} "
             f"{'size[bits]':>11} {'reduction':>9}"]
    for r in reports:
        acc = "N/A" if r.diverged else f"{100 * r.eval_acc:.1f}"
        red = "N/A" if r.reduction is None else f"{r.reduction:.1f}x"
        lines.append(f"{r.exp_id:<4} {r.seed:>4} {r.steps:>6} {_fmt(r.final_loss, '.4f'):>8} {acc:>7} "
                     f"{str(r.diverged).lower():>8} {r.total_bits:>11,} {red:>9}")
    return "\n".join(lines), report_csv(reports)
