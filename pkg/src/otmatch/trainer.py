"""The OTMatch training loop.

One call to :func:`train_step` runs, in order: supervised loss; threshold
EMAs (global threshold, class probabilities, label histogram); class-local
thresholds; masked pseudo-label CE; masked statistics and the fairness loss;
the FreeMatch total; the cost update; the transport loss; the OTMatch total;
then one SGD step on the student and one EMA step on the teacher.
With ``lam == 0`` the cost update and transport loss are skipped entirely.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig
from .cost import CostMatrix, covariance_update_cost, ema_update_cost, init_discrete, validate_metric
from .data import (
    AugmentParams,
    Dataset,
    MixedBatch,
    SSLSplits,
    gen_gaussian_mixture,
    gen_two_moons,
    load_idx_dataset,
    make_splits,
    sample_batch,
)
from .errors import ParameterError, TrainingDivergedError
from .losses import (
    BatchPredictions,
    LossWeights,
    fairness_stats,
    loss_sup,
    loss_sup_grad,
    loss_total,
    loss_un1,
    loss_un1_grad,
    loss_un2,
    loss_un2_grad,
    loss_un3_with_grad,
)
from .nn import (
    ModelParams,
    OptimizerState,
    TeacherParams,
    backward,
    cosine_lr,
    ema_update,
    forward_batch,
    init_conv_net,
    init_mlp,
    init_optimizer,
    sgd_step,
)
from .thresholds import ThresholdState, init_state as init_thresholds, local_thresholds, mask, update_state

__all__ = [
    "STEP_ORDER",
    "MetricsRow",
    "TrainState",
    "build_splits",
    "init_train_state",
    "train_step",
    "evaluate",
    "train",
    "save_state",
    "load_state",
    "METRIC_COLUMNS",
]

log = logging.getLogger(__name__)

STEP_ORDER = (
    "loss_sup",
    "tau",
    "p_tilde",
    "h_tilde",
    "local_thresholds",
    "loss_un1",
    "p_bar",
    "h_bar",
    "loss_un2",
    "loss_freematch",
    "cost_update",
    "loss_un3",
    "loss_otmatch",
    "sgd_step",
    "teacher_ema",
)

METRIC_COLUMNS = (
    "step", "lr", "L_sup", "L_un1", "L_un2", "L_un3", "L_total",
    "mask_rate", "tau_global", "train_acc", "eval_acc",
)


@dataclass
class MetricsRow:
    step: int
    lr: float
    L_sup: float
    L_un1: float
    L_un2: float
    L_un3: float
    L_total: float
    mask_rate: float
    tau_global: float
    train_acc: float | None = None
    eval_acc: float | None = None
    seconds: float = 0.0

    def csv_fields(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else repr(v))
        return out


@dataclass
class TrainState:
    config: TrainConfig
    student: ModelParams
    teacher: TeacherParams
    opt: OptimizerState
    thresholds: ThresholdState
    cost: CostMatrix
    rng: np.random.Generator
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def weights(self) -> LossWeights:
        c = self.config
        return LossWeights(c.w1, c.w2, c.lam)

    @property
    def augment_params(self) -> AugmentParams:
        c = self.config
        return AugmentParams(noise=c.aug_noise, mask_fraction=c.aug_mask_fraction)


def _seeds(seed: int):
    data, labels, model, batches = np.random.SeedSequence(seed).spawn(4)
    return data, labels, model, batches


def build_splits(config: TrainConfig) -> SSLSplits:
    data_seed, label_seed, _, _ = _seeds(config.seed)
    test_seed, train_seed = data_seed.spawn(2)
    if config.dataset == "two_moons":
        train = gen_two_moons(config.n_samples, config.noise, np.random.default_rng(train_seed))
        test = gen_two_moons(config.n_test, config.noise, np.random.default_rng(test_seed))
    elif config.dataset == "gaussian_mixture":
        # same seed for both so they share class means
        K = config.num_classes
        full = gen_gaussian_mixture(
            (config.n_samples + config.n_test) // K, K, config.mixture_dim,
            config.mixture_spread, seed=np.random.default_rng(train_seed),
        )
        train = Dataset(full.X[:config.n_samples], full.y[:config.n_samples], K)
        test = Dataset(full.X[config.n_samples:], full.y[config.n_samples:], K)
    else:
        train = load_idx_dataset(config.idx_train_images, config.idx_train_labels, config.num_classes)
        test = load_idx_dataset(config.idx_test_images, config.idx_test_labels, config.num_classes)
    return make_splits(train, test, config.n_labels, np.random.default_rng(label_seed))


def init_train_state(config: TrainConfig, splits: SSLSplits) -> TrainState:
    _, _, model_seed, batch_seed = _seeds(config.seed)
    model_rng = np.random.default_rng(model_seed)
    K = config.num_classes
    if splits.labeled.kind == "image":
        student = init_conv_net(splits.labeled.X.shape[1:], K, hidden=config.hidden_sizes[0], rng=model_rng)
    else:
        student = init_mlp(splits.labeled.X.shape[1], K, config.hidden_sizes, rng=model_rng)
    return TrainState(
        config=config,
        student=student,
        teacher=TeacherParams.from_student(student, config.ema_decay),
        opt=init_optimizer(student, config.base_lr, config.total_steps,
                           config.sgd_momentum, config.weight_decay),
        thresholds=init_thresholds(K, config.threshold_momentum),
        cost=init_discrete(K, config.cost_momentum),
        rng=np.random.default_rng(batch_seed),
    )


def _dump_diagnostic(state: TrainState, batch: MixedBatch, values: dict, out_dir):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"diagnostic_step{state.step}.json")
    snap = {
        "step": state.step,
        "losses": {k: repr(v) for k, v in values.items()},
        "labeled_index": batch.labeled_index.tolist(),
        "unlabeled_index": batch.unlabeled_index.tolist(),
        "tau": repr(state.thresholds.tau),
        "p_tilde": state.thresholds.p_tilde.tolist(),
        "h_tilde": state.thresholds.h_tilde.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(snap, fh, indent=1)
    return path


def train_step(state: TrainState, batch: MixedBatch, trace: list | None = None,
               out_dir=None) -> MetricsRow:
    """Advance ``state`` by one optimisation step on ``batch`` (in place)."""
    cfg = state.config
    w = state.weights
    mark = trace.append if trace is not None else (lambda _: None)
    lr = cosine_lr(state.opt.t, state.opt.total_steps, state.opt.base_lr)

    q = forward_batch(state.teacher.params, batch.x_weak, cfg.teacher_temperature).probs
    n_lab = len(batch.y_labeled)
    fwd = forward_batch(state.student, np.concatenate([batch.x_labeled, batch.x_strong]))
    P_lab, Q = fwd.probs[:n_lab], fwd.probs[n_lab:]

    l_sup = loss_sup(batch.y_labeled, P_lab)
    g_lab = loss_sup_grad(batch.y_labeled, P_lab)
    mark("loss_sup")

    state.thresholds = update_state(state.thresholds, q)
    mark("tau")
    mark("p_tilde")
    mark("h_tilde")
    tau_vec = local_thresholds(state.thresholds)
    mark("local_thresholds")

    preds = BatchPredictions(q, Q, mask(q, tau_vec))
    l_un1 = loss_un1(preds)
    g_un = w.w1 * loss_un1_grad(preds)
    mark("loss_un1")
    p_bar, h_bar = fairness_stats(preds)
    mark("p_bar")
    mark("h_bar")
    l_un2 = loss_un2(p_bar, h_bar, state.thresholds)
    if w.w2:
        g_un += w.w2 * loss_un2_grad(preds, state.thresholds)
    mark("loss_un2")
    l_free = loss_total({"sup": l_sup, "un1": l_un1, "un2": l_un2}, LossWeights(w.w1, w.w2, 0.0))
    mark("loss_freematch")

    if w.lam > 0:
        if cfg.cost_mode == "head":
            state.cost = ema_update_cost(state.cost, state.student.head)
        elif cfg.cost_mode == "covariance":
            state.cost = covariance_update_cost(state.cost, Q)
        mark("cost_update")
        l_un3, g3 = loss_un3_with_grad(preds, state.cost)
        g_un += w.lam * g3
        mark("loss_un3")
        l_total = l_free + w.lam * l_un3
    else:
        l_un3 = float("nan")
        l_total = l_free
    mark("loss_otmatch")

    if not np.isfinite(l_total):
        values = {"sup": l_sup, "un1": l_un1, "un2": l_un2, "un3": l_un3}
        path = _dump_diagnostic(state, batch, values, out_dir)
        raise TrainingDivergedError(f"non-finite loss at step {state.step}: {values}", path)

    grads, _ = backward(state.student, fwd, np.concatenate([g_lab, g_un]))
    sgd_step(state.student, state.opt, grads)
    mark("sgd_step")
    ema_update(state.teacher, state.student)
    mark("teacher_ema")

    state.step += 1
    return MetricsRow(
        step=state.step,
        lr=lr,
        L_sup=l_sup,
        L_un1=l_un1,
        L_un2=l_un2,
        L_un3=l_un3,
        L_total=float(l_total),
        mask_rate=float(preds.mask.mean()),
        tau_global=state.thresholds.tau,
    )


def evaluate(params: ModelParams | TeacherParams, dataset: Dataset, batch_size: int = 1024) -> float:
    """Top-1 accuracy of argmax predictions (no augmentation).

    Pass a :class:`TeacherParams` (or ``state.teacher``) to score the EMA model.
    """
    if isinstance(params, TeacherParams):
        params = params.params
    if dataset.y is None or len(dataset) == 0:
        raise ParameterError("evaluation needs a nonempty labeled dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.X[start:start + batch_size]
        logits = forward_batch(params, xb).logits
        correct += int(np.sum(logits.argmax(axis=1) == dataset.y[start:start + batch_size]))
    return correct / len(dataset)


def save_state(path, state: TrainState):
    arrays = {}
    for i, a in enumerate(state.student.arrays()):
        arrays[f"student_{i}"] = a
    for i, a in enumerate(state.teacher.params.arrays()):
        arrays[f"teacher_{i}"] = a
    for i, a in enumerate(state.opt.velocity):
        arrays[f"velocity_{i}"] = a
    arrays["cost"] = state.cost.C
    arrays["p_tilde"] = state.thresholds.p_tilde
    arrays["h_tilde"] = state.thresholds.h_tilde
    meta = {
        "config": state.config.to_dict(),
        "layout": ckpt.params_layout(state.student),
        "step": state.step,
        "student_version": state.student.version,
        "teacher_version": state.teacher.params.version,
        "opt": {
            "t": state.opt.t,
            "base_lr": state.opt.base_lr,
            "total_steps": state.opt.total_steps,
            "momentum": state.opt.momentum,
            "weight_decay": state.opt.weight_decay,
        },
        "ema_decay": state.teacher.ema_decay,
        "tau": state.thresholds.tau.hex(),
        "threshold_momentum": state.thresholds.momentum,
        "cost_momentum": state.cost.momentum,
        "cost_metric_valid": state.cost.metric_valid,
        "rng": state.rng.bit_generator.state,
    }
    ckpt.save_arrays(path, arrays, meta)


def load_state(path) -> TrainState:
    arrays, meta = ckpt.load_arrays(path)
    config = TrainConfig(**meta["config"]).validate()
    n = 2 * len(meta["layout"]) + 1
    student = ckpt.params_from_layout(
        meta["layout"], [arrays[f"student_{i}"] for i in range(n)], meta["student_version"])
    teacher = ckpt.params_from_layout(
        meta["layout"], [arrays[f"teacher_{i}"] for i in range(n)], meta["teacher_version"])
    o = meta["opt"]
    opt = OptimizerState([arrays[f"velocity_{i}"].copy() for i in range(n)], o["base_lr"],
                         o["total_steps"], o["momentum"], o["weight_decay"], o["t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(
        config=config,
        student=student,
        teacher=TeacherParams(teacher, meta["ema_decay"]),
        opt=opt,
        thresholds=ThresholdState(float.fromhex(meta["tau"]), arrays["p_tilde"].copy(),
                                  arrays["h_tilde"].copy(), meta["threshold_momentum"]),
        cost=CostMatrix(arrays["cost"].copy(), meta["cost_momentum"], meta["cost_metric_valid"]),
        rng=rng,
        step=meta["step"],
    )


def train(config: TrainConfig, out_dir=None, state: TrainState | None = None,
          splits: SSLSplits | None = None, steps: int | None = None,
          checkpoint: bool = True) -> tuple[TrainState, list[MetricsRow]]:
    """Run the training loop.

    Writes ``metrics.csv`` (deterministic columns), ``timing.csv`` (per-step
    wall clock) and ``checkpoint.npz`` into ``out_dir`` when given. Rows are
    flushed at every evaluation. ``steps`` caps the number of steps run in
    this call (default: until ``total_steps``).
    """
    config.validate()
    splits = splits or build_splits(config)
    state = state or init_train_state(config, splits)
    end = config.total_steps if steps is None else min(config.total_steps, state.step + steps)
    aug = state.augment_params
    rows: list[MetricsRow] = []
    pending: list[MetricsRow] = []
    metrics_fh = timing_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fresh = state.step == 0
        mode = "w" if fresh else "a"
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), mode, newline="")
        timing_fh = open(os.path.join(out_dir, "timing.csv"), mode, newline="")
        if fresh:
            csv.writer(metrics_fh).writerow(METRIC_COLUMNS)
            csv.writer(timing_fh).writerow(["step", "seconds"])

    def flush():
        if metrics_fh is None:
            return
        mw, tw = csv.writer(metrics_fh), csv.writer(timing_fh)
        for r in pending:
            mw.writerow(r.csv_fields())
            tw.writerow([r.step, repr(r.seconds)])
        metrics_fh.flush()
        timing_fh.flush()
        pending.clear()

    try:
        while state.step < end:
            t0 = time.perf_counter()
            batch = sample_batch(splits, config.batch_size, config.uratio, state.rng, aug)
            row = train_step(state, batch, out_dir=out_dir)
            row.seconds = time.perf_counter() - t0
            if state.step % config.eval_interval == 0 or state.step == config.total_steps:
                row.train_acc = evaluate(state.teacher, splits.labeled)
                row.eval_acc = evaluate(state.teacher, splits.test)
                if config.lam > 0:
                    report = validate_metric(state.cost)
                    if not report.valid:
                        log.info("step %d: cost matrix %s", state.step, report.summary())
                pending.append(row)
                rows.append(row)
                flush()
                if out_dir is not None and checkpoint:
                    save_state(os.path.join(out_dir, "checkpoint.npz"), state)
            else:
                pending.append(row)
                rows.append(row)
        flush()
        if out_dir is not None and checkpoint:
            save_state(os.path.join(out_dir, "checkpoint.npz"), state)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    return state, rows
