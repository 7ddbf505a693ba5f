"""Sequential training orchestration.

Per task the stages run in a fixed order: (1) train the replay generator
on the current task, (2) generate class-balanced samples into the
buffer, (3) estimate the Fisher diagonal on current-task data, (4) train
the classifier on real+replay batches under the consolidation penalty
(anchors from *earlier* tasks only), (5) anchor the post-task parameters
together with stage (3)'s Fisher. Baselines skip stages: finetune keeps
only (4) without penalty, ewc_only drops replay, ddpm_only drops the
penalty, and joint trains once on the union of all tasks.
"""

import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import ddpm as diffusion
from . import metrics as cl_metrics
from . import nn
from .bound_diagnostics import (BoundTerms, estimate_kl, features_with_labels,
                                fisher_drift, pinsker_gap_check)
from .errors import ConfigError, ContractError, TrainingError
from .ewc import AnchorSet, estimate_fisher, ewc_gradient, ewc_penalty, rebase_anchor
from .replay_buffer import ReplayBuffer
from .task_stream import union_dataset
from .vit_classifier import (ViTClassifier, ViTConfig, accuracy, scores_and_rows)

METHODS = ("full", "ewc_only", "ddpm_only", "finetune", "joint")

REPLAY_METHODS = ("full", "ddpm_only")
EWC_METHODS = ("full", "ewc_only")


def _rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]))


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.name not in ("adamw", "adam"):
            raise ConfigError(f"unsupported optimizer {self.name!r}")

    def build(self, model):
        wd = self.weight_decay if self.name == "adamw" else 0.0
        return nn.AdamW(model, lr=self.lr, weight_decay=wd, betas=self.betas)


@dataclass
class TrainConfig:
    method: str = "full"
    lam: float = 100.0
    replay_ratio: tuple = (1, 1)
    samples_per_task: int = 256
    epochs_classifier: int = 12
    epochs_ddpm: int = 30
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ddpm_lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    replay_budget_mb: float = 100.0
    fisher_samples_per_class: int = 500
    anchor_mode: str = "sum_over_tasks"
    measure_fwt: bool = False
    generator_mode: str = "per_task"
    # brief head-only warmup at task start: new zero-init rows must first
    # pick up the within-task direction or joint training can stall on the
    # uniform-over-new-classes plateau
    head_warmup_epochs: int = 5
    head_warmup_lr: float = 1e-2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        self.replay_ratio = tuple(int(v) for v in self.replay_ratio)
        if len(self.replay_ratio) != 2 or self.replay_ratio[0] < 1 or self.replay_ratio[1] < 0:
            raise ConfigError("replay_ratio must be (real, replay) with real >= 1")
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        # forced degeneracies per method
        if self.method in ("ddpm_only", "finetune", "joint"):
            self.lam = 0.0

    @property
    def uses_replay(self):
        return self.method in REPLAY_METHODS

    @property
    def uses_ewc(self):
        return self.method in EWC_METHODS

    @property
    def budget_bytes(self):
        if self.replay_budget_mb is None:
            return None
        return int(self.replay_budget_mb * 2 ** 20)


@dataclass
class DdpmOptions:
    schedule: str = "cosine"
    timesteps: int = 200
    channels: tuple = (16, 32)
    emb_dim: int = 64
    time_dim: int = 32
    batch_size: int = 64

    def __post_init__(self):
        self.channels = tuple(self.channels)


@dataclass
class DiagnosticsConfig:
    enabled: bool = True
    knn_k: int = 5
    kl_samples: int = 256
    pinsker_loss_max: float = 6.0


@dataclass
class RunRecord:
    seed: int
    config: dict
    accuracy_matrix: cl_metrics.AccuracyMatrix
    loss_traces: dict = field(default_factory=dict)
    ddpm_traces: dict = field(default_factory=dict)
    fisher_summaries: list = field(default_factory=list)
    auc_per_step: list = field(default_factory=list)
    bound_terms: list = field(default_factory=list)
    pinsker_checks: list = field(default_factory=list)
    random_baseline: list = None
    buffer_summary: dict = None
    metrics: dict = None
    timings: dict = field(default_factory=dict)

    def to_json_dict(self):
        """Deterministic payload; wall-clock timings live in a sidecar."""
        return {
            "seed": self.seed,
            "config": self.config,
            "accuracy_matrix": self.accuracy_matrix.to_lists(),
            "loss_traces": {str(k): v for k, v in self.loss_traces.items()},
            "ddpm_traces": {str(k): v for k, v in self.ddpm_traces.items()},
            "fisher_summaries": self.fisher_summaries,
            "auc_per_step": self.auc_per_step,
            "bound_terms": [t.row() for t in self.bound_terms],
            "pinsker_checks": self.pinsker_checks,
            "random_baseline": self.random_baseline,
            "buffer_summary": self.buffer_summary,
            "metrics": self.metrics,
        }


@dataclass
class RunResult:
    record: RunRecord
    model: ViTClassifier
    buffer: ReplayBuffer
    registry: diffusion.GeneratorRegistry
    anchors: AnchorSet


def balanced_labels(classes, n):
    """n labels spread over classes, counts differing by at most one."""
    classes = sorted(classes)
    base, extra = divmod(n, len(classes))
    counts = [base + (1 if i < extra else 0) for i in range(len(classes))]
    return np.concatenate([np.full(k, c, dtype=np.int64) for c, k in zip(classes, counts)])


def make_mixed_batches(real, buffer, batch_size, ratio, rng):
    """Batches mixing real data with replay draws at the requested ratio.

    One pass covers the real split once; replay items are drawn from the
    buffer per batch. With an empty (or absent) buffer every batch is
    all-real at full batch size. The final partial batch keeps the ratio.
    """
    r, s = ratio
    use_replay = buffer is not None and len(buffer) > 0 and s > 0
    perm = rng.permutation(len(real))
    if not use_replay:
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            yield real.images[idx], real.labels[idx]
        return
    n_real = int(round(batch_size * r / (r + s)))
    n_real = min(max(n_real, 1), batch_size)
    for start in range(0, len(perm), n_real):
        idx = perm[start:start + n_real]
        if len(idx) == n_real:
            k_replay = batch_size - n_real
        else:
            k_replay = int(round(len(idx) * s / r))
        if k_replay > 0:
            rimg, rlab = buffer.sample_balanced(k_replay, rng)
            yield (np.concatenate([real.images[idx], rimg]),
                   np.concatenate([real.labels[idx], rlab]))
        else:
            yield real.images[idx], real.labels[idx]


def _mask_grads_to_rows(model, rows):
    """Keep only the gradient of the given head rows; zero everything else."""
    keep = np.zeros(model.head_out.shape[0], dtype=bool)
    keep[rows] = True
    for name, grad in model.named_grads():
        if name == "head_out":
            grad[~keep] = 0.0
        else:
            grad[...] = 0.0


def _train_classifier(model, task, buffer, anchors, config, trace_out):
    """Stage 4: minimize classification loss + lambda * penalty."""
    use_pen = config.uses_ewc and len(anchors) > 0
    replay_buffer = buffer if config.uses_replay else None

    # warm up the current task's head rows only: fresh zero rows need a
    # usable within-task direction before full training, and rows of
    # earlier classes stay untouched until the penalized main loop
    if config.head_warmup_epochs > 0:
        task_rows = model.rows_for(sorted(task.class_set))
        warm_opt = nn.AdamW(model, lr=config.head_warmup_lr, weight_decay=0.0)
        for epoch in range(config.head_warmup_epochs):
            rng = _rng(config.seed, 808, task.task_id, epoch)
            for images, labels in make_mixed_batches(task.train, replay_buffer,
                                                     config.batch_size,
                                                     config.replay_ratio, rng):
                model.loss_and_grad(images, model.rows_for(labels))
                _mask_grads_to_rows(model, task_rows)
                warm_opt.step()

    opt = config.optimizer.build(model)
    best_val, best_params = -1.0, None
    for epoch in range(config.epochs_classifier):
        rng = _rng(config.seed, 811, task.task_id, epoch)
        cls_sum = pen_sum = tot_sum = 0.0
        steps = 0
        for images, labels in make_mixed_batches(task.train, replay_buffer,
                                                 config.batch_size, config.replay_ratio, rng):
            rows = model.rows_for(labels)
            loss, _ = model.loss_and_grad(images, rows)
            if not np.isfinite(loss):
                raise TrainingError("classifier loss diverged", stage="classifier",
                                    epoch=epoch)
            if use_pen:
                theta = model.flat_params()
                pen = ewc_penalty(theta, anchors)
                opt.step(extra_grad=config.lam * ewc_gradient(theta, anchors))
            else:
                pen = 0.0
                opt.step()
            cls_sum += loss
            pen_sum += pen
            tot_sum += loss + config.lam * pen
            steps += 1
        val_acc = accuracy(model, task.val)
        trace_out.append({
            "epoch": epoch,
            "cls_loss": cls_sum / steps,
            "penalty": pen_sum / steps,
            "lambda": config.lam,
            "total_loss": tot_sum / steps,
            "val_acc": val_acc,
        })
        # >= so ties keep the latest epoch: warmup often saturates the
        # current-task val immediately and consolidation happens after
        if val_acc >= best_val:
            best_val, best_params = val_acc, model.flat_params()
    if best_params is not None:
        model.set_flat_params(best_params)


def _make_denoiser(stream, config, ddpm_opts, task_id):
    image_size = stream.tasks[0].train.image_shape
    max_class = max(max(t.class_set) for t in stream.tasks)
    conditioning = ("class_plus_task_film" if config.generator_mode == "unified"
                    else "class_only")
    cfg = diffusion.DenoiserConfig(
        image_size=image_size,
        num_classes=max_class + 1,
        num_tasks=len(stream),
        channels=ddpm_opts.channels,
        emb_dim=ddpm_opts.emb_dim,
        conditioning=conditioning,
        time_dim=ddpm_opts.time_dim,
    )
    return diffusion.Denoiser(cfg, seed=int(_rng(config.seed, 301, task_id).integers(2 ** 31)))


def _buffer_as_training_set(buffer):
    from .task_stream import LabeledDataset
    images = np.stack([it.image for it in buffer.items])
    labels = np.asarray([it.label for it in buffer.items], dtype=np.int64)
    task_ids = np.asarray([it.task_id for it in buffer.items], dtype=np.int64)
    ds = LabeledDataset(images, labels, sorted(set(labels.tolist())), "train")
    return ds, task_ids


def run_task(k, stream, model, registry, buffer, anchors, config, ddpm_opts,
             schedule, record):
    """Stages 1-5 for task k; mutates model/registry/buffer/anchors."""
    if config.method == "joint":
        raise ContractError("joint training does not run per-task stages")
    task = stream.tasks[k - 1]
    timings = {}

    model.ensure_classes(sorted(task.class_set))
    if config.measure_fwt and k >= 2:
        record.accuracy_matrix.set(k, k - 1, accuracy(model, task.test))

    # (1) replay generator on current-task data
    if config.uses_replay:
        t0 = time.perf_counter()
        if config.generator_mode == "per_task":
            gen = _make_denoiser(stream, config, ddpm_opts, k)
            gen, trace = diffusion.train_generator(
                gen, task.train, schedule, config.epochs_ddpm,
                opt_params={"lr": config.ddpm_lr}, seed=int(_rng(config.seed, 311, k).integers(2 ** 31)),
                batch_size=ddpm_opts.batch_size)
        else:
            gen = registry.unified or _make_denoiser(stream, config, ddpm_opts, 0)
            if len(buffer) > 0:
                replay_ds, replay_tids = _buffer_as_training_set(buffer)
                mixed = union_dataset([task.train, replay_ds], "train")
                tids = np.concatenate([np.full(len(task.train), k, dtype=np.int64), replay_tids])
            else:
                mixed, tids = task.train, np.full(len(task.train), k, dtype=np.int64)
            gen, trace = diffusion.train_generator(
                gen, mixed, schedule, config.epochs_ddpm,
                opt_params={"lr": config.ddpm_lr}, seed=int(_rng(config.seed, 311, k).integers(2 ** 31)),
                batch_size=ddpm_opts.batch_size, task_id=tids)
        registry.store(k, gen)
        record.ddpm_traces[k] = trace
        timings["ddpm_train"] = time.perf_counter() - t0

        # (2) generate class-balanced samples into the buffer
        t0 = time.perf_counter()
        labels = balanced_labels(task.class_set, config.samples_per_task)
        task_ids = np.full(len(labels), k, dtype=np.int64) \
            if config.generator_mode == "unified" else None
        samples = diffusion.sample(gen, labels, schedule, _rng(config.seed, 401, k),
                                   task_ids=task_ids)
        buffer.add_task_samples(samples, labels, k)
        timings["generate"] = time.perf_counter() - t0

    # (3)+(4) classifier on mixed batches; anchors are from tasks < k only
    t0 = time.perf_counter()
    trace = []
    _train_classifier(model, task, buffer, anchors, config, trace)
    record.loss_traces[k] = trace
    timings["classifier"] = time.perf_counter() - t0

    # (5) Fisher at the anchored (post-task) parameters. Estimating it
    # before training would put zero Fisher mass below a zero-initialized
    # head (no gradient flows past zero rows), leaving early tasks
    # unprotectable; the Laplace view also wants curvature at the anchor.
    if config.uses_ewc:
        t0 = time.perf_counter()
        anchor = estimate_fisher(model, task.train, config.fisher_samples_per_class,
                                 _rng(config.seed, 501, k), task_id=k)
        anchors.add(anchor)
        record.fisher_summaries.append(anchor.summary())
        timings["fisher"] = time.perf_counter() - t0

    record.timings[f"task{k}"] = timings
    return model, registry, buffer, anchors


def _evaluate_step(model, stream, upto, record):
    t0 = time.perf_counter()
    for j in range(1, upto + 1):
        record.accuracy_matrix.set(j, upto, accuracy(model, stream.tasks[j - 1].test))
    union_test = union_dataset([stream.tasks[j - 1].test for j in range(1, upto + 1)], "test")
    scores, rows = scores_and_rows(model, union_test)
    record.auc_per_step.append(cl_metrics.macro_auc(scores[:, : model.num_classes], rows))
    record.timings.setdefault("eval", 0.0)
    record.timings["eval"] += time.perf_counter() - t0


def _per_example_ce(model, images, rows, batch_size=256):
    out = []
    for start in range(0, len(images), batch_size):
        logits = model.forward(images[start:start + batch_size])
        logp = nn.log_softmax(logits)
        idx = np.arange(logits.shape[0])
        out.append(-logp[idx, rows[start:start + batch_size]])
    return np.concatenate(out)


def _bound_diagnostics(model, stream, registry, anchors, config, ddpm_opts,
                       diag, schedule, record):
    """Per-task replay divergence, Fisher drift, and the Pinsker monitor."""
    t0 = time.perf_counter()
    _, f_per_task = cl_metrics.forgetting(record.accuracy_matrix)
    total_seen = sum(len(t.train) for t in stream.tasks)
    theta = model.flat_params()
    anchor_by_task = {a.task_id: a for a in anchors}
    for task in stream.tasks:
        j = task.task_id
        gen = registry.get(j)
        labels = balanced_labels(task.class_set, diag.kl_samples)
        task_ids = np.full(len(labels), j, dtype=np.int64) \
            if config.generator_mode == "unified" else None
        samples = diffusion.sample(gen, labels, schedule, _rng(config.seed, 601, j),
                                   task_ids=task_ids)
        real_feats = _features(model, task.test.images)
        rep_feats = _features(model, samples)
        real_rows = model.rows_for(task.test.labels)
        rep_rows = model.rows_for(labels)
        real_aug, scale = features_with_labels(real_feats, real_rows, model.num_classes)
        rep_aug, _ = features_with_labels(rep_feats, rep_rows, model.num_classes, scale=scale)
        kl = estimate_kl(real_aug, rep_aug, diag.knn_k)
        drift = None
        if j in anchor_by_task:
            drift = fisher_drift(theta, anchor_by_task[j])
        record.bound_terms.append(BoundTerms(
            task_id=j, kl_estimate=kl, drift=drift,
            observed_forgetting=float(f_per_task[j - 1]),
            replay_weight=len(labels) / total_seen))
        losses_real = _per_example_ce(model, task.test.images, real_rows)
        losses_rep = _per_example_ce(model, samples, rep_rows)
        record.pinsker_checks.append({
            "task": j,
            "holds": pinsker_gap_check(losses_real, losses_rep,
                                       diag.pinsker_loss_max, kl),
            "kl": kl,
        })
    record.timings["diagnostics"] = time.perf_counter() - t0


def _features(model, images, batch_size=256):
    feats = []
    for start in range(0, len(images), batch_size):
        feats.append(model.features(images[start:start + batch_size]))
    return np.concatenate(feats)


@dataclass
class _PlainTask:
    task_id: int
    train: object
    val: object

    @property
    def class_set(self):
        return self.train.class_set


def _run_joint(stream, config, vit_config, record):
    all_classes = sorted(stream.cumulative_classes())
    model = ViTClassifier(replace(vit_config, num_classes=len(all_classes)),
                          seed=int(_rng(config.seed, 101).integers(2 ** 31)),
                          class_ids=all_classes)
    train = union_dataset([t.train for t in stream.tasks], "train")
    val = union_dataset([t.val for t in stream.tasks], "val")
    joint_task = _PlainTask(task_id=0, train=train, val=val)
    joint = replace(config, epochs_classifier=config.epochs_classifier * len(stream))
    t0 = time.perf_counter()
    trace = []
    _train_classifier(model, joint_task, None, AnchorSet(), joint, trace)
    record.loss_traces["joint"] = trace
    record.timings["classifier"] = time.perf_counter() - t0
    _evaluate_step(model, stream, len(stream), record)
    return model


def run_sequence(stream, config, vit_config=None, ddpm_opts=None, diag=None,
                 stream_config=None):
    """Run the whole protocol on a stream; returns a RunResult."""
    K = len(stream)
    ddpm_opts = ddpm_opts or DdpmOptions()
    diag = diag or DiagnosticsConfig()
    schedule = diffusion.build_schedule(ddpm_opts.schedule, ddpm_opts.timesteps)
    image_size = stream.tasks[0].train.image_shape
    first_classes = sorted(stream.tasks[0].class_set)
    if vit_config is None:
        vit_config = ViTConfig(patch_size=4, depth=2, heads=4, hidden_dim=64,
                               mlp_dim=128, num_classes=len(first_classes),
                               image_size=image_size)
    else:
        vit_config = replace(vit_config, num_classes=len(first_classes),
                             image_size=image_size)

    record = RunRecord(seed=config.seed,
                       config=snapshot_config(config, vit_config, ddpm_opts, diag,
                                              stream_config),
                       accuracy_matrix=cl_metrics.AccuracyMatrix(K))

    if config.method == "joint":
        model = _run_joint(stream, config, vit_config, record)
        registry = diffusion.GeneratorRegistry(config.generator_mode)
        buffer = ReplayBuffer(budget_bytes=config.budget_bytes)
        anchors = AnchorSet(config.anchor_mode)
    else:
        model = ViTClassifier(vit_config, seed=int(_rng(config.seed, 101).integers(2 ** 31)),
                              class_ids=first_classes)
        registry = diffusion.GeneratorRegistry(config.generator_mode)
        buffer = ReplayBuffer(budget_bytes=config.budget_bytes)
        anchors = AnchorSet(config.anchor_mode)
        for k in range(1, K + 1):
            run_task(k, stream, model, registry, buffer, anchors, config,
                     ddpm_opts, schedule, record)
            _evaluate_step(model, stream, k, record)

    if config.measure_fwt:
        baseline = []
        for task in stream.tasks:
            rng = _rng(config.seed, 901, task.task_id)
            fresh = ViTClassifier(replace(vit_config, num_classes=model.num_classes),
                                  seed=int(rng.integers(2 ** 31)),
                                  class_ids=model.class_ids)
            # random (not zero) head rows so the baseline predicts at chance
            fresh.head_out[...] = rng.normal(0.0, 0.02, fresh.head_out.shape)
            baseline.append(accuracy(fresh, task.test))
        record.random_baseline = baseline

    if config.uses_replay and diag.enabled and config.method != "joint":
        _bound_diagnostics(model, stream, registry, anchors, config, ddpm_opts,
                           diag, schedule, record)

    record.buffer_summary = buffer.summary()
    rb = record.random_baseline if (config.measure_fwt and config.method != "joint") else None
    report = cl_metrics.build_report(record.accuracy_matrix,
                                     auc=record.auc_per_step[-1],
                                     random_baseline=rb)
    record.metrics = report.to_dict()
    return RunResult(record, model, buffer, registry, anchors)


def snapshot_config(config, vit_config, ddpm_opts, diag, stream_config=None):
    """Plain-dict snapshot of everything that defines a run."""
    snap = {
        "train": asdict(config),
        "vit": asdict(vit_config),
        "ddpm": asdict(ddpm_opts),
        "diagnostics": asdict(diag),
    }
    if stream_config is not None:
        snap["stream"] = asdict(stream_config)
    return snap
