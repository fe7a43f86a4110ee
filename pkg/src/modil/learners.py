"""Training strategies for class-incremental modulation recognition.

All five strategies share one backbone and one training loop; they differ in
what data a task trains on, which loss is minimized and how predictions are
made:

* ``finetune``  trains on the current task only (the conventional model).
* ``joint``     trains on every seen class's full training data (upper bound).
* ``icarl``     replays herded exemplars, adds logit distillation, predicts by
                nearest mean of exemplars.
* ``bic``       replays random exemplars with distillation, then fits a
                two-parameter affine correction of the newest classes' logits
                on a small balanced held-out split.
* ``lucir``     cosine-normalized head, feature-space less-forget term and a
                margin ranking loss on old-class exemplars.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import minimize

from .backbone import CHANNELS, Backbone, build_backbone
from .memory import ExemplarMemory, nme_classify
from .numerics import (SGD, NonFiniteError, normalize_rows, normalize_rows_backward, kd_loss,
                       log_softmax, softmax_cross_entropy)

log = logging.getLogger(__name__)

STRATEGIES = ("finetune", "joint", "icarl", "bic", "lucir")
IL_STRATEGIES = ("icarl", "bic", "lucir")
DEFAULT_POLICY = {"icarl": "herding", "bic": "random", "lucir": "random"}


@dataclass
class LearnerConfig:
    strategy: str = "finetune"
    epochs_per_task: int = 30
    batch_size: int = 64
    lr: float = 0.01
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 0.0
    temperature: float = 2.0
    val_fraction: float = 0.1
    lambda_base: float = 5.0
    margin: float = 0.5
    hard_negatives: int = 2
    cosine_scale: float = 10.0
    icarl_nme: bool = True
    joint_from_scratch: bool = False
    budget: int = 2000
    memory_policy: str = "auto"
    length: int = 256
    feature_dim: int = 128
    channels: tuple[int, ...] = CHANNELS
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("epochs_per_task", "batch_size", "lr", "temperature", "feature_dim", "length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must be in (0, 0.5]")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def policy(self) -> str:
        if self.memory_policy != "auto":
            return self.memory_policy
        return DEFAULT_POLICY.get(self.strategy, "random")

    @property
    def head_kind(self) -> str:
        return "cosine" if self.strategy == "lucir" else "linear"

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for m in self.lr_milestones:
            if epoch >= int(m * self.epochs_per_task):
                lr *= self.lr_factor
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TrainingDivergedError(RuntimeError):
    pass


class ClassOverlapError(ValueError):
    pass


class DataHandle:
    """Read access to a dataset's training frames that records every index read.

    Tests use the record to prove which frames a strategy touched.
    """

    def __init__(self, samples: np.ndarray, labels: np.ndarray, split: np.ndarray | None = None):
        self.samples = samples
        self.labels = labels
        self.split = split
        self.touched: set[int] = set()
        self.log: list[tuple[int, np.ndarray]] = []
        self.task = -1

    def get(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        if self.split is not None and np.any(self.split[idx] != 0):
            raise ValueError("training access to test-split frames")
        self.touched.update(idx.tolist())
        self.log.append((self.task, idx))
        return self.samples[idx], self.labels[idx]


@dataclass
class BiasStage:
    start: int  # first head index of the stage's classes
    stop: int
    alpha: float = 1.0
    beta: float = 0.0


@dataclass
class LearnerState:
    cfg: LearnerConfig
    model: Backbone
    memory: ExemplarMemory | None = None
    teacher: Backbone | None = None
    seen: list[int] = field(default_factory=list)  # head index -> dataset label
    bias_stages: list[BiasStage] = field(default_factory=list)
    history: list[np.ndarray] = field(default_factory=list)  # joint only: train indices per task
    tasks_done: int = 0

    @property
    def n_seen(self) -> int:
        return len(self.seen)


def new_state(cfg: LearnerConfig) -> LearnerState:
    model = build_backbone(cfg.length, cfg.feature_dim, cfg.head_kind, cfg.seed, cfg.channels,
                           cfg.cosine_scale)
    memory = ExemplarMemory(cfg.budget, cfg.policy, cfg.seed) if cfg.strategy in IL_STRATEGIES else None
    return LearnerState(cfg, model, memory)


# ---------------------------------------------------------------------------
# losses


def icarl_loss(logits, labels, teacher_logits, n_old: int, n_new: int, temperature: float = 2.0,
               ce_weight: float = 1.0):
    """Cross entropy over all classes plus ``lambda * KD`` on old-class logits.

    ``lambda = n_old / (n_old + n_new)``. Returns ``(loss, dlogits)``.
    """
    loss, grad = softmax_cross_entropy(logits, labels)
    loss *= ce_weight
    if ce_weight != 1.0:
        grad = grad * ce_weight
    if n_old == 0 or teacher_logits is None:
        return loss, grad
    if teacher_logits.shape[1] < n_old:
        raise ValueError(f"teacher head has {teacher_logits.shape[1]} outputs, need {n_old}")
    lam = n_old / (n_old + n_new)
    kd, kd_grad = kd_loss(logits[:, :n_old], teacher_logits[:, :n_old], temperature)
    grad = grad.copy()
    grad[:, :n_old] += lam * kd_grad
    return loss + lam * kd, grad


def bic_loss(logits, labels, teacher_logits, n_old: int, n_new: int, temperature: float = 2.0):
    """``(1 - lambda) * CE + lambda * KD`` with ``lambda = n_old / (n_old + n_new)``."""
    if n_old == 0 or teacher_logits is None:
        return softmax_cross_entropy(logits, labels)
    lam = n_old / (n_old + n_new)
    return icarl_loss(logits, labels, teacher_logits, n_old, n_new, temperature, ce_weight=1.0 - lam)


def lucir_loss(cosines, scale, features, labels, teacher_features, n_old: int, n_new: int,
               lambda_base: float = 5.0, margin: float = 0.5, k: int = 2):
    """Cross entropy on scaled cosines + less-forget + margin ranking.

    Returns ``(loss, dlogits, dcosines, dfeatures)`` where ``dlogits`` is the
    gradient w.r.t. ``scale * cosines`` and ``dcosines`` the extra gradient
    w.r.t. the raw cosines (margin term only).
    """
    logits = scale * cosines
    loss, dlogits = softmax_cross_entropy(logits, labels)
    b = len(labels)
    dcos = np.zeros_like(cosines)
    dfeat = np.zeros_like(features)
    if n_old == 0 or teacher_features is None:
        return loss, dlogits, dcos, dfeat

    lam = lambda_base * np.sqrt(n_old / n_new)
    fs, fs_norm = normalize_rows(features)
    ft, _ = normalize_rows(teacher_features)
    agree = (fs * ft).sum(axis=1)
    loss += lam * float(np.mean(1.0 - agree))
    dfeat += normalize_rows_backward(-lam / b * ft, fs, fs_norm)

    old = np.flatnonzero(labels < n_old)
    if len(old) and cosines.shape[1] > n_old:
        kk = min(k, cosines.shape[1] - n_old)
        novel = cosines[old, n_old:]
        top = np.argsort(-novel, axis=1, kind="stable")[:, :kk] + n_old
        gt = cosines[old, labels[old]]
        for j in range(kk):
            hinge = margin - gt + cosines[old, top[:, j]]
            active = hinge > 0
            loss += float(hinge[active].sum()) / b
            rows = old[active]
            np.add.at(dcos, (rows, labels[rows]), -1.0 / b)
            np.add.at(dcos, (rows, top[active, j]), 1.0 / b)
    return loss, dlogits, dcos, dfeat


def apply_bias(logits: np.ndarray, stages: list[BiasStage]) -> np.ndarray:
    out = logits.copy()
    for s in stages:
        out[:, s.start:s.stop] = s.alpha * logits[:, s.start:s.stop] + s.beta
    return out


def bias_scale(n_classes: int, stages: list[BiasStage], dtype=np.float32) -> np.ndarray:
    scale = np.ones(n_classes, dtype=dtype)
    for s in stages:
        scale[s.start:s.stop] = s.alpha
    return scale


def _bias_objective(params, logits, labels, start, stop):
    alpha, beta = params
    z = logits.copy()
    z[:, start:stop] = alpha * logits[:, start:stop] + beta
    logp = log_softmax(z)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    g /= n
    d_alpha = float((g[:, start:stop] * logits[:, start:stop]).sum())
    d_beta = float(g[:, start:stop].sum())
    return float(loss), np.array([d_alpha, d_beta])


def fit_bias(logits: np.ndarray, labels: np.ndarray, start: int, stop: int) -> tuple[float, float]:
    """Fit ``alpha, beta`` for logits ``start:stop`` by minimizing validation CE.

    Everything else stays fixed. Starts at the identity and never returns a
    worse objective than the identity. ``alpha`` is kept positive so the
    correction cannot reverse the order of the new classes' logits.
    """
    if len(labels) == 0:
        raise ValueError("bias correction needs a non-empty validation split")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    x0 = np.array([1.0, 0.0])
    f0, _ = _bias_objective(x0, logits, labels, start, stop)
    res = minimize(_bias_objective, x0, args=(logits, labels, start, stop), jac=True, method="L-BFGS-B",
                   bounds=[(1e-3, None), (None, None)])
    if not np.all(np.isfinite(res.x)) or res.fun > f0:
        return 1.0, 0.0
    return float(res.x[0]), float(res.x[1])


# ---------------------------------------------------------------------------
# training


def _check_finite(loss: float, task: int, epoch: int, strategy: str):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"{strategy}: non-finite loss at task {task} epoch {epoch}")


def _fit(state: LearnerState, x: np.ndarray, y: np.ndarray, n_old: int, n_new: int,
         teacher_stages: list[BiasStage] | None = None) -> list[float]:
    cfg = state.cfg
    model, teacher = state.model, state.teacher
    opt = SGD(model.all_layers, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip or None)
    rng = np.random.default_rng([cfg.seed, 104729, state.tasks_done])
    use_teacher = teacher is not None and n_old > 0 and cfg.strategy in IL_STRATEGIES
    student_stages = state.bias_stages if cfg.strategy == "bic" else []
    history = []
    for epoch in range(cfg.epochs_per_task):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            xb, yb = x[b], y[b]
            model.zero_grad()
            raw = model.forward(xb, train=True)
            t_logits = t_feats = None
            if use_teacher:
                t_raw = teacher.forward(xb)
                t_feats = teacher.last_features
                t_logits = apply_bias(t_raw, teacher_stages) if teacher_stages else t_raw
            if cfg.strategy == "lucir":
                loss, dlogits, dcos, dfeat = lucir_loss(
                    model.head.last_cosines, model.head.scale, model.last_features, yb,
                    t_feats, n_old, n_new, cfg.lambda_base, cfg.margin, cfg.hard_negatives)
                model.backward(dlogits, dfeat, dcos)
            else:
                logits = apply_bias(raw, student_stages) if student_stages else raw
                if cfg.strategy == "icarl":
                    loss, dlogits = icarl_loss(logits, yb, t_logits, n_old, n_new, cfg.temperature)
                elif cfg.strategy == "bic":
                    loss, dlogits = bic_loss(logits, yb, t_logits, n_old, n_new, cfg.temperature)
                else:
                    loss, dlogits = softmax_cross_entropy(logits, yb)
                if student_stages:
                    dlogits = dlogits * bias_scale(dlogits.shape[1], student_stages, dlogits.dtype)
                model.backward(dlogits.astype(model.dtype, copy=False))
            _check_finite(loss, state.tasks_done, epoch, cfg.strategy)
            try:
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"{cfg.strategy} task {state.tasks_done} epoch {epoch}: {exc}") from exc
            total += loss * len(b)
        history.append(total / max(len(y), 1))
        log.debug("%s task=%d epoch=%d loss=%.4f", cfg.strategy, state.tasks_done, epoch, history[-1])
    return history


def _split_val(rng, y: np.ndarray, per_class: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``per_class`` samples of every class present in ``y``."""
    val = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        val.extend(rng.permutation(members)[:per_class].tolist())
    val = np.sort(np.asarray(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


def train_task(state: LearnerState, handle: DataHandle, task_classes, class_indices: dict[int, np.ndarray]) -> LearnerState:
    """Learn one new group of classes.

    ``task_classes`` are dataset labels, ``class_indices`` maps each of them to
    its training frame indices in ``handle``. Old-class frames are never read
    through the handle except by the joint strategy.
    """
    cfg = state.cfg
    task_classes = [int(c) for c in task_classes]
    overlap = set(task_classes) & set(state.seen)
    if overlap:
        raise ClassOverlapError(f"classes already seen: {sorted(overlap)}")
    handle.task = state.tasks_done

    n_old = state.n_seen
    n_new = len(task_classes)
    head_of = {c: n_old + i for i, c in enumerate(task_classes)}
    new_idx = np.concatenate([np.asarray(class_indices[c], dtype=np.int64) for c in task_classes])
    x_new, labels_new = handle.get(new_idx)
    y_new = np.array([head_of[int(c)] for c in labels_new], dtype=np.int64)

    state.model.expand_head(n_new)
    state.seen.extend(task_classes)

    if cfg.strategy == "finetune":
        _fit(state, x_new, y_new, n_old, n_new)
    elif cfg.strategy == "joint":
        state.history.append(new_idx)
        if cfg.joint_from_scratch and n_old:
            fresh = build_backbone(cfg.length, cfg.feature_dim, cfg.head_kind, cfg.seed, cfg.channels)
            fresh.expand_head(state.n_seen)
            state.model = fresh
        all_idx = np.concatenate(state.history)
        x_all, labels_all = handle.get(all_idx)
        head = {c: i for i, c in enumerate(state.seen)}
        y_all = np.array([head[int(c)] for c in labels_all], dtype=np.int64)
        _fit(state, x_all, y_all, n_old, n_new)
    else:
        x_mem, y_mem = state.memory.data() if len(state.memory) else (None, None)
        if x_mem is not None:
            x = np.concatenate([x_new, x_mem])
            y = np.concatenate([y_new, y_mem])
        else:
            x, y = x_new, y_new
        if cfg.strategy == "bic" and n_old > 0:
            _train_bic(state, x, y, n_old, n_new)
        else:
            _fit(state, x, y, n_old, n_new, state.bias_stages if cfg.strategy == "bic" else None)
        new_frames = {head_of[c]: (x_new[labels_new == c], new_idx[labels_new == c]) for c in task_classes}
        state.memory.rebalance(new_frames, state.model.extract, state.n_seen)

    if cfg.strategy in IL_STRATEGIES:
        state.teacher = state.model.clone_frozen()
    state.tasks_done += 1
    return state


def _train_bic(state: LearnerState, x, y, n_old, n_new):
    cfg = state.cfg
    rng = np.random.default_rng([cfg.seed, 130363, state.tasks_done])
    smallest_old = min(state.memory.count(c) for c in range(n_old))
    per_class = max(1, int(round(cfg.val_fraction * smallest_old)))
    tr, val = _split_val(rng, y, per_class)
    teacher_stages = list(state.bias_stages)
    _fit(state, x[tr], y[tr], n_old, n_new, teacher_stages)
    stage = BiasStage(n_old, n_old + n_new)
    logits = apply_bias(state.model.predict_logits(x[val]), state.bias_stages)
    stage.alpha, stage.beta = fit_bias(logits, y[val], stage.start, stage.stop)
    state.bias_stages.append(stage)
    log.info("bic task=%d alpha=%.4f beta=%.4f val=%d", state.tasks_done, stage.alpha, stage.beta, len(val))


def predict_heads(state: LearnerState, x: np.ndarray) -> np.ndarray:
    if state.n_seen == 0:
        raise RuntimeError("predict called before any task was trained")
    cfg = state.cfg
    if cfg.strategy == "icarl" and cfg.icarl_nme and state.memory is not None and len(state.memory):
        return nme_classify(state.memory, state.model, x)
    logits = state.model.predict_logits(x)
    if cfg.strategy == "bic" and state.bias_stages:
        logits = apply_bias(logits, state.bias_stages)
    return logits.argmax(axis=1)


def predict(state: LearnerState, x: np.ndarray) -> np.ndarray:
    """Dataset labels predicted for frames ``x``."""
    return np.asarray(state.seen)[predict_heads(state, x)]
