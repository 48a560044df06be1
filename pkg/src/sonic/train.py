"""Losses, metrics, optimization, and the desk-scale training/evaluation loops.

Desk-scale defaults: 32x32 images, 200 epochs, batch 32, AdamW at lr 1e-2
with weight decay 1e-4 under a one-cycle schedule.  Segmentation optimizes
inverse-frequency-weighted cross-entropy plus soft Dice in equal weighting;
classification reads logits from the image's central patch (the task's query
location) and optimizes plain cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DiagnosticError, InvalidArgumentError
from . import gradients as gr
from . import operator as op
from . import tasks
from .gradients import LossSpec
from .operator import SonicNetwork, gelu, gelu_grad

NUM_SYNTHSHAPE_CLASSES = 6  # background + five primitives
NUM_HALLIGALLI_CLASSES = 3

# Seed-range offsets keeping train/val/eval/test sample streams disjoint.
_VAL_OFFSET = 1_000_000
_EVAL_OFFSET = 2_000_000
_WEIGHT_OFFSET = 3_000_000


@dataclass(frozen=True)
class TaskSpec:
    name: str  # "synthshape" | "halligalli"
    image_size: int = 32

    @property
    def num_classes(self) -> int:
        return NUM_SYNTHSHAPE_CLASSES if self.name == "synthshape" else NUM_HALLIGALLI_CLASSES

    @property
    def segmentation(self) -> bool:
        return self.name == "synthshape"

    def generate(self, seed: int):
        if self.name == "synthshape":
            return tasks.gen_synthshape(seed, self.image_size)
        if self.name == "halligalli":
            return tasks.gen_halligalli(seed, self.image_size)
        raise InvalidArgumentError(f"unknown task {self.name!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    schedule: str = "one-cycle"  # or "constant"
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (cross-entropy, dice)
    train_samples: int = 192
    val_samples: int = 48
    val_interval: int = 5
    modes: int = 8
    width: int = 16
    depth: int = 3
    mode_dropout: float = 0.0
    gain_normalize: bool = True
    class_weight_samples: int = 1024

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("learning rate, epochs, batch size must be positive")
        if self.schedule not in ("constant", "one-cycle"):
            raise InvalidArgumentError(f"unknown schedule {self.schedule!r}")


@dataclass
class Metrics:
    dice_per_class: tuple = ()
    mean_dice: float = 0.0
    accuracy: float = 0.0
    loss: float = 0.0


# ---------------------------------------------------------------------------
# Metrics and losses

def dice_score(pred_mask: np.ndarray, true_mask: np.ndarray, num_classes: int):
    """Per-foreground-class overlap 2|P&G|/(|P|+|G|); empty-vs-empty counts as 1."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise InvalidArgumentError("mask shapes differ")
    per_class = []
    for c in range(1, num_classes):
        p = pred_mask == c
        g = true_mask == c
        denom = p.sum() + g.sum()
        per_class.append(1.0 if denom == 0 else 2.0 * np.sum(p & g) / denom)
    return tuple(per_class), float(np.mean(per_class))


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _segmentation_loss(logits, targets, spec: LossSpec):
    """Batched weighted CE + soft-Dice loss with its exact logit gradient."""
    b, q = logits.shape[:2]
    probs = _softmax(logits, axis=1)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[:, None], 1.0, axis=1)
    weights = (np.ones(q) if spec.class_weights is None
               else np.asarray(spec.class_weights, dtype=np.float64))
    pix_w = weights[targets]  # (B, H, W)

    w_sum = pix_w.sum(axis=(-2, -1))  # per sample
    nll = -np.log(np.maximum(np.take_along_axis(probs, targets[:, None], axis=1)[:, 0],
                             1e-300))
    ce = (pix_w * nll).sum(axis=(-2, -1)) / w_sum
    d_ce = (pix_w / w_sum[:, None, None])[:, None] * (probs - onehot)

    # Soft Dice over foreground classes; a zero union (only possible for
    # binarized inputs) scores 1 to match the hard metric.
    inter = (probs * onehot)[:, 1:].sum(axis=(-2, -1))     # (B, Q-1)
    union = probs[:, 1:].sum(axis=(-2, -1)) + onehot[:, 1:].sum(axis=(-2, -1))
    safe = union > 0
    dice = np.where(safe, 2.0 * inter / np.where(safe, union, 1.0), 1.0)
    dice_loss = 1.0 - dice.mean(axis=1)
    d_probs = np.zeros_like(probs)
    n_fg = q - 1
    coef_g = np.where(safe, 2.0 / np.where(safe, union, 1.0), 0.0) / n_fg
    coef_u = np.where(safe, 2.0 * inter / np.where(safe, union, 1.0) ** 2, 0.0) / n_fg
    d_probs[:, 1:] = -(coef_g[..., None, None] * onehot[:, 1:]
                       - coef_u[..., None, None])
    d_dice = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))

    ce_w, dice_w = spec.ce_weight, spec.dice_weight
    loss = float(np.mean(ce_w * ce + dice_w * dice_loss))
    d_logits = (ce_w * d_ce + dice_w * d_dice) / b
    return loss, d_logits


def combined_loss(logits, target, weights=(1.0, 1.0), class_weights=None):
    """Single-sample weighted CE plus soft Dice; returns (loss, dL/dlogits)."""
    spec = LossSpec(kind="segmentation", ce_weight=weights[0], dice_weight=weights[1],
                    class_weights=class_weights)
    loss, d = _segmentation_loss(np.asarray(logits)[None],
                                 np.asarray(target)[None], spec)
    return loss, d[0]


def center_region(shape_hw: tuple[int, int], fraction: float) -> tuple[slice, slice]:
    h, w = shape_hw
    sh = max(1, round(fraction * h))
    sw = max(1, round(fraction * w))
    top, left = (h - sh) // 2, (w - sw) // 2
    return slice(top, top + sh), slice(left, left + sw)


def _classification_loss(logits, labels, spec: LossSpec):
    """CE on logits pooled over the central patch, with gradient."""
    b, q = logits.shape[:2]
    rows, cols = center_region(logits.shape[-2:], spec.center_fraction)
    region = logits[..., rows, cols]
    n_pix = region.shape[-2] * region.shape[-1]
    pooled = region.mean(axis=(-2, -1))  # (B, Q)
    probs = _softmax(pooled, axis=1)
    nll = -np.log(np.maximum(probs[np.arange(b), labels], 1e-300))
    loss = float(nll.mean())
    d_pooled = probs.copy()
    d_pooled[np.arange(b), labels] -= 1.0
    d_pooled /= b
    d_logits = np.zeros_like(logits)
    d_logits[..., rows, cols] = d_pooled[..., None, None] / n_pix
    return loss, d_logits


def batch_loss_with_grad(logits: np.ndarray, targets: np.ndarray, spec: LossSpec):
    if spec.kind == "segmentation":
        return _segmentation_loss(logits, targets, spec)
    if spec.kind == "classification":
        return _classification_loss(logits, targets, spec)
    raise InvalidArgumentError(f"unknown loss kind {spec.kind!r}")


def pooled_class_logits(logits: np.ndarray, fraction: float = 0.25) -> np.ndarray:
    rows, cols = center_region(logits.shape[-2:], fraction)
    return logits[..., rows, cols].mean(axis=(-2, -1))


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(param_list, grad_list, state: AdamWState, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Decoupled-weight-decay Adam update over (label, array) pairs, in place."""
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for (label, p), (_, g) in zip(param_list, grad_list):
        if label not in state.m:
            state.m[label] = np.zeros_like(g)
            state.v[label] = np.zeros_like(g)
        m = state.m[label]
        v = state.v[label]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.all(np.isfinite(update)):
            raise DiagnosticError(f"non-finite optimizer update in {label} "
                                  f"at step {state.step}")
        p -= update
        if weight_decay:
            p -= lr * weight_decay * p


def optimizer_step(net: SonicNetwork, grads: dict, state: AdamWState,
                   cfg: TrainConfig, lr: float | None = None):
    """AdamW step over all network parameters plus the direction-norm guard."""
    adamw_step(gr.param_views(net), gr.gradient_views(grads), state,
               lr if lr is not None else cfg.learning_rate, cfg.weight_decay)
    for block in net.blocks:
        norms = np.linalg.norm(block.u, axis=1)
        for m in np.nonzero(norms < 1e-6)[0]:
            if norms[m] == 0.0:
                block.u[m, 0] = 1e-6
            else:
                block.u[m] *= 1e-6 / norms[m]
    return net, state


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine ramp to max_lr over the first pct_start, cosine anneal after."""
    warm = max(1, int(total_steps * pct_start))
    if step < warm:
        t = step / warm
        low = max_lr / div_factor
        return low + (max_lr - low) * 0.5 * (1.0 - math.cos(math.pi * t))
    t = (step - warm) / max(1, total_steps - warm)
    low = max_lr / final_div_factor
    return low + (max_lr - low) * 0.5 * (1.0 + math.cos(math.pi * t))


def schedule_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return one_cycle_lr(step, total_steps, cfg.learning_rate)


# ---------------------------------------------------------------------------
# Data and evaluation

def make_split(task: TaskSpec, cfg: TrainConfig):
    base = cfg.seed * 10_000_000
    train = [task.generate(base + j) for j in range(cfg.train_samples)]
    val = [task.generate(base + _VAL_OFFSET + j) for j in range(cfg.val_samples)]
    return train, val


def estimate_class_weights(task: TaskSpec, n_samples: int = 1024, seed: int = 0) -> np.ndarray:
    """Inverse pixel-frequency weights from a freshly generated batch, mean 1."""
    counts = np.zeros(task.num_classes)
    base = seed * 10_000_000 + _WEIGHT_OFFSET
    for j in range(n_samples):
        mask = task.generate(base + j).target
        counts += np.bincount(np.asarray(mask).reshape(-1), minlength=task.num_classes)
    counts = np.maximum(counts, 1.0)
    weights = counts.sum() / (task.num_classes * counts)
    return weights / weights.mean()


def loss_spec_for(task: TaskSpec, cfg: TrainConfig,
                  class_weights: np.ndarray | None = None) -> LossSpec:
    if task.segmentation:
        return LossSpec(kind="segmentation", ce_weight=cfg.loss_weights[0],
                        dice_weight=cfg.loss_weights[1], class_weights=class_weights)
    return LossSpec(kind="classification", ce_weight=1.0, dice_weight=0.0)


def evaluate(net: SonicNetwork, samples, task: TaskSpec, spec: LossSpec,
             batch_size: int = 32) -> Metrics:
    """Mean metrics of a network over a list of samples."""
    n = len(samples)
    total_loss = 0.0
    if task.segmentation:
        dice_acc = np.zeros(task.num_classes - 1)
        pix_correct = 0
        pix_total = 0
    else:
        correct = 0
    for start in range(0, n, batch_size):
        chunk = samples[start:start + batch_size]
        xb, targets, grid = gr.prepare_batch(chunk, net.in_channels)
        logits = gr.network_logits(net, xb, grid)
        loss, _ = batch_loss_with_grad(logits, targets, spec)
        total_loss += loss * len(chunk)
        if task.segmentation:
            pred = np.argmax(logits, axis=1)
            for i in range(len(chunk)):
                per_class, _ = dice_score(pred[i], targets[i], task.num_classes)
                dice_acc += np.array(per_class)
            pix_correct += int(np.sum(pred == targets))
            pix_total += int(targets.size)
        else:
            pred = np.argmax(pooled_class_logits(logits), axis=1)
            correct += int(np.sum(pred == targets))
    if task.segmentation:
        per_class = tuple(dice_acc / n)
        return Metrics(dice_per_class=per_class, mean_dice=float(np.mean(per_class)),
                       accuracy=pix_correct / pix_total, loss=total_loss / n)
    return Metrics(dice_per_class=(), mean_dice=0.0, accuracy=correct / n,
                   loss=total_loss / n)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    score: float
    per_class: tuple = ()


def metrics_csv(records: list[EpochRecord], task: TaskSpec) -> str:
    if task.segmentation:
        names = [f"dice_{tasks.SHAPE_NAMES[c]}" for c in range(task.num_classes - 1)]
        header = "epoch,split,loss,mean_dice," + ",".join(names)
    else:
        header = "epoch,split,loss,accuracy"
    lines = [header]
    for r in records:
        row = f"{r.epoch},{r.split},{r.loss:.10g},{r.score:.10g}"
        if task.segmentation:
            per = r.per_class if r.per_class else (float("nan"),) * (task.num_classes - 1)
            row += "," + ",".join(f"{v:.10g}" for v in per)
        lines.append(row)
    return "\n".join(lines) + "\n"


def clone_network(net: SonicNetwork) -> SonicNetwork:
    return op.network_from_dict(op.network_to_dict(net))


def train(net: SonicNetwork, task: TaskSpec, cfg: TrainConfig,
          return_state: bool = False):
    """Train in place; returns (best-validation checkpoint, per-epoch records).

    With ``return_state=True`` the final optimizer state is appended for
    checkpointing.
    """
    train_set, val_set = make_split(task, cfg)
    class_weights = (estimate_class_weights(task, cfg.class_weight_samples, cfg.seed)
                     if task.segmentation else None)
    spec = loss_spec_for(task, cfg, class_weights)

    n_train = len(train_set)
    batches_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    state = AdamWState()
    records: list[EpochRecord] = []
    best_score = -np.inf
    best_net = clone_network(net)
    shuffle_rng = tasks.task_rng(cfg.seed, 0x45504F43)
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        aborted = False
        for start in range(0, n_train, cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            try:
                loss, grads = gr.loss_and_gradients(net, batch, spec)
                lr = schedule_lr(cfg, step, total_steps)
                optimizer_step(net, grads, state, cfg, lr=lr)
            except DiagnosticError:
                aborted = True
                break
            epoch_loss += loss * len(batch)
            step += 1
        if aborted:
            break
        records.append(EpochRecord(epoch=epoch, split="train",
                                   loss=epoch_loss / n_train,
                                   score=float("nan")))
        if (epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1:
            metrics = evaluate(net, val_set, task, spec, cfg.batch_size)
            score = metrics.mean_dice if task.segmentation else metrics.accuracy
            records.append(EpochRecord(epoch=epoch, split="val", loss=metrics.loss,
                                       score=score, per_class=metrics.dice_per_class))
            if score > best_score:
                best_score = score
                best_net = clone_network(net)
    if return_state:
        return best_net, records, state
    return best_net, records


# ---------------------------------------------------------------------------
# Robustness grid

def perturbation_grid() -> list[tuple[str, float]]:
    rows: list[tuple[str, float]] = [("clean", 0.0)]
    for kind in tasks.PERTURBATION_KINDS:
        rows.extend((kind, level) for level in tasks.SEVERITY_LEVELS[kind])
    return rows


def evaluate_robustness(net: SonicNetwork, task: TaskSpec, n_samples: int = 48,
                        seed: int = 0, spec: LossSpec | None = None):
    """Mean metrics per (kind, level) over fresh seeded samples."""
    spec = spec or loss_spec_for(task, TrainConfig(seed=seed))
    base = seed * 10_000_000 + _EVAL_OFFSET
    clean = [task.generate(base + j) for j in range(n_samples)]
    rows = []
    for kind, level in perturbation_grid():
        if kind == "clean":
            samples = clean
        else:
            p = tasks.Perturbation(kind, level)
            samples = [tasks.apply_perturbation(s, p, seed=base + j)
                       for j, s in enumerate(clean)]
        rows.append((kind, level, evaluate(net, samples, task, spec)))
    return rows


def robustness_csv(rows, task: TaskSpec) -> str:
    header = "kind,level,metric,loss"
    lines = [header]
    for kind, level, metrics in rows:
        score = metrics.mean_dice if task.segmentation else metrics.accuracy
        lines.append(f"{kind},{level:.10g},{score:.10g},{metrics.loss:.10g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Matched-budget local-convolution baseline (HalliGalli failure-mode control)

@dataclass
class ConvBaseline:
    """Stack of circular 3x3 channel-mixing convolutions with a pointwise head."""

    kernels: list[np.ndarray]  # each (C_out, C_in, 3, 3)
    head: np.ndarray           # (num_classes, width)

    def param_count(self) -> int:
        return int(sum(k.size for k in self.kernels) + self.head.size)


def matched_conv_width(target_params: int, depth: int, in_channels: int,
                       num_classes: int) -> int:
    """Width whose parameter budget lands nearest the target."""
    best_w, best_gap = 1, float("inf")
    for w in range(1, 257):
        n = 9 * in_channels * w + 9 * w * w * (depth - 1) + num_classes * w
        gap = abs(n - target_params)
        if gap < best_gap:
            best_w, best_gap = w, gap
    return best_w


def build_conv_baseline(rng: np.random.Generator, in_channels: int, num_classes: int,
                        width: int, depth: int = 4) -> ConvBaseline:
    kernels = []
    for i in range(depth):
        c_in = in_channels if i == 0 else width
        kernels.append(rng.standard_normal((width, c_in, 3, 3)) / np.sqrt(9 * c_in))
    head = rng.standard_normal((num_classes, width)) / np.sqrt(width)
    return ConvBaseline(kernels=kernels, head=head)


def _conv3x3_circular(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = None
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted = np.roll(x, shift=(-dy, -dx), axis=(-2, -1))
            term = np.einsum("oc,bchw->bohw", w[:, :, dy + 1, dx + 1], shifted)
            out = term if out is None else out + term
    return out


def conv_forward_cached(model: ConvBaseline, xb: np.ndarray):
    acts = [xb]
    pres = []
    cur = xb
    for w in model.kernels:
        pre = _conv3x3_circular(cur, w)
        pres.append(pre)
        cur = gelu(pre)
        acts.append(cur)
    logits = np.einsum("ok,bkhw->bohw", model.head, cur)
    return logits, acts, pres


def conv_loss_and_gradients(model: ConvBaseline, batch, spec: LossSpec):
    in_channels = model.kernels[0].shape[1]
    xb, targets, _ = gr.prepare_batch(batch, in_channels)
    logits, acts, pres = conv_forward_cached(model, xb)
    loss, d_logits = batch_loss_with_grad(logits, targets, spec)
    d_head = np.einsum("bohw,bkhw->ok", d_logits, acts[-1])
    d_cur = np.einsum("ok,bohw->bkhw", model.head, d_logits)
    d_kernels = []
    for i in range(len(model.kernels) - 1, -1, -1):
        d_pre = d_cur * gelu_grad(pres[i])
        w = model.kernels[i]
        d_w = np.zeros_like(w)
        x_in = acts[i]
        d_x = np.zeros_like(x_in)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                shifted = np.roll(x_in, shift=(-dy, -dx), axis=(-2, -1))
                d_w[:, :, dy + 1, dx + 1] = np.einsum("bohw,bchw->oc", d_pre, shifted)
                d_x += np.einsum("oc,bohw->bchw", w[:, :, dy + 1, dx + 1],
                                 np.roll(d_pre, shift=(dy, dx), axis=(-2, -1)))
        d_kernels.append(d_w)
        d_cur = d_x
    d_kernels.reverse()
    return loss, {"kernels": d_kernels, "head": d_head}


def conv_param_list(model: ConvBaseline):
    out = [(f"kernels[{i}]", k) for i, k in enumerate(model.kernels)]
    out.append(("head", model.head))
    return out


def conv_grad_list(grads: dict):
    out = [(f"kernels[{i}]", g) for i, g in enumerate(grads["kernels"])]
    out.append(("head", grads["head"]))
    return out


def conv_evaluate_accuracy(model: ConvBaseline, samples, batch_size: int = 32) -> float:
    in_channels = model.kernels[0].shape[1]
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        xb, targets, _ = gr.prepare_batch(chunk, in_channels)
        logits, _, _ = conv_forward_cached(model, xb)
        pred = np.argmax(pooled_class_logits(logits), axis=1)
        correct += int(np.sum(pred == targets))
    return correct / len(samples)


def train_conv_baseline(model: ConvBaseline, task: TaskSpec, cfg: TrainConfig):
    """Same data, loss, optimizer, and schedule as the spectral network."""
    train_set, val_set = make_split(task, cfg)
    spec = loss_spec_for(task, cfg)
    n_train = len(train_set)
    batches_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    state = AdamWState()
    best_acc = -np.inf
    shuffle_rng = tasks.task_rng(cfg.seed, 0x45504F43)
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            loss, grads = conv_loss_and_gradients(model, batch, spec)
            lr = schedule_lr(cfg, step, total_steps)
            adamw_step(conv_param_list(model), conv_grad_list(grads), state, lr,
                       cfg.weight_decay)
            step += 1
        if (epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1:
            best_acc = max(best_acc, conv_evaluate_accuracy(model, val_set,
                                                            cfg.batch_size))
    return model, float(best_acc)
