"""Bag-level cross-entropy, Adam with coupled L2, staged learning rate, gradcheck."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .layers import Module
from .tensor import Tensor, backward, gather, log, mean, no_grad, record_branches, scale

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
_NO_DECAY = ("bias", "beta", "gamma", "b")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    stage_epochs: int = 100
    lr_factor: float = 0.1
    lr_min: float = 1e-6
    weight_decay: float = 1e-6
    dropout: float = 0.2
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.lr_min < self.lr0:
            out.append(f"need 0 < lr_min < lr0, got lr_min={self.lr_min}, lr0={self.lr0}")
        if not 0 < self.lr_factor < 1:
            out.append(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.stage_epochs < 1:
            out.append(f"stage_epochs must be >= 1, got {self.stage_epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.dropout < 1:
            out.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            out.append(f"eps must be > 0, got {self.eps}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def cross_entropy_bag(p_bag: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log(max(p_bag[i, y_i], 1e-12)) over the batch."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if p_bag.ndim == 1:
        from .tensor import reshape

        p_bag = reshape(p_bag, (1, -1))
    n_classes = p_bag.shape[1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"labels {labels.tolist()} out of range for {n_classes} classes")
    return scale(mean(log(gather(p_bag, labels), clamp=PROB_FLOOR)), -1.0)


def lr_at_epoch(config: TrainConfig, epoch: int) -> Optional[float]:
    """Learning rate for ``epoch``, or None once it has fallen below ``lr_min``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = config.lr0 * config.lr_factor ** (epoch // config.stage_epochs)
    # the 1e-9 relative slack keeps 1e-3 * 0.1**3 from landing just under 1e-6
    if lr < config.lr_min * (1 - 1e-9):
        return None
    return lr


def total_epochs(config: TrainConfig) -> int:
    epoch = 0
    while lr_at_epoch(config, epoch) is not None:
        epoch += config.stage_epochs
    return epoch


def decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in _NO_DECAY


def adam_step(
    params: dict[str, Tensor], state: AdamState, lr: float, config: TrainConfig
) -> AdamState:
    """Bias-corrected Adam with the L2 term folded into the gradient (weights only)."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if config.weight_decay and decays(name):
            g = g + config.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(
    net: Module,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    on_epoch: Optional[Callable[[dict], Optional[bool]]] = None,
    state: Optional[AdamState] = None,
) -> tuple[AdamState, list[dict]]:
    """Minibatch training until the learning-rate schedule terminates.

    ``on_epoch`` sees each history record and may return True to stop early.
    """
    problems = config.problems()
    if problems:
        raise ValueError("; ".join(problems))
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= net.num_classes:
        raise ValueError(f"labels reach {labels.max()} but the model has {net.num_classes} classes")

    rng = np.random.default_rng(config.seed)
    net.set_dropout(config.dropout)
    net.reseed_dropout(config.seed + 7919)
    params = dict(net.named_parameters())
    state = state or AdamState()
    history = []
    epoch = 0
    while (lr := lr_at_epoch(config, epoch)) is not None:
        net.train()
        total_loss, correct = 0.0, 0
        for b, idx in enumerate(_batches(len(images), config.batch_size, rng)):
            x = Tensor(images[idx])
            p_bag = net(x)
            loss = cross_entropy_bag(p_bag, labels[idx])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"loss diverged at epoch {epoch}, batch {b}")
            net.zero_grad()
            backward(loss)
            adam_step(params, state, lr, config)
            total_loss += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(p_bag.data, axis=1) == labels[idx]))
        record = {
            "epoch": epoch,
            "lr": lr,
            "mean_loss": total_loss / len(images),
            "train_acc": 100.0 * correct / len(images),
        }
        history.append(record)
        logger.info("epoch %d lr %.1e loss %.4f acc %.1f", epoch, lr, record["mean_loss"], record["train_acc"])
        epoch += 1
        if on_epoch is not None and on_epoch(record):
            break
    net.eval()
    return state, history


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,lr,mean_loss,train_acc\n")
        for r in history:
            fh.write(f"{r['epoch']},{r['lr']!r},{r['mean_loss']!r},{r['train_acc']!r}\n")


def predict_proba(net: Module, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(net(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out, axis=0)


@dataclass
class GradcheckReport:
    max_rel_err: float
    checked: int
    failures: list[tuple[str, tuple[int, ...], float, float]]
    tolerance: float
    refined: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_err < self.tolerance

    def summary(self) -> str:
        return (
            f"max rel err {self.max_rel_err:.3e} over {self.checked} coordinates "
            f"({self.refined} re-probed at a kink, {self.skipped} skipped); "
            f"tolerance {self.tolerance:g}: {'PASS' if self.passed else 'FAIL'}"
        )


def rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor makes tiny gradients compare absolutely."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    net: Module,
    images: np.ndarray,
    labels: Sequence[int],
    tolerance: float = 1e-4,
    n_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    min_h: float = 1e-8,
) -> GradcheckReport:
    """Central finite differences against the tape's gradients.

    Runs in eval mode (batch-norm running stats, no dropout). Every selected
    parameter tensor contributes at least one coordinate. When a +-h probe
    flips a relu mask or a max selection the coordinate straddles a kink; it
    is re-probed with a 10x smaller step, down to ``min_h``, and skipped if it
    still straddles one.
    """
    net.eval()
    params = dict(net.named_parameters())
    if names is not None:
        params = {k: params[k] for k in names}
    x = Tensor(np.asarray(images))

    def probe() -> tuple[float, list]:
        with no_grad(), record_branches() as branches:
            value = cross_entropy_bag(net(x), labels).item()
        return value, branches

    net.zero_grad()
    with record_branches() as base_branches:
        loss = cross_entropy_bag(net(x), labels)
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    coords: list[tuple[str, int]] = [(k, int(rng.integers(p.size))) for k, p in params.items()]
    sizes = np.array([p.size for p in params.values()], dtype=float)
    keys = list(params)
    while len(coords) < n_coords:
        k = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
        coords.append((k, int(rng.integers(params[k].size))))

    worst, failures, refined, skipped = 0.0, [], 0, 0
    for k, flat in coords:
        p = params[k]
        idx = np.unravel_index(flat, p.shape)
        orig = p.data[idx]
        step = h
        numeric = None
        while step >= min_h:
            p.data[idx] = orig + step
            up, up_br = probe()
            p.data[idx] = orig - step
            down, down_br = probe()
            p.data[idx] = orig
            if _same_branches(up_br, base_branches) and _same_branches(down_br, base_branches):
                numeric = (up - down) / (2 * step)
                break
            step /= 10
        if step != h:
            refined += 1
        if numeric is None:
            skipped += 1
            continue
        a = float(analytic[k][idx])
        err = rel_err(a, numeric)
        worst = max(worst, err)
        if err >= tolerance:
            failures.append((k, tuple(int(i) for i in idx), a, numeric))
    net.zero_grad()
    return GradcheckReport(worst, len(coords) - skipped, failures, tolerance, refined, skipped)
