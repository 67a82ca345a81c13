"""Desk-scale data, training with re-masking and early stopping, and the
per-scheme evaluation pipeline."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import pruning, space
from .controller import ControllerConfig, Provenance, compute_reward
from .ir import GraphNet, ModelGraph, ModelWeights, copy_weights, replace_kernel
from .latency.costmodel import CostModel, estimate
from .space import KernelChoice, PruningMethod, UnifiedScheme

FAILURE_REWARD = -1.0


class TrainingDivergence(FloatingPointError):
    pass


# -- data -------------------------------------------------------------------

@dataclass
class Split:
    x: np.ndarray   # (N, C, H, W) float32
    y: np.ndarray   # (N,) int64

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int


def synthetic_dataset(n_train: int = 2000, n_test: int = 500, num_classes: int = 10,
                      image_size: int = 16, channels: int = 3, noise: float = 3.0,
                      val_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Class prototypes (smoothed random fields) plus random shifts and noise."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(num_classes, channels, image_size, image_size))
    k = np.array([1.0, 2.0, 1.0])
    k = np.outer(k, k) / 16.0
    for _ in range(2):
        pad = np.pad(protos, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
        protos = sum(k[i, j] * pad[..., i:i + image_size, j:j + image_size]
                     for i in range(3) for j in range(3))
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)

    def draw(n):
        y = rng.integers(0, num_classes, n)
        shifts = rng.integers(-2, 3, size=(n, 2))
        x = np.stack([np.roll(protos[c], tuple(s), axis=(1, 2)) for c, s in zip(y, shifts)])
        x = x + noise * rng.normal(size=x.shape)
        return Split(x.astype(np.float32), y.astype(np.int64))

    train = draw(n_train)
    test = draw(n_test)
    train, val = carve_validation(train, val_fraction, seed)
    return Dataset(train, val, test, num_classes)


def carve_validation(train: Split, fraction: float, seed: int) -> tuple[Split, Split]:
    """Deterministic disjoint split of ``fraction`` of the training set."""
    n = len(train)
    n_val = max(1, int(round(fraction * n)))
    perm = np.random.default_rng(seed + 7919).permutation(n)
    vi, ti = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return Split(train.x[ti], train.y[ti]), Split(train.x[vi], train.y[vi])


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    momentum: float = 0.8           # Adam beta1
    batch_size: int = 64
    base_epochs: int = 30
    replace_epochs: int = 5
    finetune_epochs: int = 10
    patience: int = 3
    rho: float = 1e-3
    admm_epochs: int = 5
    final_epochs: int = 10
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "rho", "base_epochs", "replace_epochs", "finetune_epochs",
                     "admm_epochs", "final_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class EarlyStopper:
    """Stop once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0
        self.epoch = -1

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, self.epoch, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def _mask_tensors(net: GraphNet, masks) -> list:
    out = []
    for lid, pm in (masks or {}).items():
        m = pm.mask if isinstance(pm, pruning.PruningMask) else np.asarray(pm)
        p = net.mods[str(lid)].weight
        out.append((p, torch.as_tensor(m, dtype=torch.bool)))
    return out


def _apply_masks(pairs) -> None:
    with torch.no_grad():
        for p, m in pairs:
            p.masked_fill_(~m, 0.0)


def evaluate(graph: ModelGraph, weights: ModelWeights, split: Split,
             batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) in inference mode."""
    net = GraphNet(graph, weights).eval()
    return _evaluate_net(net, split, batch_size)


@torch.no_grad()
def _evaluate_net(net, split: Split, batch_size: int = 256) -> tuple[float, float]:
    net.eval()
    correct, loss = 0, 0.0
    for i in range(0, len(split), batch_size):
        x = torch.as_tensor(split.x[i:i + batch_size])
        y = torch.as_tensor(split.y[i:i + batch_size])
        logits = net(x)
        loss += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(dim=1) == y).sum())
    n = max(len(split), 1)
    return correct / n, loss / n


def train(graph: ModelGraph, weights: ModelWeights, data: Dataset, cfg: TrainConfig,
          epochs: int, masks=None, prox=None, rho: float = 0.0,
          early_stop: bool = True, seed: int | None = None) -> tuple[ModelWeights, list]:
    """Adam training; masked entries are re-zeroed after every step.

    ``prox`` maps layer id to a target array and adds
    ``rho/2 * ||W - target||^2`` to the loss (the ADMM W-step).  Returns the
    weights of the best validation epoch and the validation-loss history.
    """
    if epochs <= 0:
        return copy_weights(weights), []
    torch.set_num_threads(max(1, cfg.threads))
    seed = cfg.seed if seed is None else seed
    gen = torch.Generator().manual_seed(seed)
    net = GraphNet(graph, weights)
    pairs = _mask_tensors(net, masks)
    _apply_masks(pairs)
    prox_t = [(net.mods[str(lid)].weight, torch.as_tensor(t, dtype=torch.float32))
              for lid, t in (prox or {}).items()]
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.momentum, 0.999), weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    x_all = torch.as_tensor(data.train.x)
    y_all = torch.as_tensor(data.train.y)
    history = []
    best = net.export()
    for epoch in range(epochs):
        net.train()
        perm = torch.randperm(len(y_all), generator=gen)
        for b, i in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = perm[i:i + cfg.batch_size]
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
            if prox_t and rho > 0:
                loss = loss + 0.5 * rho * sum(((p - t) ** 2).sum() for p, t in prox_t)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            _apply_masks(pairs)
        _, vloss = _evaluate_net(net, data.val)
        history.append(vloss)
        if vloss <= min(history):
            best = net.export()
        if early_stop and stopper.update(vloss):
            break
    return best, history


def make_admm_step(graph_ref: list, data: Dataset, cfg: TrainConfig):
    """One proximal training epoch per ADMM round; ``graph_ref[0]`` is the
    graph the weights belong to."""
    counter = [0]

    def w_step(weights, targets, rho):
        counter[0] += 1
        w, _ = train(graph_ref[0], weights, data, cfg, 1, prox=targets, rho=rho,
                     early_stop=False, seed=cfg.seed + 1000 + counter[0])
        return w

    return w_step


# -- scheme evaluation ------------------------------------------------------

@dataclass
class EvalRecord:
    scheme: dict
    accuracy: float
    latency_ms: float | None
    reward: float
    sparsity: dict = field(default_factory=dict)
    wall_time: float = 0.0
    provenance: str = Provenance.MEASURED.value
    failed: bool = False
    error: str | None = None
    measured_latency_ms: float | None = None
    step: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def failure_record(scheme: UnifiedScheme, err: BaseException, started: float) -> EvalRecord:
    return EvalRecord(scheme.to_dict(), 0.0, None, FAILURE_REWARD,
                      wall_time=time.perf_counter() - started, failed=True,
                      error=f"{type(err).__name__}: {err}")


@dataclass
class EvalOutcome:
    record: EvalRecord
    graph: ModelGraph | None = None
    weights: ModelWeights | None = None
    masks: dict | None = None


def apply_replacements(scheme: UnifiedScheme, graph: ModelGraph, weights: ModelWeights):
    changed = False
    for a, layer in zip(scheme.per_layer, graph.prunable_layers()):
        if a.kernel != KernelChoice.K3x3:
            graph, weights = replace_kernel(graph, layer.id, a.kernel, weights)
            changed = True
    return graph, weights, changed


def evaluate_scheme(scheme: UnifiedScheme, base_weights: ModelWeights, graph: ModelGraph,
                    data: Dataset, cfg: TrainConfig, cost_model: CostModel,
                    ctrl_cfg: ControllerConfig | None = None) -> EvalOutcome:
    """Replace kernels, fine-tune, prune, fine-tune, then score accuracy,
    modelled latency and reward.  Any failure yields the -1 sentinel."""
    ctrl_cfg = ctrl_cfg or ControllerConfig()
    started = time.perf_counter()
    try:
        problems = space.validate(scheme, graph)
        if problems:
            raise space.SchemeValidityError(problems)
        g, w, changed = apply_replacements(scheme, graph, copy_weights(base_weights))
        if changed:
            w, _ = train(g, w, data, cfg, cfg.replace_epochs)
        targets = pruning.pruning_targets(scheme, g)
        masks: dict = {}
        with ThreadPoolExecutor(max_workers=1) as pool:
            if targets:
                if scheme.method == PruningMethod.ADMM:
                    res = pruning.admm_prune(w, scheme, g,
                                             pruning.AdmmConfig(cfg.rho, cfg.admm_epochs,
                                                                cfg.finetune_epochs),
                                             make_admm_step([g], data, cfg))
                    w, masks = res.weights, res.masks
                else:
                    w, masks = pruning.magnitude_prune(w, scheme, g)
            # the latency estimate overlaps the fine-tune
            fut = pool.submit(estimate, g, scheme, masks, cost_model)
            if targets:
                w, _ = train(g, w, data, cfg, cfg.finetune_epochs, masks=masks)
            t = fut.result().total
        acc, _ = evaluate(g, w, data.test)
        r = compute_reward(acc, t, ctrl_cfg)
        report = pruning.sparsity_report(masks, g)
        rec = EvalRecord(scheme.to_dict(), acc, t, r.value, report.to_dict(),
                         time.perf_counter() - started)
        return EvalOutcome(rec, g, w, masks)
    except Exception as exc:   # the controller must learn to avoid the scheme
        return EvalOutcome(failure_record(scheme, exc, started))


def masks_match_weights(weights: ModelWeights, masks) -> bool:
    """Every masked-out entry is zero in the live weights."""
    for lid, pm in masks.items():
        m = pm.mask if isinstance(pm, pruning.PruningMask) else np.asarray(pm)
        if np.any(weights[lid]["weight"][~m] != 0):
            return False
    return True


def train_base(graph: ModelGraph, data: Dataset, cfg: TrainConfig, seed: int = 0):
    from .ir import init_weights
    w = init_weights(graph, seed)
    return train(graph, w, data, cfg, cfg.base_epochs, seed=seed)
