"""LSTM scheme generator trained with REINFORCE and an EMA baseline."""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import space
from .space import UnifiedScheme

CHECKPOINT_VERSION = 1
DTYPE = torch.float64


@dataclass
class ControllerConfig:
    hidden_size: int = 49
    num_layers: int = 2
    init_range: float = 0.1
    learning_rate: float = 5e-4
    alpha: float = 0.01
    latency_threshold: float = 100.0   # ms
    batch_size: int = 50               # K, schemes sampled per step
    ema_decay: float = 0.95
    grad_clip: float = 5.0
    mask_value: float = -1e9

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.latency_threshold <= 0:
            raise ValueError("latency_threshold must be > 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")


class Provenance(str, enum.Enum):
    MEASURED = "measured"
    SURROGATE = "surrogate"


@dataclass(frozen=True)
class Reward:
    accuracy: float
    latency: float
    value: float
    provenance: Provenance = Provenance.MEASURED


def compute_reward(accuracy: float, latency: float, cfg: ControllerConfig) -> Reward:
    """R = A - alpha * max(0, t - T)."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy {accuracy} outside [0, 1]")
    if not latency >= 0:
        raise ValueError(f"latency {latency} must be >= 0")
    value = accuracy - cfg.alpha * max(0.0, latency - cfg.latency_threshold)
    return Reward(accuracy, latency, value, Provenance.MEASURED)


class SequenceLayout:
    """Position classes of a token sequence plus its masking rule."""

    def __init__(self, vocab_sizes: Sequence[int], classes: Sequence[int]):
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.classes = list(classes)

    @property
    def length(self) -> int:
        return len(self.classes)

    def allowed(self, q: int, prefix: np.ndarray) -> np.ndarray:
        """Boolean (batch, vocab) mask for position ``q`` given earlier tokens."""
        return np.ones((prefix.shape[0], self.vocab_sizes[self.classes[q]]), dtype=bool)


class SchemeLayout(SequenceLayout):
    def __init__(self, strides: Sequence[int]):
        self.strides = [int(s) for s in strides]
        super().__init__(space.VOCAB_SIZES, space.position_classes(len(self.strides)))

    @classmethod
    def from_graph(cls, graph) -> "SchemeLayout":
        return cls([layer.stride for layer in graph.prunable_layers()])

    def allowed(self, q: int, prefix: np.ndarray) -> np.ndarray:
        cls = self.classes[q]
        n = prefix.shape[0]
        if cls not in (space.WINOGRAD, space.PTYPE):
            return np.ones((n, self.vocab_sizes[cls]), dtype=bool)
        layer = (q - 1) // 4
        kernel_pos = 1 + 4 * layer
        stride = self.strides[layer]
        return np.stack([space.allowed_tokens(cls, stride, int(k))
                         for k in prefix[:, kernel_pos]])


class Policy(nn.Module):
    """Two-layer LSTM with per-class token embeddings and output heads."""

    def __init__(self, vocab_sizes: Sequence[int], hidden: int = 49, num_layers: int = 2):
        super().__init__()
        self.hidden = hidden
        self.start = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.embed = nn.ModuleList(nn.Embedding(v, hidden, dtype=DTYPE) for v in vocab_sizes)
        self.lstm = nn.LSTM(hidden, hidden, num_layers, dtype=DTYPE)
        self.heads = nn.ModuleList(nn.Linear(hidden, v, dtype=DTYPE) for v in vocab_sizes)

    def reset_parameters(self, init_range: float, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.rand(p.shape, generator=g, dtype=DTYPE) * 2 * init_range - init_range)

    def step(self, inp, state):
        out, state = self.lstm(inp.unsqueeze(0), state)
        return out[0], state


class Controller:
    """Generator state: policy parameters, Adam moments, EMA baseline, step."""

    def __init__(self, layout: SequenceLayout, cfg: ControllerConfig | None = None, seed: int = 0):
        self.cfg = cfg or ControllerConfig()
        self.layout = layout
        self.policy = Policy(layout.vocab_sizes, self.cfg.hidden_size, self.cfg.num_layers)
        self.policy.reset_parameters(self.cfg.init_range, seed)
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=self.cfg.learning_rate)
        self.baseline: float | None = None
        self.step = 0

    @classmethod
    def for_graph(cls, graph, cfg: ControllerConfig | None = None, seed: int = 0) -> "Controller":
        return cls(SchemeLayout.from_graph(graph), cfg, seed)

    def snapshot(self) -> "Controller":
        """Detached copy for concurrent sampling while this one trains."""
        snap = copy.copy(self)
        snap.policy = copy.deepcopy(self.policy)
        return snap

    # -- sampling ---------------------------------------------------------

    def _logits(self, out: torch.Tensor, q: int, allowed: np.ndarray) -> torch.Tensor:
        logits = self.policy.heads[self.layout.classes[q]](out)
        penalty = torch.as_tensor(np.where(allowed, 0.0, self.cfg.mask_value), dtype=DTYPE)
        return logits + penalty

    def _input(self, q: int, prev: torch.Tensor | None, n: int) -> torch.Tensor:
        if q == 0:
            return self.policy.start.expand(n, -1)
        return self.policy.embed[self.layout.classes[q - 1]](prev)

    @torch.no_grad()
    def sample_tokens(self, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` sequences; returns (tokens, per-token log-probs), both (n, Q)."""
        rng = np.random.default_rng(seed)
        Q = self.layout.length
        tokens = np.zeros((n, Q), dtype=np.int64)
        logp = np.zeros((n, Q))
        state = None
        prev = None
        for q in range(Q):
            out, state = self.policy.step(self._input(q, prev, n), state)
            allowed = self.layout.allowed(q, tokens[:, :q])
            if not allowed.any(axis=1).all():
                raise RuntimeError(f"every token masked at position {q}")
            lp = torch.log_softmax(self._logits(out, q, allowed), dim=-1).numpy()
            p = np.exp(lp)
            cdf = np.cumsum(p, axis=1)
            u = rng.random(n) * cdf[:, -1]
            pick = (cdf <= u[:, None]).sum(axis=1)
            # guard against round-off landing past the last allowed token
            last_ok = allowed.shape[1] - 1 - np.argmax(allowed[:, ::-1], axis=1)
            pick = np.minimum(pick, last_ok)
            bad = ~allowed[np.arange(n), pick]
            if bad.any():
                pick[bad] = np.argmax(allowed[bad], axis=1)
            tokens[:, q] = pick
            logp[:, q] = lp[np.arange(n), pick]
            prev = torch.as_tensor(pick)
        return tokens, logp

    def sample(self, seed) -> tuple[UnifiedScheme, np.ndarray]:
        tokens, logp = self.sample_tokens(1, seed)
        return space.detokenize(tokens[0]), logp[0]

    def sample_many(self, n: int, seed) -> list[tuple[UnifiedScheme, np.ndarray, np.ndarray]]:
        tokens, logp = self.sample_tokens(n, seed)
        return [(space.detokenize(t), t, lp) for t, lp in zip(tokens, logp)]

    def log_probs(self, tokens) -> torch.Tensor:
        """Per-token log-probabilities of given sequences, with gradient."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        n, Q = tokens.shape
        tt = torch.as_tensor(tokens)
        state = None
        prev = None
        cols = []
        for q in range(Q):
            out, state = self.policy.step(self._input(q, prev, n), state)
            allowed = self.layout.allowed(q, tokens[:, :q])
            lp = torch.log_softmax(self._logits(out, q, allowed), dim=-1)
            cols.append(lp.gather(1, tt[:, q:q + 1])[:, 0])
            prev = tt[:, q]
        return torch.stack(cols, dim=1)

    # -- training ---------------------------------------------------------

    def surrogate_loss(self, tokens, advantages) -> torch.Tensor:
        """-(1/K) sum_k adv_k log P(s_k); its gradient is the REINFORCE estimate."""
        adv = torch.as_tensor(np.asarray(advantages, dtype=np.float64), dtype=DTYPE)
        seq_logp = self.log_probs(tokens).sum(dim=1)
        return -(adv * seq_logp).sum() / len(adv)

    def reinforce_update(self, batch) -> dict:
        """One ascent step on (1/K) sum_k sum_q log P(s_q | s_<q) (R_k - b).

        ``batch`` holds ``(tokens, logp, reward)`` triples; ``reward`` is a
        Reward or a float.  Surrogate rewards are weighted like measured ones.
        """
        if not batch:
            raise ValueError("empty REINFORCE batch")
        rewards = np.array([r.value if isinstance(r, Reward) else float(r) for _, _, r in batch])
        if not np.isfinite(rewards).all():
            bad = [i for i, r in enumerate(rewards) if not math.isfinite(r)]
            raise ValueError(f"non-finite reward at batch positions {bad}")
        if self.baseline is None:
            self.baseline = float(rewards.mean())
        tokens = np.stack([np.asarray(t, dtype=np.int64) for t, _, _ in batch])
        self.optimizer.zero_grad()
        loss = self.surrogate_loss(tokens, rewards - self.baseline)
        loss.backward()
        grad_norm = float(nn.utils.clip_grad_norm_(self.policy.parameters(), self.cfg.grad_clip))
        self.optimizer.step()
        d = self.cfg.ema_decay
        self.baseline = d * self.baseline + (1 - d) * float(rewards.mean())
        self.step += 1
        return {"loss": loss.item(), "grad_norm": grad_norm, "baseline": self.baseline,
                "mean_reward": float(rewards.mean())}

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "config": asdict(self.cfg),
                "vocab_sizes": list(self.layout.vocab_sizes), "classes": list(self.layout.classes),
                "strides": getattr(self.layout, "strides", None),
                "policy": self.policy.state_dict(), "optimizer": self.optimizer.state_dict(),
                "baseline": self.baseline, "step": self.step}

    def save(self, path) -> None:
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path) -> "Controller":
        d = torch.load(path, weights_only=False)
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported controller checkpoint version {d.get('version')!r}")
        if d["strides"] is not None:
            layout = SchemeLayout(d["strides"])
        else:
            layout = SequenceLayout(d["vocab_sizes"], d["classes"])
        ctl = cls(layout, ControllerConfig(**d["config"]))
        ctl.policy.load_state_dict(d["policy"])
        ctl.optimizer.load_state_dict(d["optimizer"])
        ctl.baseline = d["baseline"]
        ctl.step = d["step"]
        return ctl
