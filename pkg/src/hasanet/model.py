"""The assessment network, its loss, and a finite-difference gradient check."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .audiograms import FREQUENCIES
from .errors import TrainingError, ValidationError

TASKS = ("quality", "intelligibility")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim_in: int
    n_layers: int = 1
    layer_mode: str = "weighted_sum"
    fusion_dim: int = 256
    blstm_units: int = 100
    trunk_dense_units: int = 128
    attention_heads: int = 4
    pattern_dim_in: int = len(FREQUENCIES)
    pattern_scale: float = 0.01  # dB HL -> order-one inputs

    def __post_init__(self):
        for name in ("feature_dim_in", "n_layers", "fusion_dim", "blstm_units", "trunk_dense_units",
                     "attention_heads", "pattern_dim_in"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"model config: {name} must be positive")
        if self.trunk_dense_units % self.attention_heads:
            raise ValidationError("trunk_dense_units must be divisible by attention_heads")
        if self.layer_mode not in ("weighted_sum", "last_layer"):
            raise ValidationError(f"unknown layer_mode {self.layer_mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TargetPair:
    quality: float
    intelligibility: float

    def __post_init__(self):
        for name in TASKS:
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} target {v} outside [0, 1]")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class Prediction:
    """Frame scores for both tasks; utterance scores are their means."""

    frame_quality: np.ndarray
    frame_intelligibility: np.ndarray

    def __post_init__(self):
        for name in ("frame_quality", "frame_intelligibility"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.size == 0:
                raise ValidationError("prediction needs at least one frame")
            object.__setattr__(self, name, v)

    @property
    def utterance_quality(self) -> float:
        return float(np.mean(self.frame_quality))

    @property
    def utterance_intelligibility(self) -> float:
        return float(np.mean(self.frame_intelligibility))


@dataclass(frozen=True)
class LossParts:
    total: float
    quality: float
    intelligibility: float


def loss(pred: Prediction, target: TargetPair) -> LossParts:
    """Per-utterance loss: squared utterance error plus mean squared frame error, per task."""
    parts = {}
    for task in TASKS:
        frames = getattr(pred, f"frame_{task}")
        true = getattr(target, task)
        parts[task] = (true - frames.mean()) ** 2 + np.mean((true - frames) ** 2)
    return LossParts(parts["quality"] + parts["intelligibility"], parts["quality"], parts["intelligibility"])


def batch_loss(out: dict, target_q: torch.Tensor, target_i: torch.Tensor):
    """Mean over the batch of the per-utterance loss; returns (total, quality, intelligibility) tensors."""
    mask = out["mask"].to(out["frame_quality"].dtype)
    lengths = mask.sum(1)
    terms = []
    for task, target in (("quality", target_q), ("intelligibility", target_i)):
        utt = (target - out[f"utterance_{task}"]) ** 2
        frame = (((target[:, None] - out[f"frame_{task}"]) ** 2) * mask).sum(1) / lengths
        terms.append((utt + frame).mean())
    return terms[0] + terms[1], terms[0], terms[1]


def _uniform_fan_in_(weight: torch.Tensor, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)


class LayerFusion(nn.Module):
    def __init__(self, n_layers: int, mode: str):
        super().__init__()
        self.mode = mode
        self.logits = nn.Parameter(torch.zeros(n_layers), requires_grad=(mode == "weighted_sum"))

    def weights(self) -> torch.Tensor:
        if self.mode == "last_layer":
            w = torch.zeros_like(self.logits)
            w[-1] = 1
            return w
        return torch.softmax(self.logits, 0)

    def forward(self, stacks: torch.Tensor) -> torch.Tensor:
        # stacks: (B, L, T, D)
        if self.mode == "last_layer":
            return stacks[:, -1]
        return torch.einsum("l,bltd->btd", self.weights(), stacks)


class TaskHead(nn.Module):
    """Self-attention with a residual connection, then a sigmoid unit per frame."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attention = nn.MultiheadAttention(dim, heads, dropout=0.0, batch_first=True)
        self.score = nn.Linear(dim, 1)

    def forward(self, h, mask):
        a, _ = self.attention(h, h, h, key_padding_mask=~mask, need_weights=False)
        return torch.sigmoid(self.score(h + a)).squeeze(-1)


def reverse_within_length(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each (B, T, ...) sequence over its first ``lengths[b]`` steps; padding stays put."""
    T = x.shape[1]
    t = torch.arange(T)[None, :]
    idx = torch.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return torch.gather(x, 1, idx.reshape(*idx.shape, *([1] * (x.dim() - 2))).expand_as(x))


class BLSTM(nn.Module):
    """Bidirectional LSTM over padded batches.

    Two unidirectional passes; the backward one runs on length-wise reversed
    sequences so padding never leaks into valid frames.  Faster on CPU than
    packed sequences.
    """

    def __init__(self, input_size: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.forward_lstm = nn.LSTM(input_size, hidden, batch_first=True)
        self.backward_lstm = nn.LSTM(input_size, hidden, batch_first=True)

    def forward(self, x, lengths):
        f, _ = self.forward_lstm(x)
        b, _ = self.backward_lstm(reverse_within_length(x, lengths))
        return torch.cat([f, reverse_within_length(b, lengths)], dim=-1)


class HASANet(nn.Module):
    """Layer fusion -> dense(256) + dense(pattern -> 256) -> BLSTM -> dense(128, ReLU) -> two heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fusion = LayerFusion(c.n_layers, c.layer_mode)
            self.feature_proj = nn.Linear(c.feature_dim_in, c.fusion_dim)
            self.pattern_proj = nn.Linear(c.pattern_dim_in, c.fusion_dim)
            self.blstm = BLSTM(c.fusion_dim, c.blstm_units)
            self.trunk = nn.Linear(2 * c.blstm_units, c.trunk_dense_units)
            self.heads = nn.ModuleDict({t: TaskHead(c.trunk_dense_units, c.attention_heads) for t in TASKS})
            self._init_parameters()

    def _init_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _uniform_fan_in_(module.weight, module.in_features)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.MultiheadAttention):
                _uniform_fan_in_(module.in_proj_weight, module.embed_dim)
                nn.init.zeros_(module.in_proj_bias)
        h = self.config.blstm_units
        for name, p in self.blstm.named_parameters():
            if ".weight" in name:
                _uniform_fan_in_(p, p.shape[1])
            else:
                nn.init.zeros_(p)
                if ".bias_ih" in name:
                    with torch.no_grad():
                        p[h:2 * h] = 1.0  # forget gate

    def forward(self, stacks: torch.Tensor, lengths: torch.Tensor, patterns: torch.Tensor, check_finite: bool = True):
        """``stacks`` (B, L, T, D), ``lengths`` (B,), ``patterns`` (B, 6) in dB HL."""
        B, _, T, _ = stacks.shape
        mask = torch.arange(T)[None, :] < lengths[:, None]

        def finite(name, t):
            if check_finite and not torch.isfinite(t).all():
                raise TrainingError(f"non-finite activations after layer '{name}'")
            return t

        x = finite("fusion", self.fusion(stacks))
        x = self.feature_proj(x) + self.pattern_proj(patterns * self.config.pattern_scale)[:, None, :]
        x = finite("projection", x)
        h = finite("blstm", self.blstm(x, lengths))
        h = finite("trunk", torch.relu(self.trunk(h)))
        out = {"mask": mask}
        m = mask.to(h.dtype)
        for task in TASKS:
            frames = finite(f"{task}_head", self.heads[task](h, mask)) * m
            out[f"frame_{task}"] = frames
            out[f"utterance_{task}"] = frames.sum(1) / lengths.to(h.dtype)
        return out

    def layer_weights(self) -> np.ndarray:
        return self.fusion.weights().detach().cpu().numpy()


def pad_stacks(stacks: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """List of (L, T_i, D) -> zero-padded (B, L, T_max, D) and lengths."""
    lengths = torch.tensor([s.shape[1] for s in stacks])
    L, _, D = stacks[0].shape
    out = stacks[0].new_zeros((len(stacks), L, int(lengths.max()), D))
    for i, s in enumerate(stacks):
        out[i, :, : s.shape[1]] = s
    return out, lengths


class AssessmentSystem(nn.Module):
    """Network plus an optional differentiable feature encoder.

    With an encoder, batches may carry raw waveforms; otherwise they carry
    precomputed layer stacks.
    """

    def __init__(self, model: HASANet, encoder: nn.Module | None = None):
        super().__init__()
        self.model = model
        self.encoder = encoder

    def encode(self, waves: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        if self.encoder is None:
            raise ValidationError("waveform batches need an encoder")
        return pad_stacks([self.encoder(w) for w in waves])

    def forward(self, batch) -> dict:
        if batch.stacks is not None:
            stacks, lengths = batch.stacks, batch.lengths
        else:
            stacks, lengths = self.encode(batch.waves)
        return self.model(stacks, lengths, batch.patterns)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"head": [p for p in self.model.parameters() if p.requires_grad]}
        if self.encoder is not None and hasattr(self.encoder, "param_groups"):
            groups.update(self.encoder.param_groups())
        return groups


@dataclass
class Batch:
    keys: list
    patterns: torch.Tensor
    target_q: torch.Tensor
    target_i: torch.Tensor
    stacks: torch.Tensor | None = None
    lengths: torch.Tensor | None = None
    waves: list | None = None


def predictions_from_output(out: dict) -> list[Prediction]:
    preds = []
    lengths = out["mask"].sum(1).tolist()
    fq = out["frame_quality"].detach().cpu().numpy()
    fi = out["frame_intelligibility"].detach().cpu().numpy()
    for b, n in enumerate(lengths):
        preds.append(Prediction(fq[b, :n], fi[b, :n]))
    return preds


def gradient_check(system: nn.Module, batch: Batch, n_coords: int = 40, h: float = 1e-5, seed: int = 0,
                   floor: float = 1e-6, scale: float = 1.0) -> float:
    """Max relative error between autograd and central differences of the total loss.

    ``n_coords`` coordinates are sampled uniformly over all trainable
    parameters.  Relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor stops difference roundoff on near-zero gradients from dominating.
    Run in float64.
    """
    params = [p for p in system.parameters() if p.requires_grad]
    system.zero_grad()
    total, _, _ = batch_loss(system(batch), batch.target_q, batch.target_i)
    (scale * total).backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            idx = int(f - offsets[k])
            view = params[k].view(-1)
            orig = view[idx].item()
            view[idx] = orig + h
            up = scale * batch_loss(system(batch), batch.target_q, batch.target_i)[0].item()
            view[idx] = orig - h
            down = scale * batch_loss(system(batch), batch.target_q, batch.target_i)[0].item()
            view[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[k].view(-1)[idx].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
