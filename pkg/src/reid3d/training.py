"""PK sampling, Adam with coupled L2 decay, the LR schedule and the train loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .losses import LossConfig, total_loss
from .model import ModelConfig, TrackEncoder, build
from .tensor import make_rng


@dataclass
class TrackDataset:
    """Frame sequences (``C x L x H x W`` each) with identity and camera labels."""

    sequences: list[np.ndarray]
    labels: list[int]
    cams: list[int] | None = None

    def __post_init__(self):
        if len(self.sequences) != len(self.labels):
            raise ShapeError("one label per sequence required")
        if self.cams is not None and len(self.cams) != len(self.labels):
            raise ShapeError("one camera label per sequence required")

    def identities(self) -> list[int]:
        return sorted(set(self.labels))

    def by_identity(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, lab in enumerate(self.labels):
            out.setdefault(lab, []).append(i)
        return out


@dataclass
class SamplerConfig:
    P: int = 4
    K: int = 2
    track_len: int = 4
    window: int = 8
    crop_pad: int = 0  # random spatial crop after zero padding by this many pixels

    def __post_init__(self):
        if self.P < 2 or self.K < 2 or self.track_len < 1 or self.window < 1 or self.crop_pad < 0:
            raise DomainError(f"invalid sampler config {self}")


def frame_indices(length: int, track_len: int, window: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``track_len`` frames: a random window, then a random-offset stride.

    The window is ``min(window, length)`` frames; the stride is
    ``window // track_len``. Sequences shorter than ``track_len`` are looped.
    """
    if length < track_len:
        return np.arange(track_len) % length
    w = min(window, length)
    stride = max(w // track_len, 1)
    start = int(rng.integers(0, length - w + 1))
    offset = int(rng.integers(0, w - stride * (track_len - 1)))
    return start + offset + stride * np.arange(track_len)


def _spatial_crop(track: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad == 0:
        return track
    H, W = track.shape[-2:]
    padded = np.pad(track, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return padded[:, :, dy : dy + H, dx : dx + W]


def sample_batch(ds: TrackDataset, cfg: SamplerConfig, rng: np.random.Generator):
    """P identities (without replacement) x K tracks each.

    Returns ``(tracks B x C x track_len x H x W, labels B)`` grouped by identity.
    """
    ids = ds.identities()
    if len(ids) < cfg.P:
        raise ShapeError(f"need {cfg.P} identities, dataset has {len(ids)}")
    groups = ds.by_identity()
    chosen = rng.choice(len(ids), size=cfg.P, replace=False)
    tracks, labels = [], []
    for idx in chosen:
        pid = ids[int(idx)]
        for _ in range(cfg.K):
            seq = ds.sequences[groups[pid][int(rng.integers(0, len(groups[pid])))]]
            frames = frame_indices(seq.shape[1], cfg.track_len, cfg.window, rng)
            tracks.append(_spatial_crop(seq[:, frames], cfg.crop_pad, rng))
            labels.append(pid)
    return np.stack(tracks), np.asarray(labels)


@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], st: OptimizerState,
              lr: float | None = None) -> None:
    """In-place Adam update with L2 decay folded into the gradient."""
    lr = st.lr if lr is None else lr
    b1, b2 = st.betas
    st.step += 1
    t = st.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in st.m:
            st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        m, v = st.m[name], st.v[name]
        g = g + st.weight_decay * p
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= lr * m_hat / (np.sqrt(v_hat) + st.eps)


@dataclass
class Schedule:
    lr0: float = 3e-4
    decay_start_epoch: int = 150
    total_epochs: int = 300
    decay_rate: float = 0.001


def lr_at(epoch: int, s: Schedule) -> float:
    """Constant, then exponential decay reaching ``lr0 * decay_rate`` at the end."""
    if not 0 <= epoch < s.total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.decay_start_epoch:
        return s.lr0
    frac = (epoch - s.decay_start_epoch) / (s.total_epochs - s.decay_start_epoch)
    return s.lr0 * s.decay_rate**frac


def make_synthetic(n_ids: int, seqs_per_id: int, seq_len: int, shape: tuple[int, int, int],
                   noise_sigma: float, rng: np.random.Generator, dtype=np.float32) -> TrackDataset:
    """Per identity a random prototype frame; frames are prototype plus noise.

    Camera label of a sequence is its index within the identity mod 2.
    """
    return make_synthetic_split(n_ids, seqs_per_id, 0, seq_len, shape, noise_sigma, rng, dtype)[0]


def make_synthetic_split(n_ids: int, seqs_per_id: int, heldout_per_id: int, seq_len: int,
                         shape: tuple[int, int, int], noise_sigma: float, rng: np.random.Generator,
                         dtype=np.float32) -> tuple[TrackDataset, TrackDataset]:
    """Training set as ``make_synthetic`` plus held-out sequences of the same identities.

    Held-out noise is drawn after all training data, so the training half is
    identical to ``make_synthetic`` with the same generator state. Held-out
    sequences carry camera label 2.
    """
    if n_ids < 2:
        raise DomainError("need at least 2 identities")
    C, H, W = shape
    protos = rng.standard_normal((n_ids, C, H, W))

    def seq(pid):
        noise = rng.standard_normal((C, seq_len, H, W)) * noise_sigma
        return (protos[pid][:, None] + noise).astype(dtype)

    train_seqs, labels, cams = [], [], []
    for pid in range(n_ids):
        for s in range(seqs_per_id):
            train_seqs.append(seq(pid))
            labels.append(pid)
            cams.append(s % 2)
    held = [(seq(pid), pid) for pid in range(n_ids) for _ in range(heldout_per_id)]
    return (
        TrackDataset(train_seqs, labels, cams),
        TrackDataset([h[0] for h in held], [h[1] for h in held], [2] * len(held)),
    )


def eval_tracks(ds: TrackDataset, track_len: int, window: int) -> np.ndarray:
    """One deterministic track per sequence: first window, zero offset."""
    out = []
    for seq in ds.sequences:
        L_ = seq.shape[1]
        if L_ < track_len:
            idx = np.arange(track_len) % L_
        else:
            idx = max(min(window, L_) // track_len, 1) * np.arange(track_len)
        out.append(seq[:, idx])
    if not out:
        return np.zeros((0, 0, track_len, 0, 0), dtype=np.float32)
    return np.stack(out)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_triplet: float
    loss_ce: float


CSV_FIELDS = ["step", "epoch", "lr", "loss_total", "loss_triplet", "loss_ce"]


def history_to_csv(history: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in history:
        w.writerow([r.step, r.epoch, f"{r.lr:.9g}", f"{r.loss_total:.9g}", f"{r.loss_triplet:.9g}",
                    f"{r.loss_ce:.9g}"])
    return buf.getvalue()


def train(ds: TrackDataset, model_cfg: ModelConfig, sampler_cfg: SamplerConfig, schedule: Schedule,
          steps: int, seed: int, loss_cfg: LossConfig | None = None,
          optimizer: OptimizerState | None = None) -> tuple[TrackEncoder, list[StepRecord], OptimizerState]:
    """sample -> forward -> loss -> backward -> Adam, ``steps`` times.

    One epoch is ``ceil(n_identities / P)`` steps. Sampling and dropout draw
    from separate streams derived from ``seed``.
    """
    loss_cfg = loss_cfg or LossConfig(n_classes=model_cfg.n_identities)
    if max(ds.labels) >= model_cfg.n_identities:
        raise ShapeError("dataset identity labels exceed the classifier size")
    enc = build(model_cfg, seed)
    opt = optimizer or OptimizerState(lr=schedule.lr0)
    sample_rng = make_rng([seed, 1])
    drop_rng = make_rng([seed, 2])
    steps_per_epoch = math.ceil(len(ds.identities()) / sampler_cfg.P)
    history = []
    params = enc.named_parameters()
    for step in range(steps):
        epoch = step // steps_per_epoch
        lr = lr_at(min(epoch, schedule.total_epochs - 1), schedule)
        tracks, labels = sample_batch(ds, sampler_cfg, sample_rng)
        enc.zero_grad()
        features, logits = enc.forward(tracks, drop_rng)
        parts, g_feat, g_logits = total_loss(features, logits, labels, loss_cfg)
        enc.backward(g_feat, g_logits)
        adam_step(params, enc.named_grads(), opt, lr=lr)
        history.append(StepRecord(step, epoch, lr, parts.total, parts.triplet, parts.ce))
    enc.set_training(False)
    return enc, history, opt
