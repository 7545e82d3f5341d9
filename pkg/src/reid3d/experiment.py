"""Run-config driven training and held-out retrieval, shared by the CLI and scripts."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import evaluation, training
from .config import RunConfig
from .errors import ConfigError
from .model import TrackEncoder
from .tensor import make_rng


@dataclass
class RunOutput:
    encoder: TrackEncoder
    history: list[training.StepRecord]
    optimizer: training.OptimizerState
    train_set: training.TrackDataset
    heldout: training.TrackDataset

    def loss_ratio(self, window: int = 10) -> float:
        """Mean total loss over the last ``window`` steps divided by the first ``window``."""
        totals = [h.loss_total for h in self.history]
        return float(np.mean(totals[-window:]) / np.mean(totals[:window]))

    def final_loss(self, window: int = 10) -> float:
        return float(np.mean([h.loss_total for h in self.history[-window:]]))


def synthetic_split(cfg: RunConfig):
    d = cfg.data
    if d.n_ids > cfg.model.n_identities:
        raise ConfigError(f"data.n_ids={d.n_ids} exceeds model.n_identities={cfg.model.n_identities}", "data.n_ids")
    if cfg.model.in_channels != d.channels:
        raise ConfigError("model.in_channels must equal data.channels", "model.in_channels")
    return training.make_synthetic_split(
        d.n_ids, d.seqs_per_id, 1, d.seq_len, (d.channels, d.height, d.width), d.noise_sigma, make_rng(d.seed)
    )


def without_nonlocal(cfg: RunConfig) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.model.nonlocal_placement = [[] for _ in out.model.stages]
    out.model.validate()
    return out


def run_training(cfg: RunConfig) -> RunOutput:
    ds, held = synthetic_split(cfg)
    opt = training.OptimizerState(lr=cfg.schedule.lr0, betas=cfg.optimizer.betas, eps=cfg.optimizer.eps,
                                  weight_decay=cfg.optimizer.weight_decay)
    enc, history, opt = training.train(ds, cfg.model, cfg.sampler, cfg.schedule, cfg.steps, cfg.seed,
                                       cfg.loss_config(), opt)
    return RunOutput(enc, history, opt, ds, held)


def heldout_retrieval(run: RunOutput, cfg: RunConfig, max_rank: int = 1) -> evaluation.EvalResult:
    """Held-out sequences as queries against the training sequences as gallery."""
    s = cfg.sampler
    q = evaluation.extract_features(run.encoder, training.eval_tracks(run.heldout, s.track_len, s.window))
    g = evaluation.extract_features(run.encoder, training.eval_tracks(run.train_set, s.track_len, s.window))
    proto = evaluation.EvalProtocol(np.array(run.heldout.labels), np.array(run.train_set.labels),
                                    evaluation.distance_matrix(q, g), np.array(run.heldout.cams),
                                    np.array(run.train_set.cams))
    return evaluation.evaluate(proto, max_rank)
