"""Supervised MSE + Adam loop shared by PredNet and DANet training."""
import copy
import logging
import numpy as np
import pandas as pd
import torch
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple
from src.models.enums import NormMode
from src.models.schemas import TrainConfig
from src.services.netblocks import DDNetwork, forward_net
from src.utils.errors import InsufficientDataError, NonFiniteError
from src.utils.tensorcore import AdamState, adam_step, ensure_finite, mse_loss

logger = logging.getLogger(__name__)

# index -> (inputs [L, C_in, H, W], target [C_out, H, W]); samples are loaded lazily
SampleLoader = Callable[[int], Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: Optional[float]


@dataclass
class TrainingResult:
    network: DDNetwork
    optimizer: AdamState
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    train_indices: List[int] = field(default_factory=list)
    val_indices: List[int] = field(default_factory=list)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.epoch, e.train_loss, e.val_loss) for e in self.log],
            columns=["epoch", "train_loss", "val_loss"],
        )


def split_trailing(n_samples: int, validation_fraction: float) -> Tuple[List[int], List[int]]:
    """Chronological split: the trailing fraction is held out, at least one sample trains"""
    if n_samples < 1:
        raise InsufficientDataError("no training samples")
    n_val = min(int(round(n_samples * validation_fraction)), n_samples - 1)
    cut = n_samples - n_val
    return list(range(cut)), list(range(cut, n_samples))


def _sample_loss(network: DDNetwork, loader: SampleLoader, index: int, mode: NormMode) -> torch.Tensor:
    inputs, target = loader(index)
    prediction = forward_net(network, inputs.to(network.dtype), mode)[-1]
    return mse_loss(prediction, target.to(network.dtype))


def evaluate_loss(network: DDNetwork, loader: SampleLoader, indices: Sequence[int]) -> Optional[float]:
    if not indices:
        return None
    with torch.no_grad():
        losses = [float(_sample_loss(network, loader, i, NormMode.INFER)) for i in indices]
    return float(np.mean(losses))


def fit(
    network: DDNetwork,
    loader: SampleLoader,
    n_samples: int,
    cfg: TrainConfig,
    label: str = "network",
) -> TrainingResult:
    """
    Train ``network`` in place and return it holding its best-validation weights.

    Args:
        network: freshly built network in the training precision
        loader: sample accessor, called once per sample per epoch
        n_samples: number of samples, in chronological order
        cfg: epochs, Adam hyperparameters, shuffle seed, patience, validation fraction
        label: name used in log lines

    Returns:
        TrainingResult with the per-epoch loss log
    """
    train_idx, val_idx = split_trailing(n_samples, cfg.validation_fraction)
    optimizer = AdamState(network.named_parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    result = TrainingResult(network=network, optimizer=optimizer, train_indices=train_idx, val_indices=val_idx)

    best_score = float("inf")
    best_state = copy.deepcopy(network.state_dict())
    stale_epochs = 0
    logger.info(f"Training {label}: {len(train_idx)} train / {len(val_idx)} validation samples, {cfg.epochs} epochs")

    for epoch in range(1, cfg.epochs + 1):
        network.train()
        running = []
        for index in rng.permutation(train_idx):
            optimizer.zero_grad()
            loss = _sample_loss(network, loader, int(index), NormMode.TRAIN)
            try:
                ensure_finite(loss, f"{label} loss")
            except NonFiniteError as e:
                raise NonFiniteError(f"{e} (epoch {epoch}, sample {int(index)})") from e
            loss.backward()
            adam_step(optimizer)
            running.append(float(loss))
        network.eval()
        train_loss = float(np.mean(running))
        val_loss = evaluate_loss(network, loader, val_idx)
        result.log.append(EpochLog(epoch, train_loss, val_loss))
        logger.info(
            f"{label} epoch {epoch}/{cfg.epochs}: train_loss={train_loss:.6f}"
            + (f" val_loss={val_loss:.6f}" if val_loss is not None else "")
        )

        score = val_loss if val_loss is not None else train_loss
        if score < best_score:
            best_score = score
            best_state = copy.deepcopy(network.state_dict())
            result.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                logger.warning(f"{label}: early stop after epoch {epoch}, best epoch {result.best_epoch}")
                break

    network.load_state_dict(best_state)
    return result
