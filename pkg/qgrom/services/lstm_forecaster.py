"""LSTM forecasters of modal coefficients.

A window holds sigma_L rows (mu, t, coefficients) stored newest first; the
recurrence consumes them oldest first, so the final hidden state belongs to
the newest row. Every tensor is float64 on the CPU.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from qgrom.core.config import settings
from qgrom.core.errors import InvalidArgumentError, LstmDivergenceError, RolloutDivergenceError
from qgrom.core.models import LstmHyper
from qgrom.services.reduction import CoefficientTable

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def configure_torch() -> None:
    if settings.DETERMINISTIC:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class LstmNetwork(nn.Module):
    """Stacked LSTM with explicit gate parameters and a dense read-out.

    Gate blocks are ordered input, forget, output, candidate in every
    weight matrix.
    """

    def __init__(self, input_size: int, output_size: int, layers: int = 1, cells: int = 100,
                 dropout: float = 0.0):
        super().__init__()
        self.input_size = input_size
        self.output_size = output_size
        self.cells = cells
        self.dropout = dropout
        self.W = nn.ParameterList()
        self.U = nn.ParameterList()
        self.b = nn.ParameterList()
        for layer in range(layers):
            width = input_size if layer == 0 else cells
            self.W.append(nn.Parameter(torch.zeros(4 * cells, width, dtype=DTYPE)))
            self.U.append(nn.Parameter(torch.zeros(4 * cells, cells, dtype=DTYPE)))
            self.b.append(nn.Parameter(torch.zeros(4 * cells, dtype=DTYPE)))
        self.out_W = nn.Parameter(torch.zeros(output_size, cells, dtype=DTYPE))
        self.out_b = nn.Parameter(torch.zeros(output_size, dtype=DTYPE))

    @property
    def layers(self) -> int:
        return len(self.W)

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
        with torch.no_grad():
            for W, U, b in zip(self.W, self.U, self.b):
                bound = 1.0 / math.sqrt(W.shape[1] + self.cells)
                for p in (W, U, b):
                    p.uniform_(-bound, bound, generator=generator)
            bound = 1.0 / math.sqrt(self.cells)
            self.out_W.uniform_(-bound, bound, generator=generator)
            self.out_b.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor, masks: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        """x has shape (batch, sigma_L, features) with the newest row first.

        ``masks`` fixes the dropout masks between layers (one per gap, already
        scaled); without it dropout is drawn when the module is training.
        """
        if x.shape[-1] != self.input_size:
            raise InvalidArgumentError(f"window width {x.shape[-1]} != model input width {self.input_size}")
        seq = x.flip(1)
        batch, steps = seq.shape[0], seq.shape[1]
        for layer in range(self.layers):
            if layer > 0:
                if masks is not None:
                    seq = seq * masks[layer - 1]
                elif self.dropout > 0.0:
                    seq = F.dropout(seq, self.dropout, training=self.training)
            W, U, b = self.W[layer], self.U[layer], self.b[layer]
            h = torch.zeros(batch, self.cells, dtype=DTYPE)
            c = torch.zeros(batch, self.cells, dtype=DTYPE)
            outputs = []
            for t in range(steps):
                z = seq[:, t, :] @ W.T + h @ U.T + b
                i, f, o, g = z.chunk(4, dim=1)
                c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
                h = torch.sigmoid(o) * torch.tanh(c)
                outputs.append(h)
            seq = torch.stack(outputs, dim=1)
        return seq[:, -1, :] @ self.out_W.T + self.out_b


@dataclass
class Normalizer:
    """Per-column affine map of the training range onto [-1, 1]."""

    mid: np.ndarray
    half: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        lo, hi = rows.min(axis=0), rows.max(axis=0)
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        half[half <= 1e-12 * np.maximum(1.0, np.abs(mid))] = 1.0
        return cls(mid, half)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mid) / self.half

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.half + self.mid


@dataclass
class SequenceDataset:
    inputs: np.ndarray        # (S, sigma_L, d + 1 + N), normalized, newest row first
    targets: np.ndarray       # (S, N), normalized
    sample_index: np.ndarray  # parameter sample of every window
    step_index: np.ndarray    # 0-based instant p of the newest row
    input_norm: Normalizer
    target_norm: Normalizer
    n_params: int

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def lookback(self) -> int:
        return self.inputs.shape[1]

    def split(self, validation_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
        """Indices of training and validation windows; each sample holds out its
        chronologically last windows."""
        train, val = [], []
        for k in np.unique(self.sample_index):
            idx = np.flatnonzero(self.sample_index == k)
            idx = idx[np.argsort(self.step_index[idx], kind="stable")]
            n_val = int(math.floor(validation_fraction * idx.size))
            n_val = min(n_val, idx.size - 1)
            train.extend(idx[:idx.size - n_val])
            val.extend(idx[idx.size - n_val:])
        return np.asarray(train, dtype=int), np.asarray(val, dtype=int)


def window_rows(mu: np.ndarray, times: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Rows (mu, t, coefficients); times and coeffs are given newest first."""
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (len(times), np.size(mu)))
    return np.hstack([mu, np.asarray(times, dtype=float)[:, None], coeffs])


def build_dataset(C: CoefficientTable, samples: np.ndarray, times: np.ndarray, lookback: int) -> SequenceDataset:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples.reshape(-1, 1)
    times = np.asarray(times, dtype=float)
    n_times = times.size
    if lookback < 1 or lookback >= n_times:
        raise InvalidArgumentError(f"lookback {lookback} must lie in [1, {n_times - 1}] for {n_times} instants")
    if C.data.shape[1] != samples.shape[0] * n_times:
        raise InvalidArgumentError("coefficient table does not match samples x times")

    windows, targets, ks, ps = [], [], [], []
    for k, mu in enumerate(samples):
        block = C.block(k)
        for p in range(lookback - 1, n_times - 1):
            rows = np.arange(p, p - lookback, -1)
            windows.append(window_rows(mu, times[rows], block[:, rows].T))
            targets.append(block[:, p + 1])
            ks.append(k)
            ps.append(p)
    raw_inputs = np.asarray(windows)
    raw_targets = np.asarray(targets)
    input_norm = Normalizer.fit(raw_inputs.reshape(-1, raw_inputs.shape[-1]))
    target_norm = Normalizer.fit(raw_targets)
    return SequenceDataset(
        inputs=input_norm.apply(raw_inputs), targets=target_norm.apply(raw_targets),
        sample_index=np.asarray(ks), step_index=np.asarray(ps),
        input_norm=input_norm, target_norm=target_norm, n_params=samples.shape[1],
    )


@dataclass
class LstmModel:
    network: LstmNetwork
    hyper: LstmHyper
    input_norm: Normalizer
    target_norm: Normalizer
    n_params: int
    seed: int = 0
    variable: str = ""
    mu_lo: Optional[np.ndarray] = None
    mu_hi: Optional[np.ndarray] = None
    fingerprint: str = ""

    @property
    def lookback(self) -> int:
        return self.hyper.lookback

    @property
    def n_outputs(self) -> int:
        return self.network.output_size

    def forward(self, window: np.ndarray) -> np.ndarray:
        """Inference on one normalized window (newest row first)."""
        window = np.asarray(window, dtype=float)
        if window.ndim != 2 or window.shape[1] != self.network.input_size:
            raise InvalidArgumentError(
                f"window must be (sigma_L, {self.network.input_size}), got {window.shape}"
            )
        self.network.eval()
        with torch.no_grad():
            out = self.network(torch.as_tensor(window, dtype=DTYPE).unsqueeze(0))
        return out[0].numpy()


def train(dataset: SequenceDataset, hyper: LstmHyper, seed: int = 0, variable: str = "",
          mu_box: Optional[Tuple[np.ndarray, np.ndarray]] = None, progress: bool = True):
    """Fit an LSTM with AdamW (decoupled weight decay); returns (model, per-epoch history)."""
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    if dataset.lookback != hyper.lookback:
        raise InvalidArgumentError(f"dataset lookback {dataset.lookback} != hyper lookback {hyper.lookback}")
    configure_torch()
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)

    network = LstmNetwork(dataset.inputs.shape[-1], dataset.targets.shape[-1], hyper.layers,
                          hyper.cells_per_layer, hyper.dropout)
    network.reset_parameters(generator)
    optimizer = torch.optim.AdamW(network.parameters(), lr=hyper.learning_rate, betas=(0.9, 0.999),
                                  eps=1e-8, weight_decay=hyper.weight_decay)

    train_idx, val_idx = dataset.split(hyper.validation_fraction)
    X = torch.as_tensor(dataset.inputs, dtype=DTYPE)
    Y = torch.as_tensor(dataset.targets, dtype=DTYPE)
    X_train, Y_train = X[train_idx], Y[train_idx]
    X_val, Y_val = X[val_idx], Y[val_idx]
    logger.info(f"Training {variable or 'LSTM'}: {len(train_idx)} train / {len(val_idx)} validation windows, "
                f"{hyper.layers}x{hyper.cells_per_layer} cells")

    history = []
    for epoch in tqdm(range(1, hyper.epochs + 1), desc=f"Training {variable}".strip(), disable=not progress):
        network.train()
        order = torch.randperm(len(train_idx), generator=generator)
        total = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            optimizer.zero_grad()
            loss = F.mse_loss(network(X_train[batch]), Y_train[batch])
            if not torch.isfinite(loss):
                logger.error(f"Non-finite training loss at epoch {epoch}")
                raise LstmDivergenceError(f"training loss diverged at epoch {epoch}", epoch=epoch)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        train_mse = total / len(order)

        val_mse = float("nan")
        if len(val_idx):
            network.eval()
            with torch.no_grad():
                val_mse = F.mse_loss(network(X_val), Y_val).item()
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})

    history = pd.DataFrame(history, columns=["epoch", "train_mse", "val_mse"])
    last = history.iloc[-1]
    logger.info(f"Finished {variable or 'LSTM'}: train_mse={last.train_mse:.3e} val_mse={last.val_mse:.3e}")
    network.eval()
    mu_lo, mu_hi = mu_box if mu_box is not None else (None, None)
    model = LstmModel(network, hyper, dataset.input_norm, dataset.target_norm, dataset.n_params,
                      seed=seed, variable=variable, mu_lo=mu_lo, mu_hi=mu_hi)
    return model, history


def write_history(history: pd.DataFrame, path) -> None:
    history.to_csv(path, index=False, float_format="%.17g")


def _loss(network: LstmNetwork, x: torch.Tensor, y: torch.Tensor, masks) -> torch.Tensor:
    return F.mse_loss(network(x, masks=masks), y)


def gradient_check(model: LstmModel, window: np.ndarray, target: np.ndarray, epsilon: float = 1e-5,
                   n_checks: int = 100, seed: int = 0,
                   masks: Optional[Sequence[torch.Tensor]] = None) -> float:
    """Largest relative difference between autograd and central-difference gradients.

    The relative difference is |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-3).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise InvalidArgumentError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    network = model.network
    network.eval()
    x = torch.as_tensor(np.asarray(window, dtype=float), dtype=DTYPE).reshape(1, *np.shape(window))
    y = torch.as_tensor(np.asarray(target, dtype=float), dtype=DTYPE).reshape(1, -1)

    network.zero_grad()
    _loss(network, x, y, masks).backward()
    params = list(network.parameters())
    analytic = [p.grad.detach().clone().reshape(-1) for p in params]

    locations = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(locations) > n_checks:
        chosen = rng.choice(len(locations), size=n_checks, replace=False)
        locations = [locations[c] for c in sorted(chosen)]

    worst = 0.0
    with torch.no_grad():
        for pi, j in locations:
            flat = params[pi].data.view(-1)
            original = flat[j].item()
            flat[j] = original + epsilon
            plus = _loss(network, x, y, masks).item()
            flat[j] = original - epsilon
            minus = _loss(network, x, y, masks).item()
            flat[j] = original
            fd = (plus - minus) / (2.0 * epsilon)
            ga = analytic[pi][j].item()
            worst = max(worst, abs(ga - fd) / max(abs(ga), abs(fd), 1e-3))
    return worst


def predict_autoregressive(model: LstmModel, seed_coeffs: np.ndarray, seed_times: np.ndarray, mu,
                           horizon_times: Sequence[float]) -> np.ndarray:
    """Roll the model forward; returns de-normalized coefficients, shape (len(horizon_times), N).

    ``seed_coeffs`` holds the last sigma_L known coefficient rows, oldest first.
    """
    seed_coeffs = np.asarray(seed_coeffs, dtype=float)
    seed_times = np.asarray(seed_times, dtype=float)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    horizon_times = np.asarray(horizon_times, dtype=float)
    if seed_coeffs.shape != (model.lookback, model.n_outputs) or seed_times.size != model.lookback:
        raise InvalidArgumentError(
            f"seed window must be ({model.lookback}, {model.n_outputs}), got {seed_coeffs.shape}"
        )
    if mu.size != model.n_params:
        raise InvalidArgumentError(f"mu has {mu.size} components, model expects {model.n_params}")
    if model.mu_lo is not None and (np.any(mu < model.mu_lo) or np.any(mu > model.mu_hi)):
        logger.warning(f"mu={mu.tolist()} lies outside the trained box [{model.mu_lo}, {model.mu_hi}]")

    coeffs = list(seed_coeffs)
    times = list(seed_times)
    out = np.empty((horizon_times.size, model.n_outputs))
    for step, t in enumerate(horizon_times):
        recent = slice(len(coeffs) - model.lookback, len(coeffs))
        rows = window_rows(mu, np.asarray(times[recent])[::-1], np.asarray(coeffs[recent])[::-1])
        prediction = model.target_norm.invert(model.forward(model.input_norm.apply(rows)))
        if not np.all(np.isfinite(prediction)):
            logger.error(f"Rollout produced non-finite coefficients at step {step}")
            raise RolloutDivergenceError(f"rollout diverged at step {step}", step=step)
        out[step] = prediction
        coeffs.append(prediction)
        times.append(float(t))
    return out


# --- archive -------------------------------------------------------------------

def save_model(model: LstmModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net = model.network
    payload = {
        "variable": model.variable,
        "fingerprint": model.fingerprint,
        "hyper": model.hyper.model_dump(),
        "seed": model.seed,
        "n_params": model.n_params,
        "input_size": net.input_size,
        "output_size": net.output_size,
        "input_mid": torch.as_tensor(model.input_norm.mid),
        "input_half": torch.as_tensor(model.input_norm.half),
        "target_mid": torch.as_tensor(model.target_norm.mid),
        "target_half": torch.as_tensor(model.target_norm.half),
        "mu_lo": None if model.mu_lo is None else torch.as_tensor(model.mu_lo),
        "mu_hi": None if model.mu_hi is None else torch.as_tensor(model.mu_hi),
        "state_dict": net.state_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_model(path) -> LstmModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    hyper = LstmHyper(**payload["hyper"])
    network = LstmNetwork(payload["input_size"], payload["output_size"], hyper.layers,
                          hyper.cells_per_layer, hyper.dropout)
    network.load_state_dict(payload["state_dict"])
    network.eval()

    def arr(key) -> Optional[np.ndarray]:
        value = payload[key]
        return None if value is None else value.numpy().astype(float)

    return LstmModel(
        network=network, hyper=hyper,
        input_norm=Normalizer(arr("input_mid"), arr("input_half")),
        target_norm=Normalizer(arr("target_mid"), arr("target_half")),
        n_params=payload["n_params"], seed=payload["seed"], variable=payload["variable"],
        mu_lo=arr("mu_lo"), mu_hi=arr("mu_hi"), fingerprint=payload["fingerprint"],
    )
