"""Triplet training of the window embedder.

Windows are labeled by the driver identity of their source video; batches
sample a few identities with several windows each, mine triplets within the
batch (anchor and positive share a driver, the negative does not), and update
all parameters with Adam on analytically computed gradients. Everything is
deterministic given the model seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .catalog import Catalog
from .embedder import (
    AdjacencyGraph,
    EmbedderConfig,
    EmbedderParams,
    backward_batch,
    forward_batch,
    init_params,
)
from .feature_store import FeatureStore, NormalizationParams, normalize
from .scoring import window_starts


class TrainingError(ValueError):
    pass


class NoValidTripletError(TrainingError):
    """Fewer than two driver identities have usable windows."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite checkpoint and log."""

    def __init__(self, params: EmbedderParams, log: "TrainingLog", epoch: int):
        super().__init__(f"training diverged in epoch {epoch}")
        self.params = params
        self.log = log


@dataclass(frozen=True)
class TrainHyper:
    """Optimization settings.

    Each step draws batch/windows_per_identity identities and
    windows_per_identity windows for each, producing one mined triplet per
    window, i.e. ``batch`` triplets per step. mining is one of semi-hard
    (hardest negative farther than the positive, falling back to the hardest
    overall), hardest, or random.
    """

    lr: float = 1e-3
    batch: int = 64
    epochs: int = 30
    margin: float = 0.2
    mining: str = "semi-hard"
    windows_per_identity: int = 4

    def __post_init__(self) -> None:
        if self.mining not in ("semi-hard", "hardest", "random"):
            raise TrainingError(f"unknown mining scheme {self.mining!r}")
        if self.batch % self.windows_per_identity != 0:
            raise TrainingError("batch must be a multiple of windows_per_identity")
        if self.windows_per_identity < 2:
            raise TrainingError("windows_per_identity must be >= 2")
        if self.batch // self.windows_per_identity < 2:
            raise TrainingError("each batch needs windows from >= 2 identities")
        if self.lr <= 0 or self.epochs < 1 or self.margin < 0:
            raise TrainingError("lr > 0, epochs >= 1, margin >= 0 required")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    active_fraction: float
    probe_loss: float


@dataclass
class TrainingLog:
    steps_per_epoch: int = 0
    num_windows: int = 0
    num_identities: int = 0
    initial_probe_loss: float = float("nan")
    epochs: list[EpochStats] = field(default_factory=list)
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "steps_per_epoch": self.steps_per_epoch,
            "num_windows": self.num_windows,
            "num_identities": self.num_identities,
            "initial_probe_loss": self.initial_probe_loss,
            "diverged": self.diverged,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "mean_loss": e.mean_loss,
                    "active_fraction": e.active_fraction,
                    "probe_loss": e.probe_loss,
                }
                for e in self.epochs
            ],
        }


class Adam:
    """Adaptive first-order optimizer with bias-corrected moments."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _collect_windows(
    store: FeatureStore,
    catalog: Catalog,
    development_ids: set[str],
    config: EmbedderConfig,
    normalization: NormalizationParams,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Materialize every training window.

    Returns (windows (N, F, D), label indices (N,), label names). Videos
    shorter than one window are skipped.
    """
    videos = [
        v
        for v in catalog.videos()
        if v.driver in development_ids and v.target in development_ids
    ]
    if not videos:
        raise TrainingError("no videos whose driver and target are development identities")
    missing = [v.video_id for v in videos if v.video_id not in store]
    if missing:
        raise TrainingError(
            f"{len(missing)} development videos lack stored features, "
            f"e.g. {missing[:3]}"
        )
    windows: list[np.ndarray] = []
    labels: list[str] = []
    stride = config.window_len // 2
    for video in sorted(videos, key=lambda v: v.video_id):
        frames = normalization.apply(store.get(video.video_id).frames)
        for start in window_starts(frames.shape[0], config.window_len, stride):
            windows.append(frames[start : start + config.window_len])
            labels.append(video.driver)
    if not windows:
        raise TrainingError("every development video is shorter than one window")
    names = sorted(set(labels))
    if len(names) < 2:
        raise NoValidTripletError(
            f"triplets need >= 2 driver identities with windows, got {len(names)}"
        )
    index = {name: i for i, name in enumerate(names)}
    return np.stack(windows), np.array([index[l] for l in labels]), names


def _squared_distances(z: np.ndarray) -> np.ndarray:
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    return np.maximum(d2, 0.0)


def _mine(
    d2: np.ndarray, labels: np.ndarray, mining: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Pick one (positive, negative) per anchor from within-batch distances."""
    n = d2.shape[0]
    pos = np.empty(n, dtype=np.int64)
    neg = np.empty(n, dtype=np.int64)
    for i in range(n):
        same = np.flatnonzero(labels == labels[i])
        same = same[same != i]
        diff = np.flatnonzero(labels != labels[i])
        if same.size == 0:
            pos[i] = i
        elif mining == "random":
            pos[i] = rng.choice(same)
        else:
            pos[i] = same[np.argmax(d2[i, same])]
        d_pos = d2[i, pos[i]]
        if mining == "random":
            neg[i] = rng.choice(diff)
        elif mining == "hardest":
            neg[i] = diff[np.argmin(d2[i, diff])]
        else:
            ahead = diff[d2[i, diff] > d_pos]
            neg[i] = ahead[np.argmin(d2[i, ahead])] if ahead.size else diff[
                np.argmin(d2[i, diff])
            ]
    return pos, neg


def _batch_loss_grad(
    params: EmbedderParams,
    batch_windows: np.ndarray,
    batch_labels: np.ndarray,
    margin: float,
    mining: str,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, float]:
    z, state = forward_batch(params, batch_windows)
    d2 = _squared_distances(z)
    pos, neg = _mine(d2, batch_labels, mining, rng)
    n = z.shape[0]
    terms = d2[np.arange(n), pos] - d2[np.arange(n), neg] + margin
    active = terms > 0.0
    loss = float(np.maximum(terms, 0.0).mean())

    d_z = np.zeros_like(z)
    coeff = 2.0 / n
    for i in np.flatnonzero(active):
        p, q = pos[i], neg[i]
        d_z[i] += coeff * (z[q] - z[p])
        d_z[p] += coeff * (z[p] - z[i])
        d_z[q] += coeff * (z[i] - z[q])
    grad = backward_batch(params, state, d_z)
    return loss, grad, float(active.mean())


def _make_probe(
    windows: np.ndarray,
    labels: np.ndarray,
    size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    anchors, positives, negatives = [], [], []
    present = np.unique(labels)
    for _ in range(size):
        label = rng.choice(present)
        own = np.flatnonzero(labels == label)
        other = np.flatnonzero(labels != label)
        a = rng.choice(own)
        p = rng.choice(own[own != a]) if own.size > 1 else a
        negatives.append(windows[rng.choice(other)])
        anchors.append(windows[a])
        positives.append(windows[p])
    return np.stack(anchors), np.stack(positives), np.stack(negatives)


def probe_loss(
    params: EmbedderParams,
    probe: tuple[np.ndarray, np.ndarray, np.ndarray],
    margin: float,
) -> float:
    anchors, positives, negatives = probe
    n = anchors.shape[0]
    z, _ = forward_batch(params, np.concatenate([anchors, positives, negatives]))
    za, zp, zn = z[:n], z[n : 2 * n], z[2 * n :]
    terms = np.sum((za - zp) ** 2, axis=1) - np.sum((za - zn) ** 2, axis=1) + margin
    return float(np.maximum(terms, 0.0).mean())


def train(
    store: FeatureStore,
    catalog: Catalog,
    development_ids: Iterable[str],
    config: EmbedderConfig,
    hyper: TrainHyper = TrainHyper(),
    normalization: NormalizationParams | None = None,
    graph: AdjacencyGraph | None = None,
) -> tuple[EmbedderParams, TrainingLog]:
    """Fit the embedder on development-split videos.

    Feature normalization is fitted on the same videos when not supplied.
    Raises NoValidTripletError with fewer than two driver identities and
    TrainingDiverged (carrying the last finite checkpoint) if the loss turns
    non-finite.
    """
    dev_ids = set(development_ids)
    dev_videos = sorted(
        v.video_id
        for v in catalog.videos()
        if v.driver in dev_ids and v.target in dev_ids
    )
    if normalization is None:
        if not dev_videos:
            raise TrainingError("no development videos to fit normalization on")
        normalization = normalize(store, [v for v in dev_videos if v in store])

    windows, labels, names = _collect_windows(store, catalog, dev_ids, config, normalization)

    per_step_ids = hyper.batch // hyper.windows_per_identity
    k = hyper.windows_per_identity
    steps_per_epoch = max(1, int(round(windows.shape[0] / hyper.batch)))

    # init_params consumes config.seed itself; batch sampling and the probe
    # get independent child streams of the same seed
    sample_seq, probe_seq = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(sample_seq)
    probe = _make_probe(windows, labels, hyper.batch, np.random.default_rng(probe_seq))

    params = init_params(config, normalization, graph)
    adam = Adam(params.size, hyper.lr)

    log = TrainingLog(
        steps_per_epoch=steps_per_epoch,
        num_windows=int(windows.shape[0]),
        num_identities=len(names),
        initial_probe_loss=probe_loss(params, probe, hyper.margin),
    )
    last_good = params.copy()

    by_label = [np.flatnonzero(labels == i) for i in range(len(names))]
    all_label_ids = np.arange(len(names))

    for epoch in range(1, hyper.epochs + 1):
        losses, actives = [], []
        for _ in range(steps_per_epoch):
            if len(names) >= per_step_ids:
                chosen = rng.choice(all_label_ids, size=per_step_ids, replace=False)
            else:
                extra = rng.choice(all_label_ids, size=per_step_ids - len(names), replace=True)
                chosen = np.concatenate([all_label_ids, extra])
            idx_chunks = []
            for label in chosen:
                pool = by_label[label]
                idx_chunks.append(rng.choice(pool, size=k, replace=pool.size < k))
            idx = np.concatenate(idx_chunks)
            try:
                loss, grad, frac = _batch_loss_grad(
                    params, windows[idx], labels[idx], hyper.margin, hyper.mining, rng
                )
            except Exception as exc:
                if "non-finite" in str(exc):
                    log.diverged = True
                    raise TrainingDiverged(last_good, log, epoch) from exc
                raise
            if not np.isfinite(loss):
                log.diverged = True
                raise TrainingDiverged(last_good, log, epoch)
            adam.step(params.flat, grad)
            losses.append(loss)
            actives.append(frac)
        if not np.all(np.isfinite(params.flat)):
            log.diverged = True
            raise TrainingDiverged(last_good, log, epoch)
        log.epochs.append(
            EpochStats(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                active_fraction=float(np.mean(actives)),
                probe_loss=probe_loss(params, probe, hyper.margin),
            )
        )
        last_good = params.copy()

    return params, log
