"""Video-to-video verification scoring.

Each video is cut into fixed-length windows (stride = half a window,
trailing frames dropped), every window is embedded, and a pair of videos is
scored by the mean of the full pairwise cosine matrix between their window
embeddings. Multiple models fuse by averaging their per-trial scores.
Window embeddings are cached per (video, model, window length) so arbitrarily
many trials touch each video only once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedder import EmbedderParams, forward_batch
from .feature_store import FeatureStore


class ScoringError(ValueError):
    pass


def window_starts(num_frames: int, window_len: int, stride: int) -> list[int]:
    """Start indices 0, s, 2s, ... of complete windows; empty when the video
    is shorter than one window."""
    if window_len < 2 or stride < 1:
        raise ScoringError("window_len must be >= 2 and stride >= 1")
    if num_frames < window_len:
        return []
    count = (num_frames - window_len) // stride + 1
    return [i * stride for i in range(count)]


@dataclass(frozen=True)
class WindowSet:
    video_id: str
    starts: tuple[int, ...]
    window_len: int
    stride: int
    skipped: bool  # video shorter than one window

    def __len__(self) -> int:
        return len(self.starts)


def make_windows(
    num_frames: int, window_len: int, stride: int | None = None, video_id: str = ""
) -> WindowSet:
    """Window grid over a video of ``num_frames`` frames. The stride defaults
    to half the window length (which must then be even)."""
    if stride is None:
        if window_len % 2 != 0:
            raise ScoringError("window_len must be even for the default half-window stride")
        stride = window_len // 2
    starts = window_starts(num_frames, window_len, stride)
    return WindowSet(
        video_id=video_id,
        starts=tuple(starts),
        window_len=window_len,
        stride=stride,
        skipped=not starts,
    )


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ScoringError(f"cosine needs two vectors of equal length, got {u.shape}/{v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ScoringError("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def video_window_embeddings(
    params: EmbedderParams, store: FeatureStore, video_id: str
) -> np.ndarray | None:
    """All window embeddings of one video as an (X, d) matrix, or None when
    the video is shorter than one window. Normalization parameters stored
    with the model are applied to the frames first."""
    seq = store.get(video_id)
    frames = seq.frames
    if params.normalization is not None:
        frames = params.normalization.apply(frames)
    ws = make_windows(frames.shape[0], params.config.window_len)
    if ws.skipped:
        return None
    windows = np.stack([frames[s : s + ws.window_len] for s in ws.starts])
    z, _ = forward_batch(params, windows)
    return z


class EmbeddingCache:
    """Window embeddings keyed by (video_id, model_id, window_len).

    model_id must distinguish both the architecture and the training
    condition of the parameters it stands for.
    """

    def __init__(self) -> None:
        self._data: dict[tuple[str, str, int], np.ndarray | None] = {}
        self.computes = 0

    def get(
        self, params: EmbedderParams, store: FeatureStore, video_id: str, model_id: str
    ) -> np.ndarray | None:
        key = (video_id, model_id, params.config.window_len)
        if key not in self._data:
            self._data[key] = video_window_embeddings(params, store, video_id)
            self.computes += 1
        return self._data[key]


@dataclass(frozen=True)
class PairScore:
    enroll_video: str
    test_video: str
    score: float | None  # None when either side has no complete window
    per_model: tuple[tuple[str, float], ...] = ()

    @property
    def unscorable(self) -> bool:
        return self.score is None


def _mean_pairwise_cosine(first: np.ndarray, second: np.ndarray) -> float:
    rows = first / np.linalg.norm(first, axis=1, keepdims=True)
    cols = second / np.linalg.norm(second, axis=1, keepdims=True)
    sims = rows @ cols.T
    # np.sum uses pairwise accumulation, keeping the mean stable for large X*Y
    return float(sims.sum() / sims.size)


def score_pair(
    params: EmbedderParams,
    store: FeatureStore,
    enroll_video: str,
    test_video: str,
    cache: EmbeddingCache | None = None,
    model_id: str = "model",
) -> PairScore:
    """Mean over the full pairwise cosine matrix of the two videos' window
    embeddings. The two operands are put in a canonical order first so the
    score is exactly symmetric in its arguments."""
    if cache is not None:
        z_e = cache.get(params, store, enroll_video, model_id)
        z_t = cache.get(params, store, test_video, model_id)
    else:
        z_e = video_window_embeddings(params, store, enroll_video)
        z_t = video_window_embeddings(params, store, test_video)
    if z_e is None or z_t is None:
        return PairScore(enroll_video, test_video, None)
    if enroll_video <= test_video:
        score = _mean_pairwise_cosine(z_e, z_t)
    else:
        score = _mean_pairwise_cosine(z_t, z_e)
    return PairScore(enroll_video, test_video, score)


def fuse(scores: Sequence[PairScore]) -> PairScore:
    """Mean of per-model scores for one trial. Unscorable for any model
    makes the fused trial unscorable."""
    if not scores:
        raise ScoringError("nothing to fuse")
    pair = (scores[0].enroll_video, scores[0].test_video)
    if any((s.enroll_video, s.test_video) != pair for s in scores):
        raise ScoringError("fuse got scores from different trials")
    if any(s.unscorable for s in scores):
        return PairScore(pair[0], pair[1], None)
    return PairScore(pair[0], pair[1], float(np.mean([s.score for s in scores])))


@dataclass(frozen=True)
class ScoreRow:
    trial_id: str
    enroll_video: str
    test_video: str
    label: int
    model: str
    score: float | None


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)
    missing_videos: list[str] = field(default_factory=list)
    unscorable_trials: list[str] = field(default_factory=list)


FUSION_MODEL = "fusion"


def score_trials(
    models: Mapping[str, tuple[EmbedderParams, FeatureStore]],
    trials: Iterable,
    cache: EmbeddingCache | None = None,
    include_fusion: bool = True,
    zscore_fusion: bool = False,
) -> ScoreTable:
    """Score every trial with every model, in trial order.

    ``models`` maps a model id to its parameters and feature store; ids must
    encode the training condition so cached embeddings never alias. Trials
    whose videos lack features are flagged in missing_videos and get no rows.
    With more than one model a fused row (mean of per-model scores, optionally
    z-scored per model first) is appended per trial under model "fusion".
    """
    if not models:
        raise ScoringError("need at least one model")
    cache = cache if cache is not None else EmbeddingCache()
    table = ScoreTable()
    missing: set[str] = set()
    model_ids = sorted(models)

    per_model_scores: dict[str, list[float | None]] = {m: [] for m in model_ids}
    kept_trials = []
    for trial in trials:
        absent = [
            vid
            for vid in (trial.enroll_video, trial.test_video)
            for m in model_ids
            if vid not in models[m][1]
        ]
        if absent:
            missing.update(absent)
            continue
        kept_trials.append(trial)
        for m in model_ids:
            params, store = models[m]
            ps = score_pair(params, store, trial.enroll_video, trial.test_video, cache, m)
            per_model_scores[m].append(ps.score)

    fusion_inputs: dict[str, list[float | None]] = per_model_scores
    if include_fusion and len(model_ids) > 1 and zscore_fusion:
        fusion_inputs = {}
        for m in model_ids:
            vals = np.array([s for s in per_model_scores[m] if s is not None])
            mu = float(vals.mean()) if vals.size else 0.0
            sd = float(vals.std()) if vals.size else 1.0
            sd = sd if sd > 0 else 1.0
            fusion_inputs[m] = [
                None if s is None else (s - mu) / sd for s in per_model_scores[m]
            ]

    for i, trial in enumerate(kept_trials):
        for m in model_ids:
            score = per_model_scores[m][i]
            table.rows.append(
                ScoreRow(trial.trial_id, trial.enroll_video, trial.test_video,
                         trial.label, m, score)
            )
        if include_fusion and len(model_ids) > 1:
            subs = [fusion_inputs[m][i] for m in model_ids]
            fused = None if any(s is None for s in subs) else float(np.mean(subs))
            table.rows.append(
                ScoreRow(trial.trial_id, trial.enroll_video, trial.test_video,
                         trial.label, FUSION_MODEL, fused)
            )
        if any(per_model_scores[m][i] is None for m in model_ids):
            table.unscorable_trials.append(trial.trial_id)

    table.missing_videos = sorted(missing)
    return table


SCORE_HEADER = ["trial_id", "enroll_video", "test_video", "label", "model", "score"]


def write_score_table(table: ScoreTable, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for row in table.rows:
            writer.writerow(
                [row.trial_id, row.enroll_video, row.test_video, row.label, row.model,
                 "" if row.score is None else repr(row.score)]
            )


def read_score_table(path: str | Path) -> ScoreTable:
    table = ScoreTable()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ScoringError(f"{path}: bad header {header!r}")
        for row in reader:
            trial_id, enroll, test, label, model, score = row
            table.rows.append(
                ScoreRow(trial_id, enroll, test, int(label), model,
                         None if score == "" else float(score))
            )
    return table
