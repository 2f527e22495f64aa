"""Shared builders and slow reference implementations used across the tests.

The reference implementations here deliberately take the obvious, quadratic
route (explicit double loops, exhaustive candidate filtering) so they can
cross-check the optimized library code.
"""

from __future__ import annotations

import numpy as np

from avatarprint.catalog import (
    AgeRange,
    AvatarVideo,
    Catalog,
    Dataset,
    Ethnicity,
    Gender,
    Generator,
    IdentityRecord,
    VIDEOS_PER_IDENTITY,
    cross_video_id,
)
from avatarprint.feature_store import (
    FeatureKind,
    FeatureSequence,
    FeatureStore,
    create_store,
)
from avatarprint.protocol import Split


# -- full-scale benchmark catalog --------------------------------------------

# Soft-biometric annotations for the evaluation identities, chosen to match
# the published marginal distributions (CREMA-D: 12/12 gender, 8/4/8/4
# ethnicity, 9/13/2 age bins; RAVDESS: 4/4 gender, 2/6 ethnicity, 7/1 age).
_CREMA_EVAL_GENDERS = [Gender.FEMALE, Gender.MALE] * 12
_CREMA_EVAL_ETHNICITIES = (
    [Ethnicity.AFRICAN_AMERICAN] * 8
    + [Ethnicity.ASIAN] * 4
    + [Ethnicity.CAUCASIAN] * 8
    + [Ethnicity.HISPANIC] * 4
)
_CREMA_EVAL_AGES = [AgeRange.R20_30] * 9 + [AgeRange.R31_45] * 13 + [AgeRange.R46_60] * 2
_RAV_EVAL_GENDERS = [Gender.FEMALE, Gender.MALE] * 4
_RAV_EVAL_ETHNICITIES = [Ethnicity.ASIAN] * 2 + [Ethnicity.CAUCASIAN] * 6
_RAV_EVAL_AGES = [AgeRange.R20_30] * 7 + [AgeRange.R31_45]


def spread_cross(side: list[str], total: int) -> list[tuple[str, str, int]]:
    """Distribute ``total`` cross-reenactment videos over the drivers of one
    split side.

    Drivers receive near-equal quotas (leftovers go to the first drivers in
    order). Each driver cycles through up to eight candidate targets, moving
    to its next source clip after every full cycle, so no
    (driver, target, clip) triple repeats.
    """
    n = len(side)
    n_targets = min(8, n - 1)
    base, extra = divmod(total, n)
    out: list[tuple[str, str, int]] = []
    for i, driver in enumerate(side):
        quota = base + (1 if i < extra else 0)
        targets = [side[(i + 1 + k) % n] for k in range(n_targets)]
        for v in range(quota):
            out.append((driver, targets[v % n_targets], v // n_targets))
    return out


def benchmark_catalog() -> tuple[Catalog, Split]:
    """Full-scale catalog reproducing the published per-side video counts.

    85 CREMA-D and 24 RAVDESS identities; the first 24 / 8 form the
    evaluation side. Every identity has one self-reenactment per source clip
    per generator (72 / 60 clips); cross-reenactments are spread so each
    (dataset, side) matches the published totals for every generator.
    """
    crema_ids = [f"crem{i:03d}" for i in range(85)]
    rav_ids = [f"ravd{i:03d}" for i in range(24)]

    identities: list[IdentityRecord] = []
    for i, ident in enumerate(crema_ids):
        if i < 24:
            rec = IdentityRecord(
                ident,
                Dataset.CREMA_D,
                _CREMA_EVAL_GENDERS[i],
                _CREMA_EVAL_ETHNICITIES[i],
                _CREMA_EVAL_AGES[i],
            )
        else:
            rec = IdentityRecord(
                ident, Dataset.CREMA_D, Gender.UNKNOWN, Ethnicity.UNKNOWN, AgeRange.UNKNOWN
            )
        identities.append(rec)
    for i, ident in enumerate(rav_ids):
        if i < 8:
            rec = IdentityRecord(
                ident,
                Dataset.RAVDESS,
                _RAV_EVAL_GENDERS[i],
                _RAV_EVAL_ETHNICITIES[i],
                _RAV_EVAL_AGES[i],
            )
        else:
            rec = IdentityRecord(
                ident, Dataset.RAVDESS, Gender.UNKNOWN, Ethnicity.UNKNOWN, AgeRange.UNKNOWN
            )
        identities.append(rec)

    # (dev side, eval side, dev cross total, eval cross total) per generator
    layout = {
        Dataset.CREMA_D: (crema_ids[24:], crema_ids[:24], 8280, 3438),
        Dataset.RAVDESS: (rav_ids[8:], rav_ids[:8], 1905, 840),
    }
    videos: list[AvatarVideo] = []
    for dataset, (dev, ev, dev_cross, eval_cross) in layout.items():
        clips = VIDEOS_PER_IDENTITY[dataset]
        triples = spread_cross(dev, dev_cross) + spread_cross(ev, eval_cross)
        for gen in Generator:
            for ident in dev + ev:
                for clip in range(clips):
                    videos.append(
                        AvatarVideo(
                            cross_video_id(gen, ident, ident, clip),
                            dataset, gen, ident, ident, clip,
                        )
                    )
            for driver, target, clip in triples:
                videos.append(
                    AvatarVideo(
                        cross_video_id(gen, target, driver, clip),
                        dataset, gen, target, driver, clip,
                    )
                )

    split = Split(
        development=frozenset(crema_ids[24:] + rav_ids[8:]),
        evaluation=frozenset(crema_ids[:24] + rav_ids[:8]),
    )
    return Catalog(identities, videos), split


# -- small hand-built catalogs ------------------------------------------------


def tiny_catalog(
    n_ids: int = 4,
    clips: int = 3,
    cross_per_driver: int = 2,
    dataset: Dataset = Dataset.CREMA_D,
    generators: tuple[Generator, ...] = (Generator.GAGA,),
) -> Catalog:
    """Minimal complete catalog: every identity has ``clips`` self videos and
    drives its next ``cross_per_driver`` neighbours (clip 0) per generator."""
    ids = [f"id{i:02d}" for i in range(n_ids)]
    identities = [
        IdentityRecord(i, dataset, Gender.UNKNOWN, Ethnicity.UNKNOWN, AgeRange.UNKNOWN)
        for i in ids
    ]
    videos = []
    for gen in generators:
        for idx, ident in enumerate(ids):
            for clip in range(clips):
                videos.append(
                    AvatarVideo(
                        cross_video_id(gen, ident, ident, clip),
                        dataset, gen, ident, ident, clip,
                    )
                )
            for k in range(min(cross_per_driver, n_ids - 1)):
                target = ids[(idx + 1 + k) % n_ids]
                videos.append(
                    AvatarVideo(
                        cross_video_id(gen, target, ident, 0),
                        dataset, gen, target, ident, 0,
                    )
                )
    return Catalog(identities, videos)


def random_store(
    path,
    video_ids,
    dim: int,
    rng: np.random.Generator,
    frames=(40, 80),
    kind: FeatureKind = FeatureKind.EMBEDDING,
) -> FeatureStore:
    """Store of Gaussian feature sequences, one per id, varied lengths."""
    writer = create_store(path, kind, dim)
    lo, hi = frames if isinstance(frames, tuple) else (frames, frames)
    for vid in video_ids:
        t = int(rng.integers(lo, hi + 1))
        writer.put(FeatureSequence(vid, kind, rng.normal(size=(t, dim)), 30.0))
    return writer.seal()


# -- reference implementations -------------------------------------------------


def pairwise_auc(genuine, impostor) -> float:
    """AUC straight from its definition: compare every genuine score with
    every impostor score, half credit for ties."""
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    wins = np.sum(g[:, None] > i[None, :]) + 0.5 * np.sum(g[:, None] == i[None, :])
    return 100.0 * float(wins) / (g.size * i.size)


def double_loop_pair_score(first: np.ndarray, second: np.ndarray) -> float:
    """Mean pairwise cosine of two window-embedding sets, one pair at a time."""
    total = 0.0
    for u in first:
        for v in second:
            total += float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return total / (len(first) * len(second))


def mean_triplet_loss(params, anchors, positives, negatives, margin: float) -> float:
    """Batch triplet objective computed from embeddings alone (no gradient
    code involved), for finite-difference checks."""
    from avatarprint.embedder import forward_batch

    n = anchors.shape[0]
    z, _ = forward_batch(params, np.concatenate([anchors, positives, negatives]))
    za, zp, zn = z[:n], z[n : 2 * n], z[2 * n :]
    terms = ((za - zp) ** 2).sum(axis=1) - ((za - zn) ** 2).sum(axis=1) + margin
    return float(np.maximum(terms, 0.0).mean())


def finite_difference_grad(loss_fn, flat: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences over every entry of ``flat``, mutated in place."""
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn()
        flat[i] = orig - h
        minus = loss_fn()
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-component relative disagreement, floored so that entries
    which are zero in both vectors compare by absolute difference."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_embedder_setup(rng: np.random.Generator, with_graph: bool):
    """Small random model plus window triplets whose hinge terms sit safely
    away from the kink, so central differences stay clean."""
    from avatarprint.embedder import (
        AdjacencyGraph,
        EmbedderConfig,
        GraphEncoderConfig,
        init_params,
    )

    if with_graph:
        nodes = int(rng.integers(3, 6))
        input_dim = 2 * nodes
        order = [int(i) for i in rng.permutation(nodes)]
        edges = {tuple(sorted(p)) for p in zip(order[:-1], order[1:])}
        graph = AdjacencyGraph(nodes, tuple(sorted(edges)))
        graph_cfg = GraphEncoderConfig(
            layers=int(rng.integers(1, 3)), hidden_dim=int(rng.integers(4, 7))
        )
    else:
        input_dim = int(rng.integers(4, 9))
        graph, graph_cfg = None, None

    heads = int(rng.integers(1, 3))
    attention_dim = heads * int(rng.integers(2, 4))
    attn_in = graph_cfg.hidden_dim if graph_cfg else input_dim
    config = EmbedderConfig(
        input_dim=input_dim,
        heads=heads,
        attention_dim=attention_dim,
        projection_dim=int(rng.integers(2, min(4, attn_in - 1) + 1)),
        window_len=int(rng.choice([4, 6])),
        graph=graph_cfg,
        seed=int(rng.integers(0, 2**31)),
    )
    params = init_params(config, graph=graph)

    margin = 1.0
    batch = 2
    for _ in range(50):
        anchors = rng.normal(size=(batch, config.window_len, input_dim))
        positives = anchors + 0.1 * rng.normal(size=anchors.shape)
        negatives = rng.normal(size=anchors.shape)
        loss = mean_triplet_loss(params, anchors, positives, negatives, margin)
        terms_ok = _hinge_terms_clear(params, anchors, positives, negatives, margin)
        if loss > 0.0 and terms_ok:
            return params, anchors, positives, negatives, margin
    raise AssertionError("could not find a triplet batch clear of the hinge kink")


def _hinge_terms_clear(params, anchors, positives, negatives, margin, gap=0.05) -> bool:
    from avatarprint.embedder import forward_batch

    n = anchors.shape[0]
    z, _ = forward_batch(params, np.concatenate([anchors, positives, negatives]))
    za, zp, zn = z[:n], z[n : 2 * n], z[2 * n :]
    terms = ((za - zp) ** 2).sum(axis=1) - ((za - zn) ** 2).sum(axis=1) + margin
    return bool(np.all(np.abs(terms) > gap))


def enumerate_trials_bruteforce(
    catalog: Catalog, split: Split, include_identical: bool
) -> tuple[set[tuple[str, str]], set[tuple[str, str]]]:
    """Exhaustive trial enumeration by scanning every video pair.

    Returns (genuine, impostor) sets of (enroll, test) video id pairs.
    Quadratic in the number of videos; only for very small catalogs.
    """
    eval_ids = split.evaluation
    vids = list(catalog.videos())
    genuine: set[tuple[str, str]] = set()
    impostor: set[tuple[str, str]] = set()
    for e in vids:
        if e.target != e.driver or e.driver not in eval_ids:
            continue
        for t in vids:
            if (t.dataset, t.generator) != (e.dataset, e.generator):
                continue
            if t.target != e.target or t.driver not in eval_ids:
                continue
            if t.driver == t.target:
                if include_identical or t.video_id != e.video_id:
                    genuine.add((e.video_id, t.video_id))
            else:
                impostor.add((e.video_id, t.video_id))
    return genuine, impostor
