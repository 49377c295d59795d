"""Probe/gallery retrieval metrics: Rank-k, mAP, mINP, with identity-aware exclusions.

All metrics are percentages. Ranking uses a stable sort, so ties in distance
fall back to gallery order. A probe with no non-excluded true match in the
gallery is dropped and counted, never scored as a miss.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from meshgait.errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

PROTOCOLS = ("gait3d", "cross_view")


def pairwise_distances(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distance between flattened embeddings -> [num_probes, num_gallery]."""
    probes = np.asarray(probes, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if probes.shape[1:] != gallery.shape[1:]:
        raise ShapeError(f"probe shape {probes.shape[1:]} != gallery shape {gallery.shape[1:]}")
    p = probes.reshape(len(probes), -1)
    g = gallery.reshape(len(gallery), -1)
    out = np.empty((len(p), len(g)))
    for i, row in enumerate(p):
        out[i] = np.sqrt(((g - row) ** 2).sum(axis=1))
    return out


def exclusion_mask(
    probe_ids,
    gallery_ids,
    probe_seqs=None,
    gallery_seqs=None,
    probe_views=None,
    gallery_views=None,
    cross_view: bool = False,
) -> np.ndarray:
    """Gallery entries to ignore: same identity AND (same sequence, or same view if cross-view)."""
    pid, gid = np.asarray(probe_ids), np.asarray(gallery_ids)
    same_id = pid[:, None] == gid[None, :]
    other = np.zeros_like(same_id)
    if probe_seqs is not None and gallery_seqs is not None:
        other |= np.asarray(probe_seqs)[:, None] == np.asarray(gallery_seqs)[None, :]
    if cross_view:
        if probe_views is None or gallery_views is None:
            raise ConfigError("cross-view exclusion needs probe and gallery views")
        other |= np.asarray(probe_views)[:, None] == np.asarray(gallery_views)[None, :]
    return same_id & other


@dataclass
class RetrievalStats:
    first_match: np.ndarray  # 1-based rank of the first true match per scored probe
    ap: np.ndarray
    inp: np.ndarray
    scored: np.ndarray  # indices of probes that were scored
    dropped: int


def retrieval_stats(dist, probe_labels, gallery_labels, exclusions=None) -> RetrievalStats:
    dist = np.asarray(dist, dtype=np.float64)
    pl, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    if dist.shape != (len(pl), len(gl)):
        raise ShapeError(f"distance matrix {dist.shape} does not match {len(pl)} probes x {len(gl)} gallery")
    if exclusions is None:
        exclusions = np.zeros(dist.shape, dtype=bool)
    first, aps, inps, scored = [], [], [], []
    for i in range(len(pl)):
        order = np.argsort(dist[i], kind="stable")
        order = order[~exclusions[i, order]]
        hits = np.flatnonzero(gl[order] == pl[i]) + 1  # 1-based ranks of true matches
        if hits.size == 0:
            continue
        n = np.arange(1, hits.size + 1)
        first.append(hits[0])
        aps.append(np.mean(n / hits))
        inps.append(hits.size / hits[-1])
        scored.append(i)
    dropped = len(pl) - len(scored)
    if dropped:
        log.warning("%d of %d probes dropped: no true match left in the gallery", dropped, len(pl))
    return RetrievalStats(
        np.array(first, dtype=np.int64), np.array(aps), np.array(inps), np.array(scored, dtype=np.int64), dropped
    )


def _pct(values: np.ndarray) -> float:
    return float(100.0 * values.mean()) if values.size else float("nan")


def rank_k(dist, probe_labels, gallery_labels, k: int = 1, exclusions=None) -> float:
    s = retrieval_stats(dist, probe_labels, gallery_labels, exclusions)
    return _pct((s.first_match <= k).astype(float))


def mean_ap(dist, probe_labels, gallery_labels, exclusions=None) -> float:
    return _pct(retrieval_stats(dist, probe_labels, gallery_labels, exclusions).ap)


def mean_inp(dist, probe_labels, gallery_labels, exclusions=None) -> float:
    return _pct(retrieval_stats(dist, probe_labels, gallery_labels, exclusions).inp)


@dataclass
class EvalReport:
    protocol: str
    seed: int
    rank1: float
    rank5: float
    mAP: float
    mINP: float
    num_probes: int
    num_gallery: int
    dropped_probes: int = 0
    excluded_pairs: int = 0
    skipped_identities: int = 0
    per_view: dict[str, float] = field(default_factory=dict)
    fingerprint: str = ""

    METRICS = ("rank1", "rank5", "mAP", "mINP")

    def row(self) -> dict[str, object]:
        row: dict[str, object] = {
            "protocol": self.protocol,
            "seed": self.seed,
            **{m: round(getattr(self, m), 4) for m in self.METRICS},
            "num_probes": self.num_probes,
            "num_gallery": self.num_gallery,
            "dropped_probes": self.dropped_probes,
            "excluded_pairs": self.excluded_pairs,
            "skipped_identities": self.skipped_identities,
        }
        if self.per_view:
            for view in sorted(self.per_view):
                row[view] = round(self.per_view[view], 4)
            row["Mean"] = round(float(np.nanmean(list(self.per_view.values()))), 4)
        return row

    def to_csv(self) -> str:
        row = self.row()
        buf = io.StringIO()
        buf.write(f"# fingerprint: {self.fingerprint}\n")
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def choose_probes(identities, seed: int) -> tuple[np.ndarray, int]:
    """One random probe index per identity with >= 2 sequences; returns (probe indices, skipped ids)."""
    identities = np.asarray(identities)
    rng = np.random.default_rng(seed)
    probes, skipped = [], 0
    for ident in np.unique(identities):
        idx = np.flatnonzero(identities == ident)
        if idx.size < 2:
            log.warning("identity %s has a single sequence; skipped as probe", ident)
            skipped += 1
            continue
        probes.append(int(rng.choice(idx)))
    return np.array(sorted(probes), dtype=np.int64), skipped


def evaluate_embeddings(
    embeddings: np.ndarray,
    identities,
    seq_ids,
    views,
    protocol: str = "gait3d",
    seed: int = 0,
    probe_indices=None,
    fingerprint: str = "",
) -> EvalReport:
    """Score a table of per-sequence embeddings [N, C, P].

    ``gait3d``: one seeded random probe per identity (or ``probe_indices``),
    every other sequence is gallery. ``cross_view``: every sequence (or each
    of ``probe_indices``) probes the remaining ones, same-identity entries in
    the probe's own view are excluded, and Rank-1 is also reported per view.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    ids = np.asarray(identities)
    seqs = np.asarray(seq_ids)
    views = np.asarray(views)
    n = len(ids)
    skipped = 0
    if probe_indices is not None:
        probes = np.asarray(probe_indices, dtype=np.int64)
    elif protocol == "gait3d":
        probes, skipped = choose_probes(ids, seed)
    else:
        probes = np.arange(n)
        skipped = int(sum(1 for i in np.unique(ids) if (ids == i).sum() < 2))

    if protocol == "gait3d" or probe_indices is not None:
        gallery = np.setdiff1d(np.arange(n), probes)
    else:
        gallery = np.arange(n)
    cross = protocol == "cross_view"
    excl = exclusion_mask(ids[probes], ids[gallery], seqs[probes], seqs[gallery], views[probes], views[gallery], cross)
    dist = pairwise_distances(embeddings[probes], embeddings[gallery])
    stats = retrieval_stats(dist, ids[probes], ids[gallery], excl)

    per_view: dict[str, float] = {}
    if cross:
        probe_views = views[probes][stats.scored]
        for v in np.unique(views[probes]):
            sel = probe_views == v
            per_view[str(v)] = _pct((stats.first_match[sel] <= 1).astype(float))
    return EvalReport(
        protocol=protocol,
        seed=seed,
        rank1=_pct((stats.first_match <= 1).astype(float)),
        rank5=_pct((stats.first_match <= 5).astype(float)),
        mAP=_pct(stats.ap),
        mINP=_pct(stats.inp),
        num_probes=len(probes),
        num_gallery=len(gallery),
        dropped_probes=stats.dropped,
        excluded_pairs=int(excl.sum()),
        skipped_identities=skipped,
        per_view=per_view,
        fingerprint=fingerprint,
    )


def evaluate(model, dataset, protocol: str = "gait3d", seed: int = 0, probe_indices=None, max_frames=None) -> EvalReport:
    """Embed every sequence of ``dataset`` with ``model`` and score it under ``protocol``."""
    from meshgait.model import extract_embeddings

    emb = extract_embeddings(model, dataset.sequences, max_frames=max_frames)
    return evaluate_embeddings(
        emb,
        [s.identity for s in dataset.sequences],
        [s.seq_id for s in dataset.sequences],
        [s.view for s in dataset.sequences],
        protocol=protocol,
        seed=seed,
        probe_indices=probe_indices,
        fingerprint=model.cfg.fingerprint(),
    )
