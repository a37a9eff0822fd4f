"""Turn influence scores into ranked neighbor-style explanations.

An item-based explanation points at the test user's own most influential
historical ratings; a user-based explanation points at the most influential
ratings other users gave the test item.  Ranking is by absolute influence,
with deterministic tie-breaking (larger signed value, then smaller record
index).  Signed influences are kept so callers can see the direction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, ItemMetadata, RatingRecord
from .influence import InfluenceScore, TestCase


class ColdStartError(ValueError):
    """The requested entity has no training history to explain with."""


@dataclass
class ExplanationEntry:
    record: RatingRecord
    train_index: int
    delta_g: float
    rank: int
    side: str
    metadata: ItemMetadata | None = None


@dataclass
class Explanation:
    test_case: TestCase
    predicted_rating: float
    style: str  # "item_based" or "user_based"
    entries: list[ExplanationEntry]
    shortfall: bool = False


def _ranked(scores: list[InfluenceScore], keep_sides: tuple[str, ...], k: int):
    eligible = [s for s in scores if s.side in keep_sides]
    eligible.sort(key=lambda s: (-abs(s.delta_g), -s.delta_g, s.train_index))
    return eligible[:k], len(eligible) < k


def explain_item_based(
    ds: Dataset,
    tc: TestCase,
    predicted_rating: float,
    scores: list[InfluenceScore],
    k: int,
    metadata: dict[str, ItemMetadata] | None = None,
) -> Explanation:
    """Top-k influential ratings by the test user, largest |influence| first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top, shortfall = _ranked(scores, ("user", "both"), k)
    if not top:
        raise ColdStartError("user has no training history")
    entries = _build_entries(ds, top, metadata)
    return Explanation(tc, predicted_rating, "item_based", entries, shortfall)


def explain_user_based(
    ds: Dataset,
    tc: TestCase,
    predicted_rating: float,
    scores: list[InfluenceScore],
    k: int,
    metadata: dict[str, ItemMetadata] | None = None,
) -> Explanation:
    """Top-k influential ratings of the test item by other users."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top, shortfall = _ranked(scores, ("item", "both"), k)
    if not top:
        raise ColdStartError("item has no training history")
    entries = _build_entries(ds, top, metadata)
    return Explanation(tc, predicted_rating, "user_based", entries, shortfall)


def _build_entries(ds, top, metadata):
    entries = []
    for rank, s in enumerate(top, start=1):
        rec = ds.record(s.train_index)
        meta = metadata.get(rec.item) if metadata else None
        entries.append(ExplanationEntry(rec, s.train_index, s.delta_g, rank, s.side, meta))
    return entries


def render_explanation(
    expl: Explanation, ds: Dataset, metadata: dict[str, ItemMetadata] | None = None
) -> dict:
    """JSON-ready document with external ids, metadata, and influences.

    ``influence`` is the exact value (round-trips through JSON); the
    6-significant-digit form is provided separately for display.
    """
    user_id = ds.user_ids[expl.test_case.user]
    item_id = ds.item_ids[expl.test_case.item]
    test_meta = metadata.get(item_id) if metadata else None
    item_label = test_meta.title if test_meta else item_id

    entries = []
    for e in expl.entries:
        meta = e.metadata or (metadata.get(e.record.item) if metadata else None)
        entry = {
            "rank": e.rank,
            "user": e.record.user,
            "item": e.record.item,
            "item_label": meta.title if meta else e.record.item,
            "rating": e.record.rating,
            "influence": e.delta_g,
            "influence_display": f"{e.delta_g:.6g}",
            "side": e.side,
        }
        if meta:
            entry["genres"] = list(meta.genres)
        entries.append(entry)

    doc = {
        "user": user_id,
        "item": item_id,
        "item_label": item_label,
        "predicted_rating": expl.predicted_rating,
        "style": expl.style,
        "shortfall": expl.shortfall,
        "entries": entries,
    }
    if entries:
        if expl.style == "item_based":
            doc["narrative"] = (
                f"we predict your rating for {item_label} to be "
                f"{expl.predicted_rating:.2f}, mostly because of your previous "
                f"ratings on the following {len(entries)} items"
            )
        else:
            doc["narrative"] = (
                f"we predict your rating for {item_label} to be "
                f"{expl.predicted_rating:.2f}, mostly because of the ratings it "
                f"received from the following {len(entries)} users"
            )
    return doc


@dataclass
class InfluenceDistribution:
    """Histogram plus ranked absolute values of one test case's influences."""

    bin_centers: np.ndarray
    counts: np.ndarray
    density: np.ndarray  # Gaussian-kernel estimate evaluated at the centers
    sorted_abs: list[tuple[int, float]] = field(repr=False, default_factory=list)


def influence_distribution(scores: list[InfluenceScore]) -> InfluenceDistribution:
    """Fixed-width histogram (ceil(sqrt(N)) bins, clamped to [10, 100]) and the
    non-increasing sequence of absolute influences."""
    if not scores:
        raise ValueError("no influence scores given")
    values = np.array([s.delta_g for s in scores])
    n = len(values)
    bins = int(np.clip(np.ceil(np.sqrt(n)), 10, 100))
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-300:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])

    # Silverman bandwidth; degenerate spread falls back to the bin width
    sigma = float(values.std())
    iqr = float(np.subtract(*np.percentile(values, [75, 25])))
    bw = 0.9 * min(sigma, iqr / 1.34 if iqr > 0 else np.inf) * n ** (-0.2)
    if not np.isfinite(bw) or bw <= 0:
        bw = (hi - lo) / bins
    z = (centers[:, None] - values[None, :]) / bw
    density = np.exp(-0.5 * z * z).sum(axis=1) / (n * bw * np.sqrt(2 * np.pi))

    ordered = np.sort(np.abs(values))[::-1]
    sorted_abs = [(rank, float(v)) for rank, v in enumerate(ordered, start=1)]
    return InfluenceDistribution(centers, counts, density, sorted_abs)


def write_histogram_csv(dist: InfluenceDistribution, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "count"])
        for c, cnt in zip(dist.bin_centers, dist.counts):
            writer.writerow([repr(float(c)), int(cnt)])


def write_density_csv(dist: InfluenceDistribution, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "density"])
        for c, d in zip(dist.bin_centers, dist.density):
            writer.writerow([repr(float(c)), repr(float(d))])


def write_sorted_abs_csv(dist: InfluenceDistribution, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "abs_influence"])
        for rank, v in dist.sorted_abs:
            writer.writerow([rank, repr(v)])
