"""Rating data parsing, filtering, indexing, and leave-one-out splitting.

Input files are either Movielens-style ``::``-delimited ``.dat`` files or
header-ful CSV.  Records are re-indexed to dense integer ids (assigned in
first-appearance order) and stored column-wise in numpy arrays together with
per-user and per-item inverted lists, which is the layout every downstream
gradient/Hessian routine works on.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    """A malformed line in a ratings or metadata file."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class RatingRecord:
    """One observed (user, item, rating) interaction, with external ids."""

    user: str
    item: str
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True)
class ItemMetadata:
    """Display metadata for one item (title and genre tags)."""

    item: str
    title: str
    genres: tuple[str, ...]


@dataclass
class Dataset:
    """Dense-indexed rating set with inverted lists.

    Record ``j`` is ``(user_idx[j], item_idx[j], ratings[j])``.  ``by_user[u]``
    holds the indices of user ``u``'s records in original order, ``by_item[i]``
    likewise.  ``user_ids``/``item_ids`` map internal index -> external id and
    ``user_index``/``item_index`` are their inverses.  Instances are treated as
    immutable after construction.
    """

    user_idx: np.ndarray
    item_idx: np.ndarray
    ratings: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    user_index: dict[str, int] = field(repr=False)
    item_index: dict[str, int] = field(repr=False)
    by_user: list[np.ndarray] = field(repr=False, default=None)
    by_item: list[np.ndarray] = field(repr=False, default=None)

    def __post_init__(self):
        self.user_idx = np.asarray(self.user_idx, dtype=np.int64)
        self.item_idx = np.asarray(self.item_idx, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if self.by_user is None:
            self.by_user = _inverted_lists(self.user_idx, len(self.user_ids))
        if self.by_item is None:
            self.by_item = _inverted_lists(self.item_idx, len(self.item_ids))

    @property
    def n(self) -> int:
        return self.user_idx.shape[0]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def record(self, j: int) -> RatingRecord:
        """Reconstruct record ``j`` with external ids."""
        return RatingRecord(
            user=self.user_ids[self.user_idx[j]],
            item=self.item_ids[self.item_idx[j]],
            rating=float(self.ratings[j]),
        )

    def without_records(self, drop: np.ndarray | list[int]) -> "Dataset":
        """New Dataset with the given record indices removed, same id maps."""
        keep = np.ones(self.n, dtype=bool)
        keep[np.asarray(drop, dtype=np.int64)] = False
        return Dataset(
            user_idx=self.user_idx[keep],
            item_idx=self.item_idx[keep],
            ratings=self.ratings[keep],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            user_index=self.user_index,
            item_index=self.item_index,
        )


def _inverted_lists(idx: np.ndarray, count: int) -> list[np.ndarray]:
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(count + 1))
    return [order[bounds[k]:bounds[k + 1]] for k in range(count)]


def _decode_lines(source) -> "list[str]":
    """Accept bytes, str, or a file-like object and return decoded lines."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    return text.splitlines()


def parse_ratings(source, fmt: str = "dat") -> list[RatingRecord]:
    """Parse a ratings stream into records, preserving file order.

    ``dat`` lines are ``UserID::ItemID::Rating::Timestamp``; ``csv`` needs a
    ``user,item,rating[,timestamp]`` header.  Blank lines are skipped.  Any
    malformed line raises :class:`ParseError` carrying its 1-based number.
    """
    lines = _decode_lines(source)
    if fmt == "dat":
        return _parse_dat(lines)
    if fmt == "csv":
        return _parse_csv(lines)
    raise ValueError(f"unknown ratings format: {fmt!r}")


def _make_record(user: str, item: str, rating_s: str, ts_s: str | None, lineno: int) -> RatingRecord:
    if not user or not item:
        raise ParseError(lineno, "empty user or item id")
    try:
        rating = float(rating_s)
    except ValueError:
        raise ParseError(lineno, f"non-numeric rating {rating_s!r}") from None
    if not np.isfinite(rating):
        raise ParseError(lineno, f"non-finite rating {rating_s!r}")
    timestamp = None
    if ts_s is not None and ts_s != "":
        try:
            timestamp = int(ts_s)
        except ValueError:
            raise ParseError(lineno, f"non-integer timestamp {ts_s!r}") from None
    return RatingRecord(user=user, item=item, rating=rating, timestamp=timestamp)


def _parse_dat(lines: list[str]) -> list[RatingRecord]:
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(lineno, f"expected 4 '::'-separated fields, got {len(parts)}")
        records.append(_make_record(parts[0], parts[1], parts[2], parts[3], lineno))
    return records


def _parse_csv(lines: list[str]) -> list[RatingRecord]:
    rows = list(csv.reader(lines))
    if not rows:
        return []
    header = [c.strip().lower() for c in rows[0]]
    if header[:3] != ["user", "item", "rating"]:
        raise ParseError(1, f"expected header user,item,rating[,timestamp], got {rows[0]!r}")
    has_ts = len(header) > 3 and header[3] == "timestamp"
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise ParseError(lineno, f"expected at least 3 columns, got {len(row)}")
        ts = row[3] if has_ts and len(row) > 3 else None
        records.append(_make_record(row[0].strip(), row[1].strip(), row[2].strip(), ts, lineno))
    return records


def filter_min_interactions(records: list[RatingRecord], min_count: int) -> list[RatingRecord]:
    """Keep only records whose user and item both survive a k-core filter.

    Users/items with fewer than ``min_count`` records are dropped repeatedly
    until no violators remain (a single pass can leave new violators behind
    after cascaded removals).  Input order is preserved.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if min_count == 1 or not records:
        return list(records)

    users = [r.user for r in records]
    items = [r.item for r in records]
    uids = {u: k for k, u in enumerate(dict.fromkeys(users))}
    iids = {i: k for k, i in enumerate(dict.fromkeys(items))}
    u = np.array([uids[x] for x in users], dtype=np.int64)
    i = np.array([iids[x] for x in items], dtype=np.int64)

    alive = np.ones(len(records), dtype=bool)
    while True:
        ucnt = np.bincount(u[alive], minlength=len(uids))
        icnt = np.bincount(i[alive], minlength=len(iids))
        bad = alive & ((ucnt[u] < min_count) | (icnt[i] < min_count))
        if not bad.any():
            break
        alive &= ~bad
    return [r for r, a in zip(records, alive) if a]


def build_index(records: list[RatingRecord]) -> Dataset:
    """Assign dense ids in first-appearance order and build inverted lists."""
    if not records:
        raise ValueError("cannot index an empty record list")
    user_ids = list(dict.fromkeys(r.user for r in records))
    item_ids = list(dict.fromkeys(r.item for r in records))
    return index_with_maps(records, user_ids, item_ids)


def index_with_maps(records: list[RatingRecord], user_ids: list[str], item_ids: list[str]) -> Dataset:
    """Index records against pre-existing id maps (all ids must be known)."""
    user_index = {u: k for k, u in enumerate(user_ids)}
    item_index = {i: k for k, i in enumerate(item_ids)}
    return Dataset(
        user_idx=np.array([user_index[r.user] for r in records], dtype=np.int64),
        item_idx=np.array([item_index[r.item] for r in records], dtype=np.int64),
        ratings=np.array([r.rating for r in records], dtype=np.float64),
        user_ids=user_ids,
        item_ids=item_ids,
        user_index=user_index,
        item_index=item_index,
    )


def leave_one_out_split(ds: Dataset, seed: int) -> tuple[Dataset, list[RatingRecord]]:
    """Hold out exactly one uniformly random record per user.

    The training set keeps the remaining records in original order and shares
    the id maps of ``ds`` (no re-numbering).  Deterministic given ``seed``.
    """
    for u in range(ds.num_users):
        if len(ds.by_user[u]) < 2:
            raise ValueError(
                f"user {ds.user_ids[u]!r} has only {len(ds.by_user[u])} record(s); "
                "leave-one-out needs at least 2 per user"
            )
    rng = np.random.default_rng(seed)
    held = np.array(
        [ds.by_user[u][rng.integers(len(ds.by_user[u]))] for u in range(ds.num_users)],
        dtype=np.int64,
    )
    test = [ds.record(j) for j in held]
    return ds.without_records(held), test


def load_item_metadata(source) -> dict[str, ItemMetadata]:
    """Parse ``ItemID::Title::Genre1|Genre2|...`` lines into a metadata map.

    Duplicate item ids keep the last entry (a warning is logged).
    """
    out: dict[str, ItemMetadata] = {}
    for lineno, line in enumerate(_decode_lines(source), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(lineno, f"expected 3 '::'-separated fields, got {len(parts)}")
        item, title, genres = parts
        if not item:
            raise ParseError(lineno, "empty item id")
        if not title:
            raise ParseError(lineno, "empty title")
        if item in out:
            logger.warning("duplicate metadata for item %s at line %d; keeping last", item, lineno)
        out[item] = ItemMetadata(item=item, title=title, genres=tuple(g for g in genres.split("|") if g))
    return out


def export_split_manifest(train: Dataset, test: list[RatingRecord], path) -> None:
    """Write a ``user,item,rating,role`` CSV describing a train/test split."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "rating", "role"])
        for j in range(train.n):
            r = train.record(j)
            writer.writerow([r.user, r.item, repr(r.rating), "train"])
        for r in test:
            writer.writerow([r.user, r.item, repr(r.rating), "test"])


def load_split_manifest(path) -> tuple[list[RatingRecord], list[RatingRecord]]:
    """Read a split manifest back into (train_records, test_records)."""
    train: list[RatingRecord] = []
    test: list[RatingRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["user", "item", "rating", "role"]:
        raise ParseError(1, "not a split manifest (bad header)")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4 or row[3] not in ("train", "test"):
            raise ParseError(lineno, f"bad manifest row {row!r}")
        rec = _make_record(row[0], row[1], row[2], None, lineno)
        (train if row[3] == "train" else test).append(rec)
    return train, test
