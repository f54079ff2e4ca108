"""
RATING LOGS
Parsing of MovieLens-style ``::`` files and tab-separated logs, chronological splitting

Formats (one event per line, fields in this order):
    movielens-dat   user::item::rating::timestamp
    tsv             user<TAB>item<TAB>rating<TAB>timestamp
Timestamps are unix seconds. Ids are kept as integers when every id in the
column is an integer literal, otherwise as strings.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from driftrec.data.config import DatasetFormat, SplitMode
from driftrec.errors import DataFormatError

logger = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.001
COLUMNS = ["user_id", "item_id", "rating", "timestamp"]
SEPARATORS = {
    DatasetFormat.MOVIELENS_DAT: "::",
    DatasetFormat.TSV: "\t",
}


@dataclass(frozen=True)
class RatingEvent:
    """One observed interaction"""
    user_id: Hashable
    item_id: Hashable
    rating: float
    timestamp: float


@dataclass
class ParseReport:
    events: List[RatingEvent]
    total_lines: int
    malformed: int

    @property
    def malformed_fraction(self) -> float:
        return self.malformed / self.total_lines if self.total_lines else 0.0


def _ids(column: pd.Series) -> pd.Series:
    stripped = column.str.strip()
    if stripped.str.fullmatch(r"-?\d+").all():
        return stripped.astype(np.int64)
    return stripped


def read_ratings(path: Union[str, Path],
                 fmt: DatasetFormat = DatasetFormat.MOVIELENS_DAT,
                 rating_scale: Optional[Tuple[float, float]] = None) -> ParseReport:
    """Parse a rating log, counting (not raising on) malformed lines"""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"rating file not readable: {path}")

    bad_lines: List[List[str]] = []

    def on_bad_line(fields: List[str]):
        bad_lines.append(fields)
        return None

    try:
        frame = pd.read_csv(
            path,
            sep=SEPARATORS[fmt],
            engine="python",
            header=None,
            names=COLUMNS,
            dtype=str,
            skip_blank_lines=True,
            on_bad_lines=on_bad_line,
        )
    except pd.errors.EmptyDataError:
        return ParseReport(events=[], total_lines=0, malformed=0)
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"rating file {path} is not UTF-8 text (byte {exc.start}: {exc.reason})") from exc

    rating = pd.to_numeric(frame["rating"], errors="coerce")
    timestamp = pd.to_numeric(frame["timestamp"], errors="coerce")
    valid = rating.notna() & timestamp.notna() & frame["user_id"].notna() & frame["item_id"].notna()
    valid &= np.isfinite(rating) & (timestamp >= 0)
    if rating_scale is not None:
        low, high = rating_scale
        valid &= rating.between(low, high)

    malformed = int((~valid).sum()) + len(bad_lines)
    total = len(frame) + len(bad_lines)
    frame = frame.loc[valid].assign(rating=rating[valid].astype(float), timestamp=timestamp[valid].astype(float))
    if len(frame):
        frame = frame.assign(user_id=_ids(frame["user_id"]), item_id=_ids(frame["item_id"]))
        frame = frame.sort_values(["timestamp", "user_id", "item_id"], kind="mergesort")

    events = [
        RatingEvent(user_id=u, item_id=i, rating=float(r), timestamp=float(t))
        for u, i, r, t in zip(frame["user_id"].tolist(), frame["item_id"].tolist(),
                              frame["rating"].tolist(), frame["timestamp"].tolist())
    ]
    return ParseReport(events=events, total_lines=total, malformed=malformed)


def parse_ratings(path: Union[str, Path],
                  fmt: DatasetFormat = DatasetFormat.MOVIELENS_DAT,
                  rating_scale: Optional[Tuple[float, float]] = None) -> List[RatingEvent]:
    """Sorted events; aborts when more than 0.1% of the lines are malformed"""
    report = read_ratings(path, fmt, rating_scale)
    if report.malformed:
        logger.warning("⚠️ %d of %d lines malformed in %s", report.malformed, report.total_lines, path)
    if report.malformed_fraction > MALFORMED_LIMIT:
        raise DataFormatError(
            f"{report.malformed} of {report.total_lines} lines malformed in {path} "
            f"(limit {MALFORMED_LIMIT:.1%})"
        )
    logger.info("✅ Parsed %d rating events from %s", len(report.events), path)
    return report.events


def write_ratings(events: Sequence[RatingEvent], path: Union[str, Path],
                  fmt: DatasetFormat = DatasetFormat.MOVIELENS_DAT):
    """Inverse of ``parse_ratings``; ratings keep full float precision"""
    sep = SEPARATORS[fmt]
    lines = [
        sep.join([str(e.user_id), str(e.item_id), repr(float(e.rating)), _format_time(e.timestamp)])
        for e in events
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _format_time(timestamp: float) -> str:
    return str(int(timestamp)) if float(timestamp).is_integer() else repr(float(timestamp))


def ensure_sorted(events: Sequence[RatingEvent]):
    times = np.fromiter((e.timestamp for e in events), dtype=np.float64, count=len(events))
    if len(times) > 1 and (np.diff(times) < 0).any():
        raise DataFormatError("events are not sorted by timestamp")


def _stable_cut(events: Sequence[RatingEvent], cut: int) -> int:
    """Move a cut forward so events sharing a timestamp stay in the earlier segment"""
    while 0 < cut < len(events) and events[cut].timestamp == events[cut - 1].timestamp:
        cut += 1
    return cut


def chrono_split(events: Sequence[RatingEvent],
                 ratios: Tuple[float, float, float] = (4.0, 1.0, 5.0),
                 mode: SplitMode = SplitMode.COUNT
                 ) -> Tuple[List[RatingEvent], List[RatingEvent], List[RatingEvent]]:
    """Train / validation / test along the timeline"""
    if not events:
        raise DataFormatError("cannot split an empty event list")
    ensure_sorted(events)
    a, b, c = (float(r) for r in ratios)
    total = a + b + c
    if min(a, b, c) < 0 or total <= 0:
        raise DataFormatError(f"invalid split ratios {ratios}")

    n = len(events)
    if mode == SplitMode.COUNT:
        first = math.floor(a / total * n)
        second = first + math.floor(b / total * n)
    else:
        start, end = events[0].timestamp, events[-1].timestamp
        times = np.fromiter((e.timestamp for e in events), dtype=np.float64, count=n)
        first = int(np.searchsorted(times, start + a / total * (end - start), side="right"))
        second = int(np.searchsorted(times, start + (a + b) / total * (end - start), side="right"))
    first = _stable_cut(events, first)
    second = _stable_cut(events, max(second, first))
    return list(events[:first]), list(events[first:second]), list(events[second:])
