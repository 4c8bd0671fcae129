"""Shared vocabulary: ids, queries, actions, engagement events and labels.

The engagement log is line-delimited TSV with columns::

    timestamp  user_id  query  item_id  action  surface  session_id

Search-request logs use::

    timestamp  user_id  query  session_id
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, NamedTuple, Optional


class PrerankError(Exception):
    """Base class for all errors raised by the package.

    ``code`` is a short machine-readable tag used by the CLI.
    """

    code = "ERROR"


class EmptyQuery(PrerankError, ValueError):
    code = "EMPTY_QUERY"


class MalformedLine(PrerankError, ValueError):
    code = "MALFORMED_LINE"

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class BadField(PrerankError, ValueError):
    code = "BAD_FIELD"

    def __init__(self, line_no: int, field: str, value: str):
        super().__init__(f"line {line_no}: bad {field} {value!r}")
        self.line_no = line_no
        self.field = field


# ---------------------------------------------------------------------------
# identifiers

ItemId = int

_WS = re.compile(r"\s+")


def stable_hash64(text: str) -> int:
    """Seedless 64-bit hash; identical on every machine and process."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class QueryKey(NamedTuple):
    text: str
    key_hash: int

    @classmethod
    def from_normalized(cls, text: str) -> "QueryKey":
        return cls(text, stable_hash64(text))

    def __str__(self) -> str:
        return self.text


def normalize_query(raw: str) -> QueryKey:
    """Lowercase, collapse whitespace runs to one space and trim."""
    text = _WS.sub(" ", raw.lower()).strip()
    if not text:
        raise EmptyQuery("query is empty after normalization")
    return QueryKey.from_normalized(text)


def check_item_id(value: int) -> ItemId:
    if not 0 < value < 2**64:
        raise ValueError(f"item id must be a nonzero unsigned 64-bit integer, got {value}")
    return value


# ---------------------------------------------------------------------------
# actions and labels


class ActionType(enum.Enum):
    SAVE = "save"
    LONG_CLICK = "long_click"
    DOWNLOAD = "download"
    SCREENSHOT = "screenshot"
    CLICK = "click"
    HIDE = "hide"
    REPORT = "report"
    IMPRESSION = "impression"

    @property
    def index(self) -> int:
        return _ACTION_INDEX[self]


_ACTION_INDEX = {a: i for i, a in enumerate(ActionType)}

DEFAULT_ACTION_SET = frozenset(
    {ActionType.SAVE, ActionType.LONG_CLICK, ActionType.DOWNLOAD, ActionType.SCREENSHOT, ActionType.CLICK}
)
FULFILLING_ACTIONS = frozenset(
    {ActionType.SAVE, ActionType.LONG_CLICK, ActionType.DOWNLOAD, ActionType.SCREENSHOT}
)
DEFAULT_ACTION_WEIGHTS = {ActionType.SAVE: 2.0, ActionType.LONG_CLICK: 1.5}


class UnifiedLabel(NamedTuple):
    value: int
    weight: float


@dataclass(frozen=True)
class EngagementEvent:
    timestamp: int
    user_id: int
    query: QueryKey
    item: ItemId
    action: ActionType
    surface: str = "search"
    session_id: int = 0


class SearchRequest(NamedTuple):
    """One search request; the first two fields match ``(timestamp, QueryKey)``."""

    timestamp: int
    query: QueryKey
    user_id: int = 0
    session_id: int = 0


class Device(enum.Enum):
    MOBILE = "mobile"
    DESKTOP = "desktop"
    TABLET = "tablet"


@dataclass(frozen=True)
class RequestContext:
    user_id: int
    country: str = "US"
    device: Device = Device.MOBILE
    language: str = "en"
    age_bucket: int = 0
    gender_bucket: int = 0


def unified_label(
    events_for_pair: Iterable[EngagementEvent],
    action_set: Iterable[ActionType] = DEFAULT_ACTION_SET,
    weight_table: Optional[Mapping[ActionType, float]] = None,
) -> UnifiedLabel:
    """Composite binary label for one impressed (user, query, item).

    The weight is the largest table weight among matched actions (1.0 for
    actions missing from the table), or 1.0 for a negative.
    """
    actions = set(action_set)
    if not actions:
        raise ValueError("action_set must be nonempty")
    table = DEFAULT_ACTION_WEIGHTS if weight_table is None else weight_table
    matched = [e.action for e in events_for_pair if e.action in actions]
    if not matched:
        return UnifiedLabel(0, 1.0)
    return UnifiedLabel(1, max(float(table.get(a, 1.0)) for a in matched))


# ---------------------------------------------------------------------------
# log parsing


def _int_field(line_no: int, name: str, value: str, minimum: int = 0) -> int:
    try:
        out = int(value)
    except ValueError:
        raise BadField(line_no, name, value) from None
    if out < minimum or out >= 2**64:
        raise BadField(line_no, name, value)
    return out


def _action_field(line_no: int, value: str) -> ActionType:
    try:
        return ActionType(value)
    except ValueError:
        raise BadField(line_no, "action", value) from None


def _query_field(line_no: int, value: str) -> QueryKey:
    try:
        return normalize_query(value)
    except EmptyQuery:
        raise BadField(line_no, "query", value) from None


def parse_event_line(line: str, line_no: int = 1) -> EngagementEvent:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != 7:
        raise MalformedLine(line_no, f"expected 7 columns, got {len(cols)}")
    ts, user, query, item, action, surface, session = cols
    return EngagementEvent(
        timestamp=_int_field(line_no, "timestamp", ts, minimum=1),
        user_id=_int_field(line_no, "user_id", user),
        query=_query_field(line_no, query),
        item=_int_field(line_no, "item_id", item, minimum=1),
        action=_action_field(line_no, action),
        surface=surface,
        session_id=_int_field(line_no, "session_id", session),
    )


def format_event_line(event: EngagementEvent) -> str:
    return "\t".join(
        (
            str(event.timestamp),
            str(event.user_id),
            event.query.text,
            str(event.item),
            event.action.value,
            event.surface,
            str(event.session_id),
        )
    )


def parse_request_line(line: str, line_no: int = 1) -> SearchRequest:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != 4:
        raise MalformedLine(line_no, f"expected 4 columns, got {len(cols)}")
    ts, user, query, session = cols
    return SearchRequest(
        timestamp=_int_field(line_no, "timestamp", ts, minimum=1),
        query=_query_field(line_no, query),
        user_id=_int_field(line_no, "user_id", user),
        session_id=_int_field(line_no, "session_id", session),
    )


def format_request_line(request: SearchRequest) -> str:
    return f"{request.timestamp}\t{request.user_id}\t{request.query.text}\t{request.session_id}"


def _data_lines(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        yield line_no, line


def read_events(path) -> Iterator[EngagementEvent]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in _data_lines(fh):
            yield parse_event_line(line, line_no)


def read_requests(path) -> Iterator[SearchRequest]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in _data_lines(fh):
            yield parse_request_line(line, line_no)


def write_events(path, events: Iterable[EngagementEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp\tuser_id\tquery\titem_id\taction\tsurface\tsession_id\n")
        for event in events:
            fh.write(format_event_line(event) + "\n")


def write_requests(path, requests: Iterable[SearchRequest]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp\tuser_id\tquery\tsession_id\n")
        for request in requests:
            fh.write(format_request_line(request) + "\n")
