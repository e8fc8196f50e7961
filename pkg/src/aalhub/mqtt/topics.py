"""Topic names, topic filters and wildcard matching.

Topic names are slash-separated routing keys without wildcards.  Filters may
use ``+`` (exactly one level) and ``#`` (zero or more trailing levels, only as
the final level).
"""

from __future__ import annotations

WILDCARDS = ("+", "#")


class InvalidTopicError(ValueError):
    """Topic name is empty, contains a wildcard or a NUL character."""


class InvalidFilterError(ValueError):
    """Topic filter is empty or uses a wildcard outside its allowed position."""


def validate_topic(topic: str) -> None:
    """Reject topic names that may not appear in a PUBLISH packet."""
    if not topic:
        raise InvalidTopicError("topic name must not be empty")
    if "\u0000" in topic:
        raise InvalidTopicError(f"topic name contains NUL: {topic!r}")
    if "+" in topic or "#" in topic:
        raise InvalidTopicError(f"topic name contains wildcard: {topic!r}")


def validate_filter(filter_: str) -> None:
    """Reject malformed subscription filters.

    ``+`` must occupy a whole level; ``#`` must occupy the final level.
    """
    if not filter_:
        raise InvalidFilterError("topic filter must not be empty")
    if "\u0000" in filter_:
        raise InvalidFilterError(f"topic filter contains NUL: {filter_!r}")
    levels = filter_.split("/")
    for i, level in enumerate(levels):
        if "#" in level:
            if level != "#":
                raise InvalidFilterError(
                    f"'#' must occupy a whole level: {filter_!r}")
            if i != len(levels) - 1:
                raise InvalidFilterError(
                    f"'#' is only allowed as the final level: {filter_!r}")
        elif "+" in level and level != "+":
            raise InvalidFilterError(
                f"'+' must occupy a whole level: {filter_!r}")


def is_valid_filter(filter_: str) -> bool:
    try:
        validate_filter(filter_)
    except InvalidFilterError:
        return False
    return True


def topic_matches(filter_: str, topic: str) -> bool:
    """True iff ``topic`` matches ``filter_``.

    ``+`` matches exactly one level, ``#`` matches the remaining levels
    including the parent (``a/#`` matches ``a``).  Raises
    :class:`InvalidFilterError` for malformed filters.
    """
    validate_filter(filter_)
    filter_levels = filter_.split("/")
    topic_levels = topic.split("/")
    for i, pattern in enumerate(filter_levels):
        if pattern == "#":
            return True
        if i >= len(topic_levels):
            return False
        if pattern != "+" and pattern != topic_levels[i]:
            return False
    return len(filter_levels) == len(topic_levels)
