"""Topic names, wildcard filters, and the subscription trie the broker routes with."""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_TOPIC_BYTES = 65_535

PLUS = "+"
HASH = "#"


class TopicError(ValueError):
    """Invalid topic name or filter."""


@dataclass(frozen=True)
class TopicName:
    """A concrete publish topic, split into its '/'-separated levels."""

    levels: tuple[str, ...]

    def __str__(self) -> str:
        return "/".join(self.levels)


@dataclass(frozen=True)
class TopicFilter:
    """A subscription filter; levels are literals, '+', or a trailing '#'."""

    levels: tuple[str, ...]

    def __str__(self) -> str:
        return "/".join(self.levels)


def parse_topic(s: str) -> TopicName:
    """Validate and split a topic name. Wildcards and NUL are forbidden."""
    if not s:
        raise TopicError("topic name must be nonempty")
    if len(s.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise TopicError("topic name exceeds 65535 bytes")
    if "+" in s or "#" in s:
        raise TopicError(f"wildcard character in topic name: {s!r}")
    if "\x00" in s:
        raise TopicError("NUL character in topic name")
    return TopicName(tuple(s.split("/")))


def parse_filter(s: str) -> TopicFilter:
    """Validate and split a topic filter.

    '#' may only be the final level; '+' and '#' must occupy whole levels.
    """
    if not s:
        raise TopicError("topic filter must be nonempty")
    if len(s.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise TopicError("topic filter exceeds 65535 bytes")
    if "\x00" in s:
        raise TopicError("NUL character in topic filter")
    levels = s.split("/")
    for i, level in enumerate(levels):
        if level == HASH:
            if i != len(levels) - 1:
                raise TopicError(f"'#' must be the final level: {s!r}")
        elif HASH in level:
            raise TopicError(f"'#' must occupy an entire level: {s!r}")
        elif PLUS in level and level != PLUS:
            raise TopicError(f"'+' must occupy an entire level: {s!r}")
    return TopicFilter(tuple(levels))


def matches(topic_filter: TopicFilter, topic: TopicName) -> bool:
    """True iff the filter matches the topic.

    '+' matches exactly one level, '#' matches all remaining levels
    (including none). Filters starting with a wildcard never match topics
    whose first level starts with '$'.
    """
    flevels = topic_filter.levels
    tlevels = topic.levels
    if tlevels[0].startswith("$") and flevels[0] in (PLUS, HASH):
        return False
    fi = 0
    for ti, tlevel in enumerate(tlevels):
        if fi == len(flevels):
            return False
        flevel = flevels[fi]
        if flevel == HASH:
            return True
        if flevel != PLUS and flevel != tlevel:
            return False
        fi += 1
    if fi == len(flevels):
        return True
    # '#' also matches the parent level itself ("a/#" matches "a").
    return fi == len(flevels) - 1 and flevels[fi] == HASH


@dataclass
class _Node:
    children: dict[str, _Node] = field(default_factory=dict)
    plus_child: _Node | None = None
    subscribers: dict[str, int] = field(default_factory=dict)
    hash_subscribers: dict[str, int] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return (
            not self.children
            and self.plus_child is None
            and not self.subscribers
            and not self.hash_subscribers
        )


class SubscriptionTree:
    """Trie mapping topic filters to (client_id, granted qos) subscriptions.

    route() returns the raw match list: a client subscribed through several
    overlapping filters appears once per matching filter. Deduplication is
    the broker's job. Mutations must be serialized by the caller; ``version``
    changes on every mutation so routing caches can detect staleness.
    """

    def __init__(self) -> None:
        self._root = _Node()
        self.version = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def subscribe(self, client_id: str, topic_filter: TopicFilter, qos: int) -> None:
        """Add or refresh a subscription; same (client, filter) replaces qos."""
        node = self._root
        levels = topic_filter.levels
        terminal_hash = levels and levels[-1] == HASH
        walk = levels[:-1] if terminal_hash else levels
        for level in walk:
            if level == PLUS:
                if node.plus_child is None:
                    node.plus_child = _Node()
                node = node.plus_child
            else:
                child = node.children.get(level)
                if child is None:
                    child = _Node()
                    node.children[level] = child
                node = child
        target = node.hash_subscribers if terminal_hash else node.subscribers
        if client_id not in target:
            self._count += 1
        target[client_id] = qos
        self.version += 1

    def unsubscribe(self, client_id: str, topic_filter: TopicFilter) -> bool:
        """Remove a subscription; returns False when it did not exist."""
        levels = topic_filter.levels
        terminal_hash = levels and levels[-1] == HASH
        walk = levels[:-1] if terminal_hash else levels
        path: list[tuple[_Node, str]] = []
        node = self._root
        for level in walk:
            path.append((node, level))
            node = node.plus_child if level == PLUS else node.children.get(level)
            if node is None:
                return False
        target = node.hash_subscribers if terminal_hash else node.subscribers
        if client_id not in target:
            return False
        del target[client_id]
        self._count -= 1
        self.version += 1
        # Prune now-empty branches bottom-up.
        for parent, level in reversed(path):
            if not node.is_empty():
                break
            if level == PLUS:
                parent.plus_child = None
            else:
                del parent.children[level]
            node = parent
        return True

    def unsubscribe_all(self, client_id: str) -> None:
        """Drop every subscription held by *client_id* (session teardown)."""
        removed = self._drop_client(self._root, client_id)
        if removed:
            self._count -= removed
            self.version += 1

    def _drop_client(self, node: _Node, client_id: str) -> int:
        removed = 0
        if node.subscribers.pop(client_id, None) is not None:
            removed += 1
        if node.hash_subscribers.pop(client_id, None) is not None:
            removed += 1
        for level in list(node.children):
            child = node.children[level]
            removed += self._drop_client(child, client_id)
            if child.is_empty():
                del node.children[level]
        if node.plus_child is not None:
            removed += self._drop_client(node.plus_child, client_id)
            if node.plus_child.is_empty():
                node.plus_child = None
        return removed

    def route(self, topic: TopicName) -> list[tuple[str, int]]:
        """All (client_id, qos) pairs whose filter matches *topic*, one per filter."""
        results: list[tuple[str, int]] = []
        levels = topic.levels
        blocked = levels[0].startswith("$")
        self._walk(self._root, levels, 0, blocked, results)
        return results

    def _walk(
        self,
        node: _Node,
        levels: tuple[str, ...],
        i: int,
        wildcard_blocked: bool,
        results: list[tuple[str, int]],
    ) -> None:
        # hash_subscribers at this node match the remaining levels, however many.
        if not wildcard_blocked and node.hash_subscribers:
            results.extend(node.hash_subscribers.items())
        if i == len(levels):
            results.extend(node.subscribers.items())
            return
        level = levels[i]
        child = node.children.get(level)
        if child is not None:
            self._walk(child, levels, i + 1, False, results)
        if not wildcard_blocked and node.plus_child is not None:
            self._walk(node.plus_child, levels, i + 1, False, results)
