"""Topic semantics tests: parsing, matching vs a naive oracle, trie routing."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqttbed.topic import (
    SubscriptionTree,
    TopicError,
    matches,
    parse_filter,
    parse_topic,
)

DOOR_TOPIC = "s1t/moskevka/arrow/door/door_01_n/r1s0124b002342cddc/state"
TEMP_TOPIC = "s1t/moskevka/reception/sensor_temp_json/temp_hun_01_n/r1s0124b00239de24c/state"


def naive_matches(filter_str: str, topic_str: str) -> bool:
    """Reference matcher: recursive descent, written independently of matches()."""
    flevels = filter_str.split("/")
    tlevels = topic_str.split("/")
    if tlevels[0].startswith("$") and flevels[0] in ("+", "#"):
        return False

    def walk(fi: int, ti: int) -> bool:
        if fi == len(flevels):
            return ti == len(tlevels)
        if flevels[fi] == "#":
            return True  # matches zero or more remaining levels
        if ti == len(tlevels):
            return False
        if flevels[fi] == "+" or flevels[fi] == tlevels[ti]:
            return walk(fi + 1, ti + 1)
        return False

    return walk(0, 0)


class TestParseTopic:
    def test_catalog_door_topic_has_seven_levels(self):
        assert len(parse_topic(DOOR_TOPIC).levels) == 7

    def test_two_levels(self):
        assert parse_topic("a/b").levels == ("a", "b")

    def test_wildcard_rejected(self):
        with pytest.raises(TopicError):
            parse_topic("a/+/b")
        with pytest.raises(TopicError):
            parse_topic("a/#")

    def test_empty_and_nul_rejected(self):
        with pytest.raises(TopicError):
            parse_topic("")
        with pytest.raises(TopicError):
            parse_topic("a/\x00b")

    def test_oversized_rejected(self):
        with pytest.raises(TopicError):
            parse_topic("x" * 65_536)

    def test_empty_levels_are_legal(self):
        assert parse_topic("a//b").levels == ("a", "", "b")
        assert parse_topic("/a").levels == ("", "a")


class TestParseFilter:
    def test_trailing_hash(self):
        assert parse_filter("s1t/#").levels == ("s1t", "#")

    def test_mixed_wildcards(self):
        assert parse_filter("s1t/+/+/door/#").levels == ("s1t", "+", "+", "door", "#")

    def test_hash_not_last_rejected(self):
        with pytest.raises(TopicError):
            parse_filter("a/#/b")

    def test_embedded_wildcards_rejected(self):
        with pytest.raises(TopicError):
            parse_filter("a+b")
        with pytest.raises(TopicError):
            parse_filter("a/b#")

    def test_bare_wildcards(self):
        assert parse_filter("#").levels == ("#",)
        assert parse_filter("+").levels == ("+",)


class TestMatches:
    @pytest.mark.parametrize(
        "f,t,expected",
        [
            ("s1t/#", TEMP_TOPIC, True),
            ("a/b", "a/b", True),
            ("s1t/+/arrow", "s1t/moskevka/arrow/door", False),
            ("s1t/+/arrow/door", "s1t/moskevka/arrow/door", True),
            ("#", "anything/at/all", True),
            ("a/#", "a", True),
            ("a/#", "a/b/c", True),
            ("+", "a", True),
            ("+", "a/b", False),
            ("+/+", "a", False),
            ("a/+/c", "a//c", True),
            ("#", "$SYS/stats", False),
            ("+/stats", "$SYS/stats", False),
            ("$SYS/#", "$SYS/stats", True),
            ("$SYS/stats", "$SYS/stats", True),
        ],
    )
    def test_vectors(self, f, t, expected):
        assert matches(parse_filter(f), parse_topic(t)) is expected
        assert naive_matches(f, t) is expected

    @settings(max_examples=400, deadline=None)
    @given(
        st.lists(st.sampled_from(["a", "b", "cc", "", "+"]), min_size=1, max_size=5),
        st.lists(st.sampled_from(["a", "b", "cc", "", "$x"]), min_size=1, max_size=5),
        st.booleans(),
    )
    def test_agrees_with_naive_oracle(self, flevels, tlevels, add_hash):
        f = "/".join(flevels + (["#"] if add_hash else []))
        t = "/".join(tlevels)
        if not f or not t:  # the empty string is not a topic or filter
            return
        assert matches(parse_filter(f), parse_topic(t)) == naive_matches(f, t)


def _random_corpus(rng, n_filters, n_topics):
    segments = ["s1t", "a", "b", "door", "state", "x", ""]
    filters = []
    while len(filters) < n_filters:
        length = rng.randint(1, 5)
        levels = [rng.choice(segments + ["+"] * 2) for _ in range(length)]
        if rng.random() < 0.3:
            levels.append("#")
        f = "/".join(levels)
        if f:
            filters.append(f)
    topics = []
    while len(topics) < n_topics:
        length = rng.randint(1, 6)
        t = "/".join(rng.choice(segments) for _ in range(length))
        if t:
            topics.append(t)
    return filters, topics


class TestSubscriptionTree:
    def test_single_hash_subscription(self):
        tree = SubscriptionTree()
        tree.subscribe("c1", parse_filter("s1t/#"), 1)
        assert tree.route(parse_topic("s1t/x/y")) == [("c1", 1)]

    def test_empty_tree_routes_nothing(self):
        tree = SubscriptionTree()
        assert tree.route(parse_topic("anything")) == []

    def test_subscribe_unsubscribe_restores(self):
        tree = SubscriptionTree()
        tree.subscribe("c1", parse_filter("a/+"), 0)
        before = sorted(tree.route(parse_topic("a/b")))
        tree.subscribe("c2", parse_filter("a/b"), 1)
        assert tree.unsubscribe("c2", parse_filter("a/b"))
        assert sorted(tree.route(parse_topic("a/b"))) == before
        assert not tree.unsubscribe("c2", parse_filter("a/b"))

    def test_resubscribe_replaces_qos(self):
        tree = SubscriptionTree()
        tree.subscribe("c1", parse_filter("a"), 0)
        tree.subscribe("c1", parse_filter("a"), 1)
        assert tree.route(parse_topic("a")) == [("c1", 1)]
        assert len(tree) == 1

    def test_overlapping_filters_counted_once_per_filter(self):
        tree = SubscriptionTree()
        tree.subscribe("c1", parse_filter("a/#"), 0)
        tree.subscribe("c1", parse_filter("a/+"), 1)
        tree.subscribe("c1", parse_filter("a/b"), 0)
        result = tree.route(parse_topic("a/b"))
        assert len(result) == 3
        assert {qos for _, qos in result} == {0, 1}

    def test_dollar_topics_skip_wildcards(self):
        tree = SubscriptionTree()
        tree.subscribe("wild", parse_filter("#"), 0)
        tree.subscribe("plus", parse_filter("+/stats"), 0)
        tree.subscribe("lit", parse_filter("$SYS/stats"), 0)
        tree.subscribe("sub", parse_filter("$SYS/#"), 0)
        got = {c for c, _ in tree.route(parse_topic("$SYS/stats"))}
        assert got == {"lit", "sub"}

    def test_unsubscribe_all_drops_client(self):
        tree = SubscriptionTree()
        tree.subscribe("c1", parse_filter("a/#"), 1)
        tree.subscribe("c1", parse_filter("b/+"), 0)
        tree.subscribe("c2", parse_filter("a/#"), 1)
        tree.unsubscribe_all("c1")
        assert tree.route(parse_topic("a/x")) == [("c2", 1)]
        assert tree.route(parse_topic("b/x")) == []
        assert len(tree) == 1

    def test_version_changes_on_mutation(self):
        tree = SubscriptionTree()
        v0 = tree.version
        tree.subscribe("c1", parse_filter("a"), 0)
        v1 = tree.version
        tree.unsubscribe("c1", parse_filter("a"))
        assert v0 != v1 != tree.version

    def test_route_equals_naive_scan_random_corpus(self):
        rng = random.Random(20210803)
        filters, topics = _random_corpus(rng, 1000, 1000)
        tree = SubscriptionTree()
        subs = []
        for i, f in enumerate(filters):
            client = f"c{i}"
            parsed = parse_filter(f)
            tree.subscribe(client, parsed, i % 2)
            subs.append((client, f, i % 2))
        for t in topics:
            expected = sorted(
                (client, qos) for client, f, qos in subs if naive_matches(f, t)
            )
            assert sorted(tree.route(parse_topic(t))) == expected

    def test_route_after_random_unsubscribes_matches_scan(self):
        rng = random.Random(1883)
        filters, topics = _random_corpus(rng, 300, 200)
        tree = SubscriptionTree()
        live = {}
        for i, f in enumerate(filters):
            client = f"c{i % 40}"
            tree.subscribe(client, parse_filter(f), 1)
            live[(client, f)] = 1
        for client, f in rng.sample(list(live), k=len(live) // 2):
            tree.unsubscribe(client, parse_filter(f))
            del live[(client, f)]
        for t in topics:
            expected = sorted(
                (client, 1) for (client, f) in live if naive_matches(f, t)
            )
            assert sorted(tree.route(parse_topic(t))) == expected
