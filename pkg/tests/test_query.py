import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modnet.query import QueryParseError, SymbolicQuery, parse_query


class TestGoldenParses:
    def test_single_argument(self):
        q = parse_query("color(truck)")
        assert q.head == "color"
        assert [c.head for c in q.children] == ["truck"]

    def test_two_arguments_with_nesting(self):
        q = parse_query("is(circle, next-to(square))")
        assert q.head == "is"
        assert q.children[0].head == "circle"
        assert q.children[1].head == "next-to"
        assert q.children[1].children[0].head == "square"

    def test_what_stand(self):
        q = parse_query("what(stand)")
        assert q.head == "what" and q.children[0].head == "stand"

    def test_leaf(self):
        assert parse_query("red") == SymbolicQuery("red")


class TestCanonicalForm:
    def test_whitespace_insignificant(self):
        a = parse_query("is( red ,  above( circle ) )")
        b = parse_query("is(red,above(circle))")
        assert a == b
        assert a.serialize() == "is(red,above(circle))"

    def test_serialize_round_trip(self):
        text = "is(and(green,triangle),below(and(blue,square)))"
        assert parse_query(text).serialize() == text


_heads = st.sampled_from(["is", "red", "above", "color", "next-to", "left_of",
                          "a1", "x-y_z"])


def _trees(depth: int):
    if depth == 0:
        return st.builds(SymbolicQuery, _heads)
    return st.builds(
        lambda h, kids: SymbolicQuery(h, tuple(kids)),
        _heads,
        st.lists(_trees(depth - 1), min_size=0, max_size=3),
    )


class TestRoundTripProperty:
    @given(_trees(5))
    @settings(max_examples=150, deadline=None)
    def test_parse_of_serialize_is_identity(self, tree):
        assert parse_query(tree.serialize()) == tree


class TestErrors:
    @pytest.mark.parametrize("text", [
        "is(red", "is(red))", "is(red,)", "(red)", "", "is(red) extra",
        "IS(red)", "is(,red)",
    ])
    def test_bad_input_raises_with_offset(self, text):
        with pytest.raises(QueryParseError) as info:
            parse_query(text)
        assert info.value.offset >= 0

    def test_trailing_offset_points_at_garbage(self):
        with pytest.raises(QueryParseError) as info:
            parse_query("red )")
        assert info.value.offset == 4

    def test_bad_head_constructor(self):
        with pytest.raises(ValueError):
            SymbolicQuery("Bad")
