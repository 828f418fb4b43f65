import numpy as np
import pytest

from modnet.query import parse_query
from modnet.scenes import (OracleError, Scene, oracle_answer, render,
                           sample_scene, scene_from_image)


def scene_with(*placed):
    """placed: (row, col, color, shape) tuples."""
    cells = [None] * 9
    for row, col, color, shape in placed:
        cells[row * 3 + col] = (color, shape)
    return Scene(tuple(cells))


class TestOracle:
    def test_red_above_circle_yes(self):
        scene = scene_with((0, 1, "red", "circle"), (2, 1, "blue", "circle"))
        assert oracle_answer(scene, parse_query("is(red, above(circle))")) == "yes"

    def test_no_red_cells_means_no(self):
        scene = scene_with((0, 1, "green", "circle"), (2, 1, "blue", "circle"))
        assert oracle_answer(scene, parse_query("is(red, above(circle))")) == "no"

    def test_disjoint_attributes_always_no(self):
        rng = np.random.default_rng(0)
        q = parse_query("is(red, blue)")
        for _ in range(30):
            assert oracle_answer(sample_scene(rng), q) == "no"

    def test_relation_directions(self):
        scene = scene_with((1, 1, "red", "square"), (1, 2, "blue", "circle"),
                           (2, 1, "green", "triangle"))
        assert oracle_answer(scene, parse_query("is(red, left_of(circle))")) == "yes"
        assert oracle_answer(scene, parse_query("is(blue, right_of(square))")) == "yes"
        assert oracle_answer(scene, parse_query("is(green, below(square))")) == "yes"
        assert oracle_answer(scene, parse_query("is(red, above(triangle))")) == "yes"
        assert oracle_answer(scene, parse_query("is(red, below(triangle))")) == "no"

    def test_strictness_excludes_same_cell(self):
        scene = scene_with((1, 1, "red", "circle"))
        assert oracle_answer(scene, parse_query("is(red, above(circle))")) == "no"

    def test_adjacency(self):
        scene = scene_with((1, 1, "red", "circle"), (1, 2, "blue", "square"))
        assert oracle_answer(scene, parse_query("is(red, next-to(square))")) == "yes"
        far = scene_with((0, 0, "red", "circle"), (2, 2, "blue", "square"))
        assert oracle_answer(far, parse_query("is(red, next-to(square))")) == "no"

    def test_conjunction(self):
        scene = scene_with((0, 0, "red", "circle"), (1, 1, "red", "square"))
        assert oracle_answer(scene, parse_query("is(and(red,circle), red)")) == "yes"
        assert oracle_answer(scene, parse_query("is(and(red,triangle), red)")) == "no"

    def test_chained_relations(self):
        scene = scene_with((0, 1, "red", "circle"), (1, 1, "green", "square"))
        # below(square) is row 2 col 1; above of that is rows 0-1 col 1
        assert oracle_answer(scene, parse_query("is(red, above(below(square)))")) == "yes"
        assert oracle_answer(scene, parse_query("is(red, below(above(square)))")) == "no"

    def test_unknown_head(self):
        scene = scene_with((0, 0, "red", "circle"))
        with pytest.raises(OracleError):
            oracle_answer(scene, parse_query("is(red, near(circle))"))
        with pytest.raises(OracleError):
            oracle_answer(scene, parse_query("color(red)"))


class TestSampling:
    def test_occupancy_uniform(self):
        rng = np.random.default_rng(123)
        counts = np.zeros(7, dtype=int)
        n = 10_000
        for _ in range(n):
            counts[len(sample_scene(rng).occupied())] += 1
        assert counts[:2].sum() == 0
        expected = n / 5
        sigma = np.sqrt(n * 0.2 * 0.8)
        for k in range(2, 7):
            assert abs(counts[k] - expected) <= 3 * sigma

    def test_invariants_hold(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            scene = sample_scene(rng)
            assert 2 <= len(scene.occupied()) <= 6

    def test_seeded_determinism(self):
        a = [sample_scene(np.random.default_rng(7)).serialize() for _ in range(1)]
        b = [sample_scene(np.random.default_rng(7)).serialize() for _ in range(1)]
        assert a == b


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            scene = sample_scene(rng)
            assert Scene.parse(scene.serialize()) == scene

    def test_format(self):
        scene = scene_with((0, 0, "red", "circle"), (0, 2, "green", "triangle"))
        assert scene.serialize() == "rc,_,gt,_,_,_,_,_,_"

    def test_bad_tokens(self):
        with pytest.raises(ValueError):
            Scene.parse("rc,_,xx,_,_,_,_,_,_")
        with pytest.raises(ValueError):
            Scene.parse("rc,_")


class TestRender:
    def test_empty_scene_is_black(self):
        image = render(Scene((None,) * 9))
        assert image.shape == (30, 30, 3)
        assert not image.any()

    def test_red_square_pixel_count_and_location(self):
        image = render(scene_with((0, 0, "red", "square")))
        red = image[:, :, 0] > 0
        assert int(red.sum()) == 64
        assert not red[10:, :].any() and not red[:, 10:].any()
        assert not image[:, :, 1].any() and not image[:, :, 2].any()

    def test_glyphs_stay_inside_cells(self):
        scene = scene_with((1, 1, "green", "circle"))
        image = render(scene)
        lit = image[:, :, 1] > 0
        ys, xs = np.nonzero(lit)
        assert ys.min() >= 10 and ys.max() < 20
        assert xs.min() >= 10 and xs.max() < 20

    def test_deterministic_bytes(self):
        rng = np.random.default_rng(3)
        scene = sample_scene(rng)
        assert render(scene).tobytes() == render(scene).tobytes()

    def test_decode_inverts_render(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            scene = sample_scene(rng)
            assert scene_from_image(render(scene)) == scene
