"""Shape-world scenes: sampling, rendering, and the answer oracle.

A scene is a 3x3 grid whose cells are empty or hold one colored shape.
The oracle evaluates queries set-theoretically over grid coordinates and
is the ground truth for every generated label. Rendering rasterizes the
grid into a 30x30 RGB image with one glyph per occupied cell; glyphs are
chosen so the (scene -> image) map is invertible, which lets integrity
checks re-derive scenes from the stored images alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .query import SymbolicQuery

__all__ = [
    "Scene",
    "CELL_PX",
    "GRID",
    "sample_scene",
    "render",
    "scene_from_image",
    "oracle_answer",
    "OracleError",
]

GRID = 3
CELL_PX = 10
IMAGE_PX = GRID * CELL_PX

COLOR_LETTERS = {"red": "r", "green": "g", "blue": "b"}
SHAPE_LETTERS = {"circle": "c", "square": "s", "triangle": "t"}
LETTER_COLORS = {v: k for k, v in COLOR_LETTERS.items()}
LETTER_SHAPES = {v: k for k, v in SHAPE_LETTERS.items()}
CHANNEL_OF_COLOR = {"red": 0, "green": 1, "blue": 2}


class OracleError(ValueError):
    """Query uses a head the oracle does not know."""


@dataclass(frozen=True)
class Scene:
    """Row-major tuple of 9 cells; each is None or (color, shape).

    Occupancy bounds are a property of the sampler's config, not of the
    type; an empty scene is still renderable (all black).
    """

    cells: tuple[tuple[str, str] | None, ...]

    def __post_init__(self):
        if len(self.cells) != GRID * GRID:
            raise ValueError(f"expected {GRID * GRID} cells, got {len(self.cells)}")

    def occupied(self) -> list[tuple[int, int, str, str]]:
        out = []
        for idx, cell in enumerate(self.cells):
            if cell is not None:
                out.append((idx // GRID, idx % GRID, cell[0], cell[1]))
        return out

    def serialize(self) -> str:
        tokens = []
        for cell in self.cells:
            if cell is None:
                tokens.append("_")
            else:
                tokens.append(COLOR_LETTERS[cell[0]] + SHAPE_LETTERS[cell[1]])
        return ",".join(tokens)

    @classmethod
    def parse(cls, text: str) -> "Scene":
        tokens = text.split(",")
        if len(tokens) != GRID * GRID:
            raise ValueError(f"expected {GRID * GRID} tokens, got {len(tokens)}")
        cells = []
        for tok in tokens:
            if tok == "_":
                cells.append(None)
            elif len(tok) == 2 and tok[0] in LETTER_COLORS and tok[1] in LETTER_SHAPES:
                cells.append((LETTER_COLORS[tok[0]], LETTER_SHAPES[tok[1]]))
            else:
                raise ValueError(f"bad scene token {tok!r}")
        return cls(tuple(cells))


def sample_scene(rng: np.random.Generator, min_shapes: int = 2,
                 max_shapes: int = 6) -> Scene:
    """Uniform occupancy count, cells without replacement, attributes i.i.d."""
    count = int(rng.integers(min_shapes, max_shapes + 1))
    positions = rng.choice(GRID * GRID, size=count, replace=False)
    cells: list[tuple[str, str] | None] = [None] * (GRID * GRID)
    colors = tuple(COLOR_LETTERS)
    shapes = tuple(SHAPE_LETTERS)
    for pos in positions:
        color = colors[int(rng.integers(len(colors)))]
        shape = shapes[int(rng.integers(len(shapes)))]
        cells[int(pos)] = (color, shape)
    return Scene(tuple(cells))


def _glyph_mask(shape: str) -> np.ndarray:
    mask = np.zeros((CELL_PX, CELL_PX), dtype=bool)
    if shape == "square":
        mask[1:9, 1:9] = True  # 8x8 block, 64 pixels
    elif shape == "circle":
        yy, xx = np.mgrid[0:CELL_PX, 0:CELL_PX]
        mask[(yy - 4.5) ** 2 + (xx - 4.5) ** 2 <= 16.0] = True  # radius 4
    elif shape == "triangle":
        for row in range(8):  # apex width 1 at the top, base width 8
            width = row + 1
            start = (CELL_PX - width) // 2
            mask[row + 1, start:start + width] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return mask


_GLYPHS = {shape: _glyph_mask(shape) for shape in SHAPE_LETTERS}
# Pixel counts identify the shape when decoding a rendered image.
_PIXELS_TO_SHAPE = {int(m.sum()): s for s, m in _GLYPHS.items()}


def render(scene: Scene) -> np.ndarray:
    """Rasterize to a 30x30x3 uint8 image, black background, pure-channel colors."""
    image = np.zeros((IMAGE_PX, IMAGE_PX, 3), dtype=np.uint8)
    for row, col, color, shape in scene.occupied():
        mask = _GLYPHS[shape]
        block = image[row * CELL_PX:(row + 1) * CELL_PX,
                      col * CELL_PX:(col + 1) * CELL_PX,
                      CHANNEL_OF_COLOR[color]]
        block[mask] = 255
    return image


def scene_from_image(image: np.ndarray) -> Scene:
    """Invert :func:`render`; raises ValueError on anything it did not draw."""
    if image.shape != (IMAGE_PX, IMAGE_PX, 3):
        raise ValueError(f"expected {(IMAGE_PX, IMAGE_PX, 3)}, got {image.shape}")
    cells: list[tuple[str, str] | None] = []
    for row in range(GRID):
        for col in range(GRID):
            block = image[row * CELL_PX:(row + 1) * CELL_PX,
                          col * CELL_PX:(col + 1) * CELL_PX]
            lit = block.any(axis=(0, 1))
            if not lit.any():
                cells.append(None)
                continue
            if int(lit.sum()) != 1:
                raise ValueError(f"cell ({row},{col}) mixes color channels")
            channel = int(lit.argmax())
            color = {v: k for k, v in CHANNEL_OF_COLOR.items()}[channel]
            pixels = int((block[:, :, channel] > 0).sum())
            shape = _PIXELS_TO_SHAPE.get(pixels)
            if shape is None:
                raise ValueError(f"cell ({row},{col}) has no known glyph "
                                 f"({pixels} pixels)")
            cells.append((color, shape))
    return Scene(tuple(cells))


# ---------------------------------------------------------------------------
# the symbolic oracle

_REL_TESTS = {
    "above": lambda r, c, sr, sc: c == sc and r < sr,
    "below": lambda r, c, sr, sc: c == sc and r > sr,
    "left_of": lambda r, c, sr, sc: r == sr and c < sc,
    "right_of": lambda r, c, sr, sc: r == sr and c > sc,
    "next-to": lambda r, c, sr, sc: abs(r - sr) + abs(c - sc) == 1,
}


def _eval_cells(scene: Scene, node: SymbolicQuery) -> set[tuple[int, int]]:
    head = node.head
    if node.arity == 0:
        if head in COLOR_LETTERS:
            return {(r, c) for r, c, color, _ in scene.occupied() if color == head}
        if head in SHAPE_LETTERS:
            return {(r, c) for r, c, _, shape in scene.occupied() if shape == head}
        raise OracleError(f"unknown term {head!r}")
    if head == "and":
        if node.arity != 2:
            raise OracleError(f"'and' takes 2 arguments, got {node.arity}")
        return _eval_cells(scene, node.children[0]) & _eval_cells(scene,
                                                                  node.children[1])
    if head in _REL_TESTS:
        if node.arity != 1:
            raise OracleError(f"{head!r} takes 1 argument, got {node.arity}")
        anchors = _eval_cells(scene, node.children[0])
        test = _REL_TESTS[head]
        return {(r, c)
                for r in range(GRID) for c in range(GRID)
                if any(test(r, c, sr, sc) for sr, sc in anchors)}
    raise OracleError(f"unknown head {head!r}")


def oracle_answer(scene: Scene, query: SymbolicQuery) -> str:
    """Ground-truth yes/no: do the two argument cell-sets intersect?"""
    if query.head != "is" or query.arity != 2:
        raise OracleError(f"oracle expects is(A, B), got {query.serialize()!r}")
    left = _eval_cells(scene, query.children[0])
    right = _eval_cells(scene, query.children[1])
    return "yes" if left & right else "no"
