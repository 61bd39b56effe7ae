"""Serializer and parser for road captions.

Two caption schemas exist::

    "No roads found" / "Found a road"                      (presence)
    "Found 2 roads. Image coordinates are as follows: [[(0, 775), ...], ...]"

Serialization is byte-exact. Parsing tolerates whitespace drift, a missing
space after commas and an optional trailing period; everything else is an
error, because coercing a malformed model answer silently corrupts scores.
``strict=False`` additionally accepts keyword case changes, singular/plural
disagreement, a declared count that disagrees with the coordinate lists and
trailing text after the closing bracket.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from roadnet.geo import PIXEL_MAX, PixelPolyline

NO_ROADS_TEXT = "No roads found"
PRESENCE_TEXT = "Found a road"
COORDS_PREAMBLE = "Image coordinates are as follows:"


class CaptionError(ValueError):
    """Base class for caption parse failures."""


class MalformedCaption(CaptionError):
    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} (at byte {offset})")
        self.reason = reason
        self.offset = offset


class CountMismatch(CaptionError):
    def __init__(self, declared: int, actual: int):
        super().__init__(f"caption declares {declared} roads but lists {actual}")
        self.declared = declared
        self.actual = actual


class CoordinateOutOfRange(CaptionError):
    def __init__(self, value: int, offset: int):
        super().__init__(f"coordinate {value} outside [0, {PIXEL_MAX}] (at byte {offset})")
        self.value = value
        self.offset = offset


@dataclass(frozen=True)
class NoRoads:
    pass


@dataclass(frozen=True)
class PresenceFound:
    pass


@dataclass(frozen=True)
class Roads:
    roads: tuple[PixelPolyline, ...]

    def __post_init__(self):
        from roadnet.geo import check_pixel_polyline

        roads = tuple(tuple((int(x), int(y)) for x, y in road) for road in self.roads)
        if not roads:
            raise ValueError("Roads caption needs at least one road; use NoRoads")
        for road in roads:
            check_pixel_polyline(road)
        object.__setattr__(self, "roads", roads)


Caption = Union[NoRoads, PresenceFound, Roads]


def caption_for_roads(roads: Sequence[PixelPolyline]) -> Caption:
    return Roads(tuple(roads)) if roads else NoRoads()


def roads_count(caption: Caption) -> Optional[int]:
    """Number of roads, or None for the presence schema (it carries no count)."""
    if isinstance(caption, NoRoads):
        return 0
    if isinstance(caption, Roads):
        return len(caption.roads)
    return None


def is_found(caption: Caption) -> bool:
    return isinstance(caption, (PresenceFound, Roads))


def _format_road(road: PixelPolyline) -> str:
    return "[" + ", ".join(f"({x}, {y})" for x, y in road) + "]"


def serialize_caption(caption: Caption) -> str:
    if isinstance(caption, NoRoads):
        return NO_ROADS_TEXT
    if isinstance(caption, PresenceFound):
        return PRESENCE_TEXT
    n = len(caption.roads)
    noun = "road" if n == 1 else "roads"
    body = ", ".join(_format_road(r) for r in caption.roads)
    return f"Found {n} {noun}. {COORDS_PREAMBLE} [{body}]"


# --- parsing ----------------------------------------------------------------

_WS = re.compile(r"\s*")
_INT = re.compile(r"[+-]?\d+")


class _Scanner:
    def __init__(self, text: str, strict: bool):
        self.text = text
        self.pos = 0
        self.strict = strict

    def offset(self, pos: Optional[int] = None) -> int:
        # error offsets are reported in bytes of the UTF-8 encoding
        return len(self.text[: self.pos if pos is None else pos].encode("utf-8"))

    def fail(self, reason: str, pos: Optional[int] = None):
        raise MalformedCaption(reason, self.offset(pos))

    def skip_ws(self) -> None:
        self.pos = _WS.match(self.text, self.pos).end()

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def try_word(self, word: str) -> bool:
        chunk = self.text[self.pos: self.pos + len(word)]
        if chunk == word or (not self.strict and chunk.lower() == word.lower()):
            end = self.pos + len(word)
            # keywords must end on a word boundary
            if end < len(self.text) and (self.text[end].isalnum()):
                return False
            self.pos = end
            return True
        return False

    def expect_word(self, word: str) -> None:
        self.skip_ws()
        if not self.try_word(word):
            self.fail(f"expected {word!r}")

    def expect_char(self, ch: str) -> None:
        self.skip_ws()
        if self.peek() != ch:
            self.fail(f"expected {ch!r}")
        self.pos += 1

    def try_char(self, ch: str) -> bool:
        self.skip_ws()
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def integer(self) -> tuple[int, int]:
        self.skip_ws()
        m = _INT.match(self.text, self.pos)
        if not m:
            self.fail("expected an integer")
        start = self.pos
        self.pos = m.end()
        return int(m.group()), start

    def phrase(self, phrase: str) -> None:
        for word in phrase.split():
            if word.endswith(":"):
                self.expect_word(word[:-1])
                self.expect_char(":")
            else:
                self.expect_word(word)

    def finish(self) -> None:
        self.skip_ws()
        if self.peek() == ".":
            self.pos += 1
            self.skip_ws()
        if not self.at_end() and self.strict:
            self.fail("unexpected trailing text")


def _parse_point(sc: _Scanner) -> tuple[int, int]:
    sc.expect_char("(")
    coords = []
    for i in range(2):
        value, start = sc.integer()
        if not 0 <= value <= PIXEL_MAX:
            raise CoordinateOutOfRange(value, sc.offset(start))
        coords.append(value)
        if i == 0:
            sc.expect_char(",")
    sc.expect_char(")")
    return coords[0], coords[1]


def _parse_road(sc: _Scanner) -> PixelPolyline:
    start = sc.pos
    sc.expect_char("[")
    points = [_parse_point(sc)]
    while sc.try_char(","):
        points.append(_parse_point(sc))
    sc.expect_char("]")
    if len(points) < 2:
        sc.fail("a road needs at least two vertices", start)
    for a, b in zip(points, points[1:]):
        if a == b:
            sc.fail(f"repeated consecutive vertex {a}", start)
    return tuple(points)


def parse_caption(text: str, strict: bool = True) -> Caption:
    """Parse a caption string; raises a CaptionError subclass on failure."""
    if not isinstance(text, str):
        raise MalformedCaption("caption is not a string", 0)
    sc = _Scanner(text, strict)
    sc.skip_ws()
    if sc.try_word("No"):
        sc.expect_word("roads")
        sc.expect_word("found")
        sc.finish()
        return NoRoads()
    if not sc.try_word("Found"):
        sc.fail("caption must start with 'Found' or 'No roads found'")
    sc.skip_ws()
    if sc.try_word("a"):
        sc.expect_word("road")
        sc.finish()
        return PresenceFound()

    declared, count_pos = sc.integer()
    if declared < 1:
        sc.fail("road count must be positive; zero is spelled 'No roads found'", count_pos)
    sc.skip_ws()
    noun_pos = sc.pos
    if sc.try_word("roads"):
        plural = True
    elif sc.try_word("road"):
        plural = False
    else:
        sc.fail("expected 'road' or 'roads'")
    if strict and plural != (declared != 1):
        sc.fail("singular/plural disagrees with the declared count", noun_pos)
    sc.expect_char(".")
    sc.phrase(COORDS_PREAMBLE)

    sc.expect_char("[")
    roads = [_parse_road(sc)]
    while sc.try_char(","):
        roads.append(_parse_road(sc))
    sc.expect_char("]")
    sc.finish()
    if strict and declared != len(roads):
        raise CountMismatch(declared, len(roads))
    return Roads(tuple(roads))
