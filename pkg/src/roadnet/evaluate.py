"""Score predicted captions against ground truth.

Three scorers: a presence confusion matrix (found / not found), a road-count
matrix over the buckets "1" and "2+", and polyline geometry metrics on
greedily matched road pairs.
"""
from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from roadnet import __version__
from roadnet.caption import (
    Caption,
    CaptionError,
    PresenceFound,
    Roads,
    is_found,
    parse_caption,
    roads_count,
)
from roadnet.dataset import (
    GT_FILE,
    GroundTruthRecord,
    InstructionPair,
    SchemaViolation,
    read_ground_truth,
    read_pairs,
)
from roadnet.geo import PixelPolyline

INCLUSION_RULES = ("both_found", "gt_found", "all")

PRESENCE_ROWS = ("Ground Truth Road Found", "GT Road Not Found")
PRESENCE_COLS = ("Road Found", "Road Not Found")
COUNT_ROWS = ("GT 1 Road Found", "GT 2+ Roads Found")
COUNT_COLS = ("Roads with 1 Road", "Roads with 2+ Roads")


class EmptyOverlap(ValueError):
    pass


def round4(x: float) -> Decimal:
    return Decimal(repr(x)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)


def round2(x: float) -> Decimal:
    # two-decimal figures are derived from the four-decimal ones
    return round4(x).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


@dataclass
class ConfusionMatrix2x2:
    row_labels: tuple[str, str]
    col_labels: tuple[str, str]
    c11: int = 0
    c12: int = 0
    c21: int = 0
    c22: int = 0

    @property
    def total(self) -> int:
        return self.c11 + self.c12 + self.c21 + self.c22

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise ZeroDivisionError("accuracy of an empty matrix")
        return (self.c11 + self.c22) / self.total

    def add(self, row: int, col: int) -> None:
        name = f"c{row + 1}{col + 1}"
        setattr(self, name, getattr(self, name) + 1)

    def as_rows(self) -> list[list[int]]:
        return [[self.c11, self.c12], [self.c21, self.c22]]

    def to_json(self) -> dict:
        out = {"rows": list(self.row_labels), "columns": list(self.col_labels),
               "counts": self.as_rows(), "total": self.total}
        if self.total:
            out["accuracy"] = float(round4(self.accuracy))
            out["accuracy_2dp"] = float(round2(self.accuracy))
        return out

    def render(self) -> str:
        width = max(len(s) for s in self.row_labels) + 2
        cols = [max(len(c), 6) for c in self.col_labels]
        lines = [" " * width + "  ".join(c.rjust(w) for c, w in zip(self.col_labels, cols))]
        for label, row in zip(self.row_labels, self.as_rows()):
            lines.append(label.ljust(width) + "  ".join(str(v).rjust(w) for v, w in zip(row, cols)))
        if self.total:
            lines.append(f"accuracy: {round2(self.accuracy)}  ({round4(self.accuracy)})")
        else:
            lines.append("accuracy: n/a (no pairs scored)")
        return "\n".join(lines)


@dataclass
class Skipped:
    image_id: str
    scorer: str
    reason: str


@dataclass
class PredictionSet:
    records: list[InstructionPair]
    captions: dict[str, Optional[Caption]]
    diagnostics: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, records: Sequence[InstructionPair], strict: bool = True) -> "PredictionSet":
        captions: dict[str, Optional[Caption]] = {}
        diagnostics = {}
        for i, rec in enumerate(records):
            if rec.image_id in captions:
                raise SchemaViolation(i, f"duplicate image_id {rec.image_id}", file="predictions")
            try:
                captions[rec.image_id] = parse_caption(rec.caption, strict=strict)
            except CaptionError as exc:
                captions[rec.image_id] = None
                diagnostics[rec.image_id] = f"{type(exc).__name__}: {exc}"
        return cls(list(records), captions, diagnostics)


def _overlap(gt: Sequence[GroundTruthRecord], pred: PredictionSet, scorer: str,
             skipped: Optional[list]):
    by_id = {g.image_id: g for g in gt}
    pairs = []
    for rec in pred.records:
        g = by_id.get(rec.image_id)
        if g is None:
            if skipped is not None:
                skipped.append(Skipped(rec.image_id, scorer, "image_id not in ground truth"))
            continue
        pairs.append((g, pred.captions[rec.image_id]))
    return pairs


def presence_confusion(gt: Sequence[GroundTruthRecord], pred: PredictionSet,
                       strict: bool = True, skipped: Optional[list] = None) -> ConfusionMatrix2x2:
    """Rows: ground truth found / not found. Columns: prediction found / not found.

    In strict mode an unparseable prediction counts as "not found"; otherwise
    it is skipped.
    """
    pairs = _overlap(gt, pred, "presence", skipped)
    if not pairs:
        raise EmptyOverlap("no prediction image_id matches the ground truth")
    m = ConfusionMatrix2x2(PRESENCE_ROWS, PRESENCE_COLS)
    for g, cap in pairs:
        if cap is None and not strict:
            if skipped is not None:
                skipped.append(Skipped(g.image_id, "presence", pred.diagnostics[g.image_id]))
            continue
        m.add(0 if g.roads else 1, 0 if cap is not None and is_found(cap) else 1)
    return m


def _bucket(n: int) -> int:
    return 0 if n <= 1 else 1


def count_confusion(gt: Sequence[GroundTruthRecord], pred: PredictionSet,
                    inclusion_rule: str = "both_found",
                    skipped: Optional[list] = None) -> ConfusionMatrix2x2:
    """Road-count agreement over the buckets "1" and "2+".

    both_found: ground truth has a road and the prediction lists >= 1 road.
    gt_found:   ground truth has a road; any counted prediction (0 joins "1").
    all:        every pair with a count on both sides (0 joins "1").
    """
    if inclusion_rule not in INCLUSION_RULES:
        raise ValueError(f"unknown inclusion rule {inclusion_rule!r}")
    pairs = _overlap(gt, pred, "count", None)
    if not pairs:
        raise EmptyOverlap("no prediction image_id matches the ground truth")
    m = ConfusionMatrix2x2(COUNT_ROWS, COUNT_COLS)

    def skip(image_id, reason):
        if skipped is not None:
            skipped.append(Skipped(image_id, "count", reason))

    for g, cap in pairs:
        n_gt = len(g.roads)
        if cap is None:
            skip(g.image_id, pred.diagnostics.get(g.image_id, "unparseable caption"))
            continue
        n_pred = roads_count(cap)
        if n_pred is None:
            skip(g.image_id, "presence-schema caption carries no road count")
            continue
        if inclusion_rule in ("both_found", "gt_found") and n_gt == 0:
            skip(g.image_id, "ground truth has no road")
            continue
        if inclusion_rule == "both_found" and n_pred == 0:
            skip(g.image_id, "prediction found no road")
            continue
        m.add(_bucket(n_gt), _bucket(n_pred))
    return m


# --- geometry ---------------------------------------------------------------

def resample_polyline(line: Sequence[Sequence[float]], step: float = 1.0) -> np.ndarray:
    """Points every ``step`` px of arc length, plus every vertex."""
    pts = np.asarray(line, dtype=np.float64)
    seg = np.hypot(*(pts[1:] - pts[:-1]).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0.0:
        return pts[:1].copy()
    # interior vertices are kept too, so no sample interval cuts a corner
    s = np.union1d(np.arange(0.0, total, step), cum)
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    return np.column_stack([x, y])


def _arc_weights(pts: np.ndarray) -> Optional[np.ndarray]:
    # trapezoid weights, so the mean tracks arc length despite the short last step
    if len(pts) < 2:
        return None
    seg = np.hypot(*(pts[1:] - pts[:-1]).T)
    w = np.zeros(len(pts))
    w[:-1] += seg / 2
    w[1:] += seg / 2
    return w if w.sum() > 0 else None


def point_polyline_distances(points: np.ndarray, line: Sequence[Sequence[float]]) -> np.ndarray:
    """Exact distance from each point to the nearest segment of ``line``."""
    pts = np.asarray(points, dtype=np.float64)
    v = np.asarray(line, dtype=np.float64)
    if len(v) == 1:
        return np.hypot(*(pts - v[0]).T)
    a, d = v[:-1], v[1:] - v[:-1]
    dd = (d * d).sum(axis=1)
    dd[dd == 0] = 1.0  # zero-length segments collapse to their start point
    best = np.full(len(pts), np.inf)
    # chunk over points to bound the (points x segments) temporaries
    for lo in range(0, len(pts), 4096):
        p = pts[lo:lo + 4096, None, :]
        t = np.clip(((p - a) * d).sum(axis=2) / dd, 0.0, 1.0)
        proj = a + t[..., None] * d
        best[lo:lo + 4096] = np.hypot(*(p - proj).transpose(2, 0, 1)).min(axis=1)
    # interpolated samples sit ~1e-14 px off their own segment
    best[best < 1e-9] = 0.0
    return best


def chamfer_distance(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]],
                     sample_step_px: float = 1.0) -> float:
    """max of the two directed mean distances, resampled points to the other polyline.

    Means are arc-length weighted over the resampled points.
    """
    ra = resample_polyline(a, sample_step_px)
    rb = resample_polyline(b, sample_step_px)
    d_ab = np.average(point_polyline_distances(ra, b), weights=_arc_weights(ra))
    d_ba = np.average(point_polyline_distances(rb, a), weights=_arc_weights(rb))
    return float(max(d_ab, d_ba))


def endpoint_distance(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> float:
    a0, a1 = np.asarray(a[0], float), np.asarray(a[-1], float)
    b0, b1 = np.asarray(b[0], float), np.asarray(b[-1], float)
    same = (np.linalg.norm(a0 - b0) + np.linalg.norm(a1 - b1)) / 2.0
    flipped = (np.linalg.norm(a0 - b1) + np.linalg.norm(a1 - b0)) / 2.0
    return float(min(same, flipped))


def polyline_distance(a: PixelPolyline, b: PixelPolyline, sample_step_px: float = 1.0
                      ) -> tuple[float, float]:
    """(symmetric mean chamfer, endpoint distance) between two polylines."""
    return chamfer_distance(a, b, sample_step_px), endpoint_distance(a, b)


def match_roads(gt_roads: Sequence[PixelPolyline], pred_roads: Sequence[PixelPolyline],
                max_match_chamfer_px: float = 50.0, sample_step_px: float = 1.0
                ) -> list[tuple[int, int]]:
    """Greedy one-to-one matching on ascending chamfer distance."""
    cand = []
    for i, a in enumerate(gt_roads):
        for j, b in enumerate(pred_roads):
            d = chamfer_distance(a, b, sample_step_px)
            if d <= max_match_chamfer_px:
                cand.append((d, i, j))
    cand.sort()
    used_g, used_p, out = set(), set(), []
    for _, i, j in cand:
        if i not in used_g and j not in used_p:
            used_g.add(i)
            used_p.add(j)
            out.append((i, j))
    return sorted(out)


@dataclass
class MatchedPair:
    image_id: str
    gt_index: int
    pred_index: int
    chamfer: float
    endpoint: float


@dataclass
class GeometryReport:
    matches: list[MatchedPair] = field(default_factory=list)
    unmatched_gt: int = 0
    unmatched_pred: int = 0

    def _chamfers(self) -> list[float]:
        return [m.chamfer for m in self.matches]

    @property
    def mean_chamfer(self) -> Optional[float]:
        c = self._chamfers()
        return statistics.fmean(c) if c else None

    @property
    def median_chamfer(self) -> Optional[float]:
        c = self._chamfers()
        return statistics.median(c) if c else None

    @property
    def p95_chamfer(self) -> Optional[float]:
        c = self._chamfers()
        return float(np.percentile(c, 95)) if c else None

    @property
    def mean_endpoint(self) -> Optional[float]:
        e = [m.endpoint for m in self.matches]
        return statistics.fmean(e) if e else None

    def summary(self) -> dict:
        return {"matched": len(self.matches), "unmatched_gt": self.unmatched_gt,
                "unmatched_pred": self.unmatched_pred, "mean_chamfer": self.mean_chamfer,
                "median_chamfer": self.median_chamfer, "p95_chamfer": self.p95_chamfer,
                "mean_endpoint": self.mean_endpoint}

    def to_json(self) -> dict:
        out = self.summary()
        out["pairs"] = [m.__dict__ for m in self.matches]
        return out


def geometry_report(gt: Sequence[GroundTruthRecord], pred: PredictionSet,
                    max_match_chamfer_px: float = 50.0, sample_step_px: float = 1.0,
                    skipped: Optional[list] = None) -> GeometryReport:
    rep = GeometryReport()
    for g, cap in _overlap(gt, pred, "geometry", None):
        if cap is None:
            if skipped is not None:
                skipped.append(Skipped(g.image_id, "geometry",
                                       pred.diagnostics.get(g.image_id, "unparseable caption")))
            continue
        if isinstance(cap, PresenceFound):
            if skipped is not None:
                skipped.append(Skipped(g.image_id, "geometry",
                                       "presence-schema caption carries no coordinates"))
            continue
        pred_roads = cap.roads if isinstance(cap, Roads) else ()
        matches = match_roads(g.roads, pred_roads, max_match_chamfer_px, sample_step_px)
        for i, j in matches:
            ch, ep = polyline_distance(g.roads[i], pred_roads[j], sample_step_px)
            rep.matches.append(MatchedPair(g.image_id, i, j, ch, ep))
        rep.unmatched_gt += len(g.roads) - len(matches)
        rep.unmatched_pred += len(pred_roads) - len(matches)
    return rep


@dataclass(frozen=True)
class EvalConfig:
    strict: bool = True
    inclusion_rule: str = "both_found"
    max_match_chamfer_px: float = 50.0
    sample_step_px: float = 1.0


@dataclass
class EvalReport:
    presence: ConfusionMatrix2x2
    count: ConfusionMatrix2x2
    count_inclusion_rule: str
    geometry: GeometryReport
    skipped: list[Skipped]
    scored: int
    overlap: int
    strict: bool = True

    def to_json(self) -> dict:
        return {
            "version": __version__,
            "mode": "strict" if self.strict else "lenient",
            "overlap": self.overlap,
            "scored": self.scored,
            "presence": self.presence.to_json(),
            "count": {**self.count.to_json(), "inclusion_rule": self.count_inclusion_rule},
            "geometry": self.geometry.to_json(),
            "skipped": [s.__dict__ for s in self.skipped],
        }

    def render_text(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        g = self.geometry
        parts = [
            "Presence (found / not found)",
            self.presence.render(),
            "",
            f"Road count (inclusion rule: {self.count_inclusion_rule})",
            self.count.render(),
            "",
            "Geometry (matched roads)",
            f"matched: {len(g.matches)}  unmatched gt: {g.unmatched_gt}  "
            f"unmatched pred: {g.unmatched_pred}",
            f"chamfer px  mean: {fmt(g.mean_chamfer)}  median: {fmt(g.median_chamfer)}  "
            f"p95: {fmt(g.p95_chamfer)}",
            f"endpoint px mean: {fmt(g.mean_endpoint)}",
            "",
            f"scored {self.scored} of {self.overlap} overlapping records; "
            f"{len(self.skipped)} skip entries",
        ]
        return "\n".join(parts)


def evaluate_records(gt: Sequence[GroundTruthRecord], predictions: Sequence[InstructionPair],
                     config: EvalConfig = EvalConfig()) -> EvalReport:
    pred = PredictionSet.from_pairs(predictions, strict=config.strict)
    skipped: list[Skipped] = []
    presence = presence_confusion(gt, pred, strict=config.strict, skipped=skipped)
    count = count_confusion(gt, pred, config.inclusion_rule, skipped=skipped)
    geometry = geometry_report(gt, pred, config.max_match_chamfer_px, config.sample_step_px,
                               skipped=skipped)
    gt_ids = {g.image_id for g in gt}
    overlap = sum(1 for r in pred.records if r.image_id in gt_ids)
    return EvalReport(presence, count, config.inclusion_rule, geometry, skipped,
                      scored=presence.total, overlap=overlap, strict=config.strict)


def evaluate(gt_path, pred_path, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Evaluate a prediction file against a ground-truth sidecar.

    ``gt_path`` may be a ground_truth.json file or a dataset directory.
    """
    gt_path = Path(gt_path)
    if gt_path.is_dir():
        gt_path = gt_path / GT_FILE
    gt = read_ground_truth(gt_path)
    predictions = read_pairs(pred_path)
    return evaluate_records(gt, predictions, config)


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    return path
