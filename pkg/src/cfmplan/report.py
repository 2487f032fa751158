"""Evaluation statistics and static SVG figures of evaluated scenes."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geom, score
from .traj import dtw_one_to_many


@dataclass(frozen=True)
class ScenarioResult:
    run: str
    scenario_id: str
    n_candidates: int
    candidate_dac: float
    selected_source: str
    selected_id: int
    selected_dac: int
    ep: float
    endpoint_error: float
    modes: int


@dataclass(frozen=True)
class RunSummary:
    run: str
    config_hash: str
    scenarios: int
    candidates: int
    candidate_dac: float
    selected_dac: float
    mean_ep: float
    endpoint_error: float
    modes_mean: float
    modes_max: int


def mode_count(trajs, vocab) -> int:
    """Number of distinct vocabulary anchors that are nearest (DTW) to some trajectory."""
    return len({int(np.argmin(dtw_one_to_many(t, vocab.anchors))) for t in trajs})


def evaluate_scenario(run, scenario_id, scenario, field, gt, trajs, vocab, weights=score.ScoreWeights()):
    """Rank ``trajs`` with the vocabulary fallback and collect per-scene statistics.

    Returns ``(ScenarioResult, selected_trajectory)``.
    """
    trajs = np.asarray(trajs, dtype=float)
    dac = geom.dac_compliant_many(trajs, field)
    best, table = score.rank_and_select(trajs, vocab, scenario, field, weights)
    top = table[0]
    res = ScenarioResult(
        run=run,
        scenario_id=scenario_id,
        n_candidates=len(trajs),
        candidate_dac=float(dac.mean()),
        selected_source=top.source,
        selected_id=int(top.id),
        selected_dac=int(geom.dac_compliant(best, field)),
        ep=geom.ep_score(best, scenario, weights.max_progress),
        endpoint_error=float(np.linalg.norm(best[-1] - np.asarray(gt)[-1])),
        modes=mode_count(trajs, vocab),
    )
    return res, best


def summarise(run, config_hash, results) -> RunSummary:
    n_cand = sum(r.n_candidates for r in results)
    return RunSummary(
        run=run,
        config_hash=config_hash,
        scenarios=len(results),
        candidates=n_cand,
        candidate_dac=float(sum(r.candidate_dac * r.n_candidates for r in results) / max(n_cand, 1)),
        selected_dac=float(np.mean([r.selected_dac for r in results])),
        mean_ep=float(np.mean([r.ep for r in results])),
        endpoint_error=float(np.mean([r.endpoint_error for r in results])),
        modes_mean=float(np.mean([r.modes for r in results])),
        modes_max=int(max(r.modes for r in results)),
    )


def _write_rows(path, rows):
    rows = [asdict(r) for r in rows]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_summary(path, summaries) -> None:
    _write_rows(path, summaries)


def write_scenario_results(path, results) -> None:
    _write_rows(path, results)


def read_summary(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# SVG


def _polyline(points, to_px, **attrs):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (to_px(p) for p in points))
    extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<polyline points="{pts}" fill="none" {extra}/>'


def scenario_svg(scenario, gt=None, candidates=(), selected=None, extent=geom.DEFAULT_EXTENT, scale=8.0) -> str:
    """Self-contained SVG: road polygons, obstacles, candidates, ground truth and the selection."""
    x0, x1, y0, y1 = extent
    w, h = (x1 - x0) * scale, (y1 - y0) * scale

    def to_px(p):
        return (p[0] - x0) * scale, (y1 - p[1]) * scale  # y axis points up in the figure

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" viewBox="0 0 {w:.0f} {h:.0f}">',
        f"<title>{scenario.id}</title>",
        f'<rect width="{w:.0f}" height="{h:.0f}" fill="#f4f4f4"/>',
    ]
    for poly in scenario.drivable_region:
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (to_px(p) for p in poly))
        parts.append(f'<polygon points="{pts}" fill="#c9c9c9" stroke="#888" stroke-width="1"/>')
    parts.append(_polyline(scenario.centerline, to_px, stroke="#ffffff", stroke_width=1, stroke_dasharray="6,4"))
    for o in scenario.obstacles:
        cx, cy = to_px(o.center)
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{o.radius * scale:.2f}" fill="#d9534f"/>')
    for c in candidates:
        parts.append(_polyline(c, to_px, stroke="#5b8def", stroke_width=1, stroke_opacity=0.35))
    if gt is not None:
        parts.append(_polyline(gt, to_px, stroke="#2ca02c", stroke_width=3))
    if selected is not None:
        parts.append(_polyline(selected, to_px, stroke="#ff7f0e", stroke_width=3))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path, *args, **kw) -> None:
    Path(path).write_text(scenario_svg(*args, **kw))
