"""Visibility-aware evaluation: VIM, the singleton-set VAM, visibility IoU/F1.

Per-joint sets are either empty (invisible) or a single location. Ground
truth visibility is binary; predicted probabilities become sets through
``threshold`` (``p >= threshold`` means visible).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .types import SceneSample

CSV_COLUMNS = ("horizon_ms", "frame", "vim", "vam", "iou", "f1", "n_persons", "n_joints")


def vam_pair(g: Optional[np.ndarray], q: Optional[np.ndarray], beta: float) -> float:
    """Distance between two singleton-or-empty sets (``None`` is the empty set)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    cg = 0 if g is None else 1
    cq = 0 if q is None else 1
    if cg and cq:
        dist = min(beta, float(np.linalg.norm(np.asarray(g, float) - np.asarray(q, float))))
    else:
        dist = 0.0
    return math.sqrt(dist * dist + beta * beta * (cg - cq) ** 2)


def vim_frame(pred_loc: np.ndarray, true_loc: np.ndarray, true_vis: np.ndarray) -> Tuple[Optional[float], int, int]:
    """VIM for one frame from ``(P, K, d)`` locations and ``(P, K)`` truth visibility.

    Returns ``(value or None, persons evaluated, joints evaluated)``.
    """
    vis = np.asarray(true_vis, bool)
    err = np.linalg.norm(pred_loc - true_loc, axis=-1)
    counts = vis.sum(axis=1)
    keep = counts > 0
    if not keep.any():
        return None, 0, 0
    per_person = np.where(vis, err, 0.0).sum(axis=1)[keep] / counts[keep]
    return float(per_person.mean()), int(keep.sum()), int(counts.sum())


def vim(pred, truth: np.ndarray, frame: int) -> Optional[float]:
    """VIM at future ``frame`` (0-based) given a forecast and truth states ``(P, T, K, 2d + 1)``."""
    d = pred.locations.shape[-1]
    return vim_frame(pred.locations[:, frame], truth[:, frame, :, d:2 * d], truth[:, frame, :, -1] > 0.5)[0]


def vam_frame(pred_loc: np.ndarray, pred_vis: np.ndarray, true_loc: np.ndarray, true_vis: np.ndarray,
              beta: float) -> float:
    """Mean singleton-set distance over persons and joints, normalized by the
    summed maximum cardinality; 0 when nothing is present on either side."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    cg = np.asarray(true_vis, bool)
    cq = np.asarray(pred_vis, bool)
    both = cg & cq
    dist = np.minimum(beta, np.linalg.norm(pred_loc - true_loc, axis=-1))
    dist = np.where(both, dist, 0.0)
    card = (cg != cq).astype(np.float64)
    per = np.sqrt(dist * dist + beta * beta * card)
    alpha = float((cg | cq).sum())
    if alpha == 0:
        return 0.0
    return float(per.sum() / alpha)


def vam(pred, truth: np.ndarray, beta: float, frame: int, threshold: float = 0.5) -> float:
    d = pred.locations.shape[-1]
    return vam_frame(pred.locations[:, frame], pred.visibility[:, frame] >= threshold,
                     truth[:, frame, :, d:2 * d], truth[:, frame, :, -1] > 0.5, beta)


def _binary_scores(pred: np.ndarray, true: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """IoU and F1 along the last axis; no positives on either side scores 1."""
    tp = (pred & true).sum(axis=-1)
    fp = (pred & ~true).sum(axis=-1)
    fn = (~pred & true).sum(axis=-1)
    denom_iou = tp + fp + fn
    denom_f1 = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom_iou > 0, tp / np.maximum(denom_iou, 1), 1.0)
        f1 = np.where(denom_f1 > 0, 2 * tp / np.maximum(denom_f1, 1), 1.0)
    return iou, f1


def visibility_scores(pred_vis: np.ndarray, true_vis: np.ndarray, filtered: bool = False
                      ) -> Tuple[Optional[float], Optional[float]]:
    """IoU / F1 of visibility over future frames, averaged over persons and joints.

    Inputs are boolean ``(P, T, K)``. Each person-joint's binary vector across
    frames is scored separately (visible is the positive class). ``filtered``
    keeps only person-joints with at least one invisible ground-truth frame;
    if none qualify the result is ``(None, None)``.
    """
    pred = np.asarray(pred_vis, bool)
    true = np.asarray(true_vis, bool)
    if pred.shape != true.shape:
        raise ValueError(f"visibility_scores: {pred.shape} vs {true.shape}")
    pred = np.moveaxis(pred, 1, -1).reshape(-1, pred.shape[1])
    true = np.moveaxis(true, 1, -1).reshape(-1, true.shape[1])
    if filtered:
        keep = (~true).any(axis=1)
        pred, true = pred[keep], true[keep]
    if pred.shape[0] == 0:
        return None, None
    iou, f1 = _binary_scores(pred, true)
    return float(iou.mean()), float(f1.mean())


def frames_for_horizons(horizons_ms: Sequence[float], frame_interval_ms: float, tau_f: int
                        ) -> List[Tuple[float, int]]:
    """Map each horizon (ms) to the nearest future frame (1-based, within ``1..tau_f``).

    Half-frame ties round up; the small slack keeps that rule stable under
    roundoff in the frame interval.
    """
    if not horizons_ms:
        return [(f * frame_interval_ms, f) for f in range(1, tau_f + 1)]
    out = []
    for h in horizons_ms:
        f = int(np.clip(np.floor(h / frame_interval_ms + 0.5 + 1e-9), 1, tau_f))
        out.append((float(h), f))
    return out


@dataclass
class MetricRow:
    horizon_ms: float
    frame: int
    vim: Optional[float]
    vam: Optional[float]
    iou: Optional[float]
    f1: Optional[float]
    n_persons: int
    n_joints: int


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.horizon_ms), r.frame, _fmt(r.vim), _fmt(r.vam), _fmt(r.iou), _fmt(r.f1),
                        r.n_persons, r.n_joints])
        return buf.getvalue()

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(r, name) for r in self.rows]


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _mean_present(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def check_alignment(preds, truths: Sequence[SceneSample]) -> None:
    if len(preds) != len(truths):
        raise ValueError(f"alignment mismatch: {len(preds)} prediction samples vs {len(truths)} truth samples")
    for i, (p, s) in enumerate(zip(preds, truths)):
        ids = [t.person_id for t in s.persons]
        if list(p.person_ids) != ids:
            raise ValueError(f"alignment mismatch in sample {i}: persons {list(p.person_ids)} vs {ids}")
        if s.tau_f != p.horizon:
            raise ValueError(f"alignment mismatch in sample {i}: {p.horizon} predicted frames vs {s.tau_f} truth frames")
        if p.locations.shape[2] != s.K or p.locations.shape[3] != s.d:
            raise ValueError(f"alignment mismatch in sample {i}: joint layout differs")


def vim_curve(preds, truths: Sequence[SceneSample]) -> List[Optional[float]]:
    """Sample-averaged VIM for each future frame."""
    check_alignment(preds, truths)
    T = truths[0].tau_f if truths else 0
    out = []
    for f in range(T):
        out.append(_mean_present([vim(p, s.future_array(), f) for p, s in zip(preds, truths)]))
    return out


def report(preds, truths: Sequence[SceneSample], beta: float = 200.0, threshold: float = 0.5,
           horizons_ms: Sequence[float] = (), filtered: bool = False,
           person_subset: Optional[Sequence[Sequence[int]]] = None) -> MetricReport:
    """Score forecasts against truth samples and map frames to horizons.

    Per-frame VIM/VAM are averaged over samples (absent VIM values skipped).
    IoU/F1 at a horizon cover future frames ``1..frame``. ``person_subset``
    optionally restricts scoring to given person indices per sample.
    """
    check_alignment(preds, truths)
    if not truths:
        return MetricReport()
    T = truths[0].tau_f
    interval = truths[0].frame_interval_ms
    rows = []
    for h_ms, frame in frames_for_horizons(horizons_ms, interval, T):
        f = frame - 1
        vims, vams, ious, f1s = [], [], [], []
        n_p = n_j = 0
        for i, (p, s) in enumerate(zip(preds, truths)):
            truth = s.future_array()
            sel = slice(None) if person_subset is None else list(person_subset[i])
            d = s.d
            pl, pv = p.locations[sel], p.visibility[sel] >= threshold
            tl, tv = truth[sel, :, :, d:2 * d], truth[sel, :, :, -1] > 0.5
            v, np_, nj = vim_frame(pl[:, f], tl[:, f], tv[:, f])
            vims.append(v)
            n_p += np_
            n_j += nj
            vams.append(vam_frame(pl[:, f], pv[:, f], tl[:, f], tv[:, f], beta))
            iou, f1 = visibility_scores(pv[:, :frame], tv[:, :frame], filtered)
            ious.append(iou)
            f1s.append(f1)
        rows.append(MetricRow(h_ms, frame, _mean_present(vims), _mean_present(vams), _mean_present(ious),
                              _mean_present(f1s), n_p, n_j))
    return MetricReport(rows)


def parse_report_csv(text: str) -> MetricReport:
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected report columns {reader.fieldnames}")
    opt = lambda s: None if s == "" else float(s)  # noqa: E731
    for r in reader:
        rows.append(MetricRow(float(r["horizon_ms"]), int(r["frame"]), opt(r["vim"]), opt(r["vam"]),
                              opt(r["iou"]), opt(r["f1"]), int(r["n_persons"]), int(r["n_joints"])))
    return MetricReport(rows)
