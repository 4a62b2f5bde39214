"""Line-oriented sequence file format.

A file is UTF-8 JSON Lines. Line 1 is the header::

    {"format": "tripod-seq", "version": 1, "K": 13, "d": 2, "tau_o": 8,
     "tau_f": 8, "frame_interval_ms": 40.0, "units": "px", "n_samples": 2}

Each sample is a ``sample`` record followed by its ``person`` and ``object``
records::

    {"record": "sample", "sample_id": "0", "n_persons": 2, "n_objects": 1, "context": null}
    {"record": "person", "person_id": "leader", "observed": [[...F...], ...],
     "future": [[...F...], ...] | null, "visibility_prob": [[...K...], ...] | null}
    {"record": "object", "visual": [...], "bbox_center": [x, y], "bbox_size": [w, h], "class_id": 3}

Per-frame states are flattened joint-major as ``offset | location | visibility``.
Prediction files use the same schema: ``future`` holds the forecast with
visibility thresholded to 0/1 and ``visibility_prob`` carries the raw
probabilities. Floats are written with ``repr`` so parse(serialize(x)) is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .decoder import ForecastResult
from .types import ObjectFeature, PersonTrack, SceneSample, validate_sample

FORMAT = "tripod-seq"
VERSION = 1
HEADER_KEYS = {"format", "version", "K", "d", "tau_o", "tau_f", "frame_interval_ms", "units", "n_samples"}
SAMPLE_KEYS = {"record", "sample_id", "n_persons", "n_objects", "context"}
PERSON_KEYS = {"record", "person_id", "observed", "future", "visibility_prob"}
OBJECT_KEYS = {"record", "visual", "bbox_center", "bbox_size", "class_id"}


class DataError(ValueError):
    pass


@dataclass
class Header:
    K: int
    d: int
    tau_o: int
    tau_f: int
    frame_interval_ms: float
    units: str = "px"


def _rows(arr: np.ndarray) -> list:
    return [[float(x) for x in row.reshape(-1)] for row in arr]


def _sample_lines(sample: SceneSample, probs: Optional[np.ndarray] = None) -> Iterable[dict]:
    yield {"record": "sample", "sample_id": sample.sample_id, "n_persons": len(sample.persons),
           "n_objects": len(sample.objects),
           "context": None if sample.context is None else [float(x) for x in sample.context]}
    for i, p in enumerate(sample.persons):
        yield {"record": "person", "person_id": p.person_id, "observed": _rows(p.observed),
               "future": None if p.future is None else _rows(p.future),
               "visibility_prob": None if probs is None else _rows(probs[i])}
    for o in sample.objects:
        yield {"record": "object", "visual": [float(x) for x in o.visual],
               "bbox_center": [float(x) for x in o.bbox_center],
               "bbox_size": [float(x) for x in o.bbox_size], "class_id": int(o.class_id)}


def header_for(samples: Sequence[SceneSample], units: str = "px", tau_f: Optional[int] = None) -> Header:
    if not samples:
        raise DataError("cannot infer a header from zero samples")
    s = samples[0]
    return Header(s.K, s.d, s.tau_o, s.tau_f if tau_f is None else tau_f, s.frame_interval_ms, units)


def serialize(samples: Sequence[SceneSample], header: Optional[Header] = None,
              probs: Optional[Sequence[np.ndarray]] = None) -> str:
    header = header or header_for(samples)
    for s in samples:
        if s.frame_interval_ms != header.frame_interval_ms:
            raise DataError(f"sample {s.sample_id}: frame interval differs from the file header")
    head = {"format": FORMAT, "version": VERSION, "K": header.K, "d": header.d, "tau_o": header.tau_o,
            "tau_f": header.tau_f, "frame_interval_ms": float(header.frame_interval_ms), "units": header.units,
            "n_samples": len(samples)}
    lines = [json.dumps(head)]
    for i, s in enumerate(samples):
        for rec in _sample_lines(s, None if probs is None else probs[i]):
            lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def write(path, samples: Sequence[SceneSample], header: Optional[Header] = None,
          probs: Optional[Sequence[np.ndarray]] = None) -> None:
    Path(path).write_text(serialize(samples, header, probs))


def _check_keys(rec: dict, allowed: set, line: int, kind: str) -> None:
    unknown = sorted(set(rec) - allowed)
    if unknown:
        raise DataError(f"line {line}: unknown {kind} field(s) {', '.join(unknown)}")
    missing = sorted(allowed - set(rec))
    if missing:
        raise DataError(f"line {line}: {kind} record missing field(s) {', '.join(missing)}")


def _frames(rows, width: int, K: int, line: int, field_: str, pid) -> np.ndarray:
    try:
        arr = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"line {line}: person {pid!r} field {field_!r} is not a numeric matrix") from None
    if arr.ndim != 2 or arr.shape[1] != width:
        got = arr.shape[1] if arr.ndim == 2 else arr.shape
        raise DataError(f"line {line}: person {pid!r} field {field_!r} has {got} values per frame, "
                        f"header K implies {width}")
    return arr


def parse_text(text: str, source: str = "<string>", validate: bool = True
               ) -> Tuple[Header, List[SceneSample], List[Optional[np.ndarray]]]:
    """Parse a sequence file; returns header, samples and per-sample visibility probabilities."""
    lines = [ln for ln in text.splitlines()]
    if not lines or not lines[0].strip():
        raise DataError(f"{source}: empty file, header expected")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{source} line 1: header is not JSON ({exc})") from None
    unknown = sorted(set(head) - HEADER_KEYS)
    if unknown:
        raise DataError(f"{source} line 1: unknown header field(s) {', '.join(unknown)}")
    missing = sorted(HEADER_KEYS - set(head))
    if missing:
        raise DataError(f"{source} line 1: header missing field(s) {', '.join(missing)}")
    if head["format"] != FORMAT or head["version"] != VERSION:
        raise DataError(f"{source} line 1: unsupported format {head['format']!r} v{head['version']}")
    header = Header(int(head["K"]), int(head["d"]), int(head["tau_o"]), int(head["tau_f"]),
                    float(head["frame_interval_ms"]), str(head["units"]))
    K, d = header.K, header.d
    width = K * (2 * d + 1)

    recs = []
    for i, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        try:
            recs.append((i, json.loads(ln)))
        except json.JSONDecodeError as exc:
            raise DataError(f"{source} line {i}: malformed record ({exc})") from None

    samples: List[SceneSample] = []
    probs: List[Optional[np.ndarray]] = []
    pos = 0
    while pos < len(recs):
        line, rec = recs[pos]
        if rec.get("record") != "sample":
            raise DataError(f"{source} line {line}: expected a sample record, got {rec.get('record')!r}")
        _check_keys(rec, SAMPLE_KEYS, line, "sample")
        n_p, n_o = int(rec["n_persons"]), int(rec["n_objects"])
        if pos + 1 + n_p + n_o > len(recs):
            raise DataError(f"{source} line {line}: sample {rec['sample_id']!r} is truncated")
        persons, sample_probs = [], []
        for j in range(n_p):
            pl, pr = recs[pos + 1 + j]
            if pr.get("record") != "person":
                raise DataError(f"{source} line {pl}: expected a person record")
            _check_keys(pr, PERSON_KEYS, pl, "person")
            pid = pr["person_id"]
            obs = _frames(pr["observed"], width, K, pl, "observed", pid).reshape(-1, K, 2 * d + 1)
            if obs.shape[0] != header.tau_o:
                raise DataError(f"{source} line {pl}: person {pid!r} has {obs.shape[0]} observed frames, "
                                f"header says {header.tau_o}")
            fut = None
            if pr["future"] is not None:
                fut = _frames(pr["future"], width, K, pl, "future", pid).reshape(-1, K, 2 * d + 1)
                if fut.shape[0] != header.tau_f:
                    raise DataError(f"{source} line {pl}: person {pid!r} has {fut.shape[0]} future frames, "
                                    f"header says {header.tau_f}")
            if pr["visibility_prob"] is not None:
                sample_probs.append(_frames(pr["visibility_prob"], K, K, pl, "visibility_prob", pid))
            persons.append(PersonTrack(str(pid), obs, fut))
        objects = []
        for j in range(n_o):
            ol, orec = recs[pos + 1 + n_p + j]
            if orec.get("record") != "object":
                raise DataError(f"{source} line {ol}: expected an object record")
            _check_keys(orec, OBJECT_KEYS, ol, "object")
            objects.append(ObjectFeature(np.asarray(orec["visual"], dtype=np.float64),
                                         np.asarray(orec["bbox_center"], dtype=np.float64),
                                         np.asarray(orec["bbox_size"], dtype=np.float64),
                                         int(orec["class_id"])))
        ctx = None if rec["context"] is None else np.asarray(rec["context"], dtype=np.float64)
        sample = SceneSample(persons, objects, ctx, header.frame_interval_ms, str(rec["sample_id"]))
        if validate:
            problems = validate_sample(sample)
            if problems:
                raise DataError(f"{source} line {line}: sample {sample.sample_id!r} invalid: "
                                + "; ".join(map(str, problems[:5])))
        samples.append(sample)
        if sample_probs and len(sample_probs) != n_p:
            raise DataError(f"{source} line {line}: visibility_prob present for only some persons")
        probs.append(np.stack(sample_probs) if sample_probs else None)
        pos += 1 + n_p + n_o
    if len(samples) != int(head["n_samples"]):
        raise DataError(f"{source}: header declares {head['n_samples']} samples, found {len(samples)}")
    return header, samples, probs


def parse(path, validate: bool = True) -> List[SceneSample]:
    """Read and validate every sample in a sequence file."""
    path = Path(path)
    return parse_text(path.read_text(), str(path), validate)[1]


def read(path, validate: bool = True):
    path = Path(path)
    return parse_text(path.read_text(), str(path), validate)


# ---------------------------------------------------------------- predictions


def forecast_to_sample(sample: SceneSample, fc: ForecastResult, threshold: float = 0.5) -> SceneSample:
    states = fc.states(threshold)
    persons = [PersonTrack(p.person_id, p.observed, states[i]) for i, p in enumerate(sample.persons)]
    return SceneSample(persons, sample.objects, sample.context, sample.frame_interval_ms, sample.sample_id)


def write_predictions(path, samples: Sequence[SceneSample], forecasts: Sequence[ForecastResult],
                      threshold: float = 0.5, units: str = "px") -> None:
    out = [forecast_to_sample(s, f, threshold) for s, f in zip(samples, forecasts)]
    tau_f = forecasts[0].horizon if forecasts else 0
    header = header_for(samples, units, tau_f) if samples else Header(1, 2, 1, 0, 40.0, units)
    write(path, out, header, [f.visibility for f in forecasts])


def read_predictions(path) -> List[ForecastResult]:
    """Forecasts stored in a prediction file, using ``visibility_prob`` when present."""
    header, samples, probs = read(path, validate=False)
    d = header.d
    out = []
    for s, pr in zip(samples, probs):
        fut = s.future_array()
        vis = pr if pr is not None else fut[..., -1]
        out.append(ForecastResult(fut[..., :d].copy(), fut[..., d:2 * d].copy(), np.asarray(vis, float),
                                  [p.person_id for p in s.persons]))
    return out
