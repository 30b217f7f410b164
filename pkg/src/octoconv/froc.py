"""FROC analysis with relevant/irrelevant findings (ANODE09 / LUNA16 style)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FP_RATES",
    "CandidateRecord",
    "ReferenceNodule",
    "LabeledCandidate",
    "MatchResult",
    "FrocResult",
    "CsvFormatError",
    "match_candidates",
    "froc_curve",
    "froc_score",
    "malignancy_topn",
    "read_candidates_csv",
    "read_references_csv",
    "write_candidates_csv",
    "write_references_csv",
    "format_curve_csv",
    "format_summary",
]

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

HIT = "hit"
FALSE_POSITIVE = "fp"
IGNORED = "ignored"

CANDIDATE_HEADER = ["scan_id", "x_mm", "y_mm", "z_mm", "probability"]
REFERENCE_HEADER = ["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "relevance", "malignant"]


class CsvFormatError(ValueError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True)
class CandidateRecord:
    scan_id: str
    position: tuple  # (x, y, z) mm
    probability: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")
        if not all(math.isfinite(c) for c in self.position):
            raise ValueError(f"non-finite candidate position {self.position}")


@dataclass(frozen=True)
class ReferenceNodule:
    scan_id: str
    center: tuple  # (x, y, z) mm
    diameter: float
    relevant: bool = True
    malignant: bool = False

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"nodule diameter must be positive, got {self.diameter}")


@dataclass(frozen=True)
class LabeledCandidate:
    candidate: CandidateRecord
    status: str  # hit / fp / ignored
    nodule: int | None  # index into MatchResult.references


@dataclass
class MatchResult:
    labeled: list
    references: list
    scan_ids: tuple

    @property
    def n_scans(self) -> int:
        return len(self.scan_ids)

    @property
    def n_relevant(self) -> int:
        return sum(1 for r in self.references if r.relevant)


@dataclass
class FrocResult:
    curve: list  # (threshold, fp_per_scan, sensitivity), thresholds descending
    overall_score: float
    n_scans: int
    n_relevant: int
    sensitivities: dict = field(default_factory=dict)  # fp rate -> sensitivity


def match_candidates(candidates, references, scan_ids=None) -> MatchResult:
    """Label each candidate as a hit, a false positive or ignored.

    A candidate hits a nodule when its distance to the centre is strictly
    less than the radius. Among several hit nodules the nearest wins (ties
    go to the earlier reference). Hits on irrelevant findings are ignored.
    """
    references = list(references)
    known = list(dict.fromkeys([r.scan_id for r in references] + list(scan_ids or [])))
    by_scan: dict = {s: [] for s in known}
    for i, r in enumerate(references):
        by_scan[r.scan_id].append(i)
    labeled = []
    for c in candidates:
        if c.scan_id not in by_scan:
            raise ValueError(f"candidate references unknown scan_id {c.scan_id!r}")
        best, best_d = None, math.inf
        for i in by_scan[c.scan_id]:
            r = references[i]
            d = math.dist(c.position, r.center)
            if d < r.diameter / 2 and d < best_d:
                best, best_d = i, d
        if best is None:
            labeled.append(LabeledCandidate(c, FALSE_POSITIVE, None))
        elif references[best].relevant:
            labeled.append(LabeledCandidate(c, HIT, best))
        else:
            labeled.append(LabeledCandidate(c, IGNORED, best))
    return MatchResult(labeled, references, tuple(known))


def froc_curve(match: MatchResult, n_scans: int | None = None, fp_rates=FP_RATES) -> FrocResult:
    """Sweep thresholds over the distinct candidate probabilities.

    The sensitivity reported at a reference false-positive rate is that of
    the last sweep point whose rate does not exceed it (0 if there is none).
    """
    n_scans = match.n_scans if n_scans is None else int(n_scans)
    n_rel = match.n_relevant
    if n_rel == 0:
        raise ValueError("FROC needs at least one relevant nodule")
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")

    best_hit: dict = {}
    fp_probs = []
    for lc in match.labeled:
        p = lc.candidate.probability
        if lc.status == HIT:
            best_hit[lc.nodule] = max(best_hit.get(lc.nodule, -1.0), p)
        elif lc.status == FALSE_POSITIVE:
            fp_probs.append(p)
    thresholds = sorted({lc.candidate.probability for lc in match.labeled if lc.status != IGNORED}, reverse=True)

    fp_sorted = np.sort(np.asarray(fp_probs))[::-1]
    det_sorted = np.sort(np.asarray(list(best_hit.values())))[::-1]
    curve = []
    for t in thresholds:
        # counts of values >= t in descending arrays
        n_fp = int(np.searchsorted(-fp_sorted, -t, side="right"))
        n_det = int(np.searchsorted(-det_sorted, -t, side="right"))
        curve.append((float(t), n_fp / n_scans, n_det / n_rel))

    sens = {}
    for r in fp_rates:
        s = 0.0
        for _, fpr, se in curve:
            if fpr <= r:
                s = se
            else:
                break
        sens[r] = s
    score = float(np.mean(list(sens.values())))
    return FrocResult(curve, score, n_scans, n_rel, sens)


def froc_score(candidates, references, scan_ids=None) -> FrocResult:
    """Convenience: match then sweep."""
    return froc_curve(match_candidates(candidates, references, scan_ids))


def malignancy_topn(match: MatchResult, n: int) -> int:
    """Malignant nodules among the ``n`` highest-probability true positives."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    hits = [lc for lc in match.labeled if lc.status == HIT]
    hits.sort(key=lambda lc: (-lc.candidate.probability, lc.candidate.scan_id, tuple(lc.candidate.position)))
    seen = set()
    top = []
    for lc in hits:
        if lc.nodule in seen:
            continue
        seen.add(lc.nodule)
        top.append(lc)
        if len(top) == n:
            break
    return sum(1 for lc in top if match.references[lc.nodule].malignant)


# -- CSV formats ----------------------------------------------------------------


def _rows(path, header):
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        first = next(reader)
    except StopIteration:
        raise CsvFormatError(path, 1, "empty file, expected a header line") from None
    if [h.strip() for h in first] != header:
        raise CsvFormatError(path, 1, f"expected header {','.join(header)}")
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CsvFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        yield lineno, [c.strip() for c in row]


def _float(path, lineno, value, name):
    try:
        v = float(value)
    except ValueError:
        raise CsvFormatError(path, lineno, f"{name} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise CsvFormatError(path, lineno, f"{name} is not finite")
    return v


def read_candidates_csv(path) -> list:
    out = []
    for lineno, (sid, x, y, z, p) in _rows(path, CANDIDATE_HEADER):
        pos = tuple(_float(path, lineno, v, n) for v, n in ((x, "x_mm"), (y, "y_mm"), (z, "z_mm")))
        prob = _float(path, lineno, p, "probability")
        if not 0.0 <= prob <= 1.0:
            raise CsvFormatError(path, lineno, f"probability {prob} outside [0, 1]")
        out.append(CandidateRecord(sid, pos, prob))
    return out


def read_references_csv(path) -> tuple[list, list]:
    """Return ``(nodules, scan_ids)``.

    A row whose coordinate and diameter fields are all empty lists a scan
    without nodules.
    """
    nodules, scans = [], []
    for lineno, (sid, x, y, z, d, rel, mal) in _rows(path, REFERENCE_HEADER):
        if sid not in scans:
            scans.append(sid)
        if not (x or y or z or d):
            continue
        center = tuple(_float(path, lineno, v, n) for v, n in ((x, "x_mm"), (y, "y_mm"), (z, "z_mm")))
        diameter = _float(path, lineno, d, "diameter_mm")
        if diameter <= 0:
            raise CsvFormatError(path, lineno, "diameter_mm must be positive")
        if rel not in ("relevant", "irrelevant"):
            raise CsvFormatError(path, lineno, f"relevance must be relevant or irrelevant, got {rel!r}")
        if mal not in ("0", "1"):
            raise CsvFormatError(path, lineno, f"malignant must be 0 or 1, got {mal!r}")
        nodules.append(ReferenceNodule(sid, center, diameter, rel == "relevant", mal == "1"))
    return nodules, scans


def _fmt(v: float) -> str:
    return repr(float(v))


def write_candidates_csv(path, candidates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for c in candidates:
            w.writerow([c.scan_id, *map(_fmt, c.position), _fmt(c.probability)])


def write_references_csv(path, references, scan_ids=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REFERENCE_HEADER)
        listed = set()
        for r in references:
            listed.add(r.scan_id)
            w.writerow([r.scan_id, *map(_fmt, r.center), _fmt(r.diameter),
                        "relevant" if r.relevant else "irrelevant", int(r.malignant)])
        for s in scan_ids:
            if s not in listed:
                w.writerow([s, "", "", "", "", "", ""])
                listed.add(s)


def format_curve_csv(result: FrocResult) -> str:
    lines = ["threshold,fp_per_scan,sensitivity"]
    lines += [f"{_fmt(t)},{_fmt(f)},{_fmt(s)}" for t, f, s in result.curve]
    return "\n".join(lines) + "\n"


def format_summary(result: FrocResult) -> str:
    lines = [f"n_scans: {result.n_scans}", f"n_relevant: {result.n_relevant}"]
    for r, s in result.sensitivities.items():
        lines.append(f"sensitivity@{r:g}: {s:.6f}")
    lines.append(f"overall_score: {result.overall_score:.6f}")
    return "\n".join(lines) + "\n"
