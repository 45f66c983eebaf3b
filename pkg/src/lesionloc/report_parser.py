"""Rule-based extraction of lesions and their locations from radiology reports.

The parser targets structured reports that state one lesion per line, e.g.::

    Lesion 1: 12 mm, right mid posterior peripheral zone, PI-RADS 4.

A lesion statement is any span that starts with a lesion marker ("Lesion 3",
"Finding 2"); it must carry a PI-RADS score and usually carries location
terms. Location vocabulary lives in a term lexicon (data/location_lexicon.txt)
so synonyms can be extended without code changes. When a statement names
several values on one axis ("bilateral", "mid to apex"), one descriptor is
emitted per combination of named values.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from itertools import product
from pathlib import Path

__all__ = [
    "Laterality",
    "AP",
    "SI",
    "Zone",
    "LocationDescriptor",
    "ReportLesion",
    "ParsedReport",
    "Lexicon",
    "load_default_lexicon",
    "parse_report",
    "significant_lesions",
    "report_to_json",
]


class Laterality(Enum):
    LEFT = "left"
    RIGHT = "right"
    MIDLINE = "midline"
    UNSPECIFIED = "unspecified"


class AP(Enum):
    ANTERIOR = "anterior"
    POSTERIOR = "posterior"
    UNSPECIFIED = "unspecified"


class SI(Enum):
    BASE = "base"
    MID = "mid"
    APEX = "apex"
    UNSPECIFIED = "unspecified"


class Zone(Enum):
    PZ = "pz"
    TZ = "tz"
    CZ = "cz"
    AFS = "afs"
    UNSPECIFIED = "unspecified"


_AXIS_ENUMS = {"laterality": Laterality, "ap": AP, "si": SI, "zone": Zone}

# Canonical emission order for multi-valued axes.
_CANONICAL_ORDER = {
    Laterality: [Laterality.LEFT, Laterality.RIGHT, Laterality.MIDLINE],
    AP: [AP.ANTERIOR, AP.POSTERIOR],
    SI: [SI.BASE, SI.MID, SI.APEX],
    Zone: [Zone.PZ, Zone.TZ, Zone.CZ, Zone.AFS],
}


@dataclass(frozen=True)
class LocationDescriptor:
    """One sector-map location constraint; Unspecified axes impose none.

    ``zone`` is recorded for audit but never consulted by matching.
    """

    laterality: Laterality = Laterality.UNSPECIFIED
    ap: AP = AP.UNSPECIFIED
    si: SI = SI.UNSPECIFIED
    zone: Zone = Zone.UNSPECIFIED

    def is_fully_unspecified(self) -> bool:
        return (
            self.laterality is Laterality.UNSPECIFIED
            and self.ap is AP.UNSPECIFIED
            and self.si is SI.UNSPECIFIED
            and self.zone is Zone.UNSPECIFIED
        )

    def to_json_dict(self) -> dict:
        return {
            "laterality": self.laterality.value,
            "ap": self.ap.value,
            "si": self.si.value,
            "zone": self.zone.value,
        }


@dataclass(frozen=True)
class ReportLesion:
    index: int
    pirads: int
    locations: tuple[LocationDescriptor, ...]
    raw_span: str

    def __post_init__(self) -> None:
        if not 1 <= self.pirads <= 5:
            raise ValueError(f"PI-RADS score must be in [1, 5], got {self.pirads}")
        if self.index < 1:
            raise ValueError(f"lesion index must be positive, got {self.index}")
        if not self.locations:
            raise ValueError("lesion must carry at least one location descriptor")

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "pirads": self.pirads,
            "locations": [d.to_json_dict() for d in self.locations],
            "raw_span": self.raw_span,
        }


@dataclass(frozen=True)
class ParsedReport:
    lesions: tuple[ReportLesion, ...]
    warnings: tuple[tuple[int, str], ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "lesions": [l.to_json_dict() for l in self.lesions],
            "warnings": [[line, reason] for line, reason in self.warnings],
        }


def report_to_json(report: ParsedReport) -> str:
    """Canonical JSON rendering (sorted keys, 2-space indent, trailing newline)."""
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Lexicon
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicon:
    """term -> list of (axis name, enum value); matched longest-term-first."""

    terms: dict[str, tuple[tuple[str, Enum], ...]]
    pattern: re.Pattern = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        ordered = sorted(self.terms, key=len, reverse=True)
        alts = [r"\s+".join(re.escape(w) for w in t.split()) for t in ordered]
        pat = re.compile(r"\b(?:" + "|".join(alts) + r")\b")
        object.__setattr__(self, "pattern", pat)


def _parse_lexicon_lines(lines: list[str], source: str) -> Lexicon:
    terms: dict[str, tuple[tuple[str, Enum], ...]] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "->" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'term -> axis=value', got {line!r}")
        term, _, rhs = line.partition("->")
        term = " ".join(term.lower().split())
        if not term:
            raise ValueError(f"{source}:{lineno}: empty term")
        pairs = []
        for item in rhs.split(","):
            axis, _, value = item.strip().partition("=")
            axis = axis.strip().lower()
            value = value.strip().lower()
            if axis not in _AXIS_ENUMS:
                raise ValueError(f"{source}:{lineno}: unknown axis {axis!r}")
            try:
                pairs.append((axis, _AXIS_ENUMS[axis](value)))
            except ValueError:
                raise ValueError(f"{source}:{lineno}: unknown value {value!r} for axis {axis!r}") from None
        terms[term] = tuple(pairs)
    if not terms:
        raise ValueError(f"{source}: lexicon defines no terms")
    return Lexicon(terms=terms)


def load_lexicon(path: str | Path) -> Lexicon:
    path = Path(path)
    return _parse_lexicon_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


_DEFAULT_LEXICON: Lexicon | None = None


def load_default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        text = resources.files("lesionloc.data").joinpath("location_lexicon.txt").read_text("utf-8")
        _DEFAULT_LEXICON = _parse_lexicon_lines(text.splitlines(), "location_lexicon.txt")
    return _DEFAULT_LEXICON


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_MARKER_RE = re.compile(r"\b(?:lesion|finding)\s*(?:#|no\.?\s*|number\s*)?(\d+)\b", re.IGNORECASE)
_PIRADS_RE = re.compile(
    r"\bpi[\s-]*rads(?:\s*(?:category|score))?\s*[:=]?\s*([1-9])\b", re.IGNORECASE
)


def _normalize_for_terms(text: str) -> str:
    # Hyphens/slashes act as word separators so "mid-gland" and "PZ/TZ" split.
    return re.sub(r"[-/]", " ", text.lower())


def _descriptors_for(span: str, lexicon: Lexicon) -> list[LocationDescriptor]:
    named: dict[type, list[Enum]] = {Laterality: [], AP: [], SI: [], Zone: []}
    for m in lexicon.pattern.finditer(_normalize_for_terms(span)):
        for axis, value in lexicon.terms[" ".join(m.group(0).split())]:
            bucket = named[type(value)]
            if value not in bucket:
                bucket.append(value)
    axes = []
    for enum_type in (Laterality, AP, SI, Zone):
        values = [v for v in _CANONICAL_ORDER[enum_type] if v in named[enum_type]]
        axes.append(values or [enum_type("unspecified")])
    return [
        LocationDescriptor(laterality=lat, ap=ap, si=si, zone=zone)  # type: ignore[arg-type]
        for lat, ap, si, zone in product(*axes)
    ]


def parse_report(text: str, lexicon: Lexicon | None = None) -> ParsedReport:
    """Extract lesion statements from report text.

    Unparseable lesion statements are skipped and recorded in ``warnings`` as
    (line number, reason); text without lesion markers yields an empty list.
    """
    if not text or not text.strip():
        raise ValueError("report text is empty")
    lexicon = lexicon or load_default_lexicon()
    lesions: list[ReportLesion] = []
    warnings: list[tuple[int, str]] = []
    last_index = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        markers = list(_MARKER_RE.finditer(line))
        if not markers:
            continue
        # Several statements may share a line; split at each marker.
        for i, m in enumerate(markers):
            end = markers[i + 1].start() if i + 1 < len(markers) else len(line)
            span = line[m.start():end].strip()
            index = int(m.group(1))
            score_match = _PIRADS_RE.search(span)
            if score_match is None:
                warnings.append((lineno, f"lesion {index}: no PI-RADS score found; statement skipped"))
                continue
            pirads = int(score_match.group(1))
            if not 1 <= pirads <= 5:
                warnings.append((lineno, f"lesion {index}: PI-RADS {pirads} outside [1, 5]; statement skipped"))
                continue
            if index <= last_index:
                warnings.append((lineno, f"lesion {index}: index not increasing; statement skipped"))
                continue
            descriptors = _descriptors_for(span, lexicon)
            if len(descriptors) == 1 and descriptors[0].is_fully_unspecified():
                warnings.append((lineno, f"lesion {index}: no recognizable location terms"))
            lesions.append(
                ReportLesion(index=index, pirads=pirads, locations=tuple(descriptors), raw_span=span)
            )
            last_index = index
    return ParsedReport(lesions=tuple(lesions), warnings=tuple(warnings))


def significant_lesions(report: ParsedReport, min_pirads: int = 3) -> list[ReportLesion]:
    """Order-preserving filter to lesions with PI-RADS >= ``min_pirads``."""
    if not 1 <= min_pirads <= 5:
        raise ValueError(f"min_pirads must be in [1, 5], got {min_pirads}")
    return [l for l in report.lesions if l.pirads >= min_pirads]
