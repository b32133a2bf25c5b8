"""Mammogram records: filename parsing, manifest I/O, curation and summaries."""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConflictError, DecodeError, ManifestError, ParseError

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "case_id", "side", "view", "status", "age", "width", "height")

# <case_id>.<SIDE>_<VIEW>.<ext>, e.g. C_0001_1.LEFT_CC.jpg
DEFAULT_GRAMMAR = r"^(?P<case_id>[^.]+)\.(?P<side>[A-Za-z]+)_(?P<view>[A-Za-z]+)\.(?P<ext>[A-Za-z0-9]+)$"

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".gif"}

DEFAULT_MIN_AGE = 18
DEFAULT_MAX_AGE = 99
DEFAULT_DIM_RANGE = (1, 10000)


class Side(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"


class View(str, enum.Enum):
    CC = "CC"
    MLO = "MLO"


class Status(str, enum.Enum):
    NORMAL = "normal"
    CANCER = "cancer"
    BENIGN = "benign"

    @property
    def label(self) -> str:
        return self.value.capitalize()

    @classmethod
    def parse(cls, text: str) -> "Status":
        key = text.strip().lower()
        key = _STATUS_ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ParseError(text, f"unknown status {text!r}") from None


# DDSM volume directories are plural ("normals", "cancers", "benigns")
_STATUS_ALIASES = {
    "normals": "normal",
    "cancers": "cancer",
    "benigns": "benign",
    "malignant": "cancer",
}

_SIDE_TOKENS = {"LEFT": Side.LEFT, "RIGHT": Side.RIGHT}
_VIEW_TOKENS = {"CC": View.CC, "MLO": View.MLO}


@dataclass(frozen=True)
class MammogramRecord:
    case_id: str
    side: Side
    view: View
    status: Status
    age: Optional[int]
    path: str
    width: int
    height: int

    @property
    def key(self) -> str:
        """Unique record key, ``<case_id>.<SIDE>_<VIEW>``."""
        side = "LEFT" if self.side is Side.LEFT else "RIGHT"
        return f"{self.case_id}.{side}_{self.view.value}"


@dataclass
class SummaryRow:
    label: str
    image_count: int
    age_mean: Optional[float]
    age_std: Optional[float]


@dataclass
class DatasetSummary:
    rows: list[SummaryRow]
    histogram: dict[int, int] = field(default_factory=dict)

    def row(self, label: str) -> SummaryRow:
        for r in self.rows:
            if r.label.lower() == label.lower():
                return r
        raise KeyError(label)

    def format_table(self) -> str:
        lines = [f"{'Label':<8}{'#images':>9}{'mu(age)':>10}{'sigma(age)':>12}"]
        for r in self.rows:
            mu = f"{r.age_mean:.4f}" if r.age_mean is not None else "NA"
            sd = f"{r.age_std:.4f}" if r.age_std is not None else "NA"
            lines.append(f"{r.label:<8}{r.image_count:>9}{mu:>10}{sd:>12}")
        return "\n".join(lines)


def parse_age(text: Optional[str]) -> Optional[int]:
    if text is None:
        return None
    text = text.strip()
    if not re.fullmatch(r"[+-]?\d+", text):
        return None
    return int(text)


def _status_from_path(path: Path) -> Optional[Status]:
    for parent in path.parents:
        try:
            return Status.parse(parent.name)
        except ParseError:
            continue
    return None


def read_image_size(path) -> tuple[int, int]:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from exc


def parse_record(
    path,
    status_hint: Optional[Status] = None,
    age_field: Optional[str] = None,
    *,
    size: Optional[tuple[int, int]] = None,
    grammar: str = DEFAULT_GRAMMAR,
) -> MammogramRecord:
    """Build a record from an image filename.

    The status comes from ``status_hint`` or, failing that, from the nearest
    ancestor directory named after a status. When both are available they must
    agree. ``size`` is ``(width, height)``; it is read from the image header
    when omitted.
    """
    p = Path(path)
    m = re.match(grammar, p.name)
    if m is None:
        raise ParseError(p.name, f"filename {p.name!r} does not match the record grammar")
    side_tok = m.group("side").upper()
    view_tok = m.group("view").upper()
    if side_tok not in _SIDE_TOKENS:
        raise ParseError(m.group("side"))
    if view_tok not in _VIEW_TOKENS:
        raise ParseError(m.group("view"))

    folder_status = _status_from_path(p)
    if status_hint is not None and folder_status is not None and status_hint != folder_status:
        raise ConflictError(
            f"{p}: status {status_hint.value!r} contradicts folder status {folder_status.value!r}"
        )
    status = status_hint or folder_status
    if status is None:
        raise ParseError(str(p), f"no status for {p}: pass a hint or place it under a status folder")

    width, height = size if size is not None else read_image_size(p)
    return MammogramRecord(
        case_id=m.group("case_id"),
        side=_SIDE_TOKENS[side_tok],
        view=_VIEW_TOKENS[view_tok],
        status=status,
        age=parse_age(age_field),
        path=str(path),
        width=int(width),
        height=int(height),
    )


def filter_outliers(records: Sequence[MammogramRecord], min_age: int = DEFAULT_MIN_AGE,
                    max_age: int = DEFAULT_MAX_AGE):
    """Split records into (kept, removed) by age bounds; unknown ages are kept."""
    if not min_age < max_age:
        raise ValueError(f"min_age ({min_age}) must be < max_age ({max_age})")
    kept, removed = [], []
    for r in records:
        if r.age is None or min_age <= r.age <= max_age:
            kept.append(r)
        else:
            removed.append(r)
    return kept, removed


def _mean_std(ages: list[int]):
    if not ages:
        return None, None
    a = np.asarray(ages, dtype=float)
    mean = float(a.mean())
    std = float(a.std(ddof=1)) if a.size >= 2 else None
    return mean, std


def summarize(records: Sequence[MammogramRecord]) -> DatasetSummary:
    rows = []
    all_ages = []
    for status in Status:
        group = [r for r in records if r.status is status]
        ages = [r.age for r in group if r.age is not None]
        all_ages.extend(ages)
        rows.append(SummaryRow(status.label, len(group), *_mean_std(ages)))
    rows.append(SummaryRow("Total", len(records), *_mean_std(all_ages)))
    histogram = dict(sorted(Counter(all_ages).items()))
    return DatasetSummary(rows, histogram)


def balanced_sample(records: Sequence[MammogramRecord], seed: int) -> list[MammogramRecord]:
    """Draw an equal number of known-age records per status, without replacement.

    The per-class count is the size of the smallest class. Classes are emitted
    in ``Status`` order and records keep their input order within a class.
    """
    groups = {s: [r for r in records if r.status is s and r.age is not None] for s in Status}
    for s, g in groups.items():
        if not g:
            raise ValueError(f"status class {s.label!r} has no records with known age")
    k = min(len(g) for g in groups.values())
    rng = np.random.default_rng(seed)
    out = []
    for s in Status:
        g = groups[s]
        idx = np.sort(rng.choice(len(g), size=k, replace=False))
        out.extend(g[i] for i in idx)
    return out


def write_manifest(records: Iterable[MammogramRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    seen = set()
    for r in records:
        if r.key in seen:
            raise ManifestError(f"duplicate record {r.key}")
        seen.add(r.key)
        w.writerow([r.path, r.case_id, r.side.value, r.view.value, r.status.value,
                    "" if r.age is None else str(r.age), r.width, r.height])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_manifest(path) -> list[MammogramRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise ManifestError(f"bad header {header!r}, expected {','.join(MANIFEST_HEADER)}", line=1)
        records = []
        seen = set()
        for row in reader:
            line = reader.line_num
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", line)
            p, case_id, side, view, status, age, width, height = row
            try:
                rec = MammogramRecord(
                    case_id=case_id,
                    side=Side(side),
                    view=View(view),
                    status=Status(status),
                    age=_strict_age(age),
                    path=p,
                    width=int(width),
                    height=int(height),
                )
            except ValueError as exc:
                raise ManifestError(str(exc), line) from None
            if rec.key in seen:
                raise ManifestError(f"duplicate record {rec.key}", line)
            seen.add(rec.key)
            records.append(rec)
    return records


def _strict_age(text: str) -> Optional[int]:
    if text == "":
        return None
    if not re.fullmatch(r"\d+", text):
        raise ValueError(f"age {text!r} is not a base-10 integer")
    return int(text)


def resolve_path(record: MammogramRecord, manifest_path) -> Path:
    """Record paths are stored relative to the manifest's directory."""
    p = Path(record.path)
    if p.is_absolute():
        return p
    return Path(manifest_path).resolve().parent / p


def _ics_age(directory: Path) -> Optional[str]:
    for ics in sorted(directory.glob("*.ics")):
        m = re.search(r"PATIENT_AGE\s+(\S+)", ics.read_text(errors="replace"))
        if m:
            return m.group(1)
    return None


def load_age_table(path) -> dict[str, str]:
    """Map image file name to age text from a CSV with ``fileName``/``Age`` columns."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = {c.lower(): c for c in reader.fieldnames or ()}
        name_col = cols.get("filename") or cols.get("file_name")
        age_col = cols.get("age")
        if name_col is None or age_col is None:
            raise ManifestError(f"{path}: need fileName and Age columns")
        for row in reader:
            out[Path(row[name_col]).name] = row[age_col]
    return out


def ingest(
    root,
    manifest_path,
    *,
    min_age: int = DEFAULT_MIN_AGE,
    max_age: int = DEFAULT_MAX_AGE,
    dim_range: tuple[int, int] = DEFAULT_DIM_RANGE,
    age_table: Optional[dict[str, str]] = None,
    grammar: str = DEFAULT_GRAMMAR,
) -> tuple[list[MammogramRecord], list[MammogramRecord]]:
    """Scan an archive laid out as ``<Status>/.../<case_id>.<SIDE>_<VIEW>.<ext>``.

    Ages are looked up in ``age_table`` (by file name), then in a sidecar
    ``<image>.json`` with an ``age`` field, then in a ``.ics`` file next to the
    image. Files not matching the grammar (e.g. mask images) are skipped.
    Returns ``(kept, removed)``; record paths are relative to the manifest.
    """
    root = Path(root)
    base = Path(manifest_path).resolve().parent
    records = []
    skipped = 0
    ics_cache: dict[Path, Optional[str]] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        d = Path(dirpath)
        for name in sorted(filenames):
            f = d / name
            if f.suffix.lower() not in IMAGE_EXTENSIONS or not re.match(grammar, name):
                skipped += 1
                continue
            age_text = None
            if age_table is not None:
                age_text = age_table.get(name)
            if age_text is None:
                sidecar = f.with_name(name + ".json")
                if sidecar.exists():
                    age = json.loads(sidecar.read_text()).get("age")
                    age_text = None if age is None else str(age)
            if age_text is None:
                if d not in ics_cache:
                    ics_cache[d] = _ics_age(d)
                age_text = ics_cache[d]
            rec = parse_record(f, age_field=age_text, grammar=grammar)
            rel = Path(os.path.relpath(f.resolve(), base)).as_posix()
            rec = MammogramRecord(rec.case_id, rec.side, rec.view, rec.status, rec.age,
                                  rel, rec.width, rec.height)
            lo, hi = dim_range
            if not (lo <= rec.width <= hi and lo <= rec.height <= hi):
                log.warning("skipping %s: size %dx%d outside %s", f, rec.width, rec.height, dim_range)
                skipped += 1
                continue
            records.append(rec)
    # Raw ages outside (0, 130) are data-entry errors, always removed.
    kept, removed = filter_outliers(records, max(min_age, 1), min(max_age, 129))
    log.info("ingested %d records (%d removed as outliers, %d files skipped)",
             len(kept), len(removed), skipped)
    write_manifest(kept, manifest_path)
    return kept, removed


def write_histogram(summary: DatasetSummary, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["age", "count"])
    for age, count in summary.histogram.items():
        w.writerow([age, count])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")

