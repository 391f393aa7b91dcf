"""Study identity parsing and LE/DES pair manifest construction.

Dataset files are named ``P<patient>_<L|R>_<DM|CM>_<CC|MLO>`` (extension and
letter case vary in the wild).  ``DM`` marks the low-energy acquisition and
``CM`` the subtracted one; a pair is one DM plus one CM image sharing
patient, side and view.  Class labels come from a separate annotations
table, never from filenames.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from enum import Enum

from .errors import FilenameError, ManifestError


class Side(str, Enum):
    LEFT = "L"
    RIGHT = "R"


class Energy(str, Enum):
    LOW_ENERGY = "DM"
    SUBTRACTED = "CM"


class View(str, Enum):
    CC = "CC"
    MLO = "MLO"


class Label(str, Enum):
    NON_MALIGNANT = "nonmalignant"
    MALIGNANT = "malignant"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class StudyKey:
    """Identity of one image: patient, breast side, energy and view."""

    patient_id: int
    side: Side
    energy: Energy
    view: View

    def __post_init__(self):
        if self.patient_id < 1:
            raise FilenameError(f"patient id must be positive, got {self.patient_id}")


@dataclass(frozen=True)
class StudyRecord:
    key: StudyKey
    path: str
    label: Label = Label.UNLABELED

    def __post_init__(self):
        if not self.path:
            raise ManifestError("study record has an empty path")


@dataclass(frozen=True)
class PairRecord:
    """One low-energy image matched with its subtracted counterpart."""

    le: StudyRecord
    des: StudyRecord

    def __post_init__(self):
        if self.le.key.energy is not Energy.LOW_ENERGY:
            raise ManifestError(f"pair LE member has energy {self.le.key.energy.value}")
        if self.des.key.energy is not Energy.SUBTRACTED:
            raise ManifestError(f"pair DES member has energy {self.des.key.energy.value}")
        a, b = self.le.key, self.des.key
        if (a.patient_id, a.side, a.view) != (b.patient_id, b.side, b.view):
            raise ManifestError(
                f"pair mixes studies: {render_filename(a)} vs {render_filename(b)}"
            )


def parse_filename(name: str) -> StudyKey:
    """Decode ``P<id>_<side>_<energy>_<view>[.ext]`` into a StudyKey.

    Tokens are matched case-insensitively and a trailing extension is
    stripped.  Raises :class:`FilenameError` naming the offending token.
    """
    stem = os.path.splitext(os.path.basename(name))[0]
    tokens = stem.split("_")
    if len(tokens) != 4:
        raise FilenameError(f"expected 4 tokens in {name!r}, got {len(tokens)}")
    pat, side_tok, energy_tok, view_tok = (t.upper() for t in tokens)
    if not pat.startswith("P") or not pat[1:].isdigit():
        raise FilenameError(f"bad patient token {tokens[0]!r} in {name!r}")
    try:
        side = Side(side_tok)
    except ValueError:
        raise FilenameError(f"unknown side token {tokens[1]!r} in {name!r}") from None
    try:
        energy = Energy(energy_tok)
    except ValueError:
        raise FilenameError(f"unknown energy token {tokens[2]!r} in {name!r}") from None
    try:
        view = View(view_tok)
    except ValueError:
        raise FilenameError(f"unknown view token {tokens[3]!r} in {name!r}") from None
    return StudyKey(int(pat[1:]), side, energy, view)


def render_filename(key: StudyKey) -> str:
    """Canonical stem for a key; inverse of :func:`parse_filename`."""
    return f"P{key.patient_id}_{key.side.value}_{key.energy.value}_{key.view.value}"


def build_pair_manifest(
    records: list[StudyRecord],
) -> tuple[list[PairRecord], list[StudyRecord]]:
    """Match every DM record with the CM record of the same patient/side/view.

    Returns the pairs plus the records left unmatched.  Two records with an
    identical StudyKey are an error (ambiguous pairing).
    """
    by_key: dict[StudyKey, StudyRecord] = {}
    dups = []
    for rec in records:
        if rec.key in by_key:
            dups.append(rec)
        else:
            by_key[rec.key] = rec
    if dups:
        listing = ", ".join(sorted(render_filename(r.key) for r in dups))
        raise ManifestError(f"duplicate study keys: {listing}")

    pairs: list[PairRecord] = []
    unmatched: list[StudyRecord] = []
    for key in sorted(by_key, key=_key_order):
        if key.energy is not Energy.LOW_ENERGY:
            continue
        partner = StudyKey(key.patient_id, key.side, Energy.SUBTRACTED, key.view)
        if partner in by_key:
            pairs.append(PairRecord(by_key[key], by_key[partner]))
        else:
            unmatched.append(by_key[key])
    matched = {p.le.key for p in pairs} | {p.des.key for p in pairs}
    for key in sorted(by_key, key=_key_order):
        if key.energy is Energy.SUBTRACTED and key not in matched:
            unmatched.append(by_key[key])
    return pairs, unmatched


def _key_order(key: StudyKey):
    return (key.patient_id, key.side.value, key.view.value, key.energy.value)


MANIFEST_HEADER = ["path", "patient_id", "side", "view", "energy", "label"]


def write_manifest(records: list[StudyRecord], path: str | os.PathLike) -> None:
    """Write records as the manifest CSV (UTF-8, header row)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            k = rec.key
            writer.writerow(
                [rec.path, k.patient_id, k.side.value, k.view.value, k.energy.value, rec.label.value]
            )


def read_manifest(path: str | os.PathLike) -> list[StudyRecord]:
    """Read a manifest CSV back into StudyRecords."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"manifest {os.fspath(path)!r} missing columns: {sorted(missing)}")
        for row in reader:
            try:
                key = StudyKey(
                    int(row["patient_id"]), Side(row["side"].upper()),
                    Energy(row["energy"].upper()), View(row["view"].upper()),
                )
                label = Label(row["label"].lower())
            except ValueError as exc:
                raise ManifestError(f"bad manifest row {row!r}: {exc}") from None
            records.append(StudyRecord(key, row["path"], label))
    return records
