"""On-disk dataset layout: discovery, pairing validation and per-subject statistics."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IngestError

DEFAULT_PATTERN = r"subjects/(?P<id>\d+)/session(?P<session>\d+)/(?P<impression>\d+)_(?P<kind>flash|nonflash)\.png"
MASK_PATTERN = r"subjects/(?P<id>\d+)/session(?P<session>\d+)/masks/(?P<impression>\d+)_mask\.png"


@dataclass(frozen=True)
class PairRecord:
    identity: int
    session: int
    impression: int
    flash: Path
    nonflash: Path
    mask: Path | None = None

    @property
    def key(self) -> tuple[int, int, int]:
        return self.identity, self.session, self.impression

    @property
    def stem(self) -> str:
        return f"subjects/{self.identity:03d}/session{self.session}/{self.impression:02d}"


@dataclass
class DatasetLayout:
    root: Path
    pairs: list[PairRecord] = field(default_factory=list)

    @property
    def identities(self) -> list[int]:
        return sorted({p.identity for p in self.pairs})

    @property
    def sessions(self) -> list[int]:
        return sorted({p.session for p in self.pairs})

    def stats(self) -> dict:
        per = Counter((p.identity, p.session) for p in self.pairs)
        return {
            "root": str(self.root),
            "n_pairs": len(self.pairs),
            "n_subjects": len(self.identities),
            "sessions": self.sessions,
            "n_masks": sum(p.mask is not None for p in self.pairs),
            "per_subject_session": {f"{i}/{s}": n for (i, s), n in sorted(per.items())},
        }

    def select(self, sessions=None) -> list[PairRecord]:
        if sessions is None:
            return list(self.pairs)
        sessions = set(sessions)
        return [p for p in self.pairs if p.session in sessions]


def ingest(root, pattern: str = DEFAULT_PATTERN, mask_pattern: str = MASK_PATTERN) -> DatasetLayout:
    """Scan ``root`` and pair flash / non-flash captures.

    ``pattern`` is a regex matched against POSIX paths relative to ``root``
    with named groups ``id``, ``session``, ``impression`` (integers) and
    ``kind`` (``flash`` / ``nonflash``); other datasets plug in their own.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} does not exist", [str(root)])
    rx, mrx = re.compile(pattern), re.compile(mask_pattern)
    found: dict[tuple, dict] = {}
    masks: dict[tuple, Path] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(root).as_posix()
        m = mrx.fullmatch(rel)
        if m:
            masks[(int(m["id"]), int(m["session"]), int(m["impression"]))] = path
            continue
        m = rx.fullmatch(rel)
        if not m:
            continue
        key = (int(m["id"]), int(m["session"]), int(m["impression"]))
        kind = m["kind"]
        if kind not in ("flash", "nonflash"):
            raise IngestError(f"unknown capture kind {kind!r} in {rel}", [rel])
        slot = found.setdefault(key, {})
        if kind in slot:
            raise IngestError(f"duplicate {kind} capture for {key}", [str(slot[kind]), str(path)])
        slot[kind] = path
    if not found:
        raise IngestError("no subjects found", [])
    orphans = sorted(str(p) for slot in found.values() if len(slot) == 1 for p in slot.values())
    if orphans:
        raise IngestError(f"{len(orphans)} capture(s) without a partner:", orphans)
    pairs = [PairRecord(k[0], k[1], k[2], v["flash"], v["nonflash"], masks.get(k))
             for k, v in sorted(found.items())]
    return DatasetLayout(root, pairs)
