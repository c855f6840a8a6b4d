"""Split manifests: loading, index bookkeeping, and intersections.

A manifest is one header line followed by one JSON record per sample,
sorted by dataset index. Paths inside records are relative to the manifest's
directory; ``resolve_path`` maps them back to real files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgumentError


@dataclass
class Split:
    path: Path
    header: dict
    records: list[dict]

    @property
    def base_dir(self) -> Path:
        return self.path.parent

    def resolve_path(self, relative: str) -> Path:
        return self.base_dir / relative

    def indices(self) -> set[int]:
        return {r["index"] for r in self.records}

    def usable_records(self) -> list[dict]:
        """Records with on-disk tensors (everything that was not skipped)."""
        return [r for r in self.records if not r.get("skipped")]

    def success_records(self) -> list[dict]:
        return [r for r in self.records if r.get("success")]

    def by_index(self) -> dict[int, dict]:
        return {r["index"]: r for r in self.records}


def load_split(path) -> Split:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise InvalidArgumentError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    records = [json.loads(line) for line in lines[1:] if line.strip()]
    seen = set()
    for record in records:
        idx = record.get("index")
        if idx in seen:
            raise InvalidArgumentError(f"{path}: duplicate index {idx}")
        seen.add(idx)
    return Split(path=path, header=header, records=records)


def intersect_indices(*index_sets: set[int]) -> list[int]:
    """Sorted common indices across any number of splits."""
    if not index_sets:
        return []
    common = set(index_sets[0])
    for other in index_sets[1:]:
        common &= set(other)
    return sorted(common)


def mean_l2_by_severity(split: Split, only_success: bool = True) -> dict[int, float]:
    """Mean manifest L2 per severity; successful samples by default, since a
    failed episode's distortion level is an artifact of where it stopped."""
    records = split.success_records() if only_success else split.usable_records()
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for record in records:
        for s_text, block in record.get("severities", {}).items():
            s = int(s_text)
            sums[s] = sums.get(s, 0.0) + float(block["l2"])
            counts[s] = counts.get(s, 0) + 1
    return {s: sums[s] / counts[s] for s in sorted(sums)}
