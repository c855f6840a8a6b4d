"""Robustness metrics over generated splits.

Corruption error (CE) is the mean of per-severity corrupt errors; the plain
severity sum is also reported (field ``raw_sum``) since some write-ups sum
the five levels instead of averaging, which can exceed 1. Degradation is
reported as corrupt error minus clean error, so a damaged model scores
higher; accuracy is 1 - CE by construction. A model's clean error does not
depend on severity, so it is the same number replicated per severity level.

ASR counts only attempted episodes: samples skipped for being misclassified
up front are excluded from the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import Classifier
from .errors import InvalidArgumentError
from .manifest import Split, intersect_indices
from .storage import read_image_tensor


@dataclass
class ErrorTable:
    clean_error: float
    corrupt: dict[int, float]  # severity -> top-1 error on the intersection
    sample_count: int

    def severities(self) -> list[int]:
        return sorted(self.corrupt)


@dataclass
class RobustnessSummary:
    ce_corrupt: float
    ce_raw_sum: float
    accuracy_corrupt: float
    degradation: float
    mce: float | None
    severities: list[int]


def _top1(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


def error_rates(
    split: Split,
    classifier: Classifier,
    indices: list[int] | None = None,
) -> ErrorTable:
    """Per-severity top-1 error of ``classifier`` on a split, plus its error
    on the matching clean images. ``indices`` restricts to an intersection
    shared with other splits; default is every non-skipped record."""
    by_index = {r["index"]: r for r in split.usable_records()}
    if indices is None:
        indices = sorted(by_index)
    else:
        indices = sorted(indices)
        missing = [i for i in indices if i not in by_index]
        if missing:
            raise InvalidArgumentError(f"indices not in split: {missing[:5]}")
    if not indices:
        raise InvalidArgumentError("empty sample-index intersection")

    records = [by_index[i] for i in indices]
    labels = np.array([r["label"] for r in records])

    clean_imgs = [read_image_tensor(split.resolve_path(r["clean_path"])) for r in records]
    clean_preds = np.array([_top1(p) for p in classifier.predict(clean_imgs)])
    clean_error = float(np.mean(clean_preds != labels))

    severities = sorted(int(s) for s in records[0].get("severities", {}))
    corrupt = {}
    for s in severities:
        images = [
            read_image_tensor(split.resolve_path(r["severities"][str(s)]["path"]))
            for r in records
        ]
        preds = np.array([_top1(p) for p in classifier.predict(images)])
        corrupt[s] = float(np.mean(preds != labels))
    return ErrorTable(clean_error=clean_error, corrupt=corrupt, sample_count=len(indices))


def aggregate(
    table: ErrorTable,
    by_corruption: dict[str, ErrorTable] | None = None,
) -> RobustnessSummary:
    """Collapse an error table to CE / accuracy / degradation, plus the mean
    CE across corruption types when several tables are supplied."""
    severities = table.severities()
    if not severities:
        raise InvalidArgumentError("error table has no severities")
    errors = [table.corrupt[s] for s in severities]
    ce = float(np.mean(errors))
    raw_sum = float(np.sum(errors))
    degradation = float(np.mean([table.corrupt[s] - table.clean_error for s in severities]))

    mce = None
    if by_corruption:
        ces = []
        for name, other in sorted(by_corruption.items()):
            if other.severities() != severities:
                raise InvalidArgumentError(
                    f"severity mismatch for corruption {name!r}: "
                    f"{other.severities()} vs {severities}"
                )
            ces.append(float(np.mean([other.corrupt[s] for s in other.severities()])))
        mce = float(np.mean(ces))
    return RobustnessSummary(
        ce_corrupt=ce,
        ce_raw_sum=raw_sum,
        accuracy_corrupt=1.0 - ce,
        degradation=degradation,
        mce=mce,
        severities=severities,
    )


def transfer_matrix(
    splits_by_victim: dict[str, Split],
    classifiers_by_model: dict[str, Classifier],
    severity: int = 1,
) -> tuple[list[str], list[str], np.ndarray]:
    """accuracy[i][j] of model j on the severity-1 split generated against
    victim i, over the samples every split successfully attacked.

    Restricting to the shared success intersection is what makes the
    diagonal exactly 0: each victim misclassifies its own successful
    samples by construction.
    """
    victims = sorted(splits_by_victim)
    models = sorted(classifiers_by_model)
    if not victims or not models:
        raise InvalidArgumentError("need at least one split and one model")
    success_sets = [
        {r["index"] for r in splits_by_victim[v].success_records()} for v in victims
    ]
    shared = intersect_indices(*success_sets)
    if not shared:
        raise InvalidArgumentError("no common successfully-attacked indices across splits")

    matrix = np.zeros((len(victims), len(models)))
    for i, victim in enumerate(victims):
        split = splits_by_victim[victim]
        by_index = split.by_index()
        records = [by_index[idx] for idx in shared]
        labels = np.array([r["label"] for r in records])
        images = []
        for record in records:
            block = record["severities"].get(str(severity))
            if block is None:
                raise InvalidArgumentError(
                    f"split for {victim!r} lacks severity {severity}"
                )
            images.append(read_image_tensor(split.resolve_path(block["path"])))
        for j, model in enumerate(models):
            preds = np.array([_top1(p) for p in classifiers_by_model[model].predict(images)])
            matrix[i, j] = float(np.mean(preds == labels))
    return victims, models, matrix


@dataclass
class L2Verdict:
    severity: int
    ours: float
    reference: float
    rel_diff: float  # |ours - ref| / ref, the 25% acceptance quantity
    ref_over_ours: float  # how many times larger the reference is
    verdict: str  # pass | fail-as-lower | fail-as-higher


def l2_match_check(
    ours_by_severity: dict[int, float],
    reference_by_severity: dict[int, float],
    tolerance: float = 0.25,
) -> list[L2Verdict]:
    """Compare our per-severity mean L2 against published reference means."""
    if not ours_by_severity or not reference_by_severity:
        raise InvalidArgumentError("both L2 tables must be non-empty")
    verdicts = []
    for s in sorted(reference_by_severity):
        if s not in ours_by_severity:
            raise InvalidArgumentError(f"severity {s} missing from our manifest")
        ref = float(reference_by_severity[s])
        ours = float(ours_by_severity[s])
        if ref <= 0:
            raise InvalidArgumentError(f"reference L2 must be positive, got {ref}")
        rel = abs(ours - ref) / ref
        if rel <= tolerance:
            verdict = "pass"
        elif ours < ref:
            verdict = "fail-as-lower"
        else:
            verdict = "fail-as-higher"
        verdicts.append(
            L2Verdict(
                severity=s,
                ours=ours,
                reference=ref,
                rel_diff=rel,
                ref_over_ours=ref / ours if ours > 0 else float("inf"),
                verdict=verdict,
            )
        )
    return verdicts


@dataclass
class AttackStats:
    attempted: int
    succeeded: int
    asr: float
    avg_l2: float
    max_l2: float
    avg_evaluations: float
    avg_batches: float


def attack_stats(split: Split, severity: int = 1) -> AttackStats:
    """Success rate and query/L2 statistics from the manifest alone."""
    attempted = split.usable_records()
    if not attempted:
        raise InvalidArgumentError("no attempted episodes in split")
    succeeded = [r for r in attempted if r["success"]]
    l2s = [float(r["severities"][str(severity)]["l2"]) for r in succeeded]
    return AttackStats(
        attempted=len(attempted),
        succeeded=len(succeeded),
        asr=len(succeeded) / len(attempted),
        avg_l2=float(np.mean(l2s)) if l2s else 0.0,
        max_l2=float(np.max(l2s)) if l2s else 0.0,
        avg_evaluations=float(np.mean([r["evaluations"] for r in attempted])),
        avg_batches=float(np.mean([r["batches"] for r in attempted])),
    )
