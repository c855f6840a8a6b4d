"""One-step add/remove sensitivity scans and the agent's state vector.

A scan prices every single-move neighbor of the current ledger: for each
patch and active filter, the image with one more application, and for each
currently distorted (patch, filter) pair, the image with one fewer. That
keeps the per-step query cost linear in the patch count instead of
exponential in lookahead depth.

Scans share a signature-keyed probability cache with the episode loop, so a
neighbor that was already priced (this step or earlier) costs no query at
all. The cache is what lets the composite image of a multi-move action be
evaluated without exceeding the per-step query ceiling.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .filters import DistortionLedger
from .tensor import PatchGrid


@dataclass(frozen=True)
class SensitivityEntry:
    patch_id: int
    filter: str
    direction: str  # "add" or "remove"
    delta_p: float


@dataclass(frozen=True)
class SensitivityLists:
    """Sorted add (plus) and remove (minus) candidates.

    Untargeted runs sort most-negative delta_p first (the moves that pull
    probability away from the ground truth); targeted runs sort
    most-positive first. Ties resolve by ascending patch_id, then by the
    position of the filter in the active-filter order.
    """

    plus: tuple[SensitivityEntry, ...]
    minus: tuple[SensitivityEntry, ...]


class EvalCache:
    """LRU map from ledger signature to probability vector."""

    def __init__(self, capacity: int = 100_000):
        self.capacity = capacity
        self._map: OrderedDict[tuple, np.ndarray] = OrderedDict()

    def get(self, signature) -> np.ndarray | None:
        probs = self._map.get(signature)
        if probs is not None:
            self._map.move_to_end(signature)
        return probs

    def put(self, signature, probs: np.ndarray) -> None:
        self._map[signature] = probs
        self._map.move_to_end(signature)
        while len(self._map) > self.capacity:
            self._map.popitem(last=False)

    def __contains__(self, signature) -> bool:
        return signature in self._map

    def __len__(self) -> int:
        return len(self._map)


def _signature_with(ledger: DistortionLedger, patch_id: int, filter_name: str, delta: int):
    """Signature of the ledger after one add (+1) or remove (-1), no render."""
    counts = {}
    for p, f, k in ledger.signature():
        counts[(p, f)] = k
    key = (patch_id, filter_name)
    counts[key] = counts.get(key, 0) + delta
    return tuple(sorted((p, f, k) for (p, f), k in counts.items() if k > 0))


def scan(
    ledger: DistortionLedger,
    filters: tuple[str, ...],
    tracked_class: int,
    mode: str,
    classifier,
    base_probs: np.ndarray,
    cache: EvalCache | None = None,
) -> SensitivityLists:
    """Price all one-move neighbors of the current ledger.

    ``base_probs`` is the victim's output on the current render (the caller
    already has it, either from the previous step's composite evaluation or
    the initial clean query). delta_p is P_tracked(neighbor) minus
    P_tracked(current). Neighbors found in ``cache`` are not re-queried.
    """
    if mode not in ("untargeted", "targeted"):
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    base_p = float(base_probs[tracked_class])
    filter_rank = {name: i for i, name in enumerate(filters)}

    # (patch_id, filter, direction, signature) in deterministic order: adds by
    # patch then filter, removes over the sorted distorted pairs.
    candidates: list[tuple[int, str, str, tuple]] = []
    for patch_id in range(ledger.grid.num_patches):
        for name in filters:
            candidates.append((patch_id, name, "add", _signature_with(ledger, patch_id, name, +1)))
    for patch_id, name in ledger.distorted_pairs():
        if name in filter_rank:
            candidates.append(
                (patch_id, name, "remove", _signature_with(ledger, patch_id, name, -1))
            )

    probs_by_slot: dict[int, np.ndarray] = {}
    pending: list[int] = []
    for slot, (_, _, _, signature) in enumerate(candidates):
        cached = cache.get(signature) if cache is not None else None
        if cached is not None:
            probs_by_slot[slot] = cached
        else:
            pending.append(slot)

    if pending:
        current = ledger.render_array()
        images = []
        for slot in pending:
            patch_id, name, direction, _ = candidates[slot]
            delta = 1 if direction == "add" else -1
            override = {name: ledger.count(patch_id, name) + delta}
            img = current.copy()
            rows, cols = ledger.grid.window(patch_id)
            img[:, rows, cols] = ledger.render_patch(patch_id, overrides=override)
            images.append(img)
        fresh = classifier.predict(images)
        for slot, row in zip(pending, fresh):
            probs_by_slot[slot] = row
            if cache is not None:
                cache.put(candidates[slot][3], row)

    sign = 1.0 if mode == "untargeted" else -1.0
    entries = {"add": [], "remove": []}
    for slot, (patch_id, name, direction, _) in enumerate(candidates):
        delta_p = float(probs_by_slot[slot][tracked_class]) - base_p
        entries[direction].append(SensitivityEntry(patch_id, name, direction, delta_p))
    key = lambda e: (sign * e.delta_p, e.patch_id, filter_rank[e.filter])
    return SensitivityLists(
        plus=tuple(sorted(entries["add"], key=key)),
        minus=tuple(sorted(entries["remove"], key=key)),
    )


def signature_after_action(
    ledger: DistortionLedger,
    lists: SensitivityLists,
    n_add: int,
    n_rem: int,
    skip_same_step: bool = True,
) -> tuple[tuple, list[SensitivityEntry], list[SensitivityEntry]]:
    """Resolve an (n_add, n_rem) action against the sorted lists.

    Returns the composite ledger signature plus the add and remove entries
    actually taken. Removes that would undo a same-step add are skipped
    (they would make the step a no-op on that pair); n_add/n_rem are capped
    by list lengths.
    """
    adds = list(lists.plus[:n_add])
    taken_adds = {(e.patch_id, e.filter) for e in adds}
    removes: list[SensitivityEntry] = []
    for entry in lists.minus:
        if len(removes) >= n_rem:
            break
        if skip_same_step and (entry.patch_id, entry.filter) in taken_adds:
            continue
        removes.append(entry)

    counts = {}
    for p, f, k in ledger.signature():
        counts[(p, f)] = k
    for entry in adds:
        key = (entry.patch_id, entry.filter)
        counts[key] = counts.get(key, 0) + 1
    for entry in removes:
        key = (entry.patch_id, entry.filter)
        counts[key] = counts.get(key, 0) - 1
    signature = tuple(sorted((p, f, k) for (p, f), k in counts.items() if k > 0))
    return signature, adds, removes


def prob_summary(probs: np.ndarray, tracked_class: int, full_limit: int = 32) -> np.ndarray:
    """Class-probability summary for the state: the full vector for small
    victims, else the top-10 probabilities plus the tracked one."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] <= full_limit:
        return probs.copy()
    top10 = np.sort(probs)[::-1][:10]
    return np.concatenate([top10, [probs[tracked_class]]])


def summary_length(num_classes: int, full_limit: int = 32) -> int:
    return num_classes if num_classes <= full_limit else 11


def state_length(num_classes: int, top_k: int = 32) -> int:
    return 2 * top_k + summary_length(num_classes) + 2


def build_state(
    lists: SensitivityLists,
    probs: np.ndarray,
    l2: float,
    step: int,
    max_iter: int,
    tracked_class: int,
    top_k: int = 32,
) -> np.ndarray:
    """Fixed-length agent state: top-K add deltas, top-K remove deltas
    (zero-padded), probability summary, current L2, and step fraction."""
    state = np.zeros(state_length(len(probs), top_k), dtype=np.float64)
    for i, entry in enumerate(lists.plus[:top_k]):
        state[i] = entry.delta_p
    for i, entry in enumerate(lists.minus[:top_k]):
        state[top_k + i] = entry.delta_p
    summary = prob_summary(probs, tracked_class)
    state[2 * top_k : 2 * top_k + len(summary)] = summary
    state[-2] = l2
    state[-1] = step / max_iter
    if not np.all(np.isfinite(state)):
        raise InvalidArgumentError("non-finite state entries")
    return state


def sensitivity_rows(lists: SensitivityLists, grid: PatchGrid):
    """Flatten both lists to (row, col, filter, direction, delta_p) records
    for the per-patch heat-map CSV."""
    rows = []
    for entry in list(lists.plus) + list(lists.minus):
        r, c = grid.position(entry.patch_id)
        rows.append((r, c, entry.filter, entry.direction, entry.delta_p))
    return rows
