"""Episode orchestration, severity escalation, and benchmark-split writing.

An episode loops scan -> state -> action -> apply -> evaluate -> reward until
its termination condition. Every victim evaluation goes through a
signature-keyed cache shared between the scan and the composite-image
evaluation; together with a budget mask on the action space (actions whose
composite image would need a fresh query are only allowed when the scan's
cache hits left slack), per-step queries never exceed the scan's own ceiling
of num_patches * num_filters + distorted-pair count.

Severity levels above 1 scale the level-1 perturbation delta and re-clip;
written tensors are float32 and all manifest L2 values are recomputed from
the float32 data, so reloading a split reproduces the numbers exactly.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import (
    DQNLearner,
    DuelingQNet,
    LearnerConfig,
    Transition,
    build_action_space,
    compute_reward,
    select_action,
)
from .classifier import Classifier
from .config import RunConfig, config_hash
from .errors import InvalidArgumentError, TransportError
from .filters import DistortionLedger
from .sensitivity import (
    EvalCache,
    SensitivityLists,
    build_state,
    scan,
    signature_after_action,
    state_length,
)
from .storage import write_image_tensor, write_png_preview
from .tensor import ImageTensor, as_array, clip_unit, l2_distance, partition_patches

SUCCESS_REASONS = ("misclassified", "target-hit", "threshold-hit")


@dataclass
class EpisodeResult:
    index: int
    label: int
    success: bool
    termination: str
    steps: int
    l2: float
    evaluations: int
    batches: int
    clean_pred: int
    clean: ImageTensor | None = None
    image: ImageTensor | None = None
    final_probs: np.ndarray | None = None
    skipped: bool = False
    audit: list[tuple[int, int]] | None = None  # per-step (queries used, ceiling)


def episode_seed_for(seed: int, index: int, purpose: str = "generate") -> int:
    """Stable per-sample seed; training and generation draw from disjoint
    streams so interleaving one never perturbs the other."""
    tag = {"generate": 1, "train": 2}[purpose]
    return int(np.random.SeedSequence([seed, tag, index]).generate_state(1)[0])


def _filtered(lists: SensitivityLists, filter_name: str | None) -> SensitivityLists:
    if filter_name is None:
        return lists
    return SensitivityLists(
        plus=tuple(e for e in lists.plus if e.filter == filter_name),
        minus=tuple(e for e in lists.minus if e.filter == filter_name),
    )


def run_episode(
    image: ImageTensor,
    label: int,
    cfg: RunConfig,
    classifier: Classifier,
    policy: DuelingQNet,
    episode_seed: int,
    index: int = 0,
    learner: DQNLearner | None = None,
    audit: bool = False,
) -> EpisodeResult:
    """Attack one image. With ``learner`` set, the episode is a training
    rollout (epsilon-greedy, transitions stored, TD updates inline);
    otherwise the policy net is followed greedily."""
    grid = partition_patches(image.shape, cfg.patch_size)
    params = cfg.filter_params()
    actions = build_action_space(cfg.filters)
    cache = EvalCache(cfg.eval_cache_size)
    rng = np.random.default_rng(np.random.SeedSequence([episode_seed, 3]))
    counter = classifier.counter
    evals0, batches0 = counter.snapshot()

    def taken() -> tuple[int, int]:
        evals, batches = counter.snapshot()
        return evals - evals0, batches - batches0

    clean_probs = classifier.predict_one(image)
    clean_pred = int(np.argmax(clean_probs))
    tracked = label if cfg.mode == "untargeted" else cfg.target_class
    if tracked >= len(clean_probs):
        raise InvalidArgumentError(f"tracked class {tracked} out of range")

    def check_termination(probs: np.ndarray) -> str | None:
        if cfg.prob_threshold > 0.0:
            p = float(probs[tracked])
            if cfg.mode == "untargeted" and p <= cfg.prob_threshold:
                return "threshold-hit"
            if cfg.mode == "targeted" and p >= cfg.prob_threshold:
                return "threshold-hit"
            return None
        top = int(np.argmax(probs))
        if cfg.mode == "untargeted":
            return "misclassified" if top != label else None
        return "target-hit" if top == cfg.target_class else None

    if cfg.skip_misclassified and clean_pred != label:
        evals, batches = taken()
        return EpisodeResult(
            index, label, False, "skipped", 0, 0.0, evals, batches, clean_pred,
            clean=image, skipped=True, final_probs=clean_probs,
        )

    ledger = DistortionLedger(image, grid, params, episode_seed)
    cache.put(ledger.signature(), clean_probs)
    base_probs = clean_probs
    l2 = 0.0
    rendered = image.data
    termination = check_termination(clean_probs)
    steps = 0
    audit_log: list[tuple[int, int]] = [] if audit else None
    pending: tuple[np.ndarray, int, float] | None = None

    try:
        while termination is None and steps < cfg.max_iter:
            evals_before, _ = counter.snapshot()
            n_removable = len(ledger.distorted_pairs())
            ceiling = grid.num_patches * len(cfg.filters) + n_removable
            lists = scan(ledger, cfg.filters, tracked, cfg.mode, classifier, base_probs, cache)
            fresh_scan = counter.snapshot()[0] - evals_before
            slack = ceiling - fresh_scan

            state = build_state(
                lists, base_probs, l2, steps, cfg.max_iter, tracked, cfg.state_top_k
            )
            if pending is not None and learner is not None:
                prev_state, prev_action, prev_reward = pending
                learner.observe(Transition(prev_state, prev_action, prev_reward, state, False))
                pending = None

            resolved = []
            valid = np.zeros(len(actions), dtype=bool)
            for i, spec in enumerate(actions):
                flists = _filtered(lists, spec.filter)
                if spec.n_rem > 0 and not flists.minus:
                    resolved.append(None)
                    continue
                sig, adds, removes = signature_after_action(
                    ledger, flists, spec.n_add, spec.n_rem
                )
                resolved.append((sig, adds, removes))
                valid[i] = sig in cache or slack >= 1

            if learner is not None:
                action_idx = learner.act(state, valid)
            else:
                action_idx = select_action(policy, state, 0.0, valid, rng)
            sig, adds, removes = resolved[action_idx]

            for entry in adds:
                ledger = ledger.add(entry.patch_id, entry.filter)
            for entry in removes:
                ledger = ledger.remove(entry.patch_id, entry.filter)

            rendered = ledger.render_array()
            next_probs = cache.get(sig)
            if next_probs is None:
                next_probs = classifier.predict([rendered])[0]
                cache.put(sig, next_probs)
            l2_next = l2_distance(image, rendered)

            terms = compute_reward(
                cfg.mode, float(base_probs[tracked]), float(next_probs[tracked]), l2, l2_next
            )
            steps += 1
            if audit:
                audit_log.append((counter.snapshot()[0] - evals_before, ceiling))

            termination = check_termination(next_probs)
            if termination is None and cfg.l2_budget > 0.0 and l2_next > cfg.l2_budget:
                termination = "budget"
            done = termination is not None or steps >= cfg.max_iter
            if learner is not None:
                if done:
                    learner.observe(
                        Transition(state, action_idx, terms.reward, np.zeros_like(state), True)
                    )
                else:
                    pending = (state, action_idx, terms.reward)

            base_probs = next_probs
            l2 = l2_next
    except TransportError:
        evals, batches = taken()
        return EpisodeResult(
            index, label, False, "transport-error", steps, l2, evals, batches, clean_pred,
            clean=image, image=ImageTensor(rendered), final_probs=base_probs,
            audit=audit_log,
        )

    if termination is None:
        termination = "max_iter"
    evals, batches = taken()
    return EpisodeResult(
        index=index,
        label=label,
        success=termination in SUCCESS_REASONS,
        termination=termination,
        steps=steps,
        l2=l2,
        evaluations=evals,
        batches=batches,
        clean_pred=clean_pred,
        clean=image,
        image=ImageTensor(rendered),
        final_probs=base_probs,
        audit=audit_log,
    )


def escalate_severity(original, level1_adversarial, s) -> ImageTensor:
    """Level-s image: original + s * (level-1 delta), clipped. s == 1 must
    reproduce the level-1 image bit for bit, so it bypasses the arithmetic."""
    a = as_array(original)
    b = as_array(level1_adversarial)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    if s < 1:
        raise InvalidArgumentError("severity must be >= 1")
    if s == 1:
        return ImageTensor(b)
    return clip_unit(a + float(s) * (b - a))


def _quantized(arr: np.ndarray) -> np.ndarray:
    """Round through the float32 interchange precision."""
    return arr.astype(np.float32).astype(np.float64)


def train_agent(
    images,
    labels,
    cfg: RunConfig,
    classifier: Classifier,
) -> DQNLearner:
    """Train a fresh policy on the given samples (per-victim training).

    Episodes cycle through the samples; the learner's epsilon schedule and
    replay buffer persist across episodes.
    """
    if classifier.num_classes is None:
        classifier.predict_one(images[0])  # probe remote victims for K
    state_dim = state_length(classifier.num_classes, cfg.state_top_k)
    actions = build_action_space(cfg.filters)
    lcfg = LearnerConfig(
        gamma=cfg.gamma,
        lr=cfg.lr,
        replay_capacity=cfg.replay_capacity,
        batch_size=cfg.batch_size,
        eps_start=cfg.eps_start,
        eps_end=cfg.eps_end,
        eps_decay_steps=cfg.eps_decay_steps,
        target_sync=cfg.target_sync,
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    learner = DQNLearner(state_dim, len(actions), config=lcfg, rng=rng)
    for ep in range(cfg.train_episodes):
        i = ep % len(images)
        run_episode(
            images[i],
            labels[i],
            cfg,
            classifier,
            learner.net,
            episode_seed_for(cfg.seed, ep, "train"),
            index=i,
            learner=learner,
        )
    return learner


def generate_episodes(
    images,
    labels,
    cfg: RunConfig,
    classifier: Classifier,
    policy: DuelingQNet,
    indices=None,
    workers: int = 1,
    audit: bool = False,
) -> list[EpisodeResult]:
    """Greedy-policy episodes over a sample set, optionally thread-parallel.

    Each worker uses its own classifier handle (same backend) so per-episode
    query counts stay exact; results come back ordered by sample index."""
    if indices is None:
        indices = list(range(len(images)))

    def attack(pos: int, handle: Classifier) -> EpisodeResult:
        idx = indices[pos]
        return run_episode(
            images[pos],
            labels[pos],
            cfg,
            handle,
            policy,
            episode_seed_for(cfg.seed, idx, "generate"),
            index=idx,
            audit=audit,
        )

    if workers <= 1:
        results = [attack(pos, classifier) for pos in range(len(images))]
    else:
        handles = [classifier] + [classifier.fork() for _ in range(workers - 1)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(attack, pos, handles[pos % workers])
                for pos in range(len(images))
            ]
            results = [f.result() for f in futures]
        for extra in handles[1:]:
            if extra is not classifier:
                classifier.counter.merge(extra.counter)
    return sorted(results, key=lambda r: r.index)


def write_split(
    results: list[EpisodeResult],
    cfg: RunConfig,
    out_dir,
    victim_id: str,
    filter_label: str,
    classifier: Classifier,
) -> Path:
    """Write per-severity tensors, previews, and the line-record manifest.

    Directory layout: <out>/<victim>/<filter>/sev<k>/<index>.dbimg (+ .png)
    with clean images under clean/. A marker file _INCOMPLETE exists while
    writing is in progress and is removed on success, so an aborted run is
    recognizable from the filesystem alone.
    """
    split_dir = Path(out_dir) / victim_id / filter_label
    split_dir.mkdir(parents=True, exist_ok=True)
    marker = split_dir / "_INCOMPLETE"
    marker.write_text("split writing in progress\n")

    severities = cfg.effective_severities()
    try:
        records = []
        for res in sorted(results, key=lambda r: r.index):
            record = {
                "index": res.index,
                "label": res.label,
                "skipped": res.skipped,
                "success": res.success,
                "termination": res.termination,
                "steps": res.steps,
                "evaluations": res.evaluations,
                "batches": res.batches,
                "clean_pred": res.clean_pred,
            }
            if not res.skipped:
                clean_dir = split_dir / "clean"
                clean_dir.mkdir(exist_ok=True)
                clean_path = clean_dir / f"{res.index}.dbimg"
                write_image_tensor(clean_path, res.clean)
                write_png_preview(clean_dir / f"{res.index}.png", res.clean)
                record["clean_path"] = str(clean_path.relative_to(split_dir))
                clean_q = _quantized(res.clean.data)

                sev_block = {}
                arrays = []
                for s in severities:
                    level_s = escalate_severity(res.clean, res.image, s)
                    arr_q = _quantized(level_s.data)
                    sev_dir = split_dir / f"sev{s}"
                    sev_dir.mkdir(exist_ok=True)
                    path = sev_dir / f"{res.index}.dbimg"
                    write_image_tensor(path, level_s)
                    write_png_preview(sev_dir / f"{res.index}.png", level_s)
                    arrays.append(arr_q)
                    sev_block[str(s)] = {
                        "path": str(path.relative_to(split_dir)),
                        "l2": float(np.linalg.norm((arr_q - clean_q).ravel())),
                    }
                preds = classifier.predict(arrays)
                for s, row in zip(severities, preds):
                    sev_block[str(s)]["pred"] = int(np.argmax(row))
                record["severities"] = sev_block
            records.append(record)

        header = {
            "victim": victim_id,
            "filter": filter_label,
            "config_hash": config_hash(cfg),
            "severities": list(severities),
            "num_records": len(records),
        }
        manifest_path = split_dir / "manifest.jsonl"
        with open(manifest_path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    except Exception:
        marker.write_text("split writing failed; output is partial\n")
        raise
    marker.unlink()
    return manifest_path
