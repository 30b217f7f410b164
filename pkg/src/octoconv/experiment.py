"""Data-efficiency experiment: train each group on nested synthetic sets and
score the test split with the FROC protocol."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, DatasetConfig, PatchDataset, augment_volume, build_datasets
from .froc import CandidateRecord, FrocResult, ReferenceNodule, froc_curve, match_candidates
from .groups import GroupName
from .model import ModelConfig, Network, TrainConfig, TrainReport, build_model, train

log = logging.getLogger(__name__)

__all__ = [
    "PROFILES",
    "Profile",
    "RunResult",
    "candidate_layout",
    "dataset_to_froc",
    "predictions_to_candidates",
    "predict_proba",
    "train_group",
    "run_data_efficiency",
]

# candidates of one synthetic scan are laid out on a line this far apart,
# well beyond any nodule radius
CANDIDATE_PITCH_MM = 30.0


@dataclass(frozen=True)
class Profile:
    name: str
    model: ModelConfig
    data: DatasetConfig


PROFILES = {
    "desk": Profile("desk", ModelConfig(), DatasetConfig()),
    "paper-shape": Profile(
        "paper-shape",
        ModelConfig(base_widths=(16, 16, 32, 32, 64, 64), input_shape=(1, 12, 72, 72)),
        DatasetConfig(patch_shape=(12, 72, 72), train_sizes=(30, 300, 3000, 30000)),
    ),
}


def predict_proba(net: Network, X, batch_size: int = 64) -> np.ndarray:
    """Positive-class probability for each patch (eval mode)."""
    return T.softmax(net.predict_logits(X, batch_size).astype(np.float64))[:, 1]


def candidate_layout(n: int, candidates_per_scan: int = 50, prefix: str = "scan"):
    """Scan id and position of patch ``i`` for ``i < n``.

    Patch ``i`` belongs to scan ``i // candidates_per_scan`` and sits at
    ``x = (i % candidates_per_scan) * 30 mm``.
    """
    cps = int(candidates_per_scan)
    if cps < 1:
        raise ValueError("candidates_per_scan must be >= 1")
    return [(f"{prefix}-{i // cps:04d}", ((i % cps) * CANDIDATE_PITCH_MM, 0.0, 0.0)) for i in range(n)]


def predictions_to_candidates(probabilities, candidates_per_scan: int = 50, prefix: str = "scan"):
    probs = np.clip(np.asarray(probabilities, dtype=np.float64), 0.0, 1.0)
    return [CandidateRecord(sid, pos, float(p))
            for (sid, pos), p in zip(candidate_layout(len(probs), candidates_per_scan, prefix), probs)]


def dataset_to_froc(ds: PatchDataset, probabilities, candidates_per_scan: int = 50, prefix: str = "scan"):
    """Group patches into pseudo-scans and build FROC inputs.

    Each positive patch becomes a reference nodule at its candidate's
    position (see :func:`candidate_layout`), so its own candidate is a hit
    and no other candidate can reach it. Positives below 3 mm are
    irrelevant findings.

    Returns ``(candidates, references, scan_ids)``.
    """
    if len(probabilities) != len(ds):
        raise ValueError(f"{len(probabilities)} probabilities for {len(ds)} patches")
    candidates = predictions_to_candidates(probabilities, candidates_per_scan, prefix)
    scans = list(dict.fromkeys(c.scan_id for c in candidates))
    references = [
        ReferenceNodule(c.scan_id, c.position, float(ds.diameter_mm[i]), bool(ds.relevant[i]), bool(ds.malignant[i]))
        for i, c in enumerate(candidates) if ds.y[i] == 1
    ]
    return candidates, references, scans


@dataclass
class RunResult:
    group: str
    train_size: int
    seed: int
    report: TrainReport
    froc: FrocResult
    seconds: float
    net: Network | None = field(default=None, repr=False)

    @property
    def score(self) -> float:
        return self.froc.overall_score


def train_group(group, train_ds: PatchDataset, val_ds: PatchDataset, model_config: ModelConfig = ModelConfig(),
                train_config: TrainConfig = TrainConfig(), policy: AugmentPolicy | None = AugmentPolicy(),
                callback=None) -> tuple[Network, TrainReport]:
    mc = replace(model_config, group_name=GroupName.parse(group).value,
                 input_shape=(1, *train_ds.X.shape[2:]))
    net = build_model(mc, rng=train_config.seed)
    aug = None if policy is None else (lambda v, rng: augment_volume(v, rng, policy))
    report = train(net, train_ds.X, train_ds.y, val_ds.X, val_ds.y, train_config, augment_fn=aug,
                   callback=callback)
    return net, report


def run_data_efficiency(groups=("Z3", "D4", "D4h", "O", "Oh"), sizes=(30, 300), seed: int = 0,
                        profile: Profile = PROFILES["desk"], train_config: TrainConfig = TrainConfig(),
                        datasets: dict | None = None, policy: AugmentPolicy | None = AugmentPolicy(),
                        keep_models: bool = False) -> list[RunResult]:
    """Train every group at every size on the same nested data and score the test split."""
    if datasets is None:
        datasets = build_datasets(seed, replace(profile.data, train_sizes=tuple(sizes)))
    test = datasets["test"]
    results = []
    for size in sizes:
        for g in groups:
            t0 = time.process_time()
            tc = replace(train_config, seed=seed)
            net, report = train_group(g, datasets["train"][size], datasets["val"], profile.model, tc, policy)
            cands, refs, scans = dataset_to_froc(test, predict_proba(net, test.X),
                                                 profile.data.candidates_per_scan)
            froc = froc_curve(match_candidates(cands, refs, scans))
            dt = time.process_time() - t0
            log.info("size %d group %s: %d epochs, best val %.4f @%d, froc %.4f, %.0fs cpu", size, g,
                     report.epochs, report.best_val_loss, report.best_epoch, froc.overall_score, dt)
            results.append(RunResult(GroupName.parse(g).value, size, seed, report, froc, dt,
                                     net if keep_models else None))
    return results
