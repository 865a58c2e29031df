import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.core.baselines import LastFrameLinearBaseline, MidpointBaseline
from backend.core.dataset import (
    FeatureScaler,
    Fold,
    SessionRecording,
    generate_cohort,
    lopo_split,
    make_windows,
    stack_windows,
)
from backend.core.errors import DataError
from backend.core.kinematics import Skeleton, VertexCloud, compose_error, generate_cloud
from backend.core.training import evaluate, evaluate_predictions, train
from backend.core.transformer import PoseTransformer
from backend.models import AppConfig
from backend.report_model import ComparisonRow, ComposedRow, FoldRow, JointMetrics, Report

logger = logging.getLogger(__name__)

MSE_ONLY_LABEL = "transformer (MSE only)"
BIO_LABEL = "transformer (MSE + biomechanical)"


@dataclass
class FoldOutcome:
    row: FoldRow
    comparisons: Dict[str, float]


def windows_for(
    cohort: Dict[int, SessionRecording], person_ids: Sequence[int], cfg: AppConfig
) -> Tuple[np.ndarray, np.ndarray]:
    windows = []
    for pid in person_ids:
        windows.extend(
            make_windows(cohort[pid], cfg.model.l_out, cfg.train.stride, cfg.train.window_mode)
        )
    if not windows:
        raise DataError(f"No windows for persons {list(person_ids)}")
    return stack_windows(windows)


def run_fold(
    fold: Fold,
    index: int,
    cohort: Dict[int, SessionRecording],
    cfg: AppConfig,
    skeleton: Skeleton,
    cloud: VertexCloud,
    ablation: bool = True,
) -> FoldOutcome:
    """
    Train and score every predictor on one held-out person.
    """
    logger.info(f"Fold {index}: testing on person {fold.test}, training on {list(fold.train)}")
    train_ids, val_id = fold.validation_split(index) if cfg.train.patience else (fold.train, None)

    x_train, y_train = windows_for(cohort, train_ids, cfg)
    x_test, y_test = windows_for(cohort, [fold.test], cfg)
    scaler = FeatureScaler.fit(x_train)
    x_train, x_test = scaler.transform(x_train), scaler.transform(x_test)
    validation = None
    if val_id is not None:
        x_val, y_val = windows_for(cohort, [val_id], cfg)
        validation = (scaler.transform(x_val), y_val)

    if cfg.train.lam > 0:
        variants = [(BIO_LABEL, cfg.train.lam)]
        if ablation:
            variants.append((MSE_ONLY_LABEL, 0.0))
    else:
        variants = [(MSE_ONLY_LABEL, 0.0)]

    comparisons: Dict[str, float] = {}
    row = None
    for label, lam in variants:
        model = PoseTransformer(cfg.model)
        train(model, x_train, y_train, cfg.train.model_copy(update={"lam": lam}), cfg.limits, validation)
        mpjpe, mpve = evaluate(model, x_test, y_test, skeleton, cloud)
        comparisons[label] = mpjpe.avg
        if row is None:
            row = FoldRow(
                label=f"person {fold.test}", person_id=fold.test, mpjpe=mpjpe, mpve=mpve,
                n_windows=int(x_test.shape[0]),
            )

    for baseline in (MidpointBaseline(cfg.limits, cfg.model.l_out), LastFrameLinearBaseline()):
        baseline.fit(x_train, y_train)
        mpjpe, _ = evaluate_predictions(y_test, baseline.predict(x_test), skeleton, cloud)
        comparisons[baseline.name] = mpjpe.avg

    logger.info(
        f"Fold {index} (person {fold.test}): MPJPE {row.mpjpe.avg:.2f} mm, MPVE {row.mpve.avg:.2f} mm"
    )
    return FoldOutcome(row=row, comparisons=comparisons)


def run_lopo(
    cfg: AppConfig = AppConfig(),
    cohort: Optional[Dict[int, SessionRecording]] = None,
    workers: int = 1,
    ablation: bool = True,
) -> Report:
    """
    Leave-one-person-out experiment over a cohort.

    Args:
        cfg (AppConfig): full configuration; its fingerprint goes into the report.
        cohort: sessions keyed by person id; generated from ``cfg.synth`` if None.
        workers (int): folds trained concurrently, each with its own model.
        ablation (bool): also train the MSE-only variant for comparison.
    Returns:
        Report: one row per fold, the average row, the comparison rows and
        the composed-error row.
    """
    cohort = cohort if cohort is not None else generate_cohort(cfg.synth, cfg.limits)
    folds = lopo_split(sorted(cohort))
    skeleton = Skeleton.from_config(cfg.skeleton)
    cloud = generate_cloud(cfg.cloud, skeleton)

    args = [(fold, i, cohort, cfg, skeleton, cloud, ablation) for i, fold in enumerate(folds)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes: List[FoldOutcome] = list(executor.map(lambda a: run_fold(*a), args))
    else:
        outcomes = [run_fold(*a) for a in args]

    rows = [o.row for o in outcomes]
    average = FoldRow(
        label="Average",
        mpjpe=JointMetrics.mean_of([r.mpjpe for r in rows]),
        mpve=JointMetrics.mean_of([r.mpve for r in rows]),
        n_windows=sum(r.n_windows for r in rows),
    )

    labels = list(outcomes[0].comparisons)
    comparisons = [
        ComparisonRow(label=label, per_fold_mpjpe={o.row.person_id: o.comparisons[label] for o in outcomes})
        for label in labels
    ]

    composed = ComposedRow(
        label=cfg.report.reference_label,
        reference_mm=cfg.report.reference_error_mm,
        measured_mm=average.mpjpe.avg,
        composed_mm=compose_error(cfg.report.reference_error_mm, average.mpjpe.avg),
    )
    logger.info(
        f"LOPO over {len(rows)} folds: MPJPE {average.mpjpe.avg:.2f} mm, "
        f"composed {composed.composed_mm:.2f} mm"
    )
    return Report(
        folds=rows,
        average=average,
        comparisons=comparisons,
        composed=composed,
        fingerprint=cfg.fingerprint(),
        seed=cfg.train.seed,
    )
