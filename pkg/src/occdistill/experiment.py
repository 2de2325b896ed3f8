"""End-to-end proxy experiment: teacher, baseline student, both distilled students, fusion.

Used by the acceptance suite and handy for calibrating epoch budgets::

    from occdistill.experiment import ProxyConfig, load_proxy_data, run_seed
    data = load_proxy_data(ProxyConfig())
    result = run_seed(ProxyConfig(), data, seed=0)
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import OccludedDataset, OcclusionMode, apply_occlusion, load_idx_dataset, split
from .distill import (
    KDConfig,
    TrainConfig,
    TripletConfig,
    train_cross_entropy,
    train_student_baseline,
    train_student_kd,
    train_student_triplet,
    train_teacher,
)
from .evaluation import mcnemar_test, predict
from .fusion import concat_embeddings, extract_embeddings, svm_predict, train_linear_svm
from .model import desk_spec

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[2] / "data" / "fashion_proxy"


@dataclass
class ProxyConfig:
    data_dir: Path = DATA_DIR
    occlusion: OcclusionMode = OcclusionMode.UPPER_HALF_OCCLUDED
    validation_fraction: float = 0.1
    teacher: TrainConfig = TrainConfig(epochs=6, lr=0.01)
    student: TrainConfig = TrainConfig(epochs=6, lr=0.01)
    kd_train: TrainConfig = TrainConfig(epochs=3, lr=0.001)
    triplet_train: TrainConfig = TrainConfig(epochs=2, lr=1e-7)
    kd: KDConfig = KDConfig()
    triplet: TripletConfig = TripletConfig()
    svm_C: float = 1.0
    svm_iterations: int = 1000
    continued_baseline: bool = True


@dataclass
class ProxyData:
    train: OccludedDataset
    test: OccludedDataset


@dataclass
class SeedResult:
    seed: int
    accuracy: dict
    predictions: dict
    labels: np.ndarray
    models: dict = field(repr=False, default_factory=dict)
    metrics: dict = field(repr=False, default_factory=dict)
    mcnemar: dict = field(default_factory=dict)
    seconds: float = 0.0


def load_proxy_data(cfg: ProxyConfig) -> ProxyData:
    d = Path(cfg.data_dir)
    train = load_idx_dataset(d / "train-images-idx3-ubyte.gz", d / "train-labels-idx1-ubyte.gz")
    test = load_idx_dataset(d / "t10k-images-idx3-ubyte.gz", d / "t10k-labels-idx1-ubyte.gz")
    return ProxyData(train, test)


def derive_seed(seed: int, role: str) -> int:
    return zlib.crc32(f"{seed}:{role}".encode()) & 0x7FFFFFFF


def run_seed(cfg: ProxyConfig, data: ProxyData, seed: int) -> SeedResult:
    t0 = time.perf_counter()
    spec = desk_spec(data.train.image_shape, data.train.num_classes)
    vis_tr, vis_va = split(data.train, cfg.validation_fraction, seed)
    occ_tr, occ_va = apply_occlusion(vis_tr, cfg.occlusion), apply_occlusion(vis_va, cfg.occlusion)
    test_vis, test_occ = data.test, apply_occlusion(data.test, cfg.occlusion)

    teacher = train_teacher(spec, vis_tr, vis_va, cfg.teacher, derive_seed(seed, "teacher"))
    baseline = train_student_baseline(spec, occ_tr, occ_va, cfg.student, derive_seed(seed, "student"))
    kd = train_student_kd(
        baseline.params, teacher.params, spec, occ_tr, vis_tr, occ_va, cfg.kd, cfg.kd_train, derive_seed(seed, "kd")
    )
    trip = train_student_triplet(
        baseline.params,
        teacher.params,
        spec,
        occ_tr,
        vis_tr,
        occ_va,
        cfg.triplet,
        cfg.triplet_train,
        derive_seed(seed, "triplet"),
    )

    emb_tr = concat_embeddings(
        extract_embeddings(kd.params, spec, occ_tr), extract_embeddings(trip.params, spec, occ_tr)
    )
    emb_te = concat_embeddings(
        extract_embeddings(kd.params, spec, test_occ), extract_embeddings(trip.params, spec, test_occ)
    )
    svm = train_linear_svm(emb_tr, cfg.svm_C, cfg.svm_iterations, seed)

    preds = {
        "teacher_visible": predict(teacher.params, spec, test_vis),
        "teacher_occluded": predict(teacher.params, spec, test_occ),
        "baseline": predict(baseline.params, spec, test_occ),
        "kd": predict(kd.params, spec, test_occ),
        "triplet": predict(trip.params, spec, test_occ),
        "fused": svm_predict(svm, emb_te),
    }
    models = {"spec": spec, "teacher": teacher.params, "baseline": baseline.params, "kd": kd.params,
              "triplet": trip.params, "svm": svm}
    metrics = {"teacher": teacher.metrics, "baseline": baseline.metrics, "kd": kd.metrics, "triplet": trip.metrics}
    if cfg.continued_baseline:
        # control: the baseline trained further with plain cross-entropy for the KD budget
        cont = train_cross_entropy(
            baseline.params.copy(), spec, occ_tr, occ_va, cfg.kd_train, derive_seed(seed, "kd")
        )
        preds["baseline_continued"] = predict(cont.params, spec, test_occ)
        metrics["baseline_continued"] = cont.metrics
    labels = test_occ.labels
    acc = {k: float(np.mean(v == labels)) for k, v in preds.items()}
    tests = {k: mcnemar_test(preds[k], preds["baseline"], labels).to_dict() for k in ("kd", "triplet", "fused")}
    result = SeedResult(seed, acc, preds, labels, models, metrics, tests, time.perf_counter() - t0)
    log.info("seed %d accuracies %s (%.0fs)", seed, acc, result.seconds)
    return result
