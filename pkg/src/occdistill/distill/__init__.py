"""Distillation objectives, triplet mining and training loops."""

from .losses import (
    EPS,
    KDConfig,
    TripletConfig,
    TripletTerms,
    combined_kd_triplet_loss,
    cross_entropy,
    euclidean_distance,
    hard_cross_entropy,
    kd_loss,
    one_hot,
    triplet_loss,
)
from .mining import MinedTriplets, Triplet, candidate_sets, mine_epoch, mine_from_embeddings, mine_triplets
from .training import (
    MetricsLog,
    TrainConfig,
    TrainResult,
    accuracy,
    train_cross_entropy,
    train_student_baseline,
    train_student_kd,
    train_student_triplet,
    train_teacher,
)
