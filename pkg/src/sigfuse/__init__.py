"""Fusion of SS7, Diameter and GTP signalling into per-minute records, field-swap
mutation, embedding, per-model Isolation Forest detection and consensus evaluation."""

from .detection import Decision, average_path_length, iforest_fit, iforest_score, threshold_from_contamination
from .evaluation import DecisionMatrix, consensus, contingency_at, precision_at, threshold_set
from .fusion import fuse, fuse_streams, minute_bucket
from .mutation import FAMILIES, FAMILY_IDS, generate_synthetic, swap_group, unique_records
from .records import Fragment, FusedRecord, canonical_text, record_hash
from .serialization import eligible, flatten
from .stats import bh_adjust, chi_square_p, decision_cosine_distance, fisher_exact_two_sided, odds_ratio

__version__ = "0.1.0"
