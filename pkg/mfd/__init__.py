"""Vaccine-efficacy estimation for Mendelian factorial trial designs."""
from .estimators import EfficacyEstimate, Flag, Method, estimate_count
from .survival_mfd import estimate_survival
from .trial_data import TrialDataset, load_csv, write_csv

__all__ = [
    "EfficacyEstimate",
    "Flag",
    "Method",
    "TrialDataset",
    "estimate_count",
    "estimate_survival",
    "load_csv",
    "write_csv",
]
