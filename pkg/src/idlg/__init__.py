"""Label extraction and data reconstruction from shared gradients (iDLG and DLG)."""

from .attack import AttackConfig, AttackReport, run_dlg, run_idlg
from .data import Dataset, load_dataset
from .leakage import LabelPrediction, extract_label, extract_label_sign_rule, softmax_grad
from .model import Architecture, Model, backward, forward, grad_match, init_model

__all__ = [
    "Architecture", "AttackConfig", "AttackReport", "Dataset", "LabelPrediction", "Model",
    "backward", "extract_label", "extract_label_sign_rule", "forward", "grad_match",
    "init_model", "load_dataset", "run_dlg", "run_idlg", "softmax_grad",
]
