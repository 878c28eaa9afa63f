"""Detection and correction of pooling-matrix mismatch errors."""
from .corrector import CapeConfig, cape, correct_rows
from .detector import DetectorSettings, detect_mmes, odrlt_test
from .simkit import center, forward, gen_pooling, gen_signal, inject_mmes
from .solver import lasso, robust_lasso, theory_lambdas

__version__ = "0.1.0"
