"""Few-bit feature compression for a toy VideoQA task, with privacy and analysis tools."""

__version__ = "0.1.0"

from .estimators import FaceNetClassifier, FewBitVideoQA, StoredBitsQA, load_model, save_model  # noqa: E402
from .featcomp import SWEEP_LEVELS, FeatComp, FeatCompConfig  # noqa: E402

__all__ = ["FaceNetClassifier", "FeatComp", "FeatCompConfig", "FewBitVideoQA", "SWEEP_LEVELS",
           "StoredBitsQA", "__version__", "load_model", "save_model"]
