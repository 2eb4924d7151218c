"""Rephrase, augment, and rerank underspecified visual questions.

The pipeline asks a multimodal LM endpoint for captions, rationales, and
entity details, fuses them into rephrased question candidates, and keeps
the candidate the model answers most confidently. Evaluation (soft VQA
accuracy, oracle upper bound) and linguistic complexity metrics live in
their own modules.
"""

__version__ = "0.1.0"

from .datamodel import ImageRef, QuestionInstance, DevSplitSpec, load_dataset, sample_dev_split
from .keywords import KeywordResult, extract_keywords
from .evaluation import normalize_answer, vqa_soft_accuracy, mc_accuracy

__all__ = [
    "ImageRef",
    "QuestionInstance",
    "DevSplitSpec",
    "load_dataset",
    "sample_dev_split",
    "KeywordResult",
    "extract_keywords",
    "normalize_answer",
    "vqa_soft_accuracy",
    "mc_accuracy",
    "__version__",
]
