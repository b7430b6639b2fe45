"""Non-intrusive quality and intelligibility assessment for hearing-aid listeners.

Modules, bottom up: ``audiograms`` (catalog, categories, splits), ``dsp``
(mixing, reverberation, vocoding, enhancement, NAL-R), ``corpus`` (manifests
and rendering), ``features`` (embedding providers), ``model`` (network and
loss), ``targets`` (score tables), ``metrics`` (MSE/LCC/SRCC reports),
``training`` (pairing, fitting, fine-tuning, k-fold, transfer) and ``cli``.
"""
from .errors import CapabilityError, HasaNetError, TrainingError, UndefinedCorrelation, ValidationError

__version__ = "0.1.0"

__all__ = ["CapabilityError", "HasaNetError", "TrainingError", "UndefinedCorrelation", "ValidationError",
           "__version__"]
