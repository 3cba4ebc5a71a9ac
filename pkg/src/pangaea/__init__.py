"""Pangaea: a unified triplet encoding and training stack for mixed-modality data.

Seven input modalities (tables, time series, text, images, graphs, audio,
point clouds) are converted into a shared triplet representation, tokenized
into a common embedding space, and processed by one bidirectional
transformer. The package covers the full loop at desk scale: encoding,
masked-reconstruction pre-training, task fine-tuning, evaluation metrics,
and the saturation-curve analysis relating performance to the number of
modalities trained together.
"""

__version__ = "0.1.0"

from .errors import PangaeaError

__all__ = ["PangaeaError", "__version__"]
