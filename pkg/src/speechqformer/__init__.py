"""Query-token speech adapter trained against a frozen language model, in numpy.

Submodules, roughly in pipeline order: ``tensor`` and ``gradcheck`` (autodiff),
``frontend`` (frozen encoder, SPQF files), ``data`` (synthetic corpus),
``qformer`` and ``objectives`` (adapter and pre-training losses), ``llm``
(frozen decoder, splicing, generation), ``trainer`` (loops, SPQC checkpoints),
``textproc``, ``prompts`` and ``evaluation`` (scoring), ``cli``.
"""

from .errors import ConfigError, ContractError, CorruptCheckpointError, FormatError, TrainingError
from .qformer import AdapterParams, QFormerConfig
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "ConfigError",
    "ContractError",
    "CorruptCheckpointError",
    "FormatError",
    "QFormerConfig",
    "Tensor",
    "TrainingError",
    "__version__",
]
