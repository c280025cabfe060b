"""Calving-front delineation on multi-temporal SAR with few-shot domain adaptation.

Modules:

* ``synthgen``   synthetic glacier scenes and source/target dataset pairs
* ``datamodel``  frames, zone labels, manifests and labelling rules
* ``composer``   model-input time series (consecutive / summer references)
* ``rockmask``   rock masks from coastline and glacier polygons
* ``net``        multi-temporal encoder-decoder
* ``adapt``      baseline and few-shot joint training, ensembles
* ``ensemble``   ensemble fusion and class-wise uncertainty
* ``frontops``   front extraction, MDE, IoU, evaluation tables
* ``cli``        command-line entry points
"""
from .errors import CalfrontError, DataError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["CalfrontError", "DataError", "NumericalError", "ValidationError", "__version__"]
