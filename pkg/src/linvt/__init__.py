"""Linear video tokenizer: score, select, pool and aggregate frame tokens so that
every output token stays a convex combination of the input tokens."""

from .errors import LinVTError
from .model import VARIANTS, Config, LinVT, LinVTWeights, build, count_parameters, load, save
from .svr import FrameTokenStream
from .tensor import Tape, Tensor
from .text import embed_text
from .tta import AggregationOutput

__all__ = [
    "AggregationOutput", "Config", "FrameTokenStream", "LinVT", "LinVTError", "LinVTWeights", "Tape",
    "Tensor", "VARIANTS", "build", "count_parameters", "embed_text", "load", "save",
]
__version__ = "0.1.0"
