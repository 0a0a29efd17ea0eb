"""Spectral pattern decomposition and fluctuation-pattern-assisted transformers for time series."""
from .data import SeriesFrame, SplitSpec, load_csv, make_windows, synth_classification, synth_generate
from .embedding import PatchConfig
from .model import ModelConfig, PetsModel
from .sdaq import SdaqConfig, sdaq_decompose
from .train import RunConfig, Trainer, evaluate

__version__ = "0.1.0"
