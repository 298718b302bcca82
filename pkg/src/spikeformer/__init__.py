"""Spiking transformer for event-camera streams, on a small numpy autodiff engine."""

from .data import EventStream, bin_events, load_aer, save_aer, synth_gesture_dataset
from .model import (Checkpoint, ModelSpec, Spikeformer, build_model, count_parameters, load_checkpoint,
                    parse_variant, save_checkpoint)
from .neurons import NeuronConfig, NeuronMode, neuron_sequence, neuron_step
from .training import RunReport, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "EventStream", "bin_events", "load_aer", "save_aer", "synth_gesture_dataset",
    "Checkpoint", "ModelSpec", "Spikeformer", "build_model", "count_parameters", "load_checkpoint",
    "parse_variant", "save_checkpoint",
    "NeuronConfig", "NeuronMode", "neuron_sequence", "neuron_step",
    "RunReport", "TrainConfig", "evaluate", "fit",
]
