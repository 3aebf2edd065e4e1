"""LEXNet: a lightweight prototype CNN that explains its own encrypted-traffic predictions."""
from .backbone import BackboneConfig, lexnet_config, resnet_twin_config
from .flowdata import FlowRecord, parse_flows, encode_flow, synth_generate, stratified_split
from .model import LexNetModel, build_model
from .trainer import TrainConfig, TrainReport, train, evaluate
from .io import save_model, load_model

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "lexnet_config", "resnet_twin_config",
    "FlowRecord", "parse_flows", "encode_flow", "synth_generate", "stratified_split",
    "LexNetModel", "build_model",
    "TrainConfig", "TrainReport", "train", "evaluate",
    "save_model", "load_model",
]
