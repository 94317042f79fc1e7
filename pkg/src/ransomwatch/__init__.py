"""Detect ransomware C&C traffic from the sizes of consecutive HTTP POSTs."""

from .capture import PacketRecord, PostEvent, read_pcap, read_post_events, write_pcap
from .detector import FamilyModel, Verdict, classify, distance_sq, load_model, save_model
from .reassembly import FlowKey, HttpReassembler
from .switch import Controller, FlowRule, Simulation, Switch
from .synth import SynthSpec, generate, render_pcap
from .traces import TraceSet, load_manifest
from .tracker import FeatureTracker, Triple, triples_of
from .trainer import LearningSample, extract_learning_sample, fit, train
from .tuner import RocPoint, SweepCounts, default_threshold_grid, merge_curves, select_threshold, sweep, tune

__version__ = "0.1.0"

__all__ = [
    "Controller", "FlowRule", "Simulation", "Switch", "SynthSpec", "TraceSet",
    "generate", "load_manifest", "render_pcap",
    "FamilyModel", "FeatureTracker", "FlowKey", "HttpReassembler", "LearningSample",
    "PacketRecord", "PostEvent", "RocPoint", "SweepCounts", "Triple", "Verdict",
    "classify", "default_threshold_grid", "distance_sq", "extract_learning_sample", "fit",
    "load_model", "merge_curves", "read_pcap", "read_post_events", "save_model",
    "select_threshold", "sweep", "train", "triples_of", "tune", "write_pcap",
]
