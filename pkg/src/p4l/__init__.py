"""Peer-to-peer private learning: chain-shaped synergies aggregating model
weights under additively homomorphic encryption, with a deterministic network
simulator, learning baselines and Byzantine attacks."""

from .envelope import FinalAggregateMessage, SynergyEnvelope
from .experiment import ExperimentConfig, bench_he, run_experiment
from .he import FixedPointCodec, KeyPair, PackedCiphertext, keygen
from .learning import ModelParams, PeerDataset, TrainConfig
from .peer import Peer, ProtocolConfig
from .sim import MetricsTable, SimConfig, run_simulation
from .trace import verify_protocol_trace

__version__ = "0.1.0"
