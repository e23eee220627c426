"""Quantum federated learning simulator with circuit-level attacks, update
crafting, robust aggregation and runtime bound diagnostics."""

from .aggregators import Aggregator, ClientUpdate, fedavg, krum, multi_krum
from .attacks import AttackConfig, PoisonSchedule, build_attack_circuit
from .crafting import CraftingConfig, HistoryBuffer, craft
from .data import DatasetSpec, load_dataset
from .federation import FederationConfig, RoundRecord, run_experiment, shadow_benign_run
from .model import Batch, ModelArchitecture, ModelParams
from .qsim import CircuitTemplate, Gate, Observable, Statevector

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "AttackConfig", "Batch", "CircuitTemplate", "ClientUpdate", "CraftingConfig", "DatasetSpec",
    "FederationConfig", "Gate", "HistoryBuffer", "ModelArchitecture", "ModelParams", "Observable", "PoisonSchedule",
    "RoundRecord", "Statevector", "build_attack_circuit", "craft", "fedavg", "krum", "load_dataset", "multi_krum",
    "run_experiment", "shadow_benign_run",
]
