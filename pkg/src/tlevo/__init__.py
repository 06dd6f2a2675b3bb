"""Genetic search for DenseNet-121 transfer-learning configurations."""

from .chromosome import (
    DEFAULT_DOMAINS,
    DENSENET121_BLOCKS,
    ArchitecturePlan,
    Chromosome,
    GeneDomains,
    canonical_key,
    enumerate_chromosomes,
    map_to_architecture,
    sample_chromosome,
)
from .fitness import (
    Concurrency,
    EvaluatorError,
    FitnessEvaluator,
    LookupEvaluator,
    SyntheticLandscape,
    TrainerBridge,
    TrainerBridgeConfig,
)
from .ga_engine import (
    EvaluatedChromosome,
    FitnessCache,
    GaConfig,
    GenerationRecord,
    RunResult,
    StopReason,
    run,
)
from .metrics import ContingencyTable, McNemarResult, auc, build_contingency, mcnemar

__all__ = [
    "DEFAULT_DOMAINS",
    "DENSENET121_BLOCKS",
    "ArchitecturePlan",
    "Chromosome",
    "GeneDomains",
    "canonical_key",
    "enumerate_chromosomes",
    "map_to_architecture",
    "sample_chromosome",
    "Concurrency",
    "EvaluatorError",
    "FitnessEvaluator",
    "LookupEvaluator",
    "SyntheticLandscape",
    "TrainerBridge",
    "TrainerBridgeConfig",
    "EvaluatedChromosome",
    "FitnessCache",
    "GaConfig",
    "GenerationRecord",
    "RunResult",
    "StopReason",
    "run",
    "ContingencyTable",
    "McNemarResult",
    "auc",
    "build_contingency",
    "mcnemar",
]
