# This file makes the 'matching' directory a Python package
# The stage classes can be imported directly from the package

from matching.model import ModelConfig, ModelParams
from matching.feature_matcher import FeatureMatcher
from matching.consensus_refiner import ConsensusConfig, ConsensusRefiner
from matching.graduated_assignment import GraduatedAssignmentConfig, graduated_assignment_solve
from matching.trainer import TrainConfig, Trainer

__all__ = [
    'ModelConfig',
    'ModelParams',
    'FeatureMatcher',
    'ConsensusConfig',
    'ConsensusRefiner',
    'GraduatedAssignmentConfig',
    'graduated_assignment_solve',
    'TrainConfig',
    'Trainer'
]
