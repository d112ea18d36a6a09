from .request import (
    AttackConfig, CrossEntropyLoss, GLVQLoss, LogLikelihoodRatioLoss, LossKind, MarginLoss,
    RobustLoss, RobustSquaredLoss, TrainConfig,
)
from .response import (
    AttackReport, CertificationReport, CertifiedPoint, CurvePoint, DivergenceReport,
    EpochRecord, EvaluationReport, RobustnessCurve, TrainingHistory,
)
from .model_file import FORMAT_VERSION, Dims, ModelFile

__all__ = [
    'AttackConfig', 'CrossEntropyLoss', 'GLVQLoss', 'LogLikelihoodRatioLoss', 'LossKind', 'MarginLoss',
    'RobustLoss', 'RobustSquaredLoss', 'TrainConfig',
    'AttackReport', 'CertificationReport', 'CertifiedPoint', 'CurvePoint', 'DivergenceReport',
    'EpochRecord', 'EvaluationReport', 'RobustnessCurve', 'TrainingHistory',
    'FORMAT_VERSION', 'Dims', 'ModelFile',
]
