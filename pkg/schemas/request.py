from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Annotated, Literal, Optional, Union

HeadName = Literal["cbc", "original_cbc", "rbf", "rbf_norm", "glvq"]
DistanceName = Literal["euclidean", "squared_euclidean", "tangent", "squared_tangent", "constrained_tangent"]


class _Loss(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class MarginLoss(_Loss):
    name: Literal["margin"] = "margin"
    gamma: float = Field(0.3, ge=0.0, le=1.0)


class GLVQLoss(_Loss):
    name: Literal["glvq"] = "glvq"


class CrossEntropyLoss(_Loss):
    name: Literal["cross_entropy"] = "cross_entropy"


class RobustLoss(_Loss):
    name: Literal["robust"] = "robust"
    gamma: float = Field(1.58, gt=0.0)


class RobustSquaredLoss(_Loss):
    name: Literal["robust_squared"] = "robust_squared"
    gamma: float = Field(1.58, gt=0.0)
    lam: float = Field(0.09, gt=0.0, description="Weight of the misclassified branch")


class LogLikelihoodRatioLoss(_Loss):
    name: Literal["log_likelihood_ratio"] = "log_likelihood_ratio"
    gamma: float = Field(1.58, gt=0.0)


LossKind = Annotated[
    Union[MarginLoss, GLVQLoss, CrossEntropyLoss, RobustLoss, RobustSquaredLoss, LogLikelihoodRatioLoss],
    Field(discriminator="name"),
]


class TrainConfig(BaseModel):
    """Experiment configuration; keys map one-to-one onto the JSON config file."""
    model_config = ConfigDict(extra='forbid', validate_assignment=True)

    epochs: int = Field(40, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.005, gt=0.0)
    loss: LossKind = Field(default_factory=MarginLoss)
    seed: int = Field(0, ge=0)
    temperature_mode: Literal["shared", "per_component"] = "per_component"
    p0: float = Field(0.01, gt=0.0, lt=1.0)
    concepts_per_class: int = Field(2, ge=1)
    subspace_dim: int = Field(12, ge=0)
    clip_components: bool = True

    head_kind: HeadName = "cbc"
    distance_kind: DistanceName = "squared_euclidean"
    n_components: int = Field(20, ge=1, description="K; GLVQ uses n_classes * concepts_per_class")
    constraint_radius: Optional[float] = Field(None, gt=0.0)
    negative_masked: bool = Field(False, validate_default=True)

    @field_validator('negative_masked')
    @classmethod
    def masked_for_rbf_norm(cls, v, info):
        if info.data.get('head_kind') == 'rbf_norm':
            return True
        return v

    @model_validator(mode='after')
    def check_architecture(self):
        if self.distance_kind == 'constrained_tangent' and self.constraint_radius is None:
            raise ValueError('constrained_tangent needs constraint_radius')
        if 'tangent' in self.distance_kind and self.subspace_dim < 1:
            raise ValueError('tangent distances need subspace_dim >= 1')
        return self


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    epsilon: float = Field(..., ge=0.0, description="L2 budget")
    steps: int = Field(100, ge=1)
    step_size: Optional[float] = Field(None, gt=0.0, description="Defaults to 2.5 * epsilon / steps")
    restarts: int = Field(5, ge=1)
    seed: int = Field(0, ge=0)

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps
