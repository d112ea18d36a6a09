from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional

from schemas.request import DistanceName, HeadName

FORMAT_VERSION = 1

Matrix = List[List[float]]


class Dims(BaseModel):
    model_config = ConfigDict(extra='forbid')

    n: int = Field(..., ge=1)
    C: int = Field(..., ge=1)
    K: int = Field(..., ge=1)
    M: int = Field(..., ge=1)
    r: int = Field(..., ge=0)


class ModelFile(BaseModel):
    """Versioned JSON document holding every parameter of a model."""
    model_config = ConfigDict(extra='forbid')

    format_version: int
    head_kind: HeadName
    distance_kind: DistanceName
    dims: Dims
    temperature_mode: Literal["shared", "per_component"]
    clip_components: bool = True
    constraint_radius: Optional[float] = None
    components: Matrix
    raw_temperatures: List[float]
    temperatures: List[float] = []
    bases: Optional[List[Matrix]] = None

    reasoning: Optional[List[Matrix]] = None
    negative_masked: bool = False
    original_reasoning: Optional[List[Matrix]] = None
    weights: Optional[Matrix] = None
    bias: Optional[List[float]] = None
    labels: Optional[List[int]] = None

    metadata: Dict[str, Any] = {}

    @field_validator('format_version')
    @classmethod
    def known_version(cls, v):
        if v != FORMAT_VERSION:
            raise ValueError(f'unsupported format_version {v} (expected {FORMAT_VERSION})')
        return v

    @model_validator(mode='after')
    def payload_matches_head(self):
        payload = {
            'reasoning': self.reasoning is not None,
            'original_reasoning': self.original_reasoning is not None,
            'weights': self.weights is not None or self.bias is not None,
            'labels': self.labels is not None,
        }
        expected = {
            'cbc': 'reasoning',
            'rbf_norm': 'reasoning',
            'original_cbc': 'original_reasoning',
            'rbf': 'weights',
            'glvq': 'labels',
        }[self.head_kind]
        present = sorted(name for name, set_ in payload.items() if set_)
        if present != [expected]:
            raise ValueError(f'{self.head_kind} model needs exactly the {expected} payload, found {present}')
        if self.head_kind == 'rbf' and (self.weights is None or self.bias is None):
            raise ValueError('rbf model needs both weights and bias')
        return self
