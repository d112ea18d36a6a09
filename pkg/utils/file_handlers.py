import json
import logging
from pathlib import Path
from typing import List, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from config import __version__, settings
from core.errors import ConfigurationError, InputError, ModelLoadError, PreconditionError
from core.geometry import DistanceKind
from core.model import (
    ComponentSet,
    GLVQHead,
    HeadKind,
    Model,
    OriginalReasoningHead,
    RBFHead,
    ReasoningHead,
)
from schemas.model_file import FORMAT_VERSION, Dims, ModelFile
from schemas.request import TrainConfig
from utils.pgm import min_max_normalize, write_pgm

logger = logging.getLogger(__name__)

ReportT = TypeVar("ReportT", bound=BaseModel)


def _field_path(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "document"


def to_model_file(model: Model) -> ModelFile:
    cs = model.components
    head = model.head
    doc = ModelFile(
        format_version=FORMAT_VERSION,
        head_kind=HeadKind(model.head_kind).value,
        distance_kind=cs.kind.value,
        dims=Dims(n=model.n, C=model.C, K=model.K, M=model.M, r=model.r),
        temperature_mode="shared" if cs.shared else "per_component",
        clip_components=cs.clip,
        constraint_radius=cs.constraint_radius,
        components=cs.translations.tolist(),
        raw_temperatures=cs.raw_temperatures.tolist(),
        temperatures=cs.temperatures.tolist(),
        bases=None if cs.bases is None else cs.bases.tolist(),
        reasoning=head.raw.tolist() if isinstance(head, ReasoningHead) else None,
        negative_masked=head.negative_masked if isinstance(head, ReasoningHead) else False,
        original_reasoning=head.raw.tolist() if isinstance(head, OriginalReasoningHead) else None,
        weights=head.weights.tolist() if isinstance(head, RBFHead) else None,
        bias=head.bias.tolist() if isinstance(head, RBFHead) else None,
        labels=np.asarray(head.labels).tolist() if isinstance(head, GLVQHead) else None,
        metadata={**model.metadata, "library_version": __version__},
    )
    return doc


def _array(values, field: str, shape) -> np.ndarray:
    try:
        array = np.array(values, dtype=float)
    except ValueError as e:
        raise ModelLoadError(f"ragged or non-numeric array ({e})", field=field) from e
    if array.shape != tuple(shape):
        raise ModelLoadError(f"shape {array.shape} does not match dims {tuple(shape)}", field=field)
    return array


def from_model_file(doc: ModelFile) -> Model:
    """Rebuild a model from its document and re-check every invariant."""
    dims = doc.dims
    head_kind = HeadKind(doc.head_kind)
    n_temperatures = 1 if doc.temperature_mode == "shared" else dims.K
    cs = ComponentSet(
        kind=DistanceKind(doc.distance_kind),
        translations=_array(doc.components, "components", (dims.K, dims.n)),
        raw_temperatures=_array(doc.raw_temperatures, "raw_temperatures", (n_temperatures,)),
        bases=None if doc.bases is None else _array(doc.bases, "bases", (dims.K, dims.n, dims.r)),
        constraint_radius=doc.constraint_radius,
        clip=doc.clip_components,
    )
    if head_kind in (HeadKind.CBC, HeadKind.RBF_NORM):
        head = ReasoningHead(raw=_array(doc.reasoning, "reasoning", (dims.C, dims.M, 2 * dims.K)),
                             negative_masked=doc.negative_masked)
    elif head_kind is HeadKind.ORIGINAL_CBC:
        head = OriginalReasoningHead(raw=_array(doc.original_reasoning, "original_reasoning", (dims.C, dims.K, 3)))
    elif head_kind is HeadKind.RBF:
        head = RBFHead(weights=_array(doc.weights, "weights", (dims.C, dims.K)),
                       bias=_array(doc.bias, "bias", (dims.C,)))
    else:
        labels = _array(doc.labels, "labels", (dims.K,)).astype(int)
        head = GLVQHead(labels=labels, n_classes=dims.C)

    metadata = dict(doc.metadata)
    metadata.pop("library_version", None)
    model = Model(head_kind=head_kind, components=cs, head=head, metadata=metadata)
    try:
        model.validate()
    except PreconditionError as e:
        raise ModelLoadError(str(e), field=e.field) from e
    if head_kind is HeadKind.GLVQ and dims.M * dims.C != dims.K:
        raise ModelLoadError(f"expected K = C * M = {dims.C * dims.M}", field="dims.K")
    return model


class FileHandler:
    def __init__(self, output_dir: Optional[Path] = None):
        self.output_dir = Path(output_dir) if output_dir is not None else settings.output_dir

    def resolve(self, path) -> Path:
        """Relative paths land in the output directory"""
        path = Path(path)
        return path if path.is_absolute() else self.output_dir / path

    def _write_text(self, path, text: str) -> Path:
        path = self.resolve(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def save_model(self, model: Model, path) -> Path:
        doc = to_model_file(model)
        path = self._write_text(path, doc.model_dump_json(indent=1) + "\n")
        logger.info(f"Saved {doc.head_kind} model to {path}")
        return path

    def load_model(self, path) -> Model:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Model file not found: {path}")
        try:
            doc = ModelFile.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ModelLoadError(e.errors()[0]["msg"], field=_field_path(e)) from e
        model = from_model_file(doc)
        logger.info(f"Loaded {doc.head_kind} model from {path}")
        return model

    def save_report(self, report: BaseModel, path) -> Path:
        if hasattr(report, "library_version"):
            report = report.model_copy(update={"library_version": __version__})
        path = self._write_text(path, report.model_dump_json(indent=1) + "\n")
        logger.info(f"Saved {type(report).__name__} to {path}")
        return path

    def load_report(self, path, report_type: Type[ReportT]) -> ReportT:
        return report_type.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def load_config(self, path) -> TrainConfig:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: not valid JSON ({e})") from e
        try:
            return TrainConfig.model_validate(raw)
        except ValidationError as e:
            raise ConfigurationError(f"{path}: {_field_path(e)}: {e.errors()[0]['msg']}") from e

    def export_components(self, model: Model, out_dir, side: int) -> List[Path]:
        """
        One P5 image per component; tangent components also export each basis
        column, min-max normalised.
        """
        if side < 1 or side * side != model.n:
            raise InputError(f"input dimension {model.n} is not {side} x {side}")
        out_dir = self.resolve(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cs = model.components
        written = []
        for k in range(cs.K):
            path = out_dir / f"component_{k:03d}.pgm"
            write_pgm(path, cs.translations[k].reshape(side, side))
            written.append(path)
            for j in range(cs.r):
                path = out_dir / f"component_{k:03d}_basis_{j:02d}.pgm"
                write_pgm(path, min_max_normalize(cs.bases[k][:, j]).reshape(side, side))
                written.append(path)
        logger.info(f"Exported {len(written)} images to {out_dir}")
        return written


# Global instance
file_handler = FileHandler()


# Convenience functions for easy imports
def save_model(model: Model, path) -> Path:
    return file_handler.save_model(model, path)


def load_model(path) -> Model:
    return file_handler.load_model(path)


def save_report(report: BaseModel, path) -> Path:
    return file_handler.save_report(report, path)


def export_components(model: Model, out_dir, side: int) -> List[Path]:
    return file_handler.export_components(model, out_dir, side)
