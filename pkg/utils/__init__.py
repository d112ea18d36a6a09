from .file_handlers import file_handler, save_model, load_model, save_report, export_components
from .idx import Dataset, load_idx, save_idx
from .datasets import make_blobs
from .pgm import write_pgm

__all__ = [
    'file_handler', 'save_model', 'load_model', 'save_report', 'export_components',
    'Dataset', 'load_idx', 'save_idx', 'make_blobs', 'write_pgm',
]
