from .config import RunConfig, load_config
from .errors import RefineError, StageError
from .pipeline import EvalSummary, RefinementService, stratify
from .run_registry import RunRegistry

__all__ = ['RunConfig', 'load_config', 'RefineError', 'StageError',
           'EvalSummary', 'RefinementService', 'stratify', 'RunRegistry']
