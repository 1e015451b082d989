"""Tree ensembles: competing-risks survival forests and CART forests for imputation."""
from . import _backend
from .rsf import (
    Forest,
    ForestConfig,
    SurvivalData,
    SurvTree,
    VimpRow,
    VimpTable,
    grow_forest,
    grow_tree,
    load_forest,
    oob_error,
    predict_cif,
    save_forest,
    truncated_concordance,
    vimp,
)

BACKEND = _backend.NAME

__all__ = [
    "BACKEND",
    "Forest",
    "ForestConfig",
    "SurvTree",
    "SurvivalData",
    "VimpRow",
    "VimpTable",
    "grow_forest",
    "grow_tree",
    "load_forest",
    "oob_error",
    "predict_cif",
    "save_forest",
    "truncated_concordance",
    "vimp",
]
