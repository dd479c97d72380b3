"""Item promotion attacks on visually aware recommenders.

Synthetic corpus generation, VBPR/DVBPR/AMR training, a small pixel-space
diffusion model, guided-diffusion and direct-perturbation item promotion
attacks, and exposure/ranking/image-quality evaluation."""

__version__ = "0.1.0"

from .data import Catalog, Split, load_catalog, k_core_filter, make_split, select_targets
from .metrics import MetricReport, exposure_rate, fid, improvement, ndcg_at_k, sparsity
from .pipeline import RunConfig, Run, run_pipeline, load_config

__all__ = [
    "Catalog", "Split", "load_catalog", "k_core_filter", "make_split", "select_targets",
    "MetricReport", "exposure_rate", "fid", "improvement", "ndcg_at_k", "sparsity",
    "RunConfig", "Run", "run_pipeline", "load_config", "__version__",
]
