"""Deep region competition: unsupervised foreground extraction.

Thin python surface over the C++ core: segmentation metrics, the
differentiable operator set (grid re-sampling, gating, responsibilities,
regularizers), the Langevin update, the synthetic textured-sprites sampler,
and checkpointed-model inference.
"""

try:
    # installed wheel layout: the extension lives inside the package
    from ._drc import (  # type: ignore  # noqa: F401
        Model,
        best_permutation_score,
        dice,
        gating,
        grid_sample,
        identity_grid,
        iou,
        langevin_step,
        orthogonal_reg,
        pseudo_label_loss,
        region_loglik,
        responsibilities,
        sample_scene,
        tv_norm,
    )
except ImportError:
    # in-tree layout: the extension sits on PYTHONPATH next to the build
    from _drc import (  # noqa: F401
        Model,
        best_permutation_score,
        dice,
        gating,
        grid_sample,
        identity_grid,
        iou,
        langevin_step,
        orthogonal_reg,
        pseudo_label_loss,
        region_loglik,
        responsibilities,
        sample_scene,
        tv_norm,
    )

__all__ = [
    "Model",
    "best_permutation_score",
    "dice",
    "gating",
    "grid_sample",
    "identity_grid",
    "iou",
    "langevin_step",
    "orthogonal_reg",
    "pseudo_label_loss",
    "region_loglik",
    "responsibilities",
    "sample_scene",
    "tv_norm",
]
