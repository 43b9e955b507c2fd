"""ctxunet: U-Net and Contextual U-Net on a small numpy autodiff core.

Import the submodules directly, e.g.:

    from ctxunet.network import HourglassConfig, build_contextual_unet
    from ctxunet.training import TrainSpec, train

The package root stays import-light so the CLI can pin BLAS thread pools
before numpy loads.
"""

__version__ = "0.1.0"
