"""Joint intra-modal and cross-modal contrastive pretraining of point-cloud
encoders, at desk scale, on a small numpy autodiff engine."""

__version__ = "0.1.0"
