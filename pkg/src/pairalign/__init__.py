"""pairalign: cross-modality self-supervised pretraining for paired
brightfield / structured-illumination microscopy patches, with downstream
slide-level MIL classification and cluster-based phenotype analysis."""

__version__ = "0.1.0"
