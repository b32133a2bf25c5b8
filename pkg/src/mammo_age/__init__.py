"""Age estimation from mammogram thumbnails and age-imputation experiments."""

__version__ = "0.1.0"
