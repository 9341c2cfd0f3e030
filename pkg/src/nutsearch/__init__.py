"""nutsearch: a desk-scale workbench for synthesizing natural universal
trigger phrases against small text classifiers and measuring attack
success, naturalness, and transfer."""

__version__ = "0.1.0"
