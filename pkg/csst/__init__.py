"""
CSST Package
Contrastive self-supervised pretraining and fine-tuning for POI crowd-flow inference.
"""

__version__ = "1.0.0"
__description__ = "Crowd-flow inference from noisy GPS reports with contrastive pretraining"
