"""Object-level contrastive pretraining with copy-paste-jitter views."""

from .contrastive import LossConfig, NegativeQueue, enqueue, hierarchical_loss, info_nce, multi_view_loss
from .cpj import BackgroundPool, PasteConfig, PhotoConfig, View, ViewSet, build_viewset, cpj
from .encoder import Encoder, EncoderConfig, EncoderPair, extract_embeddings, momentum_update, roi_align
from .geometry import BoundingBox, JitterConfig, iou, jitter_box
from .proposals import Proposal, ProposalGeneratorConfig, filter_aspect_ratio, generate_proposals, select_one
from .trainer import TrainConfig, load_checkpoint, run_pretraining, save_checkpoint, train_step

__version__ = "0.1.0"
