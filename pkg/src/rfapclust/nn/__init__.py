"""Minimal numpy network engine: 3D convolutions, dense heads, losses, SGD."""
from .gradcheck import gradient_check
from .layers import (Conv3D, Dense, Flatten, MaxPool3D, ReLU, ShapeError, conv3d, conv3d_backward,
                     dense, dense_backward, maxpool3d, maxpool3d_backward, softmax)
from .losses import categorical_cross_entropy, consistency_loss, pairwise_cluster_loss, ramp_up_weight
from .network import Network, Pass, default_backbone, to_network_input
from .optim import SGD, SGDConfig
