"""Deep perceptual similarity with context-adaptable channel scalars.

Distances between images are computed from the activations of a frozen
convolutional network and can be adapted to an arbitrary ordering of image
distortions by training per-channel positive scalars.
"""

from .adaption import (AdaptionHistory, JudgeNet, TrainConfig, bce,
                       judge_forward, load_judge, loss_and_grads, save_judge,
                       sync_loss, train_adaption, train_step)
from .distortions import (ALL_KINDS, DistortionKind, DistortionOrdering,
                          Triplet, apply, make_triplet, random_ordering,
                          sample_params, triplet_rng)
from .errors import (ArchitectureError, ConfigError, ContainerError,
                     DatasetError, DeepsimError, ShapeMismatchError,
                     TrainingDivergedError)
from .evaluation import (EvalReport, ImageDirDataset, JNDSample,
                         TwoAFCSample, eval_ordering, jnd_score, load_bapps,
                         load_image_dir, load_png, save_png, two_afc_score)
from .kernels import BACKEND
from .nets import (BUILTIN_SPECS, Conv2D, FeatureStack, Fire, LeakyReLU,
                   LoadedNetwork, MaxPool, NetworkSpec, ReLU,
                   WeightContainer, alexnet_spec, forward_extract,
                   load_network, load_spec, save_spec, squeezenet1_1_spec,
                   vgg16_spec, write_container)
from .similarity import (ComparisonMethod, Metric, ScalarWeights,
                         channel_normalize, d_mean, d_sort, d_spatial,
                         distance, distance_coeffs, distance_grad_w)

__version__ = "0.1.0"
