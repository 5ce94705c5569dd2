"""squareops: elementwise-square network modules on a tape-based autodiff core."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .tensor import (BatchNormState, Tape, Tensor, backward, conv2d, gap,
                     relu, relu_square, softmax_ce, square)
from .modules import (ExcitationParams, SoftminParams, gem_pool, moment_pool,
                      scale_proportion, square_encoding_wrap,
                      square_excitation, square_pool, square_softmin)
from .models import (Model, build_mini_resnet, build_two_layer,
                     build_vanilla_cnn)
from .modelspec import ModelSpec

__version__ = "0.1.0"
