"""Resolution-independent N-d convolutions built from factored diagonal SSMs."""

from .errors import (CapacityError, ConfigError, ContainerError, DomainError, NDSSMError,
                     NumericalError, UsageError)
from .ssm import (DiagonalSSM, apply_bandlimit, bidirectional_kernel, discretize, init_ssm,
                  sample_kernel)
from .kernel import (DenseKernelSpec, FactoredKernelSpec, KernelTensor, assemble_dense,
                     assemble_factored, inflate_2d_to_3d, kernel_grad_wrt_c, make_factored_spec)
from .conv import (conv_backward, conv_forward, depthwise_backward, depthwise_forward,
                   fft_conv_nd, profile_conv)
from .resolution import (ResizeSchedule, ResolutionPlan, Stage, effective_kernel_length,
                         rescale_delta, resample_image, run_schedule)
from .datagen import DatasetManifest, SceneSpec, SyntheticDataset, make_dataset, render
from .model import (Conv2dBaselineModel, IsotropicModel, ModelConfig, TrainConfig, evaluate,
                    evaluate_zero_shot, train, train_progressive)

__version__ = "0.1.0"
