"""hesslens: matrix-free Hessian sharpness analysis for small classifiers.

Train feed-forward softmax classifiers (SGD, Adam, AdamW, Gadam), then
measure curvature with stochastic Lanczos quadrature over exact
Hessian-vector products: spectral norm, trace, Frobenius norm and
rank-degeneracy estimates, all bit-reproducible from explicit seeds.
"""

from .curvature import (
    CurvatureContext,
    GGNOperator,
    HessianOperator,
    LinearOperator,
    MatrixOperator,
    exact_hessian,
    ggn_vp,
    gradient,
    hvp,
)
from .linalg import Rng, SymTridiag, gaussian, rademacher, sym_tridiag_eigen
from .models import (
    BatchNormState,
    Dataset,
    DeepLinearModel,
    ModelSpec,
    ParamVector,
    deep_linear_grad,
    deep_linear_hessian,
    deep_linear_loss,
    forward,
    init_bn_state,
    init_params,
    small_loss_exponential_approx,
    softmax_cross_entropy,
)
from .sharpness import (
    RankBoundInput,
    SharpnessReport,
    degeneracy_ratio,
    rank_bound,
    sharpness_report,
)
from .slq import RitzSpectrum, lanczos, moment_estimates, spectral_density
from .training import TrainConfig, gadam_run, lr_schedule, lr_schedule_avg, train

__version__ = "0.1.0"
