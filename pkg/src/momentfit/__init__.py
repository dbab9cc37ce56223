"""momentfit: implicit surface fitting from heavily noisy point clouds.

Fits the zero set of a linear combination of ordered feature functions by
averaging an unbiased, noise-compensated estimate of the feature moment
matrix and extracting its minimum-singular-value vector; the unknown noise
bound can be recovered by a grid search over that minimum singular value.
"""

from .basis import BasisSpec, Feature, FeatureAtom, enumerate_features, evaluate, evaluate_many, feature_product
from .compensation import CompensationEvaluator, CompensationPlan, build_plan, instantiate, load_plan, save_plan
from .errors import (CapacityError, ConfigError, DataError, MomentfitError,
                     NumericalError, PlanFormatError, SurfaceNotFoundError)
from .evaluation import (EvalReport, LevelSet, coefficient_distance, cosine_similarity,
                         evaluate_fit, extract_level_set, fit_loss)
from .fitter import (AffineTransform, FitConfig, FitResult, GridSearchResult, GridSpec,
                     MomentAccumulator, accumulate, accumulate_all, fit, fit_smoothed,
                     grid_search_theta, solve_null)
from .noise import MomentKey, MomentTable, NoiseModel, build_moment_table, moment, quadrature_moment
from .shapes import (ImplicitShape, SampledCloud, add_noise, builtin_shape, normalize,
                     read_points, sample_zero_set, write_points)

__version__ = "0.1.0"
