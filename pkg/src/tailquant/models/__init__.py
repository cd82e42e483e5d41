from .coupling import AffineTransformer, NlsqTransformer, coupling_forward, coupling_inverse
from .flow import KINDS, ConditionalFlow, aqf_loss, anf_nll, flow_generate, flow_quantile, train_flow
from .qr import QuantileRegressor, QuantileRegressorSet, train_qr
from .training import TrainConfig, TrainingDivergedError
