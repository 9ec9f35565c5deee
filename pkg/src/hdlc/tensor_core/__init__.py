"""Dense layer arithmetic and declarative networks."""

from .layers import (INFER, TRAIN, PoolIndices, conv_backward, conv_forward, dropout_backward,
                     dropout_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward,
                     relu_backward, relu_forward, softmax, softmax_xent, stochpool_backward,
                     stochpool_forward, stochpool_infer_backward)
from .network import (Conv, Dropout, ForwardTrace, FullConnect, MaxPool, ModelState, NetworkSpec, ReLU,
                      Softmax, StochasticPool, infer_shapes, init_model, load_spec, network_backward,
                      network_forward, parameter_count, predict_proba, save_spec, topk_indices)
