from .attention import npa_backward, npa_forward, npaformer_backward, npaformer_forward, position_embed
from .complexity import complexity_estimate
from .sconv import kernel_map, sconv_backward, sconv_forward, tsconv_backward, tsconv_forward
from .weights import ModelConfig, ModelWeights, init_params
