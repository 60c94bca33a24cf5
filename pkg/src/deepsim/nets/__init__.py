from .arch import (Conv2D, Fire, LeakyReLU, MaxPool, NetworkSpec, ReLU,
                   from_json, load_spec, save_spec, to_json)
from .container import WeightContainer, write_container
from .network import (FeatureStack, LoadedNetwork, check_image,
                      forward_extract, load_network)
from .zoo import BUILTIN_SPECS, alexnet_spec, squeezenet1_1_spec, vgg16_spec

__all__ = [
    "Conv2D", "ReLU", "LeakyReLU", "MaxPool", "Fire", "NetworkSpec",
    "from_json", "to_json", "load_spec", "save_spec",
    "WeightContainer", "write_container",
    "FeatureStack", "LoadedNetwork", "check_image", "forward_extract",
    "load_network",
    "BUILTIN_SPECS", "alexnet_spec", "squeezenet1_1_spec", "vgg16_spec",
]
