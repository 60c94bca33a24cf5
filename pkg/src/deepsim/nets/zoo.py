"""Builtin architecture descriptions for the three supported loss networks.

Tap layers follow the published extraction points for this metric family:
AlexNet taps its five ReLUs, SqueezeNet 1.1 taps the first ReLU plus fire
modules 2, 4, 5, 6, 7 and 8, and VGG-16 taps ReLUs 2, 4, 7, 10 and 13.
Weight containers for these specs are produced by the exporter tool; the
tensor naming convention is ``layers.<index>.<part>`` as documented in
:mod:`deepsim.nets.network`.
"""

from .arch import Conv2D, Fire, MaxPool, NetworkSpec, ReLU

# ImageNet channel statistics; the containers record the same values in
# their __meta__ so load_network can cross-check.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def alexnet_spec() -> NetworkSpec:
    layers = (
        Conv2D(64, 11, 11, stride=4, padding=2),
        ReLU(tap=True),
        MaxPool(3, 2),
        Conv2D(192, 5, 5, padding=2),
        ReLU(tap=True),
        MaxPool(3, 2),
        Conv2D(384, 3, 3, padding=1),
        ReLU(tap=True),
        Conv2D(256, 3, 3, padding=1),
        ReLU(tap=True),
        Conv2D(256, 3, 3, padding=1),
        ReLU(tap=True),
        MaxPool(3, 2),
    )
    return NetworkSpec("alexnet", layers, IMAGENET_MEAN, IMAGENET_STD)


def squeezenet1_1_spec() -> NetworkSpec:
    layers = (
        Conv2D(64, 3, 3, stride=2),
        ReLU(tap=True),
        MaxPool(3, 2, ceil_mode=True),
        Fire(16, 64, 64),
        Fire(16, 64, 64, tap=True),
        MaxPool(3, 2, ceil_mode=True),
        Fire(32, 128, 128),
        Fire(32, 128, 128, tap=True),
        MaxPool(3, 2, ceil_mode=True),
        Fire(48, 192, 192, tap=True),
        Fire(48, 192, 192, tap=True),
        Fire(64, 256, 256, tap=True),
        Fire(64, 256, 256, tap=True),
    )
    return NetworkSpec("squeezenet1_1", layers, IMAGENET_MEAN, IMAGENET_STD)


def vgg16_spec() -> NetworkSpec:
    def block(channels, convs, tap_last):
        layers = []
        for i in range(convs):
            layers.append(Conv2D(channels, 3, 3, padding=1))
            layers.append(ReLU(tap=(tap_last and i == convs - 1)))
        layers.append(MaxPool(2, 2))
        return layers

    layers = (block(64, 2, True) + block(128, 2, True) + block(256, 3, True)
              + block(512, 3, True) + block(512, 3, True))
    return NetworkSpec("vgg16", tuple(layers), IMAGENET_MEAN, IMAGENET_STD)


BUILTIN_SPECS = {
    "alexnet": alexnet_spec,
    "squeezenet1_1": squeezenet1_1_spec,
    "vgg16": vgg16_spec,
}
