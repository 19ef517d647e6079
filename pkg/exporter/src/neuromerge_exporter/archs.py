"""Reference PyTorch architectures the exporter knows how to convert.

Models are plain sequential stacks of primitive modules (plus an explicit
Residual container), which keeps the conversion to the portable format a
structural walk. Convolutions carry no bias; normalization follows every
convolution as in the usual CIFAR training setups.
"""

from __future__ import annotations

from torch import nn


class Residual(nn.Module):
    """body(x) + shortcut(x); an empty shortcut is the identity."""

    def __init__(self, body: nn.Sequential, shortcut: nn.Sequential | None = None):
        super().__init__()
        self.body = body
        self.shortcut = shortcut if shortcut is not None else nn.Sequential()

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


def _conv(cin, cout, k=3, stride=1, padding=1, bias=False):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=padding, bias=bias)


def lenet300(num_classes: int = 10) -> nn.Sequential:
    """LeNet-300-100 over flattened 28x28 inputs."""
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(784, 300),
        nn.ReLU(),
        nn.Linear(300, 100),
        nn.ReLU(),
        nn.Linear(100, num_classes),
    )


VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def vgg16(num_classes: int = 10, conv_bias: bool = False) -> nn.Sequential:
    """VGG-16 for 32x32 inputs with a 512-512 dense head."""
    layers = []
    cin = 3
    for item in VGG16_CFG:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
            continue
        layers += [_conv(cin, item, bias=conv_bias), nn.BatchNorm2d(item), nn.ReLU()]
        cin = item
    layers += [
        nn.Flatten(),
        nn.Linear(512, 512),
        nn.BatchNorm1d(512),
        nn.ReLU(),
        nn.Linear(512, num_classes),
    ]
    return nn.Sequential(*layers)


def _basic_block(cin, cout, stride):
    body = nn.Sequential(
        _conv(cin, cout, stride=stride),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
        _conv(cout, cout),
        nn.BatchNorm2d(cout),
    )
    if stride != 1 or cin != cout:
        shortcut = nn.Sequential(
            _conv(cin, cout, k=1, stride=stride, padding=0),
            nn.BatchNorm2d(cout),
        )
    else:
        shortcut = None
    return Residual(body, shortcut)


def resnet56(num_classes: int = 10) -> nn.Sequential:
    """CIFAR ResNet-56: 3 stages of 9 post-activation blocks, widths 16/32/64."""
    layers = [_conv(3, 16), nn.BatchNorm2d(16), nn.ReLU()]
    cin = 16
    for width, first_stride in ((16, 1), (32, 2), (64, 2)):
        for i in range(9):
            stride = first_stride if i == 0 else 1
            layers += [_basic_block(cin, width, stride), nn.ReLU()]
            cin = width
    layers += [nn.AvgPool2d(8), nn.Flatten(), nn.Linear(64, num_classes)]
    return nn.Sequential(*layers)


def _wide_block(cin, cout, stride):
    """Pre-activation block; on width/stride changes the shared pre-activation
    is hoisted out so body and shortcut consume the same input."""
    if stride != 1 or cin != cout:
        body = nn.Sequential(
            _conv(cin, cout, stride=stride),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
            _conv(cout, cout),
        )
        shortcut = nn.Sequential(_conv(cin, cout, k=1, stride=stride, padding=0))
        return [nn.BatchNorm2d(cin), nn.ReLU(), Residual(body, shortcut)]
    body = nn.Sequential(
        nn.BatchNorm2d(cin),
        nn.ReLU(),
        _conv(cin, cout, stride=stride),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
        _conv(cout, cout),
    )
    return [Residual(body)]


def wrn40_4(num_classes: int = 10) -> nn.Sequential:
    """WideResNet-40-4: 3 groups of 6 pre-activation blocks, widths 64/128/256."""
    layers = [_conv(3, 16)]
    cin = 16
    for width, first_stride in ((64, 1), (128, 2), (256, 2)):
        for i in range(6):
            stride = first_stride if i == 0 else 1
            layers += _wide_block(cin, width, stride)
            cin = width
    layers += [
        nn.BatchNorm2d(cin),
        nn.ReLU(),
        nn.AvgPool2d(8),
        nn.Flatten(),
        nn.Linear(cin, num_classes),
    ]
    return nn.Sequential(*layers)


ARCHITECTURES = {
    "lenet300": (lenet300, (1, 28, 28)),
    "vgg16": (vgg16, (3, 32, 32)),
    "resnet56": (resnet56, (3, 32, 32)),
    "wrn40-4": (wrn40_4, (3, 32, 32)),
}


def build(arch: str, num_classes: int = 10) -> tuple[nn.Sequential, tuple]:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    factory, input_shape = ARCHITECTURES[arch]
    model = factory(num_classes=num_classes)
    model.eval()
    return model, input_shape
