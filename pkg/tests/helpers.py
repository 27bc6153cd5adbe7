"""Small models shared by the test modules."""

import torch
from torch import nn


class LinearSoftmax(nn.Module):
    """Flatten followed by one linear layer; convex in the input for CE."""

    last_layer = "fc"
    penultimate_layer = "flat"

    def __init__(self, in_shape=(3, 32, 32), num_classes=4, weight=None, bias=None):
        super().__init__()
        d = int(torch.tensor(in_shape).prod())
        self.num_classes = num_classes
        self.flat = nn.Flatten()
        self.fc = nn.Linear(d, num_classes)
        with torch.no_grad():
            if weight is not None:
                self.fc.weight.copy_(torch.as_tensor(weight, dtype=torch.float32))
            if bias is not None:
                self.fc.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))

    def forward(self, x):
        return self.fc(self.flat(x))


class ConstantModel(nn.Module):
    """Ignores its input and always emits the same logits."""

    def __init__(self, logits, in_shape=(3, 32, 32)):
        super().__init__()
        self.num_classes = len(logits)
        self.logits = nn.Parameter(torch.as_tensor(logits, dtype=torch.float32))
        self.probe = nn.Linear(1, 1)  # keeps the graph connected to the input

    def forward(self, x):
        zero = 0.0 * self.probe(x.flatten(1)[:, :1])
        return self.logits.expand(len(x), -1) + zero


def orthogonal_linear(num_classes=4, in_shape=(3, 32, 32), row_norm=10.0, seed=0):
    """Linear-softmax model whose class weight rows are orthogonal with equal norm."""
    d = int(torch.tensor(in_shape).prod())
    g = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(d, num_classes, generator=g, dtype=torch.float64))
    return LinearSoftmax(in_shape, num_classes, weight=row_norm * q.T, bias=torch.zeros(num_classes))
