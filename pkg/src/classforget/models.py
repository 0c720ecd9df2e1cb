"""Architecture-agnostic access to a classifier's named parameter tensors.

The conventions every model used with this package follows:

* ``model(x)`` returns one logit per class, ``model.features(x)`` returns the
  penultimate activation (the input of the classification head).
* ``model.head`` is the final fully-connected classification layer.
* Parameters are addressed by their ``named_parameters()`` name; a "layer"
  is the group of tensors sharing the name prefix before the final dot
  (``conv1.weight`` and ``conv1.bias`` belong to layer ``conv1``).

Normalization-layer running statistics are buffers, not parameters: they are
checkpointed but never appear in masks or gradient updates.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from collections.abc import Iterable, Mapping

import torch
import torch.nn as nn

from .errors import InputShapeError, InvalidClassError, MaskError

ParamStore = "OrderedDict[str, torch.Tensor]"


class SmallConvNet(nn.Module):
    """Three conv/BN blocks with global average pooling and a linear head.

    ~95k parameters at the default widths; sized for 32x32 inputs but any
    spatial size >= 8 works because pooling ends in a global average.
    """

    def __init__(self, num_classes: int, in_channels: int = 3,
                 widths: tuple[int, int, int] = (32, 64, 128)):
        super().__init__()
        w1, w2, w3 = widths
        self.conv1 = nn.Conv2d(in_channels, w1, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(w1)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(w2)
        self.conv3 = nn.Conv2d(w2, w3, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(w3)
        self.head = nn.Linear(w3, num_classes)
        self.pool = nn.MaxPool2d(2)
        self.num_classes = num_classes
        self.in_channels = in_channels

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(torch.relu(self.bn1(self.conv1(x))))
        x = self.pool(torch.relu(self.bn2(self.conv2(x))))
        x = torch.relu(self.bn3(self.conv3(x)))
        return x.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _make_convnet_s(num_classes: int) -> nn.Module:
    return SmallConvNet(num_classes, widths=(32, 64, 128))


def _make_convnet_xs(num_classes: int) -> nn.Module:
    # Slim variant for quick smoke runs and tests.
    return SmallConvNet(num_classes, widths=(8, 16, 32))


ARCHITECTURES: dict[str, object] = {
    "convnet-s": _make_convnet_s,
    "convnet-xs": _make_convnet_xs,
}


def build_model(arch: str, num_classes: int, seed: int) -> nn.Module:
    """Construct a registered architecture with a seeded initialization."""
    if arch not in ARCHITECTURES:
        raise InvalidClassError(f"unknown architecture id {arch!r}; "
                                f"known: {sorted(ARCHITECTURES)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ARCHITECTURES[arch](num_classes)
    return model


def param_store(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Ordered name -> tensor view of the model's trainable parameters."""
    return OrderedDict(model.named_parameters())


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


def layer_of(param_name: str) -> str:
    """Layer group key of a parameter name: everything before the last dot."""
    return param_name.rsplit(".", 1)[0] if "." in param_name else param_name


def head_param_names(model: nn.Module) -> tuple[str, str]:
    """Names of the classification head's weight and bias tensors."""
    head = getattr(model, "head", None)
    if not isinstance(head, nn.Linear):
        raise MaskError("model does not expose a Linear classification head "
                        "as attribute 'head'")
    for name, module in model.named_modules():
        if module is head:
            return f"{name}.weight", f"{name}.bias"
    raise MaskError("classification head not found among named modules")


def predict_logits(model: nn.Module, images: torch.Tensor,
                   batch_size: int = 256) -> torch.Tensor:
    """Forward pass in evaluation mode; one logit vector per input.

    Deterministic given fixed parameters and inputs. Raises InputShapeError
    when the batch does not match the model's declared input shape.
    """
    if images.ndim != 4 and isinstance(model, SmallConvNet):
        raise InputShapeError(f"expected a 4-d image batch, got shape "
                              f"{tuple(images.shape)}")
    expected_c = getattr(model, "in_channels", None)
    if expected_c is not None and images.shape[1] != expected_c:
        raise InputShapeError(f"model expects {expected_c} channels, batch "
                              f"has {images.shape[1]}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            chunks = [model(images[i:i + batch_size])
                      for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(chunks, dim=0)


def extract_features(model: nn.Module, images: torch.Tensor,
                     batch_size: int = 256) -> torch.Tensor:
    """Penultimate-layer activations in evaluation mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            chunks = [model.features(images[i:i + batch_size])
                      for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(chunks, dim=0)


def slice_logits(logits: torch.Tensor, ids: Iterable[int]) -> torch.Tensor:
    """Sub-vector of logits for the given class ids, ordered by ascending id.

    Works on a single logit vector or a batch of them (last dim = classes).
    """
    ordered = sorted(set(int(i) for i in ids))
    num_classes = logits.shape[-1]
    bad = [i for i in ordered if i < 0 or i >= num_classes]
    if bad:
        raise InvalidClassError(f"class ids {bad} outside the label set "
                                f"[0, {num_classes})")
    index = torch.as_tensor(ordered, dtype=torch.long, device=logits.device)
    return logits.index_select(-1, index).clone()


def _check_mask(model: nn.Module, mask: Mapping[str, torch.Tensor]) -> None:
    params = param_store(model)
    if set(mask.keys()) != set(params.keys()):
        missing = set(params) - set(mask)
        extra = set(mask) - set(params)
        raise MaskError(f"mask tensor names do not match model parameters "
                        f"(missing={sorted(missing)}, extra={sorted(extra)})")
    for name, m in mask.items():
        if tuple(m.shape) != tuple(params[name].shape):
            raise MaskError(f"mask shape {tuple(m.shape)} != parameter shape "
                            f"{tuple(params[name].shape)} for {name!r}")
        if m.dtype != torch.bool:
            raise MaskError(f"mask for {name!r} must be boolean")


def apply_masked_gradient(model: nn.Module,
                          gradients: Mapping[str, torch.Tensor],
                          mask: Mapping[str, torch.Tensor],
                          lr: float) -> nn.Module:
    """One plain-descent step restricted to mask-true entries.

    Entries where the mask is false are left bit-identical (they are never
    written, not merely incremented by zero).
    """
    _check_mask(model, mask)
    with torch.no_grad():
        for name, p in model.named_parameters():
            m = mask[name]
            if m.any():
                g = gradients[name]
                p.data[m] = p.data[m] - lr * g[m]
    return model


class MaskedSGD:
    """SGD with momentum that only ever writes mask-true parameter entries.

    The momentum buffer receives masked gradients, so buffer entries outside
    the mask stay exactly zero and the corresponding parameters are never
    touched.
    """

    def __init__(self, model: nn.Module, mask: Mapping[str, torch.Tensor],
                 lr: float, momentum: float = 0.0):
        _check_mask(model, mask)
        self.model = model
        self.mask = {k: v.clone() for k, v in mask.items()}
        self.lr = lr
        self.momentum = momentum
        self._velocity = {name: torch.zeros_like(p)
                          for name, p in model.named_parameters()}

    def step(self, gradients: Mapping[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                m = self.mask[name]
                if not m.any():
                    continue
                v = self._velocity[name]
                v[m] = self.momentum * v[m] + gradients[name][m]
                p.data[m] = p.data[m] - self.lr * v[m]


def zero_params(model: nn.Module, mask: Mapping[str, torch.Tensor]) -> nn.Module:
    """Copy of the model with mask-true entries set to zero.

    The input model is untouched; callers that probe by zeroing restore state
    simply by discarding the copy.
    """
    _check_mask(model, mask)
    clone = copy.deepcopy(model)
    with torch.no_grad():
        for name, p in clone.named_parameters():
            m = mask[name]
            if m.any():
                p.data[m] = 0.0
    return clone
