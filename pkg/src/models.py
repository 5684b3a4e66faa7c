"""
Classifier modalities
Single-image ResNet18, fully convolutional R(2+1)D-18, and ResNet18 with
LSTM / MLP / Transformer temporal necks, plus freeze policies and
parameter accounting
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
from logzero import logger

FAMILIES = ("image_resnet18", "r2plus1d", "resnet18_lstm", "resnet18_mlp", "resnet18_transformer")
SEQUENCE_FAMILIES = FAMILIES[1:]
NECK_FAMILIES = {"resnet18_lstm": "lstm", "resnet18_mlp": "mlp", "resnet18_transformer": "transformer"}
NECK_KINDS = ("lstm", "mlp", "transformer")

NUM_CLASSES = 2
NUM_TIMESTEPS = 8
BASE_WIDTH = 64


class ModelBuildError(ValueError):
    pass


class InputShapeError(ValueError):
    pass


@dataclass
class NeckSpec:
    kind: str
    hidden_size: int = 64
    num_layers: int = 2
    attention_heads: int = 8
    feedforward_dim: int = 3584
    dropout: float = 0.1
    positional_encoding: bool = True


@dataclass
class ModelSpec:
    family: str
    neck: Optional[NeckSpec] = None
    num_classes: int = NUM_CLASSES
    num_timesteps: int = NUM_TIMESTEPS
    base_width: int = BASE_WIDTH
    pretrained_weights: Optional[str] = None

    @property
    def feature_dim(self) -> int:
        return 8 * self.base_width

    @property
    def is_sequence(self) -> bool:
        return self.family in SEQUENCE_FAMILIES

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if data.get("neck") is not None:
            data["neck"] = NeckSpec(**data["neck"])
        return cls(**data)


@dataclass
class FreezePolicy:
    # 0 = transfer learning; stages are counted from the output end
    unfrozen_backbone_blocks: int = 0
    neck_and_head_trainable: bool = True

    def __post_init__(self):
        if self.unfrozen_backbone_blocks < 0:
            raise ModelBuildError("unfrozen_backbone_blocks must be >= 0")


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    breakdown: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def initialize_weights(module):
    """Fan-based init for convolutions, unit batchnorm, small-normal linear layers"""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.constant_(m.bias, 0)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.constant_(m.weight, 1)
            nn.init.constant_(m.bias, 0)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0, 0.01)
            nn.init.constant_(m.bias, 0)


# 2D backbone (ResNet18, torchvision key layout)

class BasicBlock(nn.Module):
    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        if stride != 1 or inplanes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(inplanes, planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(planes))
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet18Backbone(nn.Module):
    """B x 3 x H x W -> B x F"""

    def __init__(self, base_width=BASE_WIDTH):
        super().__init__()
        w = base_width
        self.conv1 = nn.Conv2d(3, w, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = nn.Sequential(BasicBlock(w, w), BasicBlock(w, w))
        self.layer2 = nn.Sequential(BasicBlock(w, 2 * w, 2), BasicBlock(2 * w, 2 * w))
        self.layer3 = nn.Sequential(BasicBlock(2 * w, 4 * w, 2), BasicBlock(4 * w, 4 * w))
        self.layer4 = nn.Sequential(BasicBlock(4 * w, 8 * w, 2), BasicBlock(8 * w, 8 * w))
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.out_features = 8 * w

    def stages(self) -> List[List[nn.Module]]:
        return [[self.conv1, self.bn1], [self.layer1], [self.layer2], [self.layer3], [self.layer4]]

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(self.avgpool(x), 1)


# (2+1)D backbone (R(2+1)D-18, torchvision key layout)

def midplanes_for(inplanes, planes):
    """Intermediate width keeping a (2+1)D pair near the 3x3x3 conv's parameter count"""
    return (inplanes * planes * 3 * 3 * 3) // (inplanes * 3 * 3 + 3 * planes)


class Conv2Plus1D(nn.Sequential):
    """t x d x d conv factorized into (1 x d x d) spatial then (t x 1 x 1) temporal"""

    def __init__(self, in_planes, out_planes, midplanes, stride=1):
        super().__init__(
            nn.Conv3d(in_planes, midplanes, kernel_size=(1, 3, 3), stride=(1, stride, stride),
                      padding=(0, 1, 1), bias=False),
            nn.BatchNorm3d(midplanes),
            nn.ReLU(inplace=True),
            nn.Conv3d(midplanes, out_planes, kernel_size=(3, 1, 1), stride=(stride, 1, 1),
                      padding=(1, 0, 0), bias=False),
        )


class VideoBasicBlock(nn.Module):
    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        midplanes = midplanes_for(inplanes, planes)
        self.conv1 = nn.Sequential(Conv2Plus1D(inplanes, planes, midplanes, stride),
                                   nn.BatchNorm3d(planes), nn.ReLU(inplace=True))
        self.conv2 = nn.Sequential(Conv2Plus1D(planes, planes, midplanes), nn.BatchNorm3d(planes))
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or inplanes != planes:
            self.downsample = nn.Sequential(
                nn.Conv3d(inplanes, planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm3d(planes))
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        return self.relu(self.conv2(self.conv1(x)) + identity)


class R2Plus1DBackbone(nn.Module):
    """B x 3 x T x H x W -> B x F"""

    def __init__(self, base_width=BASE_WIDTH):
        super().__init__()
        w = base_width
        stem_mid = max(1, 45 * w // 64)
        self.stem = nn.Sequential(
            nn.Conv3d(3, stem_mid, kernel_size=(1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3), bias=False),
            nn.BatchNorm3d(stem_mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(stem_mid, w, kernel_size=(3, 1, 1), stride=(1, 1, 1), padding=(1, 0, 0), bias=False),
            nn.BatchNorm3d(w),
            nn.ReLU(inplace=True),
        )
        self.layer1 = nn.Sequential(VideoBasicBlock(w, w), VideoBasicBlock(w, w))
        self.layer2 = nn.Sequential(VideoBasicBlock(w, 2 * w, 2), VideoBasicBlock(2 * w, 2 * w))
        self.layer3 = nn.Sequential(VideoBasicBlock(2 * w, 4 * w, 2), VideoBasicBlock(4 * w, 4 * w))
        self.layer4 = nn.Sequential(VideoBasicBlock(4 * w, 8 * w, 2), VideoBasicBlock(8 * w, 8 * w))
        self.avgpool = nn.AdaptiveAvgPool3d(1)
        self.out_features = 8 * w

    def stages(self) -> List[List[nn.Module]]:
        return [[self.stem], [self.layer1], [self.layer2], [self.layer3], [self.layer4]]

    def forward(self, x):
        x = self.layer4(self.layer3(self.layer2(self.layer1(self.stem(x)))))
        return torch.flatten(self.avgpool(x), 1)


# Temporal necks: B x T x F -> B x F'

class LSTMNeck(nn.Module):
    def __init__(self, in_features, num_timesteps, spec: NeckSpec):
        super().__init__()
        self.in_features = in_features
        self.num_timesteps = num_timesteps
        self.lstm = nn.LSTM(in_features, spec.hidden_size, num_layers=spec.num_layers, batch_first=True)
        self.out_features = spec.hidden_size

    def forward(self, x):
        _, (h_n, _) = self.lstm(x)
        return h_n[-1]


class MLPNeck(nn.Module):
    def __init__(self, in_features, num_timesteps, spec: NeckSpec):
        super().__init__()
        self.in_features = in_features
        self.num_timesteps = num_timesteps
        layers = [nn.Flatten(), nn.Linear(num_timesteps * in_features, spec.hidden_size), nn.ReLU(inplace=True)]
        for _ in range(spec.num_layers - 1):
            layers += [nn.Linear(spec.hidden_size, spec.hidden_size), nn.ReLU(inplace=True)]
        self.mlp = nn.Sequential(*layers)
        self.out_features = spec.hidden_size

    def forward(self, x):
        return self.mlp(x)


class TransformerNeck(nn.Module):
    def __init__(self, in_features, num_timesteps, spec: NeckSpec):
        super().__init__()
        self.in_features = in_features
        self.num_timesteps = num_timesteps
        if spec.positional_encoding:
            self.pos_embedding = nn.Parameter(torch.zeros(1, num_timesteps, in_features))
            nn.init.normal_(self.pos_embedding, std=0.02)
        else:
            self.pos_embedding = None
        layer = nn.TransformerEncoderLayer(d_model=in_features, nhead=spec.attention_heads,
                                           dim_feedforward=spec.feedforward_dim, dropout=spec.dropout,
                                           batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=spec.num_layers, enable_nested_tensor=False)
        self.out_features = in_features

    def forward(self, x):
        if self.pos_embedding is not None:
            x = x + self.pos_embedding
        return self.encoder(x).mean(dim=1)


NECKS = {"lstm": LSTMNeck, "mlp": MLPNeck, "transformer": TransformerNeck}


def build_neck(spec: NeckSpec, in_features, num_timesteps) -> nn.Module:
    if spec.kind not in NECKS:
        raise ModelBuildError(f"unknown neck kind {spec.kind!r} (expected one of {', '.join(NECK_KINDS)})")
    if spec.kind == "transformer" and in_features % spec.attention_heads:
        raise ModelBuildError(f"feature dim {in_features} not divisible by {spec.attention_heads} heads")
    return NECKS[spec.kind](in_features, num_timesteps, spec)


def neck_forward(neck: nn.Module, features: torch.Tensor) -> torch.Tensor:
    """Fuse B x T x F backbone features into B x F'"""
    if features.dim() != 3:
        raise InputShapeError(f"neck expects B x T x F features, got {tuple(features.shape)}")
    _, t, f = features.shape
    if t != neck.num_timesteps or f != neck.in_features:
        raise InputShapeError(
            f"neck expects T={neck.num_timesteps}, F={neck.in_features}; got T={t}, F={f}")
    return neck(features)


class SequenceClassifier(nn.Module):
    """Backbone (+ neck) + linear head for one of the five families"""

    def __init__(self, spec: ModelSpec, backbone, neck, head, policy: FreezePolicy):
        super().__init__()
        self.spec = spec
        self.policy = policy
        self.backbone = backbone
        self.neck = neck
        self.head = head

    @property
    def family(self):
        return self.spec.family

    def check_input(self, x):
        expected = 5 if self.spec.is_sequence else 4
        if x.dim() != expected or x.shape[1] != 3:
            layout = "B x C x T x H x W" if self.spec.is_sequence else "B x C x H x W"
            raise InputShapeError(f"{self.family} expects {layout} input, got {tuple(x.shape)}")
        if self.neck is not None and x.shape[2] != self.spec.num_timesteps:
            raise InputShapeError(f"{self.family} expects T={self.spec.num_timesteps}, got T={x.shape[2]}")

    def forward(self, x):
        self.check_input(x)
        if self.neck is None:
            # image_resnet18 and r2plus1d consume the input as-is
            return self.head(self.backbone(x))

        b, c, t, h, w = x.shape
        frames = x.transpose(1, 2).reshape(b * t, c, h, w)
        features = self.backbone(frames).view(b, t, -1)
        return self.head(neck_forward(self.neck, features))

    def frozen_modules(self) -> List[nn.Module]:
        stages = self.backbone.stages()
        n_frozen = max(len(stages) - self.policy.unfrozen_backbone_blocks, 0)
        return [m for stage in stages[:n_frozen] for m in stage]

    def train(self, mode=True):
        super().train(mode)
        # Frozen stages keep their batchnorm statistics
        for module in self.frozen_modules():
            module.eval()
        return self


def apply_freeze_policy(model: SequenceClassifier, policy: FreezePolicy):
    """Freeze backbone stages from the input end, leaving the last unfrozen_backbone_blocks trainable"""
    model.policy = policy
    for param in model.backbone.parameters():
        param.requires_grad = True
    for module in model.frozen_modules():
        for param in module.parameters():
            param.requires_grad = False

    for part in (model.neck, model.head):
        if part is not None:
            for param in part.parameters():
                param.requires_grad = policy.neck_and_head_trainable
    model.train(model.training)


def default_neck_spec(family) -> Optional[NeckSpec]:
    kind = NECK_FAMILIES.get(family)
    if kind is None:
        return None
    # A single 4096 -> 64 layer reproduces the MLP neck's 262K parameters
    return NeckSpec(kind=kind, num_layers=1 if kind == "mlp" else 2)


def build_model(spec: ModelSpec, policy: Optional[FreezePolicy] = None) -> SequenceClassifier:
    """Construct, initialize, optionally load pretrained weights, and apply the freeze policy"""
    if spec.family not in FAMILIES:
        raise ModelBuildError(f"unknown family {spec.family!r} (valid: {', '.join(FAMILIES)})")
    policy = policy or FreezePolicy()

    if spec.family == "r2plus1d":
        backbone = R2Plus1DBackbone(spec.base_width)
    else:
        backbone = ResNet18Backbone(spec.base_width)
    initialize_weights(backbone)

    neck = None
    head_in = backbone.out_features
    if spec.family in NECK_FAMILIES:
        if spec.neck is None:
            spec.neck = default_neck_spec(spec.family)
        if spec.neck.kind != NECK_FAMILIES[spec.family]:
            raise ModelBuildError(f"{spec.family} needs a {NECK_FAMILIES[spec.family]} neck, got {spec.neck.kind}")
        neck = build_neck(spec.neck, backbone.out_features, spec.num_timesteps)
        head_in = neck.out_features
    elif spec.neck is not None:
        raise ModelBuildError(f"{spec.family} takes no neck")

    head = nn.Linear(head_in, spec.num_classes)
    initialize_weights(head)

    model = SequenceClassifier(spec, backbone, neck, head, policy)
    if spec.pretrained_weights:
        load_pretrained(model, spec.pretrained_weights)
    apply_freeze_policy(model, policy)
    return model


def load_pretrained(model: SequenceClassifier, path):
    """Load torchvision-layout backbone weights; classifier keys are ignored"""
    state = torch.load(path, map_location="cpu")
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]

    own = model.backbone.state_dict()
    loaded = {}
    for key, tensor in state.items():
        key = key[len("backbone."):] if key.startswith("backbone.") else key
        if key.startswith("fc."):
            continue
        if key not in own:
            continue
        if own[key].shape != tensor.shape:
            raise ModelBuildError(
                f"pretrained weight shape mismatch for {key}: {tuple(tensor.shape)} vs {tuple(own[key].shape)}")
        loaded[key] = tensor

    missing = sorted(set(own) - set(loaded))
    if missing:
        logger.warning(f"Pretrained weights {path} lack {len(missing)} backbone keys, e.g. {missing[:3]}")
    model.backbone.load_state_dict(loaded, strict=False)
    logger.info(f"Loaded {len(loaded)} pretrained backbone tensors from {path}")


def weights_payload(model: SequenceClassifier) -> Dict:
    """Checkpoint layout: {'model_spec': dict, 'freeze': dict, 'state_dict': backbone./neck./head. keys}"""
    return {"model_spec": model.spec.to_dict(), "freeze": asdict(model.policy), "state_dict": model.state_dict()}


def model_from_payload(payload) -> SequenceClassifier:
    spec = ModelSpec.from_dict(payload["model_spec"])
    spec.pretrained_weights = None
    model = build_model(spec, FreezePolicy(**payload["freeze"]))
    model.load_state_dict(payload["state_dict"])
    return model


def forward(model: SequenceClassifier, batch) -> torch.Tensor:
    """Class scores B x O for a SampledClipBatch (or a raw pixel tensor)"""
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    return model(pixels)


def _count(parameters):
    total = trainable = 0
    for p in parameters:
        total += p.numel()
        if p.requires_grad:
            trainable += p.numel()
    return total, trainable


def count_params(model: SequenceClassifier) -> ParamReport:
    """Exact total / trainable parameter counts with a backbone / neck / head breakdown"""
    breakdown = {}
    for name in ("backbone", "neck", "head"):
        part = getattr(model, name)
        total, trainable = _count(part.parameters()) if part is not None else (0, 0)
        breakdown[name] = {"total": total, "trainable": trainable}

    total, trainable = _count(model.parameters())
    return ParamReport(total_params=total, trainable_params=trainable, breakdown=breakdown)
