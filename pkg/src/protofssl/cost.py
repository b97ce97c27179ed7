"""Analytical per-client, per-round computation and communication costs.

``F`` is the forward cost of one sample in FLOPs (2 x multiply-accumulates,
skip-connection additions ignored), ``theta_bytes`` the model size and
``proto_bytes`` the size of one prototype, both at 4 bytes per real.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

BYTES_PER_REAL = 4

METHODS = ("mixmatch_fedavg", "fixmatch_fedavg_or_fedrgd", "fedmatch", "protofssl")
METHOD_LABELS = {
    "mixmatch_fedavg": "MixMatch-FedAvg",
    "fixmatch_fedavg_or_fedrgd": "FedRGD (or FixMatch-FedAvg)",
    "fedmatch": "FedMatch",
    "protofssl": "ProtoFSSL",
}


@dataclass(frozen=True)
class Conv:
    name: str
    kernel: int
    c_in: int
    c_out: int
    stride: int = 1


@dataclass(frozen=True)
class Pool:
    name: str
    kernel: int
    stride: int


@dataclass(frozen=True)
class Dense:
    name: str
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple = ()

    def spatial_trace(self, input_hw: int) -> list[int]:
        """Spatial extent after each layer ('same' padding for convolutions)."""
        hw, out = input_hw, []
        for layer in self.layers:
            if isinstance(layer, Conv):
                hw = -(-hw // layer.stride)
            elif isinstance(layer, Pool):
                if hw < layer.kernel or (hw - layer.kernel) % layer.stride:
                    raise ValueError(f"{layer.name}: extent {hw} incompatible with "
                                     f"kernel {layer.kernel} / stride {layer.stride}")
                hw = (hw - layer.kernel) // layer.stride + 1
            out.append(hw)
        return out


_RESNET_BODY = (
    Conv("Conv1", 3, 3, 64),
    Conv("Conv2", 3, 64, 128),
    Pool("MaxPool1", 2, 2),
    Conv("Conv3", 3, 128, 128),
    Conv("Conv4", 3, 128, 128),
    Conv("Conv5", 3, 128, 256),
    Pool("MaxPool2", 2, 2),
    Conv("Conv6", 3, 256, 512),
    Pool("MaxPool3", 2, 2),
    Conv("Conv7", 3, 512, 512),
    Conv("Conv8", 3, 512, 512),
    Pool("MaxPool4", 4, 4),
)

RESNET8 = ArchSpec("ResNet8", _RESNET_BODY)
RESNET9 = ArchSpec("ResNet9", _RESNET_BODY + (Dense("Softmax", 512, 10),))


def layer_params(layer) -> int:
    if isinstance(layer, Conv):
        return layer.kernel * layer.kernel * layer.c_in * layer.c_out
    if isinstance(layer, Dense):
        return layer.n_in * layer.n_out
    return 0


def param_count(arch: ArchSpec) -> int:
    return sum(layer_params(layer) for layer in arch.layers)


def forward_flops(arch: ArchSpec, input_hw: int = 32) -> int:
    trace = arch.spatial_trace(input_hw)
    macs = 0
    for layer, hw in zip(arch.layers, trace):
        if isinstance(layer, Conv):
            macs += layer.kernel ** 2 * layer.c_in * layer.c_out * hw * hw
        elif isinstance(layer, Dense):
            macs += layer.n_in * layer.n_out
    return 2 * macs


def mlp_arch(dims) -> ArchSpec:
    """ArchSpec for a dense stack with the given widths (biases not counted)."""
    return ArchSpec("mlp", tuple(Dense(f"dense{i}", a, b) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))))


@dataclass(frozen=True)
class CostParams:
    F: float
    theta_bytes: float
    proto_bytes: float
    n_labeled: int
    n_unlabeled: int
    epochs: int = 1
    augmentations: int = 2
    helpers: int = 2
    n_classes: int = 10
    helper_interval: int = 1

    def __post_init__(self):
        for name in ("F", "theta_bytes", "proto_bytes", "n_labeled", "n_unlabeled",
                     "augmentations", "helpers", "n_classes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 1 or self.helper_interval < 1:
            raise ValueError("epochs and helper_interval must be >= 1")

    def with_(self, **kw) -> "CostParams":
        return replace(self, **kw)


def comp_cost(method: str, p: CostParams) -> float:
    """FLOPs one client spends in one round."""
    dl, du, e = p.n_labeled, p.n_unlabeled, p.epochs
    if method == "mixmatch_fedavg":
        return p.F * (dl + p.augmentations * du) * e
    if method == "fixmatch_fedavg_or_fedrgd":
        return p.F * (dl + 2 * du) * e
    if method == "fedmatch":
        return p.F * (dl + (2 + p.helpers) * du) * e
    if method == "protofssl":
        return (p.F * (dl + du) * e
                + p.proto_bytes * p.helpers * p.n_classes * du * e
                + p.F * dl)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def comm_cost(method: str, p: CostParams) -> float:
    """Bytes one client exchanges with the server in one round."""
    if method in ("mixmatch_fedavg", "fixmatch_fedavg_or_fedrgd"):
        return 2 * p.theta_bytes
    if method == "fedmatch":
        return (4 + 2 * p.helpers / p.helper_interval) * p.theta_bytes
    if method == "protofssl":
        return 2 * p.theta_bytes + p.proto_bytes * (1 + p.helpers) * p.n_classes
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def table2_params() -> CostParams:
    """ResNet9 on CIFAR-10 with 50 labeled / 490 unlabeled samples per client."""
    return CostParams(
        F=forward_flops(RESNET9, 32),
        theta_bytes=BYTES_PER_REAL * param_count(RESNET9),
        proto_bytes=BYTES_PER_REAL * 512,
        n_labeled=50,
        n_unlabeled=490,
        epochs=1,
        augmentations=2,
        helpers=2,
        n_classes=10,
        helper_interval=10,
    )


def cost_table(p: CostParams) -> list[dict]:
    return [{"method": m, "label": METHOD_LABELS[m],
             "gflop": comp_cost(m, p) / 1e9, "mb": comm_cost(m, p) / 1e6} for m in METHODS]


def format_cost_table(p: CostParams) -> str:
    lines = [f"{'Method':<30}{'Comp. (GFLOP)':>16}{'Comm. (MB)':>14}"]
    for row in cost_table(p):
        lines.append(f"{row['label']:<30}{row['gflop']:>16.1f}{row['mb']:>14.1f}")
    return "\n".join(lines)
