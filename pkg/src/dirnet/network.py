"""The regressor presets and the fixed+moving -> warped pipeline."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensorcore as tc
from .lossmetrics import ncc_batch, ncc_loss
from .resampler import warp_batch
from .tensorcore import DownsampleKind, ModelParams, ShapeError, Tensor
from .transformer import ControlGrid, DisplacementField, SplineOrder, dvf_batch


class ConfigError(ValueError):
    pass


class Preset(enum.Enum):
    MNIST = "mnist"
    BASELINE = "baseline"
    A1_MAXPOOL = "a1"
    A2_STRIDED = "a2"
    B1_QUADRATIC = "b1"
    C1_WIDE = "c1"


@dataclass(frozen=True)
class NetConfig:
    preset: Preset = Preset.MNIST
    kernels_per_layer: int = 16
    num_downsamplings: int = 2
    spline_order: SplineOrder = SplineOrder.CUBIC
    downsample_kind: DownsampleKind = DownsampleKind.AVERAGE_POOL
    extra_c1_convs: bool = False
    # He-style uniform init scale for hidden kernels; the output layer starts at zero
    init_gain: float = 2.0

    def __post_init__(self):
        if self.kernels_per_layer < 1:
            raise ConfigError("kernels_per_layer must be at least 1")
        if not 0 <= self.num_downsamplings <= 4:
            raise ConfigError("num_downsamplings must be between 0 and 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preset"] = self.preset.value
        d["spline_order"] = self.spline_order.value
        d["downsample_kind"] = self.downsample_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["preset"] = Preset(d["preset"])
        d["spline_order"] = SplineOrder(d["spline_order"])
        d["downsample_kind"] = DownsampleKind(d["downsample_kind"])
        return cls(**d)


def preset_config(name, **overrides) -> NetConfig:
    try:
        preset = name if isinstance(name, Preset) else Preset(name)
    except ValueError:
        raise ConfigError(f"unknown preset {name!r}; choose from {[p.value for p in Preset]}") from None
    base = {
        Preset.MNIST: NetConfig(Preset.MNIST, num_downsamplings=2),
        Preset.BASELINE: NetConfig(Preset.BASELINE, num_downsamplings=4),
        Preset.A1_MAXPOOL: NetConfig(Preset.A1_MAXPOOL, num_downsamplings=4,
                                     downsample_kind=DownsampleKind.MAX_POOL),
        Preset.A2_STRIDED: NetConfig(Preset.A2_STRIDED, num_downsamplings=4,
                                     downsample_kind=DownsampleKind.STRIDED_CONV),
        Preset.B1_QUADRATIC: NetConfig(Preset.B1_QUADRATIC, num_downsamplings=4,
                                       spline_order=SplineOrder.QUADRATIC),
        Preset.C1_WIDE: NetConfig(Preset.C1_WIDE, num_downsamplings=4, extra_c1_convs=True),
    }[preset]
    return replace(base, **overrides)


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv3 | down | conv1 | out
    cin: int
    cout: int


def layer_plan(cfg: NetConfig) -> list[Layer]:
    """Four 3x3 conv blocks interleaved with the scheduled downsamplings, then three 1x1 layers.

    Downsampling layers follow the first ``num_downsamplings`` conv blocks. The
    C1 variant adds a 3x3 block directly before and after the last downsampling.
    """
    k = cfg.kernels_per_layer
    plan: list[Layer] = []
    cin = 2
    nd = cfg.num_downsamplings
    idx = 0

    def conv(tag=""):
        nonlocal cin, idx
        plan.append(Layer(f"conv{idx}{tag}", "conv3", cin, k))
        cin = k
        idx += 1

    for block in range(4):
        conv()
        if block < nd:
            last = block == nd - 1
            if last and cfg.extra_c1_convs:
                conv("_c1pre")
            plan.append(Layer(f"down{block}", "down", k, k))
            if last and cfg.extra_c1_convs:
                conv("_c1post")
    plan.append(Layer("fc0", "conv1", k, k))
    plan.append(Layer("fc1", "conv1", k, k))
    plan.append(Layer("out", "out", k, 2))
    return plan


def build(cfg: NetConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()

    def kernel(cout, cin, ks):
        bound = np.sqrt(3.0 * cfg.init_gain / (cin * ks * ks))
        return rng.uniform(-bound, bound, size=(cout, cin, ks, ks))

    def bn(prefix, c):
        params.add(f"{prefix}.bn_scale", np.ones(c))
        params.add(f"{prefix}.bn_shift", np.zeros(c))
        params.add(f"{prefix}.bn_mean", np.zeros(c), trainable=False)
        params.add(f"{prefix}.bn_var", np.ones(c), trainable=False)

    for layer in layer_plan(cfg):
        if layer.kind == "conv3":
            params.add(f"{layer.name}.kernel", kernel(layer.cout, layer.cin, 3))
            bn(layer.name, layer.cout)
        elif layer.kind == "down":
            if cfg.downsample_kind is DownsampleKind.STRIDED_CONV:
                params.add(f"{layer.name}.kernel", kernel(layer.cout, layer.cin, 3))
                bn(layer.name, layer.cout)
        elif layer.kind == "conv1":
            params.add(f"{layer.name}.kernel", kernel(layer.cout, layer.cin, 1))
            bn(layer.name, layer.cout)
        else:
            params.add(f"{layer.name}.kernel", np.zeros((layer.cout, layer.cin, 1, 1)))
            params.add(f"{layer.name}.bias", np.zeros(layer.cout))
    return params


def _bn_elu(params, prefix, x, train):
    x = tc.batch_norm(x, params[f"{prefix}.bn_scale"], params[f"{prefix}.bn_shift"],
                      params[f"{prefix}.bn_mean"], params[f"{prefix}.bn_var"], train)
    return tc.elu(x)


def regressor_forward(params: ModelParams, cfg: NetConfig, x: Tensor, train: bool) -> Tensor:
    """[N,2,H,W] input pair stack -> [N,2,gh,gw] control displacements in pixels."""
    for layer in layer_plan(cfg):
        if layer.kind == "conv3":
            x = _bn_elu(params, layer.name, tc.conv2d(x, params[f"{layer.name}.kernel"]), train)
        elif layer.kind == "down":
            if cfg.downsample_kind is DownsampleKind.STRIDED_CONV:
                x = tc.downsample2x(x, cfg.downsample_kind, params[f"{layer.name}.kernel"])
                x = _bn_elu(params, layer.name, x, train)
            else:
                x = tc.downsample2x(x, cfg.downsample_kind)
        elif layer.kind == "conv1":
            x = _bn_elu(params, layer.name, tc.conv1x1(x, params[f"{layer.name}.kernel"]), train)
        else:
            x = tc.conv1x1(x, params[f"{layer.name}.kernel"], params[f"{layer.name}.bias"])
    return x


def _stack_pair(fixed, moving) -> tuple[np.ndarray, np.ndarray]:
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.ndim == 2:
        fixed, moving = fixed[None], moving[None]
    if fixed.shape != moving.shape or fixed.ndim != 3:
        raise ShapeError(f"fixed {fixed.shape} and moving {moving.shape} must match")
    return fixed, moving


def _check_size(cfg: NetConfig, h: int, w: int) -> None:
    need = 2 ** cfg.num_downsamplings
    if h < need or w < need:
        raise ConfigError(f"images of {h}x{w} are too small for {cfg.num_downsamplings} downsamplings")


@dataclass
class PipelineOutput:
    phi: Tensor
    dvf: Tensor
    warped: Tensor
    loss: Tensor


def pipeline(params: ModelParams, cfg: NetConfig, fixed: np.ndarray, moving: np.ndarray,
             train: bool) -> PipelineOutput:
    """Batched forward: regress -> B-spline field -> warp -> mean -NCC."""
    _, h, w = fixed.shape
    _check_size(cfg, h, w)
    x = Tensor(np.stack([fixed, moving], axis=1))
    phi = regressor_forward(params, cfg, x, train)
    dvf = dvf_batch(phi, h, w, cfg.spline_order)
    warped = warp_batch(Tensor(moving), dvf)
    return PipelineOutput(phi, dvf, warped, ncc_loss(fixed, warped))


def regress(params: ModelParams, cfg: NetConfig, fixed, moving, train: bool = False) -> ControlGrid:
    f, m = _stack_pair(fixed, moving)
    _check_size(cfg, *f.shape[1:])
    phi = regressor_forward(params, cfg, Tensor(np.stack([f, m], axis=1)), train)
    return ControlGrid.for_image(phi.data[0], *f.shape[1:])


@dataclass
class RegistrationResult:
    warped: np.ndarray
    dvf: DisplacementField
    control: ControlGrid
    loss: float


def register_pair(params: ModelParams, cfg: NetConfig, fixed, moving) -> RegistrationResult:
    """One-pass inference-mode registration of a single pair."""
    f, m = _stack_pair(fixed, moving)
    if f.shape[0] != 1:
        raise ShapeError("register_pair takes a single pair")
    out = pipeline(params, cfg, f, m, train=False)
    h, w = f.shape[1:]
    return RegistrationResult(out.warped.data[0], DisplacementField(out.dvf.data[0]),
                              ControlGrid.for_image(out.phi.data[0], h, w), float(out.loss.data))


def register_batch(params: ModelParams, cfg: NetConfig, fixed: np.ndarray,
                   moving: np.ndarray) -> list[RegistrationResult]:
    """Inference-mode registration of many pairs; results match :func:`register_pair` per pair."""
    f, m = _stack_pair(fixed, moving)
    out = pipeline(params, cfg, f, m, train=False)
    h, w = f.shape[1:]
    losses = -ncc_batch(f, out.warped.data)[0]
    return [RegistrationResult(out.warped.data[i], DisplacementField(out.dvf.data[i]),
                               ControlGrid.for_image(out.phi.data[i], h, w), float(losses[i]))
            for i in range(f.shape[0])]
