"""ShadingNet: shared encoder, three attention-gated decoders, fusion and refinement."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import crcmod.predefined
import numpy as np

from .autograd import DTYPE, Tensor
from .errors import CheckpointError
from .nn import (RunningStats, batchnorm2d, bilinear_upsample2x, concat_channels, conv2d,
                 eca_gate, leaky_relu, relu)
from .optim import Parameter, he_init

BRANCHES = ("unified", "ambient", "shadow")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256, 256)
    res_blocks: int = 4
    decoder_channels: int = 128
    eca_kernel: int = 5
    fusion_channels: int = 24
    refine_channels: int = 32
    dilations: tuple[int, ...] = (2, 2, 4, 8, 8, 1)

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.encoder_channels) - 1)


@dataclass
class ShadingNetParams:
    config: ArchConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    stats: dict[str, RunningStats] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None


@dataclass
class ForwardOutputs:
    rho_u: Tensor
    rho_amb: Tensor
    rho_shad: Tensor
    s_u: Tensor
    ambient: Tensor
    shadow_mag: Tensor
    rho_final: Tensor

    FIELDS = ("rho_u", "rho_amb", "rho_shad", "s_u", "ambient", "shadow_mag", "rho_final")

    def items(self):
        return [(k, getattr(self, k)) for k in self.FIELDS]


# --- construction ------------------------------------------------------------------------

class _Builder:
    def __init__(self, net: ShadingNetParams, seed: int):
        self.net = net
        self.seeds = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF)

    def _add(self, name: str, tensor: Tensor) -> None:
        if name in self.net.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.net.params[name] = Parameter(name, tensor)

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        (child,) = self.seeds.spawn(1)
        self._add(f"{name}.weight", he_init((cout, cin, k, k), fan_in, child))
        self._add(f"{name}.bias", Tensor(np.zeros(cout, DTYPE)))

    def bn(self, name: str, c: int) -> None:
        self._add(f"{name}.gamma", Tensor(np.ones(c, DTYPE)))
        self._add(f"{name}.beta", Tensor(np.zeros(c, DTYPE)))
        self.net.stats[name] = RunningStats.fresh(c)

    def eca(self, name: str, k: int) -> None:
        (child,) = self.seeds.spawn(1)
        self._add(f"{name}.weight", he_init((k,), k, child))

    def res_block(self, name: str, c: int) -> None:
        for i in (1, 2):
            self.bn(f"{name}.bn{i}", c)
            self.conv(f"{name}.conv{i}", c, c, 3)


def build(seed: int = 0, config: ArchConfig = ArchConfig()) -> ShadingNetParams:
    """He-initialized parameters; deterministic in ``seed``."""
    net = ShadingNetParams(config)
    b = _Builder(net, seed)
    ch = config.encoder_channels
    b.conv("encoder.init.conv", config.in_channels, ch[0], 3)
    for s in range(1, len(ch)):
        b.conv(f"encoder.stage{s}.down.conv", ch[s - 1], ch[s], 3)
        for r in range(config.res_blocks):
            b.res_block(f"encoder.stage{s}.block{r}", ch[s])
    for br in BRANCHES:
        b.eca(f"eca.{br}", config.eca_kernel)
    skips = ch[:-1][::-1]  # deepest skip first
    for br in BRANCHES:
        cin = ch[-1]
        for j, skip_c in enumerate(skips, start=1):
            b.conv(f"decoder.{br}.up{j}.conv", cin + skip_c, config.decoder_channels, 3)
            b.bn(f"decoder.{br}.up{j}.bn", config.decoder_channels)
            cin = config.decoder_channels
        b.conv(f"decoder.{br}.head_rho.conv", cin, 3, 3)
        b.conv(f"decoder.{br}.head_comp.conv", cin, 1, 3)
    b.conv("fusion.conv", 9, config.fusion_channels, 1)
    rc = config.refine_channels
    b.conv("refine.entry.conv", config.fusion_channels + 3, rc, 3)
    for i in range(len(config.dilations)):
        b.res_block(f"refine.block{i}", rc)
    b.conv("refine.exit.conv", rc, 3, 3)
    return net


# --- forward -----------------------------------------------------------------------------

def _conv(net: ShadingNetParams, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    w = net[f"{name}.weight"]
    pad = dilation * (w.shape[2] // 2)
    return conv2d(x, w, net[f"{name}.bias"], stride=stride, padding=pad, dilation=dilation)


def _bn(net: ShadingNetParams, name: str, x: Tensor, mode: str) -> Tensor:
    return batchnorm2d(x, net[f"{name}.gamma"], net[f"{name}.beta"], net.stats[name], mode=mode)


def _res_block(net, name: str, x: Tensor, mode: str, dilation: int = 1) -> Tensor:
    h = _conv(net, f"{name}.conv1", relu(_bn(net, f"{name}.bn1", x, mode)), dilation=dilation)
    h = _conv(net, f"{name}.conv2", relu(_bn(net, f"{name}.bn2", h, mode)), dilation=dilation)
    return x + h


def encode(net: ShadingNetParams, image: Tensor, mode: str = "train") -> tuple[Tensor, list[Tensor]]:
    """Bottleneck features and the skip maps, finest resolution first."""
    cfg = net.config
    n, c, h, w = image.shape
    f = cfg.downsample
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels}-channel input, got {c}")
    if h % f or w % f:
        ph, pw = (-h) % f, (-w) % f
        raise ValueError(f"input {h}x{w} must be divisible by {f}; pad by {ph} rows and {pw} columns")
    x = _conv(net, "encoder.init.conv", image)
    skips = []
    for s in range(1, len(cfg.encoder_channels)):
        skips.append(x)
        x = _conv(net, f"encoder.stage{s}.down.conv", x, stride=2)
        for r in range(cfg.res_blocks):
            x = _res_block(net, f"encoder.stage{s}.block{r}", x, mode)
    return x, skips


def decode(net: ShadingNetParams, branch: str, features: Tensor, skips: list[Tensor],
           mode: str = "train") -> tuple[Tensor, Tensor]:
    x = features
    for j, skip in enumerate(reversed(skips), start=1):
        x = concat_channels([bilinear_upsample2x(x), skip])
        x = _conv(net, f"decoder.{branch}.up{j}.conv", x)
        x = leaky_relu(_bn(net, f"decoder.{branch}.up{j}.bn", x, mode), LEAKY_SLOPE)
    rho = relu(_conv(net, f"decoder.{branch}.head_rho.conv", x))
    comp = relu(_conv(net, f"decoder.{branch}.head_comp.conv", x))
    return rho, comp


def forward(net: ShadingNetParams, image: Tensor, mode: str = "train",
            gate_override: dict[str, Tensor] | None = None) -> ForwardOutputs:
    """Full decomposition. ``gate_override`` replaces a branch's gated bottleneck (ablation probes)."""
    bottleneck, skips = encode(net, image, mode)
    heads = {}
    for br in BRANCHES:
        if gate_override and br in gate_override:
            gated = gate_override[br]
        else:
            gated = eca_gate(bottleneck, net[f"eca.{br}.weight"])
        heads[br] = decode(net, br, gated, skips, mode)
    (rho_u, s_u), (rho_amb, amb), (rho_shad, shad) = (heads[b] for b in BRANCHES)
    fused = _conv(net, "fusion.conv", concat_channels([rho_u, rho_amb, rho_shad]))
    x = _conv(net, "refine.entry.conv", concat_channels([fused, s_u, amb, shad]))
    for i, d in enumerate(net.config.dilations):
        x = _res_block(net, f"refine.block{i}", x, mode, dilation=d)
    rho_final = relu(_conv(net, "refine.exit.conv", x))
    return ForwardOutputs(rho_u, rho_amb, rho_shad, s_u, amb, shad, rho_final)


# --- checkpoints -------------------------------------------------------------------------

CKPT_MAGIC = b"SHDN"
CKPT_VERSION = 1
_crc64 = crcmod.predefined.mkCrcFun("crc-64-we")


def _entries(net: ShadingNetParams):
    for name, p in net.params.items():
        yield name, p.data
        yield f"{name}.adam_m", p.adam_m
        yield f"{name}.adam_v", p.adam_v
        yield f"{name}.adam_step", np.asarray(p.step_count, dtype=DTYPE)
    for name, st in net.stats.items():
        yield f"{name}.running_mean", st.mean
        yield f"{name}.running_var", st.var


def checkpoint_bytes(net: ShadingNetParams) -> bytes:
    entries = list(_entries(net))
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _crc64(body))


def save_checkpoint(net: ShadingNetParams, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net))
    tmp.replace(path)


def _parse(blob: bytes, where: str) -> dict[str, np.ndarray]:
    if len(blob) < 20:
        raise CheckpointError(f"{where}: truncated checkpoint ({len(blob)} bytes)")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{where}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{where}: unsupported version {version}")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _crc64(body) != stored:
        raise CheckpointError(f"{where}: CRC mismatch (corrupted or truncated file)")
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            rank = body[pos]
            dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"{where}: tensor {name} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(DTYPE)
            pos += 4 * size
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{where}: malformed tensor table ({e})") from e
    if pos != len(body):
        raise CheckpointError(f"{where}: {len(body) - pos} trailing bytes after tensor table")
    return out


def load_checkpoint(path, config: ArchConfig = ArchConfig()) -> ShadingNetParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(blob, config, where=str(path))


def checkpoint_from_bytes(blob: bytes, config: ArchConfig = ArchConfig(),
                          where: str = "<bytes>") -> ShadingNetParams:
    tensors = _parse(blob, where)
    net = build(0, config)
    expected = dict(_entries(net))
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise CheckpointError(f"{where}: unknown tensor name(s) {unknown[:5]}")
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"{where}: missing tensor(s) {missing[:5]}")
    diffs = [f"{k}: file {tensors[k].shape} vs model {v.shape}"
             for k, v in expected.items() if tensors[k].shape != v.shape]
    if diffs:
        raise CheckpointError(f"{where}: shape mismatch: " + "; ".join(diffs[:5]))
    for name, p in net.params.items():
        p.tensor.data = tensors[name].copy()
        p.adam_m = tensors[f"{name}.adam_m"].copy()
        p.adam_v = tensors[f"{name}.adam_v"].copy()
        p.step_count = int(tensors[f"{name}.adam_step"])
    for name, st in net.stats.items():
        st.mean[:] = tensors[f"{name}.running_mean"]
        st.var[:] = tensors[f"{name}.running_var"]
    return net
