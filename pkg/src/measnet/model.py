"""Full network assembly and checkpointing.

Pipeline (single resolution): encoder conv -> prompt generation -> per-pixel
expert routing -> transformer block -> frequency split -> per-band global
expert ensembles -> concat -> decoder (conv, transformer, conv) -> residual
add with the input. Component toggles (use_tspg / use_mese / use_fd /
use_mee) disable pieces structurally while keeping the parameter set, and
therefore the init RNG draws, identical, so ablations start from the same
weights.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import apply_expert
from .fdmee import (FrequencyBranch, FrequencyPair, LowpassFilterGen,
                    split_frequencies)
from .mese import BALANCE_VARIANTS, PixelExpertEnsemble, RoutingMap
from .nn import (Conv2d, LayerNorm, Linear, MultiHeadAttention,
                 bchw_to_tokens, tokens_to_bchw)
from .tspg import PromptGenerator

MAGIC = b"MEAS"
VERSION = 1
_DTYPE_CODES = {"f4": np.float32, "f8": np.float64}


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32          # C
    n_experts: int = 6          # N
    k_active: int = 2           # K
    filter_size: int = 3        # low-pass kernel k
    heads: int = 4
    stages: int = 1
    balance_variant: str = "sigma"
    use_tspg: bool = True
    use_mese: bool = True
    use_fd: bool = True
    use_mee: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k_active <= self.n_experts:
            raise ValueError(
                f"K={self.k_active} out of range for N={self.n_experts}")
        if self.channels % self.heads != 0:
            raise ValueError(
                f"C={self.channels} not divisible by heads={self.heads}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.filter_size % 2 != 1:
            raise ValueError(f"filter size must be odd, got {self.filter_size}")
        if self.balance_variant not in BALANCE_VARIANTS:
            raise ValueError(f"balance_variant must be one of {BALANCE_VARIANTS}")


class TransformerBlock:
    """Pre-LN self-attention + residual, then pre-LN MLP + residual."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.ln1 = LayerNorm(channels, dtype)
        self.attn = MultiHeadAttention(channels, heads, rng, dtype)
        self.ln2 = LayerNorm(channels, dtype)
        self.fc1 = Linear(channels, 2 * channels, rng, dtype)
        self.fc2 = Linear(2 * channels, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        t = bchw_to_tokens(x)                      # [T, C]
        t = t + self.attn(self.ln1(t))
        t = t + self.fc2(ad.gelu(self.fc1(self.ln2(t))))
        return tokens_to_bchw(t, h, w)

    def named_params(self, prefix: str):
        yield from self.ln1.named_params(prefix + ".ln1")
        yield from self.attn.named_params(prefix + ".attn")
        yield from self.ln2.named_params(prefix + ".ln2")
        yield from self.fc1.named_params(prefix + ".fc1")
        yield from self.fc2.named_params(prefix + ".fc2")


class _Stage:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, last: bool,
                 dtype):
        c, n, k = cfg.channels, cfg.n_experts, cfg.k_active
        self.mese = PixelExpertEnsemble(c, n, k, rng, dtype=dtype)
        self.transformer = TransformerBlock(c, cfg.heads, rng, dtype)
        self.filter_gen = LowpassFilterGen(c, cfg.filter_size, rng, dtype)
        self.low = FrequencyBranch(c, n, k, rng, "low", cfg.filter_size,
                                   dtype=dtype)
        self.high = FrequencyBranch(c, n, k, rng, "high", cfg.filter_size,
                                    dtype=dtype)
        self.merge = None if last else Conv2d(2 * c, c, 1, rng, dtype)

    def named_params(self, sp: str):
        yield from self.mese.named_params(sp + "mese.p_e", sp + "experts.pixel")
        yield from self.transformer.named_params(sp + "transformer")
        yield from self.filter_gen.named_params(sp + "fd.filter")
        yield from self.low.named_params(sp + "fd.low", sp + "experts.low")
        yield from self.high.named_params(sp + "fd.high", sp + "experts.high")
        if self.merge is not None:
            yield from self.merge.named_params(sp + "merge")

    def named_buffers(self, sp: str):
        yield from self.filter_gen.named_buffers(sp + "fd.filter")


@dataclass
class ForwardAux:
    query: Tensor | None = None        # [1,C] task query
    routings: list = field(default_factory=list)     # RoutingMap per stage
    taps: list = field(default_factory=list)         # [C,k,k] per stage
    freq: list = field(default_factory=list)         # FrequencyPair per stage
    scores_low: list = field(default_factory=list)   # [N] per stage
    scores_high: list = field(default_factory=list)


class Model:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        c = config.channels
        self.encoder = Conv2d(3, c, 3, rng, dtype)
        self.tspg = PromptGenerator(c, rng, dtype)
        self.stages = [_Stage(config, rng, last=(s == config.stages - 1),
                              dtype=dtype)
                       for s in range(config.stages)]
        self.dec_conv1 = Conv2d(2 * c, c, 3, rng, dtype)
        self.dec_transformer = TransformerBlock(c, config.heads, rng, dtype)
        self.dec_conv2 = Conv2d(c, 3, 3, rng, dtype)
        # the network predicts a residual on top of the input; a small head
        # scale starts it near the identity mapping so early training refines
        # the input instead of first unlearning a random correction field
        self.dec_conv2.w.data *= 0.05

    # -- registry ----------------------------------------------------------

    def named_params(self):
        yield from self.encoder.named_params("encoder")
        yield from self.tspg.named_params("tspg")
        for s, stage in enumerate(self.stages):
            yield from stage.named_params("" if s == 0 else f"stage{s}.")
        yield from self.dec_conv1.named_params("decoder.conv1")
        yield from self.dec_transformer.named_params("decoder.transformer")
        yield from self.dec_conv2.named_params("decoder.conv2")

    def named_buffers(self):
        for s, stage in enumerate(self.stages):
            yield from stage.named_buffers("" if s == 0 else f"stage{s}.")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    # -- forward -------------------------------------------------------------

    def forward(self, degraded: Tensor, training: bool = False):
        cfg = self.config
        if degraded.ndim != 4 or degraded.shape[0] != 1 or degraded.shape[1] != 3:
            raise ValueError(f"expected [1,3,H,W] input, got {degraded.shape}")
        _, _, h, w = degraded.shape
        if h < cfg.filter_size or w < cfg.filter_size:
            raise ValueError(f"input {h}x{w} smaller than filter size "
                             f"{cfg.filter_size}")
        aux = ForwardAux()
        f = self.encoder(degraded)
        if cfg.use_tspg:
            p_bcast, aux.query = self.tspg(degraded, h, w)
        else:
            p_bcast = Tensor(np.zeros((1, cfg.channels, h, w), dtype=self.dtype))
        for stage in self.stages:
            if cfg.use_mese:
                f, routing = stage.mese(f, p_bcast)
                aux.routings.append(routing)
            f = stage.transformer(f)
            if cfg.use_fd:
                taps = stage.filter_gen(f, training)
                pair = split_frequencies(f, taps)
                aux.taps.append(taps)
            else:
                pair = FrequencyPair(
                    low=f, high=Tensor(np.zeros(f.shape, dtype=self.dtype)))
            aux.freq.append(pair)
            if cfg.use_mee:
                low_out, s_low = stage.low(pair.low)
                high_out, s_high = stage.high(pair.high)
                aux.scores_low.append(s_low)
                aux.scores_high.append(s_high)
            else:
                low_out = _single_expert_branch(stage.low, pair.low)
                high_out = _single_expert_branch(stage.high, pair.high)
            cat = ad.concat((low_out, high_out), axis=1)
            if stage.merge is not None:
                f = stage.merge(cat)
        res = self.dec_conv2(self.dec_transformer(self.dec_conv1(cat)))
        restored = degraded + res
        if not training:
            restored = ad.clamp01(restored)
        return restored, aux


def _single_expert_branch(branch: FrequencyBranch, f: Tensor) -> Tensor:
    """Ablation path: fixed expert 0 at weight 1 instead of the ensemble."""
    from .fdmee import interact
    _, f_d = branch.scorer(f)
    f_p = branch.pconv(branch.dconv(branch.ln(f)))
    f_pd = interact(f_p, f_d)
    _, _, h, w = f_pd.shape
    tok = apply_expert(branch.bank, 0, bchw_to_tokens(f_pd))
    return tokens_to_bchw(tok, h, w)


# -- checkpoint I/O ----------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict          # name -> ndarray (params + buffers)
    opt_m: dict            # Adam first moments, may be empty
    opt_v: dict            # Adam second moments, may be empty


def _state_entries(model: Model, opt_state=None):
    entries = [(name, p.data) for name, p in model.named_params()]
    entries += [(name, buf) for name, buf in model.named_buffers()]
    if opt_state is not None:
        entries += [("opt.m." + n, a) for n, a in opt_state["m"].items()]
        entries += [("opt.v." + n, a) for n, a in opt_state["v"].items()]
    return entries


def save_checkpoint(path, model: Model, step: int = 0, opt_state=None) -> None:
    entries = _state_entries(model, opt_state)
    directory = []
    offset = 0
    for name, arr in entries:
        code = arr.dtype.str.lstrip("<>|=")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        directory.append({"name": name, "dtype": code,
                          "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"config": dataclasses.asdict(model.config), "step": step,
              "tensors": directory}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype).astype(
                arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = raw[4]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 5)
    if 9 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    payload = raw[9 + hlen:]
    tensors, opt_m, opt_v = {}, {}, {}
    for ent in header["tensors"]:
        dtype = np.dtype(_DTYPE_CODES[ent["dtype"]]).newbyteorder("<")
        shape = tuple(ent["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        chunk = payload[ent["offset"]:ent["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at {ent['name']}")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(
            _DTYPE_CODES[ent["dtype"]])
        name = ent["name"]
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(config=header["config"], step=int(header["step"]),
                      tensors=tensors, opt_m=opt_m, opt_v=opt_v)


def load_state(model: Model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into the model; name sets must match."""
    want = dict(model.named_params())
    buffers = dict(model.named_buffers())
    have = set(ckpt.tensors)
    expected = set(want) | set(buffers)
    missing, unexpected = sorted(expected - have), sorted(have - expected)
    if missing or unexpected:
        raise CheckpointError(
            f"state mismatch; missing={missing} unexpected={unexpected}")
    for name, p in want.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointError(
                f"{name}: shape {arr.shape} != model {p.shape}")
        p.data[:] = arr.astype(p.dtype)
    for name, buf in buffers.items():
        buf[:] = ckpt.tensors[name].astype(buf.dtype)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Model:
    model = Model(ModelConfig(**ckpt.config), dtype)
    load_state(model, ckpt)
    return model
