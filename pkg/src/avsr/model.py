"""Transducer model: layer-normalized bi-LSTM encoder over concatenated
audio/video features with modality switches, a projected unidirectional
LSTM prediction network over grapheme history, a sum-tanh joint, and an
exact parameter accountant."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidLabel, InvalidSwitchState, ShapeError
from .transducer import transducer_loss_torch
from .video_frontend import VideoFrontend, VideoFrontendConfig

LN_EPS = 1e-6
BLANK_SYMBOL = "<blank>"

# Beyond ASCII: common curly quotes and dash seen in user captions, padding
# the default inventory out to exactly 75 symbols.
_EXTRA_SYMBOLS = ("’", "‘", "“", "”", "–")


@dataclass(frozen=True)
class GraphemeInventory:
    """Ordered output symbols; index 0 is always the blank."""

    symbols: Tuple[str, ...]

    def __post_init__(self):
        if self.symbols[0] != BLANK_SYMBOL:
            raise ConfigError("inventory must start with the blank symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError("inventory symbols must be unique")

    @property
    def blank_index(self) -> int:
        return 0

    @property
    def size(self) -> int:
        return len(self.symbols)

    @classmethod
    def full_scale(cls) -> "GraphemeInventory":
        symbols = (
            [BLANK_SYMBOL, " "]
            + list(string.ascii_lowercase)
            + list(string.digits)
            + list(string.punctuation)
            + list(_EXTRA_SYMBOLS)
        )
        inventory = cls(tuple(symbols))
        assert inventory.size == 75
        return inventory

    @classmethod
    def toy(cls, letters: str) -> "GraphemeInventory":
        return cls((BLANK_SYMBOL, " ") + tuple(letters))

    def encode(self, text: str) -> List[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        ids = []
        for ch in text.lower():
            if ch not in index:
                raise InvalidLabel(f"character {ch!r} not in grapheme inventory")
            ids.append(index[ch])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if not (1 <= i < self.size):
                raise InvalidLabel(f"grapheme id {i} out of range")
            out.append(self.symbols[i])
        return "".join(out)


@dataclass(frozen=True)
class ModalitySwitch:
    audio_on: bool = True
    video_on: bool = True

    AUDIO_ONLY = None  # set below
    VIDEO_ONLY = None
    BOTH = None

    def validate(self):
        if not (self.audio_on or self.video_on):
            raise InvalidSwitchState("at least one modality switch must be on")


ModalitySwitch.AUDIO_ONLY = ModalitySwitch(True, False)
ModalitySwitch.VIDEO_ONLY = ModalitySwitch(False, True)
ModalitySwitch.BOTH = ModalitySwitch(True, True)


@dataclass(frozen=True)
class ModelConfig:
    audio_dim: int = 400
    video_dim: int = 512
    encoder_layers: int = 5
    encoder_units: int = 512          # per direction
    decoder_layers: int = 2
    decoder_hidden: int = 2048
    decoder_proj: int = 640
    joint_dim: int = 640
    vocab_size: int = 75
    video: Optional[VideoFrontendConfig] = field(default_factory=VideoFrontendConfig)
    dtype: str = "float32"

    @property
    def input_width(self) -> int:
        return self.audio_dim + self.video_dim

    @property
    def encoder_output_dim(self) -> int:
        return 2 * self.encoder_units

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def full_scale_config() -> ModelConfig:
    return ModelConfig()


def _block_layer_norm(z: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                      blocks: int = 4) -> torch.Tensor:
    b, width = z.shape
    zb = z.view(b, blocks, width // blocks)
    mean = zb.mean(dim=-1, keepdim=True)
    var = zb.var(dim=-1, keepdim=True, unbiased=False)
    normed = ((zb - mean) / torch.sqrt(var + LN_EPS)).view(b, width)
    return normed * gamma + beta


class LnLstmCell(nn.Module):
    """LSTM cell with layer norm on each of the four pre-activation blocks."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight = nn.Parameter(torch.empty(input_size + hidden_size, 4 * hidden_size))
        self.bias = nn.Parameter(torch.empty(4 * hidden_size))
        self.ln_gamma = nn.Parameter(torch.ones(4 * hidden_size))
        self.ln_beta = nn.Parameter(torch.zeros(4 * hidden_size))

    def forward(self, x, state):
        h, c = state
        if x.shape[-1] != self.input_size:
            raise ShapeError(f"cell expects input {self.input_size}, got {x.shape[-1]}")
        z = torch.cat([x, h], dim=-1) @ self.weight + self.bias
        z = _block_layer_norm(z, self.ln_gamma, self.ln_beta)
        i, f, g, o = z.chunk(4, dim=-1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, (h_new, c_new)

    def zero_state(self, batch: int, dtype, device):
        z = torch.zeros(batch, self.hidden_size, dtype=dtype, device=device)
        return z, z.clone()


class LnLstmProjCell(nn.Module):
    """Layer-norm LSTM with an output projection; recurrence uses the
    projected state, so the gate input is input_size + proj_size wide."""

    def __init__(self, input_size: int, hidden_size: int, proj_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.proj_size = proj_size
        self.weight = nn.Parameter(torch.empty(input_size + proj_size, 4 * hidden_size))
        self.bias = nn.Parameter(torch.empty(4 * hidden_size))
        self.ln_gamma = nn.Parameter(torch.ones(4 * hidden_size))
        self.ln_beta = nn.Parameter(torch.zeros(4 * hidden_size))
        self.proj_weight = nn.Parameter(torch.empty(hidden_size, proj_size))
        self.proj_bias = nn.Parameter(torch.empty(proj_size))

    def forward(self, x, state):
        hp, c = state
        z = torch.cat([x, hp], dim=-1) @ self.weight + self.bias
        z = _block_layer_norm(z, self.ln_gamma, self.ln_beta)
        i, f, g, o = z.chunk(4, dim=-1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        hp_new = h_new @ self.proj_weight + self.proj_bias
        return hp_new, (hp_new, c_new)

    def zero_state(self, batch: int, dtype, device):
        return (
            torch.zeros(batch, self.proj_size, dtype=dtype, device=device),
            torch.zeros(batch, self.hidden_size, dtype=dtype, device=device),
        )


class BiLnLstmLayer(nn.Module):
    def __init__(self, input_size: int, units: int):
        super().__init__()
        self.fw = LnLstmCell(input_size, units)
        self.bw = LnLstmCell(input_size, units)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t_len, _ = x.shape
        dtype, device = x.dtype, x.device
        fw_out = []
        state = self.fw.zero_state(b, dtype, device)
        for t in range(t_len):
            h, state = self.fw(x[:, t], state)
            fw_out.append(h)
        bw_out = [None] * t_len
        state = self.bw.zero_state(b, dtype, device)
        for t in range(t_len - 1, -1, -1):
            h, state = self.bw(x[:, t], state)
            bw_out[t] = h
        return torch.stack(
            [torch.cat([f, bk], dim=-1) for f, bk in zip(fw_out, bw_out)], dim=1
        )


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = []
        in_size = config.input_width
        for _ in range(config.encoder_layers):
            layers.append(BiLnLstmLayer(in_size, config.encoder_units))
            in_size = config.encoder_output_dim
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class PredictionNetwork(nn.Module):
    """Recurrent grapheme-history network; the previous label enters layer 0
    as a one-hot, the start of sequence as the all-zero one-hot."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.vocab_size = config.vocab_size
        layers = []
        in_size = config.vocab_size
        for _ in range(config.decoder_layers):
            layers.append(
                LnLstmProjCell(in_size, config.decoder_hidden, config.decoder_proj)
            )
            in_size = config.decoder_proj
        self.layers = nn.ModuleList(layers)

    def initial_state(self, batch: int, dtype, device):
        return [cell.zero_state(batch, dtype, device) for cell in self.layers]

    def step(self, x: torch.Tensor, state):
        new_state = []
        for cell, cell_state in zip(self.layers, state):
            x, updated = cell(x, cell_state)
            new_state.append(updated)
        return x, new_state

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        """labels (B, U) -> outputs (B, U+1, proj); row u is the output after
        consuming label u, row 0 the start-of-sequence output."""
        if labels.ndim != 2:
            raise ShapeError("labels must be (B, U)")
        if labels.numel():
            if labels.min() < 1 or labels.max() >= self.vocab_size:
                raise InvalidLabel("labels must be non-blank inventory ids")
        b, u_len = labels.shape
        p = next(self.parameters())
        state = self.initial_state(b, p.dtype, p.device)
        x = torch.zeros(b, self.vocab_size, dtype=p.dtype, device=p.device)
        outputs = []
        for u in range(u_len + 1):
            out, state = self.step(x, state)
            outputs.append(out)
            if u < u_len:
                x = torch.zeros(b, self.vocab_size, dtype=p.dtype, device=p.device)
                x.scatter_(1, labels[:, u : u + 1], 1.0)
        return torch.stack(outputs, dim=1)


class JointNetwork(nn.Module):
    """logits = W_out . tanh(P_enc enc + P_dec dec) + b_out.

    The two projections are bias-free; the parameter budget only carries a
    bias on the output layer.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.enc_proj = nn.Parameter(
            torch.empty(config.encoder_output_dim, config.joint_dim)
        )
        self.dec_proj = nn.Parameter(torch.empty(config.decoder_proj, config.joint_dim))
        self.out_weight = nn.Parameter(torch.empty(config.joint_dim, config.vocab_size))
        self.out_bias = nn.Parameter(torch.empty(config.vocab_size))

    def lattice_logits(self, enc: torch.Tensor, dec: torch.Tensor) -> torch.Tensor:
        """enc (B, T, E), dec (B, U+1, P) -> logits (B, T, U+1, V)."""
        pe = enc @ self.enc_proj
        pd = dec @ self.dec_proj
        z = torch.tanh(pe.unsqueeze(2) + pd.unsqueeze(1))
        return z @ self.out_weight + self.out_bias

    def single_logits(self, enc_t: torch.Tensor, dec_u: torch.Tensor) -> torch.Tensor:
        z = torch.tanh(enc_t @ self.enc_proj + dec_u @ self.dec_proj)
        return z @ self.out_weight + self.out_bias


class AvsrModel(nn.Module):
    """Full system: optional video frontend, encoder, prediction net, joint."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.video_frontend = VideoFrontend(config.video) if config.video else None
        if config.video and config.video.embedding_dim != config.video_dim:
            raise ConfigError(
                f"video frontend emits {config.video.embedding_dim}, "
                f"model expects {config.video_dim}"
            )
        self.encoder = Encoder(config)
        self.prediction = PredictionNetwork(config)
        self.joint = JointNetwork(config)
        self._init_weights(seed)
        self.to(config.torch_dtype())

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if "gamma" in name or name.endswith("embed_norm.weight"):
                nn.init.ones_(p)
            elif "beta" in name or name.endswith("embed_norm.bias"):
                nn.init.zeros_(p)
            else:
                with torch.no_grad():
                    p.uniform_(-0.05, 0.05, generator=gen)

    @property
    def blank_index(self) -> int:
        return 0

    def apply_switch(self, features: torch.Tensor, switch: ModalitySwitch) -> torch.Tensor:
        switch.validate()
        if features.shape[-1] != self.config.input_width:
            raise ShapeError(
                f"features must be {self.config.input_width} wide, got {features.shape[-1]}"
            )
        if switch.audio_on and switch.video_on:
            return features
        out = features.clone()
        if not switch.audio_on:
            out[..., : self.config.audio_dim] = 0.0
        if not switch.video_on:
            out[..., self.config.audio_dim :] = 0.0
        return out

    def encode(self, features: torch.Tensor, switch: ModalitySwitch = ModalitySwitch.BOTH):
        """features (B, T, input_width) -> (B, T, 2 * units)."""
        if features.shape[1] == 0:
            return features.new_zeros(
                features.shape[0], 0, self.config.encoder_output_dim
            )
        return self.encoder(self.apply_switch(features, switch))

    def lattice_log_probs(
        self,
        features: torch.Tensor,
        labels: torch.Tensor,
        switch: ModalitySwitch = ModalitySwitch.BOTH,
    ) -> torch.Tensor:
        """(B, T, D) features and (B, U) labels -> (B, T, U+1, V) log-softmax."""
        enc = self.encode(features, switch)
        dec = self.prediction(labels)
        logits = self.joint.lattice_logits(enc, dec)
        return torch.log_softmax(logits, dim=-1)

    def batch_loss(
        self,
        features: torch.Tensor,
        labels: torch.Tensor,
        switch: ModalitySwitch = ModalitySwitch.BOTH,
    ) -> torch.Tensor:
        """Mean per-utterance transducer loss over a homogeneous batch."""
        log_probs = self.lattice_log_probs(features, labels, switch)
        losses = [
            transducer_loss_torch(log_probs[b], labels[b].tolist(), self.blank_index)
            for b in range(features.shape[0])
        ]
        return torch.stack(losses).mean()

    def forward_features(
        self,
        audio: Optional[torch.Tensor],
        thumbnails: Optional[torch.Tensor],
        switch: ModalitySwitch = ModalitySwitch.BOTH,
    ) -> torch.Tensor:
        """Assemble the encoder input from raw modalities.

        audio: (B, T, audio_dim) stacked log-mel features or None.
        thumbnails: (B, T, H, W, 3) mouth crops or None; embedded through the
        video frontend only when the video switch is on.
        """
        switch.validate()
        parts = [x for x in (audio, thumbnails) if x is not None]
        if not parts:
            raise InvalidSwitchState("need at least one modality's input")
        b, t_len = parts[0].shape[0], parts[0].shape[1]
        dtype = self.config.torch_dtype()
        device = next(self.parameters()).device
        if audio is not None and switch.audio_on:
            audio_part = audio.to(dtype)
        else:
            audio_part = torch.zeros(b, t_len, self.config.audio_dim, dtype=dtype, device=device)
        if thumbnails is not None and switch.video_on:
            if self.video_frontend is None:
                raise ConfigError("model has no video frontend")
            video_part = self.video_frontend(thumbnails.to(dtype))
        else:
            video_part = torch.zeros(b, t_len, self.config.video_dim, dtype=dtype, device=device)
        t_min = min(audio_part.shape[1], video_part.shape[1])
        return torch.cat([audio_part[:, :t_min], video_part[:, :t_min]], dim=-1)

    def full_loss(
        self,
        audio: Optional[torch.Tensor],
        thumbnails: Optional[torch.Tensor],
        labels: torch.Tensor,
        switch: ModalitySwitch = ModalitySwitch.BOTH,
    ) -> torch.Tensor:
        """End-to-end loss from raw modalities (video frontend included)."""
        features = self.forward_features(audio, thumbnails, switch)
        return self.batch_loss(features, labels, switch)

    # -- step-wise interface used by the decoders --

    def decoder_start(self):
        p = next(self.prediction.parameters())
        state = self.prediction.initial_state(1, p.dtype, p.device)
        x = torch.zeros(1, self.config.vocab_size, dtype=p.dtype, device=p.device)
        out, state = self.prediction.step(x, state)
        return state, out[0]

    def decoder_advance(self, state, label: int):
        if not (1 <= label < self.config.vocab_size):
            raise InvalidLabel(f"label {label} out of range")
        p = next(self.prediction.parameters())
        x = torch.zeros(1, self.config.vocab_size, dtype=p.dtype, device=p.device)
        x[0, label] = 1.0
        out, new_state = self.prediction.step(x, state)
        return new_state, out[0]

    def joint_log_probs_single(self, enc_t: torch.Tensor, dec_out: torch.Tensor) -> np.ndarray:
        logits = self.joint.single_logits(enc_t, dec_out)
        return torch.log_softmax(logits, dim=-1).detach().cpu().numpy().astype(np.float64)


def fuse_features(
    audio: Optional[np.ndarray],
    video: Optional[np.ndarray],
    audio_dim: int,
    video_dim: int,
) -> np.ndarray:
    """Concatenate per-frame audio and video features, zero-filling a missing
    modality and truncating both streams to the shorter length."""
    if audio is None and video is None:
        raise InvalidSwitchState("need at least one modality's features")
    lengths = [x.shape[0] for x in (audio, video) if x is not None]
    t_len = min(lengths)
    out = np.zeros((t_len, audio_dim + video_dim))
    if audio is not None:
        if audio.shape[1] != audio_dim:
            raise ShapeError(f"audio features must be {audio_dim} wide")
        out[:, :audio_dim] = audio[:t_len]
    if video is not None:
        if video.shape[1] != video_dim:
            raise ShapeError(f"video features must be {video_dim} wide")
        out[:, audio_dim:] = video[:t_len]
    return out


def align_video_to_timestamps(
    embeddings: np.ndarray, fps, timestamps: np.ndarray
) -> np.ndarray:
    """Pick, for each audio timestamp, the video frame covering it (nearest
    earlier frame). Used when audio runs at a fixed rate unrelated to fps."""
    idx = np.clip(
        np.floor(timestamps * float(fps)).astype(int), 0, embeddings.shape[0] - 1
    )
    return embeddings[idx]


# -- parameter accounting --


@dataclass(frozen=True)
class ParamRow:
    name: str
    kernel_shape: str
    count: int

    @property
    def display(self) -> str:
        return format_param_count(self.count)


def format_param_count(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    return f"{n / 1e3:.1f}K"


def count_parameters(config: ModelConfig) -> List[ParamRow]:
    """Analytic per-component parameter ledger, ending with a Total row."""
    rows: List[ParamRow] = []
    if config.video is not None:
        prev = config.video.in_channels
        n_blocks = len(config.video.block_channels)
        for i, ch in enumerate(config.video.block_channels):
            count = 27 * prev * ch + 3 * ch      # kernel + bias + GN gamma/beta
            if i == n_blocks - 1:
                count += 2 * config.video.embedding_dim   # embedding layer norm
            rows.append(ParamRow(f"video/block{i}", f"3x3x3x{prev}x{ch}", count))
            prev = ch
    units = config.encoder_units
    for i in range(config.encoder_layers):
        in_w = config.input_width if i == 0 else config.encoder_output_dim
        gate_in = in_w + units
        count = 2 * (gate_in * 4 * units + 3 * 4 * units)
        rows.append(ParamRow(f"encoder/rnn{i}", f"{gate_in}x{units}x4x2", count))
    hidden, proj = config.decoder_hidden, config.decoder_proj
    for i in range(config.decoder_layers):
        in_w = config.vocab_size if i == 0 else proj
        gate_in = in_w + proj
        count = gate_in * 4 * hidden + 3 * 4 * hidden + hidden * proj + proj
        rows.append(
            ParamRow(f"decoder/rnn{i}", f"{gate_in}x{hidden}x4 + {hidden}x{proj}", count)
        )
    enc_out, joint, vocab = config.encoder_output_dim, config.joint_dim, config.vocab_size
    rows.append(ParamRow("rnnt/encoder", f"{enc_out}x{joint}", enc_out * joint))
    rows.append(ParamRow("rnnt/decoder", f"{proj}x{joint}", proj * joint))
    rows.append(ParamRow("rnnt/output", f"{joint}x{vocab}", joint * vocab + vocab))
    rows.append(ParamRow("Total", "", sum(r.count for r in rows)))
    return rows


def parameter_table_from_model(model: AvsrModel) -> List[ParamRow]:
    """Same rows as count_parameters but summed from the live tensors."""

    def numel(module: nn.Module) -> int:
        return sum(p.numel() for p in module.parameters())

    rows: List[ParamRow] = []
    if model.video_frontend is not None:
        blocks = model.video_frontend.blocks
        for i, block in enumerate(blocks):
            count = numel(block)
            if i == len(blocks) - 1:
                count += numel(model.video_frontend.embed_norm)
            rows.append(ParamRow(f"video/block{i}", "", count))
    for i, layer in enumerate(model.encoder.layers):
        rows.append(ParamRow(f"encoder/rnn{i}", "", numel(layer)))
    for i, cell in enumerate(model.prediction.layers):
        rows.append(ParamRow(f"decoder/rnn{i}", "", numel(cell)))
    rows.append(ParamRow("rnnt/encoder", "", model.joint.enc_proj.numel()))
    rows.append(ParamRow("rnnt/decoder", "", model.joint.dec_proj.numel()))
    rows.append(
        ParamRow(
            "rnnt/output", "", model.joint.out_weight.numel() + model.joint.out_bias.numel()
        )
    )
    rows.append(ParamRow("Total", "", sum(r.count for r in rows)))
    return rows


# Published budget for the full-scale configuration, at display precision.
FULL_SCALE_BUDGET: Dict[str, str] = {
    "video/block0": "5.4K",
    "video/block1": "221.6K",
    "video/block2": "885.5K",
    "video/block3": "3.5M",
    "video/block4": "7.1M",
    "encoder/rnn0": "5.8M",
    "encoder/rnn1": "6.3M",
    "encoder/rnn2": "6.3M",
    "encoder/rnn3": "6.3M",
    "encoder/rnn4": "6.3M",
    "decoder/rnn0": "7.2M",
    "decoder/rnn1": "11.8M",
    "rnnt/encoder": "655.4K",
    "rnnt/decoder": "409.6K",
    "rnnt/output": "48.1K",
    "Total": "62.9M",
}
