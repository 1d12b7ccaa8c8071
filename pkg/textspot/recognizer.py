"""
Text recognizer over the converted ``28x28`` RoI features.

``TLSAMEncoder`` mixes fine-grained window attention with coarse attention to
pooled summary tokens; ``SAMDecoder`` emits one character per step by attending
over every spatial token.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import window_partition, window_reverse
from .conversion import sine_position_encoding
from .errors import ConfigurationError, ShapeError
from .models import RecognizerConfig

_logger = logging.getLogger(__name__)

PAD = 0
EOS = 1
UNK = 2
NUM_SPECIALS = 3


class Charset:
    """Symbol table with PAD, EOS and UNK reserved at indices 0, 1, 2."""

    def __init__(self, symbols: str):
        if len(set(symbols)) != len(symbols):
            duplicates = sorted({ch for ch in symbols if symbols.count(ch) > 1})
            raise ConfigurationError(
                f"charset symbols must be unique, repeated: {''.join(duplicates)}",
                config_key="recognizer.charset",
                config_value=symbols,
            )
        self.symbols = symbols
        self._index = {ch: i + NUM_SPECIALS for i, ch in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols) + NUM_SPECIALS

    @property
    def num_classes(self) -> int:
        return len(self)

    def index(self, ch: str) -> int:
        if ch in self._index:
            return self._index[ch]
        return self._index.get(ch.lower(), UNK)

    def encode(self, text: str, max_length: int) -> torch.Tensor:
        """Indices of ``text`` then EOS, padded with PAD to ``max_length``."""
        if len(text) > max_length - 1:
            _logger.warning(
                "transcription longer than max_length - 1; truncating",
                extra={"text": text, "max_length": max_length},
            )
            text = text[: max_length - 1]
        ids = [self.index(ch) for ch in text] + [EOS]
        ids += [PAD] * (max_length - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def decode(self, indices: Sequence[int]) -> str:
        """Characters up to the first EOS; specials are dropped."""
        chars: List[str] = []
        for i in indices:
            i = int(i)
            if i == EOS:
                break
            if i >= NUM_SPECIALS and i - NUM_SPECIALS < len(self.symbols):
                chars.append(self.symbols[i - NUM_SPECIALS])
        return "".join(chars)


@dataclass
class SequencePrediction:
    logits: torch.Tensor  # (n, T, num_classes)
    attention: torch.Tensor  # (n, T, H, W)
    strings: Optional[List[str]] = None

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.softmax(-1)


class TLSAMBlock(nn.Module):
    """Each token attends to its local window plus the pooled summaries of the whole map."""

    def __init__(self, dim: int, num_heads: int, window: int, pool: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.window = window
        self.pool = pool
        self.norm1 = nn.LayerNorm(dim)
        self.norm_coarse = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def zero_init_residual(self) -> None:
        for layer in (self.attn.out_proj, self.mlp[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, C, H, W = x.shape
        if H % self.window or W % self.window or H % self.pool or W % self.pool:
            raise ShapeError("map size must be divisible by window and pool", component="tlsam",
                             expected=(self.window, self.pool), actual=(H, W))
        coarse = F.avg_pool2d(x, self.pool).flatten(2).transpose(1, 2)  # (n, G, C)
        coarse = self.norm_coarse(coarse)

        tokens = x.permute(0, 2, 3, 1)  # (n, H, W, C)
        fine = window_partition(self.norm1(tokens), self.window)  # (n*nW, w*w, C)
        num_windows = fine.shape[0] // n
        coarse = coarse.repeat_interleave(num_windows, dim=0)
        kv = torch.cat([fine, coarse], dim=1)
        out, _ = self.attn(fine, kv, kv, need_weights=False)
        tokens = tokens + window_reverse(out, self.window, H, W)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.permute(0, 3, 1, 2).contiguous()


class TLSAMEncoder(nn.Module):
    def __init__(self, dim: int, config: RecognizerConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TLSAMBlock(dim, config.tlsam_heads, config.tlsam_window, config.tlsam_pool)
            for _ in range(config.tlsam_depth)
        )

    def zero_init_residual(self) -> None:
        for block in self.blocks:
            block.zero_init_residual()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def tlsam_encode(r3: torch.Tensor, encoder: TLSAMEncoder) -> torch.Tensor:
    return encoder(r3)


class SAMDecoder(nn.Module):
    """Autoregressive spatial-attention decoder with a GRU state."""

    def __init__(self, dim: int, num_classes: int, max_length: int, map_size: int):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.max_length = max_length
        self.bos = num_classes
        self.embed = nn.Embedding(num_classes + 1, dim)
        self.step_embed = nn.Embedding(max_length, dim)
        self.init_state = nn.Linear(dim, dim)
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.rnn = nn.GRUCell(2 * dim, dim)
        self.classifier = nn.Linear(2 * dim, num_classes)
        self.register_buffer(
            "pos_embed", sine_position_encoding(map_size, map_size, dim), persistent=False
        )

    def prepare(self, enc: torch.Tensor):
        """Flatten the encoded map into keys/values and the initial state."""
        n, C, H, W = enc.shape
        values = enc.flatten(2).transpose(1, 2)  # (n, HW, C)
        pos = self.pos_embed if self.pos_embed.shape[0] == H * W else sine_position_encoding(H, W, C).to(enc)
        keys = self.key(values + pos.to(values.dtype))
        state = torch.tanh(self.init_state(values.mean(1)))
        return keys, values, state

    def step(self, keys: torch.Tensor, values: torch.Tensor, prev: torch.Tensor, t: int, state: torch.Tensor):
        """One decoding step; returns ``(logits, attention, new_state)``."""
        prev = torch.where((prev < 0) | (prev > self.bos), torch.full_like(prev, UNK), prev)
        emb = self.embed(prev)
        step = torch.full_like(prev, t)
        q = self.query(state + emb + self.step_embed(step))
        scores = torch.einsum("nc,nkc->nk", q, keys) / self.dim ** 0.5
        attn = scores.softmax(-1)
        context = torch.einsum("nk,nkc->nc", attn, values)
        state = self.rnn(torch.cat([emb, context], dim=-1), state)
        logits = self.classifier(torch.cat([state, context], dim=-1))
        return logits, attn, state

    def forward(self, enc: torch.Tensor, targets: Optional[torch.Tensor] = None) -> SequencePrediction:
        n, _, H, W = enc.shape
        keys, values, state = self.prepare(enc)
        prev = torch.full((n,), self.bos, dtype=torch.long, device=enc.device)
        all_logits, all_attn = [], []
        for t in range(self.max_length):
            logits, attn, state = self.step(keys, values, prev, t, state)
            all_logits.append(logits)
            all_attn.append(attn.view(n, H, W))
            prev = targets[:, t] if targets is not None else logits.argmax(-1)
        logits = torch.stack(all_logits, dim=1) if all_logits else enc.new_zeros((n, 0, self.num_classes))
        attention = torch.stack(all_attn, dim=1) if all_attn else enc.new_zeros((n, 0, H, W))
        return SequencePrediction(logits=logits, attention=attention)


def sam_decode_step(
    enc: torch.Tensor, prev_symbol: torch.Tensor, t: int, state: Optional[torch.Tensor], decoder: SAMDecoder
):
    keys, values, init = decoder.prepare(enc)
    return decoder.step(keys, values, prev_symbol, t, init if state is None else state)


class Recognizer(nn.Module):
    """TLSAM encoder plus SAM decoder; greedy decoding fills ``SequencePrediction.strings``."""

    def __init__(self, dim: int, config: RecognizerConfig):
        super().__init__()
        self.config = config
        self.charset = Charset(config.charset)
        self.encoder = TLSAMEncoder(dim, config)
        self.decoder = SAMDecoder(dim, self.charset.num_classes, config.max_length, config.roi_size)

    def forward(self, r3: torch.Tensor, targets: Optional[torch.Tensor] = None) -> SequencePrediction:
        return self.recognize(r3, targets)

    def recognize(self, r3: torch.Tensor, targets: Optional[torch.Tensor] = None) -> SequencePrediction:
        """Feeds the ground-truth prefix when ``targets`` is given, greedy otherwise."""
        enc = self.encoder(r3)
        pred = self.decoder(enc, targets)
        if targets is None:
            limit = self.config.max_length - 1
            pred.strings = [self.charset.decode(row[:limit]) for row in pred.logits.argmax(-1).tolist()]
        return pred
