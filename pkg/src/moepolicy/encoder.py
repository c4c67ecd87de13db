"""Vision-language encoder: patch extraction, frozen featurizer, fusion, conditioning.

An observation image is cut into a 3x3 grid of local patches plus one
area-averaged global patch. A frozen, seeded two-layer projection turns
each patch into a token; the global token cross-attends over the locals
to form a single visual token, which is concatenated with the embedded
instruction and run through a small GQA transformer. The output is a
fixed-length language-conditioned token sequence.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigurationError, InvalidInputError
from .layers import TransformerBlock, init_weight
from .tensor import SHARED, Parameter, Tensor, take_rows

UNKNOWN_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"


def extract_patches(image: np.ndarray) -> tuple:
    """Split an image into nine tiling local patches and one global patch.

    The global patch is the full image area-averaged down to one patch's
    size. Returns (locals, global) with locals shaped (9, ph, pw, 3).
    """
    h, w = image.shape[0], image.shape[1]
    if h % 3 != 0 or w % 3 != 0:
        raise ConfigurationError(f"image dims ({h}x{w}) must be divisible by 3")
    ph, pw = h // 3, w // 3
    locals_ = image.reshape(3, ph, 3, pw, 3).transpose(0, 2, 1, 3, 4).reshape(9, ph, pw, 3)
    # reference + mean deviation keeps block averaging exact on constant blocks
    blocks = image.reshape(ph, 3, pw, 3, 3)
    ref = blocks[:, 0, :, 0, :]
    global_ = ref + (blocks - ref[:, None, :, None, :]).mean(axis=(1, 3))
    return locals_, global_


class FrozenPatchEncoder:
    """Seeded, never-trained nonlinear projection from patch pixels to a token."""

    def __init__(self, patch_shape: tuple, d_token: int, hidden: int, seed: int):
        self.patch_shape = tuple(patch_shape)
        self.d_token = d_token
        d_in = int(np.prod(patch_shape))
        rng = np.random.default_rng(seed)
        self.w1 = Parameter(init_weight(rng, (d_in, hidden)), "stub.w1",
                            SHARED, trainable=False)
        self.b1 = Parameter(rng.normal(0, 0.1, hidden), "stub.b1",
                            SHARED, trainable=False)
        self.w2 = Parameter(init_weight(rng, (hidden, d_token)), "stub.w2",
                            SHARED, trainable=False)
        self.b2 = Parameter(rng.normal(0, 0.1, d_token), "stub.b2",
                            SHARED, trainable=False)

    def encode(self, patches: np.ndarray) -> np.ndarray:
        """(..., ph, pw, 3) -> (..., d_token); pure numpy, never in the graph."""
        lead = patches.shape[:-3]
        if patches.shape[-3:] != self.patch_shape:
            raise InvalidInputError(
                f"patch shape {patches.shape[-3:]} != configured {self.patch_shape}")
        flat = patches.reshape(lead + (-1,)) * 2.0 - 1.0
        h = np.tanh(flat @ self.w1.data + self.b1.data)
        return np.tanh(h @ self.w2.data + self.b2.data)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


class CrossAttentionFusion:
    """Single-query attention: the global token attends over the nine locals."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.wq = Parameter(init_weight(rng, (d, d)), "enc.fuse.wq", SHARED)
        self.wk = Parameter(init_weight(rng, (d, d)), "enc.fuse.wk", SHARED)
        self.wv = Parameter(init_weight(rng, (d, d)), "enc.fuse.wv", SHARED)
        self.wo = Parameter(init_weight(rng, (d, d)), "enc.fuse.wo", SHARED)
        self.grid_embed = Parameter(rng.normal(0, 0.02, (9, d)),
                                    "enc.fuse.grid_embed", SHARED)

    def __call__(self, global_tok: Tensor, local_toks: Tensor) -> Tensor:
        """(B, d) x (B, 9, d) -> (B, d)."""
        if local_toks.shape[-2] != 9:
            raise InvalidInputError(f"expected 9 local tokens, got {local_toks.shape[-2]}")
        locs = local_toks + self.grid_embed
        q = (global_tok @ self.wq).reshape(global_tok.shape[0], 1, self.d)
        k = locs @ self.wk
        v = locs @ self.wv
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d))
        fused = ops.softmax(scores, axis=-1) @ v
        return (fused @ self.wo).reshape(global_tok.shape[0], self.d)

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo, self.grid_embed]


class Tokenizer:
    """Lowercased whitespace tokenizer over a closed vocabulary."""

    def __init__(self, vocab: list):
        self.words = [UNKNOWN_TOKEN, PAD_TOKEN] + sorted(set(vocab))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.unk_id = self.index[UNKNOWN_TOKEN]
        self.pad_id = self.index[PAD_TOKEN]

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, instruction: str, length: int) -> np.ndarray:
        parts = instruction.lower().split()
        if not parts:
            raise InvalidInputError("instruction must not be empty")
        ids = [self.index.get(w, self.unk_id) for w in parts[:length]]
        ids += [self.pad_id] * (length - len(ids))
        return np.array(ids, dtype=np.int64)


class LanguageConditionedEncoder:
    """Image + instruction -> fixed-length conditioned token sequence."""

    def __init__(self, vocab: list, d_token: int, max_words: int,
                 image_size: int, n_heads: int, n_kv_groups: int, n_blocks: int,
                 stub_hidden: int, stub_seed: int, rng: np.random.Generator):
        if image_size % 3 != 0:
            raise ConfigurationError("image size must be divisible by 3")
        self.d_token = d_token
        self.max_words = max_words
        self.seq_len = 1 + max_words          # visual token + padded instruction
        patch = image_size // 3
        self.stub = FrozenPatchEncoder((patch, patch, 3), d_token, stub_hidden, stub_seed)
        self.fusion = CrossAttentionFusion(d_token, rng)
        self.tokenizer = Tokenizer(vocab)
        self.embedding = Parameter(rng.normal(0, 0.2, (len(self.tokenizer), d_token)),
                                   "enc.lang.embedding", SHARED)
        self.blocks = [TransformerBlock(d_token, n_heads, n_kv_groups,
                                        f"enc.block{i}", rng, SHARED)
                       for i in range(n_blocks)]
        self.final_gain = Parameter(np.ones(d_token), "enc.final_norm", SHARED)
        self._positions = np.arange(self.seq_len, dtype=np.float64)

    # -- observation featurization (frozen path) ------------------------------

    def encode_observation(self, image: np.ndarray) -> np.ndarray:
        """Image -> (10, d_token) frozen patch tokens: locals 0..8, global last."""
        locals_, global_ = extract_patches(image)
        return self.stub.encode(np.concatenate([locals_, global_[None]], axis=0))

    # -- trainable path --------------------------------------------------------

    def forward_tokens(self, patch_tokens, instruction_ids: np.ndarray) -> Tensor:
        """(B, 10, d) frozen tokens + (B, max_words) ids -> (B, seq_len, d)."""
        if not isinstance(patch_tokens, Tensor):
            patch_tokens = Tensor(patch_tokens)
        vision = self.fusion(patch_tokens[:, 9, :], patch_tokens[:, 0:9, :])
        lang = take_rows(self.embedding, instruction_ids)
        x = ops.concatenate([vision.reshape(vision.shape[0], 1, self.d_token), lang],
                            axis=1)
        for block in self.blocks:
            x = block(x, self._positions)
        return ops.rms_norm(x, self.final_gain)

    def forward(self, image: np.ndarray, instruction: str) -> Tensor:
        """Single-observation convenience wrapper: -> (seq_len, d_token)."""
        tokens = self.encode_observation(image)
        ids = self.tokenizer.encode(instruction, self.max_words)
        return self.forward_tokens(tokens[None], ids[None])[0]

    def parameters(self, include_frozen: bool = True) -> list[Parameter]:
        out = list(self.stub.parameters()) if include_frozen else []
        out += self.fusion.parameters()
        out.append(self.embedding)
        for b in self.blocks:
            out += b.parameters()
        out.append(self.final_gain)
        return out
