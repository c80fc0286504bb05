"""Small causal transformer built on the autodiff core.

Decoder-only, pre-norm (RMS), learned absolute positions, GELU MLP, no
biases, weight-tied output head (logits read the token embedding, as in the
original GPT designs).  Everything runs in float64 so gradient checks
against finite differences are meaningful.

The MLP down-projection rows double as the unit of selection for subspace
masks: neuron j of layer l owns the d_model-length row ``down[j]``, and its
parameter coordinates are contiguous in the global coordinate space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor
from .utils import rng_for

PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 256
    max_seq_len: int = 64
    init_seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads",
                     "mlp_hidden", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        d, v, m = self.d_model, self.vocab_size, self.mlp_hidden
        per_block = 4 * d * d + 2 * d + d * m + m * d
        return v * d + self.max_seq_len * d + self.n_layers * per_block + d

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("vocab_size", "d_model", "n_layers", "n_heads", "mlp_hidden",
                 "max_seq_len", "init_seed", "init_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(eq=False)
class TokenSequence:
    """Token ids with a prompt/response boundary.

    ``tokens[:prompt_len]`` is the prompt, the rest is the response.  The
    response carries the supervision signal; prompts are never scored.
    """
    tokens: np.ndarray
    prompt_len: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be 1-d")
        if not (0 < self.prompt_len <= len(self.tokens)):
            raise ValueError(
                f"prompt_len {self.prompt_len} outside (0, {len(self.tokens)}]")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def response(self) -> np.ndarray:
        return self.tokens[self.prompt_len:]


# ---------------------------------------------------------------------------
# parameters and the value-vector index


def init_params(config: ModelConfig) -> ParameterStore:
    """Fresh parameters; layout (and hence coordinate ids) is fixed by config."""
    rng = rng_for(config.init_seed, "init")
    d, v, m = config.d_model, config.vocab_size, config.mlp_hidden
    std = config.init_std
    # residual-path projections get downscaled init, standard for deep stacks
    std_res = std / np.sqrt(max(config.n_layers, 1))

    store = ParameterStore()
    store.add("tok_embed", rng.normal(0.0, std, (v, d)))
    store.add("pos_embed", rng.normal(0.0, std, (config.max_seq_len, d)))
    for l in range(config.n_layers):
        store.add(f"block.{l}.attn.wq", rng.normal(0.0, std, (d, d)))
        store.add(f"block.{l}.attn.wk", rng.normal(0.0, std, (d, d)))
        store.add(f"block.{l}.attn.wv", rng.normal(0.0, std, (d, d)))
        store.add(f"block.{l}.attn.wo", rng.normal(0.0, std_res, (d, d)))
        store.add(f"block.{l}.norm1.gain", np.ones(d))
        store.add(f"block.{l}.norm2.gain", np.ones(d))
        store.add(f"block.{l}.mlp.up", rng.normal(0.0, std, (d, m)))
        store.add(f"block.{l}.mlp.down", rng.normal(0.0, std_res, (m, d)))
    store.add("final_norm.gain", np.ones(d))
    return store


@dataclass(frozen=True)
class ValueVectorIndex:
    """Maps neuron ids to rows of weight matrices used as write vectors.

    Default source is the MLP down-projection: neuron j of layer l writes
    ``down[j]`` into the residual stream, so that row is the natural unit a
    probe direction can be compared against.  An attention variant (rows of
    wv) exists for ablations.
    """
    entries: tuple  # ((param_name, row_index), ...) indexed by neuron id
    vector_dim: int
    source: str

    @property
    def count(self) -> int:
        return len(self.entries)

    def locator(self, neuron_id: int) -> tuple[str, int]:
        return self.entries[neuron_id]

    def vector(self, store: ParameterStore, neuron_id: int) -> np.ndarray:
        name, row = self.entries[neuron_id]
        return store[name].data[row]

    def matrix(self, store: ParameterStore) -> np.ndarray:
        """All value vectors stacked, row n = vector of neuron n (a copy)."""
        self.validate_against(store)
        return np.stack([store[name].data[row] for name, row in self.entries])

    def coordinate_ids(self, store: ParameterStore, neuron_ids) -> np.ndarray:
        """Global coordinate ids owned by the given neurons, ascending."""
        self.validate_against(store)
        out = []
        for nid in neuron_ids:
            name, row = self.entries[int(nid)]
            base = store.offset(name) + row * self.vector_dim
            out.append(np.arange(base, base + self.vector_dim, dtype=np.int64))
        if not out:
            return np.array([], dtype=np.int64)
        return np.sort(np.concatenate(out))

    def validate_against(self, store: ParameterStore) -> None:
        for name, row in (self.entries[0], self.entries[-1]):
            if name not in store:
                raise ValueError(f"stale value-vector index: {name!r} not in store")
            shape = store[name].data.shape
            if len(shape) != 2 or shape[1] != self.vector_dim or row >= shape[0]:
                raise ValueError(
                    f"stale value-vector index: {name!r} has shape {shape}, "
                    f"expected rows of length {self.vector_dim}")


def mlp_value_vector_index(config: ModelConfig) -> ValueVectorIndex:
    entries = tuple(
        (f"block.{l}.mlp.down", r)
        for l in range(config.n_layers) for r in range(config.mlp_hidden))
    return ValueVectorIndex(entries=entries, vector_dim=config.d_model, source="mlp_down")


def attention_value_vector_index(config: ModelConfig) -> ValueVectorIndex:
    entries = tuple(
        (f"block.{l}.attn.wv", r)
        for l in range(config.n_layers) for r in range(config.d_model))
    return ValueVectorIndex(entries=entries, vector_dim=config.d_model, source="attn_wv")


def value_vector_index(config: ModelConfig, source: str = "mlp_down") -> ValueVectorIndex:
    if source == "mlp_down":
        return mlp_value_vector_index(config)
    if source == "attn_wv":
        return attention_value_vector_index(config)
    raise ValueError(f"unknown value-vector source {source!r}")


# ---------------------------------------------------------------------------
# forward pass


def _forward(store: ParameterStore, config: ModelConfig,
             tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    """Batched forward: tokens [B, T] -> (logits [B, T, V], residual [B, T, d]).

    The returned residual is the post-final-block stream, before the final
    norm; probe representations and logits both come from this single pass.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, time], got shape {tokens.shape}")
    B, S = tokens.shape
    if S > config.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id outside vocabulary")

    H, hd = config.n_heads, config.head_dim
    inv_sqrt_hd = 1.0 / np.sqrt(hd)

    x = T.add(T.embedding_lookup(store["tok_embed"], tokens),
              T.embedding_lookup(store["pos_embed"], np.arange(S)))
    for l in range(config.n_layers):
        blk = f"block.{l}"
        a = T.multiply(T.rms_normalize(x), store[f"{blk}.norm1.gain"])
        q = _split_heads(T.matmul(a, store[f"{blk}.attn.wq"]), B, S, H, hd)
        k = _split_heads(T.matmul(a, store[f"{blk}.attn.wk"]), B, S, H, hd)
        v = _split_heads(T.matmul(a, store[f"{blk}.attn.wv"]), B, S, H, hd)
        scores = T.scale(T.matmul(q, k, transpose_b=True), inv_sqrt_hd)
        att = T.row_softmax(T.causal_mask_add(scores))
        o = _merge_heads(T.matmul(att, v), B, S, H, hd)
        x = T.add(x, T.matmul(o, store[f"{blk}.attn.wo"]))
        m = T.multiply(T.rms_normalize(x), store[f"{blk}.norm2.gain"])
        h = T.gelu(T.matmul(m, store[f"{blk}.mlp.up"]))
        x = T.add(x, T.matmul(h, store[f"{blk}.mlp.down"]))
    residual = x
    xn = T.multiply(T.rms_normalize(x), store["final_norm.gain"])
    logits = T.matmul(xn, store["tok_embed"], transpose_b=True)
    return logits, residual


def _split_heads(x: Tensor, B: int, S: int, H: int, hd: int) -> Tensor:
    return T.transpose(T.reshape(x, (B, S, H, hd)), (0, 2, 1, 3))


def _merge_heads(x: Tensor, B: int, S: int, H: int, hd: int) -> Tensor:
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, S, H * hd))


def forward_logits(store: ParameterStore, config: ModelConfig,
                   seq: TokenSequence) -> Tensor:
    """Next-token logits for one sequence, shape [T, vocab]."""
    logits, _ = _forward(store, config, seq.tokens[None, :])
    return T.reshape(logits, (len(seq), config.vocab_size))


@dataclass(eq=False)
class EncodedBatch:
    """Padded batch ready for response log-prob scoring.

    ``targets[b, t]`` is the token at position t+1; ``response_mask`` is 1.0
    exactly where that target lies inside the response.  Padded positions
    carry target id 0 and mask 0, so they contribute nothing.
    """
    tokens: np.ndarray         # [B, S] int64
    targets: np.ndarray        # [B, S] int64
    response_mask: np.ndarray  # [B, S] float64
    lengths: np.ndarray        # [B] true sequence lengths

    @property
    def response_token_counts(self) -> np.ndarray:
        return self.response_mask.sum(axis=1)


def encode_batch(seqs: list[TokenSequence]) -> EncodedBatch:
    if not seqs:
        raise ValueError("empty batch")
    B = len(seqs)
    S = max(len(s) for s in seqs)
    tokens = np.full((B, S), PAD_ID, dtype=np.int64)
    targets = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=np.float64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(seqs):
        n = len(s)
        tokens[b, :n] = s.tokens
        targets[b, :n - 1] = s.tokens[1:]
        mask[b, s.prompt_len - 1:n - 1] = 1.0
        lengths[b] = n
    return EncodedBatch(tokens=tokens, targets=targets, response_mask=mask,
                        lengths=lengths)


def batch_response_logprob(store: ParameterStore, config: ModelConfig,
                           batch: EncodedBatch,
                           length_normalized: bool = False) -> Tensor:
    """Sum (or mean) of response-token log-probs per sequence, shape [B]."""
    logits, _ = _forward(store, config, batch.tokens)
    logp = T.row_log_softmax(logits)
    picked = T.gather_logprob(logp, batch.targets)
    masked = T.multiply(picked, T.constant(batch.response_mask))
    total = T.tensor_sum(masked, axis=1)
    if length_normalized:
        counts = batch.response_token_counts
        if np.any(counts == 0):
            raise ValueError("length normalization with an empty response")
        total = T.multiply(total, T.constant(1.0 / counts))
    return total


def sequence_logprob(store: ParameterStore, config: ModelConfig,
                     seq: TokenSequence, length_normalized: bool = False) -> Tensor:
    out = batch_response_logprob(store, config, encode_batch([seq]),
                                 length_normalized=length_normalized)
    return T.tensor_sum(out)


def batch_residuals(store: ParameterStore, config: ModelConfig,
                    seqs: list[TokenSequence], pooling: str = "last") -> np.ndarray:
    """Residual-stream representations [B, d_model], detached.

    pooling="last": stream at the final response token.
    pooling="mean": mean over all response-token positions.
    """
    batch = encode_batch(seqs)
    _, residual = _forward(store, config, batch.tokens)
    res = residual.data
    if pooling == "last":
        idx = batch.lengths - 1
        return res[np.arange(len(seqs)), idx].copy()
    if pooling == "mean":
        pos_mask = np.zeros_like(batch.response_mask)
        for b, s in enumerate(seqs):
            pos_mask[b, s.prompt_len:len(s)] = 1.0
        denom = pos_mask.sum(axis=1, keepdims=True)
        if np.any(denom == 0):
            raise ValueError("mean pooling with an empty response")
        return (res * pos_mask[:, :, None]).sum(axis=1) / denom
    raise ValueError(f"unknown pooling {pooling!r}")


def residual_stream_final(store: ParameterStore, config: ModelConfig,
                          seq: TokenSequence, pooling: str = "last") -> np.ndarray:
    """Representation of one sequence, shape [d_model]."""
    return batch_residuals(store, config, [seq], pooling=pooling)[0]


def generate(store: ParameterStore, config: ModelConfig, prompt: np.ndarray,
             max_new_tokens: int, mode: str = "greedy", temperature: float = 1.0,
             rng: Optional[np.random.Generator] = None) -> TokenSequence:
    """Autoregressive sampling from the model.

    greedy mode is fully deterministic (argmax, ties to the smaller id);
    sample mode draws from softmax(logits / temperature) using ``rng``.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or len(prompt) == 0:
        raise ValueError("prompt must be a non-empty 1-d token array")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode requires an rng")
    toks = list(prompt)
    budget = min(max_new_tokens, config.max_seq_len - len(prompt))
    for _ in range(budget):
        logits, _ = _forward(store, config, np.asarray(toks, dtype=np.int64)[None, :])
        row = logits.data[0, -1]
        if mode == "greedy":
            nxt = int(np.argmax(row))
        else:
            z = row / max(temperature, 1e-8)
            z = z - z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(config.vocab_size, p=p))
        toks.append(nxt)
    return TokenSequence(tokens=np.asarray(toks, dtype=np.int64),
                         prompt_len=len(prompt))


# ---------------------------------------------------------------------------
# bundled policy


@dataclass(eq=False)
class PolicyModel:
    """Config + parameters + value-vector index, handled as one unit."""
    config: ModelConfig
    params: ParameterStore
    vv_index: ValueVectorIndex = field(default=None)

    def __post_init__(self):
        if self.vv_index is None:
            self.vv_index = mlp_value_vector_index(self.config)

    @classmethod
    def initialize(cls, config: ModelConfig) -> "PolicyModel":
        return cls(config=config, params=init_params(config))

    def clone(self) -> "PolicyModel":
        return PolicyModel(config=self.config, params=self.params.clone(),
                           vv_index=self.vv_index)

    def with_seed(self, seed: int) -> "PolicyModel":
        return PolicyModel.initialize(replace(self.config, init_seed=seed))

    def logits(self, seq: TokenSequence) -> Tensor:
        return forward_logits(self.params, self.config, seq)

    def response_logprob(self, batch: EncodedBatch, length_normalized=False) -> Tensor:
        return batch_response_logprob(self.params, self.config, batch,
                                      length_normalized=length_normalized)

    def representations(self, seqs: list[TokenSequence], pooling="last") -> np.ndarray:
        return batch_residuals(self.params, self.config, seqs, pooling=pooling)

    def generate(self, prompt, max_new_tokens, mode="greedy", temperature=1.0,
                 rng=None) -> TokenSequence:
        return generate(self.params, self.config, prompt, max_new_tokens,
                        mode=mode, temperature=temperature, rng=rng)
