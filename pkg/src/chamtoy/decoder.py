"""Constrained mixed-modal decoding.

A small state machine rides along with generation and decides which token
ids are legal at every position, so the output is well-formed by
construction: image blocks always carry exactly block_len codes between
BOI and EOI, EOI itself is never sampled (the engine inserts it when the
block is full, consuming no randomness), and generation never stops in
the middle of a block.

Two drivers share the machine and one sequential random stream seeded
from the policy, so they emit identical tokens: generate_stream decodes
incrementally with a key/value cache and yields events, generate_fused
re-runs the full forward pass per token.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelConfig, model_forward
from .numerics import Tensor
from .tokenizer.bpe import BPETokenizer
from .tokenizer.codebook import Codebook, decode_tokens
from .tokenizer.vocab import MixedVocab, TokenKind

MODES = ("unconstrained", "text-only", "image-only")


class DecodeError(ValueError):
    """Malformed token stream; offset points at the offending position."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


@dataclass(frozen=True)
class DecodePolicy:
    block_len: int
    mode: str = "unconstrained"
    max_new_tokens: int = 64
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.block_len < 1:
            raise ValueError("block_len must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class DecodeState:
    in_image: bool = False
    remaining: int = 0
    blocks_done: int = 0


def legal_mask(state: DecodeState, policy: DecodePolicy, vocab: MixedVocab) -> np.ndarray:
    """Boolean mask over the full vocabulary of sampleable tokens.

    EOI is never legal to sample: it is forced by the engine.  An
    all-false mask means the machine has nothing left to say (image-only
    after its block), which ends generation.
    """
    mask = np.zeros(vocab.total, dtype=bool)
    if state.in_image:
        if state.remaining > 0:
            mask[vocab.n_text:vocab.n_text + vocab.n_image] = True
        return mask
    if policy.mode == "image-only":
        if state.blocks_done == 0:
            mask[vocab.boi] = True
        return mask
    mask[:vocab.n_text] = True
    mask[vocab.eos] = True
    if policy.mode == "unconstrained":
        mask[vocab.boi] = True
    return mask


def advance_state(
    state: DecodeState, token: int, policy: DecodePolicy, vocab: MixedVocab, offset: int
) -> DecodeState:
    """Feed one token through the machine, validating block discipline."""
    kind = vocab.classify(token)
    if state.in_image:
        if kind is TokenKind.IMAGE:
            if state.remaining == 0:
                raise DecodeError(offset, "image block overran its length")
            return replace(state, remaining=state.remaining - 1)
        if token == vocab.eoi:
            if state.remaining != 0:
                raise DecodeError(
                    offset, f"EOI with {state.remaining} codes still missing"
                )
            return DecodeState(blocks_done=state.blocks_done + 1)
        raise DecodeError(offset, "non-image token inside an image block")
    if token == vocab.boi:
        return DecodeState(
            in_image=True, remaining=policy.block_len, blocks_done=state.blocks_done
        )
    if kind is TokenKind.IMAGE:
        raise DecodeError(offset, "image code outside an image block")
    if token == vocab.eoi:
        raise DecodeError(offset, "EOI without an open image block")
    if token == vocab.pad:
        raise DecodeError(offset, "PAD in an active stream")
    return state  # text tokens and BOS/EOS/SEP leave the machine alone


def _sample(logits: np.ndarray, legal: np.ndarray, temperature: float, rng) -> int:
    if not legal.any():
        raise ValueError("no legal token to sample")
    masked = np.where(legal, logits, -np.inf)
    if temperature == 0.0:
        return int(np.argmax(masked))
    z = masked / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    idx = int(np.searchsorted(np.cumsum(p), rng.random()))
    idx = min(idx, len(p) - 1)
    if not legal[idx]:  # cumsum rounding spilled past the last legal entry
        idx = int(np.argmax(p))
    return idx


# ----------------------------------------------------------------------
# streaming driver (kv cache, yields events)
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TextToken:
    token: int


@dataclass(frozen=True)
class ImageStart:
    pass


@dataclass(frozen=True)
class ImageCode:
    code: int  # raw codebook index


@dataclass(frozen=True)
class ImageEnd:
    codes: tuple[int, ...]


@dataclass(frozen=True)
class Finished:
    reason: str  # "eos", "max_tokens", "image_complete", "exhausted"
    tokens: tuple[int, ...]


def _prompt_state(prompt, policy, vocab) -> DecodeState:
    state = DecodeState()
    for i, tok in enumerate(prompt):
        state = advance_state(state, int(tok), policy, vocab, i)
    if state.in_image:
        raise DecodeError(len(prompt) - 1, "prompt ends inside an image block")
    return state


def generate_stream(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    prompt,
    policy: DecodePolicy,
    vocab: MixedVocab,
):
    """Yield decode events; the final event is always Finished.

    The prompt is validated through the same machine, so an ill-formed
    prompt fails before any model work.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must contain at least one token (BOS works)")
    state = _prompt_state(prompt, policy, vocab)
    rng = np.random.default_rng(policy.seed)

    logits, aux = model_forward(params, cfg, np.array([prompt]), past_kv=None)
    kv = aux["kv"]
    last = logits.data[0, -1]

    tokens = list(prompt)
    produced = 0
    block: list[int] = []
    reason = None

    while True:
        if state.in_image and state.remaining == 0:
            tok = vocab.eoi  # forced: no sampling, no rng draw
        else:
            legal = legal_mask(state, policy, vocab)
            if not legal.any():
                reason = "image_complete" if policy.mode == "image-only" else "exhausted"
                break
            tok = _sample(last, legal, policy.temperature, rng)

        state = advance_state(state, tok, policy, vocab, len(tokens))
        tokens.append(tok)
        produced += 1

        if tok == vocab.boi:
            block = []
            yield ImageStart()
        elif tok == vocab.eoi:
            yield ImageEnd(tuple(block))
            block = []
        elif state.in_image:
            code = vocab.global_to_image(tok)
            block.append(code)
            yield ImageCode(code)
        else:
            yield TextToken(tok)

        if tok == vocab.eos:
            reason = "eos"
            break
        if not state.in_image:
            if policy.mode == "image-only" and state.blocks_done >= 1:
                reason = "image_complete"
                break
            if produced >= policy.max_new_tokens:
                reason = "max_tokens"
                break
        if len(tokens) >= cfg.max_seq:
            if state.in_image:
                raise DecodeError(len(tokens) - 1, "context exhausted inside an image block")
            reason = "max_tokens"
            break

        logits, aux = model_forward(params, cfg, np.array([[tok]]), past_kv=kv)
        kv = aux["kv"]
        last = logits.data[0, -1]

    yield Finished(reason=reason, tokens=tuple(tokens))


def generate_fused(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    prompt,
    policy: DecodePolicy,
    vocab: MixedVocab,
) -> Finished:
    """Same machine and random stream, full forward pass per token.

    Legal masks are precomputed per machine situation instead of being
    rebuilt each step.  Token output is identical to generate_stream.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must contain at least one token (BOS works)")
    state = _prompt_state(prompt, policy, vocab)
    rng = np.random.default_rng(policy.seed)

    mask_table = {
        key: legal_mask(st, policy, vocab)
        for key, st in {
            "image": DecodeState(in_image=True, remaining=1),
            "text-fresh": DecodeState(),
            "text-after-block": DecodeState(blocks_done=1),
        }.items()
    }

    tokens = list(prompt)
    produced = 0
    reason = None

    while True:
        if state.in_image and state.remaining == 0:
            tok = vocab.eoi
        else:
            if state.in_image:
                legal = mask_table["image"]
            elif state.blocks_done == 0:
                legal = mask_table["text-fresh"]
            else:
                legal = mask_table["text-after-block"]
            if not legal.any():
                reason = "image_complete" if policy.mode == "image-only" else "exhausted"
                break
            logits, _ = model_forward(params, cfg, np.array([tokens]))
            tok = _sample(logits.data[0, -1], legal, policy.temperature, rng)

        state = advance_state(state, tok, policy, vocab, len(tokens))
        tokens.append(tok)
        produced += 1

        if tok == vocab.eos:
            reason = "eos"
            break
        if not state.in_image:
            if policy.mode == "image-only" and state.blocks_done >= 1:
                reason = "image_complete"
                break
            if produced >= policy.max_new_tokens:
                reason = "max_tokens"
                break
        if len(tokens) >= cfg.max_seq:
            if state.in_image:
                raise DecodeError(len(tokens) - 1, "context exhausted inside an image block")
            reason = "max_tokens"
            break

    return Finished(reason=reason, tokens=tuple(tokens))


# ----------------------------------------------------------------------
# detokenization
# ----------------------------------------------------------------------


def detokenize_mixed(
    tokens,
    text_tok: BPETokenizer,
    book: Codebook,
    vocab: MixedVocab,
    image_size: int,
):
    """Token stream -> list of ("text", str) and ("image", float array) parts.

    Structural violations raise DecodeError naming the offset.  Text bytes
    that do not form valid UTF-8 (possible with sampled tokens) decode
    with replacement characters rather than failing.
    """
    tokens = [int(t) for t in tokens]
    block_len = book.tokens_per_image(image_size, image_size)
    parts = []
    text_ids: list[int] = []

    def flush_text():
        if text_ids:
            parts.append(("text", text_tok.decode_bytes(text_ids).decode("utf-8", errors="replace")))
            text_ids.clear()

    i = 0
    if tokens and tokens[0] == vocab.bos:
        i = 1
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        kind = vocab.classify(tok)
        if tok == vocab.eos:
            break
        if kind is TokenKind.TEXT:
            text_ids.append(tok)
        elif tok == vocab.boi:
            flush_text()
            j = i + 1
            codes = []
            while j < n and vocab.classify(tokens[j]) is TokenKind.IMAGE:
                codes.append(vocab.global_to_image(tokens[j]))
                j += 1
            if len(codes) != block_len:
                raise DecodeError(
                    i, f"image block has {len(codes)} codes, expected {block_len}"
                )
            if j >= n or tokens[j] != vocab.eoi:
                raise DecodeError(min(j, n - 1), "image block not closed by EOI")
            parts.append(("image", decode_tokens(np.array(codes), book, image_size, image_size)))
            i = j
        elif kind is TokenKind.IMAGE:
            raise DecodeError(i, "image code outside an image block")
        elif tok == vocab.eoi:
            raise DecodeError(i, "EOI without an open image block")
        elif tok == vocab.sep:
            # prompt/answer boundary in tuned streams: close the text part
            flush_text()
        else:
            raise DecodeError(i, f"unexpected control token {vocab.special_name(tok)}")
        i += 1
    flush_text()
    return parts
