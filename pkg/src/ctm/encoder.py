"""Tiny transformer encoder with a wordpiece or a character-CNN front-end."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ctm import tensor as T
from ctm.data import FormattedInput
from ctm.errors import ConfigError, ContractError, LengthError
from ctm.rng import Rng
from ctm.tensor import Tensor
from ctm.tokenize import CHAR_ALPHABET_SIZE, CHAR_ROW_LEN, SPECIAL_TOKENS, encode_chars

KINDS = ("wordpiece", "char")


@dataclass
class EncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_seq: int = 64
    vocab_size: int = 512
    char_alphabet_size: int = CHAR_ALPHABET_SIZE
    char_dim: int = 16
    filter_widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    highway_layers: int = 2

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.d, self.heads, self.ff_dim, self.max_seq, self.vocab_size) <= 0 or self.layers < 0:
            raise ConfigError(f"encoder sizes must be positive: {self}")
        if len(self.filter_widths) > self.d:
            raise ConfigError("more filter widths than output channels")

    def channel_split(self) -> list[int]:
        k = len(self.filter_widths)
        return [self.d // k + (1 if i < self.d % k else 0) for i in range(k)]


@dataclass
class Batch:
    """Padded batch of formatted inputs, ready for a backbone.

    ``index[b, t]`` addresses a row of the per-batch embedding table the
    backbone assembles: token rows (wordpiece) or unique-word CNN rows plus
    special-token rows (char), followed by any prompt rows.
    """

    index: np.ndarray
    mask: np.ndarray
    char_rows: np.ndarray | None = None
    n_prompt_rows: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape


def collate(inputs: Sequence[FormattedInput], kind: str, vocab_size: int,
            prompt_offsets: dict[str, int] | None = None, n_prompt_rows: int = 0,
            pad_to: int | None = None) -> Batch:
    """Pack inputs; prompt-slot position j of class c maps to prompt row offsets[c] + j."""
    B = len(inputs)
    L = max(len(f) for f in inputs)
    if pad_to is not None:
        L = max(L, pad_to)
    mask = np.zeros((B, L), dtype=bool)
    index = np.zeros((B, L), dtype=np.int64)
    special = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    rows: dict[str, int] = {}
    row_list: list[np.ndarray] = []
    word_slots: list[tuple[int, int, int]] = []
    special_slots: list[tuple[int, int, int]] = []
    prompt_slots: list[tuple[int, int, int]] = []
    for b, f in enumerate(inputs):
        mask[b, :len(f)] = True
        s0 = f.slot_start
        for t, tok in enumerate(f.tokens):
            if f.prompt_slot and t >= s0:
                if prompt_offsets is None or f.hypothesis_class not in prompt_offsets:
                    raise ConfigError(f"no prompt rows for class {f.hypothesis_class!r}")
                prompt_slots.append((b, t, prompt_offsets[f.hypothesis_class] + t - s0))
            elif kind == "wordpiece":
                index[b, t] = f.ids[t]
            elif tok in special:
                special_slots.append((b, t, special[tok]))
            else:
                if tok not in rows:
                    rows[tok] = len(row_list)
                    row_list.append(encode_chars(tok))
                word_slots.append((b, t, rows[tok]))
    if kind == "wordpiece":
        base = vocab_size
        char_rows = None
    else:
        U = len(row_list)
        char_rows = np.stack(row_list) if row_list else np.zeros((0, CHAR_ROW_LEN), dtype=np.int64)
        for b, t, r in word_slots:
            index[b, t] = r
        for b, t, s in special_slots:
            index[b, t] = U + s
        base = U + len(SPECIAL_TOKENS)
    for b, t, j in prompt_slots:
        index[b, t] = base + j
    # padding positions point at the [PAD] row
    index[~mask] = 0 if kind == "wordpiece" else len(row_list)
    return Batch(index, mask, char_rows, n_prompt_rows)


def _normal(rng: Rng, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


class Backbone:
    """Encoder parameters and forward passes for one front-end kind."""

    def __init__(self, config: EncoderConfig, kind: str, rng: Rng):
        if kind not in KINDS:
            raise ConfigError(f"unknown backbone kind {kind!r}")
        config.validate()
        self.config = config
        self.kind = kind
        c = config
        r = rng.split(f"backbone-{kind}")
        p: dict[str, Tensor] = {}
        if kind == "wordpiece":
            p["tok_emb"] = _normal(r, (c.vocab_size, c.d), 0.02, "tok_emb")
        else:
            p["char_emb"] = _normal(r, (c.char_alphabet_size, c.char_dim), 1.0, "char_emb")
            for w, ch in zip(c.filter_widths, c.channel_split()):
                p[f"conv{w}.w"] = _normal(r, (w * c.char_dim, ch), 1.0 / math.sqrt(w * c.char_dim), f"conv{w}.w")
                p[f"conv{w}.b"] = _zeros((ch,), f"conv{w}.b")
            for i in range(c.highway_layers):
                p[f"highway{i}.wh"] = _normal(r, (c.d, c.d), 1.0 / math.sqrt(c.d), f"highway{i}.wh")
                p[f"highway{i}.bh"] = _zeros((c.d,), f"highway{i}.bh")
                p[f"highway{i}.wg"] = _normal(r, (c.d, c.d), 1.0 / math.sqrt(c.d), f"highway{i}.wg")
                p[f"highway{i}.bg"] = Tensor(np.full(c.d, -1.0), requires_grad=True, name=f"highway{i}.bg")
            p["char_proj.w"] = _normal(r, (c.d, c.d), 0.02, "char_proj.w")
            p["char_proj.b"] = _zeros((c.d,), "char_proj.b")
            p["special_emb"] = _normal(r, (len(SPECIAL_TOKENS), c.d), 0.02, "special_emb")
            p["mlm_out"] = _normal(r, (c.vocab_size, c.d), 0.02, "mlm_out")
        p["pos_emb"] = _normal(r, (c.max_seq, c.d), 0.02, "pos_emb")
        out_std = 1.0 / math.sqrt(c.d) / math.sqrt(2 * max(c.layers, 1))
        for i in range(c.layers):
            pre = f"layer{i}."
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = _ones((c.d,), pre + ln + ".g")
                p[pre + ln + ".b"] = _zeros((c.d,), pre + ln + ".b")
            for w in ("wq", "wk", "wv"):
                p[pre + w] = _normal(r, (c.d, c.d), 1.0 / math.sqrt(c.d), pre + w)
                p[pre + "b" + w[1]] = _zeros((c.d,), pre + "b" + w[1])
            p[pre + "wo"] = _normal(r, (c.d, c.d), out_std, pre + "wo")
            p[pre + "bo"] = _zeros((c.d,), pre + "bo")
            p[pre + "w1"] = _normal(r, (c.d, c.ff_dim), 1.0 / math.sqrt(c.d), pre + "w1")
            p[pre + "b1"] = _zeros((c.ff_dim,), pre + "b1")
            p[pre + "w2"] = _normal(r, (c.ff_dim, c.d), out_std * math.sqrt(c.d / c.ff_dim), pre + "w2")
            p[pre + "b2"] = _zeros((c.d,), pre + "b2")
        if c.layers:
            p["ln_f.g"] = _ones((c.d,), "ln_f.g")
            p["ln_f.b"] = _zeros((c.d,), "ln_f.b")
        self.params = p

    # -- parameter bookkeeping

    @property
    def mlm_only_params(self) -> list[str]:
        """Parameters used by the MLM head alone (excluded from classifier training)."""
        return ["mlm_out"] if self.kind == "char" else []

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = self.params.keys() - arrays.keys()
        if missing:
            raise ContractError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ContractError(f"parameter {k}: checkpoint shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    # -- front-ends

    def token_rows(self, tokens: Sequence[str], ids: Sequence[int]) -> Tensor:
        """Context-free input vectors (no position term) for literal tokens."""
        if self.kind == "wordpiece":
            return T.embedding(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))
        special = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        parts = []
        for tok in tokens:
            if tok in special:
                parts.append(T.take(self.params["special_emb"], np.array([special[tok]])))
            else:
                parts.append(self.char_cnn(encode_chars(tok)[None, :]))
        return T.concat(parts, 0)

    def char_cnn(self, rows: np.ndarray) -> Tensor:
        """(U, 50) character ids -> (U, d) word vectors."""
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != CHAR_ROW_LEN:
            raise ContractError(f"char rows must have shape (U, {CHAR_ROW_LEN}), got {rows.shape}")
        c, p = self.config, self.params
        # Windows lying wholly in the zero padding are identical, so keeping
        # one of them (for every width) leaves the max-pool unchanged.
        used = int(np.max(np.nonzero(rows.any(axis=0))[0], initial=0)) + 1
        rows = rows[:, :min(CHAR_ROW_LEN, used + max(c.filter_widths))]
        e = T.embedding(p["char_emb"], rows)  # U, L, char_dim
        pooled = []
        for w in c.filter_widths:
            conv = T.add(T.matmul(T.unfold(e, w), p[f"conv{w}.w"]), p[f"conv{w}.b"])
            pooled.append(T.relu(T.max_(conv, axis=1)))
        x = T.concat(pooled, -1)
        for i in range(c.highway_layers):
            h = T.relu(T.add(T.matmul(x, p[f"highway{i}.wh"]), p[f"highway{i}.bh"]))
            g = T.sigmoid(T.add(T.matmul(x, p[f"highway{i}.wg"]), p[f"highway{i}.bg"]))
            x = T.add(T.mul(g, h), T.mul(T.add(T.scale(g, -1.0), T.Tensor(1.0)), x))
        return T.add(T.matmul(x, p["char_proj.w"]), p["char_proj.b"])

    def _positions(self, length: int) -> Tensor:
        if length > self.config.max_seq:
            raise LengthError(f"sequence length {length} exceeds max_seq {self.config.max_seq}")
        return T.index(self.params["pos_emb"], slice(0, length))

    def embed_wordpiece(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if self.kind != "wordpiece":
            raise ContractError("embed_wordpiece needs a wordpiece backbone")
        return T.add(T.embedding(self.params["tok_emb"], ids), self._positions(ids.shape[-1]))

    def embed_chars(self, rows) -> Tensor:
        rows = np.asarray(rows)
        if self.kind != "char":
            raise ContractError("embed_chars needs a char backbone")
        return T.add(self.char_cnn(rows), self._positions(rows.shape[0]))

    def embed_batch(self, batch: Batch, prompt_rows: Tensor | None = None) -> Tensor:
        """(B, T, d) inputs: looked-up rows plus position embeddings."""
        if self.kind == "wordpiece":
            parts = [self.params["tok_emb"]]
        else:
            parts = [self.char_cnn(batch.char_rows), self.params["special_emb"]]
        if batch.n_prompt_rows:
            if prompt_rows is None or prompt_rows.shape[0] != batch.n_prompt_rows:
                raise ContractError("batch has prompt slots but no matching prompt rows")
            parts.append(prompt_rows)
        table = parts[0] if len(parts) == 1 else T.concat(parts, 0)
        x = T.take(table, batch.index, axis=0)
        return T.add(x, self._positions(batch.index.shape[1]))

    # -- transformer stack

    def encode(self, x: Tensor, mask=None, return_attention: bool = False):
        """Pre-LayerNorm stack; masked positions neither attend nor are attended to."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, L, d = x.shape
        if d != self.config.d:
            raise ContractError(f"encode: width {d} != d={self.config.d}")
        if L > self.config.max_seq:
            raise LengthError(f"sequence length {L} exceeds max_seq {self.config.max_seq}")
        mask = np.ones((B, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, -1)
        if mask.shape != (B, L):
            raise ContractError(f"encode: mask shape {mask.shape} does not match input {(B, L)}")
        keep = mask[:, None, :, None] & mask[:, None, None, :]
        h = self.config.heads
        dh = d // h
        p = self.params
        attentions = []

        def ln(z, name):
            return T.add(T.mul(T.layer_norm(z), p[name + ".g"]), p[name + ".b"])

        def heads(z):
            return T.transpose(T.reshape(z, (B, L, h, dh)), (0, 2, 1, 3))

        for i in range(self.config.layers):
            pre = f"layer{i}."
            a = ln(x, pre + "ln1")
            q = heads(T.add(T.matmul(a, p[pre + "wq"]), p[pre + "bq"]))
            k = heads(T.add(T.matmul(a, p[pre + "wk"]), p[pre + "bk"]))
            v = heads(T.add(T.matmul(a, p[pre + "wv"]), p[pre + "bv"]))
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = T.softmax(scores, keep)
            attentions.append(att.data)
            ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
            x = T.add(x, T.add(T.matmul(ctx, p[pre + "wo"]), p[pre + "bo"]))
            f = T.gelu(T.add(T.matmul(ln(x, pre + "ln2"), p[pre + "w1"]), p[pre + "b1"]))
            x = T.add(x, T.add(T.matmul(f, p[pre + "w2"]), p[pre + "b2"]))
        if self.config.layers:
            x = ln(x, "ln_f")
        if squeeze:
            x = T.reshape(x, (L, d))
        return (x, attentions) if return_attention else x

    def forward(self, batch: Batch, prompt_rows: Tensor | None = None) -> Tensor:
        return self.encode(self.embed_batch(batch, prompt_rows), batch.mask)

    def cls(self, states: Tensor) -> Tensor:
        """[CLS] vectors, position 0 of every sequence."""
        return T.index(states, (slice(None), 0)) if states.ndim == 3 else T.index(states, 0)

    def mlm_logits(self, states: Tensor, positions) -> Tensor:
        """Vocabulary logits at ``positions`` (flat indices into the B*T rows)."""
        flat = T.reshape(states, (-1, self.config.d)) if states.ndim == 3 else states
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size and (pos.min() < 0 or pos.max() >= flat.shape[0]):
            raise IndexError(f"mlm position out of range [0, {flat.shape[0]})")
        head = self.params["tok_emb"] if self.kind == "wordpiece" else self.params["mlm_out"]
        return T.matmul(T.take(flat, pos, axis=0), T.transpose(head, (1, 0)))


def config_dict(config: EncoderConfig) -> dict:
    d = asdict(config)
    d["filter_widths"] = list(config.filter_widths)
    return d


def config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["filter_widths"] = tuple(d.get("filter_widths", (1, 2, 3, 4, 5)))
    return EncoderConfig(**d)
