"""Toy detection transformer with a growable bank of query groups.

Images go through a linear patch embedding and a small post-norm encoder.
The decoder runs every group's queries in one pass; a block-diagonal
additive mask keeps self-attention inside each group, so each group's
output equals what it would get decoding on its own. Each group owns a
classification head over its class set plus a no-object column, while
the decoder and box head are shared.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CHECKPOINT_FORMAT = "dyqdetr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    d: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 128
    queries_per_group: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.queries_per_group < 1:
            raise ValueError("queries_per_group must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2


@dataclass
class QueryGroup:
    index: int                 # 1-based phase id
    embeddings: Tensor         # (N, d)
    class_set: tuple[int, ...]
    frozen: bool = False
    cls_w: Tensor = field(default=None, repr=False)
    cls_b: Tensor = field(default=None, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_set)


@dataclass
class QueryBank:
    groups: list[QueryGroup] = field(default_factory=list)

    def __len__(self):
        return len(self.groups)

    def __iter__(self) -> Iterator[QueryGroup]:
        return iter(self.groups)

    def __getitem__(self, index: int) -> QueryGroup:
        """Group by 1-based phase index."""
        if not 1 <= index <= len(self.groups):
            raise KeyError(f"no query group {index}; bank has {len(self.groups)}")
        return self.groups[index - 1]

    @property
    def class_sets(self) -> list[tuple[int, ...]]:
        return [g.class_set for g in self.groups]

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for g in self.groups for c in g.class_set)


@dataclass
class GroupPredictions:
    index: int
    class_set: tuple[int, ...]
    class_logits: Tensor       # (B, N, |C|+1), last column = no-object
    boxes: Tensor              # (B, N, 4) normalized cxcywh

    def probabilities(self) -> np.ndarray:
        z = self.class_logits.data - self.class_logits.data.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- helpers

def sine_encoding(xy: np.ndarray, d: int) -> np.ndarray:
    """2-D sinusoidal code for points in [0, 1]^2: half the dims for y, half for x."""
    xy = np.asarray(xy, dtype=np.float64)
    nf = d // 4
    freqs = np.pi * np.geomspace(1.0, 32.0, nf)
    parts = []
    for axis in (1, 0):
        ang = xy[..., axis:axis + 1] * freqs
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=-1)


def group_block_mask(sizes: Sequence[int]) -> np.ndarray:
    """Additive mask, 0 inside each group's diagonal block and ``-inf`` elsewhere."""
    total = int(sum(sizes))
    mask = np.full((total, total), -np.inf)
    start = 0
    for n in sizes:
        mask[start:start + n, start:start + n] = 0.0
        start += n
    return mask


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major over the grid."""
    B, H, W, C = images.shape
    g = H // patch
    x = images.reshape(B, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, patch * patch * C)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class ScoreCounter:
    """Counts self-attention scores that survive the mask, per image."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


# ---------------------------------------------------------------- model

class DyQDETR:
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bank = QueryBank()
        self.phase = 0
        self.score_counter: ScoreCounter | None = None
        rng = dc.spawn_rng(config.seed, "init", "shared")
        self._init_shared(rng)
        cfg = config
        cells = (np.arange(cfg.grid) + 0.5) / cfg.grid
        yy, xx = np.meshgrid(cells, cells, indexing="ij")
        self.patch_pos = sine_encoding(np.stack([xx.ravel(), yy.ravel()], axis=-1), cfg.d)

    # -- parameters
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = dc.parameter(value)

    def _add_linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        self._add(f"{name}.W", _glorot(rng, fan_in, fan_out))
        self._add(f"{name}.b", np.zeros(fan_out))

    def _add_ln(self, name: str, dim: int) -> None:
        self._add(f"{name}.g", np.ones(dim))
        self._add(f"{name}.b", np.zeros(dim))

    def _add_attention(self, rng, name: str) -> None:
        d = self.config.d
        for part in ("q", "k", "v", "o"):
            self._add_linear(rng, f"{name}.{part}", d, d)

    def _init_shared(self, rng) -> None:
        cfg = self.config
        d = cfg.d
        self._add_linear(rng, "enc.patch", cfg.patch_size ** 2 * cfg.channels, d)
        for l in range(cfg.n_encoder_layers):
            p = f"enc.{l}"
            self._add_attention(rng, f"{p}.sa")
            self._add_ln(f"{p}.ln1", d)
            self._add_linear(rng, f"{p}.ff1", d, cfg.ffn_dim)
            self._add_linear(rng, f"{p}.ff2", cfg.ffn_dim, d)
            self._add_ln(f"{p}.ln2", d)
        for l in range(cfg.n_decoder_layers):
            p = f"dec.{l}"
            self._add_attention(rng, f"{p}.sa")
            self._add_ln(f"{p}.ln1", d)
            self._add_attention(rng, f"{p}.ca")
            self._add_ln(f"{p}.ln2", d)
            self._add_linear(rng, f"{p}.ff1", d, cfg.ffn_dim)
            self._add_linear(rng, f"{p}.ff2", cfg.ffn_dim, d)
            self._add_ln(f"{p}.ln3", d)
        # reference point of each query, read from its embedding
        self._add("ref.W", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 2)))
        self._add("ref.b", np.zeros(2))
        self._add_linear(rng, "box.1", d, d)
        self._add_linear(rng, "box.2", d, 4)
        self.params["box.2.W"].data *= 0.1

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        for g in self.bank:
            yield f"group{g.index}.query", g.embeddings
            yield f"group{g.index}.cls.W", g.cls_w
            yield f"group{g.index}.cls.b", g.cls_b

    def trainable_parameters(self, strict: bool = False) -> list[Tensor]:
        """Parameters an optimizer may touch.

        Frozen groups contribute their heads but not their queries. With
        ``strict`` only unfrozen groups (queries and heads) train, so old
        groups' outputs cannot change at all.
        """
        out = [] if strict else list(self.params.values())
        for g in self.bank:
            if strict and g.frozen:
                continue
            if not g.frozen:
                out.append(g.embeddings)
            out += [g.cls_w, g.cls_b]
        return out

    # -- query bank
    def expand_queries(self, new_class_set: Sequence[int]) -> QueryBank:
        """Append a group for ``new_class_set`` and freeze the existing ones.

        The first group's queries are drawn from the init stream; later groups
        start as an exact copy of the previous group's queries.
        """
        new = tuple(int(c) for c in new_class_set)
        if not new:
            raise ValueError("new class set is empty")
        if len(set(new)) != len(new):
            raise ValueError(f"duplicate classes in {new}")
        overlap = set(new) & set(self.bank.all_classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} already belong to an existing group")
        cfg = self.config
        t = len(self.bank) + 1
        rng = dc.spawn_rng(cfg.seed, "init", f"group{t}")
        if t == 1:
            emb = rng.normal(0.0, 1.0, size=(cfg.queries_per_group, cfg.d))
        else:
            emb = self.bank.groups[-1].embeddings.data.copy()
        for g in self.bank:
            g.frozen = True
        group = QueryGroup(t, dc.parameter(emb), new, frozen=False,
                           cls_w=dc.parameter(_glorot(rng, cfg.d, len(new) + 1)),
                           cls_b=dc.parameter(np.zeros(len(new) + 1)))
        self.bank.groups.append(group)
        return self.bank

    def extend_group_classes(self, index: int, new_classes: Sequence[int]) -> QueryGroup:
        """Grow one group's head with extra classes (fine-tuning baseline, no new queries)."""
        g = self.bank[index]
        new = tuple(int(c) for c in new_classes)
        if set(new) & set(self.bank.all_classes):
            raise ValueError("extension classes overlap the bank")
        rng = dc.spawn_rng(self.config.seed, "init", f"extend{index}", *map(str, new))
        w_new = _glorot(rng, self.config.d, len(new))
        K = g.n_classes
        W = np.concatenate([g.cls_w.data[:, :K], w_new, g.cls_w.data[:, K:]], axis=1)
        b = np.concatenate([g.cls_b.data[:K], np.zeros(len(new)), g.cls_b.data[K:]])
        g.cls_w, g.cls_b = dc.parameter(W), dc.parameter(b)
        g.class_set = g.class_set + new
        return g

    def unfreeze_all(self) -> None:
        for g in self.bank:
            g.frozen = False

    def freeze_all_but_last(self) -> None:
        for g in self.bank.groups[:-1]:
            g.frozen = True

    # -- building blocks
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.W"] + self.params[f"{name}.b"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return dc.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, name: str, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                   mask: np.ndarray | None = None, count: bool = False) -> Tensor:
        cfg = self.config
        B, Lq, d = q_in.shape
        Lk = k_in.shape[1]
        h, dh = cfg.n_heads, d // cfg.n_heads

        def heads(x: Tensor, L: int) -> Tensor:
            return x.reshape((B, L, h, dh)).transpose(0, 2, 1, 3)

        q = heads(self._linear(q_in, f"{name}.q"), Lq)
        k = heads(self._linear(k_in, f"{name}.k"), Lk)
        v = heads(self._linear(v_in, f"{name}.v"), Lk)
        scores = (q @ k.T) * (1.0 / np.sqrt(dh))
        if count and self.score_counter is not None:
            live = Lq * Lk if mask is None else int(np.isfinite(mask).sum())
            self.score_counter.count += h * live
        attn = dc.masked_softmax(scores, mask)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape((B, Lq, d))
        return self._linear(out, f"{name}.o")

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._linear(self._linear(x, f"{name}.ff1").relu(), f"{name}.ff2")

    # -- forward
    def _as_batch(self, images) -> np.ndarray:
        cfg = self.config
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(f"images must be (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {x.shape}")
        return x

    def encode(self, images) -> Tensor:
        """Patch features ``(B, n_patches, d)``; a single image gets a batch axis of 1."""
        cfg = self.config
        x = self._as_batch(images)
        h = self._linear(Tensor(patchify(x, cfg.patch_size)), "enc.patch") + self.patch_pos
        for l in range(cfg.n_encoder_layers):
            p = f"enc.{l}"
            h = self._ln(h + self._attention(f"{p}.sa", h, h, h), f"{p}.ln1")
            h = self._ln(h + self._ffn(h, p), f"{p}.ln2")
        return h

    def _decode(self, feats: Tensor, queries: Tensor, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        """Run the shared decoder on ``queries`` (L, d); returns embeddings and box logits offset."""
        cfg = self.config
        B = feats.shape[0]
        L = queries.shape[0]
        ref_logit = queries @ self.params["ref.W"] + self.params["ref.b"]          # (L, 2)
        ref = 1.0 / (1.0 + np.exp(-ref_logit.data))
        qpos = sine_encoding(ref, cfg.d)                                            # constant
        keys = feats + self.patch_pos
        bias = self._locality_bias(ref)
        x = queries.reshape((1, L, cfg.d)) + np.zeros((B, 1, 1))
        for l in range(cfg.n_decoder_layers):
            p = f"dec.{l}"
            xq = x + qpos
            x = self._ln(x + self._attention(f"{p}.sa", xq, xq, x, mask, count=True), f"{p}.ln1")
            x = self._ln(x + self._attention(f"{p}.ca", x + qpos, keys, feats, bias), f"{p}.ln2")
            x = self._ln(x + self._ffn(x, p), f"{p}.ln3")
        return x, ref_logit

    def _locality_bias(self, ref: np.ndarray) -> np.ndarray:
        """Additive cross-attention bias ``-|patch - ref|^2 / (2 s^2)``, one width ``s`` per head.

        The last head gets no bias so every query can still see the whole image.
        """
        cfg = self.config
        cells = (np.arange(cfg.grid) + 0.5) / cfg.grid
        yy, xx = np.meshgrid(cells, cells, indexing="ij")
        centers = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        d2 = ((ref[:, None, :] - centers[None, :, :]) ** 2).sum(-1)               # (L, P)
        widths = np.geomspace(0.08, 0.32, max(cfg.n_heads - 1, 1))[: cfg.n_heads - 1]
        heads = [-d2 / (2 * w * w) for w in widths] + [np.zeros_like(d2)] * (cfg.n_heads - len(widths))
        return np.stack(heads)[None]                                               # (1, h, L, P)

    def _box_head(self, emb: Tensor, ref_logit: Tensor) -> Tensor:
        raw = self._linear(self._linear(emb, "box.1").relu(), "box.2")
        offset = dc.concat([ref_logit, np.zeros((ref_logit.shape[0], 2))], axis=-1)
        return (raw + offset).sigmoid()

    def _group_outputs(self, group: QueryGroup, emb: Tensor, ref_logit: Tensor) -> GroupPredictions:
        logits = emb @ group.cls_w + group.cls_b
        return GroupPredictions(group.index, group.class_set, logits, self._box_head(emb, ref_logit))

    def decode_group(self, feats: Tensor, group: QueryGroup | int) -> GroupPredictions:
        """Decode one group in isolation."""
        if isinstance(group, int):
            group = self.bank[group]
        emb, ref_logit = self._decode(feats, group.embeddings, None)
        return self._group_outputs(group, emb, ref_logit)

    def forward_all(self, images, disentangle: bool = True, feats: Tensor | None = None) -> list[GroupPredictions]:
        """All groups in one decoder pass; cross-group self-attention is masked out."""
        if not len(self.bank):
            raise RuntimeError("query bank is empty; call expand_queries first")
        if feats is None:
            feats = self.encode(images)
        N = self.config.queries_per_group
        sizes = [N] * len(self.bank)
        queries = dc.concat([g.embeddings for g in self.bank], axis=0)
        mask = group_block_mask(sizes) if disentangle else None
        emb, ref_logit = self._decode(feats, queries, mask)
        out = []
        for i, g in enumerate(self.bank):
            sl = slice(i * N, (i + 1) * N)
            out.append(self._group_outputs(g, emb[:, sl], ref_logit[sl]))
        return out

    def forward_per_group(self, images) -> list[GroupPredictions]:
        feats = self.encode(images)
        return [self.decode_group(feats, g) for g in self.bank]

    # -- state
    def copy(self) -> DyQDETR:
        """Deep, detached snapshot (the frozen old model for pseudo-labelling)."""
        other = DyQDETR.__new__(DyQDETR)
        other.config = self.config
        other.params = {k: dc.parameter(v.data.copy()) for k, v in self.params.items()}
        other.bank = QueryBank([QueryGroup(g.index, dc.parameter(g.embeddings.data.copy()), g.class_set, g.frozen,
                                           dc.parameter(g.cls_w.data.copy()), dc.parameter(g.cls_b.data.copy()))
                                for g in self.bank])
        other.phase = self.phase
        other.score_counter = None
        other.patch_pos = self.patch_pos
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def save(self, path) -> None:
        """Write a zip checkpoint: ``meta.json`` plus one ``.npy`` per tensor.

        Entry timestamps are pinned so equal models give byte-equal files.
        """
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "phase": self.phase,
            "groups": [{"index": g.index, "class_set": list(g.class_set), "frozen": g.frozen} for g in self.bank],
            "tensors": [name for name, _ in self.named_parameters()],
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            _write_entry(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
            for name, t in self.named_parameters():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(t.data), allow_pickle=False)
                _write_entry(zf, f"tensors/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path) -> DyQDETR:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            arrays = {name: np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")))
                      for name in meta["tensors"]}
        model = cls(ModelConfig(**meta["config"]))
        for name in model.params:
            model.params[name] = dc.parameter(arrays[name])
        for gm in meta["groups"]:
            i = gm["index"]
            model.bank.groups.append(QueryGroup(
                i, dc.parameter(arrays[f"group{i}.query"]), tuple(gm["class_set"]), gm["frozen"],
                dc.parameter(arrays[f"group{i}.cls.W"]), dc.parameter(arrays[f"group{i}.cls.b"])))
        model.phase = meta["phase"]
        return model


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def count_self_attention_scores(model: DyQDETR, image, disentangle: bool) -> int:
    """Self-attention scores computed (unmasked) for one image across all decoder layers."""
    model.score_counter = ScoreCounter()
    try:
        with dc.no_grad():
            model.forward_all(image, disentangle=disentangle)
        return model.score_counter.count
    finally:
        model.score_counter = None
