"""Miniature image/text dual encoder and its contrastive pre-trainer.

Both branches are small pre-LN transformers sharing a joint embedding space:
the text branch pools at the end-of-sequence position, the image branch
mean-pools its patch positions, and both project to the joint dimension and
L2-normalize. Prompt vectors, when supplied, are prepended at layer 0 and
re-injected (first ``m`` positions replaced) at every deeper prompted layer.

The pre-trainer plays the role of the large-scale pretraining this kind of
model normally assumes: a symmetric in-batch contrastive loss over
cosine-similarity logits scaled by a learned temperature.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .checkpoints import (
    CheckpointError,
    content_hash,
    read_json,
    read_tensor,
    write_json,
    write_tensor,
)

PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>")

TAU_MIN, TAU_MAX = 0.01, 100.0
TAU_INIT = 0.5


class VocabularyError(ValueError):
    """Words outside the tokenizer vocabulary where UNK is not allowed."""

    def __init__(self, words):
        self.words = sorted(set(words))
        super().__init__(f"unknown words: {', '.join(self.words)}")


class Tokenizer:
    """Lowercase whitespace word tokenizer with PAD/SOS/EOS/UNK specials."""

    def __init__(self, words):
        self.vocab = {w: i for i, w in enumerate(SPECIALS)}
        for w in sorted(set(words)):
            if w not in self.vocab:
                self.vocab[w] = len(self.vocab)
        self._inverse = {i: w for w, i in self.vocab.items()}

    @property
    def size(self):
        return len(self.vocab)

    @staticmethod
    def normalize(text):
        return re.sub(r"[^\w\s]", " ", text.lower()).split()

    def encode(self, text, strict=False):
        words = self.normalize(text)
        if strict:
            unknown = [w for w in words if w not in self.vocab]
            if unknown:
                raise VocabularyError(unknown)
        return [SOS_ID] + [self.vocab.get(w, UNK_ID) for w in words] + [EOS_ID]

    def decode(self, ids):
        return " ".join(self._inverse[i] for i in ids if i >= len(SPECIALS))

    @staticmethod
    def from_manifests(manifests):
        words = list(Tokenizer.normalize("a photo of a"))
        for m in manifests:
            for cls in m.classes:
                words.extend(Tokenizer.normalize(cls.name))
                for desc in cls.descriptions:
                    words.extend(Tokenizer.normalize(desc))
        return Tokenizer(words)

    def to_dict(self):
        return dict(self.vocab)

    @staticmethod
    def from_dict(vocab):
        tok = Tokenizer([])
        tok.vocab = {w: int(i) for w, i in vocab.items()}
        tok._inverse = {i: w for w, i in tok.vocab.items()}
        return tok


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    text_len: int = 16
    patch_grid: int = 4
    image_size: int = 32
    channels: int = 3
    embed_dim: int = 32

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_grid != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_grid {self.patch_grid}")

    @property
    def num_patches(self):
        return self.patch_grid * self.patch_grid

    @property
    def patch_dim(self):
        side = self.image_size // self.patch_grid
        return side * side * self.channels

    @staticmethod
    def from_dict(d):
        allowed = set(EncoderConfig.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return EncoderConfig(**d)


def patchify(image, grid):
    """(H, W, C) -> (grid*grid, patch_dim), non-overlapping row-major patches."""
    h, w, c = image.shape
    side = h // grid
    patches = image.reshape(grid, side, grid, side, c)
    patches = patches.transpose(0, 2, 1, 3, 4)
    return patches.reshape(grid * grid, side * side * c)


class DualEncoder:
    """Paired text/image transformer with a learned temperature.

    Weight buffers live in an ordered name->Tensor dict, so initialization,
    checkpointing, and hashing are all deterministic. A frozen instance
    never changes and records no gradients on its own account; gradient
    tracking through a frozen encoder happens only when prompt inputs
    require it.
    """

    def __init__(self, config: EncoderConfig, tokenizer: Tokenizer, seed=0, frozen=False):
        self.config = config
        self.tokenizer = tokenizer
        self.frozen = frozen
        self.weights = {}
        self._init_weights(seed)

    def _init_weights(self, seed):
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 20317]))
        trainable = not self.frozen

        def param(name, array):
            self.weights[name] = Tensor(array, requires_grad=trainable)

        def matrix(name, fan_in, fan_out):
            param(name, rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))

        # temperature is learned through its log so the contrastive loss
        # cannot run away by inflating tau early in training
        param("log_tau", np.log(TAU_INIT))
        param("text.tok_emb", rng.normal(0.0, 0.02, (self.tokenizer.size, cfg.width)))
        param("text.pos_emb", rng.normal(0.0, 0.01, (cfg.text_len, cfg.width)))
        self._init_branch("text", rng)
        matrix("img.patch.w", cfg.patch_dim, cfg.width)
        param("img.patch.b", np.zeros(cfg.width))
        param("img.pos_emb", rng.normal(0.0, 0.01, (cfg.num_patches, cfg.width)))
        self._init_branch("img", rng)

    def _init_branch(self, branch, rng):
        cfg = self.config
        trainable = not self.frozen

        def param(name, array):
            self.weights[name] = Tensor(array, requires_grad=trainable)

        def matrix(name, fan_in, fan_out):
            param(name, rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))

        w = cfg.width
        for j in range(cfg.layers):
            p = f"{branch}.h{j}."
            param(p + "ln1.g", np.ones(w))
            param(p + "ln1.b", np.zeros(w))
            for proj in ("wq", "wk", "wv", "wo"):
                matrix(p + "attn." + proj, w, w)
                param(p + "attn." + proj.replace("w", "b"), np.zeros(w))
            param(p + "ln2.g", np.ones(w))
            param(p + "ln2.b", np.zeros(w))
            matrix(p + "mlp.w1", w, 4 * w)
            param(p + "mlp.b1", np.zeros(4 * w))
            matrix(p + "mlp.w2", 4 * w, w)
            param(p + "mlp.b2", np.zeros(w))
        param(f"{branch}.lnf.g", np.ones(w))
        param(f"{branch}.lnf.b", np.zeros(w))
        matrix(f"{branch}.proj.w", w, cfg.embed_dim)
        param(f"{branch}.proj.b", np.zeros(cfg.embed_dim))

    # -- parameter plumbing --------------------------------------------------

    def param_items(self):
        return list(self.weights.items())

    def set_frozen(self, frozen):
        self.frozen = frozen
        for t in self.weights.values():
            t.requires_grad = not frozen

    def clone_frozen(self):
        clone = DualEncoder.__new__(DualEncoder)
        clone.config = self.config
        clone.tokenizer = self.tokenizer
        clone.frozen = True
        clone.weights = {name: Tensor(t.data) for name, t in self.weights.items()}
        return clone

    @property
    def tau(self):
        return float(np.exp(self.weights["log_tau"].item()))

    def weight_fingerprint(self):
        from .checkpoints import sha256_hex
        return sha256_hex(b"".join(t.data.tobytes() for t in self.weights.values()))

    # -- forward -------------------------------------------------------------

    def _block(self, branch, j, x):
        w = self.weights
        cfg = self.config
        p = f"{branch}.h{j}."
        s = x.shape[0]
        heads, hd = cfg.heads, cfg.width // cfg.heads

        h = ad.layernorm(x) * w[p + "ln1.g"] + w[p + "ln1.b"]
        q = h @ w[p + "attn.wq"] + w[p + "attn.bq"]
        k = h @ w[p + "attn.wk"] + w[p + "attn.bk"]
        v = h @ w[p + "attn.wv"] + w[p + "attn.bv"]
        q = ad.transpose(ad.reshape(q, (s, heads, hd)), (1, 0, 2))
        k = ad.transpose(ad.reshape(k, (s, heads, hd)), (1, 0, 2))
        v = ad.transpose(ad.reshape(v, (s, heads, hd)), (1, 0, 2))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
        att = ad.softmax(scores, axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (1, 0, 2)), (s, cfg.width))
        x = x + (o @ w[p + "attn.wo"] + w[p + "attn.bo"])

        h2 = ad.layernorm(x) * w[p + "ln2.g"] + w[p + "ln2.b"]
        x = x + (ad.gelu(h2 @ w[p + "mlp.w1"] + w[p + "mlp.b1"]) @ w[p + "mlp.w2"]
                 + w[p + "mlp.b2"])
        return x

    def _run_layers(self, branch, x, prompts):
        m = prompts[0].shape[0] if prompts else 0
        depth = len(prompts) if prompts else 0
        if m > 0 and depth > 0:
            x = ad.concat([prompts[0], x], axis=0)
        for j in range(self.config.layers):
            if m > 0 and 0 < j < depth:
                x = ad.concat([prompts[j], ad.slice_(x, slice(m, None))], axis=0)
            x = self._block(branch, j, x)
        return x, m

    def _project(self, branch, pooled):
        w = self.weights
        e = ad.reshape(pooled, (1, self.config.width)) @ w[f"{branch}.proj.w"]
        e = ad.reshape(e, (self.config.embed_dim,)) + w[f"{branch}.proj.b"]
        return ad.l2_normalize(e)

    def encode_text(self, tokens, prompts=None):
        """Encode a token id sequence into a unit-norm joint embedding.

        `prompts` is a list of per-layer (m, width) tensors; layer 0 is
        prepended, deeper prompted layers have their first m rows replaced.
        """
        cfg = self.config
        tokens = list(tokens)
        n = len(tokens)
        m = prompts[0].shape[0] if prompts else 0
        if n + m > cfg.text_len:
            raise ShapeError(
                f"text sequence of {n} tokens plus {m} prompts exceeds text_len {cfg.text_len}")
        if n == 0:
            raise ShapeError("encode_text: empty token sequence")
        w = self.weights
        x = ad.embedding_lookup(w["text.tok_emb"], tokens) + ad.slice_(w["text.pos_emb"], slice(0, n))
        x, m = self._run_layers("text", x, prompts)
        x = ad.layernorm(x) * w["text.lnf.g"] + w["text.lnf.b"]
        pooled = ad.slice_(x, m + n - 1)  # EOS position
        return self._project("text", pooled)

    def encode_image(self, image, prompts=None):
        """Encode an (image_size, image_size, channels) array in [0, 1]."""
        cfg = self.config
        img = np.asarray(image, dtype=np.float64)
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if img.shape != expected:
            raise ShapeError(f"image shape {img.shape} does not match {expected}")
        w = self.weights
        patches = Tensor(patchify(img, cfg.patch_grid))
        x = patches @ w["img.patch.w"] + w["img.patch.b"] + w["img.pos_emb"]
        x, m = self._run_layers("img", x, prompts)
        x = ad.layernorm(x) * w["img.lnf.g"] + w["img.lnf.b"]
        pooled = ad.mean(ad.slice_(x, slice(m, m + cfg.num_patches)), axis=0)
        return self._project("img", pooled)


# ---------------------------------------------------------------------------
# contrastive pre-training


@dataclass
class PretrainExample:
    pixels: np.ndarray
    captions: list   # token id sequences to sample from
    class_index: int  # position in the combined class list


@dataclass
class PretrainSplit:
    examples: list
    heldout: list
    class_templates: list  # template token ids per combined class
    num_classes: int


def build_pretrain_split(datasets, tokenizer, heldout_pool="val"):
    """Image/caption pairs over full class sets, mirroring broad pretraining."""
    examples, heldout, templates = [], [], []
    class_index = {}
    for ds in datasets:
        for cls in ds.manifest.classes:
            key = (ds.manifest.name, cls.id)
            class_index[key] = len(templates)
            templates.append(tokenizer.encode(f"a photo of a {cls.name}"))
            captions = [tokenizer.encode(f"a photo of a {cls.name}")]
            captions += [tokenizer.encode(d) for d in cls.descriptions]
            for idx in ds.pool_indices(cls.id, "train"):
                examples.append(PretrainExample(ds.records[idx].pixels, captions,
                                                class_index[key]))
            for idx in ds.pool_indices(cls.id, heldout_pool):
                heldout.append(PretrainExample(ds.records[idx].pixels, captions,
                                               class_index[key]))
    return PretrainSplit(examples, heldout, templates, len(templates))


def _clip_global_norm(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def retrieval_accuracy(enc, examples, class_templates):
    """Image-to-text retrieval over the class template sentences."""
    with ad.no_grad():
        text = np.stack([enc.encode_text(t).data for t in class_templates])
        correct = 0
        for ex in examples:
            img = enc.encode_image(ex.pixels).data
            correct += int(np.argmax(text @ img)) == ex.class_index
    return correct / len(examples)


def contrastive_pretrain(enc, split: PretrainSplit, epochs=6, lr=0.05,
                         batch_size=32, momentum=0.9, seed=0,
                         warmup_steps=30, tau_lr_scale=0.05, clip_norm=5.0):
    """Train the dual encoder with a symmetric in-batch contrastive loss.

    Batches are class-stratified (distinct classes, one example each): with
    class-level captions, same-class in-batch negatives are label noise, and
    removing them also keeps per-batch difficulty constant. Small-batch SGD
    on a contrastive objective is unstable without the standard guards, so
    the schedule warms up linearly then cosine-decays, gradients are clipped
    at a global norm, and the temperature learns at a reduced rate (in log
    space, clamped to [0.01, 100] after every step).

    Returns (encoder, history) with per-step losses and held-out retrieval
    accuracy.
    """
    if enc.frozen:
        raise ValueError("contrastive_pretrain: encoder is frozen")
    if split.num_classes < 2:
        raise ValueError("contrastive_pretrain: need at least 2 classes")
    if not split.examples:
        raise ValueError("contrastive_pretrain: empty dataset")

    log_tau = enc.weights["log_tau"]
    params = [t for name, t in enc.param_items() if name != "log_tau"]
    opt = ad.SGD(params, lr=lr, momentum=momentum)
    opt_tau = ad.SGD([log_tau], lr=lr * tau_lr_scale, momentum=momentum)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77001]))
    losses = []

    by_class = {}
    for ex in split.examples:
        by_class.setdefault(ex.class_index, []).append(ex)
    class_ids = sorted(by_class)
    per_batch = min(batch_size, len(class_ids))

    n = len(split.examples)
    steps = epochs * max(1, n // max(2, per_batch))
    for step in range(steps):
        if step < warmup_steps:
            scale = (step + 1) / warmup_steps
        else:
            progress = (step - warmup_steps) / max(1, steps - warmup_steps)
            scale = 0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * progress))
        opt.lr = lr * scale
        opt_tau.lr = lr * tau_lr_scale * scale

        chosen = rng.choice(len(class_ids), size=per_batch, replace=False)
        batch = []
        for c in chosen:
            members = by_class[class_ids[int(c)]]
            batch.append(members[int(rng.integers(len(members)))])
        img_embs, txt_embs = [], []
        for ex in batch:
            caption = ex.captions[int(rng.integers(len(ex.captions)))]
            img_embs.append(enc.encode_image(ex.pixels))
            txt_embs.append(enc.encode_text(caption))
        img = ad.stack_rows(img_embs)
        txt = ad.stack_rows(txt_embs)
        logits = ad.matmul(img, ad.transpose(txt, (1, 0))) / ad.exp(log_tau)
        labels = np.arange(len(batch))
        loss = 0.5 * (ad.cross_entropy_from_logits(logits, labels)
                      + ad.cross_entropy_from_logits(ad.transpose(logits, (1, 0)), labels))
        ad.backward(loss)
        _clip_global_norm(params + [log_tau], clip_norm)
        opt.step()
        opt_tau.step()
        log_tau.data = np.clip(log_tau.data, np.log(TAU_MIN), np.log(TAU_MAX))
        losses.append(loss.item())

    history = {"loss": losses, "tau": enc.tau}
    if split.heldout:
        history["retrieval_accuracy"] = retrieval_accuracy(enc, split.heldout,
                                                           split.class_templates)
        history["chance"] = 1.0 / split.num_classes
    return enc, history


# ---------------------------------------------------------------------------
# backbone checkpoints


BACKBONE_MANIFEST = "manifest.json"


def save_backbone(directory, enc: DualEncoder, extra=None):
    """Write config + vocab + per-weight f32 tensor files; returns content hash."""
    os.makedirs(directory, exist_ok=True)
    tensor_meta = {}
    for name, t in enc.param_items():
        sha = write_tensor(directory, name, t.data, dtype="f32")
        tensor_meta[name] = {"shape": list(t.data.shape), "sha256": sha}
    # displayed tau comes from the narrowed (f32) log_tau so that
    # save -> load -> save is a fixed point
    tau_meta = float(np.exp(enc.weights["log_tau"].data.astype("<f4").astype(np.float64)))
    meta = {
        "kind": "backbone",
        "format_version": 1,
        "config": asdict(enc.config),
        "vocab": enc.tokenizer.to_dict(),
        "tau": tau_meta,
    }
    if extra:
        meta["extra"] = extra
    chash = content_hash(meta, {k: v["sha256"] for k, v in tensor_meta.items()})
    manifest = dict(meta, tensors=tensor_meta, content_hash=chash)
    write_json(os.path.join(directory, BACKBONE_MANIFEST), manifest)
    return chash


def load_backbone(directory) -> DualEncoder:
    """Load a frozen backbone, verifying every tensor hash and shape."""
    manifest = read_json(os.path.join(directory, BACKBONE_MANIFEST))
    if manifest.get("kind") != "backbone":
        raise CheckpointError(f"{directory} is not a backbone checkpoint")
    config = EncoderConfig.from_dict(manifest["config"])
    tokenizer = Tokenizer.from_dict(manifest["vocab"])
    enc = DualEncoder(config, tokenizer, frozen=True)
    for name, info in manifest["tensors"].items():
        arr = read_tensor(directory, name, expected_sha=info["sha256"])
        if tuple(arr.shape) != tuple(info["shape"]):
            raise CheckpointError(f"shape mismatch for {name!r} in {directory}")
        if name not in enc.weights:
            raise CheckpointError(f"unexpected tensor {name!r} in {directory}")
        enc.weights[name] = Tensor(arr)
    missing = set(enc.weights) - set(manifest["tensors"])
    if missing:
        raise CheckpointError(f"missing tensors in {directory}: {sorted(missing)}")
    meta = {k: manifest[k] for k in ("kind", "format_version", "config", "vocab", "tau")}
    if "extra" in manifest:
        meta["extra"] = manifest["extra"]
    expect = content_hash(meta, {k: v["sha256"] for k, v in manifest["tensors"].items()})
    if expect != manifest["content_hash"]:
        raise CheckpointError(f"content hash mismatch in {directory}")
    return enc


def backbone_hash(directory) -> str:
    return read_json(os.path.join(directory, BACKBONE_MANIFEST))["content_hash"]
