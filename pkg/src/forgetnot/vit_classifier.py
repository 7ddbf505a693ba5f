"""Compact Vision Transformer classifier with a growable class head.

The model is a plain pre-norm ViT: patch embedding, learned [CLS] token
and positional embeddings, a stack of attention/MLP blocks, and a 2-layer
MLP head whose final per-class rows live at the *end* of the flat
parameter vector. Growing the label set appends rows there, so the flat
index of every pre-existing parameter never moves (EWC anchors depend on
this).
"""

import json
import zipfile
from dataclasses import dataclass, asdict, replace as dc_replace

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, ShapeError

HEAD_KINDS = ("softmax", "sigmoid")

PRESETS = {
    # trainable on a laptop CPU; used by tests and the synthetic experiments
    "desk": dict(patch_size=4, depth=4, heads=4, hidden_dim=128, mlp_dim=256,
                 image_size=(28, 28, 1)),
    # main-text configuration (224px inputs); kept for completeness
    "paper_main": dict(patch_size=16, depth=6, heads=8, hidden_dim=512, mlp_dim=1024,
                       image_size=(224, 224, 3)),
    # appendix configuration; neither preset is canonical
    "paper_appendix": dict(patch_size=16, depth=4, heads=4, hidden_dim=256, mlp_dim=512,
                           image_size=(224, 224, 3)),
}


@dataclass
class ViTConfig:
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    hidden_dim: int = 128
    mlp_dim: int = 256
    num_classes: int = 2
    head_kind: str = "softmax"
    image_size: tuple = (28, 28, 1)
    dropout: float = 0.0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        h, w, _ = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError("image height/width must be divisible by patch_size")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        fields = dict(PRESETS[name])
        fields.update(overrides)
        return cls(**fields)

    @property
    def num_patches(self):
        h, w, _ = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)


def patchify(image, patch_size):
    """Split [H,W,C] (or [B,H,W,C]) into row-major patches [(B,)N, P*P*C]."""
    squeeze = image.ndim == 3
    x = image[None] if squeeze else image
    b, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image dims {(h, w)} not divisible by patch size {p}")
    x = x.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)
    return x[0] if squeeze else x


def unpatchify(patches, patch_size, image_size):
    """Inverse of :func:`patchify`; bit-exact."""
    h, w, c = image_size
    p = patch_size
    squeeze = patches.ndim == 2
    x = patches[None] if squeeze else patches
    b = x.shape[0]
    x = x.reshape(b, h // p, w // p, p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    return x[0] if squeeze else x


class _Block(nn.Module):
    def __init__(self, cfg, rng):
        super().__init__()
        d = cfg.hidden_dim
        self.ln1 = self.add_module("ln1", nn.LayerNorm(d))
        self.attn = self.add_module("attn", nn.MultiHeadAttention(d, cfg.heads, rng,
                                                                  init_std=d ** -0.5,
                                                                  mask_first_self=True))
        self.ln2 = self.add_module("ln2", nn.LayerNorm(d))
        self.fc1 = self.add_module("fc1", nn.Linear(d, cfg.mlp_dim, rng, init_std=d ** -0.5))
        self.gelu = nn.Gelu()
        self.fc2 = self.add_module("fc2", nn.Linear(cfg.mlp_dim, d, rng,
                                                    init_std=cfg.mlp_dim ** -0.5))
        self.drop_attn = nn.Dropout(cfg.dropout)
        self.drop_mlp = nn.Dropout(cfg.dropout)

    def forward(self, x, rng=None, training=False):
        x = x + self.drop_attn.forward(self.attn.forward(self.ln1.forward(x)), rng, training)
        h = self.fc2.forward(self.gelu.forward(self.fc1.forward(self.ln2.forward(x))))
        return x + self.drop_mlp.forward(h, rng, training)

    def backward(self, dy):
        dh = self.drop_mlp.backward(dy)
        dx = dy + self.ln2.backward(self.fc1.backward(self.gelu.backward(self.fc2.backward(dh))))
        da = self.drop_attn.backward(dx)
        return dx + self.ln1.backward(self.attn.backward(da))


class ViTClassifier(nn.Module):
    """f_theta: images -> logits over the cumulative label set.

    Head rows are keyed by position; ``class_ids[row]`` records which
    global class id each row serves (rows are appended in order of first
    appearance, so reversed task orders work unchanged).
    """

    def __init__(self, config, seed=0, class_ids=None):
        super().__init__()
        self.config = dc_replace(config)   # head growth mutates num_classes
        config = self.config
        self.seed = seed
        if class_ids is None:
            class_ids = list(range(config.num_classes))
        if len(class_ids) != config.num_classes:
            raise ConfigError("class_ids must have one entry per head row")
        self.class_ids = [int(c) for c in class_ids]
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 42001]))
        c = config
        patch_dim = c.patch_size * c.patch_size * c.image_size[2]
        # input projection at LeCun scale: the patch signal must dominate the
        # constant token components or sequential tasks starve for gradient
        self.patch_embed = self.add_module(
            "patch_embed", nn.Linear(patch_dim, c.hidden_dim, rng,
                                     init_std=patch_dim ** -0.5))
        self.cls_token = self.add_param("cls_token", nn.trunc_normal((1, 1, c.hidden_dim), 0.02, rng))
        # learned positional embeddings, zero-initialized
        self.pos_embed = self.add_param("pos_embed", np.zeros((1, c.num_patches + 1, c.hidden_dim)))
        self.blocks = [self.add_module(f"block{i}", _Block(c, rng)) for i in range(c.depth)]
        self.final_ln = self.add_module("final_ln", nn.LayerNorm(c.hidden_dim))
        self.head_hidden = self.add_module(
            "head_hidden", nn.Linear(c.hidden_dim, c.hidden_dim, rng,
                                     init_std=c.hidden_dim ** -0.5))
        self.head_gelu = nn.Gelu()
        # per-class rows [C, hidden+1] (weights | bias); zero-init, registered last
        self.head_out = self.add_param("head_out", np.zeros((c.num_classes, c.hidden_dim + 1)))

    @property
    def num_classes(self):
        return self.head_out.shape[0]

    def _check_images(self, images):
        if images.ndim != 4 or tuple(images.shape[1:]) != self.config.image_size:
            raise ShapeError(
                f"expected images [B,{self.config.image_size}], got {images.shape}")

    def forward(self, images, rng=None, training=False):
        """Logits [B, num_classes]; caches everything backward needs."""
        self._check_images(images)
        x = patchify(np.asarray(images, dtype=np.float64), self.config.patch_size)
        x = self.patch_embed.forward(x)
        b = x.shape[0]
        cls = np.broadcast_to(self.cls_token, (b, 1, x.shape[2]))
        x = np.concatenate([cls, x], axis=1) + self.pos_embed
        for block in self.blocks:
            x = block.forward(x, rng, training)
        x = self.final_ln.forward(x)
        self._x_shape = x.shape
        self._feat = x[:, 0, :]
        h = self.head_gelu.forward(self.head_hidden.forward(self._feat))
        self._head_h = h
        return h @ self.head_out[:, :-1].T + self.head_out[:, -1]

    def backward(self, dlogits):
        """Backprop from dL/dlogits; accumulates parameter gradients."""
        w = self.head_out[:, :-1]
        self._grads["head_out"][:, :-1] += dlogits.T @ self._head_h
        self._grads["head_out"][:, -1] += dlogits.sum(axis=0)
        dh = dlogits @ w
        dfeat = self.head_hidden.backward(self.head_gelu.backward(dh))
        dx = np.zeros(self._x_shape)
        dx[:, 0, :] = dfeat
        dx = self.final_ln.backward(dx)
        for block in reversed(self.blocks):
            dx = block.backward(dx)
        dpatches = self.patch_embed.backward(dx[:, 1:, :])
        self._grads["pos_embed"] += dx.sum(axis=0, keepdims=True)
        self._grads["cls_token"] += dx[:, :1, :].sum(axis=0, keepdims=True)
        return dpatches

    def features(self, images):
        """Penultimate [CLS] representation (input of the head MLP)."""
        self.forward(images)
        return self._feat.copy()

    def predict_proba(self, images):
        logits = self.forward(images)
        if self.config.head_kind == "softmax":
            return nn.softmax(logits)
        return 1.0 / (1.0 + np.exp(-logits))

    def expand_head(self, new_num_classes, new_class_ids=None):
        """Grow the label set; old rows copy over, new rows start at zero."""
        old = self.num_classes
        if new_num_classes <= old:
            raise ContractError(
                f"head can only grow: have {old} classes, asked for {new_num_classes}")
        grown = np.zeros((new_num_classes, self.head_out.shape[1]))
        grown[:old] = self.head_out
        self.head_out = self.replace_param("head_out", grown)
        self.config.num_classes = new_num_classes
        if new_class_ids is None:
            new_class_ids = range(old, new_num_classes)
        self.class_ids = self.class_ids + [int(c) for c in new_class_ids]
        if len(self.class_ids) != new_num_classes:
            raise ContractError("one new class id needed per appended row")
        return self

    def ensure_classes(self, class_list):
        """Expand the head so every listed global class id has a row."""
        missing = [c for c in class_list if c not in self.class_ids]
        if missing:
            self.expand_head(self.num_classes + len(missing), missing)
        return self

    def rows_for(self, labels):
        """Map global class ids to head rows; unknown ids are an error."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.asarray([lookup[int(c)] for c in np.asarray(labels).ravel()],
                              dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"class {exc.args[0]} has no head row yet") from None

    def predict_labels(self, images):
        """Argmax prediction mapped back to global class ids."""
        logits = self.forward(images)
        ids = np.asarray(self.class_ids, dtype=np.int64)
        return ids[logits.argmax(axis=1)]

    def loss_and_grad(self, images, labels, rng=None, training=False):
        """Mean classification loss and its flat parameter gradient."""
        logits = self.forward(images, rng, training)
        loss, dlogits = loss_classification(logits, labels, self.config.head_kind,
                                            reduce_only=False)
        self.zero_grad()
        self.backward(dlogits)
        return loss, self.flat_grads()

    # ------------------------------------------------------------------
    # checkpointing: versioned zip container, bit-exact roundtrip
    CHECKPOINT_VERSION = 1

    def save(self, path):
        meta = {
            "version": self.CHECKPOINT_VERSION,
            "kind": "vit_classifier",
            "seed": self.seed,
            "class_ids": self.class_ids,
            "config": asdict(self.config),
            "index": {k: [int(off), list(shape)] for k, (off, shape) in self.param_index().items()},
        }
        payload = self.flat_params().astype("<f8").tobytes()
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
            zf.writestr("params.f64", payload)

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            payload = zf.read("params.f64")
        if meta.get("kind") != "vit_classifier":
            raise ConfigError("checkpoint is not a classifier container")
        cfg = meta["config"]
        cfg["image_size"] = tuple(cfg["image_size"])
        model = cls(ViTConfig(**cfg), seed=meta["seed"], class_ids=meta["class_ids"])
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        model.set_flat_params(flat)
        saved_index = {k: (v[0], tuple(v[1])) for k, v in meta["index"].items()}
        if saved_index != {k: (off, tuple(shape)) for k, (off, shape) in model.param_index().items()}:
            raise ConfigError("checkpoint index map does not match rebuilt model")
        return model


def loss_classification(logits, labels, head_kind, reduce_only=True):
    """Mean CE (softmax head) or mean per-class BCE (sigmoid head).

    Returns the scalar loss, or (loss, dlogits) when reduce_only=False.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError(
            f"label outside [0, {logits.shape[1]}) for the current head")
    if head_kind == "softmax":
        loss, dlogits = nn.softmax_cross_entropy(logits, labels)
    elif head_kind == "sigmoid":
        loss, dlogits = nn.sigmoid_bce(logits, labels)
    else:
        raise ConfigError(f"unknown head_kind {head_kind!r}")
    return loss if reduce_only else (loss, dlogits)


def accuracy(model, dataset, batch_size=256):
    """Mean top-1 accuracy on a dataset, predicting over all head rows."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        correct += int((model.predict_labels(imgs) == labels).sum())
    return correct / len(dataset)


def scores_and_rows(model, dataset, batch_size=256):
    """Class-probability scores plus row-index labels for AUC computation."""
    scores, rows = [], []
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        scores.append(model.predict_proba(imgs))
        rows.append(model.rows_for(labels))
    return np.concatenate(scores), np.concatenate(rows)
