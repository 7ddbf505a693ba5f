"""Class- and task-conditional denoising diffusion model.

Covers the full replay-generator lifecycle: noise schedules, the forward
noising map, the noise-prediction training loss, ancestral sampling, and
a registry that holds either one generator per task or a single unified
generator with task conditioning (FiLM on both class and task ids).
"""

import json
import zipfile
from dataclasses import dataclass, asdict, field

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, ShapeError, TrainingError

SCHEDULE_KINDS = ("linear", "cosine")
CONDITIONING = ("class_only", "class_plus_task_film")

DENOISER_PRESETS = {
    "desk": (16, 32),
    "paper": (64, 128, 256, 512),
}


@dataclass
class DiffusionSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate(self):
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ConfigError("beta must lie strictly inside (0, 1)")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ConfigError("alpha_bar must be strictly decreasing")
        return self


def build_schedule(kind, T):
    """Linear beta in [1e-4, 2e-2] or squared-cosine alpha_bar schedule."""
    if T < 2:
        raise ConfigError("schedule needs at least 2 timesteps")
    if kind == "linear":
        beta = np.linspace(1e-4, 2e-2, T)
    elif kind == "cosine":
        s = 0.008
        i = np.arange(T + 1)
        f = np.cos(((i / T) + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(kind, T, beta, alpha, alpha_bar).validate()


def forward_noise(x0, t, eps, schedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, t in 1..T."""
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 1 or t.max() > schedule.T:
        raise ContractError(f"t must lie in [1, {schedule.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ShapeError("eps must match x0 in shape")
    ab = schedule.alpha_bar[t - 1]
    if t.ndim > 0:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _groups(channels):
    g = 8
    while channels % g:
        g //= 2
    return max(g, 1)


class _ResBlock(nn.Module):
    """GN -> SiLU -> conv, FiLM scale/shift from the conditioning vector,
    GN -> SiLU -> conv, plus a (possibly projected) residual path."""

    def __init__(self, c_in, c_out, emb_dim, rng):
        super().__init__()
        self.gn1 = self.add_module("gn1", nn.GroupNorm(_groups(c_in), c_in))
        self.conv1 = self.add_module("conv1", nn.Conv2d(c_in, c_out, 3, 1, rng))
        self.film = self.add_module("film", nn.Linear(emb_dim, 2 * c_out, rng,
                                                      init_std=emb_dim ** -0.5))
        self.gn2 = self.add_module("gn2", nn.GroupNorm(_groups(c_out), c_out))
        self.conv2 = self.add_module("conv2", nn.Conv2d(c_out, c_out, 3, 1, rng))
        self.skip = None
        if c_in != c_out:
            self.skip = self.add_module("skip", nn.Conv2d(c_in, c_out, 1, 0, rng))
        self.act1 = nn.Silu()
        self.act2 = nn.Silu()
        self.act_e = nn.Silu()

    def forward(self, x, emb):
        h = self.conv1.forward(self.act1.forward(self.gn1.forward(x)))
        se = self.film.forward(self.act_e.forward(emb))
        c = h.shape[1]
        scale = se[:, :c, None, None]
        shift = se[:, c:, None, None]
        self._gn2_out = self.gn2.forward(h)
        self._scale = scale
        h = self._gn2_out * (1.0 + scale) + shift
        h = self.conv2.forward(self.act2.forward(h))
        res = self.skip.forward(x) if self.skip is not None else x
        return h + res

    def backward(self, dy):
        dh = self.act2.backward(self.conv2.backward(dy))
        dscale = (dh * self._gn2_out).sum(axis=(2, 3))
        dshift = dh.sum(axis=(2, 3))
        demb = self.act_e.backward(self.film.backward(np.concatenate([dscale, dshift], axis=1)))
        dgn2 = dh * (1.0 + self._scale)
        dx = self.gn1.backward(self.act1.backward(self.conv1.backward(self.gn2.backward(dgn2))))
        dx = dx + (self.skip.backward(dy) if self.skip is not None else dy)
        return dx, demb


@dataclass
class DenoiserConfig:
    image_size: tuple = (16, 16, 1)
    num_classes: int = 6
    num_tasks: int = 3
    channels: tuple = (16, 32)
    emb_dim: int = 64
    conditioning: str = "class_only"
    time_dim: int = 32

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.channels = tuple(self.channels)
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"conditioning must be one of {CONDITIONING}")
        side = self.image_size[0]
        if side % (2 ** (len(self.channels) - 1)):
            raise ConfigError("image side must be divisible by 2^(levels-1)")


class Denoiser(nn.Module):
    """Small conditional U-Net noise predictor eps(x_t, t, y[, task])."""

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        self.seed = seed
        # classes this generator was actually trained on (per_task mode)
        self.class_set = None
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 90210]))
        c = config
        chs = c.channels
        img_c = c.image_size[2]
        self.t_fc1 = self.add_module("t_fc1", nn.Linear(c.time_dim, c.emb_dim, rng,
                                                        init_std=c.time_dim ** -0.5))
        self.t_act = nn.Silu()
        self.t_fc2 = self.add_module("t_fc2", nn.Linear(c.emb_dim, c.emb_dim, rng,
                                                        init_std=c.emb_dim ** -0.5))
        # embeddings carry the conditioning signal; give them unit-ish scale
        self.class_emb = self.add_module("class_emb",
                                         nn.Embedding(c.num_classes, c.emb_dim, rng, init_std=0.5))
        if c.conditioning == "class_plus_task_film":
            self.task_emb = self.add_module("task_emb",
                                            nn.Embedding(c.num_tasks, c.emb_dim, rng, init_std=0.5))
        else:
            self.task_emb = None
        self.conv_in = self.add_module("conv_in", nn.Conv2d(img_c, chs[0], 3, 1, rng))
        self.downs = []
        prev = chs[0]
        for i in range(len(chs) - 1):
            self.downs.append(self.add_module(f"down{i}", _ResBlock(prev, chs[i], c.emb_dim, rng)))
            prev = chs[i]
        self.pool = [nn.AvgPool2() for _ in range(len(chs) - 1)]
        self.bottom1 = self.add_module("bottom1", _ResBlock(prev, chs[-1], c.emb_dim, rng))
        self.bottom2 = self.add_module("bottom2", _ResBlock(chs[-1], chs[-1], c.emb_dim, rng))
        self.ups = []
        self.upsample = [nn.UpsampleNearest2() for _ in range(len(chs) - 1)]
        prev = chs[-1]
        for i in reversed(range(len(chs) - 1)):
            self.ups.append(self.add_module(f"up{i}", _ResBlock(prev + chs[i], chs[i], c.emb_dim, rng)))
            prev = chs[i]
        self.gn_out = self.add_module("gn_out", nn.GroupNorm(_groups(chs[0]), chs[0]))
        self.act_out = nn.Silu()
        self.conv_out = self.add_module("conv_out", nn.Conv2d(chs[0], img_c, 3, 1, rng, zero_init=True))

    def _cond(self, t, labels, task_ids):
        temb = nn.timestep_embedding(t, self.config.time_dim)
        e = self.t_fc2.forward(self.t_act.forward(self.t_fc1.forward(temb)))
        e = e + self.class_emb.forward(labels)
        if self.task_emb is not None:
            if task_ids is None:
                raise ContractError("unified conditioning requires task ids")
            e = e + self.task_emb.forward(np.asarray(task_ids) - 1)
        return e

    def forward(self, x, t, labels, task_ids=None):
        """x: [B,C,H,W] float64, t: [B] int in 1..T, labels: [B] int."""
        emb = self._cond(t, labels, task_ids)
        self._demb = np.zeros_like(emb)
        h = self.conv_in.forward(x)
        skips = []
        for block, pool in zip(self.downs, self.pool):
            h = block.forward(h, emb)
            skips.append(h)
            h = pool.forward(h)
        h = self.bottom1.forward(h, emb)
        h = self.bottom2.forward(h, emb)
        for block, up, skip in zip(self.ups, self.upsample, reversed(skips)):
            h = up.forward(h)
            h = np.concatenate([h, skip], axis=1)
            h = block.forward(h, emb)
        self._split = [s.shape[1] for s in skips]
        return self.conv_out.forward(self.act_out.forward(self.gn_out.forward(h)))

    def backward(self, dout):
        h = self.gn_out.backward(self.act_out.backward(self.conv_out.backward(dout)))
        demb = self._demb
        # the last up block consumed skips[0], so backward yields dskips in order
        dskips = []
        for block, up in zip(reversed(self.ups), reversed(self.upsample)):
            h, de = block.backward(h)
            demb += de
            skip_c = self._split[len(dskips)]
            dskips.append(h[:, -skip_c:])
            h = up.backward(np.ascontiguousarray(h[:, :-skip_c]))
        h, de = self.bottom2.backward(h)
        demb += de
        h, de = self.bottom1.backward(h)
        demb += de
        for i in reversed(range(len(self.downs))):
            d = self.pool[i].backward(h) + dskips[i]
            h, de = self.downs[i].backward(d)
            demb += de
        dx = self.conv_in.backward(h)
        # conditioning pathway
        if self.task_emb is not None:
            self.task_emb.backward(demb)
        self.class_emb.backward(demb)
        self.t_fc1.backward(self.t_act.backward(self.t_fc2.backward(demb)))
        return dx

    # ------------------------------------------------------------------
    CHECKPOINT_VERSION = 1

    def save(self, path):
        meta = {
            "version": self.CHECKPOINT_VERSION,
            "kind": "denoiser",
            "seed": self.seed,
            "class_set": list(self.class_set) if self.class_set is not None else None,
            "config": asdict(self.config),
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
            zf.writestr("params.f64", self.flat_params().astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            payload = zf.read("params.f64")
        if meta.get("kind") != "denoiser":
            raise ConfigError("checkpoint is not a denoiser container")
        cfg = meta["config"]
        cfg["image_size"] = tuple(cfg["image_size"])
        cfg["channels"] = tuple(cfg["channels"])
        model = cls(DenoiserConfig(**cfg), seed=meta["seed"])
        model.set_flat_params(np.frombuffer(payload, dtype="<f8").astype(np.float64))
        if meta["class_set"] is not None:
            model.class_set = tuple(meta["class_set"])
        return model


@dataclass
class GeneratorRegistry:
    mode: str = "per_task"            # or "unified"
    per_task: dict = field(default_factory=dict)
    unified: Denoiser = None

    def __post_init__(self):
        if self.mode not in ("per_task", "unified"):
            raise ConfigError(f"unknown registry mode {self.mode!r}")

    def store(self, task_id, state):
        if self.mode == "per_task":
            self.per_task[task_id] = state
        else:
            self.unified = state

    def get(self, task_id):
        if self.mode == "per_task":
            if task_id not in self.per_task:
                raise ContractError(f"no generator stored for task {task_id}")
            return self.per_task[task_id]
        if self.unified is None:
            raise ContractError("unified generator has not been trained")
        return self.unified

    def __len__(self):
        return len(self.per_task) if self.mode == "per_task" else int(self.unified is not None)


def _to_nchw(images):
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2))


def _to_nhwc(images):
    return np.ascontiguousarray(images.transpose(0, 2, 3, 1))


def ddpm_loss(state, batch, schedule, rng, with_grad=False):
    """Noise-prediction MSE on one batch.

    batch is (x0, labels) or (x0, labels, task_ids) with x0 in NHWC.
    Draws t ~ U[1, T] and eps ~ N(0, I) per example; the loss averages the
    squared error over batch and pixels. With with_grad=True the state's
    parameter gradients are populated and (loss, flat_grad) is returned.
    """
    x0, labels = batch[0], batch[1]
    task_ids = batch[2] if len(batch) > 2 else None
    if len(x0) == 0:
        raise ContractError("ddpm_loss needs a nonempty batch")
    x0 = _to_nchw(x0)
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    eps_hat = state.forward(x_t, t, labels, task_ids)
    diff = eps_hat - eps
    loss = float((diff * diff).mean())
    if not with_grad:
        return loss
    state.zero_grad()
    state.backward(2.0 * diff / diff.size)
    return loss, state.flat_grads()


def sample(state, labels, schedule, rng, task_ids=None, chunk=256):
    """Ancestral reverse-chain sampling, one image per label, clipped to [0,1].

    Each step forms the standard posterior mean from the predicted noise;
    the implied x0 is clamped to the data range first (the usual DDPM
    stabilization), which leaves the mean unchanged whenever the
    prediction is already consistent with [0, 1] data.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if state.class_set is not None:
        unknown = set(labels.tolist()) - set(state.class_set)
        if unknown:
            raise ContractError(f"generator was never trained on classes {sorted(unknown)}")
    h, w, c = state.config.image_size
    outs = []
    for start in range(0, len(labels), chunk):
        lab = labels[start:start + chunk]
        tids = None if task_ids is None else np.asarray(task_ids)[start:start + chunk]
        n = len(lab)
        x = rng.standard_normal((n, c, h, w))
        for t in range(schedule.T, 0, -1):
            beta = schedule.beta[t - 1]
            alpha = schedule.alpha[t - 1]
            ab = schedule.alpha_bar[t - 1]
            ab_prev = schedule.alpha_bar[t - 2] if t > 1 else 1.0
            t_vec = np.full(n, t, dtype=np.int64)
            eps_hat = state.forward(x, t_vec, lab, tids)
            x0 = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), 0.0, 1.0)
            x = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 \
                + (np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * x
            if t > 1:
                x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
        outs.append(np.clip(_to_nhwc(x), 0.0, 1.0).astype(np.float32))
    return np.concatenate(outs)


def train_generator(state, dataset, schedule, epochs, opt_params=None, seed=0,
                    batch_size=64, task_id=None):
    """Train the noise predictor on one task; returns (state, loss trace)."""
    opt_params = dict(opt_params or {})
    opt_params.setdefault("lr", 1e-3)
    opt_params.setdefault("weight_decay", 0.0)
    opt_params.setdefault("betas", (0.9, 0.999))
    opt = nn.AdamW(state, **opt_params)
    trace = []
    task_arr = None if task_id is None else np.asarray(task_id, dtype=np.int64)
    if state.task_emb is not None and task_arr is None:
        raise ContractError("unified training requires task ids")
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 555, epoch]))
        perm = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            task_col = None
            if task_arr is not None:
                task_col = (np.full(len(idx), int(task_arr), dtype=np.int64)
                            if task_arr.ndim == 0 else task_arr[idx])
            batch = (dataset.images[idx], dataset.labels[idx], task_col)
            loss, grad = ddpm_loss(state, batch, schedule, rng, with_grad=True)
            if not np.isfinite(loss):
                raise TrainingError("diffusion loss diverged", stage="train_generator",
                                    epoch=epoch)
            opt.step()
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    if epochs > 0:
        known = set(state.class_set or ()) | set(dataset.class_set)
        state.class_set = tuple(sorted(known))
    return state, trace
