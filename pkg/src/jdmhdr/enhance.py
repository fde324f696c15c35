"""Prior-guided bilateral-grid enhancement network.

Pipeline per image: brightness adaptation of the shading prior, Retinex
division of the RGB and Lr-MSI streams, a strided feature stack with one
spectral-perception attention block per level, per-expert semantic modulation,
per-expert grid heads mixed by material area fractions, guidance, slicing,
affine application and recomposition with the adapted shading.

Tensors are NCHW. Experts are stacked along the batch axis as ``e * N + n``
from the first feature level on, and per-expert weights use grouped
convolutions, so all experts run in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .grid import (IDENTITY_AFFINE, N_COEFFS, N_KNOTS, BilateralGrid, apply_affine_t,
                   guidance_map_t, slice_grid_t)
from .optim import OptimState, adam_step, cosine_lr

SHAT_FLOOR = 1e-4
EXPERT_GROUPS = {
    1: ((0, 1, 2, 3, 4, 5),),
    2: ((2, 1, 3), (0, 4, 5)),
    4: ((1, 3), (0, 4), (2,), (5,)),
    6: ((0,), (1,), (2,), (3,), (4,), (5,)),
}


@dataclass
class EnhanceConfig:
    full: int = 64
    lowres: int = 32
    grid: tuple = (8, 8, 8)           # grid_h, grid_w, depth
    widths: tuple = (8, 16)           # per-stream channels per feature level
    n_experts: int = 6
    msi_bands: int = 10
    use_s: bool = True
    use_r: bool = True
    use_m: bool = True
    groups: tuple | None = None       # explicit label groups, overrides n_experts
    adapt_width: int = 8
    map_width: int = 4
    head_width: int = 16
    seed: int = 0
    lr: float = 1e-4
    batch: int = 4
    steps: int = 500
    schedule: str = "constant"        # or "cosine"

    @classmethod
    def toy(cls, **kw) -> "EnhanceConfig":
        return cls(**kw)

    @classmethod
    def large(cls, **kw) -> "EnhanceConfig":
        base = dict(full=512, lowres=256, grid=(16, 16, 8), widths=(8, 16, 32, 64))
        base.update(kw)
        return cls(**base)

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.widths = tuple(self.widths)
        if self.groups is not None:
            self.groups = tuple(tuple(g) for g in self.groups)
        if self.use_m and self.groups is None and self.n_experts not in EXPERT_GROUPS:
            raise ValueError(f"n_experts must be one of {sorted(EXPERT_GROUPS)}")
        gh, gw, _ = self.grid
        if gh != gw or self.lowres != gh * 2 ** len(self.widths):
            raise ValueError(f"lowres {self.lowres} must equal grid size {gh} * 2^{len(self.widths)}")
        if self.full % 4:
            raise ValueError("full resolution must be a multiple of 4")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def expert_groups(self) -> tuple:
        if not self.use_m:
            return EXPERT_GROUPS[1]
        return self.groups if self.groups is not None else EXPERT_GROUPS[self.n_experts]

    @property
    def n_active_experts(self) -> int:
        return len(self.expert_groups)

    def to_dict(self) -> dict:
        """JSON-ready training config; the full-resolution crop is stored as ``crop``."""
        d = asdict(self)
        d["crop"] = d.pop("full")
        d["grid"] = list(self.grid)
        d["widths"] = list(self.widths)
        d["groups"] = None if self.groups is None else [list(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnhanceConfig":
        d = dict(d)
        if "crop" in d:
            d["full"] = d.pop("crop")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# parameters ---------------------------------------------------------------------------

def init_enhance_params(config: EnhanceConfig) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(config.seed)
    p: dict[str, T.Tensor] = {}

    def add(name, shape, zero=False, gain=1.0, value=None):
        if value is not None:
            data = np.array(value, dtype=np.float64).reshape(shape)
        elif zero:
            data = np.zeros(shape)
        else:
            data = T.xavier_uniform(shape, rng, gain)
        p[name] = T.parameter(data, name)

    a = config.adapt_width
    add("adapt.c1.w", (a, 1, 3, 3)); add("adapt.c1.b", (a,), zero=True)
    add("adapt.c2.w", (a, a, 3, 3)); add("adapt.c2.b", (a,), zero=True)
    add("adapt.d1.w", (a, a, 4, 4)); add("adapt.d1.b", (a,), zero=True)
    add("adapt.d2.w", (a, 1, 4, 4), zero=True); add("adapt.d2.b", (1,), zero=True)

    e = config.n_active_experts
    if config.use_m:
        m = config.map_width
        add("map.c1.w", (e * m, 1, 3, 3)); add("map.c1.b", (e * m,), zero=True)
        add("map.c2.w", (e * m, m, 3, 3)); add("map.c2.b", (e * m,), zero=True)
        add("map.d1.w", (e * m, m, 4, 4)); add("map.d1.b", (e * m,), zero=True)
        add("map.d2.w", (e * m, 1, 4, 4)); add("map.d2.b", (e,), zero=True)

    c_rgb, c_msi = 3, config.msi_bands
    for lvl, c in enumerate(config.widths):
        pre = f"l{lvl}"
        add(f"{pre}.conv_rgb.w", (c, c_rgb, 3, 3)); add(f"{pre}.conv_rgb.b", (c,), zero=True)
        add(f"{pre}.conv_msi.w", (c, c_msi, 3, 3)); add(f"{pre}.conv_msi.b", (c,), zero=True)
        cc = 2 * c
        for qkv in ("q", "k", "v"):
            add(f"{pre}.{qkv}.w3", (cc, 1, 3, 3))
            add(f"{pre}.{qkv}.w1", (cc, cc, 1, 1))
        add(f"{pre}.out_msi.hat_w3", (c, cc, 3, 3), zero=True)
        add(f"{pre}.out_rgb.hat_w3", (c, cc, 3, 3), zero=True)
        add(f"{pre}.out_msi.w3", (c, 1, 3, 3))
        add(f"{pre}.out_rgb.w3", (c, 1, 3, 3))
        add(f"{pre}.sigma", (1,), value=[1.0 / math.sqrt(cc)])
        if config.use_m:
            m = config.map_width
            add(f"{pre}.mod.c1.w", (e * m, 1, 3, 3)); add(f"{pre}.mod.c1.b", (e * m,), zero=True)
            add(f"{pre}.mod.c2.w", (e * 4 * cc, m, 3, 3), zero=True)
            add(f"{pre}.mod.c2.b", (e * 4 * cc,), zero=True)
        c_rgb = c_msi = c

    cl = 2 * config.widths[-1]
    hw_ = config.head_width
    depth = config.grid[2]
    add("head.local.w", (e * hw_, cl, 3, 3)); add("head.local.b", (e * hw_,), zero=True)
    add("head.global.w", (e * hw_, cl, 1, 1)); add("head.global.b", (e * hw_,), zero=True)
    add("head.out.w", (e * depth * N_COEFFS, hw_, 1, 1), gain=0.1)
    add("head.out.b", (e * depth * N_COEFFS,), value=np.tile(IDENTITY_AFFINE, e * depth))

    slopes = np.zeros((3, N_KNOTS))
    slopes[:, 0] = 1.0
    add("guide.ccm", (3, 3), value=np.eye(3))
    add("guide.bias", (3,), zero=True)
    add("guide.slopes", (3, N_KNOTS), value=slopes)
    add("guide.mixer", (3,), value=np.full(3, 1.0 / 3.0))
    return p


def identity_params(config: EnhanceConfig) -> dict[str, T.Tensor]:
    """Parameters whose grid heads emit the identity affine everywhere."""
    p = init_enhance_params(config)
    p["head.out.w"].data[:] = 0.0
    return p


def extract_expert(params: dict[str, T.Tensor], config: EnhanceConfig, i: int):
    """Single-expert (config, params) computing exactly expert ``i`` of ``params``."""
    if not config.use_m:
        raise ValueError("extraction needs a multi-expert configuration")
    e = config.n_active_experts
    sub = replace(config, groups=(config.expert_groups[i],))
    out = {}
    for name, t in params.items():
        data = t.data
        if name.startswith(("map.", "head.")) or ".mod." in name:
            k = data.shape[0] // e
            data = data[i * k:(i + 1) * k]
        out[name] = T.parameter(data.copy(), name)
    return sub, out


# building blocks ----------------------------------------------------------------------

def inv_softplus(y: T.Tensor) -> T.Tensor:
    return T.log(T.exp(y) - 1.0)


def brightness_adapt(s: T.Tensor, p: dict[str, T.Tensor]) -> T.Tensor:
    """S_hat = softplus(softplus^-1(s) + r(s)) + 1e-4 with r a two-conv, two-deconv stack.

    The last deconvolution starts at zero, so S_hat equals s at initialization.
    """
    h = T.relu(T.conv2d(s, p["adapt.c1.w"], 2, 1, bias=p["adapt.c1.b"]))
    h = T.relu(T.conv2d(h, p["adapt.c2.w"], 2, 1, bias=p["adapt.c2.b"]))
    h = T.relu(T.conv_transpose2d(h, p["adapt.d1.w"], 2, 1, bias=p["adapt.d1.b"]))
    r = T.conv_transpose2d(h, p["adapt.d2.w"], 2, 1, bias=p["adapt.d2.b"])
    base = inv_softplus(T.clip(s - SHAT_FLOOR, 1e-8, math.inf))
    return T.softplus(base + r) + SHAT_FLOOR


def _proj(x, p, name):
    c = x.shape[1]
    return T.conv2d(T.conv2d(x, p[f"{name}.w3"], 1, 1, groups=c), p[f"{name}.w1"])


def modulate(x: T.Tensor, alpha: T.Tensor, beta: T.Tensor) -> T.Tensor:
    """(1 + alpha) * x + beta."""
    return x * (alpha + 1.0) + beta


def spsa_forward(f_msi: T.Tensor, f_rgb: T.Tensor, p: dict[str, T.Tensor], prefix: str,
                 mod: tuple | None = None):
    """Spectral-perception self-attention on the concatenated streams.

    Returns the fused MSI features, fused RGB features and the map A (B, C, C).
    """
    if f_msi.shape[0] != f_rgb.shape[0] or f_msi.shape[2:] != f_rgb.shape[2:]:
        raise ShapeError(f"stream shapes differ: {f_msi.shape} vs {f_rgb.shape}", "spatial")
    b, _, h, w = f_rgb.shape
    f_r = T.concat([f_msi, f_rgb], 1)
    q = _proj(f_r, p, f"{prefix}.q")
    k = _proj(f_r, p, f"{prefix}.k")
    v = _proj(f_r, p, f"{prefix}.v")
    if mod is not None:
        aq, bq, ak, bk = mod
        q = modulate(q, aq, bq)
        k = modulate(k, ak, bk)
    c = q.shape[1]
    q_hat = q.reshape(b, c, h * w).transpose(0, 2, 1)     # HW x C
    k_hat = k.reshape(b, c, h * w)                        # C x HW
    v_hat = v.reshape(b, c, h * w).transpose(0, 2, 1)     # HW x C
    attn = T.softmax(T.matmul(k_hat, q_hat) * p[f"{prefix}.sigma"], axis=-1)
    rows = attn.data.sum(axis=-1)
    assert np.all(np.abs(rows - 1.0) <= 1e-6) and np.all(attn.data >= 0), "A is not row-stochastic"
    va = T.matmul(v_hat, attn).transpose(0, 2, 1).reshape(b, c, h, w)
    cm, cr = f_msi.shape[1], f_rgb.shape[1]
    out_msi = (T.conv2d(va, p[f"{prefix}.out_msi.hat_w3"], 1, 1)
               + T.conv2d(f_msi, p[f"{prefix}.out_msi.w3"], 1, 1, groups=cm))
    out_rgb = (T.conv2d(va, p[f"{prefix}.out_rgb.hat_w3"], 1, 1)
               + T.conv2d(f_rgb, p[f"{prefix}.out_rgb.w3"], 1, 1, groups=cr))
    return out_msi, out_rgb, attn


def expert_weights(m: np.ndarray, n_experts: int | None = None, groups=None) -> np.ndarray:
    """Area fraction of each expert's label group."""
    m = np.asarray(m)
    if m.size == 0:
        raise ValueError("segmentation is empty")
    groups = groups if groups is not None else EXPERT_GROUPS[n_experts]
    counts = np.array([np.isin(m, g).sum() for g in groups], dtype=np.float64)
    if counts.sum() == 0:
        raise ValueError("no pixel belongs to any expert group")
    return counts / counts.sum()


def expert_mixture(grids, w) -> BilateralGrid:
    """Cell-wise convex combination sum_i w_i grid_i."""
    w = np.asarray(w, dtype=np.float64)
    if len(grids) != w.size:
        raise ShapeError(f"{len(grids)} grids for {w.size} weights", "experts")
    dims = {gr.coeffs.shape for gr in grids}
    if len(dims) != 1:
        raise ShapeError(f"grid dimensions differ: {sorted(dims)}", "grid")
    return BilateralGrid(np.tensordot(w, np.stack([gr.coeffs for gr in grids]), axes=1))


def _to_expert_batch(x: T.Tensor, e: int) -> T.Tensor:
    """(N, E*C, H, W) grouped layout -> (E*N, C, H, W) expert-major batch."""
    n, ec, h, w = x.shape
    c = ec // e
    return x.reshape(n, e, c, h, w).transpose(1, 0, 2, 3, 4).reshape(e * n, c, h, w)


def _from_expert_batch(x: T.Tensor, e: int) -> T.Tensor:
    en, c, h, w = x.shape
    n = en // e
    return x.reshape(e, n, c, h, w).transpose(1, 0, 2, 3, 4).reshape(n, e * c, h, w)


def _repeat_experts(x: T.Tensor, e: int) -> T.Tensor:
    return x if e == 1 else T.concat([x] * e, 0)


def _group_masks(m: np.ndarray, groups, size: int) -> np.ndarray:
    """Per-expert binarized segmentation, area-downsampled to ``size``: (N, E, s, s)."""
    masks = np.stack([np.isin(m, g).astype(np.float64) for g in groups], axis=1)
    return T.resize(T.Tensor(masks), (size, size), "area").data


@dataclass
class EnhanceOutput:
    s_hat: np.ndarray        # N x H x W
    o_r: np.ndarray          # N x H x W x 3
    guidance: np.ndarray     # N x H x W
    attention: list          # per level, (E*N, C, C)
    weights: np.ndarray      # N x E
    final: np.ndarray        # N x H x W x 3 in [0, 1]
    final_t: T.Tensor = field(repr=False, default=None)
    grid: np.ndarray = field(repr=False, default=None)   # N x gh x gw x D x 12


def _as_batch(x, channels_last=True):
    x = np.asarray(x, dtype=np.float64)
    if channels_last:
        if x.ndim == 3:
            x = x[None]
        return x.transpose(0, 3, 1, 2)
    return x[None] if x.ndim == 2 else x


def jdm_forward(i_rgb16, msi, s, m, params: dict[str, T.Tensor], config: EnhanceConfig,
                rgb_t: T.Tensor | None = None, s_t: T.Tensor | None = None) -> EnhanceOutput:
    """Full forward pass.

    ``i_rgb16`` is (N,) H x W x 3, ``msi`` (N,) h x w x bands, ``s`` and ``m``
    (N,) H x W.  ``rgb_t`` / ``s_t`` optionally supply the image and shading
    as tensors (used for gradient checks with respect to the inputs).
    """
    rgb = rgb_t if rgb_t is not None else T.Tensor(_as_batch(i_rgb16))
    shading = s_t if s_t is not None else T.Tensor(_as_batch(s, channels_last=False)[:, None])
    msi_np = _as_batch(msi)
    m = _as_batch(m, channels_last=False)
    n, _, h, w = rgb.shape
    if shading.shape != (n, 1, h, w) or m.shape != (n, h, w):
        raise ShapeError(f"inputs are not registered: rgb {rgb.shape}, shading {shading.shape}, "
                         f"segmentation {m.shape}", "spatial")
    if msi_np.shape[0] != n or msi_np.shape[1] != config.msi_bands:
        raise ShapeError(f"Lr-MSI batch {msi_np.shape} does not match", "bands")
    p = params
    low = config.lowres

    if config.use_s:
        s_hat = brightness_adapt(shading, p)
    else:
        s_hat = T.Tensor(np.ones((n, 1, h, w)))
    r_rgb = rgb / s_hat
    s_low = T.resize(s_hat, (low, low), "area")
    r_rgb_low = T.resize(rgb, (low, low), "area") / s_low
    if config.use_r:
        msi_low = T.resize(T.Tensor(msi_np), (low, low), "bilinear")
        r_msi_low = msi_low / s_low
    else:
        r_msi_low = T.Tensor(np.zeros((n, config.msi_bands, low, low)))

    groups = config.expert_groups
    e = len(groups)
    weights = np.stack([expert_weights(m[i], groups=groups) for i in range(n)])
    psi = None
    if config.use_m:
        masks = T.Tensor(_group_masks(m, groups, low))
        z = T.relu(T.conv2d(masks, p["map.c1.w"], 2, 1, groups=e, bias=p["map.c1.b"]))
        z = T.relu(T.conv2d(z, p["map.c2.w"], 2, 1, groups=e, bias=p["map.c2.b"]))
        z = T.relu(T.conv_transpose2d(z, p["map.d1.w"], 2, 1, groups=e, bias=p["map.d1.b"]))
        psi = T.sigmoid(T.conv_transpose2d(z, p["map.d2.w"], 2, 1, groups=e, bias=p["map.d2.b"]))

    f_rgb, f_msi = r_rgb_low, r_msi_low
    attention = []
    size = low
    for lvl, c in enumerate(config.widths):
        pre = f"l{lvl}"
        f_rgb = T.relu(T.conv2d(f_rgb, p[f"{pre}.conv_rgb.w"], 2, 1, bias=p[f"{pre}.conv_rgb.b"]))
        f_msi = T.relu(T.conv2d(f_msi, p[f"{pre}.conv_msi.w"], 2, 1, bias=p[f"{pre}.conv_msi.b"]))
        size //= 2
        if lvl == 0:
            f_rgb, f_msi = _repeat_experts(f_rgb, e), _repeat_experts(f_msi, e)
        mod = None
        if psi is not None:
            psi_l = T.resize(psi, (size, size), "area")
            z = T.relu(T.conv2d(psi_l, p[f"{pre}.mod.c1.w"], 1, 1, groups=e, bias=p[f"{pre}.mod.c1.b"]))
            ab = _to_expert_batch(T.conv2d(z, p[f"{pre}.mod.c2.w"], 1, 1, groups=e,
                                           bias=p[f"{pre}.mod.c2.b"]), e)
            cc = 2 * c
            mod = tuple(ab[:, j * cc:(j + 1) * cc] for j in range(4))
        f_msi, f_rgb, attn = spsa_forward(f_msi, f_rgb, p, pre, mod)
        attention.append(attn.data)

    feats = _from_expert_batch(T.concat([f_msi, f_rgb], 1), e)       # N, E*cl, g, g
    local = T.conv2d(feats, p["head.local.w"], 1, 1, groups=e, bias=p["head.local.b"])
    pooled = T.mean(feats, axis=(2, 3), keepdims=True)
    glob = T.conv2d(pooled, p["head.global.w"], groups=e, bias=p["head.global.b"])
    hidden = T.relu(local + glob)
    coeffs = T.conv2d(hidden, p["head.out.w"], groups=e, bias=p["head.out.b"])
    gh, gw, depth = config.grid
    # N, E*D*12, gh, gw -> N, E, gh, gw, D, 12
    grids = coeffs.reshape(n, e, depth, N_COEFFS, gh, gw).transpose(0, 1, 4, 5, 2, 3)
    w_t = T.Tensor(weights.reshape(n, e, 1, 1, 1, 1))
    mixed = (grids * w_t).sum(axis=1)                                  # N, gh, gw, D, 12

    g = guidance_map_t(r_rgb, p["guide.ccm"], p["guide.bias"], p["guide.slopes"], p["guide.mixer"])
    sliced = slice_grid_t(mixed, g)
    o_r = apply_affine_t(r_rgb, sliced)
    final = T.clip(o_r * s_hat, 0.0, 1.0)
    recomposed = np.clip(o_r.data * s_hat.data, 0.0, 1.0)
    assert np.array_equal(final.data, recomposed), "final != clamp(O_R * S_hat)"
    return EnhanceOutput(
        s_hat=s_hat.data[:, 0], o_r=o_r.data.transpose(0, 2, 3, 1), guidance=g.data,
        attention=attention, weights=weights, final=final.data.transpose(0, 2, 3, 1),
        final_t=final, grid=mixed.data)


# training -----------------------------------------------------------------------------

@dataclass
class EnhanceSample:
    rgb16: np.ndarray      # H x W x 3
    msi: np.ndarray        # h x w x bands
    shading: np.ndarray    # H x W
    material: np.ndarray   # H x W
    target: np.ndarray     # H x W x 3


def _batch(samples):
    return (np.stack([s.rgb16 for s in samples]), np.stack([s.msi for s in samples]),
            np.stack([s.shading for s in samples]), np.stack([s.material for s in samples]),
            np.stack([s.target for s in samples]))


def enhance_loss(params, config, samples) -> tuple[T.Tensor, EnhanceOutput]:
    rgb, msi, s, m, target = _batch(samples)
    out = jdm_forward(rgb, msi, s, m, params, config)
    diff = out.final_t - T.Tensor(target.transpose(0, 3, 1, 2))
    return T.mean(diff * diff), out


@dataclass
class EnhanceResult:
    params: dict[str, T.Tensor]
    config: EnhanceConfig
    losses: list = field(default_factory=list)


def train_enhancement(dataset: list[EnhanceSample], config: EnhanceConfig,
                      log_every: int = 0, log=None) -> EnhanceResult:
    """Adam on the mean squared error between final output and target."""
    if not dataset:
        raise ValueError("training set is empty")
    params = init_enhance_params(config)
    state = OptimState()
    rng = np.random.default_rng(config.seed + 1)
    order: list[int] = []
    losses = []
    for step in range(config.steps):
        idx = []
        while len(idx) < min(config.batch, len(dataset)):
            if not order:
                order = list(rng.permutation(len(dataset)))
            idx.append(order.pop())
        loss, _ = enhance_loss(params, config, [dataset[i] for i in idx])
        T.backward(loss, params.values())
        lr = cosine_lr(config.lr, step, config.steps) if config.schedule == "cosine" else config.lr
        adam_step(params, {k: v.grad for k, v in params.items()}, state, lr)
        losses.append(loss.item())
        if log and log_every and (step % log_every == 0 or step == config.steps - 1):
            log(f"step {step} loss {losses[-1]:.6f}")
    return EnhanceResult(params, config, losses)


def enhance_images(params, config, samples, chunk: int = 8) -> np.ndarray:
    """Inference without graph recording; returns N x H x W x 3."""
    outs = []
    with T.no_grad():
        for i in range(0, len(samples), chunk):
            rgb, msi, s, m, _ = _batch(samples[i:i + chunk])
            outs.append(jdm_forward(rgb, msi, s, m, params, config).final)
    return np.concatenate(outs)
