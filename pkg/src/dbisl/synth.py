"""Deterministic synthetic volumes (blob + bias + noise) and patch sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, PatchTooLarge

KINDS = ("ball", "ellipsoid", "two_lobe")


@dataclass
class SynthConfig:
    size: int = 48
    margin: int = 2
    base: float = 0.2
    contrast: float = 0.6
    noise: float = 0.35
    bias: float = 0.2
    blur: float = 1.5
    contrast_jitter: float = 0.5
    base_jitter: float = 0.1
    n_labeled: int = 5
    n_unlabeled: int = 45
    n_test: int = 20
    seed: int = 0
    kinds: tuple = KINDS

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.validate()

    def validate(self):
        if self.size < 24:
            raise ConfigError("volume size must be >= 24")
        if not 1 <= self.margin < self.size // 4:
            raise ConfigError("margin must lie in [1, size/4)")
        if self.noise < 0 or self.bias < 0 or self.blur < 0:
            raise ConfigError("noise, bias and blur must be >= 0")
        if not 0 <= self.contrast_jitter < 1 or self.base_jitter < 0:
            raise ConfigError("contrast_jitter must lie in [0, 1) and base_jitter be >= 0")
        if self.n_labeled < 1 or self.n_unlabeled < 0 or self.n_test < 1:
            raise ConfigError("need >= 1 labeled and >= 1 test volume")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ConfigError(f"unknown volume kinds {bad}")

    @property
    def n_volumes(self):
        return self.n_labeled + self.n_unlabeled + self.n_test

    def to_dict(self):
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        return d


@dataclass
class SynthVolume:
    image: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    seed: int = 0
    kind: str = "ball"


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    test: list

    def __post_init__(self):
        a, b, c = set(self.labeled), set(self.unlabeled), set(self.test)
        if a & b or a & c or b & c:
            raise ConfigError("dataset split ids must be pairwise disjoint")

    def to_dict(self):
        return asdict(self)


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(grid, center, radii, rot):
    d = np.tensordot(rot.T, grid - center[:, None, None, None], axes=1)
    return ((d / radii[:, None, None, None]) ** 2).sum(axis=0) <= 1.0


def _shape(rng, kind, size, margin):
    grid = np.indices((size,) * 3, dtype=np.float64)
    if kind == "ball":
        r = rng.uniform(0.21, 0.29) * size
        lo, hi = r + margin + 1, size - 1 - r - margin - 1
        c = rng.uniform(lo, hi, size=3)
        return ((grid - c[:, None, None, None]) ** 2).sum(axis=0) <= r * r, (c, r)
    if kind == "ellipsoid":
        radii = rng.uniform(0.17, 0.29, size=3) * size
        rot = _rotation(rng)
        reach = radii.max()
        c = rng.uniform(reach + margin + 1, size - 2 - reach - margin, size=3)
        return _ellipsoid(grid, c, radii, rot), None
    # two overlapping lobes joined at a waist
    radii = rng.uniform(0.16, 0.21, size=(2, 3)) * size
    rot = _rotation(rng)
    sep = 0.9 * radii[:, 0].min() + 0.6 * radii[:, 0].max()
    axis = rot[:, 0]
    reach = sep / 2 + radii.max()
    c = rng.uniform(reach + margin + 1, size - 2 - reach - margin, size=3)
    m = _ellipsoid(grid, c - axis * sep / 2, radii[0], rot) | \
        _ellipsoid(grid, c + axis * sep / 2, radii[1], rot)
    return m, None


def _bias_field(rng, size, amplitude):
    """Smooth multiplicative-looking additive field: a random low-order polynomial."""
    if amplitude == 0:
        return np.zeros((size,) * 3)
    t = np.linspace(-1, 1, size)
    z, y, x = np.meshgrid(t, t, t, indexing="ij")
    coef = rng.uniform(-1, 1, size=7)
    f = coef[0] * x + coef[1] * y + coef[2] * z + coef[3] * x * y + \
        coef[4] * y * z + coef[5] * x * z + coef[6] * (x * x + y * y + z * z - 1)
    return amplitude * f / max(np.abs(f).max(), 1e-12)


def _smooth(vol, sigma):
    if sigma <= 0:
        return vol
    from scipy.ndimage import gaussian_filter
    return gaussian_filter(vol, sigma, mode="nearest")


def gen_volume(seed, kind="ball", size=48, cfg=None):
    """One synthetic volume; the same (seed, kind, size, cfg) is bit-identical."""
    cfg = cfg or SynthConfig(size=size)
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}")
    if size < 24:
        raise ConfigError("volume size must be >= 24")
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    mask, _ = _shape(rng, kind, size, cfg.margin)
    bias = _bias_field(rng, size, cfg.bias)
    noise = _smooth(rng.normal(0.0, 1.0, size=(size,) * 3), cfg.blur)
    if cfg.blur > 0:
        noise /= noise.std()
    # per-volume appearance, drawn last so earlier streams do not shift
    contrast = cfg.contrast * (1 + cfg.contrast_jitter * rng.uniform(-1, 1))
    base = cfg.base + cfg.base_jitter * rng.uniform(-1, 1)
    img = base + contrast * mask + bias + cfg.noise * noise
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SynthVolume(img, mask, int(seed), kind)


def volume_plan(cfg):
    """(seed, kind) per volume id, derived from the master seed."""
    rng = np.random.default_rng([cfg.seed, 7])
    seeds = rng.integers(0, 2 ** 31 - 1, size=cfg.n_volumes)
    return [(int(s), cfg.kinds[i % len(cfg.kinds)]) for i, s in enumerate(seeds)]


def make_split(cfg):
    ids = list(range(cfg.n_volumes))
    nl, nu = cfg.n_labeled, cfg.n_unlabeled
    return DatasetSplit(ids[:nl], ids[nl:nl + nu], ids[nl + nu:])


class Dataset:
    """All volumes of a config, generated lazily and cached."""

    def __init__(self, cfg=None):
        self.cfg = cfg or SynthConfig()
        self.plan = volume_plan(self.cfg)
        self.split = make_split(self.cfg)
        self._cache = {}

    def __len__(self):
        return len(self.plan)

    def __getitem__(self, i):
        if i not in self._cache:
            seed, kind = self.plan[i]
            self._cache[i] = gen_volume(seed, kind, self.cfg.size, self.cfg)
        return self._cache[i]

    def manifest(self):
        return {
            "synth": self.cfg.to_dict(),
            "volumes": [{"id": i, "seed": s, "kind": k} for i, (s, k) in enumerate(self.plan)],
            "split": self.split.to_dict(),
        }


def patch_corner(shape, patch_size, rng):
    """Uniform random corner such that the patch lies inside ``shape``."""
    ps = _patch_tuple(patch_size)
    if any(p > d for p, d in zip(ps, shape)):
        raise PatchTooLarge(f"patch {ps} exceeds volume {tuple(shape)}")
    return tuple(int(rng.integers(0, d - p + 1)) for p, d in zip(ps, shape))


def _patch_tuple(patch_size):
    if isinstance(patch_size, int):
        return (patch_size,) * 3
    return tuple(int(p) for p in patch_size)


def crop(vol, corner, patch_size):
    ps = _patch_tuple(patch_size)
    return vol[tuple(slice(c, c + p) for c, p in zip(corner, ps))]


def sample_patch(vol, patch_size, rng):
    """Random crop of image and mask; returns (image, mask, corner)."""
    corner = patch_corner(vol.image.shape, patch_size, rng)
    return crop(vol.image, corner, patch_size), crop(vol.mask, corner, patch_size), corner


def ball_params(seed, size=48, cfg=None):
    """Center and radius of the ball generated for ``seed`` (for oracles)."""
    cfg = cfg or SynthConfig(size=size)
    rng = np.random.default_rng([int(seed), KINDS.index("ball")])
    _, (c, r) = _shape(rng, "ball", size, cfg.margin)
    return c, r


__all__ = ["SynthConfig", "SynthVolume", "DatasetSplit", "Dataset", "gen_volume",
           "sample_patch", "patch_corner", "crop", "make_split", "volume_plan",
           "ball_params", "KINDS"]
