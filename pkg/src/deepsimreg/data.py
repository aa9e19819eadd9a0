"""Synthetic registration data, dataset layout on disk and binary file formats.

File formats (all multi-byte integers and floats little-endian, except the
16-bit PGM payload which is big-endian as the PGM format prescribes):

* PGM ``P5`` images, 8 or 16 bit.
* ``DSPF`` displacement fields: magic, version u32, H u32, W u32, then the
  x plane and the y plane as row-major f32.
* ``DSRC`` checkpoints: magic, version u32, entry count u32, then entries of
  (name length u16, UTF-8 name, ndim u8, dims u32 each, payload). The first
  entry, ``__config__``, holds UTF-8 JSON text instead of an f32 payload.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .networks import Network, UNetConfig, build_unet
from .tensor import AdamState, Tensor
from .warp import affine_to_field, random_affine, random_smooth_field, warp_bilinear, warp_nearest, AffineRanges


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


# -- samples and synthetic generation ---------------------------------------------------


@dataclass
class RegistrationSample:
    """One moving/fixed pair. Images are ``(H, W)`` floats in ``[0, 1]``."""

    moving: np.ndarray
    fixed: np.ndarray
    moving_labels: np.ndarray | None = None
    fixed_labels: np.ndarray | None = None
    ground_truth_field: np.ndarray | None = None
    sample_id: str = ""

    def __post_init__(self):
        shapes = {a.shape[-2:] for a in (self.moving, self.fixed, self.moving_labels, self.fixed_labels,
                                         self.ground_truth_field) if a is not None}
        if len(shapes) != 1:
            raise ValueError(f"sample members disagree in spatial size: {shapes}")

    @property
    def has_labels(self) -> bool:
        return self.moving_labels is not None and self.fixed_labels is not None


@dataclass
class SyntheticConfig:
    height: int = 64
    width: int = 64
    classes: int = 3
    blobs: tuple[int, int] = (3, 6)
    blob_radius: tuple[float, float] = (3.0, 7.0)
    ring_radius: tuple[float, float] = (7.0, 14.0)
    ring_width: float = 2.0
    noise_sigma: float = 0.05
    amplitude: float = 6.0
    smoothness: float = 8.0
    stages: int = 3

    def __post_init__(self):
        k = 2 ** self.stages
        if self.height % k or self.width % k:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by {k}")
        if self.classes < 2:
            raise ValueError("need at least one foreground class besides background")


def _base_image(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    texture = gaussian_filter(rng.standard_normal((h, w)), 4.0, mode="reflect")
    texture /= np.abs(texture).max() + 1e-12
    image = 0.15 + 0.05 * texture
    levels = np.linspace(0.45, 0.9, cfg.classes - 1)
    for _ in range(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1)):
        cls = int(rng.integers(1, cfg.classes))
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        ra, rb = rng.uniform(*(cfg.blob_radius if cls % 2 else cfg.ring_radius), size=2)
        theta = rng.uniform(0, np.pi)
        dx, dy = xs - cx, ys - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / ra
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / rb
        r2 = u * u + v * v
        inside = r2 <= 1.0
        if cls % 2 == 0:
            # even classes are thin elliptical rings (membrane-like structures)
            scale = min(ra, rb)
            inner = (1.0 - cfg.ring_width / scale) ** 2 if scale > cfg.ring_width else 0.0
            inside &= r2 >= inner
        labels[inside] = cls
        # intensity falls off slightly towards the blob rim
        image[inside] = levels[cls - 1] + 0.08 * (1.0 - r2[inside]) + 0.04 * texture[inside]
    image = gaussian_filter(image, 0.7, mode="reflect")
    return np.clip(image, 0.0, 1.0), labels


def generate_synthetic_pair(cfg: SyntheticConfig, rng: np.random.Generator, sample_id: str = "") -> RegistrationSample:
    """A blob image (fixed) and a smoothly deformed, independently noised copy (moving)."""
    base, labels = _base_image(cfg, rng)
    gt = random_smooth_field(rng, cfg.height, cfg.width, cfg.amplitude, cfg.smoothness)
    moving = warp_bilinear(Tensor(base[None, None], dtype=np.float64), Tensor(gt, dtype=np.float64)).data[0, 0]
    moving_labels = warp_nearest(labels, gt)
    fixed = base.copy()
    if cfg.noise_sigma > 0:
        moving = moving + rng.normal(0.0, cfg.noise_sigma, moving.shape)
        fixed = fixed + rng.normal(0.0, cfg.noise_sigma, fixed.shape)
    return RegistrationSample(
        moving=np.clip(moving, 0.0, 1.0),
        fixed=np.clip(fixed, 0.0, 1.0),
        moving_labels=moving_labels,
        fixed_labels=labels,
        ground_truth_field=gt[0],
        sample_id=sample_id,
    )


@dataclass
class Dataset:
    train: list[RegistrationSample]
    val: list[RegistrationSample]
    test: list[RegistrationSample]
    num_classes: int = 0

    def __post_init__(self):
        if not self.num_classes:
            labels = [s.fixed_labels for s in self.all() if s.fixed_labels is not None]
            labels += [s.moving_labels for s in self.all() if s.moving_labels is not None]
            self.num_classes = int(max(int(x.max()) for x in labels)) + 1 if labels else 0

    def all(self) -> list[RegistrationSample]:
        return self.train + self.val + self.test

    @property
    def has_labels(self) -> bool:
        return all(s.has_labels for s in self.all())

    def split(self, name: str) -> list[RegistrationSample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def make_synthetic_dataset(cfg: SyntheticConfig, n_train: int = 200, n_val: int = 25, n_test: int = 25,
                           seed: int = 0) -> Dataset:
    """Independent pairs, each drawn from its own seeded generator."""
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    parts = {}
    index = 0
    for name, n in sizes.items():
        parts[name] = []
        for _ in range(n):
            rng = np.random.default_rng([seed, index])
            parts[name].append(generate_synthetic_pair(cfg, rng, sample_id=f"{index:05d}"))
            index += 1
    return Dataset(parts["train"], parts["val"], parts["test"], num_classes=cfg.classes)


def split_dataset(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list[int], ...]:
    """Shuffled partition of ``range(n)`` with sizes ``floor(n * f)`` plus remainders.

    Leftover indices go to the parts with the largest fractional remainder.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9 or np.any(fractions < 0):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    if n < len(fractions):
        raise ValueError(f"cannot split {n} items into {len(fractions)} parts")
    exact = n * fractions
    sizes = np.floor(exact + 1e-9).astype(int)
    leftover = n - sizes.sum()
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[:leftover]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return tuple(sorted(perm[a:b].tolist()) for a, b in zip(bounds[:-1], bounds[1:]))


# -- batches and augmentation ---------------------------------------------------------------


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    """``(N, H, W)`` integer labels -> ``(N, C, H, W)`` indicator maps."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(classes)[None, :, None, None]).astype(dtype)


@dataclass
class Batch:
    """Stacked samples ready for a network: images ``(N, 1, H, W)``, labels ``(N, H, W)``."""

    moving: np.ndarray
    fixed: np.ndarray
    moving_labels: np.ndarray | None = None
    fixed_labels: np.ndarray | None = None
    moving_onehot: np.ndarray | None = None
    fixed_onehot: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.moving)


def make_batch(samples, num_classes: int = 0, rng: np.random.Generator | None = None,
               ranges: AffineRanges | None = None, dtype=np.float32) -> Batch:
    """Stack samples; with ``rng`` each moving image gets a fresh random affine warp.

    The same affine field moves the image (bilinear), the discrete labels
    (nearest neighbour) and the one-hot label channels (bilinear).
    """
    moving = np.stack([s.moving for s in samples])[:, None].astype(np.float64)
    fixed = np.stack([s.fixed for s in samples])[:, None].astype(dtype)
    labelled = num_classes > 0 and all(s.has_labels for s in samples)
    ml = np.stack([s.moving_labels for s in samples]) if labelled else None
    fl = np.stack([s.fixed_labels for s in samples]) if labelled else None
    m_oh = one_hot(ml, num_classes, np.float64) if labelled else None
    if rng is not None:
        h, w = moving.shape[2:]
        aff = np.concatenate([affine_to_field(random_affine(rng, ranges or AffineRanges()), h, w) for _ in samples])
        aff_t = Tensor(aff, dtype=np.float64)
        moving = warp_bilinear(Tensor(moving, dtype=np.float64), aff_t).data
        if labelled:
            ml = warp_nearest(ml, aff)
            m_oh = warp_bilinear(Tensor(m_oh, dtype=np.float64), aff_t).data
    return Batch(
        moving=moving.astype(dtype),
        fixed=fixed,
        moving_labels=ml,
        fixed_labels=fl,
        moving_onehot=m_oh.astype(dtype) if labelled else None,
        fixed_onehot=one_hot(fl, num_classes, dtype) if labelled else None,
        ids=[s.sample_id for s in samples],
    )


# -- PGM ---------------------------------------------------------------------------------------


def _pgm_header(buf: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != b"P5":
        raise FormatError(f"byte 0: expected PGM magic 'P5', found {buf[:2]!r}")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and buf[pos:pos + 1] in (b" ", b"\t", b"\n", b"\r", b"\x0b", b"\x0c"):
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"byte {start}: malformed PGM header, expected an integer")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError(f"byte {pos}: PGM header must end with a single whitespace byte")
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"byte {pos}: invalid PGM dimensions/maxval {width}x{height}/{maxval}")
    return width, height, maxval, pos + 1


def _read_pgm_raw(path) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    width, height, maxval, offset = _pgm_header(buf)
    bpp = 1 if maxval < 256 else 2
    need = width * height * bpp
    have = len(buf) - offset
    if have < need:
        raise FormatError(f"byte {offset}: truncated PGM payload, expected {need} bytes, found {have}")
    dtype = np.uint8 if bpp == 1 else np.dtype(">u2")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    return raw, maxval


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM and scale intensities to ``[0, 1]`` by its maxval."""
    raw, maxval = _read_pgm_raw(path)
    return raw.astype(np.float64) / maxval


def load_labels_pgm(path) -> np.ndarray:
    """Read a binary PGM whose raw pixel values are class indices."""
    raw, _ = _read_pgm_raw(path)
    return raw.astype(np.int64)


def save_pgm(image: np.ndarray, path) -> None:
    """Write a ``[0, 1]`` image as a 16-bit PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"save_pgm expects a 2-D image, got shape {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * 65535).astype(">u2")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def save_labels_pgm(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min() < 0 or labels.max() > 255:
        raise ValueError("label maps must be 2-D with indices in [0, 255]")
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes())


# -- displacement fields ---------------------------------------------------------------------

FIELD_MAGIC = b"DSPF"
FIELD_VERSION = 1


def save_field(field_, path) -> None:
    """Write a ``(2, H, W)`` (or ``(1, 2, H, W)``) displacement field."""
    u = np.asarray(field_.data if isinstance(field_, Tensor) else field_)
    if u.ndim == 4:
        if u.shape[0] != 1:
            raise ValueError("save_field stores a single field")
        u = u[0]
    if u.ndim != 3 or u.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) field, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("displacement field contains non-finite values")
    _, h, w = u.shape
    header = FIELD_MAGIC + struct.pack("<III", FIELD_VERSION, h, w)
    Path(path).write_bytes(header + u.astype("<f4").tobytes())


def load_field(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"byte {len(buf)}: field file shorter than its 16-byte header")
    if buf[:4] != FIELD_MAGIC:
        raise FormatError(f"byte 0: bad field magic {buf[:4]!r}")
    version, h, w = struct.unpack_from("<III", buf, 4)
    if version != FIELD_VERSION:
        raise FormatError(f"byte 4: unsupported field version {version}")
    need = 16 + 8 * h * w
    if len(buf) != need:
        raise FormatError(f"byte 16: field payload length {len(buf) - 16} != expected {need - 16}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(2, h, w).astype(np.float32)


# -- checkpoints --------------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DSRC"
CHECKPOINT_VERSION = 1
_CONFIG_ENTRY = "__config__"
_ADAM_PREFIX = "__adam__."


def save_checkpoint(net: Network, path, optimizer: AdamState | None = None, extra: dict | None = None) -> None:
    """Write network parameters, batch-norm buffers and optionally Adam state."""
    meta = {"network": net.config.to_dict(), "seed": net.seed, "extra": extra or {}}
    entries: list[tuple[str, np.ndarray]] = list(net.state_dict().items())
    if optimizer is not None and optimizer.m:
        names = list(net.params)
        meta["adam"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                        "eps": optimizer.eps, "step": optimizer.step}
        entries += [(f"{_ADAM_PREFIX}m.{k}", m) for k, m in zip(names, optimizer.m)]
        entries += [(f"{_ADAM_PREFIX}v.{k}", v) for k, v in zip(names, optimizer.v)]
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(entries) + 1))
    out += _entry_header(_CONFIG_ENTRY, (len(text),)) + text
    for name, arr in entries:
        arr = np.asarray(arr)
        out += _entry_header(name, arr.shape) + arr.astype("<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)


def _entry_header(name: str, dims) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)


def read_checkpoint(path) -> tuple[dict, OrderedDict]:
    """Parse a checkpoint into its JSON metadata and ordered array entries."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"byte 0: bad checkpoint magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"byte 4: unsupported checkpoint version {version}")
        pos = 12
        meta = None
        entries: OrderedDict[str, np.ndarray] = OrderedDict()
        for i in range(count):
            start = pos
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            if i == 0:
                if name != _CONFIG_ENTRY:
                    raise FormatError(f"byte {start}: first entry must be {_CONFIG_ENTRY}, found {name!r}")
                nbytes = dims[0]
                meta = json.loads(buf[pos:pos + nbytes].decode("utf-8"))
                pos += nbytes
                continue
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise FormatError(f"byte {pos}: truncated payload for entry {name!r}")
            entries[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"byte {pos}: truncated checkpoint ({exc})") from None
    if pos != len(buf):
        raise FormatError(f"byte {pos}: {len(buf) - pos} trailing bytes after last entry")
    return meta, entries


def load_checkpoint(path, config: UNetConfig | None = None) -> tuple[Network, AdamState | None, dict]:
    """Rebuild the network stored at ``path``.

    If ``config`` is given the stored entries must fit it exactly; otherwise
    the stored configuration is used.

    Returns:
        ``(network, adam_state_or_None, extra_metadata)``.
    """
    meta, entries = read_checkpoint(path)
    stored = UNetConfig.from_dict(meta["network"])
    net = build_unet(config or stored, seed=meta.get("seed", 0), dtype=np.float32)
    state = OrderedDict((k, v) for k, v in entries.items() if not k.startswith(_ADAM_PREFIX))
    expected = net.state_dict()
    missing = [k for k in expected if k not in state]
    unexpected = [k for k in state if k not in expected]
    wrong = [f"{k} {state[k].shape}!={expected[k].shape}" for k in expected
             if k in state and state[k].shape != expected[k].shape]
    if missing or unexpected or wrong:
        raise ValueError(
            f"checkpoint {path} does not match the requested network: "
            f"missing entries {missing}; unexpected entries {unexpected}; shape mismatches {wrong}"
        )
    net.load_state_dict(state)
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        names = list(net.params)
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m=[entries[f"{_ADAM_PREFIX}m.{k}"].copy() for k in names],
                         v=[entries[f"{_ADAM_PREFIX}v.{k}"].copy() for k in names])
    net.eval()
    return net, adam, meta.get("extra", {})


# -- dataset directories ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def save_dataset(dataset: Dataset, root) -> None:
    """Write ``<root>/{train,val,test}/<id>/{moving,fixed,...}`` files."""
    root = Path(root)
    for split in SPLITS:
        for s in dataset.split(split):
            d = root / split / s.sample_id
            d.mkdir(parents=True, exist_ok=True)
            save_pgm(s.moving, d / "moving.pgm")
            save_pgm(s.fixed, d / "fixed.pgm")
            if s.has_labels:
                save_labels_pgm(s.moving_labels, d / "moving_labels.pgm")
                save_labels_pgm(s.fixed_labels, d / "fixed_labels.pgm")
            if s.ground_truth_field is not None:
                save_field(s.ground_truth_field, d / "gt_field.dspf")


def load_dataset(root, num_classes: int = 0) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    parts = {}
    for split in SPLITS:
        samples = []
        split_dir = root / split
        for d in sorted(split_dir.iterdir()) if split_dir.is_dir() else []:
            if not d.is_dir():
                continue
            ml, fl, gt = d / "moving_labels.pgm", d / "fixed_labels.pgm", d / "gt_field.dspf"
            samples.append(RegistrationSample(
                moving=load_pgm(d / "moving.pgm"),
                fixed=load_pgm(d / "fixed.pgm"),
                moving_labels=load_labels_pgm(ml) if ml.exists() else None,
                fixed_labels=load_labels_pgm(fl) if fl.exists() else None,
                ground_truth_field=load_field(gt) if gt.exists() else None,
                sample_id=d.name,
            ))
        parts[split] = samples
    if not any(parts.values()):
        raise ValueError(f"no samples found under {root}")
    return Dataset(parts["train"], parts["val"], parts["test"], num_classes=num_classes)
