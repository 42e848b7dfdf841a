"""Volume ingestion, 64x64 slice framing, seeds, splits and the project PRNG."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, LabelError, ShapeError, SizeError, UnsupportedError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

LABELS = (0, 1, 2)  # background, anterior, posterior
SLICE_SIZE = 64


class Rng:
    """SplitMix64 generator.

    The sequence is fully determined by the 64-bit seed, so the same stream
    can be regenerated in any language. Uniform reals take the top 53 bits.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) / 9007199254740992.0

    def below(self, n: int) -> int:
        """Integer in [0, n) via floor(uniform * n)."""
        return min(int(self.uniform() * n), n - 1)

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs at once; identical to ``n`` calls of :meth:`next_u64`."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return ((self.u64_array(n) >> np.uint64(11)).astype(np.float64) / 9007199254740992.0).reshape(shape)


def derive_seed(k: int) -> int:
    """Seed of experiment ``k``: the 32-bit range cut into 60 intervals, times ``k``."""
    if not 1 <= k <= 59:
        raise ConfigError(f"experiment number must be in 1..59, got {k}")
    return (k << 32) // 60


def stream_seeds(seed: int) -> dict[str, int]:
    """Fixed offsets that separate the data-order, init and augmentation streams."""
    return {"data": seed, "init": seed + 1, "augment": seed + 2}


# ---------------------------------------------------------------------------
# volumes


@dataclass
class Volume3D:
    voxels: np.ndarray  # (X axial, Y coronal, Z sagittal)
    id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeError(f"volume must be 3D with positive extents, got {self.voxels.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class MaskVolume:
    labels: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ShapeError(f"mask must be 3D, got {self.labels.shape}")
        check_labels(self.labels)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape


def check_labels(labels: np.ndarray) -> None:
    if labels.size and not np.isin(labels, LABELS).all():
        bad = sorted(set(np.unique(labels).tolist()) - set(LABELS))
        raise LabelError(f"labels outside {{0,1,2}}: {bad[:5]}")


def normalize_intensity(v: np.ndarray) -> np.ndarray:
    """Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros."""
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v, dtype=np.float64)
    return (v - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# NIfTI-1 reader

_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}


def parse_nifti(raw: bytes, as_mask: bool = False, id: str = "") -> Volume3D | MaskVolume:
    """Decode a single-file NIfTI-1 image (``.nii`` or gzip-compressed).

    Returns the voxels in (X, Y, Z) order with ``scl_slope``/``scl_inter``
    applied when the slope is nonzero. With ``as_mask`` the values are
    rounded to integer labels and validated against {0, 1, 2}.
    """
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise FormatError(f"header truncated: {len(raw)} bytes")

    endian = None
    for e in "<>":
        ndim = struct.unpack_from(e + "h", raw, 40)[0]
        if 1 <= ndim <= 7:
            endian = e
            break
    if endian is None:
        raise FormatError("cannot determine byte order from dim[0]")
    if struct.unpack_from(endian + "i", raw, 0)[0] != 348:
        raise FormatError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise FormatError("detached-header NIfTI (ni1) is not supported")
    if magic != b"n+1\x00":
        raise FormatError(f"bad magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if ndim > 3:
        raise UnsupportedError(f"only volumes with up to 3 dimensions are read, dim[0]={ndim}")
    extents = tuple(int(d) if i < ndim else 1 for i, d in enumerate(dim[1:4]))
    if min(extents) < 1:
        raise FormatError(f"non-positive extent in dim {dim}")
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise UnsupportedError(f"datatype code {datatype} is not supported")
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)

    dt = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
    count = extents[0] * extents[1] * extents[2]
    end = vox_offset + count * dt.itemsize
    if vox_offset < 348 or end > len(raw):
        raise FormatError(f"payload truncated: need {end} bytes, have {len(raw)}")
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset).astype(np.float64)
    if slope != 0 and math.isfinite(slope):
        flat = flat * slope + inter
    # NIfTI stores x fastest
    vox = np.ascontiguousarray(flat.reshape(extents[::-1]).transpose(2, 1, 0))
    if as_mask:
        return MaskVolume(np.rint(vox).astype(np.int64), id=id)
    return Volume3D(vox, id=id)


def read_nifti(path: str | Path, as_mask: bool = False) -> Volume3D | MaskVolume:
    path = Path(path)
    stem = path.name.split(".nii")[0]
    return parse_nifti(path.read_bytes(), as_mask=as_mask, id=stem)


def build_nifti(voxels: np.ndarray, datatype: int = 16, slope: float = 0.0, inter: float = 0.0,
                endian: str = "<", magic: bytes = b"n+1\x00") -> bytes:
    """Minimal NIfTI-1 encoder, used to produce fixtures and synthetic datasets."""
    dt = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
    hdr = bytearray(352)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dims = [3, *voxels.shape, 1, 1, 1, 1]
    struct.pack_into(endian + "8h", hdr, 40, *dims)
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, dt.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    payload = np.ascontiguousarray(np.asarray(voxels).transpose(2, 1, 0)).astype(dt).tobytes()
    return bytes(hdr) + payload


# ---------------------------------------------------------------------------
# slice framing


def pad_slice_to_target(slc: np.ndarray, target: int = SLICE_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Center a Y x Z slice in a zero-filled target x target frame."""
    y, z = slc.shape
    if y > target or z > target:
        raise SizeError(f"slice {y}x{z} exceeds target {target}")
    oy, oz = (target - y) // 2, (target - z) // 2
    out = np.zeros((target, target), dtype=slc.dtype)
    out[oy:oy + y, oz:oz + z] = slc
    return out, (oy, oz)


def crop_slice(frame: np.ndarray, offsets: tuple[int, int], extents: tuple[int, int]) -> np.ndarray:
    oy, oz = offsets
    return frame[..., oy:oy + extents[0], oz:oz + extents[1]]


def slice_volume(v: Volume3D | MaskVolume | np.ndarray) -> list[np.ndarray]:
    """Axial decomposition: X slices of shape Y x Z."""
    arr = _array(v)
    return [arr[i] for i in range(arr.shape[0])]


def reassemble(slices: Sequence[np.ndarray], offsets: tuple[int, int], extents: tuple[int, int, int],
               id: str = "") -> np.ndarray:
    """Inverse of pad + slice: crop every framed slice and stack along X."""
    if len(slices) != extents[0]:
        raise ShapeError(f"{len(slices)} slices for an axial extent of {extents[0]}")
    return np.stack([crop_slice(s, offsets, extents[1:]) for s in slices])


def frame_volume(v: Volume3D | MaskVolume | np.ndarray, target: int = SLICE_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Pad every axial slice; returns an (X, target, target) array and the offsets."""
    arr = _array(v)
    framed = [pad_slice_to_target(s, target) for s in slice_volume(arr)]
    return np.stack([f for f, _ in framed]), framed[0][1]


def _array(v) -> np.ndarray:
    if isinstance(v, Volume3D):
        return v.voxels
    if isinstance(v, MaskVolume):
        return v.labels
    return np.asarray(v)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    counts: tuple[int, int, int] = field(default=(0, 0, 0))

    @classmethod
    def apply(cls, n: int, ratios=(0.6, 0.2, 0.2)) -> "SplitSpec":
        if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
            raise ConfigError(f"ratios must be non-negative and sum to 1, got {ratios}")
        # the epsilon absorbs binary round-off such as 0.7 * 10 = 6.999...
        train = int(math.floor(ratios[0] * n + 1e-9))
        val = int(math.floor(ratios[1] * n + 1e-9))
        return cls(tuple(ratios), (train, val, n - train - val))


def fisher_yates(items: list, rng: Rng) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_dataset(ids: Sequence, seed: int, ratios=(0.6, 0.2, 0.2)) -> tuple[list, list, list]:
    """Deterministic train/val/test partition of ``ids`` (sorted first, then shuffled)."""
    if len(ids) == 0:
        raise ConfigError("cannot split an empty id list")
    spec = SplitSpec.apply(len(ids), ratios)
    order = fisher_yates(sorted(ids), Rng(seed))
    a, b, _ = spec.counts
    return order[:a], order[a:a + b], order[a + b:]


# ---------------------------------------------------------------------------
# cache: JSON manifest + little-endian float32 blobs


@dataclass
class CachedCase:
    """A preprocessed case: framed image/mask stacks plus what is needed to undo the framing."""

    id: str
    image: np.ndarray  # (X, 64, 64) float
    mask: np.ndarray  # (X, 64, 64) int
    extents: tuple[int, int, int]
    offsets: tuple[int, int]

    def truth(self) -> np.ndarray:
        return reassemble(list(self.mask), self.offsets, self.extents)


def prepare_case(image: Volume3D, mask: MaskVolume, target: int = SLICE_SIZE) -> CachedCase:
    if image.extents != mask.extents:
        raise ShapeError(f"image {image.extents} and mask {mask.extents} disagree for {image.id}")
    img, offsets = frame_volume(normalize_intensity(image.voxels), target)
    msk, _ = frame_volume(mask.labels, target)
    return CachedCase(image.id or mask.id, img, msk.astype(np.int64), image.extents, offsets)


def write_case(directory: str | Path, case: CachedCase) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{case.id}.img.f32").write_bytes(case.image.astype("<f4").tobytes())
    (directory / f"{case.id}.msk.f32").write_bytes(case.mask.astype("<f4").tobytes())
    manifest = {
        "id": case.id,
        "extents": list(case.extents),
        "dtype": "f32",
        "offsets": list(case.offsets),
        "frame": list(case.image.shape),
        "image": f"{case.id}.img.f32",
        "mask": f"{case.id}.msk.f32",
    }
    path = directory / f"{case.id}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_case(manifest_path: str | Path) -> CachedCase:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    if m.get("dtype") != "f32":
        raise FormatError(f"unsupported cache dtype {m.get('dtype')!r}")
    frame = tuple(m["frame"])
    extents = tuple(m["extents"])
    if frame[0] != extents[0]:
        raise FormatError(f"{m['id']}: frame {frame} does not match extents {extents}")

    def blob(name):
        raw = (manifest_path.parent / name).read_bytes()
        if len(raw) != 4 * int(np.prod(frame)):
            raise FormatError(f"{name}: expected {4 * int(np.prod(frame))} bytes, found {len(raw)}")
        return np.frombuffer(raw, dtype="<f4").reshape(frame)

    mask = blob(m["mask"]).astype(np.int64)
    check_labels(mask)
    return CachedCase(m["id"], blob(m["image"]).astype(np.float64), mask, extents, tuple(m["offsets"]))


def load_cache(directory: str | Path) -> list[CachedCase]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise FormatError(f"no cached cases in {directory}")
    return [read_case(p) for p in paths]


def prepare_msd(source: str | Path, dest: str | Path, target: int = SLICE_SIZE) -> list[Path]:
    """Convert an MSD-style ``imagesTr/``, ``labelsTr/`` tree into the cache format."""
    source = Path(source)
    images = sorted(p for p in (source / "imagesTr").glob("*.nii*") if not p.name.startswith("._"))
    if not images:
        raise FormatError(f"no NIfTI images under {source / 'imagesTr'}")
    written = []
    for img_path in images:
        lbl_path = source / "labelsTr" / img_path.name
        image = read_nifti(img_path)
        mask = read_nifti(lbl_path, as_mask=True)
        written.append(write_case(dest, prepare_case(image, mask, target)))
    return written


def synthetic_cases(n: int, seed: int, target: int = SLICE_SIZE, noise: float = 0.05) -> list[CachedCase]:
    """Small hippocampus-like volumes: two adjacent ellipsoids labelled 1 and 2.

    Axial extents are short (4-6) so that whole-protocol runs stay cheap;
    the coronal/sagittal extents vary like the real data and are framed to
    ``target``.
    """
    rng = Rng(seed)
    cases = []
    for k in range(n):
        x = 4 + rng.below(3)
        y = min(target, 36 + rng.below(18))
        z = min(target, 28 + rng.below(9))
        cx, cy, cz = (x - 1) / 2, y * (0.35 + 0.1 * rng.uniform()), z * (0.4 + 0.2 * rng.uniform())
        ry, rz = y * 0.18, z * 0.2
        gx, gy, gz = np.meshgrid(np.arange(x), np.arange(y), np.arange(z), indexing="ij")
        labels = np.zeros((x, y, z), dtype=np.int64)
        ant = ((gy - cy) / ry) ** 2 + ((gz - cz) / rz) ** 2 + ((gx - cx) / (x / 1.5)) ** 2 <= 1.0
        post = ((gy - cy - 1.6 * ry) / ry) ** 2 + ((gz - cz) / rz) ** 2 + ((gx - cx) / (x / 1.5)) ** 2 <= 1.0
        labels[ant] = 1
        labels[post & ~ant] = 2
        image = 0.2 + 0.35 * (labels == 1) + 0.7 * (labels == 2)
        image = image + noise * (rng.uniform_array(image.shape) - 0.5)
        cases.append(prepare_case(Volume3D(image, id=f"synth_{k:03d}"), MaskVolume(labels, id=f"synth_{k:03d}"), target))
    return cases


def synthetic_slices(n: int, seed: int, size: int = SLICE_SIZE, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Balanced 2D overfitting set: a disc labelled 1 and a rectangle labelled 2 per slice.

    Returns images (n, 1, size, size) and integer masks (n, size, size).
    The rectangle is drawn last and overwrites the disc where they overlap.
    """
    rng = Rng(seed)
    yy, xx = np.mgrid[:size, :size]
    images, masks = [], []
    for _ in range(n):
        m = np.zeros((size, size), dtype=np.int64)
        cy = size // 4 + rng.below(size // 2)
        cx = size // 4 + rng.below(size // 2)
        r = size // 8 + rng.below(size // 10)
        m[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
        y0, x0 = rng.below(size * 5 // 8), rng.below(size * 5 // 8)
        h, w = size // 6 + rng.below(size // 5), size // 6 + rng.below(size // 5)
        m[y0:y0 + h, x0:x0 + w] = 2
        img = 0.1 + 0.4 * (m == 1) + 0.8 * (m == 2) + noise * (2.0 * rng.uniform_array((size, size)) - 1.0)
        images.append(img)
        masks.append(m)
    return np.stack(images)[:, None], np.stack(masks)
