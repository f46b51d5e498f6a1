"""Feature map storage: binary sample files, JSON manifests, synthetic data.

A sample is one backbone feature map of shape (patches, channels), float32.
On disk each sample is a single ``.xsft`` file:

    magic      4 bytes  b"XSFT"
    version    u32      currently 1
    sample_id  u64
    domain     u8       0 = RGB, 1 = IR
    true_label i64      -1 when unknown
    patches    u32
    channels   u32
    payload    patches * channels * f32, row-major

All integers and floats are little-endian.  A dataset directory holds the
sample files next to a ``manifest.json`` listing them with their domain plus
free-form provenance metadata.  Labels ride along in the files for evaluation
only; ``Dataset.training_view`` hands the training code a copy with every
label blanked to -1 so nothing downstream can depend on them.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateIdError,
    InvalidConfigError,
    MalformedFileError,
    ShapeMismatchError,
    StoreIoError,
)

MAGIC = b"XSFT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQBqII")


class Domain(IntEnum):
    RGB = 0
    IR = 1

    @property
    def tag(self) -> str:
        return "rgb" if self is Domain.RGB else "ir"

    @staticmethod
    def from_tag(tag: str) -> "Domain":
        try:
            return {"rgb": Domain.RGB, "ir": Domain.IR}[tag]
        except KeyError:
            raise MalformedFileError(f"unknown domain tag {tag!r}") from None


@dataclass(frozen=True)
class FeatureMap:
    """One sample: (patches, channels) float32 array plus identity metadata."""

    sample_id: int
    domain: Domain
    data: np.ndarray
    true_label: int = -1

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeMismatchError(
                f"feature map must be 2-D (patches, channels), got shape {arr.shape}"
            )
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(f"degenerate feature map shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise MalformedFileError(f"sample {self.sample_id}: non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def patches(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Two per-domain sample lists with uniform geometry.

    Geometry (patches, channels) must agree across every sample; sample_ids
    must be unique across both domains.
    """

    rgb: tuple
    ir: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rgb", tuple(self.rgb))
        object.__setattr__(self, "ir", tuple(self.ir))
        for fm in self.rgb:
            if fm.domain is not Domain.RGB:
                raise MalformedFileError(f"sample {fm.sample_id} listed as RGB but tagged {fm.domain.tag}")
        for fm in self.ir:
            if fm.domain is not Domain.IR:
                raise MalformedFileError(f"sample {fm.sample_id} listed as IR but tagged {fm.domain.tag}")
        shapes = {fm.data.shape for fm in self.all_samples()}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"inconsistent feature geometry: {sorted(shapes)}")
        ids = [fm.sample_id for fm in self.all_samples()]
        if len(ids) != len(set(ids)):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise DuplicateIdError(f"duplicate sample_id {dup}")

    def all_samples(self):
        return list(self.rgb) + list(self.ir)

    @property
    def patches(self) -> int:
        s = self.all_samples()
        return s[0].patches if s else 0

    @property
    def channels(self) -> int:
        s = self.all_samples()
        return s[0].channels if s else 0

    def has_labels(self) -> bool:
        return any(fm.true_label >= 0 for fm in self.all_samples())

    def training_view(self) -> "Dataset":
        """Label-stripped copy: every true_label reads -1.

        Training code receives this view, so label leakage into the
        unsupervised path is ruled out by construction.
        """
        blank = lambda fm: replace(fm, true_label=-1)
        return Dataset(
            rgb=tuple(blank(fm) for fm in self.rgb),
            ir=tuple(blank(fm) for fm in self.ir),
            metadata=dict(self.metadata),
        )


def write_sample(fm: FeatureMap, path) -> None:
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        fm.sample_id,
        int(fm.domain),
        fm.true_label,
        fm.patches,
        fm.channels,
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(fm.data.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise StoreIoError(f"cannot write {path}: {exc}") from exc


def read_sample(path) -> FeatureMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StoreIoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise MalformedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, sample_id, domain, true_label, patches, channels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    if domain not in (0, 1):
        raise MalformedFileError(f"{path}: bad domain byte {domain}")
    expect = _HEADER.size + patches * channels * 4
    if len(raw) != expect:
        raise MalformedFileError(f"{path}: payload length {len(raw) - _HEADER.size}, expected {expect - _HEADER.size}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(patches, channels)
    return FeatureMap(sample_id=sample_id, domain=Domain(domain), data=data, true_label=true_label)


def _sample_filename(fm: FeatureMap) -> str:
    return f"{fm.domain.tag}_{fm.sample_id:06d}.xsft"


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write every sample plus manifest.json into out_dir; returns manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StoreIoError(f"cannot create {out}: {exc}") from exc
    entries = []
    for fm in ds.all_samples():
        name = _sample_filename(fm)
        write_sample(fm, out / name)
        entries.append({"path": name, "domain": fm.domain.tag})
    manifest = {
        "format": "xsft-manifest",
        "version": FORMAT_VERSION,
        "metadata": ds.metadata,
        "files": entries,
    }
    mpath = out / "manifest.json"
    try:
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StoreIoError(f"cannot write {mpath}: {exc}") from exc
    return mpath


def load_dataset(path) -> Dataset:
    """Load a dataset from a manifest path or a directory containing manifest.json."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        manifest = json.loads(p.read_text())
    except OSError as exc:
        raise StoreIoError(f"cannot read {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != "xsft-manifest":
        raise MalformedFileError(f"{p}: not an xsft manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise MalformedFileError(f"{p}: unsupported manifest version {manifest.get('version')}")
    files = manifest.get("files")
    if not isinstance(files, list):
        raise MalformedFileError(f"{p}: manifest 'files' must be a list")
    base = p.parent
    rgb, ir = [], []
    for entry in files:
        if not isinstance(entry, dict) or "path" not in entry or "domain" not in entry:
            raise MalformedFileError(f"{p}: manifest entry {entry!r} lacks path/domain")
        fm = read_sample(base / entry["path"])
        if fm.domain is not Domain.from_tag(entry["domain"]):
            raise MalformedFileError(
                f"{entry['path']}: manifest says {entry['domain']}, file says {fm.domain.tag}"
            )
        (rgb if fm.domain is Domain.RGB else ir).append(fm)
    return Dataset(rgb=rgb, ir=ir, metadata=manifest.get("metadata", {}))


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic cross-spectral dataset: shared identity latents pushed through
    two fixed linear maps that differ by domain_gap, plus white noise."""

    n_identities: int = 10
    samples_per_id_per_domain: int = 8
    patches: int = 4
    channels: int = 8
    latent_dim: int = 6
    domain_gap: float = 0.15
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.samples_per_id_per_domain < 1:
            raise InvalidConfigError("need at least one identity and one sample per domain")
        if self.patches < 1 or self.channels < 1 or self.latent_dim < 1:
            raise InvalidConfigError("patches, channels, latent_dim must be positive")
        if self.domain_gap < 0 or self.noise_sigma < 0:
            raise InvalidConfigError("domain_gap and noise_sigma must be non-negative")


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset; identical cfg gives bit-identical output.

    RGB sample of identity k: reshape(B_rgb @ z_k + eps); IR uses
    B_ir = B_rgb + domain_gap * B_delta.  With domain_gap = 0 and
    noise_sigma = 0 every sample of identity k is the exact same array in
    both domains.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    d_out = cfg.patches * cfg.channels
    z = rng.standard_normal((cfg.n_identities, cfg.latent_dim))
    b_rgb = rng.standard_normal((d_out, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    b_delta = rng.standard_normal((d_out, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    b_ir = b_rgb + cfg.domain_gap * b_delta

    rgb, ir = [], []
    next_id = 0
    for domain, basis, bucket in ((Domain.RGB, b_rgb, rgb), (Domain.IR, b_ir, ir)):
        for k in range(cfg.n_identities):
            clean = basis @ z[k]
            for _ in range(cfg.samples_per_id_per_domain):
                eps = rng.standard_normal(d_out) * cfg.noise_sigma if cfg.noise_sigma > 0 else 0.0
                vec = (clean + eps).astype(np.float32)
                bucket.append(
                    FeatureMap(
                        sample_id=next_id,
                        domain=domain,
                        data=vec.reshape(cfg.patches, cfg.channels),
                        true_label=k,
                    )
                )
                next_id += 1
    meta = {
        "source": "synth",
        "seed": cfg.seed,
        "n_identities": cfg.n_identities,
        "samples_per_id_per_domain": cfg.samples_per_id_per_domain,
        "patches": cfg.patches,
        "channels": cfg.channels,
        "latent_dim": cfg.latent_dim,
        "domain_gap": cfg.domain_gap,
        "noise_sigma": cfg.noise_sigma,
    }
    return Dataset(rgb=rgb, ir=ir, metadata=meta)
