"""Deterministic two-domain synthetic "transmissive baggage" generator.

Scenes compose objects multiplicatively: every pixel keeps a factor
(1 - attenuation) per covering object, so empty regions transmit fully
(value 1.0) and stacked objects darken each other. Hand-collected (HC)
scenes always carry 1-3 threat objects and get lab-scanner nuisances
(border vignette, vertical stripe pattern, low noise); stream-of-commerce
(SOC) scenes carry zero threats and get field nuisances (blocky background
texture, occasional edge crop from a queued bag, higher noise). SOC scenes
also carry occasional unannotated benign "decoys" -- dense objects drawn
from the threat shape family with near-threat attenuation (tools, hardware)
-- so the stream resembles real commerce where threat-shaped benign items
occur but true threats do not.

Nuisances are drawn from an RNG stream separate from object placement, so
the domain cues never depend on the threat list.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Annotation, THREAT_CLASS_NAMES

HC = "HC"
SOC = "SOC"

IMAGE_MAGIC = b"XBG1"
MANIFEST_VERSION = 1
PIXEL_FLOOR = 1e-3

_PLACE_RETRIES = 32
_MIN_THREAT_PIXELS = 16
# offset xor-ed into the probe stream so probe seeds never collide with
# train/test seeds derived from the same base
_PROBE_SEED_OFFSET = 1 << 40


@dataclass(frozen=True)
class DomainNuisanceConfig:
    # Amplitudes are kept mild: the per-domain pattern structure (stripes and
    # vignette only in HC, blocky texture and edge crops only in SOC) already
    # makes the domains fully separable, while smaller amplitudes keep the
    # cues erasable by an adversarially trained backbone.
    hc_vignette: float = 0.12
    hc_stripe_amplitude: float = 0.06
    hc_stripe_period: float = 9.0
    hc_noise_sigma: float = 0.025
    soc_edge_crop_prob: float = 0.25
    soc_noise_sigma: float = 0.04
    soc_texture_scale: int = 16
    soc_texture_amplitude: float = 0.12


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    hc_threat_range: tuple[int, int] = (1, 3)
    hc_clutter_range: tuple[int, int] = (3, 10)
    soc_clutter_range: tuple[int, int] = (5, 15)
    # per-class attenuation bands (knife, blunt, gun, lag): distinct material
    # densities, the dominant class cue alongside shape
    class_attenuation: tuple[tuple[float, float], ...] = (
        (0.80, 0.88), (0.56, 0.64), (0.68, 0.76), (0.44, 0.52))
    clutter_attenuation: tuple[float, float] = (0.12, 0.36)
    threat_scale: tuple[float, float] = (11.0, 17.0)
    threat_rotation_max: float = 0.5  # radians; poses stay near-canonical
    # benign look-alikes present only in SOC scenes, never annotated: drawn
    # from the same shape and material distribution as threats, so domain
    # context is the only signal separating them from true threats
    soc_decoy_range: tuple[int, int] = (0, 2)
    nuisance: DomainNuisanceConfig = field(default_factory=DomainNuisanceConfig)


@dataclass(frozen=True)
class SplitCounts:
    hc_train: int = 2000
    soc_train: int = 10000
    hc_test: int = 400
    soc_test: int = 500
    probe: int = 400


@dataclass(frozen=True)
class ObjectSpec:
    shape_kind: str
    attenuation: float
    center: tuple[float, float]
    rotation: float
    scale: float
    extra: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.attenuation < 1.0:
            raise ValueError(f"ObjectSpec: attenuation {self.attenuation} outside (0,1)")


@dataclass(frozen=True)
class XrayImage:
    pixels: np.ndarray  # float32 [H, W], values in (0, 1]
    domain: str
    scene_seed: int


@dataclass
class Sample:
    path: str
    seed: int
    annotations: list[Annotation]


@dataclass
class DatasetManifest:
    version: int
    config_hash: str
    domain: str
    split: str
    samples: list[Sample]


def validate_generator_config(config: GeneratorConfig) -> None:
    if config.image_size < 16:
        raise ValueError(f"image_size {config.image_size} < 16")
    for name in ("hc_threat_range", "hc_clutter_range", "soc_clutter_range",
                 "threat_scale", "soc_decoy_range"):
        lo, hi = getattr(config, name)
        if not 0 <= lo <= hi:
            raise ValueError(f"{name} {lo, hi} is not an ascending range")
    if len(config.class_attenuation) != len(THREAT_CLASS_NAMES):
        raise ValueError(f"class_attenuation needs {len(THREAT_CLASS_NAMES)} bands")
    for band in config.class_attenuation + (config.clutter_attenuation,):
        lo, hi = band
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"attenuation band {lo, hi} must lie inside (0,1)")
    if config.hc_threat_range[0] < 1:
        raise ValueError("hc_threat_range must start at >= 1 threat")
    if config.nuisance.soc_texture_scale < 1:
        raise ValueError("soc_texture_scale must be >= 1")


def config_hash(config: GeneratorConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


_TUPLE_FIELDS = ("hc_threat_range", "hc_clutter_range", "soc_clutter_range",
                 "clutter_attenuation", "threat_scale", "soc_decoy_range")


def generator_config_from_dict(raw: dict) -> GeneratorConfig:
    raw = dict(raw)
    nuisance = DomainNuisanceConfig(**raw.pop("nuisance", {}))
    known = {f.name for f in dataclasses.fields(GeneratorConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown generator config fields: {sorted(unknown)}")
    for name in _TUPLE_FIELDS:
        if name in raw:
            raw[name] = tuple(raw[name])
    if "class_attenuation" in raw:
        raw["class_attenuation"] = tuple(tuple(band) for band in raw["class_attenuation"])
    config = GeneratorConfig(nuisance=nuisance, **raw)
    validate_generator_config(config)
    return config


# ---------------------------------------------------------------------------
# Shape rasterization
# ---------------------------------------------------------------------------


def _object_frame(spec: ObjectSpec, canvas):
    h, w = canvas
    yy, xx = np.indices((h, w), dtype=np.float64)
    dx = xx + 0.5 - spec.center[0]
    dy = yy + 0.5 - spec.center[1]
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return u, v


def object_mask(spec: ObjectSpec, canvas) -> np.ndarray:
    u, v = _object_frame(spec, canvas)
    s = spec.scale
    kind = spec.shape_kind
    if kind == "knife":
        # elongated triangle: wide base tapering to a tip
        length, base_half = 0.8 * s, 0.18 * s
        taper = base_half * (length - u) / (2.0 * length)
        return (np.abs(u) <= length) & (np.abs(v) <= taper)
    if kind == "gun":
        barrel = (np.abs(u) <= 0.6 * s) & (np.abs(v + 0.25 * s) <= 0.15 * s)
        grip = (np.abs(u + 0.38 * s) <= 0.14 * s) & (v >= -0.25 * s) & (v <= 0.45 * s)
        return barrel | grip
    if kind == "blunt":
        return (np.abs(u) <= 0.75 * s) & (np.abs(v) <= 0.16 * s)
    if kind == "lag":
        body = (u >= -0.55 * s) & (u <= 0.25 * s) & (np.abs(v) <= 0.3 * s)
        neck = (u > 0.25 * s) & (u <= 0.62 * s) & (np.abs(v) <= 0.11 * s)
        return body | neck
    if kind == "clutter_ellipse":
        a, b = spec.extra
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "clutter_rect":
        hw, hh = spec.extra
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    if kind == "clutter_blob":
        a1, b1, a2, b2, ox, oy = spec.extra
        first = (u / a1) ** 2 + (v / b1) ** 2 <= 1.0
        second = ((u - ox) / a2) ** 2 + ((v - oy) / b2) ** 2 <= 1.0
        return first | second
    raise ValueError(f"unknown shape_kind {kind!r}")


def render_transmissive(objects, canvas) -> np.ndarray:
    """Multiplicative composition: pixel = product of (1 - attenuation) over
    covering objects; uncovered pixels stay at 1.0."""
    pixels = np.ones(canvas, dtype=np.float64)
    for spec in objects:
        pixels[object_mask(spec, canvas)] *= 1.0 - spec.attenuation
    return pixels


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------


def _sample_threat(config: GeneratorConfig, rng) -> tuple[ObjectSpec, Annotation]:
    size = config.image_size
    margin = min(8.0, size / 4.0)
    canvas = (size, size)
    for _ in range(_PLACE_RETRIES):
        kind_idx = int(rng.integers(0, len(THREAT_CLASS_NAMES)))
        spec = ObjectSpec(
            shape_kind=THREAT_CLASS_NAMES[kind_idx],
            attenuation=float(rng.uniform(*config.class_attenuation[kind_idx])),
            center=(float(rng.uniform(margin, size - margin)),
                    float(rng.uniform(margin, size - margin))),
            rotation=float(rng.uniform(0.0, config.threat_rotation_max)),
            scale=float(rng.uniform(*config.threat_scale)),
        )
        mask = object_mask(spec, canvas)
        if mask.sum() < _MIN_THREAT_PIXELS:
            continue
        ys, xs = np.nonzero(mask)
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        return spec, Annotation(class_id=kind_idx + 1, box=box)
    raise RuntimeError(f"could not place a visible threat after {_PLACE_RETRIES} tries "
                       f"(image_size={size}, threat_scale={config.threat_scale})")


def _sample_decoy(config: GeneratorConfig, rng) -> ObjectSpec:
    """A benign look-alike: identical shape/material distribution to threats,
    but no annotation. Drawn only into SOC scenes."""
    spec, _ = _sample_threat(config, rng)
    return spec


def _sample_clutter(config: GeneratorConfig, rng) -> ObjectSpec:
    size = config.image_size
    kind = ("clutter_ellipse", "clutter_rect", "clutter_blob")[int(rng.integers(0, 3))]
    if kind == "clutter_ellipse":
        extra = tuple(rng.uniform(3.0, 11.0, size=2))
    elif kind == "clutter_rect":
        extra = tuple(rng.uniform(2.5, 10.0, size=2))
    else:
        extra = tuple(rng.uniform(2.5, 8.0, size=4)) + tuple(rng.uniform(-5.0, 5.0, size=2))
    return ObjectSpec(
        shape_kind=kind,
        attenuation=float(rng.uniform(*config.clutter_attenuation)),
        center=(float(rng.uniform(0.0, size)), float(rng.uniform(0.0, size))),
        rotation=float(rng.uniform(0.0, np.pi)),
        scale=0.0,
        extra=tuple(float(x) for x in extra),
    )


def sample_objects(config: GeneratorConfig, rng, n_threats: int, n_clutter: int,
                   n_decoys: int = 0):
    objects, annotations = [], []
    for _ in range(n_threats):
        spec, ann = _sample_threat(config, rng)
        objects.append(spec)
        annotations.append(ann)
    for _ in range(n_clutter):
        objects.append(_sample_clutter(config, rng))
    for _ in range(n_decoys):
        objects.append(_sample_decoy(config, rng))
    return objects, annotations


# ---------------------------------------------------------------------------
# Domain nuisances
# ---------------------------------------------------------------------------


def nuisance_fields(shape, domain: str, ncfg: DomainNuisanceConfig, rng) -> dict:
    """Multiplicative fields plus an additive noise field, all independent of
    scene content."""
    h, w = shape
    fields = {}
    if domain == HC:
        yy, xx = np.indices((h, w), dtype=np.float64)
        ry = (yy + 0.5) / h - 0.5
        rx = (xx + 0.5) / w - 0.5
        fields["vignette"] = 1.0 - ncfg.hc_vignette * (rx ** 2 + ry ** 2) / 0.5
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * (xx + 0.5) / ncfg.hc_stripe_period + phase)
        fields["stripes"] = 1.0 - ncfg.hc_stripe_amplitude * (0.5 + 0.5 * wave)
        sigma = ncfg.hc_noise_sigma
    elif domain == SOC:
        k = ncfg.soc_texture_scale
        cells = rng.uniform(0.0, 1.0, size=(h // k + 1, w // k + 1))
        blocky = np.kron(cells, np.ones((k, k)))[:h, :w]
        fields["texture"] = 1.0 - ncfg.soc_texture_amplitude * blocky
        if rng.uniform() < ncfg.soc_edge_crop_prob:
            band = np.ones((h, w))
            width = int(rng.integers(4, 11))
            factor = float(rng.uniform(0.45, 0.75))
            if rng.integers(0, 2) == 0:
                band[:, :width] = factor
            else:
                band[:, w - width:] = factor
            fields["edge_crop"] = band
        sigma = ncfg.soc_noise_sigma
    else:
        raise ValueError(f"unknown domain {domain!r}")
    fields["noise"] = rng.normal(0.0, sigma, size=(h, w))
    return fields


def apply_nuisances(pixels: np.ndarray, fields: dict) -> np.ndarray:
    out = pixels.copy()
    for name in ("vignette", "stripes", "texture", "edge_crop"):
        if name in fields:
            out = out * fields[name]
    out = out + fields["noise"]
    return np.clip(out, PIXEL_FLOOR, 1.0)


# ---------------------------------------------------------------------------
# Scene and dataset generation
# ---------------------------------------------------------------------------


def scene_streams(seed: int):
    """Independent (objects, nuisances) RNG streams for one scene."""
    root = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    obj_ss, nuis_ss = root.spawn(2)
    return np.random.default_rng(obj_ss), np.random.default_rng(nuis_ss)


def generate_scene(config: GeneratorConfig, domain: str, seed: int,
                   inject_threats: bool | None = None):
    """One scene. HC carries threats by construction, SOC carries none;
    inject_threats=True forces HC-style threats under SOC nuisances (the
    held-out probe)."""
    if domain not in (HC, SOC):
        raise ValueError(f"unknown domain {domain!r}")
    with_threats = (domain == HC) if inject_threats is None else inject_threats
    rng_obj, rng_nuis = scene_streams(seed)

    if with_threats:
        lo, hi = config.hc_threat_range
        n_threats = int(rng_obj.integers(lo, hi + 1))
    else:
        n_threats = 0
    lo, hi = config.hc_clutter_range if domain == HC else config.soc_clutter_range
    n_clutter = int(rng_obj.integers(lo, hi + 1))
    if domain == SOC:
        lo, hi = config.soc_decoy_range
        n_decoys = int(rng_obj.integers(lo, hi + 1))
    else:
        n_decoys = 0

    objects, annotations = sample_objects(config, rng_obj, n_threats, n_clutter,
                                          n_decoys)
    canvas = (config.image_size, config.image_size)
    pixels = render_transmissive(objects, canvas)
    fields = nuisance_fields(canvas, domain, config.nuisance, rng_nuis)
    pixels = apply_nuisances(pixels, fields).astype(np.float32)
    np.clip(pixels, np.float32(PIXEL_FLOOR), np.float32(1.0), out=pixels)
    return XrayImage(pixels=pixels, domain=domain, scene_seed=int(seed)), annotations


# ---------------------------------------------------------------------------
# Image file format
# ---------------------------------------------------------------------------


def save_image(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"save_image: expected [H, W], got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", arr.shape[0], arr.shape[1], 1))
        f.write(arr.tobytes())


def load_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != IMAGE_MAGIC:
        raise ValueError(f"image {path}: bad magic {blob[:4]!r}")
    h, w, c = struct.unpack_from("<III", blob, 4)
    if c != 1:
        raise ValueError(f"image {path}: expected 1 channel, got {c}")
    if len(blob) != 16 + 4 * h * w:
        raise ValueError(f"image {path}: truncated payload")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def validate_manifest(manifest: DatasetManifest) -> None:
    if manifest.version != MANIFEST_VERSION:
        raise ValueError(f"manifest version {manifest.version} unsupported")
    if manifest.domain not in (HC, SOC):
        raise ValueError(f"manifest domain {manifest.domain!r} unknown")
    if manifest.split not in ("train", "test", "probe"):
        raise ValueError(f"manifest split {manifest.split!r} unknown")
    for sample in manifest.samples:
        n = len(sample.annotations)
        if manifest.domain == HC and n == 0:
            raise ValueError(f"HC sample {sample.path} has no annotations")
        if manifest.domain == SOC and manifest.split != "probe" and n != 0:
            raise ValueError(f"SOC sample {sample.path} has {n} annotations")
        if manifest.split == "probe" and n == 0:
            raise ValueError(f"probe sample {sample.path} has no annotations")


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "version": manifest.version,
        "config_hash": manifest.config_hash,
        "domain": manifest.domain,
        "split": manifest.split,
        "samples": [
            {
                "path": s.path,
                "seed": s.seed,
                "annotations": [
                    {"class_id": a.class_id, "box": list(a.box)} for a in s.annotations
                ],
            }
            for s in manifest.samples
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_manifest(manifest: DatasetManifest, path) -> None:
    validate_manifest(manifest)
    Path(path).write_text(manifest_to_json(manifest), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    manifest = DatasetManifest(
        version=doc["version"],
        config_hash=doc["config_hash"],
        domain=doc["domain"],
        split=doc["split"],
        samples=[
            Sample(
                path=s["path"],
                seed=int(s["seed"]),
                annotations=[
                    Annotation(class_id=int(a["class_id"]), box=tuple(float(v) for v in a["box"]))
                    for a in s["annotations"]
                ],
            )
            for s in doc["samples"]
        ],
    )
    validate_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Dataset writers
# ---------------------------------------------------------------------------


def _write_split(config, out_dir: Path, name: str, domain: str, split: str,
                 seeds, inject_threats, created: list) -> DatasetManifest:
    split_dir = out_dir / name
    split_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, seed in enumerate(seeds):
        image, annotations = generate_scene(config, domain, seed, inject_threats=inject_threats)
        rel = f"{name}/{i:06d}.xbg"
        save_image(out_dir / rel, image.pixels)
        created.append(out_dir / rel)
        samples.append(Sample(path=rel, seed=int(seed), annotations=annotations))
    manifest = DatasetManifest(version=MANIFEST_VERSION, config_hash=config_hash(config),
                               domain=domain, split=split, samples=samples)
    manifest_path = out_dir / f"{name}.json"
    save_manifest(manifest, manifest_path)
    created.append(manifest_path)
    return manifest


def generate_soc_with_injected_threats(config: GeneratorConfig, seed: int, count: int,
                                       out_dir) -> DatasetManifest:
    """Held-out probe: SOC nuisance pipeline with HC-style threats. Used only
    for evaluation, never training."""
    validate_generator_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    seeds = [int(seed) ^ i for i in range(count)]
    try:
        return _write_split(config, out, "probe", SOC, "probe", seeds,
                            inject_threats=True, created=created)
    except BaseException:
        _cleanup(created)
        raise


def generate_dataset(config: GeneratorConfig, counts: SplitCounts, base_seed: int,
                     out_dir) -> dict[str, DatasetManifest]:
    """Write all splits: per-sample seeds are base_seed xor a global sample
    index, so every sample across every split has a distinct seed."""
    validate_generator_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = [
        ("hc_train", HC, "train", counts.hc_train),
        ("soc_train", SOC, "train", counts.soc_train),
        ("hc_test", HC, "test", counts.hc_test),
        ("soc_test", SOC, "test", counts.soc_test),
    ]
    created: list[Path] = []
    manifests: dict[str, DatasetManifest] = {}
    next_index = 0
    try:
        for name, domain, split, count in plan:
            seeds = [int(base_seed) ^ (next_index + i) for i in range(count)]
            next_index += count
            manifests[name] = _write_split(config, out, name, domain, split, seeds,
                                           inject_threats=None, created=created)
        if counts.probe > 0:
            manifests["probe"] = generate_soc_with_injected_threats(
                config, int(base_seed) ^ _PROBE_SEED_OFFSET, counts.probe, out)
    except BaseException:
        _cleanup(created)
        raise
    return manifests


def _cleanup(created: list[Path]) -> None:
    for path in reversed(created):
        try:
            path.unlink(missing_ok=True)
        except OSError:
            pass


def load_sample(manifest_dir, sample: Sample) -> np.ndarray:
    return load_image(Path(manifest_dir) / sample.path)
