"""Synthetic articulated-object data for the evaluation harness.

Each class is a fixed layout of 3-5 Gaussian "parts", every part carrying a
class-specific channel signature; an instance renders that layout at a
sampled pose onto a noisy feature map and passes it through a fixed random
3x3 mixing stem (smooth blobs alone would make every pooler look alike).
Rotation and reflection act on the part layout (the object moves); scale and
pan act only on the box (the proposal is off).  Rendering is a pure function
of (class layout, pose, instance seed), so re-posing an instance is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Array
from .reporting import (
    derive_seed,
    save_tjson,
    load_tjson,
    tensor_from_tjson,
    tensor_to_tjson,
)
from .sampler import RoIBox

DATASET_FORMAT = "semroi-dataset/1"
MAX_CROSS_CLASS_COSINE = 0.5


@dataclass(frozen=True)
class Pose:
    """Object pose (rotation/reflection) plus proposal error (scale/pan)."""

    rotation_deg: float = 0.0
    reflected: bool = False
    scale: float = 1.0
    pan_x: float = 0.0  # fraction of box size
    pan_y: float = 0.0


def compose_pose(base: Pose, delta: Pose) -> Pose:
    """Apply ``delta`` after ``base``.

    Rotation/reflection compose as the dihedral group (a reflection in the
    delta negates the base angle); scale is multiplicative, pan additive.
    Angles are not wrapped: negation is exact in floating point, so a double
    reflection restores the pose bit for bit.
    """
    sign = -1.0 if delta.reflected else 1.0
    return Pose(
        rotation_deg=delta.rotation_deg + sign * base.rotation_deg,
        reflected=base.reflected ^ delta.reflected,
        scale=base.scale * delta.scale,
        pan_x=base.pan_x + delta.pan_x,
        pan_y=base.pan_y + delta.pan_y,
    )


@dataclass(frozen=True, eq=False)
class PartSpec:
    offset_y: float
    offset_x: float
    sigma: float
    signature: Array  # (C,) unit vector


@dataclass(frozen=True)
class ClassSpec:
    parts: tuple[PartSpec, ...]


@dataclass(frozen=True, eq=False)
class RenderContext:
    """Everything needed to (re-)render instances of a dataset."""

    classes: tuple[ClassSpec, ...]
    stem: Array  # (C, C, 3, 3) fixed mixing weights
    channels: int
    map_size: int
    box_size: float
    noise_amp: float
    blob_amp: float


@dataclass(frozen=True)
class TransformRanges:
    """Magnitudes for random poses; also the invariance-protocol families."""

    rotation_max_deg: float = 45.0
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    pan_frac: float = 0.1


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    feature_map: Array  # (C, H, W)
    box: RoIBox
    label: int
    pose: Pose
    seed: int
    ctx: RenderContext | None = field(repr=False, default=None)


def _rotate_reflect(offsets: Array, pose: Pose) -> Array:
    """Apply reflection then rotation to (n, 2) [y, x] offsets."""
    out = offsets.copy()
    if pose.reflected:
        out[:, 1] = -out[:, 1]
    theta = math.radians(pose.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    y, x = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * y - s * x
    out[:, 1] = s * y + c * x
    return out


def apply_stem(fmap: Array, stem: Array) -> Array:
    """3x3 channel-mixing convolution, zero padded."""
    c, height, width = fmap.shape
    padded = np.pad(fmap, ((0, 0), (1, 1), (1, 1)))
    stack = np.stack(
        [padded[:, dy : dy + height, dx : dx + width] for dy in range(3) for dx in range(3)]
    )  # (9, C, H, W)
    return np.einsum("cko,okhw->chw", stem.reshape(c, c, 9), stack)


def render_instance(
    ctx: RenderContext, label: int, pose: Pose, seed: int
) -> SyntheticInstance:
    """Deterministic render of one instance."""
    rng = np.random.default_rng(seed)
    size = ctx.map_size
    fmap = rng.normal(0.0, ctx.noise_amp, size=(ctx.channels, size, size))
    spec = ctx.classes[label]
    center = size / 2.0
    offsets = np.array([[p.offset_y, p.offset_x] for p in spec.parts])
    moved = _rotate_reflect(offsets, pose)
    yy = np.arange(size)[:, None]
    xx = np.arange(size)[None, :]
    for part, (oy, ox) in zip(spec.parts, moved):
        cy, cx = center + oy, center + ox
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * part.sigma**2))
        fmap += ctx.blob_amp * part.signature[:, None, None] * blob
    fmap = apply_stem(fmap, ctx.stem)

    half = ctx.box_size * pose.scale / 2.0
    bx = center + pose.pan_x * ctx.box_size
    by = center + pose.pan_y * ctx.box_size
    x0 = float(np.clip(bx - half, 0.0, size - 2.0))
    y0 = float(np.clip(by - half, 0.0, size - 2.0))
    x1 = float(np.clip(bx + half, x0 + 1.0, size - 1.0))
    y1 = float(np.clip(by + half, y0 + 1.0, size - 1.0))
    return SyntheticInstance(
        feature_map=fmap,
        box=RoIBox(x0, y0, x1, y1),
        label=label,
        pose=pose,
        seed=seed,
        ctx=ctx,
    )


def _cosine_ok(v: Array, others: list[Array]) -> bool:
    nv = np.linalg.norm(v)
    return all(
        float(v @ o) / (nv * np.linalg.norm(o)) < MAX_CROSS_CLASS_COSINE for o in others
    )


def _class_signatures(
    rng: np.random.Generator, channels: int, n_parts: int, total: Array, previous: list[Array]
) -> list[Array]:
    """Per-part signature vectors for one class.

    Every class's signatures sum to the same small ``total`` vector: a linear
    classifier therefore cannot identify the class from any position-summed
    projection of the map (the obvious rotation-invariant shortcut), it has
    to resolve individual parts.  Cross-class pairwise cosines stay below
    MAX_CROSS_CLASS_COSINE by rejection.
    """
    for _ in range(10_000):
        free = [v / np.linalg.norm(v) for v in rng.standard_normal((n_parts - 1, channels))]
        last = total - np.sum(free, axis=0)
        if not 0.4 < float(np.linalg.norm(last)) < 2.6:
            continue
        candidate = free + [last]
        if all(_cosine_ok(v, previous) for v in candidate):
            return candidate
    raise RuntimeError("signature rejection sampling did not converge")


def make_render_context(
    n_classes: int,
    seed: int,
    channels: int = 16,
    map_size: int = 64,
    box_size: float = 28.0,
    noise_amp: float = 0.05,
    blob_amp: float = 1.0,
    layout_radius: float = 9.0,
    part_sigma: float = 2.5,
) -> RenderContext:
    rng = np.random.default_rng(derive_seed(seed, "layout"))
    classes = []
    previous: list[Array] = []
    total = rng.standard_normal(channels)
    total *= 0.3 / np.linalg.norm(total)
    for _ in range(n_classes):
        n_parts = int(rng.integers(3, 6))
        sigs = _class_signatures(rng, channels, n_parts, total, previous)
        parts = []
        for sig in sigs:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            # narrow radius band: radial profiles stay near class-constant,
            # so only the angular arrangement and per-part content separate
            # the classes
            radius = rng.uniform(0.6, 1.0) * layout_radius
            parts.append(
                PartSpec(
                    offset_y=radius * math.sin(angle),
                    offset_x=radius * math.cos(angle),
                    sigma=part_sigma,
                    signature=sig,
                )
            )
        previous.extend(sigs)
        classes.append(ClassSpec(parts=tuple(parts)))
    stem_rng = np.random.default_rng(derive_seed(seed, "stem"))
    stem = stem_rng.normal(0.0, 1.0 / math.sqrt(9 * channels), size=(channels, channels, 3, 3))
    return RenderContext(
        classes=tuple(classes),
        stem=stem,
        channels=channels,
        map_size=map_size,
        box_size=box_size,
        noise_amp=noise_amp,
        blob_amp=blob_amp,
    )


def random_pose(rng: np.random.Generator, ranges: TransformRanges) -> Pose:
    return Pose(
        rotation_deg=float(rng.uniform(-ranges.rotation_max_deg, ranges.rotation_max_deg)),
        reflected=bool(rng.integers(0, 2)),
        scale=float(rng.uniform(ranges.scale_lo, ranges.scale_hi)),
        pan_x=float(rng.uniform(-ranges.pan_frac, ranges.pan_frac)),
        pan_y=float(rng.uniform(-ranges.pan_frac, ranges.pan_frac)),
    )


def generate_dataset(
    n_classes: int,
    n_instances: int,
    seed: int,
    ranges: TransformRanges = TransformRanges(),
    **ctx_kwargs,
) -> list[SyntheticInstance]:
    """Round-robin labelled instances at random poses, deterministic per seed."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    ctx = make_render_context(n_classes, seed, **ctx_kwargs)
    pose_rng = np.random.default_rng(derive_seed(seed, "poses"))
    instances = []
    for i in range(n_instances):
        label = i % n_classes
        pose = random_pose(pose_rng, ranges)
        inst_seed = derive_seed(seed, f"instance/{i}")
        instances.append(render_instance(ctx, label, pose, inst_seed))
    return instances


def apply_transform(inst: SyntheticInstance, delta: Pose) -> SyntheticInstance:
    """Re-render the instance with ``delta`` composed onto its pose."""
    if inst.ctx is None:
        raise ValueError("instance has no render context; cannot re-pose")
    return render_instance(inst.ctx, inst.label, compose_pose(inst.pose, delta), inst.seed)


# ---------------------------------------------------------------------------
# on-disk cache


def _pose_doc(pose: Pose) -> dict:
    return {
        "rotation_deg": pose.rotation_deg,
        "reflected": pose.reflected,
        "scale": pose.scale,
        "pan_x": pose.pan_x,
        "pan_y": pose.pan_y,
    }


def _ctx_doc(ctx: RenderContext) -> dict:
    return {
        "channels": ctx.channels,
        "map_size": ctx.map_size,
        "box_size": ctx.box_size,
        "noise_amp": ctx.noise_amp,
        "blob_amp": ctx.blob_amp,
        "stem": tensor_to_tjson(ctx.stem),
        "classes": [
            [
                {
                    "offset_y": p.offset_y,
                    "offset_x": p.offset_x,
                    "sigma": p.sigma,
                    "signature": tensor_to_tjson(p.signature),
                }
                for p in spec.parts
            ]
            for spec in ctx.classes
        ],
    }


def _ctx_from_doc(doc: dict) -> RenderContext:
    classes = tuple(
        ClassSpec(
            parts=tuple(
                PartSpec(
                    offset_y=p["offset_y"],
                    offset_x=p["offset_x"],
                    sigma=p["sigma"],
                    signature=tensor_from_tjson(p["signature"]),
                )
                for p in parts
            )
        )
        for parts in doc["classes"]
    )
    return RenderContext(
        classes=classes,
        stem=tensor_from_tjson(doc["stem"]),
        channels=doc["channels"],
        map_size=doc["map_size"],
        box_size=doc["box_size"],
        noise_amp=doc["noise_amp"],
        blob_amp=doc["blob_amp"],
    )


def save_dataset(directory: str | Path, instances: list[SyntheticInstance], seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, inst in enumerate(instances):
        fname = f"instance_{i:05d}.tjson"
        save_tjson(directory / fname, inst.feature_map)
        entries.append(
            {
                "file": fname,
                "label": inst.label,
                "box": [inst.box.x0, inst.box.y0, inst.box.x1, inst.box.y1],
                "pose": _pose_doc(inst.pose),
                "seed": inst.seed,
            }
        )
    manifest = {
        "format": DATASET_FORMAT,
        "seed": seed,
        "n_instances": len(instances),
        "context": _ctx_doc(instances[0].ctx) if instances else None,
        "instances": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest))


def load_dataset(directory: str | Path) -> list[SyntheticInstance]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    ctx = _ctx_from_doc(manifest["context"]) if manifest.get("context") else None
    out = []
    for entry in manifest["instances"]:
        fmap = load_tjson(directory / entry["file"])
        x0, y0, x1, y1 = entry["box"]
        out.append(
            SyntheticInstance(
                feature_map=fmap,
                box=RoIBox(x0, y0, x1, y1),
                label=int(entry["label"]),
                pose=Pose(**entry["pose"]),
                seed=int(entry["seed"]),
                ctx=ctx,
            )
        )
    return out
