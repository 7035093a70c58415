"""Frozen-embedding fixture store: the model's only external data dependency.

A fixture directory is ``manifest.json`` plus raw payload files. Each
manifest entry is ``{name, dtype: "f32", shape, file, byte_order: "little"}``
and the payload is row-major little-endian 32-bit floats, so any ecosystem
can produce one bit-exactly. Arrays are widened to float64 on load; the
32-bit file payload is the durable representation.

Global arrays hold text embeddings (attributes, super-classes, objects).
Per-instance arrays are namespaced as ``f_img/<instance_id>``,
``f_crop/<instance_id>``, ``z_hat/<instance_id>`` (pooled-adapter outputs)
and ``mask_token_feats/<instance_id>`` (one row per super-class, extracted
from super-class prompts; all-zero rows mark super-classes without a
semantic prompt, e.g. "other").

The same manifest format doubles as the checkpoint container for model
weights (see trainer).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hierarchy import AttributeHierarchy

MANIFEST_NAME = "manifest.json"
ARRAY_SUBDIR = "arrays"

GLOBAL_ARRAYS = ("attr_text_emb", "super_text_emb", "obj_text_emb")
INSTANCE_ARRAYS = ("f_img", "f_crop", "z_hat", "mask_token_feats")


class FixtureError(Exception):
    """Fixture directory failed validation; message names the array."""


@dataclass
class FixtureDims:
    d_q: int
    d_v: int
    h: int
    w: int
    n_z: int

    @property
    def hw(self) -> int:
        return self.h * self.w

    def to_dict(self) -> dict:
        return {"d_q": self.d_q, "d_v": self.d_v, "h": self.h, "w": self.w, "n_z": self.n_z}

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureDims":
        return cls(d_q=int(d["d_q"]), d_v=int(d["d_v"]), h=int(d["h"]), w=int(d["w"]), n_z=int(d["n_z"]))


@dataclass
class EmbeddingFixture:
    """In-memory view of a fixture: float64 arrays keyed like the manifest."""

    dims: FixtureDims
    attr_text_emb: np.ndarray  # [N_a, d_q]
    super_text_emb: np.ndarray  # [N_s, d_q]
    obj_text_emb: np.ndarray  # [N_o, d_q]
    f_img: dict[str, np.ndarray] = field(default_factory=dict)  # [hw, d_v]
    f_crop: dict[str, np.ndarray] = field(default_factory=dict)  # [hw, d_v]
    z_hat: dict[str, np.ndarray] = field(default_factory=dict)  # [n_z, d_q]
    mask_token_feats: dict[str, np.ndarray] = field(default_factory=dict)  # [N_s, d_q]
    metadata: dict = field(default_factory=dict)

    def instance_ids(self) -> list[str]:
        return sorted(self.f_crop.keys())

    def has_instance(self, instance_id: str) -> bool:
        return all(
            instance_id in getattr(self, name) for name in INSTANCE_ARRAYS
        )

    def validate(self) -> None:
        d = self.dims
        _expect_shape("attr_text_emb", self.attr_text_emb, (None, d.d_q))
        _expect_shape("super_text_emb", self.super_text_emb, (None, d.d_q))
        _expect_shape("obj_text_emb", self.obj_text_emb, (None, d.d_q))
        n_s = self.super_text_emb.shape[0]
        for iid in self.f_img:
            _expect_shape(f"f_img/{iid}", self.f_img[iid], (d.hw, d.d_v))
        for iid in self.f_crop:
            _expect_shape(f"f_crop/{iid}", self.f_crop[iid], (d.hw, d.d_v))
        for iid in self.z_hat:
            _expect_shape(f"z_hat/{iid}", self.z_hat[iid], (d.n_z, d.d_q))
        for iid in self.mask_token_feats:
            _expect_shape(f"mask_token_feats/{iid}", self.mask_token_feats[iid], (n_s, d.d_q))
        ids = set(self.f_img)
        for name in INSTANCE_ARRAYS[1:]:
            other = set(getattr(self, name))
            if other != ids:
                missing = ids.symmetric_difference(other)
                raise FixtureError(
                    f"instance arrays out of sync for {name}: {sorted(missing)[:5]}"
                )


def _expect_shape(name: str, arr: np.ndarray, shape: tuple) -> None:
    if arr.ndim != len(shape):
        raise FixtureError(f"array {name!r}: expected {len(shape)}-D, got shape {arr.shape}")
    for got, want in zip(arr.shape, shape):
        if want is not None and got != want:
            raise FixtureError(f"array {name!r}: expected shape {shape}, got {arr.shape}")
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise FixtureError(f"array {name!r}: contains non-finite values")


# --- raw manifest format -------------------------------------------------


def _safe_filename(name: str) -> str:
    safe = name.replace("/", "__")
    return f"{safe}.f32"


def save_arrays(path: Path | str, arrays: dict[str, np.ndarray], dims: dict | None = None,
                metadata: dict | None = None) -> None:
    """Write a manifest directory from ``name -> array`` (stored as f32)."""
    root = Path(path)
    arr_dir = root / ARRAY_SUBDIR
    arr_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    files_seen: set[str] = set()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        fname = _safe_filename(name)
        if fname in files_seen:
            raise FixtureError(f"array name {name!r} collides with another payload file")
        files_seen.add(fname)
        (arr_dir / fname).write_bytes(arr.tobytes())
        entries.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(arr.shape),
                "file": f"{ARRAY_SUBDIR}/{fname}",
                "byte_order": "little",
            }
        )
    manifest: dict = {"arrays": entries}
    if dims is not None:
        manifest["dims"] = dims
    if metadata:
        manifest["metadata"] = metadata
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a manifest directory into ``name -> float64 array`` plus manifest."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FixtureError(f"missing {MANIFEST_NAME} in {root}")
    manifest = json.loads(mpath.read_text())
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.get("arrays", []):
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise FixtureError(f"array {name!r}: unsupported dtype {entry.get('dtype')!r}")
        if entry.get("byte_order", "little") != "little":
            raise FixtureError(f"array {name!r}: unsupported byte order")
        fpath = root / entry["file"]
        if not fpath.is_file():
            raise FixtureError(f"array {name!r}: missing payload file {entry['file']}")
        raw = fpath.read_bytes()
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise FixtureError(
                f"array {name!r}: payload holds {len(raw) // 4} floats, shape {shape} needs "
                f"{expected // 4}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
            raise FixtureError(f"array {name!r}: contains non-finite values")
        arrays[name] = arr
    return arrays, manifest


def save_fixture(fixture: EmbeddingFixture, path: Path | str) -> None:
    arrays: dict[str, np.ndarray] = {
        "attr_text_emb": fixture.attr_text_emb,
        "super_text_emb": fixture.super_text_emb,
        "obj_text_emb": fixture.obj_text_emb,
    }
    for name in INSTANCE_ARRAYS:
        for iid, arr in getattr(fixture, name).items():
            arrays[f"{name}/{iid}"] = arr
    save_arrays(path, arrays, dims=fixture.dims.to_dict(), metadata=fixture.metadata)


def load_fixture(path: Path | str) -> EmbeddingFixture:
    arrays, manifest = load_arrays(path)
    if "dims" not in manifest:
        raise FixtureError("manifest lacks a dims block")
    dims = FixtureDims.from_dict(manifest["dims"])
    for name in GLOBAL_ARRAYS:
        if name not in arrays:
            raise FixtureError(f"array {name!r}: missing from manifest")
    fixture = EmbeddingFixture(
        dims=dims,
        attr_text_emb=arrays.pop("attr_text_emb"),
        super_text_emb=arrays.pop("super_text_emb"),
        obj_text_emb=arrays.pop("obj_text_emb"),
        metadata=manifest.get("metadata", {}),
    )
    for name, arr in arrays.items():
        if "/" not in name:
            raise FixtureError(f"array {name!r}: unrecognized global array")
        kind, iid = name.split("/", 1)
        if kind not in INSTANCE_ARRAYS:
            raise FixtureError(f"array {name!r}: unrecognized per-instance kind {kind!r}")
        getattr(fixture, kind)[iid] = arr
    fixture.validate()
    return fixture


# --- synthetic fixture generation ----------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a planted synthetic fixture + dataset.

    ``noise`` is the per-coordinate std of the Gaussian spread of attribute
    text embeddings around their super-class centroid; the remaining knobs
    control the visual side (row noise, per-attribute idiosyncrasy that a
    purely text-linear readout cannot capture, and adapter-output noise).
    """

    seed: int = 0
    n_attrs: int = 40
    n_super: int = 5
    n_objects: int = 4
    n_instances: int = 500
    n_novel: int = 8
    d_q: int = 32
    d_v: int = 24
    h: int = 4
    w: int = 4
    n_z: int = 8
    noise: float = 0.35
    feature_noise: float = 0.1
    idiosyncrasy: float = 0.6
    mask_token_noise: float = 0.05
    token_scale: float = 0.5
    zhat_noise: float = 0.05
    annotated_negatives: int | None = None  # None: every negative is annotated
    mask_grid: int = 8  # annotation masks are mask_grid x mask_grid

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_novel >= self.n_attrs:
            raise ValueError("n_novel must leave at least one base attribute")
        if self.n_z < self.n_super + 1:
            raise ValueError("n_z must cover one row per super-class plus the object row")


@dataclass
class SynthResult:
    fixture: EmbeddingFixture
    hierarchy: AttributeHierarchy
    instances: list  # data.Instance records
    labels: np.ndarray  # [n_instances, n_attrs] in {1, 0, -1}
    novel_names: list[str]


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def synth_fixture(spec: SynthSpec) -> SynthResult:
    """Generate a fixture with a planted hierarchy and planted labels.

    Construction invariants the tests rely on:
      - attribute text embedding i = centroid[delta[i]] + noise * gaussian,
        so similarity mapping can recover the planted hierarchy;
      - each instance carries exactly one positive attribute per super-class,
        and its crop feature map encodes those positives linearly (a fixed
        map from text space plus a per-attribute idiosyncratic direction);
      - adapter outputs (z_hat) contain one row near each positive
        attribute's text embedding, so retrieval scores favor true positives;
      - mask-token rows are noisy projections of the positive attribute's
        visual prototype for each super-class (the consistency target is
        reachable from the feature maps, as a frozen captioner's would be).

    Pure function of the spec: the same spec yields identical arrays.
    """
    from .data import Instance  # local import to avoid a cycle

    rng = np.random.default_rng(spec.seed)
    n_a, n_s, n_o = spec.n_attrs, spec.n_super, spec.n_objects
    dims = FixtureDims(d_q=spec.d_q, d_v=spec.d_v, h=spec.h, w=spec.w, n_z=spec.n_z)

    attr_names = [f"attr{i:03d}" for i in range(n_a)]
    super_names = [f"group{j}" for j in range(n_s)]
    obj_names = [f"object{k}" for k in range(n_o)]
    delta = np.arange(n_a) % n_s

    centroids = _unit_rows(rng, n_s, spec.d_q)
    attr_emb = centroids[delta] + spec.noise * rng.normal(size=(n_a, spec.d_q))
    obj_emb = _unit_rows(rng, n_o, spec.d_q)

    # Visual prototypes: shared linear image of the text embedding plus an
    # idiosyncratic direction. The shared part is what generalizes to novel
    # attributes; the idiosyncratic part caps text-only extrapolation.
    vis_map = rng.normal(size=(spec.d_v, spec.d_q)) / np.sqrt(spec.d_q)
    idio = _unit_rows(rng, n_a, spec.d_v)
    proto = attr_emb @ vis_map.T + spec.idiosyncrasy * idio
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)

    # Per-super-class region signature: tells attention where each
    # super-class's evidence lives in the feature map.
    region_sig = _unit_rows(rng, n_s, spec.d_v)
    # Projection used for mask-token targets (visual prototype -> d_q space)
    token_map = rng.normal(size=(spec.d_q, spec.d_v)) / np.sqrt(spec.d_v)
    hw = dims.hw
    rows_per_super = [np.arange(j, hw, n_s) for j in range(n_s)]

    hierarchy = AttributeHierarchy(
        attributes=attr_names,
        super_classes=super_names,
        delta=delta,
        object_categories=obj_names,
    )

    members = [np.flatnonzero(delta == j) for j in range(n_s)]
    labels = np.zeros((spec.n_instances, n_a), dtype=np.int8)
    fixture = EmbeddingFixture(
        dims=dims,
        attr_text_emb=attr_emb,
        super_text_emb=centroids.copy(),
        obj_text_emb=obj_emb,
        metadata={"generator": "synthetic", "seed": spec.seed},
    )
    instances = []
    grid = spec.mask_grid
    full_mask_counts = [0, grid * grid]  # all-ones mask, RLE starts with zero count

    for n in range(spec.n_instances):
        iid = f"inst{n:05d}"
        obj_idx = int(rng.integers(n_o))
        positives = np.array([int(rng.choice(members[j])) for j in range(n_s)])
        labels[n, positives] = 1

        f_crop = spec.feature_noise * rng.normal(size=(hw, spec.d_v))
        for j in range(n_s):
            f_crop[rows_per_super[j]] += proto[positives[j]] + region_sig[j]
        f_img = 0.6 * f_crop + 0.4 * spec.feature_noise * rng.normal(size=(hw, spec.d_v)) \
            + 0.2 * rng.normal(size=(1, spec.d_v))

        z_rows = np.empty((spec.n_z, spec.d_q))
        z_rows[0] = obj_emb[obj_idx] + spec.zhat_noise * rng.normal(size=spec.d_q)
        for j in range(n_s):
            z_rows[1 + j] = attr_emb[positives[j]] + spec.zhat_noise * rng.normal(size=spec.d_q)
        if spec.n_z > n_s + 1:
            z_rows[n_s + 1:] = 0.1 * rng.normal(size=(spec.n_z - n_s - 1, spec.d_q))

        mask_tokens = spec.token_scale * (proto[positives] @ token_map.T) \
            + spec.mask_token_noise * rng.normal(size=(n_s, spec.d_q))

        fixture.f_crop[iid] = f_crop
        fixture.f_img[iid] = f_img
        fixture.z_hat[iid] = z_rows
        fixture.mask_token_feats[iid] = mask_tokens

        pos_names = [attr_names[i] for i in positives]
        neg_idx = np.array([i for i in range(n_a) if labels[n, i] == 0])
        if spec.annotated_negatives is not None and spec.annotated_negatives < neg_idx.size:
            chosen = rng.choice(neg_idx, size=spec.annotated_negatives, replace=False)
            unlisted = np.setdiff1d(neg_idx, chosen)
            labels[n, unlisted] = -1
            neg_idx = np.sort(chosen)
        neg_names = [attr_names[i] for i in neg_idx]
        instances.append(
            Instance(
                instance_id=iid,
                image_id=f"img{n:05d}",
                box=(0.0, 0.0, float(grid), float(grid)),
                mask_size=(grid, grid),
                mask_counts=list(full_mask_counts),
                object_category=obj_names[obj_idx],
                positive_attributes=pos_names,
                negative_attributes=neg_names,
            )
        )

    novel_names = attr_names[n_a - spec.n_novel:]
    return SynthResult(
        fixture=fixture,
        hierarchy=hierarchy,
        instances=instances,
        labels=labels,
        novel_names=novel_names,
    )
