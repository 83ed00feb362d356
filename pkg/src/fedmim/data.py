"""Procedural retina-like image corpus and client partitioning.

Every image is drawn from explicit generator parameters (:class:`SampleParams`):
a fundus field tinted per dataset, random-walk vessels rooted at the optic
disc, small lesions of two types, and the disc itself drawn last. Labels
are exact functions of those parameters:

* severity    lesion count 0 | 1-2 | 3-4 | 5-6 | 7+  ->  grade 0..4
* binary      lesion count >= 3
* multilabel  bit ``type * 4 + k - 1`` is set when there are at least k
              lesions of that type (0 exudate, 1 haemorrhage), k = 1..4
* multiclass  ``disc_anchor * 2 + disc_size_bin`` over 5 anchors x 2 sizes
* seg-disc    mask = pixels inside the disc
* seg-vessel  mask = vessel pixels inside the fundus field not covered by
              a lesion or the disc

Each sample's rng is ``default_rng([seed, split, index])``, so samples can be
generated independently and in any order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

TASK_KINDS = ("multilabel", "multiclass", "binary", "severity", "seg-disc", "seg-vessel")
SEG_KINDS = ("seg-disc", "seg-vessel")
NUM_LABELS = 8
NUM_CLASSES = 10
NUM_GRADES = 5
SPLITS = {"train": 0, "test": 1}

DISC_ANCHORS = ((0.3, 0.5), (0.7, 0.5), (0.5, 0.3), (0.5, 0.7), (0.5, 0.5))
DISC_RADIUS = ((0.08, 0.10), (0.14, 0.17))

# reference sizes of six public fundus sets: name, task kind, train, test, out-of-network, RGB tint
TABLE = (
    ("RFMiD", "multilabel", 1920, 640, False, (1.05, 0.95, 0.90)),
    ("DR", "severity", 29600, 6800, False, (1.00, 1.00, 1.00)),
    ("EYEPACS", "binary", 8000, 770, False, (0.92, 1.05, 1.10)),
    ("REFUGE2", "seg-disc", 400, 400, False, (1.10, 0.90, 0.85)),
    ("LACDHS", "seg-vessel", 80, 20, True, (0.95, 1.00, 1.15)),
    ("JSIEC", "multiclass", 800, 200, True, (1.00, 1.10, 0.95)),
)
SCALES = {"small": 100, "tiny": 200}
MIN_TRAIN = 8
MIN_TEST = 16

IMAGE_MAGIC = b"FMIMGRAW"
MASK_MAGIC = b"FMIMMASK"
CONTAINER_VERSION = 1
_IMG_HEADER = struct.Struct("<8sHIHHH")  # magic, version, count, channels, height, width
_MASK_HEADER = struct.Struct("<8sHIHH")  # magic, version, count, height, width


@dataclass(frozen=True)
class SynthTaskSpec:
    name: str
    kind: str
    n_train: int
    n_test: int
    seed: int = 0
    image_size: int = 32
    out_of_network: bool = False
    tint: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError(f"{self.name}: sample counts must be positive")
        if self.image_size not in (32, 64):
            raise ValueError(f"{self.name}: image_size must be 32 or 64, got {self.image_size}")

    @property
    def num_outputs(self) -> int:
        return {"multilabel": NUM_LABELS, "multiclass": NUM_CLASSES, "binary": 1,
                "severity": NUM_GRADES}.get(self.kind, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tint"] = list(self.tint)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTaskSpec":
        d = dict(d)
        d["tint"] = tuple(d.get("tint", (1.0, 1.0, 1.0)))
        return cls(**d)


@dataclass
class SampleParams:
    disc_anchor: int
    disc_size: int
    disc_center: tuple
    disc_radius: float
    lesions: list  # (x, y, radius, type)
    vessels: list  # list of pixel paths [(x, y), ...]


@dataclass
class SampleRecord:
    id: str
    dataset: str
    split: str
    task: str
    index: int
    label: object = None  # int, or tuple of 0/1 for multilabel; None for segmentation
    path: str = ""
    mask_path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False, compare=False)  # uint8 [H, W, 3]
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)  # bool [H, W]


@dataclass
class DatasetManifest:
    """Records of one client's (or one dataset's) private samples.

    Never serialised toward the server; only the count of unlabeled train
    images crosses that boundary.
    """

    specs: dict  # dataset name -> SynthTaskSpec
    records: list
    owner: int | None = None

    def __len__(self):
        return len(self.records)

    @property
    def spec(self) -> SynthTaskSpec:
        if len(self.specs) != 1:
            raise ValueError(f"manifest spans {len(self.specs)} datasets; no single spec")
        return next(iter(self.specs.values()))

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(self.specs, [r for r in self.records if r.split == split], self.owner)

    def images(self, idx=None) -> np.ndarray:
        """Float32 ``[B, 3, H, W]`` in [0, 1]."""
        recs = self.records if idx is None else [self.records[i] for i in idx]
        arr = np.stack([r.image for r in recs]).astype(np.float32) / np.float32(255.0)
        return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))

    def labels(self, idx=None) -> np.ndarray:
        recs = self.records if idx is None else [self.records[i] for i in idx]
        if recs and recs[0].task in SEG_KINDS:
            return np.stack([r.mask for r in recs]).astype(np.float32)
        return np.asarray([r.label for r in recs])

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


# ---------------------------------------------------------------------------
# generation


def label_from_params(kind: str, params: SampleParams, size: int):
    n = len(params.lesions)
    if kind == "severity":
        return 0 if n == 0 else min(4, (n + 1) // 2)
    if kind == "binary":
        return int(n >= 3)
    if kind == "multilabel":
        # bit t*4 + (k-1): at least k lesions of type t, k = 1..4
        counts = [sum(1 for les in params.lesions if les[3] == t) for t in (0, 1)]
        return tuple(int(counts[t] >= k) for t in (0, 1) for k in range(1, NUM_LABELS // 2 + 1))
    if kind == "multiclass":
        return params.disc_anchor * 2 + params.disc_size
    return None


def sample_params(rng: np.random.Generator, size: int) -> SampleParams:
    anchor = int(rng.integers(len(DISC_ANCHORS)))
    size_bin = int(rng.integers(2))
    ax, ay = DISC_ANCHORS[anchor]
    cx = (ax + rng.uniform(-0.04, 0.04)) * size
    cy = (ay + rng.uniform(-0.04, 0.04)) * size
    lo, hi = DISC_RADIUS[size_bin]
    radius = rng.uniform(lo, hi) * size

    vessels = []
    for _ in range(int(rng.integers(3, 6))):
        theta = rng.uniform(0, 2 * math.pi)
        x, y = cx, cy
        path = []
        for _ in range(int(size * 0.7)):
            theta += rng.normal(0, 0.25)
            x += math.cos(theta)
            y += math.sin(theta)
            if not (0 <= x < size and 0 <= y < size):
                break
            path.append((int(x), int(y)))
        vessels.append(path)

    lesions = []
    n_lesions = int(rng.integers(0, 9))
    while len(lesions) < n_lesions:
        x, y = rng.uniform(0.1, 0.9, size=2) * size
        if math.hypot(x - cx, y - cy) < radius + 2:
            continue
        lesions.append((float(x), float(y), float(rng.uniform(0.06, 0.09) * size), int(rng.integers(2))))
    return SampleParams(anchor, size_bin, (float(cx), float(cy)), float(radius), lesions, vessels)


def _disc_mask(params: SampleParams, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = params.disc_center
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= params.disc_radius ** 2


def render(params: SampleParams, size: int, tint, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw the sample. Returns (uint8 image [H, W, 3], disc mask, vessel mask)."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    field_ = ((xx - c) ** 2 + (yy - c) ** 2) <= (0.49 * size) ** 2
    shade = 0.75 + 0.25 * (1.0 - yy / size)
    img = np.zeros((size, size, 3))
    img[...] = np.array([0.62, 0.28, 0.14]) * shade[..., None]

    vessel = np.zeros((size, size), dtype=bool)
    for path in params.vessels:
        for x, y in path:
            vessel[y, x] = True
    img[vessel] = (0.36, 0.08, 0.05)

    covered = np.zeros((size, size), dtype=bool)
    for x, y, r, kind_id in params.lesions:
        spot = (xx - x) ** 2 + (yy - y) ** 2 <= r ** 2
        img[spot] = (0.95, 0.85, 0.30) if kind_id == 0 else (0.18, 0.03, 0.03)
        covered |= spot

    disc = _disc_mask(params, size)
    img[disc] = (0.98, 0.90, 0.62)

    img = img * np.asarray(tint)[None, None, :]
    img = img + rng.normal(0, 0.02, size=img.shape)
    img[~field_] = 0.0
    out = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return out, disc, vessel & field_ & ~covered & ~disc


def generate_sample(spec: SynthTaskSpec, split: str, index: int) -> tuple[SampleRecord, SampleParams]:
    rng = np.random.default_rng([spec.seed, SPLITS[split], index])
    params = sample_params(rng, spec.image_size)
    image, disc, vessel = render(params, spec.image_size, spec.tint, rng)
    mask = disc if spec.kind == "seg-disc" else vessel if spec.kind == "seg-vessel" else None
    rec = SampleRecord(
        id=f"{spec.name}/{split}/{index:05d}",
        dataset=spec.name,
        split=split,
        task=spec.kind,
        index=index,
        label=label_from_params(spec.kind, params, spec.image_size),
        image=image,
        mask=mask,
    )
    return rec, params


def generate(spec: SynthTaskSpec) -> DatasetManifest:
    records = []
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        for i in range(count):
            records.append(generate_sample(spec, split, i)[0])
    return DatasetManifest({spec.name: spec}, records)


def default_corpus(scale: str = "tiny", seed: int = 0, image_size: int = 32) -> list[SynthTaskSpec]:
    """Six task specs: reference dataset sizes divided by the scale factor.

    Counts are floored, then raised to at least 8 train / 16 test images.
    At ``small`` (1/100): RFMiD 19, DR 296, EYEPACS 80, REFUGE2 8, LACDHS 8,
    JSIEC 8 train images. At ``tiny`` (1/200): 9, 148, 40, 8, 8, 8.
    """
    if scale not in SCALES:
        raise ValueError(f"unknown corpus scale {scale!r}; expected one of {sorted(SCALES)}")
    div = SCALES[scale]
    specs = []
    for k, (name, kind, n_train, n_test, ood, tint) in enumerate(TABLE):
        specs.append(SynthTaskSpec(
            name=name, kind=kind,
            n_train=max(MIN_TRAIN, n_train // div),
            n_test=max(MIN_TEST, n_test // div),
            seed=seed * 1000 + k, image_size=image_size, out_of_network=ood, tint=tint,
        ))
    return specs


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class SplitPlan:
    mode: str
    assignment: list  # per client: list of (dataset name, record ids)


def merge(manifests: list[DatasetManifest], owner: int | None = None) -> DatasetManifest:
    specs, records = {}, []
    for m in manifests:
        specs.update(m.specs)
        records.extend(m.records)
    return DatasetManifest(specs, records, owner)


def plan_partition(manifests: list[DatasetManifest], mode: str, num_clients: int, seed: int = 0) -> SplitPlan:
    if mode == "split1":
        if num_clients != len(manifests):
            raise ValueError(f"split1 needs one client per dataset ({len(manifests)}), got {num_clients}")
        return SplitPlan(mode, [[(next(iter(m.specs)), m.ids())] for m in manifests])
    if mode != "split2":
        raise ValueError(f"unknown split mode {mode!r}")
    if num_clients < 1:
        raise ValueError("split2 needs at least one client")
    assignment = [[] for _ in range(num_clients)]
    for k, m in enumerate(manifests):
        n = len(m)
        if n < num_clients:
            raise ValueError(f"dataset {next(iter(m.specs))} has {n} samples, fewer than {num_clients} clients")
        per = n // num_clients
        order = np.random.default_rng([seed, k]).permutation(n)
        ids = m.ids()
        for c in range(num_clients):
            chunk = sorted(order[c * per:(c + 1) * per])
            assignment[c].append((next(iter(m.specs)), [ids[i] for i in chunk]))
    return SplitPlan(mode, assignment)


def partition(manifests: list[DatasetManifest], mode: str, num_clients: int, seed: int = 0) -> list[DatasetManifest]:
    """Split 1: client k owns dataset k. Split 2: every client draws
    ``floor(n / num_clients)`` disjoint samples from every dataset."""
    plan = plan_partition(manifests, mode, num_clients, seed)
    by_id = {r.id: (r, m.specs) for m in manifests for r in m.records}
    clients = []
    for cid, parts in enumerate(plan.assignment):
        specs, records = {}, []
        for name, ids in parts:
            for rid in ids:
                rec, rec_specs = by_id[rid]
                records.append(rec)
                specs[name] = rec_specs[name]
        clients.append(DatasetManifest(specs, records, owner=cid))
    return clients


# ---------------------------------------------------------------------------
# containers and manifest files


def encode_images(images: np.ndarray) -> bytes:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w, c = images.shape
    return _IMG_HEADER.pack(IMAGE_MAGIC, CONTAINER_VERSION, n, c, h, w) + images.tobytes()


def decode_images(blob: bytes) -> np.ndarray:
    magic, version, n, c, h, w = _IMG_HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC or version != CONTAINER_VERSION:
        raise ValueError("not an image container")
    return np.frombuffer(blob, dtype=np.uint8, offset=_IMG_HEADER.size).reshape(n, h, w, c)


def encode_masks(masks: np.ndarray) -> bytes:
    masks = np.asarray(masks, dtype=bool)
    n, h, w = masks.shape
    packed = np.packbits(masks.reshape(n, -1), axis=1)
    return _MASK_HEADER.pack(MASK_MAGIC, CONTAINER_VERSION, n, h, w) + packed.tobytes()


def decode_masks(blob: bytes) -> np.ndarray:
    magic, version, n, h, w = _MASK_HEADER.unpack_from(blob)
    if magic != MASK_MAGIC or version != CONTAINER_VERSION:
        raise ValueError("not a mask container")
    packed = np.frombuffer(blob, dtype=np.uint8, offset=_MASK_HEADER.size).reshape(n, -1)
    return np.unpackbits(packed, axis=1, count=h * w).reshape(n, h, w).astype(bool)


def write_dataset(manifest: DatasetManifest, root: str) -> str:
    """Write shards and a JSONL manifest under ``root/<name>/``; returns the manifest path."""
    spec = manifest.spec
    ddir = os.path.join(root, spec.name)
    os.makedirs(ddir, exist_ok=True)
    lines = []
    for split in SPLITS:
        recs = [r for r in manifest.records if r.split == split]
        if not recs:
            continue
        img_rel = f"{spec.name}/{split}_images.fmimg"
        with open(os.path.join(root, img_rel), "wb") as fh:
            fh.write(encode_images(np.stack([r.image for r in recs])))
        mask_rel = None
        if spec.kind in SEG_KINDS:
            mask_rel = f"{spec.name}/{split}_masks.fmmsk"
            with open(os.path.join(root, mask_rel), "wb") as fh:
                fh.write(encode_masks(np.stack([r.mask for r in recs])))
        for pos, r in enumerate(recs):
            row = {"id": r.id, "split": split, "path": f"{img_rel}#{pos}", "task": r.task}
            if mask_rel:
                row["mask"] = f"{mask_rel}#{pos}"
            else:
                row["label"] = list(r.label) if isinstance(r.label, tuple) else r.label
            lines.append(json.dumps(row, sort_keys=True))
    path = os.path.join(ddir, "manifest.jsonl")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_dataset(root: str, spec: SynthTaskSpec) -> DatasetManifest:
    path = os.path.join(root, spec.name, "manifest.jsonl")
    shards: dict[str, np.ndarray] = {}

    def shard(rel, decoder):
        if rel not in shards:
            with open(os.path.join(root, rel), "rb") as fh:
                shards[rel] = decoder(fh.read())
        return shards[rel]

    records = []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            img_rel, pos = row["path"].split("#")
            rec = SampleRecord(
                id=row["id"], dataset=spec.name, split=row["split"], task=row["task"],
                index=int(row["id"].rsplit("/", 1)[1]), path=row["path"],
                image=shard(img_rel, decode_images)[int(pos)],
            )
            if "mask" in row:
                mask_rel, mpos = row["mask"].split("#")
                rec.mask = shard(mask_rel, decode_masks)[int(mpos)]
                rec.mask_path = row["mask"]
            else:
                lab = row["label"]
                rec.label = tuple(lab) if isinstance(lab, list) else lab
            records.append(rec)
    return DatasetManifest({spec.name: spec}, records)


def write_corpus(manifests: list[DatasetManifest], root: str) -> dict:
    """Write every dataset plus ``corpus.json`` listing the specs; returns the corpus record."""
    os.makedirs(root, exist_ok=True)
    entries = []
    for m in manifests:
        path = write_dataset(m, root)
        entries.append({"spec": m.spec.to_dict(), "manifest": os.path.relpath(path, root)})
    corpus = {"datasets": entries}
    with open(os.path.join(root, "corpus.json"), "w") as fh:
        json.dump(corpus, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return corpus


def read_corpus(root: str) -> list[DatasetManifest]:
    path = os.path.join(root, "corpus.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no corpus at {root} (missing corpus.json)")
    with open(path) as fh:
        corpus = json.load(fh)
    return [read_dataset(root, SynthTaskSpec.from_dict(e["spec"])) for e in corpus["datasets"]]


def with_seed(specs: list[SynthTaskSpec], seed: int) -> list[SynthTaskSpec]:
    return [replace(s, seed=seed * 1000 + k) for k, s in enumerate(specs)]
