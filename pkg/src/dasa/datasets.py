"""Re-ID dataset ingest, lifelong sequence orders and a synthetic domain generator."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)")
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
SPLIT_DIRS = {
    "train": ("train", "bounding_box_train"),
    "query": ("query",),
    "gallery": ("gallery", "bounding_box_test"),
}


@dataclass
class Split:
    pids: np.ndarray
    camids: np.ndarray
    images: np.ndarray | None = None
    paths: list[str] | None = None
    raw_pids: np.ndarray | None = None

    def __post_init__(self):
        self.pids = np.asarray(self.pids, dtype=np.int64)
        self.camids = np.asarray(self.camids, dtype=np.int64)
        if self.raw_pids is None:
            self.raw_pids = self.pids.copy()

    def __len__(self):
        return len(self.pids)

    def load(self, size: tuple[int, int]) -> np.ndarray:
        """All images as (N, H, W, 3) uint8 at ``size`` = (H, W)."""
        if self.images is not None and self.images.shape[1:3] == tuple(size):
            return self.images
        if self.images is not None:
            src = [_resize(im, size) for im in self.images]
        else:
            src = [read_image(p, size) for p in self.paths or []]
        arr = np.stack(src) if src else np.zeros((0, *size, 3), np.uint8)
        self.images = arr
        return arr

    @classmethod
    def empty(cls) -> "Split":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), paths=[])


@dataclass
class DatasetSpec:
    name: str
    train: Split
    query: Split
    gallery: Split
    meta: dict = field(default_factory=dict)

    @property
    def n_ids(self) -> int:
        return len(np.unique(self.train.pids))

    @property
    def n_images(self) -> int:
        return len(self.train)

    def camera_key(self, camid) -> str:
        return f"{self.name}:c{int(camid)}"

    def camera_ids(self) -> set[str]:
        cams = np.concatenate([self.train.camids, self.query.camids, self.gallery.camids])
        return {self.camera_key(c) for c in np.unique(cams)}

    def check(self) -> None:
        overlap = set(self.train.raw_pids.tolist()) & (set(self.query.pids.tolist()) | set(self.gallery.pids.tolist()))
        if overlap:
            raise ValueError(f"{self.name}: train and test identities overlap: {sorted(overlap)[:5]}")


def read_image(path, size) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def _resize(image: np.ndarray, size) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.fromarray(image).resize((size[1], size[0]), Image.BILINEAR), dtype=np.uint8)


def parse_filename(name: str) -> tuple[int, int] | None:
    m = FILENAME_RE.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def remap_labels(pids) -> tuple[np.ndarray, dict]:
    """Contiguous labels 1..n in order of sorted original identity."""
    uniq = sorted(set(int(p) for p in pids))
    mapping = {p: i + 1 for i, p in enumerate(uniq)}
    return np.array([mapping[int(p)] for p in pids], dtype=np.int64), mapping


def _scan(folder: Path) -> Split:
    paths, pids, cams, bad = [], [], [], []
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        parsed = parse_filename(p.name)
        if parsed is None:
            bad.append(p.name)
            continue
        pid, cam = parsed
        if pid < 0:
            continue  # junk images in the benchmark layout
        paths.append(str(p))
        pids.append(pid)
        cams.append(cam)
    if bad:
        log.warning("%s: skipped %d malformed filenames, e.g. %s", folder, len(bad), bad[:3])
    return Split(np.array(pids, np.int64), np.array(cams, np.int64), paths=paths)


def _finish(name: str, splits: dict[str, Split], meta=None) -> DatasetSpec:
    tr = splits.get("train") or Split.empty()
    if len(tr):
        labels, _ = remap_labels(tr.pids)
        tr = Split(labels, tr.camids, tr.images, tr.paths, raw_pids=tr.pids)
    ds = DatasetSpec(name, tr, splits.get("query") or Split.empty(), splits.get("gallery") or Split.empty(),
                     meta or {})
    if len(ds.train) + len(ds.query) + len(ds.gallery) == 0:
        raise ValueError(f"{name}: no parseable images")
    ds.check()
    return ds


def load_reid_directory(root, name: str | None = None) -> DatasetSpec:
    """Benchmark layout: train/query/gallery folders of ``<id>_c<cam>_<rest>.<ext>`` files."""
    root = Path(root)
    if (root / "manifest.csv").exists() and not any((root / d).is_dir() for d in ("query", "gallery")):
        return load_manifest(root / "manifest.csv", name)
    splits = {}
    for split, candidates in SPLIT_DIRS.items():
        for c in candidates:
            if (root / c).is_dir():
                splits[split] = _scan(root / c)
                break
    missing = [s for s in ("query", "gallery") if s not in splits]
    if missing:
        raise FileNotFoundError(f"{root}: missing split folders {missing}")
    return _finish(name or root.name, splits)


def load_manifest(path, name: str | None = None) -> DatasetSpec:
    """CSV with columns split,path,identity,camera; paths relative to the manifest."""
    path = Path(path)
    rows: dict[str, list] = {"train": [], "query": [], "gallery": []}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["split"] not in rows:
                raise ValueError(f"{path}: unknown split {r['split']!r}")
            rows[r["split"]].append((str(path.parent / r["path"]), int(r["identity"]), int(r["camera"])))
    splits = {s: Split(np.array([x[1] for x in v], np.int64), np.array([x[2] for x in v], np.int64),
                       paths=[x[0] for x in v]) for s, v in rows.items() if v}
    return _finish(name or path.parent.name, splits)


def write_dataset(ds: DatasetSpec, root) -> Path:
    """Write 8-bit PNGs in the benchmark layout plus ``manifest.csv``."""
    from PIL import Image

    root = Path(root)
    rows = []
    for split in ("train", "query", "gallery"):
        sp: Split = getattr(ds, split)
        (root / split).mkdir(parents=True, exist_ok=True)
        pids = sp.raw_pids if split == "train" else sp.pids
        for i, (pid, cam, im) in enumerate(zip(pids, sp.camids, sp.images)):
            fname = f"{int(pid):04d}_c{int(cam)}_{i:06d}.png"
            Image.fromarray(im).save(root / split / fname)
            rows.append({"split": split, "path": f"{split}/{fname}", "identity": int(pid), "camera": int(cam)})
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["split", "path", "identity", "camera"])
        w.writeheader()
        w.writerows(rows)
    return manifest


# ---------------------------------------------------------------- orders

ORDERS = {
    "order1": ["market1501", "dukemtmc", "cuhksysu", "msmt17"],
    "order2": ["viper", "market1501", "cuhksysu", "msmt17"],
}
KNOWN_DATASETS = {n for names in ORDERS.values() for n in names}


@dataclass
class SequenceOrder:
    names: list[str]
    overrides: list[dict]

    def __len__(self):
        return len(self.names)


def sequence_config(order, available=None, first_decay: int = 30, rest_decay: int = 10) -> SequenceOrder:
    """Resolve an order name or an explicit list; per-step decay epochs default to 30 then 10."""
    if isinstance(order, str):
        if order in ORDERS:
            names = list(ORDERS[order])
        elif "," in order:
            names = [s.strip() for s in order.split(",") if s.strip()]
        else:
            raise KeyError(f"unknown order {order!r}; known: {sorted(ORDERS)} or a comma-separated list")
    else:
        names = list(order)
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate dataset names in order: {names}")
    if available is not None:
        unknown = [n for n in names if n not in set(available)]
        if unknown:
            raise KeyError(f"unresolvable dataset names: {unknown}")
    overrides = [{"decay_epoch": first_decay if i == 0 else rest_decay, "is_first_domain": i == 0}
                 for i in range(len(names))]
    return SequenceOrder(names, overrides)


# ---------------------------------------------------------------- synthetic

def hue_rotation(theta: float) -> np.ndarray:
    """RGB rotation about the gray axis."""
    c, s = math.cos(theta), math.sin(theta)
    k = np.ones((3, 3)) / 3.0
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / math.sqrt(3)
    return c * np.eye(3) + (1 - c) * k + s * cross


@dataclass
class Photometric:
    gain: np.ndarray
    offset: np.ndarray
    hue: float

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = img @ hue_rotation(self.hue).T
        return out * self.gain + self.offset

    @classmethod
    def sample(cls, rng, hue: float | None = None, strength: float = 1.0) -> "Photometric":
        return cls(1.0 + strength * rng.uniform(-0.35, 0.35, 3),
                   strength * rng.uniform(-0.2, 0.2, 3),
                   rng.uniform(0, 2 * math.pi) if hue is None else hue)


ATTRIBUTES = ("torso", "legs", "hair", "pattern", "width")
# attributes that separate identities within a domain; the rest are shared domain-wide
CUE_GROUPS = (("torso", "pattern"), ("legs", "hair"), ("pattern", "width", "hair"), ("torso", "legs"))


def _identity_params(rng) -> dict:
    return {
        "torso": rng.uniform(0.05, 0.95, 3),
        "legs": rng.uniform(0.05, 0.95, 3),
        "hair": rng.uniform(0.0, 0.4, 3),
        "pattern": int(rng.integers(0, 4)),
        "pattern_color": rng.uniform(0.0, 1.0, 3),
        "period": int(rng.integers(3, 7)),
        "blob": (rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.7)),
        "width": rng.uniform(0.45, 0.65),
    }


def _with_shared(params: dict, shared: dict, varying) -> dict:
    out = dict(params)
    for attr in ATTRIBUTES:
        if attr in varying:
            continue
        if attr == "pattern":
            for k in ("pattern", "pattern_color", "period", "blob"):
                out[k] = shared[k]
        else:
            out[attr] = shared[attr]
    return out


def render_person(p: dict, size, rng, jitter: float = 1.0) -> np.ndarray:
    """Float RGB image in [0, 1] of a blocky pedestrian with an identity pattern."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    ys = ys / h
    xs = xs / w
    dy = jitter * rng.uniform(-0.05, 0.05)
    dx = jitter * rng.uniform(-0.08, 0.08)
    ys, xs = ys - dy, xs - dx
    bg = rng.uniform(0.3, 0.7, 3)
    grad = rng.uniform(-0.1, 0.1)
    img = np.broadcast_to(bg, (h, w, 3)).copy() + grad * (ys[..., None] - 0.5)
    half = p["width"] / 2 * (1 + jitter * rng.uniform(-0.08, 0.08))
    body = np.abs(xs - 0.5) < half
    head = (((ys - 0.1) / 0.08) ** 2 + ((xs - 0.5) / 0.15) ** 2) < 1
    torso = body & (ys >= 0.18) & (ys < 0.55)
    legs = (np.abs(xs - 0.5) < half * 0.8) & (ys >= 0.55) & (ys < 0.97) & (np.abs(xs - 0.5) > 0.03)
    img[head] = np.array([0.85, 0.65, 0.5])
    img[head & (ys < 0.08)] = p["hair"]
    img[torso] = p["torso"]
    img[legs] = p["legs"]
    kind = p["pattern"]
    if kind == 1:
        stripes = torso & ((np.floor(ys * h) // p["period"]) % 2 == 0)
        img[stripes] = p["pattern_color"]
    elif kind == 2:
        by, bx = p["blob"]
        blob = torso & (((ys - by) / 0.08) ** 2 + ((xs - bx) / 0.15) ** 2 < 1)
        img[blob] = p["pattern_color"]
    elif kind == 3:
        img[torso & (xs < 0.5)] = p["pattern_color"]
    shade = 1.0 + jitter * rng.uniform(-0.12, 0.12)
    img = img * shade + rng.normal(0, 0.03, img.shape)
    return img


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def normalized_channel_means(images: np.ndarray) -> np.ndarray:
    from .backbone import PIXEL_MEAN, PIXEL_STD

    return (images.reshape(-1, 3).mean(0) / 255.0 - PIXEL_MEAN) / PIXEL_STD


def _domain_transforms(n_domains, rng, margin, probe) -> list[Photometric]:
    base_hues = [2 * math.pi * t / max(n_domains, 1) for t in range(n_domains)]
    for _ in range(200):
        tfs = [Photometric.sample(rng, hue=h + rng.uniform(-0.3, 0.3)) for h in base_hues]
        means = [normalized_channel_means(_to_u8(tf.apply(probe))) for tf in tfs]
        if all(np.max(np.abs(means[i] - means[j])) >= margin
               for i in range(n_domains) for j in range(i + 1, n_domains)):
            return tfs
    raise RuntimeError("could not sample domain transforms with the requested margin")


def synth_generate(n_domains: int = 3, ids_per_domain: int = 20, images_per_id: int = 8,
                   cameras_per_domain: int = 2, seed: int = 0, size=(64, 32),
                   names: list[str] | None = None, margin: float = 0.15,
                   cue_groups=CUE_GROUPS) -> list[DatasetSpec]:
    """Deterministic multi-domain pedestrian-like data.

    Domains differ in colour statistics (a domain-wide channel affine plus hue
    rotation) and in which attributes separate their identities: domain t
    varies ``cue_groups[t % len(cue_groups)]`` and shares the others.
    Half of each domain's identities (rounded down) train, the rest test.
    Each test identity contributes one query image per camera; its other
    images form the gallery.
    """
    if min(n_domains, ids_per_domain, images_per_id, cameras_per_domain) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    names = names or [f"synth{chr(ord('A') + t)}" for t in range(n_domains)]
    probe_rng = np.random.default_rng([seed, 7])
    probe = np.stack([render_person(_identity_params(probe_rng), size, probe_rng) for _ in range(16)])
    domains = _domain_transforms(n_domains, rng, margin, probe)
    out = []
    for t in range(n_domains):
        drng = np.random.default_rng([seed, 1000 + t])
        cams = [Photometric.sample(drng, hue=drng.uniform(-0.1, 0.1), strength=0.25)
                for _ in range(cameras_per_domain)]
        n_train = ids_per_domain // 2 if ids_per_domain > 1 else 1
        shared = _identity_params(drng)
        varying = cue_groups[t % len(cue_groups)] if cue_groups else ATTRIBUTES
        records = {"train": [], "query": [], "gallery": []}
        for i in range(ids_per_domain):
            pid = t * 10000 + i + 1
            params = _with_shared(_identity_params(drng), shared, varying)
            is_train = i < n_train
            queried = set()
            for j in range(images_per_id):
                cam = j % cameras_per_domain
                img = cams[cam].apply(domains[t].apply(render_person(params, size, drng)))
                img = _to_u8(img)
                if is_train:
                    split = "train"
                elif cam not in queried and images_per_id > cameras_per_domain:
                    split = "query"
                    queried.add(cam)
                else:
                    split = "gallery"
                records[split].append((pid, cam + 1, img))
        splits = {}
        for s, recs in records.items():
            if recs:
                splits[s] = Split(np.array([r[0] for r in recs]), np.array([r[1] for r in recs]),
                                  images=np.stack([r[2] for r in recs]))
        out.append(_finish(names[t], splits, {"synthetic": True, "ordinal": t}))
    return out


def synth_source(n_ids: int = 200, images_per_id: int = 8, seed: int = 0, size=(64, 32),
                 n_scenes: int = 16, name: str = "synth-source") -> DatasetSpec:
    """Large training-only set spread over many photometric scenes, for backbone pre-training.

    Every identity lives in one scene, so identities stay consistent while the
    set as a whole covers many colour distributions.
    """
    rng = np.random.default_rng([seed, 99])
    scenes = [Photometric.sample(rng) for _ in range(n_scenes)]
    pids, cams, imgs = [], [], []
    for i in range(n_ids):
        params = _identity_params(rng)
        scene = scenes[i % n_scenes]
        for j in range(images_per_id):
            cam = Photometric.sample(rng, hue=rng.uniform(-0.1, 0.1), strength=0.25)
            imgs.append(_to_u8(cam.apply(scene.apply(render_person(params, size, rng)))))
            pids.append(i + 1)
            cams.append(j % 4 + 1)
    train = Split(np.array(pids), np.array(cams), images=np.stack(imgs))
    return _finish(name, {"train": train}, {"synthetic": True})
