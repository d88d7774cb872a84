"""Per-domain parameter bank: capture, forward transfer, selection, storage.

Snapshot container layout (all integers little-endian)::

    b"DASA" | u16 version | u32 header length | u32 CRC32 | header JSON | payload

The CRC covers every byte except its own four. The header carries the
metadata and an entry table of (name, dtype, shape, offset); the payload is
raw little-endian float32 data.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneGraph, describe
from .bn import BnLayerState
from .sa import SaKernel, sa_init_identity

MAGIC = b"DASA"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHII")
MIB = 1024 * 1024
BYTES_PER_VALUE = 4
_BN_FIELDS = ("running_mean", "running_var", "gamma", "beta")


class SnapshotFormatError(ValueError):
    pass


class BankError(ValueError):
    pass


@dataclass
class DomainSnapshot:
    domain_id: str
    ordinal: int
    arch_id: str
    bn_states: list[BnLayerState]
    sa_kernels: list[SaKernel]
    bn_layer_indices: list[int]
    sa_layer_indices: list[int]
    camera_ids: frozenset = frozenset()

    def n_values(self) -> int:
        return sum(4 * s.channels for s in self.bn_states) + sum(k.weights.size for k in self.sa_kernels)

    def arrays(self):
        for idx, s in zip(self.bn_layer_indices, self.bn_states):
            for f in _BN_FIELDS:
                yield f"layer{idx}.{f}", getattr(s, f)
        for idx, k in zip(self.sa_layer_indices, self.sa_kernels):
            yield f"layer{idx}.sa", k.weights


def snapshots_equal(a: DomainSnapshot, b: DomainSnapshot) -> bool:
    """Bitwise equality of metadata and every stored array."""
    if (a.domain_id, a.ordinal, a.arch_id, a.bn_layer_indices, a.sa_layer_indices, set(a.camera_ids)) != \
            (b.domain_id, b.ordinal, b.arch_id, b.bn_layer_indices, b.sa_layer_indices, set(b.camera_ids)):
        return False
    if [(s.eps, s.momentum) for s in a.bn_states] != [(s.eps, s.momentum) for s in b.bn_states]:
        return False
    pa, pb = list(a.arrays()), list(b.arrays())
    return len(pa) == len(pb) and all(
        na == nb and xa.dtype == xb.dtype and xa.shape == xb.shape and xa.tobytes() == xb.tobytes()
        for (na, xa), (nb, xb) in zip(pa, pb))


def snapshot_capture(graph: BackboneGraph, domain_id: str, ordinal: int = 0,
                     camera_ids=()) -> DomainSnapshot:
    """Deep copy of the graph's live BN and SA state."""
    if graph.net is None:
        raise BankError("graph has no network state to capture")
    bn_states, sa_kernels = graph.net.domain_state()
    if not bn_states:
        raise BankError("graph has no BN state")
    return DomainSnapshot(str(domain_id), ordinal, graph.arch_id, bn_states, sa_kernels,
                          [l.index for l in graph.bn_layers()],
                          [i for i, _ in graph.net.sa_modules()],
                          frozenset(str(c) for c in camera_ids))


def apply_snapshot(graph: BackboneGraph, snapshot: DomainSnapshot) -> None:
    if snapshot.arch_id != graph.arch_id:
        raise BankError(f"snapshot arch {snapshot.arch_id!r} does not match graph {graph.arch_id!r}")
    graph.net.load_domain_state(snapshot.bn_states, snapshot.sa_kernels)


@dataclass
class Bank:
    arch_id: str
    snapshots: list[DomainSnapshot] = field(default_factory=list)
    cameras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.snapshots)

    def add(self, snapshot: DomainSnapshot) -> None:
        if snapshot.arch_id != self.arch_id:
            raise BankError(f"snapshot arch {snapshot.arch_id!r} does not match bank {self.arch_id!r}")
        if any(s.domain_id == snapshot.domain_id for s in self.snapshots):
            raise BankError(f"domain {snapshot.domain_id!r} already in bank")
        clash = {c: self.cameras[c] for c in snapshot.camera_ids if c in self.cameras}
        if clash:
            raise BankError(f"cameras already registered to other domains: {clash}")
        self.snapshots.append(snapshot)
        for c in snapshot.camera_ids:
            self.cameras[c] = snapshot.domain_id

    def get(self, domain_id) -> DomainSnapshot:
        for s in self.snapshots:
            if s.domain_id == str(domain_id):
                return s
        raise KeyError(f"domain {domain_id!r} not in bank")

    @property
    def latest(self) -> DomainSnapshot:
        if not self.snapshots:
            raise BankError("bank is empty")
        return self.snapshots[-1]

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in self.snapshots:
            name = f"domain{s.ordinal:02d}.dasa"
            (root / name).write_bytes(serialize(s))
            entries.append({"ordinal": s.ordinal, "domain_id": s.domain_id,
                            "cameras": sorted(s.camera_ids), "path": name})
        manifest = root / "manifest.json"
        manifest.write_text(json.dumps({"arch_id": self.arch_id, "domains": entries}, indent=2))
        return manifest

    @classmethod
    def load(cls, root) -> "Bank":
        root = Path(root)
        manifest = root / "manifest.json" if root.is_dir() else root
        meta = json.loads(manifest.read_text())
        bank = cls(meta["arch_id"])
        for e in meta["domains"]:
            bank.add(deserialize((manifest.parent / e["path"]).read_bytes()))
        return bank


def forward_transfer_init(bank: Bank, graph: BackboneGraph, new_domain_id=None) -> None:
    """Seed the graph's live BN/SA with the latest snapshot (or the pre-trained base)."""
    if bank.arch_id != graph.arch_id:
        raise BankError(f"bank arch {bank.arch_id!r} does not match graph {graph.arch_id!r}")
    if bank.snapshots:
        apply_snapshot(graph, bank.latest)
        return
    if graph.base_bn is None:
        raise BankError("graph carries no pre-trained BN state")
    sas = graph.net.sa_modules()
    graph.net.load_domain_state([s.copy() for s in graph.base_bn],
                                [sa_init_identity(m.channels, m.kernel_size) for _, m in sas])


def select_snapshot(bank: Bank, camera_id=None, domain_id=None) -> DomainSnapshot:
    """Explicit domain first, then the camera registry, else the latest snapshot."""
    if not bank.snapshots:
        raise BankError("bank is empty")
    if domain_id is not None:
        return bank.get(domain_id)
    if camera_id is not None and str(camera_id) in bank.cameras:
        return bank.get(bank.cameras[str(camera_id)])
    return bank.latest


# ---------------------------------------------------------------- container

def serialize(snapshot: DomainSnapshot) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in snapshot.arrays():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "<f4", "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "arch_id": snapshot.arch_id,
        "domain_id": snapshot.domain_id,
        "ordinal": snapshot.ordinal,
        "camera_ids": sorted(snapshot.camera_ids),
        "bn_layers": [{"layer": i, "eps": s.eps, "momentum": s.momentum}
                      for i, s in zip(snapshot.bn_layer_indices, snapshot.bn_states)],
        "sa_layers": snapshot.sa_layer_indices,
        "payload_bytes": offset,
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = hbytes + b"".join(chunks)
    head = struct.pack("<4sHI", MAGIC, FORMAT_VERSION, len(hbytes))
    crc = zlib.crc32(body, zlib.crc32(head))
    return head + struct.pack("<I", crc) + body


def deserialize(blob: bytes) -> DomainSnapshot:
    if len(blob) < _PREFIX.size:
        raise SnapshotFormatError("truncated stream: shorter than the fixed prefix")
    magic, version, hlen, crc = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotFormatError(f"unsupported format version {version}")
    if len(blob) < _PREFIX.size + hlen:
        raise SnapshotFormatError("truncated stream: header incomplete")
    body = blob[_PREFIX.size:]
    if zlib.crc32(body, zlib.crc32(blob[:10])) != crc:
        raise SnapshotFormatError("checksum mismatch")
    try:
        header = json.loads(body[:hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"unreadable header: {exc}") from exc
    payload = body[hlen:]
    if len(payload) != header["payload_bytes"]:
        raise SnapshotFormatError(f"truncated stream: payload {len(payload)} bytes, "
                                  f"header declares {header['payload_bytes']}")
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) * 4
        arrays[e["name"]] = np.frombuffer(payload, dtype=e["dtype"], count=n // 4,
                                          offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
    bn_states = [BnLayerState(*(arrays[f"layer{b['layer']}.{f}"] for f in _BN_FIELDS),
                              eps=b["eps"], momentum=b["momentum"]) for b in header["bn_layers"]]
    sa_kernels = [SaKernel(arrays[f"layer{i}.sa"]) for i in header["sa_layers"]]
    return DomainSnapshot(header["domain_id"], header["ordinal"], header["arch_id"], bn_states, sa_kernels,
                          [b["layer"] for b in header["bn_layers"]], list(header["sa_layers"]),
                          frozenset(header["camera_ids"]))


# ---------------------------------------------------------------- storage

@dataclass
class ExemplarPolicy:
    steps: int = 4
    ids_per_step: int = 250
    images_per_id: int = 2
    height: int = 256
    width: int = 128

    @property
    def bytes(self) -> int:
        return self.steps * self.ids_per_step * self.images_per_id * self.height * self.width * 3


@dataclass
class StorageLine:
    component: str
    values: int
    nbytes: int
    scope: str
    convention: str

    @property
    def mib(self) -> float:
        return self.nbytes / MIB


def storage_report(arch_id: str = "resnet50", n_domains: int = 4, kernel_size: int = 5,
                   sa_placement="all", classifier_dims=(8026, 2048),
                   exemplar_policy: ExemplarPolicy | None = None) -> list[StorageLine]:
    """Byte accounting of every component, from parameter enumeration alone."""
    g = describe(arch_id, sa_placement, kernel_size)
    policy = exemplar_policy or ExemplarPolicy(steps=n_domains)
    body_bn = [l for l in g.layers if l.kind == "bn"]
    all_bn = g.bn_layers()
    backbone = sum(l.n_values for l in g.layers if l.kind in ("conv", "bn"))
    bn_affine = sum(2 * l.out_channels for l in body_bn)
    bn_full = sum(4 * l.out_channels for l in all_bn)
    sa = sum(l.out_channels for l in g.sa_layers()) * kernel_size ** 2
    n_cls = classifier_dims[0] * classifier_dims[1]
    v = BYTES_PER_VALUE
    lines = [
        StorageLine("backbone", backbone, backbone * v, "shared", "f32 conv kernels + BN affines"),
        StorageLine("classifier", n_cls, n_cls * v, "kd-baseline", f"f32 {classifier_dims[0]}x{classifier_dims[1]}"),
        StorageLine("exemplars", policy.bytes, policy.bytes, "kd-baseline",
                    f"uint8 pixels {policy.steps}x{policy.ids_per_step}x{policy.images_per_id}"
                    f"x{policy.height}x{policy.width}x3"),
        StorageLine("BN(t) affine-only", bn_affine, bn_affine * v, "per-domain", "f32 gamma,beta of body BN"),
        StorageLine("BN(t) snapshot", bn_full, bn_full * v, "per-domain",
                    "f32 mean,var,gamma,beta of body + neck BN"),
        StorageLine("SA(t)", sa, sa * v, "per-domain", f"f32 depth-wise {kernel_size}x{kernel_size}"),
    ]
    per_domain_affine = (bn_affine + sa) * v
    per_domain_snap = (bn_full + sa) * v
    lines += [
        StorageLine("DASA total (affine-only BN)", backbone + n_domains * (bn_affine + sa),
                    backbone * v + n_domains * per_domain_affine, "cumulative", f"{n_domains} domains"),
        StorageLine("DASA total (snapshot BN)", backbone + n_domains * (bn_full + sa),
                    backbone * v + n_domains * per_domain_snap, "cumulative", f"{n_domains} domains"),
        StorageLine("KD baseline total", 2 * (backbone + n_cls),
                    2 * (backbone + n_cls) * v + policy.bytes, "cumulative",
                    "model + frozen teacher, each with classifier, plus exemplars"),
    ]
    return lines


def format_storage(lines: list[StorageLine]) -> str:
    w = max(len(l.component) for l in lines)
    rows = [f"{'component':<{w}}  {'bytes':>13}  {'MiB':>10}  {'scope':<11}  convention"]
    for l in lines:
        rows.append(f"{l.component:<{w}}  {l.nbytes:>13,d}  {l.mib:>10.3f}  {l.scope:<11}  {l.convention}")
    return "\n".join(rows)
