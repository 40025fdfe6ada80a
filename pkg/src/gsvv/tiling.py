"""Morton-order tiling, interleaved LoD schedule and container assembly.

Gaussians are sorted along a Z-order curve, cut into equal-size tiles,
and each tile carries a losslessly compressed position payload plus one
payload per LoD level.  Level 0 bundles the base-layer bits of every
attribute; each higher level carries exactly one enhancement layer of
one attribute, ordered by visual impact (scale, rotation, SH, opacity).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import GsvvError, ParseError, ValidationError
from .gaussian_model import GaussianFrame
from .svq import (
    AttributeSpec,
    QuantizedAttribute,
    SvqCodebook,
    attribute_names,
    decode,
    pack_segment,
    set_attribute,
    unpack_segment,
)

CONTAINER_MAGIC = b"GSCT"
CONTAINER_VERSION = 1

DEFAULT_GRID_BITS = 10
KEYFRAME_TILE_SIZE = 8000
DIFF_TILE_SIZE = 4000


# ---------------------------------------------------------------------------
# Morton order
# ---------------------------------------------------------------------------

def _spread_bits_3(v: np.ndarray) -> np.ndarray:
    """Space the low 21 bits of each value three apart (64-bit Morton)."""
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_codes(positions: np.ndarray, grid_bits: int) -> np.ndarray:
    """Z-order code per position, x in the least significant bit."""
    if not (1 <= grid_bits <= 21):
        raise ValidationError(f"grid_bits={grid_bits} outside [1, 21]")
    pos = np.asarray(positions, dtype=np.float64)
    finite = np.isfinite(pos).all(axis=1)
    if not finite.all():
        bad = int(np.nonzero(~finite)[0][0])
        raise ValidationError(f"non-finite position at gaussian_id {bad}")
    lo = pos.min(axis=0)
    extent = pos.max(axis=0) - lo
    extent[extent == 0] = 1.0
    cells = np.floor((pos - lo) / extent * (2 ** grid_bits)).astype(np.int64)
    cells = np.clip(cells, 0, 2 ** grid_bits - 1).astype(np.uint64)
    return (
        _spread_bits_3(cells[:, 0])
        | (_spread_bits_3(cells[:, 1]) << np.uint64(1))
        | (_spread_bits_3(cells[:, 2]) << np.uint64(2))
    )


def morton_sort(frame: GaussianFrame, grid_bits: int = DEFAULT_GRID_BITS) -> np.ndarray:
    """Permutation of gaussian_ids in Z order (stable, so equal codes keep
    id order)."""
    codes = morton_codes(frame.positions, grid_bits)
    return np.argsort(codes, kind="stable")


# ---------------------------------------------------------------------------
# tiles
# ---------------------------------------------------------------------------

@dataclass
class Tile:
    tile_id: int
    gaussian_ids: np.ndarray           # contiguous run of the Morton permutation
    bbox: np.ndarray                   # (2, 3) min/max of member positions
    position_payload: bytes | None = None
    lod_payloads: list[bytes] = field(default_factory=list)


def make_tiles(frame: GaussianFrame, permutation: np.ndarray,
               tile_size: int) -> list[Tile]:
    if tile_size < 1:
        raise ValidationError(f"tile_size must be >= 1, got {tile_size}")
    permutation = np.asarray(permutation, dtype=np.int64)
    tiles = []
    for tid, start in enumerate(range(0, len(permutation), tile_size)):
        ids = permutation[start:start + tile_size]
        pos = frame.positions[ids]
        bbox = np.stack([pos.min(axis=0), pos.max(axis=0)])
        tiles.append(Tile(tile_id=tid, gaussian_ids=ids, bbox=bbox))
    return tiles


# ---------------------------------------------------------------------------
# LoD schedule
# ---------------------------------------------------------------------------

# Fig-8-style impact ranking used for the default interleaving.
DEFAULT_ATTRIBUTE_PRIORITY = [
    "scale", "rot_imag", "rot_real",
    "sh_level_0", "sh_level_1", "sh_level_2", "sh_level_3",
    "opacity",
]


@dataclass
class LodSchedule:
    """Level 0 carries every attribute's base layer; level l >= 1 carries
    entries[l-1] = (attribute name, svq layer index)."""

    entries: list[tuple[str, int]]
    attribute_layer_counts: dict[str, int]

    def __post_init__(self):
        seen = set()
        for attr, layer in self.entries:
            if attr not in self.attribute_layer_counts:
                raise ValidationError(f"schedule entry for unknown attribute {attr!r}")
            if not (1 <= layer < self.attribute_layer_counts[attr]):
                raise ValidationError(
                    f"schedule entry ({attr}, {layer}) outside enhancement range"
                )
            if (attr, layer) in seen:
                raise ValidationError(f"duplicate schedule entry ({attr}, {layer})")
            seen.add((attr, layer))
        for attr, n in self.attribute_layer_counts.items():
            for layer in range(1, n):
                if (attr, layer) not in seen:
                    raise ValidationError(
                        f"schedule is missing enhancement layer ({attr}, {layer})"
                    )

    @property
    def n_levels(self) -> int:
        return 1 + len(self.entries)

    def layers_for_level(self, lod: int) -> dict[str, int]:
        """How many SVQ layers of each attribute a prefix of levels 0..lod
        delivers."""
        counts = {attr: 1 for attr in self.attribute_layer_counts}
        for attr, _layer in self.entries[:max(lod, 0)]:
            counts[attr] += 1
        return counts


def default_schedule(specs: dict[str, AttributeSpec]) -> LodSchedule:
    ordered = [n for n in DEFAULT_ATTRIBUTE_PRIORITY if n in specs]
    ordered += [n for n in sorted(specs) if n not in ordered]
    entries = []
    for name in ordered:
        for layer in range(1, specs[name].n_layers):
            entries.append((name, layer))
    return LodSchedule(
        entries=entries,
        attribute_layer_counts={n: specs[n].n_layers for n in specs},
    )


def schedule_from_entries(entries, specs: dict[str, AttributeSpec]) -> LodSchedule:
    return LodSchedule(
        entries=[(a, int(l)) for a, l in entries],
        attribute_layer_counts={n: specs[n].n_layers for n in specs},
    )


# ---------------------------------------------------------------------------
# lossless backend
# ---------------------------------------------------------------------------

class LosslessBackend:
    name = "null"

    def compress(self, data: bytes) -> bytes:
        return data

    def decompress(self, data: bytes) -> bytes:
        return data


class DeflateBackend(LosslessBackend):
    name = "deflate"

    def __init__(self, level: int = 6):
        self.level = level

    def compress(self, data: bytes) -> bytes:
        return zlib.compress(data, self.level)

    def decompress(self, data: bytes) -> bytes:
        return zlib.decompress(data)


_BACKENDS = {"deflate": DeflateBackend, "null": LosslessBackend}


def get_backend(name: str) -> LosslessBackend:
    try:
        return _BACKENDS[name]()
    except KeyError:
        raise GsvvError(f"unknown lossless backend {name!r}") from None


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def _canonical_attributes(quantized: dict[str, QuantizedAttribute],
                          sh_degree: int) -> list[str]:
    order = [n for n in attribute_names(sh_degree) if n in quantized]
    extras = [n for n in sorted(quantized) if n not in order]
    return order + extras


@dataclass
class TiledLodContainer:
    manifest: dict
    tiles: list[Tile]

    @property
    def frame_index(self) -> int:
        return self.manifest["frame_index"]

    @property
    def n_levels(self) -> int:
        return 1 + len(self.manifest["schedule"])

    def tile_base_bytes(self, tile_id: int) -> int:
        t = self.manifest["tiles"][tile_id]
        return t["position_bytes"] + t["lod_bytes"][0]

    def tile_level_bytes(self, tile_id: int, level: int) -> int:
        return self.manifest["tiles"][tile_id]["lod_bytes"][level]

    def bytes_for_lod(self, lod: int) -> int:
        total = 0
        for t in self.manifest["tiles"]:
            total += t["position_bytes"] + sum(t["lod_bytes"][:lod + 1])
        return total


def assemble_container(frame: GaussianFrame, tiles: list[Tile],
                       quantized: dict[str, QuantizedAttribute],
                       schedule: LodSchedule,
                       backend: LosslessBackend | None = None,
                       codebook_ref: str = "",
                       global_ids: np.ndarray | None = None,
                       total_gaussians: int | None = None) -> TiledLodContainer:
    """Containerize one frame.

    For differential frames ``frame`` and ``quantized`` cover only the
    updated Gaussians; ``global_ids`` maps their local indices to stable
    gaussian_ids and ``total_gaussians`` records the full scene size.
    """
    backend = backend or DeflateBackend()
    for attr in schedule.attribute_layer_counts:
        if attr not in quantized:
            raise ValidationError(f"quantized data missing attribute {attr!r}")
    attr_order = _canonical_attributes(quantized, frame.sh_degree)

    manifest_tiles = []
    for tile in tiles:
        ids = tile.gaussian_ids
        stored_ids = ids if global_ids is None else np.asarray(global_ids)[ids]
        try:
            raw_pos = (
                stored_ids.astype("<u4").tobytes()
                + frame.positions[ids].astype("<f4").tobytes()
            )
            tile.position_payload = backend.compress(raw_pos)
            payloads = []
            base = b"".join(
                pack_segment(quantized[a].segments[0][ids],
                             quantized[a].layer_widths[0])
                for a in attr_order
            )
            payloads.append(backend.compress(base))
            for attr, layer in schedule.entries:
                q = quantized[attr]
                payloads.append(backend.compress(
                    pack_segment(q.segments[layer][ids], q.layer_widths[layer])
                ))
            tile.lod_payloads = payloads
        except Exception as exc:  # propagate with tile context
            raise GsvvError(
                f"tile {tile.tile_id}: backend {backend.name} failed: {exc}"
            ) from exc
        tile.gaussian_ids = stored_ids.astype(np.int64)
        manifest_tiles.append({
            "tile_id": tile.tile_id,
            "count": int(len(ids)),
            "bbox": tile.bbox.tolist(),
            "position_bytes": len(tile.position_payload),
            "lod_bytes": [len(p) for p in tile.lod_payloads],
        })

    manifest = {
        "frame_index": frame.frame_index,
        "n_gaussians": len(frame) if total_gaussians is None else int(total_gaussians),
        "sh_degree": frame.sh_degree,
        "backend": backend.name,
        "codebook_ref": codebook_ref,
        "attribute_order": attr_order,
        "attributes": {
            a: {"layer_widths": list(quantized[a].layer_widths)}
            for a in attr_order
        },
        "schedule": [[a, l] for a, l in schedule.entries],
        "tiles": manifest_tiles,
    }
    return TiledLodContainer(manifest=manifest, tiles=tiles)


def read_tile_segments(container: TiledLodContainer, tile_id: int, lod: int):
    """Decompress one tile's payloads up to LoD ``lod``.

    Returns (gaussian_ids, positions, {attr: [layer segment arrays]}).
    """
    manifest = container.manifest
    if not (0 <= lod < container.n_levels):
        raise ValidationError(f"lod {lod} outside [0, {container.n_levels})")
    tile = container.tiles[tile_id]
    backend = get_backend(manifest["backend"])
    if tile.position_payload is None or len(tile.lod_payloads) <= lod:
        raise GsvvError(f"tile {tile_id}: payload missing below lod {lod}")

    raw = backend.decompress(tile.position_payload)
    n = manifest["tiles"][tile_id]["count"]
    ids = np.frombuffer(raw, dtype="<u4", count=n).astype(np.int64)
    positions = np.frombuffer(raw, dtype="<f4", offset=4 * n).reshape(n, 3).copy()

    attr_order = manifest["attribute_order"]
    segments = {a: [] for a in attr_order}
    base_raw = backend.decompress(tile.lod_payloads[0])
    off = 0
    for a in attr_order:
        width = manifest["attributes"][a]["layer_widths"][0]
        nbytes = 5 + (n * width + 7) // 8
        seg, _ = unpack_segment(base_raw[off:off + nbytes])
        segments[a].append(seg)
        off += nbytes
    schedule_entries = manifest["schedule"]
    for level in range(1, lod + 1):
        attr, _layer = schedule_entries[level - 1]
        seg, _ = unpack_segment(backend.decompress(tile.lod_payloads[level]))
        segments[attr].append(seg)
    return ids, positions, segments


def decode_tile(container: TiledLodContainer, tile_id: int, lod: int,
                codebooks: dict[str, SvqCodebook]):
    """Decode one tile up to LoD ``lod``.

    Returns (gaussian_ids, positions, {attr: decoded (n, dim) float32}).
    """
    manifest = container.manifest
    ids, positions, segments = read_tile_segments(container, tile_id, lod)
    decoded = {}
    for a in manifest["attribute_order"]:
        widths = manifest["attributes"][a]["layer_widths"]
        q = QuantizedAttribute(name=a, layer_widths=tuple(widths[:len(segments[a])]),
                               segments=segments[a])
        decoded[a] = decode(q, codebooks[a], layers_available=len(segments[a]))
    return ids, positions, decoded


def decode_container(container: TiledLodContainer,
                     codebooks: dict[str, SvqCodebook],
                     lod_limit) -> GaussianFrame:
    """Decode the whole container; ``lod_limit`` is an int applied to all
    tiles or a per-tile mapping {tile_id: lod}."""
    manifest = container.manifest
    n = manifest["n_gaussians"]
    sh_degree = manifest["sh_degree"]
    from .gaussian_model import sh_coeff_count

    frame = GaussianFrame(
        frame_index=manifest["frame_index"],
        positions=np.zeros((n, 3), dtype=np.float32),
        scales=np.zeros((n, 3), dtype=np.float32),
        rotations=np.tile(np.array([1, 0, 0, 0], dtype=np.float32), (n, 1)),
        opacities=np.zeros(n, dtype=np.float32),
        sh=np.zeros((n, sh_coeff_count(sh_degree)), dtype=np.float32),
        sh_degree=sh_degree,
    )
    for tile in container.tiles:
        lod = lod_limit if isinstance(lod_limit, int) else lod_limit[tile.tile_id]
        if lod < 0:
            raise ValidationError(f"tile {tile.tile_id}: lod_limit must be >= 0")
        ids, positions, decoded = decode_tile(container, tile.tile_id, lod, codebooks)
        frame.positions[ids] = positions
        for a, values in decoded.items():
            set_attribute(frame, a, values, ids=ids)
    return frame


# ---------------------------------------------------------------------------
# container file: magic, u32 version, u64 manifest length, manifest JSON
# (sorted keys), then per tile in tile_id order the position payload
# followed by the LoD payloads, sizes as recorded in the manifest.
# ---------------------------------------------------------------------------

def save_container(container: TiledLodContainer, path) -> None:
    manifest_bytes = json.dumps(container.manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(manifest_bytes)))
        fh.write(manifest_bytes)
        for tile in container.tiles:
            fh.write(tile.position_payload)
            for payload in tile.lod_payloads:
                fh.write(payload)


def load_container(path) -> TiledLodContainer:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CONTAINER_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}", offset=0)
    version, mlen = struct.unpack_from("<IQ", data, 4)
    if version != CONTAINER_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    off = 16
    manifest = json.loads(data[off:off + mlen].decode())
    off += mlen
    tiles = []
    for rec in manifest["tiles"]:
        pos_bytes = rec["position_bytes"]
        payload = data[off:off + pos_bytes]
        if len(payload) != pos_bytes:
            raise ParseError(f"{path}: truncated tile {rec['tile_id']}", offset=off)
        off += pos_bytes
        lods = []
        for size in rec["lod_bytes"]:
            lods.append(data[off:off + size])
            if len(lods[-1]) != size:
                raise ParseError(f"{path}: truncated tile {rec['tile_id']}", offset=off)
            off += size
        tiles.append(Tile(
            tile_id=rec["tile_id"],
            gaussian_ids=np.zeros(rec["count"], dtype=np.int64),  # filled on decode
            bbox=np.array(rec["bbox"], dtype=np.float64),
            position_payload=payload,
            lod_payloads=lods,
        ))
    return TiledLodContainer(manifest=manifest, tiles=tiles)
