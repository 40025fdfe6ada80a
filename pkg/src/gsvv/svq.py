"""Scalable vector quantization of Gaussian attributes.

Pipeline per attribute: KMeans on a seeded sample gives the initial
clusters, a greedy agglomerative pass merges them pairwise into a binary
tree until the base-layer cluster count is reached, and codes are
assigned top-down so that truncating a code's low-order bits lands on an
ancestor cluster.  The codebook is organized as one table per cumulative
bit width (base layer plus enhancement layers); decoding is a table
lookup on the concatenated received bits.

Clusters carry sufficient statistics only (centroid, member count, mean
member radius), which makes each merge O(1):

    d(C1, C2) = (n1*r1 + n2*r2 + 2*n1*n2/(n1+n2) * |mu1 - mu2|) / (n1 + n2)

i.e. the mean distance of the merged members to the merged centroid,
exact when members sit at their cluster centroids.

Code assignment caps code length at ``init_bits``: a merge chain deeper
than the bit budget is absorbed into its deepest codeable ancestor, so
the coded leaf set can be slightly coarser than the initial KMeans
clusters.  Leaves shallower than ``init_bits`` are zero-padded.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GsvvError, ParseError, ValidationError
from .gaussian_model import GaussianFrame, sh_level_slice

CODEBOOK_MAGIC = b"GSCB"
CODEBOOK_SET_MAGIC = b"GSCS"
CODEBOOK_VERSION = 1


# ---------------------------------------------------------------------------
# attribute registry
# ---------------------------------------------------------------------------

def default_layer_widths(init_bits: int, top_bits: int) -> list[int]:
    """Base layer of ``top_bits``, then 2-bit enhancement layers with any
    odd remainder folded into the last layer."""
    enh = init_bits - top_bits
    n_two = enh // 2
    widths = [top_bits] + [2] * n_two
    if enh % 2:
        if n_two:
            widths[-1] += 1
        else:
            widths.append(1)
    return widths


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    dim: int
    init_bits: int
    top_bits: int = 4
    layer_widths: tuple[int, ...] = ()

    def __post_init__(self):
        if not (1 <= self.top_bits <= self.init_bits <= 16):
            raise ValidationError(
                f"{self.name}: need 1 <= top_bits <= init_bits <= 16, "
                f"got top={self.top_bits} init={self.init_bits}"
            )
        widths = self.layer_widths or tuple(
            default_layer_widths(self.init_bits, self.top_bits)
        )
        if widths[0] != self.top_bits or sum(widths) != self.init_bits:
            raise ValidationError(
                f"{self.name}: layer widths {widths} do not span "
                f"top_bits={self.top_bits}..init_bits={self.init_bits}"
            )
        object.__setattr__(self, "layer_widths", tuple(widths))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths)

    @property
    def cumulative_widths(self) -> tuple[int, ...]:
        return tuple(np.cumsum(self.layer_widths).tolist())


def sh_level_count(sh_degree: int) -> int:
    return sh_degree + 1


def attribute_names(sh_degree: int = 3) -> list[str]:
    names = ["scale", "rot_real", "rot_imag", "opacity"]
    names += [f"sh_level_{l}" for l in range(sh_level_count(sh_degree))]
    return names


def attribute_dim(name: str) -> int:
    if name == "scale":
        return 3
    if name == "rot_real":
        return 1
    if name == "rot_imag":
        return 3
    if name == "opacity":
        return 1
    if name.startswith("sh_level_"):
        level = int(name.rsplit("_", 1)[1])
        return 3 * (2 * level + 1)
    raise ValidationError(f"unknown attribute {name!r}")


# 66-bit initialization: scaling 10, rotation real 8 / imaginary 10,
# opacity 8, SH levels 9/8/7/6, each merged to 16 base clusters.
DEFAULT_INIT_BITS = {
    "scale": 10,
    "rot_real": 8,
    "rot_imag": 10,
    "opacity": 8,
    "sh_level_0": 9,
    "sh_level_1": 8,
    "sh_level_2": 7,
    "sh_level_3": 6,
}


def default_attribute_specs(sh_degree: int = 3, top_bits: int = 4,
                            init_bits: dict | None = None) -> dict[str, AttributeSpec]:
    bits = dict(DEFAULT_INIT_BITS)
    if init_bits:
        bits.update(init_bits)
    specs = {}
    for name in attribute_names(sh_degree):
        b = bits.get(name)
        if b is None:
            b = max(top_bits, 6)
        specs[name] = AttributeSpec(name=name, dim=attribute_dim(name),
                                    init_bits=b, top_bits=min(top_bits, b))
    return specs


def extract_attribute(frame: GaussianFrame, name: str) -> np.ndarray:
    """(N, dim) view of one quantizable attribute."""
    if name == "scale":
        return frame.scales
    if name == "rot_real":
        return frame.rotations[:, 0:1]
    if name == "rot_imag":
        return frame.rotations[:, 1:4]
    if name == "opacity":
        return frame.opacities[:, None]
    if name.startswith("sh_level_"):
        level = int(name.rsplit("_", 1)[1])
        return frame.sh[:, sh_level_slice(level)]
    raise ValidationError(f"unknown attribute {name!r}")


def set_attribute(frame: GaussianFrame, name: str, values: np.ndarray,
                  ids: np.ndarray | None = None) -> None:
    """Write decoded attribute values back into ``frame`` (in place)."""
    values = values.astype(np.float32)
    sel = slice(None) if ids is None else ids
    if name == "scale":
        frame.scales[sel] = values
    elif name == "rot_real":
        frame.rotations[sel, 0:1] = values
    elif name == "rot_imag":
        frame.rotations[sel, 1:4] = values
    elif name == "opacity":
        frame.opacities[sel] = values[:, 0]
    elif name.startswith("sh_level_"):
        level = int(name.rsplit("_", 1)[1])
        frame.sh[sel, sh_level_slice(level)] = values
    else:
        raise ValidationError(f"unknown attribute {name!r}")


# ---------------------------------------------------------------------------
# KMeans (Lloyd with k-means++ seeding, deterministic for a fixed seed)
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ c.T)
        + np.sum(c * c, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans(data: np.ndarray, k: int, seed: int, max_iter: int = 50,
           tol: float = 1e-4):
    """Plain Lloyd iterations.

    Returns (centroids, assignment); empty clusters keep their previous
    centroid during iteration and are dropped by the caller via counts.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k > n:
        raise GsvvError(f"kmeans: k={k} > {n} points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = data[first]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = data[idx]
        d2 = np.minimum(d2, np.sum((data - centroids[i]) ** 2, axis=1))

    span = float(np.linalg.norm(data.max(axis=0) - data.min(axis=0)))
    shift_tol = tol * max(span, 1e-12)
    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        assignment = np.argmin(_pairwise_sq_dists(data, centroids), axis=1)
        new_centroids = centroids.copy()
        counts = np.bincount(assignment, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, data)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift <= shift_tol:
            break
    assignment = np.argmin(_pairwise_sq_dists(data, centroids), axis=1)
    return centroids, assignment


# ---------------------------------------------------------------------------
# merge tree
# ---------------------------------------------------------------------------

@dataclass
class MergeNode:
    node_id: int
    centroid: np.ndarray      # float64
    count: int
    radius: float             # mean member distance to own centroid
    children: tuple[int, int] | None = None
    parent: int | None = None
    code: int | None = None   # valid together with code_len
    code_len: int = 0


@dataclass
class MergeTree:
    nodes: list[MergeNode]
    roots: list[int]
    leaves: list[int]         # coded leaves, may be coarser than the initial clusters
    spec: AttributeSpec

    def ancestor_at(self, leaf_id: int, width: int) -> MergeNode:
        """Node on the root path whose code is ``width`` bits, or the leaf
        itself when the leaf is shallower (zero-padded codes)."""
        node = self.nodes[leaf_id]
        if node.code_len <= width:
            return node
        while node.code_len > width:
            node = self.nodes[node.parent]
        return node


def merge_distance(c1, c2) -> float:
    """Mean distance of the merged members to the merged centroid,
    computed from (centroid, count, radius) sufficient statistics."""
    mu1, n1, r1 = np.asarray(c1.centroid, dtype=np.float64), c1.count, c1.radius
    mu2, n2, r2 = np.asarray(c2.centroid, dtype=np.float64), c2.count, c2.radius
    if n1 < 1 or n2 < 1:
        raise ValidationError("merge_distance: clusters must have count >= 1")
    delta = float(np.linalg.norm(mu1 - mu2))
    n = n1 + n2
    return (n1 * r1 + n2 * r2 + (2.0 * n1 * n2 / n) * delta) / n


def _merged_stats(a: MergeNode, b: MergeNode):
    n = a.count + b.count
    centroid = (a.count * a.centroid + b.count * b.centroid) / n
    return centroid, n, merge_distance(a, b)


def _initial_pair_heap(nodes: list[MergeNode]) -> list:
    k = len(nodes)
    mus = np.stack([nd.centroid for nd in nodes])
    counts = np.array([nd.count for nd in nodes], dtype=np.float64)
    radii = np.array([nd.radius for nd in nodes], dtype=np.float64)
    delta = np.sqrt(_pairwise_sq_dists(mus, mus))
    nsum = counts[:, None] + counts[None, :]
    d = (
        counts[:, None] * radii[:, None]
        + counts[None, :] * radii[None, :]
        + (2.0 * counts[:, None] * counts[None, :] / nsum) * delta
    ) / nsum
    iu, ju = np.triu_indices(k, k=1)
    heap = list(zip(d[iu, ju].tolist(), iu.tolist(), ju.tolist()))
    heapq.heapify(heap)
    return heap


def build_codebook(vectors: np.ndarray, spec: AttributeSpec,
                   sample_size: int = 8192, seed: int = 0):
    """Build the merge tree and layered codebook for one attribute.

    KMeans runs on a seeded random subset; clusters are then merged
    greedily by minimum merge distance down to ``2**top_bits`` base
    clusters, and codes are assigned top-down (0 to the larger-count
    child, ties to the lower node id) with length capped at init_bits.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise GsvvError(f"{spec.name}: need a non-empty (N, dim) vector array")
    if vectors.shape[1] != spec.dim:
        raise ValidationError(
            f"{spec.name}: vectors have dim {vectors.shape[1]}, spec says {spec.dim}"
        )
    rng = np.random.default_rng(seed)
    n = vectors.shape[0]
    if n > sample_size:
        sample = vectors[rng.choice(n, size=sample_size, replace=False)]
    else:
        sample = vectors

    n_distinct = np.unique(sample, axis=0).shape[0]
    n_top = 2 ** spec.top_bits
    if n_distinct < n_top:
        raise GsvvError(
            f"{spec.name}: only {n_distinct} distinct vectors, fewer than the "
            f"{n_top} base clusters; use a smaller top_bits"
        )
    k = min(2 ** spec.init_bits, n_distinct)

    centroids, assignment = kmeans(sample, k, seed=seed)
    counts = np.bincount(assignment, minlength=k)
    keep = np.nonzero(counts > 0)[0]
    if len(keep) < n_top:
        raise GsvvError(
            f"{spec.name}: KMeans produced {len(keep)} non-empty clusters, "
            f"fewer than the {n_top} base clusters; use a smaller top_bits"
        )
    nodes: list[MergeNode] = []
    for new_id, old in enumerate(keep):
        members = sample[assignment == old]
        radius = float(np.mean(np.linalg.norm(members - centroids[old], axis=1)))
        nodes.append(MergeNode(node_id=new_id, centroid=centroids[old].copy(),
                               count=int(counts[old]), radius=radius))

    alive = set(range(len(nodes)))
    heap = _initial_pair_heap(nodes)
    while len(alive) > n_top:
        if not heap:
            raise GsvvError(f"{spec.name}: merge heap exhausted")  # unreachable
        d, i, j = heapq.heappop(heap)
        if i not in alive or j not in alive:
            continue
        centroid, count, dist = _merged_stats(nodes[i], nodes[j])
        new_id = len(nodes)
        node = MergeNode(node_id=new_id, centroid=centroid, count=count,
                         radius=dist, children=(i, j))
        nodes.append(node)
        nodes[i].parent = new_id
        nodes[j].parent = new_id
        alive.discard(i)
        alive.discard(j)
        for other in sorted(alive):
            heapq.heappush(
                heap, (merge_distance(node, nodes[other]), other, new_id)
            )
        alive.add(new_id)

    tree = _rebuild_coded_tree(nodes, sorted(alive), spec)
    return tree, codebook_from_tree(tree)


def _collect_leaf_descendants(nodes, root_id):
    out = []
    stack = [root_id]
    while stack:
        nid = stack.pop()
        node = nodes[nid]
        if node.children is None:
            out.append(nid)
        else:
            stack.extend(node.children)
    return sorted(out)


def _pairwise_merge_costs(stats):
    mus = np.stack([s[0] for s in stats])
    counts = np.array([s[1] for s in stats], dtype=np.float64)
    radii = np.array([s[2] for s in stats], dtype=np.float64)
    delta = np.sqrt(_pairwise_sq_dists(mus, mus))
    nsum = counts[:, None] + counts[None, :]
    d = (
        counts[:, None] * radii[:, None]
        + counts[None, :] * radii[None, :]
        + (2.0 * counts[:, None] * counts[None, :] / nsum) * delta
    ) / nsum
    return d


def _rebuild_coded_tree(history, root_ids, spec: AttributeSpec) -> MergeTree:
    """Assign codes by rebuilding each base cluster's subtree so every
    leaf fits in the bit budget.

    The greedy merge history fixes the base-cluster membership; within a
    base cluster the merges are redone by minimum merge distance subject
    to staying packable into ``init_bits - top_bits`` levels (heights
    capped, and sum(2^height) kept within the leaf-slot budget).  Roots
    with more initial clusters than slots first collapse their closest
    pairs.
    """
    budget = spec.init_bits - spec.top_bits
    slots = 2 ** budget
    nodes: list[MergeNode] = []
    roots: list[int] = []
    leaves: list[int] = []

    def add_node(centroid, count, radius, children=None):
        node = MergeNode(node_id=len(nodes), centroid=np.asarray(centroid),
                         count=int(count), radius=float(radius),
                         children=children)
        nodes.append(node)
        if children is not None:
            for c in children:
                nodes[c].parent = node.node_id
        return node.node_id

    for root_code, old_root in enumerate(root_ids):
        members = _collect_leaf_descendants(history, old_root)
        stats = [(history[m].centroid.copy(), history[m].count,
                  history[m].radius) for m in members]

        # overflow: collapse the closest pairs until the leaves fit
        while len(stats) > slots:
            d = _pairwise_merge_costs(stats)
            d[np.tril_indices(len(stats))] = np.inf
            i, j = np.unravel_index(int(np.argmin(d)), d.shape)
            a, b = stats[i], stats[j]
            n = a[1] + b[1]
            merged = ((a[1] * a[0] + b[1] * b[0]) / n, n, d[i, j])
            stats = [s for k, s in enumerate(stats) if k not in (i, j)]
            stats.append(merged)

        ids = [add_node(*s) for s in stats]
        leaves.extend(ids)
        heights = [0] * len(ids)
        kraft = len(ids)  # sum of 2**height
        while len(ids) > 1:
            d = _pairwise_merge_costs(
                [(nodes[n].centroid, nodes[n].count, nodes[n].radius)
                 for n in ids])
            h = np.array(heights)
            new_h = np.maximum(h[:, None], h[None, :]) + 1
            new_kraft = kraft - 2 ** h[:, None] - 2 ** h[None, :] + 2 ** new_h
            feasible = (new_h <= budget) & (new_kraft <= slots)
            d[~feasible] = np.inf
            d[np.tril_indices(len(ids))] = np.inf
            i, j = np.unravel_index(int(np.argmin(d)), d.shape)
            if not np.isfinite(d[i, j]):
                raise GsvvError(
                    f"{spec.name}: no feasible merge left")  # unreachable
            a, b = nodes[ids[i]], nodes[ids[j]]
            centroid, count, dist = _merged_stats(a, b)
            new_id = add_node(centroid, count, dist,
                              children=(ids[i], ids[j]))
            kraft = int(new_kraft[i, j])
            new_height = int(new_h[i, j])
            ids = [n for k, n in enumerate(ids) if k not in (i, j)]
            heights = [x for k, x in enumerate(heights) if k not in (i, j)]
            ids.append(new_id)
            heights.append(new_height)

        nodes[ids[0]].code = root_code
        nodes[ids[0]].code_len = spec.top_bits
        roots.append(ids[0])

    # structural codes: 0 to the larger-count child, ties to the lower id
    stack = list(reversed(roots))
    while stack:
        nid = stack.pop()
        node = nodes[nid]
        if node.children is None:
            continue
        a, b = node.children
        first, second = sorted(
            (a, b), key=lambda c: (-nodes[c].count, nodes[c].node_id)
        )
        nodes[first].code = (node.code << 1) | 0
        nodes[second].code = (node.code << 1) | 1
        nodes[first].code_len = nodes[second].code_len = node.code_len + 1
        stack.append(second)
        stack.append(first)

    return MergeTree(nodes=nodes, roots=roots, leaves=sorted(leaves),
                     spec=spec)


# ---------------------------------------------------------------------------
# layered codebook
# ---------------------------------------------------------------------------

@dataclass
class LayerTable:
    width: int                # cumulative bit width
    centroids: np.ndarray     # (2**width, dim) float32, invalid rows 0
    valid: np.ndarray         # (2**width,) bool


@dataclass
class SvqCodebook:
    spec: AttributeSpec
    layers: list[LayerTable]
    leaf_codes: np.ndarray       # (n_leaves,) uint32, zero-padded to init_bits
    leaf_centroids: np.ndarray   # (n_leaves, dim) float64, sorted by code

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def padded_code(self, leaf_code: int, leaf_len: int) -> int:
        return leaf_code << (self.spec.init_bits - leaf_len)


def codebook_from_tree(tree: MergeTree) -> SvqCodebook:
    spec = tree.spec
    cum = spec.cumulative_widths
    dim = spec.dim

    leaf_info = []
    for lid in tree.leaves:
        node = tree.nodes[lid]
        padded = node.code << (spec.init_bits - node.code_len)
        leaf_info.append((padded, lid))
    leaf_info.sort()
    leaf_codes = np.array([c for c, _ in leaf_info], dtype=np.uint32)
    leaf_centroids = np.stack([tree.nodes[l].centroid for _, l in leaf_info])

    layers = []
    for w in cum:
        size = 2 ** w
        table = np.zeros((size, dim), dtype=np.float32)
        valid = np.zeros(size, dtype=bool)
        shift = spec.init_bits - w
        for padded, lid in leaf_info:
            prefix = padded >> shift
            anc = tree.ancestor_at(lid, w)
            table[prefix] = anc.centroid.astype(np.float32)
            valid[prefix] = True
        layers.append(LayerTable(width=w, centroids=table, valid=valid))
    return SvqCodebook(spec=spec, layers=layers,
                       leaf_codes=leaf_codes, leaf_centroids=leaf_centroids)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

@dataclass
class QuantizedAttribute:
    """Per-Gaussian codes stored split by layer; concatenating one
    Gaussian's segments in layer order reproduces its full-width code."""

    name: str
    layer_widths: tuple[int, ...]
    segments: list[np.ndarray]   # one uint16 array of shape (N,) per layer

    def __len__(self) -> int:
        return 0 if not self.segments else len(self.segments[0])

    def full_codes(self) -> np.ndarray:
        codes = self.segments[0].astype(np.uint32)
        for w, seg in zip(self.layer_widths[1:], self.segments[1:]):
            codes = (codes << w) | seg.astype(np.uint32)
        return codes


def _split_code_segments(codes: np.ndarray, widths) -> list[np.ndarray]:
    segments = []
    rest = codes.astype(np.uint32)
    for w in reversed(widths[1:]):
        segments.append((rest & ((1 << w) - 1)).astype(np.uint16))
        rest = rest >> w
    segments.append(rest.astype(np.uint16))
    return segments[::-1]


def encode(vectors: np.ndarray, codebook: SvqCodebook,
           chunk: int = 4096) -> QuantizedAttribute:
    """Assign each vector the code of its nearest leaf centroid
    (Euclidean, ties to the smaller code value)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    spec = codebook.spec
    if vectors.ndim != 2 or vectors.shape[1] != spec.dim:
        raise ValidationError(
            f"{spec.name}: cannot encode shape {vectors.shape}, dim is {spec.dim}"
        )
    leaves = codebook.leaf_centroids
    leaf_sq = np.sum(leaves * leaves, axis=1)
    n = vectors.shape[0]
    best = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        block = vectors[start:start + chunk]
        d2 = np.sum(block * block, axis=1)[:, None] - 2.0 * (block @ leaves.T) + leaf_sq
        best[start:start + chunk] = np.argmin(d2, axis=1)
    codes = codebook.leaf_codes[best].astype(np.uint32)
    return QuantizedAttribute(
        name=spec.name,
        layer_widths=spec.layer_widths,
        segments=_split_code_segments(codes, spec.layer_widths),
    )


def decode(q: QuantizedAttribute, codebook: SvqCodebook,
           layers_available: int) -> np.ndarray:
    """Table lookup of the prefix formed by the received layer segments."""
    spec = codebook.spec
    if not (1 <= layers_available <= spec.n_layers):
        raise ValidationError(
            f"{spec.name}: layers_available={layers_available} outside "
            f"[1, {spec.n_layers}]"
        )
    prefix = q.segments[0].astype(np.uint32)
    for w, seg in zip(spec.layer_widths[1:layers_available],
                      q.segments[1:layers_available]):
        prefix = (prefix << w) | seg.astype(np.uint32)
    layer = codebook.layers[layers_available - 1]
    if not layer.valid[prefix].all():
        bad = int(prefix[~layer.valid[prefix]][0])
        raise GsvvError(
            f"{spec.name}: prefix {bad:0{layer.width}b} missing from layer "
            f"{layers_available - 1}; quantized data is corrupt"
        )
    return layer.centroids[prefix]


# ---------------------------------------------------------------------------
# layer buffers (bit-packed, big-endian within bytes, Gaussian-major)
#
# Buffer layout: u8 segment width, u32 LE count, then ceil(count*width/8)
# bytes of packed bits, zero-padded to the byte boundary.
# ---------------------------------------------------------------------------

def pack_segment(segment: np.ndarray, width: int) -> bytes:
    n = len(segment)
    header = struct.pack("<BI", width, n)
    if n == 0:
        return header
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint16)
    bits = ((segment[:, None].astype(np.uint16) >> shifts) & 1).astype(np.uint8)
    return header + np.packbits(bits.reshape(-1)).tobytes()


def unpack_segment(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 5:
        raise ParseError("layer buffer shorter than its 5-byte header")
    width, n = struct.unpack("<BI", buf[:5])
    nbytes = (n * width + 7) // 8
    if len(buf) - 5 != nbytes:
        raise ParseError(
            f"layer buffer: expected {n * width} bits ({nbytes} bytes), "
            f"got {(len(buf) - 5)} bytes"
        )
    if n == 0:
        return np.zeros(0, dtype=np.uint16), width
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=5),
                         count=n * width).reshape(n, width)
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.uint16))
    return (bits.astype(np.uint16) * weights).sum(axis=1).astype(np.uint16), width


def split_layers(q: QuantizedAttribute) -> list[bytes]:
    return [pack_segment(seg, w) for seg, w in zip(q.segments, q.layer_widths)]


def join_layers(buffers: list[bytes], name: str = "") -> QuantizedAttribute:
    segments = []
    widths = []
    n = None
    for buf in buffers:
        seg, w = unpack_segment(buf)
        if n is None:
            n = len(seg)
        elif len(seg) != n:
            raise ParseError(
                f"layer buffers disagree on count: {len(seg)} vs {n}"
            )
        segments.append(seg)
        widths.append(w)
    return QuantizedAttribute(name=name, layer_widths=tuple(widths),
                              segments=segments)


# ---------------------------------------------------------------------------
# codebook files
#
# Per attribute ("GSCB"): magic, u32 version, u8 name_len + name,
# u16 dim, u8 init_bits, u8 top_bits, u8 n_layers + widths, then per
# layer u32 entry count and entries of (u16 prefix, dim float32 LE).
# A codebook set ("GSCS") is u32 version, u16 count, then the blobs.
# ---------------------------------------------------------------------------

def _serialize_codebook(cb: SvqCodebook) -> bytes:
    spec = cb.spec
    out = [CODEBOOK_MAGIC, struct.pack("<I", CODEBOOK_VERSION)]
    name = spec.name.encode()
    out.append(struct.pack("<B", len(name)))
    out.append(name)
    out.append(struct.pack("<HBBB", spec.dim, spec.init_bits, spec.top_bits,
                           spec.n_layers))
    out.append(bytes(spec.layer_widths))
    for layer in cb.layers:
        prefixes = np.nonzero(layer.valid)[0]
        out.append(struct.pack("<I", len(prefixes)))
        for p in prefixes:
            out.append(struct.pack("<H", int(p)))
            out.append(layer.centroids[p].astype("<f4").tobytes())
    out.append(struct.pack("<I", len(cb.leaf_codes)))
    out.append(cb.leaf_codes.astype("<u4").tobytes())
    out.append(cb.leaf_centroids.astype("<f8").tobytes())
    return b"".join(out)


def _deserialize_codebook(data: bytes, off: int = 0) -> tuple[SvqCodebook, int]:
    if data[off:off + 4] != CODEBOOK_MAGIC:
        raise ParseError(f"bad codebook magic {data[off:off + 4]!r}", offset=off)
    off += 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CODEBOOK_VERSION:
        raise ParseError(f"unsupported codebook version {version}", offset=off)
    (name_len,) = struct.unpack_from("<B", data, off)
    off += 1
    name = data[off:off + name_len].decode()
    off += name_len
    dim, init_bits, top_bits, n_layers = struct.unpack_from("<HBBB", data, off)
    off += 5
    widths = tuple(data[off:off + n_layers])
    off += n_layers
    spec = AttributeSpec(name=name, dim=dim, init_bits=init_bits,
                         top_bits=top_bits, layer_widths=widths)
    layers = []
    for w in spec.cumulative_widths:
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        table = np.zeros((2 ** w, dim), dtype=np.float32)
        valid = np.zeros(2 ** w, dtype=bool)
        for _ in range(count):
            (prefix,) = struct.unpack_from("<H", data, off)
            off += 2
            table[prefix] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
            valid[prefix] = True
        layers.append(LayerTable(width=w, centroids=table, valid=valid))
    (n_leaves,) = struct.unpack_from("<I", data, off)
    off += 4
    leaf_codes = np.frombuffer(data, dtype="<u4", count=n_leaves, offset=off).copy()
    off += 4 * n_leaves
    leaf_centroids = np.frombuffer(
        data, dtype="<f8", count=n_leaves * dim, offset=off
    ).reshape(n_leaves, dim).copy()
    off += 8 * n_leaves * dim
    cb = SvqCodebook(spec=spec, layers=layers, leaf_codes=leaf_codes,
                     leaf_centroids=leaf_centroids)
    return cb, off


def save_codebooks(codebooks: dict[str, SvqCodebook], path) -> None:
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_SET_MAGIC)
        fh.write(struct.pack("<IH", CODEBOOK_VERSION, len(codebooks)))
        for name in sorted(codebooks):
            fh.write(_serialize_codebook(codebooks[name]))


def load_codebooks(path) -> dict[str, SvqCodebook]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CODEBOOK_SET_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}", offset=0)
    version, count = struct.unpack_from("<IH", data, 4)
    if version != CODEBOOK_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    off = 10
    books = {}
    for _ in range(count):
        cb, off = _deserialize_codebook(data, off)
        books[cb.spec.name] = cb
    return books


def quantize_frame(frame: GaussianFrame, codebooks: dict[str, SvqCodebook],
                   arrays: dict[str, np.ndarray] | None = None) -> dict[str, QuantizedAttribute]:
    """Encode every registered attribute of a frame (or of explicit arrays)."""
    out = {}
    for name, cb in codebooks.items():
        vectors = arrays[name] if arrays is not None else extract_attribute(frame, name)
        out[name] = encode(vectors, cb)
    return out
