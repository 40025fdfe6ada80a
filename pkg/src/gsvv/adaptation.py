"""Bandwidth traces and the bandwidth-aware tile/LoD selection strategy.

Per frame the planner (1) maps visible Gaussians to tiles across the
containers of the current group of frames, (2) sends base payloads for
visible tiles not yet transmitted, (3) raises those tiles round-robin
until their average LoD catches up with the tiles already sent, and
(4) spends the remaining budget upgrading sent tiles in descending
visible-Gaussian count.  Already-sent layers are never re-sent and the
byte budget is never exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GsvvError, ParseError, ValidationError
from .tiling import TiledLodContainer


# ---------------------------------------------------------------------------
# bandwidth traces
# ---------------------------------------------------------------------------

@dataclass
class BandwidthTrace:
    timestamps: np.ndarray  # seconds, increasing
    mbps: np.ndarray        # throughput at each timestamp

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.mbps = np.asarray(self.mbps, dtype=np.float64)
        if len(self.timestamps) == 0:
            raise ValidationError("bandwidth trace is empty")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("bandwidth trace timestamps must increase")
        if np.any(self.mbps < 0):
            raise ValidationError("bandwidth trace throughput must be >= 0")

    @classmethod
    def fixed(cls, mbps: float) -> "BandwidthTrace":
        return cls(timestamps=np.array([0.0]), mbps=np.array([mbps]))

    def throughput_at(self, t: float) -> tuple[float, bool]:
        """Piecewise-constant lookup; out-of-range times clamp to the
        nearest sample and set the flag."""
        clamped = t < self.timestamps[0]
        idx = np.searchsorted(self.timestamps, t, side="right") - 1
        idx = max(int(idx), 0)
        return float(self.mbps[idx]), bool(clamped)


def load_bandwidth_trace(path) -> BandwidthTrace:
    times, mbps = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("timestamp"):
            raise ParseError(f"{path}: unexpected header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(f"{path}:{line_no}: expected 'timestamp,mbps'")
            times.append(float(parts[0]))
            mbps.append(float(parts[1]))
    return BandwidthTrace(timestamps=np.array(times), mbps=np.array(mbps))


def save_bandwidth_trace(trace: BandwidthTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write("timestamp,mbps\n")
        for t, m in zip(trace.timestamps, trace.mbps):
            fh.write(f"{float(t)!r},{float(m)!r}\n")


def frame_budget(trace: BandwidthTrace, frame_time: float, fps: float):
    """Byte budget for one frame; returns (bytes, clamped_flag)."""
    if fps <= 0:
        raise ValidationError(f"fps must be positive, got {fps}")
    mbps, clamped = trace.throughput_at(frame_time)
    return int(mbps * 1e6 / 8.0 / fps), clamped


# ---------------------------------------------------------------------------
# tile/LoD planner
# ---------------------------------------------------------------------------

@dataclass
class PlanEntry:
    container_frame: int
    tile_id: int
    lod_level: int     # highest level sent so far for this tile
    bytes: int         # bytes spent on this tile this frame


@dataclass
class SelectionPlan:
    frame_index: int
    budget_bytes: int
    entries: list[PlanEntry] = field(default_factory=list)
    spent_bytes: int = 0
    visible_tiles: set = field(default_factory=set)
    starved: bool = False


class TilePlanner:
    """Stateful planner for one group of frames.

    ``resend_mode`` mimics non-scalable baselines: upgrading a tile
    re-sends all of its payloads up to the new level instead of only the
    incremental layer.
    """

    def __init__(self, resend_mode: bool = False):
        self.resend_mode = resend_mode
        self.reset()

    def reset(self) -> None:
        self.containers: dict[int, TiledLodContainer] = {}
        self.tile_lookup: dict[int, dict[int, int]] = {}
        self.sent_lod: dict[tuple[int, int], int] = {}
        self.visible_union: set[int] = set()

    def register_container(self, container: TiledLodContainer) -> None:
        frame = container.frame_index
        self.containers[frame] = container
        lookup: dict[int, int] = {}
        for tile in container.tiles:
            for gid in tile.gaussian_ids:
                lookup[int(gid)] = tile.tile_id
        self.tile_lookup[frame] = lookup

    def _base_cost(self, frame: int, tile: int) -> int:
        return self.containers[frame].tile_base_bytes(tile)

    def _upgrade_cost(self, frame: int, tile: int, level: int) -> int:
        c = self.containers[frame]
        if self.resend_mode:
            return c.tile_base_bytes(tile) + sum(
                c.tile_level_bytes(tile, l) for l in range(1, level + 1)
            )
        return c.tile_level_bytes(tile, level)

    def select(self, frame_index: int, visible_ids, budget: int) -> SelectionPlan:
        plan = SelectionPlan(frame_index=frame_index, budget_bytes=int(budget))
        self.visible_union.update(int(g) for g in np.asarray(visible_ids).ravel())

        # step 1: visible tiles across the group's containers
        visible_tiles: set[tuple[int, int]] = set()
        vis_count: dict[tuple[int, int], int] = {}
        current = {int(g) for g in np.asarray(visible_ids).ravel()}
        for frame, lookup in self.tile_lookup.items():
            for gid in self.visible_union:
                tid = lookup.get(gid)
                if tid is not None:
                    visible_tiles.add((frame, tid))
        for frame, lookup in self.tile_lookup.items():
            for gid in current:
                tid = lookup.get(gid)
                if tid is not None:
                    key = (frame, tid)
                    vis_count[key] = vis_count.get(key, 0) + 1
        plan.visible_tiles = visible_tiles

        remaining = int(budget)
        spent: dict[tuple[int, int], int] = {}

        already_sent = [k for k in visible_tiles if k in self.sent_lod]
        new_tiles = sorted(k for k in visible_tiles if k not in self.sent_lod)

        # step 2: base payloads for untransmitted visible tiles
        sent_new = []
        for key in new_tiles:
            cost = self._base_cost(*key)
            if cost <= remaining:
                remaining -= cost
                self.sent_lod[key] = 0
                spent[key] = spent.get(key, 0) + cost
                sent_new.append(key)
            else:
                plan.starved = True

        # step 3: raise new tiles until their average LoD matches the
        # tiles already sent (mean rounded down)
        if already_sent and sent_new:
            target = int(np.floor(np.mean([self.sent_lod[k] for k in already_sent])))
            progress = True
            while progress and remaining > 0:
                progress = False
                avg_new = np.mean([self.sent_lod[k] for k in sent_new])
                if avg_new >= target:
                    break
                for key in sent_new:
                    level = self.sent_lod[key] + 1
                    if self.sent_lod[key] >= target:
                        continue
                    if level >= self.containers[key[0]].n_levels:
                        continue
                    cost = self._upgrade_cost(key[0], key[1], level)
                    if cost <= remaining:
                        remaining -= cost
                        self.sent_lod[key] = level
                        spent[key] = spent.get(key, 0) + cost
                        progress = True

        # step 4: upgrade transmitted tiles in descending visible count
        pool = [k for k in visible_tiles if k in self.sent_lod]
        pool.sort(key=lambda k: (-vis_count.get(k, 0), k[0], k[1]))
        progress = True
        while progress and remaining > 0:
            progress = False
            for key in pool:
                level = self.sent_lod[key] + 1
                if level >= self.containers[key[0]].n_levels:
                    continue
                cost = self._upgrade_cost(key[0], key[1], level)
                if cost <= remaining:
                    remaining -= cost
                    self.sent_lod[key] = level
                    spent[key] = spent.get(key, 0) + cost
                    progress = True

        for key in sorted(spent):
            plan.entries.append(PlanEntry(
                container_frame=key[0], tile_id=key[1],
                lod_level=self.sent_lod[key], bytes=spent[key],
            ))
        plan.spent_bytes = int(budget) - remaining
        if plan.spent_bytes > budget:
            raise GsvvError("planner exceeded its byte budget")  # unreachable
        return plan


def write_plan_csv(plans: list[SelectionPlan], path) -> None:
    with open(path, "w") as fh:
        fh.write("frame,container_frame,tile,lod,bytes\n")
        for plan in plans:
            for e in plan.entries:
                fh.write(f"{plan.frame_index},{e.container_frame},"
                         f"{e.tile_id},{e.lod_level},{e.bytes}\n")
