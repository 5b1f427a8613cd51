"""Synthetic road scenes: construction, constant-velocity agents, BEV rasterization.

World conventions: right-hand traffic, left of travel direction is +lateral. A
road is described by the centerline of the ego-direction lane; the opposing
lane centre sits one lane width to its left. The drivable surface spans both
lanes plus a shoulder on either side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import shapely
from shapely.geometry import LineString

from ..geometry import Command
from .shapes import Polyline, box_corners

LANE_HALF_WIDTH = 1.8
SHOULDER = 0.8
ROAD_HALF_WIDTH = 2 * LANE_HALF_WIDTH + SHOULDER  # measured from the road axis
MARK_BAND = 0.5
GOAL_RADIUS = 1.5
SPAWN_CLEARANCE = 5.0
ARC_SPACING = 0.5

N_CLASSES = 7


class BEVClass:
    BACKGROUND = 0
    ROAD = 1
    LANE_MARKING = 2
    CENTERLINE = 3
    STATIC = 4
    VEHICLE = 5
    GOAL = 6


class Kind(str, Enum):
    STRAIGHT = "straight"
    CURVE = "curve"
    INTERSECTION = "intersection"


@dataclass(frozen=True)
class GridConfig:
    size: int = 64
    resolution: float = 1.0

    def __post_init__(self):
        if self.size < 1 or self.resolution <= 0:
            raise ValueError("grid needs size >= 1 and resolution > 0")

    def cell_centers(self) -> np.ndarray:
        """Ego-frame centres (size, size, 2); cell [i, j] sits at x=(i-size/2)*res, y=(j-size/2)*res."""
        c = (np.arange(self.size) - self.size // 2) * self.resolution
        gx, gy = np.meshgrid(c, c, indexing="ij")
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class Scenario:
    kind: Kind
    seed: int
    route: Polyline | None          # centreline the ego should follow, arc length 0 at the ego origin
    roads: tuple = ()               # ego-direction lane centrelines of every road
    connectors: tuple = ()          # turning paths through a junction: drivable, unmarked
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # x, y, theta, length, width
    agents: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))     # x, y, theta, vx, vy, length, width
    goal: np.ndarray | None = None
    cruise_speed: float = 6.0
    command: Command = Command.KEEP_LANE
    curvature: float = 0.0          # signed route curvature for curve scenes, 0 otherwise
    t: float = 0.0

    @property
    def drivable(self):
        return _drivable(self.roads, self.connectors)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        same_arrays = all(np.array_equal(getattr(self, k), getattr(other, k))
                          for k in ("obstacles", "agents"))
        goals = (self.goal is None and other.goal is None) or (
            self.goal is not None and other.goal is not None and np.array_equal(self.goal, other.goal))
        return (same_arrays and goals and self.kind == other.kind and self.seed == other.seed
                and self.route == other.route and len(self.roads) == len(other.roads)
                and all(a == b for a, b in zip(self.roads, other.roads))
                and len(self.connectors) == len(other.connectors)
                and all(a == b for a, b in zip(self.connectors, other.connectors))
                and (self.cruise_speed, self.command, self.curvature, self.t)
                == (other.cruise_speed, other.command, other.curvature, other.t))

    def boxes(self, include_static: bool = True) -> np.ndarray:
        """All footprints as (n, 5) boxes at the scenario's current time."""
        dyn = self.agents[:, [0, 1, 2, 5, 6]]
        return np.vstack([self.obstacles, dyn]) if include_static else dyn

    def boxes_at(self, dt) -> np.ndarray:
        """Footprints after ``dt`` more seconds of constant-velocity motion, shape (..., n, 5)."""
        dt = np.asarray(dt, dtype=np.float64)
        dyn = np.broadcast_to(self.agents[:, [0, 1, 2, 5, 6]], dt.shape + (len(self.agents), 5)).copy()
        dyn[..., 0] += dt[..., None] * self.agents[:, 3]
        dyn[..., 1] += dt[..., None] * self.agents[:, 4]
        stat = np.broadcast_to(self.obstacles, dt.shape + self.obstacles.shape)
        return np.concatenate([stat, dyn], axis=-2)

    @classmethod
    def empty(cls) -> "Scenario":
        return cls(kind=Kind.STRAIGHT, seed=0, route=None)


_DRIVABLE_CACHE: dict = {}


def _road_axis(lane: Polyline) -> LineString:
    return LineString(lane.points).offset_curve(LANE_HALF_WIDTH)


def _drivable(roads, connectors=()):
    key = tuple(id(r) for r in roads) + tuple(id(c) for c in connectors)
    hit = _DRIVABLE_CACHE.get(key)
    if hit is not None:  # cached entries keep their roads alive, so ids cannot be recycled
        return hit[1]
    if not roads:
        geom = shapely.Polygon()
    else:
        parts = [_road_axis(r).buffer(ROAD_HALF_WIDTH, cap_style="flat") for r in roads]
        parts += [LineString(c.points).buffer(LANE_HALF_WIDTH + SHOULDER, cap_style="flat")
                  for c in connectors]
        geom = shapely.union_all(parts)
    shapely.prepare(geom)
    if len(_DRIVABLE_CACHE) > 256:
        _DRIVABLE_CACHE.clear()
    _DRIVABLE_CACHE[key] = ((roads, connectors), geom)
    return geom


def in_drivable(scenario: Scenario, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    geom = scenario.drivable
    if geom.is_empty:
        return np.zeros(xy.shape[:-1], dtype=bool)
    return shapely.contains_xy(geom, xy[..., 0], xy[..., 1])


# ---------------------------------------------------------------- construction

def _straight(x0, y0, heading, length):
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[x0, y0], [x0 + c * length, y0 + s * length]])


def _arc(x0, y0, heading, radius, signed_angle):
    """Circular arc from (x0, y0) with the given initial heading; left turn for positive angle."""
    n = max(2, int(math.ceil(abs(signed_angle) * radius / ARC_SPACING)) + 1)
    sign = 1.0 if signed_angle > 0 else -1.0
    cx = x0 - sign * radius * math.sin(heading)
    cy = y0 + sign * radius * math.cos(heading)
    phi0 = math.atan2(y0 - cy, x0 - cx)
    phi = phi0 + np.linspace(0.0, signed_angle, n)
    return np.stack([cx + radius * np.cos(phi), cy + radius * np.sin(phi)], axis=-1)


def _join(*parts):
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.vstack(out)


def _box_at(route: Polyline, s, lat, length, width, reverse=False):
    xy, th = route.point_at(s)
    nx, ny = -math.sin(th), math.cos(th)
    heading = th + (math.pi if reverse else 0.0)
    heading = math.atan2(math.sin(heading), math.cos(heading))
    return np.array([xy[0] + lat * nx, xy[1] + lat * ny, heading, length, width])


def _layout(kind: Kind, rng: np.random.Generator):
    behind, ahead = 10.0, 70.0
    curvature = 0.0
    command = Command.KEEP_LANE
    if kind is Kind.STRAIGHT:
        pts = _straight(-behind, 0.0, 0.0, behind + ahead)
        route = Polyline(pts, s0=behind)
        return route, (route,), (), command, curvature, None
    if kind is Kind.CURVE:
        radius = float(rng.uniform(20.0, 60.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        back = _arc(0.0, 0.0, math.pi, radius, -sign * behind / radius)[::-1]
        fwd = _arc(0.0, 0.0, 0.0, radius, sign * ahead / radius)
        route = Polyline(_join(back, fwd), s0=behind)
        curvature = sign / radius
        return route, (route,), (), command, curvature, None
    # intersection: ego road along +x, crossing road along y at x = xc
    xc = float(rng.uniform(18.0, 30.0))
    turn = int(rng.integers(3))
    radius = 10.0
    ego_road = Polyline(_straight(-behind, 0.0, 0.0, behind + xc + 40.0), s0=behind)
    north = Polyline(_straight(xc + LANE_HALF_WIDTH, -40.0, math.pi / 2, 80.0))
    roads = (ego_road, north)
    if turn == 0:
        route = ego_road
    elif turn == 1:
        command = Command.TURN_LEFT
        x_start = xc + LANE_HALF_WIDTH - radius
        route = Polyline(_join(_straight(-behind, 0.0, 0.0, behind + x_start),
                               _arc(x_start, 0.0, 0.0, radius, math.pi / 2),
                               _straight(xc + LANE_HALF_WIDTH, radius, math.pi / 2, 50.0)), s0=behind)
    else:
        command = Command.TURN_RIGHT
        x_start = xc - LANE_HALF_WIDTH - radius
        route = Polyline(_join(_straight(-behind, 0.0, 0.0, behind + x_start),
                               _arc(x_start, 0.0, 0.0, radius, -math.pi / 2),
                               _straight(xc - LANE_HALF_WIDTH, -radius, -math.pi / 2, 50.0)), s0=behind)
    connectors = () if turn == 0 else (route,)
    return route, roads, connectors, command, curvature, (xc, north)


def _draw_traffic(kind, route, roads, cross, cruise, rng):
    obstacles, agents = [], []
    length = lambda: float(rng.uniform(4.2, 5.0))  # noqa: E731
    width = lambda: float(rng.uniform(1.8, 2.0))  # noqa: E731
    for _ in range(int(rng.integers(0, 3))):
        s = float(rng.uniform(10.0, 50.0))
        obstacles.append(_box_at(route, s, -float(rng.uniform(2.9, 3.3)), length(), width()))
    n_dyn = int(rng.integers(0, 4))
    if cross is not None:
        xc, north = cross
        going_north = rng.random() < 0.5
        y0 = float(rng.uniform(12.0, 40.0))
        speed = float(rng.uniform(3.0, 7.0))
        if going_north:
            x, y, th, vy = xc + LANE_HALF_WIDTH, -y0, math.pi / 2, speed
        else:
            x, y, th, vy = xc - LANE_HALF_WIDTH, y0, -math.pi / 2, -speed
        agents.append([x, y, th, 0.0, vy, length(), width()])
        n_dyn = max(0, n_dyn - 1)
    for _ in range(n_dyn):
        if rng.random() < 0.5:  # lead vehicle in the ego lane
            s = float(rng.uniform(15.0, 40.0))
            speed = cruise * float(rng.uniform(0.3, 0.8))
            b = _box_at(route, s, 0.0, length(), width())
        else:  # oncoming traffic in the opposing lane
            s = float(rng.uniform(20.0, 60.0))
            speed = float(rng.uniform(3.0, 8.0))
            b = _box_at(roads[0], s, 2 * LANE_HALF_WIDTH, length(), width(), reverse=True)
        agents.append([b[0], b[1], b[2], speed * math.cos(b[2]), speed * math.sin(b[2]), b[3], b[4]])
    obs = np.array(obstacles, dtype=np.float64).reshape(-1, 5)
    ag = np.array(agents, dtype=np.float64).reshape(-1, 7)
    return obs, ag


def _clear_of_origin(boxes: np.ndarray) -> bool:
    if len(boxes) == 0:
        return True
    corners = box_corners(boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3], boxes[:, 4])
    centre = np.hypot(boxes[:, 0], boxes[:, 1])
    nearest = np.hypot(corners[..., 0], corners[..., 1]).min(axis=-1)
    return bool(np.all(np.minimum(centre, nearest) >= SPAWN_CLEARANCE))


def generate_scenario(seed: int, kind: Kind | str, max_redraws: int = 30) -> Scenario:
    """Deterministic scene for ``(seed, kind)``.

    Traffic is redrawn from a seeded sub-stream until the scripted expert
    completes two planning horizons without collision or leaving the road; if
    no draw succeeds the scene is returned without traffic.
    """
    from .expert import expert_is_safe  # the expert needs Scenario; import lazily

    kind = Kind(kind)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(list(Kind).index(kind),)))
    route, roads, connectors, command, curvature, cross = _layout(kind, rng)
    cruise = float(rng.uniform(4.0, 8.0))
    goal_s = min(60.0, route.s[-1] - 5.0)
    goal = route.point_at(goal_s)[0]
    base = Scenario(kind=kind, seed=int(seed), route=route, roads=roads, connectors=connectors, goal=goal,
                    cruise_speed=cruise, command=command, curvature=curvature)
    for attempt in range(max_redraws):
        sub = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(list(Kind).index(kind), 1, attempt)))
        obs, ag = _draw_traffic(kind, route, roads, cross, cruise, sub)
        if not _clear_of_origin(np.vstack([obs, ag[:, [0, 1, 2, 5, 6]]])):
            continue
        scn = replace(base, obstacles=obs, agents=ag)
        if expert_is_safe(scn):
            return scn
    return base


def step_agents(scenario: Scenario, dt: float) -> Scenario:
    if dt <= 0:
        raise ValueError("dt must be positive")
    ag = scenario.agents.copy()
    ag[:, 0] += ag[:, 3] * dt
    ag[:, 1] += ag[:, 4] * dt
    return replace(scenario, agents=ag, t=scenario.t + dt)


def advance(scenario: Scenario, dt: float) -> Scenario:
    return scenario if dt == 0 else step_agents(scenario, dt)


# ---------------------------------------------------------------- rasterization

def _in_boxes(xy: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Points (n, 2) inside any of the boxes (m, 5)."""
    inside = np.zeros(len(xy), dtype=bool)
    for x, y, th, ln, wd in boxes:
        dx, dy = xy[:, 0] - x, xy[:, 1] - y
        c, s = math.cos(th), math.sin(th)
        inside |= (np.abs(c * dx + s * dy) <= 0.5 * ln) & (np.abs(-s * dx + c * dy) <= 0.5 * wd)
    return inside


def rasterize_bev(scenario: Scenario, ego_pose, grid: GridConfig = GridConfig()) -> np.ndarray:
    """Semantic grid (size, size) of uint8 classes around ``ego_pose`` (x, y, theta).

    Later classes overwrite earlier ones, giving the precedence
    background < road < lane-marking < centerline < static < vehicle < goal.
    """
    local = grid.cell_centers().reshape(-1, 2)
    ox, oy, oth = (float(v) for v in ego_pose)
    c, s = math.cos(oth), math.sin(oth)
    world = np.stack([ox + c * local[:, 0] - s * local[:, 1],
                      oy + s * local[:, 0] + c * local[:, 1]], axis=-1)
    out = np.zeros(len(world), dtype=np.uint8)
    if scenario.roads:
        road = in_drivable(scenario, world)
        out[road] = BEVClass.ROAD
        marking = np.zeros_like(road)
        centre = np.zeros_like(road)
        for lane in scenario.roads:
            _, lat, _, _ = lane.project(world[road])
            marking_r = np.zeros(lat.shape, dtype=bool)
            for m in (-LANE_HALF_WIDTH, LANE_HALF_WIDTH, 3 * LANE_HALF_WIDTH):
                marking_r |= np.abs(lat - m) < MARK_BAND
            centre_r = (np.abs(lat) < MARK_BAND) | (np.abs(lat - 2 * LANE_HALF_WIDTH) < MARK_BAND)
            marking[road] |= marking_r
            centre[road] |= centre_r
        out[marking] = BEVClass.LANE_MARKING
        out[centre] = BEVClass.CENTERLINE
    if len(scenario.obstacles):
        out[_in_boxes(world, scenario.obstacles)] = BEVClass.STATIC
    if len(scenario.agents):
        out[_in_boxes(world, scenario.agents[:, [0, 1, 2, 5, 6]])] = BEVClass.VEHICLE
    if scenario.goal is not None:
        out[np.hypot(world[:, 0] - scenario.goal[0], world[:, 1] - scenario.goal[1]) <= GOAL_RADIUS] = BEVClass.GOAL
    return out.reshape(grid.size, grid.size)
