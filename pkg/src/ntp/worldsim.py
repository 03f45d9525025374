"""Deterministic kinematic tabletop simulator.

Objects are rigid 5 cm bodies whose ``position`` is the centre of their top
face. Every object and container occupies a fixed canonical slot; the slot
index doubles as the entity id and as the ``move_to`` target index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ntp.errors import ApiArgumentError, UnsatisfiableLayoutError

HOVER = 0.05
HEIGHT = 0.05
GRASP_TOL = 0.02
STACK_TOL = 0.01
SENTINEL = 1000.0
TABLE = -1
WORKSPACE = 1.0
HOME = (0.0, 0.0, 0.5)

TABLE_EXTENT = 0.6
MIN_OBJECT_SEP = 0.07
MIN_CONTAINER_SEP = 0.25
CONTAINER_CLEARANCE = 0.06
MAX_PLACEMENT_ATTEMPTS = 1000

API_MOVE_TO = 6
API_GRIP = 7
API_RELEASE = 8
API_NAMES = {API_MOVE_TO: "move_to", API_GRIP: "grip", API_RELEASE: "release"}
API_IDS = {v: k for k, v in API_NAMES.items()}


class Position3(NamedTuple):
    x: float
    y: float
    z: float

    def offset(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "Position3":
        return Position3(self.x + dx, self.y + dy, self.z + dz)

    def xy_dist(self, other: "Position3") -> float:
        return float(np.hypot(self.x - other.x, self.y - other.y))


@dataclass(frozen=True)
class EntityType:
    name: str
    kind: str  # "object" or "container"
    radius: float = 0.0  # footprint radius, containers only
    rim: float = 0.0  # z of a container's top surface
    accepts: frozenset = frozenset()  # type ids dropped *inside* rather than stacked on top
    inset: float = 0.0  # contents sit this far below the receptacle's top surface


@dataclass(frozen=True)
class Layout:
    """Canonical slot table for one experiment configuration.

    ``slot_types[i]`` is the type id of slot ``i``; observation and feature
    vectors are laid out in slot order.
    """

    types: tuple[EntityType, ...]
    slot_types: tuple[int, ...]

    @property
    def n_slots(self) -> int:
        return len(self.slot_types)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_slots + 1

    def kind(self, slot: int) -> str:
        return self.types[self.slot_types[slot]].kind

    def to_json(self) -> dict:
        return {
            "types": [
                {"name": t.name, "kind": t.kind, "radius": t.radius, "rim": t.rim,
                 "accepts": sorted(t.accepts), "inset": t.inset}
                for t in self.types
            ],
            "slot_types": list(self.slot_types),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Layout":
        types = tuple(
            EntityType(t["name"], t["kind"], t["radius"], t["rim"], frozenset(t["accepts"]), t["inset"])
            for t in d["types"]
        )
        return cls(types, tuple(d["slot_types"]))


@dataclass(frozen=True)
class ObjectState:
    id: int
    category: int
    position: Position3
    supported_by: int | None  # TABLE, another entity id, or None while held


@dataclass(frozen=True)
class ContainerState:
    id: int
    category: int
    position: Position3
    radius: float


@dataclass(frozen=True)
class GripperState:
    position: Position3
    closed: bool = False
    held: int | None = None


@dataclass(frozen=True)
class WorldState:
    layout: Layout
    objects: tuple[ObjectState, ...]
    containers: tuple[ContainerState, ...]
    gripper: GripperState
    step_count: int = 0
    seed: int = 0
    last_grasp_miss: bool = False
    perturbations: int = 0
    _index: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        idx = {o.id: ("o", k) for k, o in enumerate(self.objects)}
        idx.update({c.id: ("c", k) for k, c in enumerate(self.containers)})
        object.__setattr__(self, "_index", idx)

    def has(self, eid: int) -> bool:
        return eid in self._index

    def entity(self, eid: int) -> ObjectState | ContainerState:
        kind, k = self._index[eid]
        return self.objects[k] if kind == "o" else self.containers[k]

    def is_container(self, eid: int) -> bool:
        return self._index[eid][0] == "c"

    def obj(self, eid: int) -> ObjectState:
        kind, k = self._index[eid]
        if kind != "o":
            raise KeyError(eid)
        return self.objects[k]

    def with_objects(self, updates: dict[int, ObjectState], **kw) -> "WorldState":
        objs = tuple(updates.get(o.id, o) for o in self.objects)
        return replace(self, objects=objs, **kw)

    def children(self, eid: int) -> list[ObjectState]:
        return [o for o in self.objects if o.supported_by == eid]


class SceneEntity(NamedTuple):
    id: int
    type_id: int


def _seed_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))


def _sample_xy(rng, taken: list[tuple[float, float, float]], clearance: float, extent: float = TABLE_EXTENT):
    """Rejection-sample an (x, y) clear of every (x, y, radius) in ``taken``."""
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        x, y = rng.uniform(-extent, extent, size=2)
        if all(np.hypot(x - tx, y - ty) >= r + clearance for tx, ty, r in taken):
            return float(x), float(y)
    raise UnsatisfiableLayoutError(f"no collision-free position after {MAX_PLACEMENT_ATTEMPTS} attempts")


def reset(task, seed: int) -> WorldState:
    """Place the task's objects at random collision-free table positions.

    ``task`` supplies ``layout()`` and ``scene()``; the latter returns the
    present entities as ``SceneEntity`` records.
    """
    layout: Layout = task.layout()
    rng = _seed_rng(seed)
    taken: list[tuple[float, float, float]] = []
    containers, objects = [], []
    scene = sorted(task.scene(), key=lambda e: (layout.types[e.type_id].kind != "container", e.id))
    for ent in scene:
        t = layout.types[ent.type_id]
        if t.kind == "container":
            centres = [(c.position.x, c.position.y, MIN_CONTAINER_SEP) for c in containers]
            x, y = _sample_xy(rng, centres, 0.0)
            taken.append((x, y, t.radius + CONTAINER_CLEARANCE))
            containers.append(ContainerState(ent.id, ent.type_id, Position3(x, y, t.rim), t.radius))
        else:
            x, y = _sample_xy(rng, taken, 0.0)
            taken.append((x, y, MIN_OBJECT_SEP))
            objects.append(ObjectState(ent.id, ent.type_id, Position3(x, y, HEIGHT), TABLE))
    return WorldState(
        layout=layout,
        objects=tuple(sorted(objects, key=lambda o: o.id)),
        containers=tuple(sorted(containers, key=lambda c: c.id)),
        gripper=GripperState(Position3(*HOME)),
        seed=int(seed),
    )


def _is_contained(state: WorldState, o: ObjectState) -> bool:
    sup = o.supported_by
    if sup is None or sup == TABLE:
        return False
    host = state.entity(sup)
    return o.category in state.layout.types[host.category].accepts


def _covered(state: WorldState, eid: int) -> bool:
    return any(not _is_contained(state, o) for o in state.children(eid))


def _surface_under(state: WorldState, xy: Position3, exclude: int | None):
    """Topmost entity whose top surface lies beneath ``xy``; contents of receptacles are skipped."""
    best = None
    for o in state.objects:
        if o.id == exclude or o.supported_by is None or _is_contained(state, o):
            continue
        if o.position.xy_dist(xy) < GRASP_TOL and (best is None or o.position.z > best.position.z):
            best = o
    for c in state.containers:
        if c.position.xy_dist(xy) < c.radius and (best is None or c.position.z > best.position.z):
            best = c
    return best


def step_api(state: WorldState, api: int | str, args: Sequence[int] | int | None = ()) -> WorldState:
    """Execute one robot API call and return the successor state."""
    if isinstance(api, str):
        if api not in API_IDS:
            raise ApiArgumentError(f"unknown api {api!r}")
        api = API_IDS[api]
    if isinstance(args, (int, np.integer)):
        args = (int(args),)
    args = tuple(args or ())
    g = state.gripper
    nxt = dict(step_count=state.step_count + 1, last_grasp_miss=False)

    if api == API_MOVE_TO:
        if len(args) != 1:
            raise ApiArgumentError("move_to takes exactly one target index")
        target = int(args[0])
        if not state.has(target):
            raise ApiArgumentError(f"move_to target {target} is not present in the world")
        if target == g.held:
            return replace(state, **nxt)
        pos = state.entity(target).position.offset(dz=HOVER)
        gripper = replace(g, position=pos)
        updates = {}
        if g.held is not None:
            updates[g.held] = replace(state.obj(g.held), position=pos)
        return state.with_objects(updates, gripper=gripper, **nxt)

    if args:
        raise ApiArgumentError(f"{API_NAMES.get(api, api)} takes no arguments")

    if api == API_GRIP:
        if g.held is not None:
            return replace(state, **nxt)
        grasp_point = g.position.offset(dz=-HOVER)
        best, best_d = None, GRASP_TOL
        for o in state.objects:
            if o.supported_by is None or _covered(state, o.id):
                continue
            d = float(np.linalg.norm(np.subtract(o.position, grasp_point)))
            if d < best_d:
                best, best_d = o, d
        if best is None:
            nxt["last_grasp_miss"] = True
            return replace(state, gripper=replace(g, closed=True), **nxt)
        held = replace(best, position=g.position, supported_by=None)
        return state.with_objects({best.id: held}, gripper=GripperState(g.position, True, best.id), **nxt)

    if api == API_RELEASE:
        gripper = GripperState(g.position, False, None)
        if g.held is None:
            return replace(state, gripper=gripper, **nxt)
        obj = state.obj(g.held)
        surf = _surface_under(state, g.position, exclude=obj.id)
        if surf is None:
            placed = replace(obj, position=Position3(g.position.x, g.position.y, HEIGHT), supported_by=TABLE)
        else:
            host_type = state.layout.types[surf.category]
            if obj.category in host_type.accepts:
                pos = surf.position.offset(dz=-host_type.inset)
            else:
                pos = surf.position.offset(dz=HEIGHT)
            placed = replace(obj, position=pos, supported_by=surf.id)
        return state.with_objects({obj.id: placed}, gripper=gripper, **nxt)

    raise ApiArgumentError(f"api id {api} is not a primitive")


def stacks(state: WorldState) -> list[list[int]]:
    """Table-rooted towers as bottom-to-top id lists (height >= 1)."""
    out = []
    for o in state.objects:
        if o.supported_by != TABLE:
            continue
        tower, cur = [o.id], o.id
        while True:
            above = [c for c in state.children(cur) if not _is_contained(state, c)]
            if not above:
                break
            cur = above[0].id
            tower.append(cur)
        out.append(tower)
    return out


def _occupied(state: WorldState, exclude: Iterable[int]) -> list[tuple[float, float, float]]:
    ex = set(exclude)
    taken = [(c.position.x, c.position.y, c.radius + CONTAINER_CLEARANCE) for c in state.containers]
    taken += [(o.position.x, o.position.y, MIN_OBJECT_SEP) for o in state.objects
              if o.supported_by == TABLE and o.id not in ex]
    return taken


def apply_adversary(state: WorldState, rng: np.random.Generator, prob: float) -> WorldState:
    """With probability ``prob`` topple one tower: its non-base blocks land on the table."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    if rng.random() >= prob:
        return state
    towers = [t for t in stacks(state) if len(t) >= 2]
    if not towers:
        return state
    tower = towers[int(rng.integers(len(towers)))]
    taken = _occupied(state, exclude=tower[1:])
    updates = {}
    for eid in tower[1:]:
        x, y = _sample_xy(rng, taken, 0.0)
        taken.append((x, y, MIN_OBJECT_SEP))
        updates[eid] = replace(state.obj(eid), position=Position3(x, y, HEIGHT), supported_by=TABLE)
    return state.with_objects(updates, perturbations=state.perturbations + 1)


def observe(state: WorldState) -> np.ndarray:
    """Slot-ordered (dx, dy, dz) relative to the gripper plus aperture (1 open)."""
    layout = state.layout
    obs = np.full(layout.obs_dim, SENTINEL)
    g = np.asarray(state.gripper.position, dtype=float)
    for ent in (*state.objects, *state.containers):
        obs[3 * ent.id: 3 * ent.id + 3] = np.asarray(ent.position, dtype=float) - g
    obs[-1] = 0.0 if state.gripper.closed else 1.0
    return obs


def translate(state: WorldState, dx: float, dy: float, dz: float) -> WorldState:
    """Rigidly shift every entity and the gripper (used by invariance tests)."""
    objs = tuple(replace(o, position=o.position.offset(dx, dy, dz)) for o in state.objects)
    conts = tuple(replace(c, position=c.position.offset(dx, dy, dz)) for c in state.containers)
    g = replace(state.gripper, position=state.gripper.position.offset(dx, dy, dz))
    return replace(state, objects=objs, containers=conts, gripper=g)


def support_forest_ok(state: WorldState) -> bool:
    """Every support chain terminates at the table, a container or the gripper without cycles."""
    for o in state.objects:
        seen, cur = set(), o
        while isinstance(cur, ObjectState) and cur.supported_by not in (None, TABLE):
            if cur.id in seen:
                return False
            seen.add(cur.id)
            cur = state.entity(cur.supported_by)
    return True


def api_event(state: WorldState, api: int, args: Sequence[int]) -> dict:
    return {"step": state.step_count, "api": API_NAMES[api], "args": list(args), "grasp_miss": state.last_grasp_miss}


def write_api_log(log: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_api_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay(state: WorldState, log: Sequence[dict]) -> WorldState:
    for rec in log:
        state = step_api(state, rec["api"], rec["args"])
    return state
