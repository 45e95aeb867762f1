"""Deterministic text-world state and transition engine.

World state is a value: ``apply_action`` returns a fresh state, so replaying
an action sequence from the same start always produces identical states,
observations, and facts. Observations and emitted facts are built from the
same state deltas and name exactly the same entities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..errors import UnparseableAction
from ..kb import Channel, Relation, Triple, attribute, entity_ref

INVENTORY = "inventory"
AGENT = "agent"
HEAT_PER_STEP = 5.0
MAX_TEMPERATURE = 100.0

REL_LOCATED = Relation("located", Channel.OBSERVATION)
REL_IS_OPEN = Relation("is_open", Channel.OBSERVATION)
REL_IS_ACTIVE = Relation("is_active", Channel.OBSERVATION)
REL_EXITS = Relation("exits", Channel.OBSERVATION)
REL_TEMPERATURE = Relation("temperature", Channel.OBSERVATION)
REL_EXAMINE = Relation("act:examine", Channel.ACTION_FEEDBACK)
REL_READ = Relation("act:read", Channel.ACTION_FEEDBACK)
REL_FOCUS = Relation("act:focus", Channel.ACTION_FEEDBACK)

DEFAULT_RELATIONS: dict[str, Channel] = {
    rel.name: rel.channel
    for rel in (
        REL_LOCATED,
        REL_IS_OPEN,
        REL_IS_ACTIVE,
        REL_EXITS,
        REL_TEMPERATURE,
        REL_EXAMINE,
        REL_READ,
        REL_FOCUS,
    )
}


@dataclass(frozen=True)
class WorldObject:
    name: str
    location: str  # room name, holding object name, or "inventory"
    portable: bool = False
    container: bool = False
    surface: bool = False
    openable: bool = False
    is_open: bool = True
    device: bool = False
    is_active: bool = False
    heater: bool = False
    liquid: bool = False
    temperature: float | None = None
    text: str | None = None  # readable content


@dataclass
class WorldState:
    task_id: str
    variation: int
    rooms: dict[str, tuple[str, ...]]
    objects: dict[str, WorldObject]
    agent_location: str
    step_count: int = 0
    milestones_hit: set[int] = field(default_factory=set)
    focused: set[str] = field(default_factory=set)
    read_objects: set[str] = field(default_factory=set)

    def clone(self) -> "WorldState":
        return WorldState(
            task_id=self.task_id,
            variation=self.variation,
            rooms=self.rooms,
            objects=dict(self.objects),
            agent_location=self.agent_location,
            step_count=self.step_count,
            milestones_hit=set(self.milestones_hit),
            focused=set(self.focused),
            read_objects=set(self.read_objects),
        )

    @property
    def run_id(self) -> str:
        return f"{self.task_id}/{self.variation}"

    def holder_chain(self, name: str) -> list[str]:
        """Locations from the object up to a room or the inventory."""
        chain = []
        loc = self.objects[name].location
        while loc not in self.rooms and loc != INVENTORY:
            chain.append(loc)
            loc = self.objects[loc].location
        chain.append(loc)
        return chain

    def is_visible(self, name: str) -> bool:
        """In the agent's room or inventory, through open containers only."""
        if name in self.rooms:
            return name == self.agent_location
        obj = self.objects.get(name)
        if obj is None:
            return False
        loc = obj.location
        while loc not in self.rooms and loc != INVENTORY:
            holder = self.objects[loc]
            if holder.openable and not holder.is_open:
                return False
            loc = holder.location
        return loc == self.agent_location or loc == INVENTORY

    def contents_of(self, name: str) -> list[WorldObject]:
        return [o for o in self.objects.values() if o.location == name]

    def room_objects(self, room: str) -> list[WorldObject]:
        return [o for o in self.objects.values() if o.location == room]

    def held_objects(self) -> list[WorldObject]:
        return [o for o in self.objects.values() if o.location == INVENTORY]


@dataclass(frozen=True)
class ActionResult:
    observation: str
    facts: tuple[Triple, ...]
    milestone_hits: tuple[int, ...] = ()
    terminal: bool = False
    accepted: bool = True
    moved: bool = False


@dataclass(frozen=True)
class ParsedAction:
    verb: str
    args: tuple[str, ...]


_NO_ARG_ACTIONS = {"wait": "wait", "look around": "look"}


def parse_action(action_text: str) -> ParsedAction:
    """Parse under the closed action grammar; raises UnparseableAction."""
    text = " ".join(action_text.lower().split())
    if text in _NO_ARG_ACTIONS:
        return ParsedAction(_NO_ARG_ACTIONS[text], ())
    head, _, rest = text.partition(" ")
    rest = rest.strip()
    if not rest:
        raise UnparseableAction(action_text)
    if head in ("go", "open", "close", "take", "examine", "read", "activate", "deactivate"):
        return ParsedAction(head, (rest,))
    if head == "focus":
        if rest.startswith("on ") and rest[3:].strip():
            return ParsedAction("focus", (rest[3:].strip(),))
        raise UnparseableAction(action_text)
    if head == "put":
        for sep, mode in ((" in ", "in"), (" on ", "on")):
            if sep in rest:
                obj, _, dest = rest.partition(sep)
                if obj.strip() and dest.strip():
                    return ParsedAction("put", (obj.strip(), dest.strip(), mode))
        raise UnparseableAction(action_text)
    if head == "pour":
        if " into " in rest:
            src, _, dst = rest.partition(" into ")
            if src.strip() and dst.strip():
                return ParsedAction("pour", (src.strip(), dst.strip()))
        raise UnparseableAction(action_text)
    raise UnparseableAction(action_text)


def action_arguments(action_text: str) -> list[str]:
    """Object/room names appearing as arguments of a parseable action."""
    parsed = parse_action(action_text)
    if parsed.verb == "put":
        return [parsed.args[0], parsed.args[1]]
    return list(parsed.args)


# --- fact construction ---


def _fact(state: WorldState, subject: str, relation: Relation, value) -> Triple:
    return Triple(
        subject=subject,
        relation=relation,
        value=value,
        step_index=state.step_count,
        task_id=state.run_id,
    )


def _object_state_facts(state: WorldState, obj: WorldObject) -> list[Triple]:
    facts = [_fact(state, obj.name, REL_LOCATED, entity_ref(obj.location))]
    if obj.openable:
        facts.append(
            _fact(state, obj.name, REL_IS_OPEN, attribute("open" if obj.is_open else "closed"))
        )
    if obj.device:
        facts.append(
            _fact(
                state,
                obj.name,
                REL_IS_ACTIVE,
                attribute("active" if obj.is_active else "inactive"),
            )
        )
    return facts


def _describe_object(state: WorldState, obj: WorldObject) -> str:
    notes = []
    if obj.openable:
        notes.append("open" if obj.is_open else "closed")
    if obj.device:
        notes.append("active" if obj.is_active else "inactive")
    if obj.container and (not obj.openable or obj.is_open):
        contents = state.contents_of(obj.name)
        if contents:
            notes.append("holding: " + ", ".join(c.name for c in contents))
        else:
            notes.append("empty")
    if obj.surface:
        riders = state.contents_of(obj.name)
        if riders:
            notes.append("holding: " + ", ".join(r.name for r in riders))
    if notes:
        return f"a {obj.name} ({'; '.join(notes)})"
    return f"a {obj.name}"


def _visible_from_room(state: WorldState, room: str) -> list[WorldObject]:
    """Room objects plus, transitively, contents of open containers/surfaces."""
    seen: list[WorldObject] = []
    frontier = state.room_objects(room)
    while frontier:
        obj = frontier.pop(0)
        seen.append(obj)
        if (obj.container or obj.surface) and (not obj.openable or obj.is_open):
            frontier.extend(state.contents_of(obj.name))
    return seen


def _look_facts(state: WorldState) -> list[Triple]:
    room = state.agent_location
    facts = [
        _fact(state, AGENT, REL_LOCATED, entity_ref(room)),
        _fact(state, room, REL_EXITS, attribute(", ".join(state.rooms[room]))),
    ]
    for obj in _visible_from_room(state, room):
        facts.extend(_object_state_facts(state, obj))
    return facts


def _look_observation(state: WorldState) -> str:
    room = state.agent_location
    exits = ", ".join(state.rooms[room])
    directly = state.room_objects(room)
    if directly:
        listing = "; ".join(_describe_object(state, o) for o in directly)
        return f"You are in the {room}. Exits lead to {exits}. You see: {listing}."
    return f"You are in the {room}. Exits lead to {exits}. The room is empty."


REFUSAL = "You can't do that."


def _refuse(state: WorldState, warming: tuple[str, list[Triple]]) -> ActionResult:
    suffix, warm_facts = warming
    return ActionResult(
        observation=REFUSAL + suffix,
        facts=tuple(warm_facts),
        accepted=False,
    )


def _apply_heating(state: WorldState) -> tuple[str, list[Triple]]:
    """Raise temperatures around active heaters; returns the observation
    suffix and facts for changes the agent can currently see."""
    suffix_parts: list[str] = []
    facts: list[Triple] = []
    for heater in state.objects.values():
        if not (heater.heater and heater.is_active):
            continue
        frontier = [o.name for o in state.contents_of(heater.name)]
        heated: list[str] = []
        while frontier:
            name = frontier.pop(0)
            heated.append(name)
            frontier.extend(o.name for o in state.contents_of(name))
        for name in heated:
            obj = state.objects[name]
            if obj.temperature is None or obj.temperature >= MAX_TEMPERATURE:
                continue
            new_temp = min(obj.temperature + HEAT_PER_STEP, MAX_TEMPERATURE)
            state.objects[name] = replace(obj, temperature=new_temp)
            if state.is_visible(name):
                reading = _format_temp(new_temp)
                suffix_parts.append(f" The {name} is now {reading} C.")
                facts.append(
                    _fact(state, name, REL_TEMPERATURE, attribute(reading, "°C"))
                )
    return "".join(suffix_parts), facts


def _format_temp(temp: float) -> str:
    return f"{temp:g}"


def initial_result(state: WorldState) -> ActionResult:
    return ActionResult(observation=_look_observation(state), facts=tuple(_look_facts(state)))


def apply_action(state: WorldState, action_text: str) -> tuple[WorldState, ActionResult]:
    """One deterministic transition. Unparseable input raises; parseable but
    impossible actions are refused with no state change (beyond time)."""
    parsed = parse_action(action_text)
    s = state.clone()
    s.step_count += 1

    obs = ""
    facts: list[Triple] = []
    accepted = True
    moved = False

    if parsed.verb == "wait":
        obs = "Time passes."
    elif parsed.verb == "look":
        obs = _look_observation(s)
        facts.extend(_look_facts(s))
    elif parsed.verb == "go":
        room = parsed.args[0]
        if room in s.rooms and room in s.rooms[s.agent_location]:
            s.agent_location = room
            moved = True
            obs = _look_observation(s)
            facts.extend(_look_facts(s))
        else:
            accepted = False
    elif parsed.verb == "open":
        name = parsed.args[0]
        obj = s.objects.get(name)
        if obj and s.is_visible(name) and obj.openable and not obj.is_open:
            s.objects[name] = replace(obj, is_open=True)
            inside = s.contents_of(name)
            if inside:
                obs = f"You open the {name}. Inside you see: " + ", ".join(
                    o.name for o in inside
                ) + "."
            else:
                obs = f"You open the {name}. It is empty."
            facts.append(_fact(s, name, REL_IS_OPEN, attribute("open")))
            for o in inside:
                facts.extend(_object_state_facts(s, o))
        else:
            accepted = False
    elif parsed.verb == "close":
        name = parsed.args[0]
        obj = s.objects.get(name)
        if obj and s.is_visible(name) and obj.openable and obj.is_open:
            s.objects[name] = replace(obj, is_open=False)
            obs = f"You close the {name}."
            facts.append(_fact(s, name, REL_IS_OPEN, attribute("closed")))
        else:
            accepted = False
    elif parsed.verb == "take":
        name = parsed.args[0]
        obj = s.objects.get(name)
        if obj and s.is_visible(name) and obj.portable and obj.location != INVENTORY:
            s.objects[name] = replace(obj, location=INVENTORY)
            obs = f"You take the {name}."
            facts.append(_fact(s, name, REL_LOCATED, entity_ref(INVENTORY)))
        else:
            accepted = False
    elif parsed.verb == "put":
        name, dest_name, mode = parsed.args
        obj = s.objects.get(name)
        dest = s.objects.get(dest_name)
        dest_ok = dest is not None and s.is_visible(dest_name) and (
            (mode == "in" and dest.container and (not dest.openable or dest.is_open))
            or (mode == "on" and dest.surface)
        )
        if obj and obj.location == INVENTORY and dest_ok:
            s.objects[name] = replace(obj, location=dest_name)
            obs = f"You put the {name} {mode} the {dest_name}."
            facts.append(_fact(s, name, REL_LOCATED, entity_ref(dest_name)))
        else:
            accepted = False
    elif parsed.verb == "pour":
        src_name, dst_name = parsed.args
        src = s.objects.get(src_name)
        dst = s.objects.get(dst_name)
        liquids = [o for o in s.contents_of(src_name) if o.liquid] if src else []
        dst_ok = (
            dst is not None
            and s.is_visible(dst_name)
            and dst.container
            and (not dst.openable or dst.is_open)
        )
        if src and src.location == INVENTORY and liquids and dst_ok:
            for liq in liquids:
                s.objects[liq.name] = replace(liq, location=dst_name)
                facts.append(_fact(s, liq.name, REL_LOCATED, entity_ref(dst_name)))
            names = ", ".join(l.name for l in liquids)
            obs = f"You pour the {names} into the {dst_name}."
        else:
            accepted = False
    elif parsed.verb in ("activate", "deactivate"):
        name = parsed.args[0]
        target_active = parsed.verb == "activate"
        obj = s.objects.get(name)
        if obj and s.is_visible(name) and obj.device and obj.is_active != target_active:
            s.objects[name] = replace(obj, is_active=target_active)
            word = "active" if target_active else "inactive"
            obs = f"You {parsed.verb} the {name}. It is now {word}."
            facts.append(_fact(s, name, REL_IS_ACTIVE, attribute(word)))
        else:
            accepted = False
    elif parsed.verb == "examine":
        name = parsed.args[0]
        obj = s.objects.get(name)
        if obj and s.is_visible(name):
            obs, facts = _examine(s, obj)
        else:
            accepted = False
    elif parsed.verb == "read":
        name = parsed.args[0]
        obj = s.objects.get(name)
        if obj and s.is_visible(name) and obj.text:
            s.read_objects.add(name)
            obs = f'The {name} reads: "{obj.text}"'
            facts.append(_fact(s, name, REL_READ, attribute(obj.text)))
        else:
            accepted = False
    elif parsed.verb == "focus":
        name = parsed.args[0]
        obj = s.objects.get(name)
        if obj and s.is_visible(name):
            s.focused.add(name)
            obs = f"You focus on the {name}."
            facts.append(_fact(s, name, REL_FOCUS, attribute("focused")))
        else:
            accepted = False
    else:  # pragma: no cover - parse_action already rejects unknown verbs
        raise UnparseableAction(action_text)

    warming = _apply_heating(s)
    if not accepted:
        return s, _refuse(s, warming)
    suffix, warm_facts = warming
    facts.extend(warm_facts)
    return s, ActionResult(
        observation=obs + suffix,
        facts=tuple(facts),
        accepted=True,
        moved=moved,
    )


def _examine(state: WorldState, obj: WorldObject) -> tuple[str, list[Triple]]:
    facts: list[Triple] = []
    if obj.temperature is not None:
        reading = _format_temp(obj.temperature)
        obs = f"The {obj.name} reads {reading} C."
        facts.append(_fact(state, obj.name, REL_EXAMINE, attribute(reading, "°C")))
        return obs, facts
    parts = []
    if obj.device:
        word = "active" if obj.is_active else "inactive"
        parts.append(f"It is {word}.")
        facts.append(_fact(state, obj.name, REL_IS_ACTIVE, attribute(word)))
    if obj.openable:
        word = "open" if obj.is_open else "closed"
        parts.append(f"It is {word}.")
        facts.append(_fact(state, obj.name, REL_IS_OPEN, attribute(word)))
    contents: list[WorldObject] = []
    if obj.container and (not obj.openable or obj.is_open):
        contents = state.contents_of(obj.name)
        if contents:
            parts.append("It holds: " + ", ".join(c.name for c in contents) + ".")
        else:
            parts.append("It is empty.")
    summary_bits = []
    if obj.device:
        summary_bits.append("active" if obj.is_active else "inactive")
    if obj.openable:
        summary_bits.append("open" if obj.is_open else "closed")
    if contents:
        summary_bits.append("holds " + ", ".join(c.name for c in contents))
    summary = "; ".join(summary_bits) if summary_bits else f"an ordinary {obj.name}"
    facts.append(_fact(state, obj.name, REL_EXAMINE, attribute(summary)))
    for c in contents:
        facts.append(_fact(state, c.name, REL_LOCATED, entity_ref(obj.name)))
    obs = f"This is a {obj.name}. " + " ".join(parts) if parts else f"This is a {obj.name}."
    return obs, facts


# --- milestone predicates ---


def predicate_holds(state: WorldState, pred: dict) -> bool:
    kind = pred["kind"]
    if kind == "agent_at":
        return state.agent_location == pred["place"]
    if kind == "holding":
        return state.objects[pred["obj"]].location == INVENTORY
    if kind == "located":
        return state.objects[pred["obj"]].location == pred["place"]
    if kind == "is_open":
        return state.objects[pred["obj"]].is_open
    if kind == "active":
        return state.objects[pred["obj"]].is_active
    if kind == "temp_gte":
        temp = state.objects[pred["obj"]].temperature
        return temp is not None and temp >= pred["value"]
    if kind == "focused":
        return pred["obj"] in state.focused
    if kind == "was_read":
        return pred["obj"] in state.read_objects
    raise ValueError(f"unknown predicate kind: {kind!r}")
