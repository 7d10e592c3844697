"""Peak-memory accounting.

The accountant separates buffers into three categories using the transform
manifest: weight state (W), auxiliary/optimizer state (V) and everything else
(P: activations, gradients and transients, plus non-state inputs). P is
measured with a live-range analysis over the linearized computation; state is
charged by residency:

  * full residency:            state contributes its full physical bytes;
  * sharded, gathered in body: weights still contribute full bytes (the shard
    aliases into the gathered buffer, like a slice fused into its consumer);
  * sharded, never gathered:   contributes full_bytes / shard_count.

The peak of a transformed program is max(in-body peak, W + V), the second term
being the point where the unsharding program materializes the full state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .ir import Computation, Instruction, Module, Shape, TupleShape, physical_bytes, topo_order
from .sharding import ShardingSpec, parse_spec_string


@dataclass
class VariableInfo:
    name: str  # baseline entry parameter id
    kind: str  # "weight" | "aux" | "other"
    param_index: int
    slot: int | None = None  # loop state tuple index (None when no loop)
    output_index: int | None = None  # position in the program root tuple
    residency: str = "full"  # "full" | "sharded"
    spec: ShardingSpec | None = None
    gathered_in_body: bool = False
    placements: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "param_index": self.param_index,
            "slot": self.slot,
            "output_index": self.output_index,
            "residency": self.residency,
            "spec": str(self.spec) if self.spec else None,
            "shard_count": self.spec.shard_count if self.spec else 1,
            "gathered_in_body": self.gathered_in_body,
            "placements": list(self.placements),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableInfo":
        return cls(
            name=d["name"],
            kind=d["kind"],
            param_index=d["param_index"],
            slot=d.get("slot"),
            output_index=d.get("output_index"),
            residency=d.get("residency", "full"),
            spec=parse_spec_string(d["spec"]) if d.get("spec") else None,
            gathered_in_body=bool(d.get("gathered_in_body", False)),
            placements=tuple(d.get("placements", ())),
        )


@dataclass
class Manifest:
    variables: list[VariableInfo] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def by_slot(self) -> dict[int, VariableInfo]:
        return {v.slot: v for v in self.variables if v.slot is not None}

    def to_json(self) -> str:
        return json.dumps(
            {"variables": [v.to_dict() for v in self.variables], "notes": self.notes},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        return cls(
            variables=[VariableInfo.from_dict(v) for v in d.get("variables", [])],
            notes=d.get("notes", {}),
        )


@dataclass
class MemoryReport:
    weight_bytes: int  # W: full weight state
    aux_bytes: int  # V: full auxiliary state
    other_peak: int  # P: live-range peak of non-state buffers
    body_bytes: float  # in-body charge: W' + V' + P by residency
    boundary_bytes: int  # full state materialization outside the loop
    peak_bytes: float

    def to_dict(self) -> dict:
        return {
            "weight_bytes": self.weight_bytes,
            "aux_bytes": self.aux_bytes,
            "other_peak": self.other_peak,
            "body_bytes": self.body_bytes,
            "boundary_bytes": self.boundary_bytes,
            "peak_bytes": self.peak_bytes,
        }


_ALIAS_OPCODES = frozenset({"tuple", "get-tuple-element", "bitcast", "replica-id"})


def _buffer_bytes(instr: Instruction, tile) -> int:
    if instr.opcode in _ALIAS_OPCODES:
        return 0
    return physical_bytes(instr.shape, tile)


def liveness_peak(comp: Computation, exclude: set[str], tile) -> int:
    """Max over program points of live buffer bytes, for instructions not in
    `exclude`. Live range runs from definition to last use; the root stays
    live to the end."""
    order = topo_order(comp)
    index = {ins.id: i for i, ins in enumerate(order)}
    last_use = {ins.id: i for i, ins in enumerate(order)}
    for i, ins in enumerate(order):
        for op in ins.operands:
            if op.id in last_use:
                last_use[op.id] = max(last_use[op.id], i)
    last_use[comp.root.id] = len(order) - 1

    deltas = [0] * (len(order) + 1)
    for ins in order:
        if ins.id in exclude:
            continue
        b = _buffer_bytes(ins, tile)
        if b == 0:
            continue
        deltas[index[ins.id]] += b
        deltas[last_use[ins.id] + 1] -= b
    peak = 0
    live = 0
    for d in deltas[:-1]:
        live += d
        peak = max(peak, live)
    return peak


def _state_image_ids(comp: Computation, manifest: Manifest) -> set[str]:
    """Instructions whose buffers are charged through the W/V state model:
    the state parameter, slot projections, state-root elements, and the
    shard/gather fusions of state variables."""
    slots = manifest.by_slot()
    state_ids: set[str] = set()
    params = comp.parameters
    if len(params) == 1 and isinstance(params[0].shape, TupleShape):
        state_param = params[0]
        state_ids.add(state_param.id)
        tracked: set[str] = set()
        for ins in comp.instructions:
            if (
                ins.opcode == "get-tuple-element"
                and ins.operands
                and ins.operands[0] is state_param
                and ins.index in slots
            ):
                state_ids.add(ins.id)
                tracked.add(ins.id)
        for ins in comp.instructions:
            if ins.opcode == "fusion" and ins.kind in ("shard", "unshard", "all_gather"):
                if any(op.id in tracked or op.id in state_ids for op in ins.operands):
                    state_ids.add(ins.id)
        if comp.root.opcode == "tuple":
            state_ids.add(comp.root.id)
            for idx, op in enumerate(comp.root.operands):
                if idx in slots and slots[idx].kind in ("weight", "aux"):
                    state_ids.add(op.id)
    else:
        by_name = {v.name: v for v in manifest.variables}
        for p in params:
            if p.id in by_name and by_name[p.id].kind in ("weight", "aux"):
                state_ids.add(p.id)
        for ins in comp.instructions:
            if ins.opcode == "fusion" and ins.kind in ("shard", "unshard", "all_gather"):
                if any(op.id in state_ids for op in ins.operands):
                    state_ids.add(ins.id)
        if comp.root.opcode == "tuple":
            state_ids.add(comp.root.id)
            for idx, op in enumerate(comp.root.operands):
                for v in manifest.variables:
                    if v.output_index == idx and v.kind in ("weight", "aux"):
                        state_ids.add(op.id)
    return state_ids


def memory_plan(
    comp: Computation,
    manifest: Manifest,
    full_shapes: dict[str, Shape],
    tile=(8, 128),
) -> MemoryReport:
    """Accountant for one step computation (the loop body, or the entry when
    there is no loop). `full_shapes` maps variable names to their full
    (unsharded) shapes."""
    weight_full = aux_full = 0
    body_state = 0.0
    any_sharded = False
    for v in manifest.variables:
        if v.kind not in ("weight", "aux"):
            continue
        b = physical_bytes(full_shapes[v.name], tile)
        if v.kind == "weight":
            weight_full += b
        else:
            aux_full += b
        if v.residency == "sharded":
            any_sharded = True
            if v.gathered_in_body:
                body_state += b
            else:
                body_state += b / (v.spec.shard_count if v.spec else 1)
        else:
            body_state += b

    exclude = _state_image_ids(comp, manifest)
    p = liveness_peak(comp, exclude, tile)
    body = body_state + p
    boundary = weight_full + aux_full
    peak = max(body, boundary) if any_sharded else body
    return MemoryReport(
        weight_bytes=weight_full,
        aux_bytes=aux_full,
        other_peak=p,
        body_bytes=body,
        boundary_bytes=boundary,
        peak_bytes=peak,
    )


def step_computation(m: Module) -> Computation:
    """The computation whose per-step footprint matters: the body of the
    training loop when one exists, otherwise the entry."""
    for ins in m.entry.instructions:
        if ins.opcode == "while":
            return ins.body
    return m.entry
