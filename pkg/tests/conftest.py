import numpy as np
import pytest

from shardgraph import profitability, transform
from shardgraph.ir import Module, Shape, TupleShape
from shardgraph.simulator import PerReplica, run


def bitwise_same(a, b) -> bool:
    """Strict equality: same dtype, shape and bytes (NaNs compare equal to
    themselves bit-for-bit)."""
    if isinstance(a, tuple) or isinstance(b, tuple):
        return (
            isinstance(a, tuple)
            and isinstance(b, tuple)
            and len(a) == len(b)
            and all(bitwise_same(x, y) for x, y in zip(a, b))
        )
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def chain_inputs(module: Module, outputs_per_replica) -> dict:
    params = module.entry.parameters
    return {
        p.id: PerReplica([out[idx] for out in outputs_per_replica])
        for idx, p in enumerate(params)
    }


def training_inputs(m: Module, seed: int) -> dict:
    """Deterministic inputs for generated training modules: per-replica batch
    for x, shared draws elsewhere, non-negative second moments."""
    rng = np.random.default_rng(seed)
    inputs = {}
    for p in m.entry.parameters:
        if isinstance(p.shape, TupleShape):
            raise AssertionError("generated modules have array parameters")
        if p.shape.etype.value == "s32":
            inputs[p.id] = np.zeros(p.shape.dims, dtype=np.int32)
        elif p.id == "x":
            inputs[p.id] = PerReplica(
                [
                    rng.normal(0, 1, size=p.shape.dims).astype(np.float32)
                    for _ in range(m.replica_count)
                ]
            )
        elif p.id.startswith("v"):
            inputs[p.id] = np.abs(rng.normal(0, 0.01, size=p.shape.dims)).astype(np.float32)
        else:
            inputs[p.id] = rng.normal(0, 0.5, size=p.shape.dims).astype(np.float32)
    return inputs


def run_pipeline(m: Module, steps, seed, force=True, demote=False, batch=False):
    """Baseline vs shard/main/unshard composition; returns (baseline outputs,
    composed outputs, transform result, main run result).

    Forced decisions pin full-group sharding so the transformed collectives
    use the same rings as the baseline all-reduce and results stay bitwise
    identical; group-local sharding re-associates reductions and is checked
    under tolerance elsewhere."""
    from shardgraph.ir import ALL_REPLICAS, Shape
    from shardgraph.sharding import choose_spec

    decisions = profitability.plan(m, steps=steps)
    if force:
        for d in decisions:
            d.shard = True
            if not d.groups.is_all:
                d.groups = ALL_REPLICAS
                d.spec = choose_spec(
                    Shape(d.cluster.dims, d.cluster.etype), m.replica_count, m.tile
                )
    result = transform.apply(m, decisions, steps_hint=steps)
    main = result.main
    if demote:
        main = transform.demote_allgather_precision(main)
    if batch:
        main = transform.batch_collectives(main)
    inputs = training_inputs(m, seed)
    loop = any(i.opcode == "while" for i in m.entry.instructions)
    k = 1 if loop else steps
    base_outs = _chained(m, inputs, seed, k)
    sh = run(result.shard_program, inputs, seed=seed)
    main_outs = _chained(main, chain_inputs(main, sh.outputs), seed, k)
    fin = run(result.unshard_program, chain_inputs(result.unshard_program, main_outs), seed=seed)
    return base_outs, fin.outputs, result, main


def _chained(m, inputs, seed, k):
    outs = None
    for _ in range(k):
        if outs is not None:
            inputs = chain_inputs(m, outs)
        outs = run(m, inputs, seed=seed).outputs
    return outs


def outputs_bitwise_equal(a, b) -> bool:
    return all(bitwise_same(x, y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))
