import pytest

from shardgraph.ir import (
    ALL_REPLICAS,
    Computation,
    F32,
    GraphBuilder,
    Module,
    PRED,
    ReplicaGroups,
    S32,
    Shape,
    TupleShape,
    ring_topology,
    scalar,
)
from shardgraph.generators import gen_module
from shardgraph.verify import verify


def module_of(comp, n=2):
    return Module(comp, replica_count=n, topology=ring_topology(n))


def rules(diags):
    return {d.rule for d in diags}


def test_generated_modules_verify_clean():
    for kw in (dict(steps=3), dict(steps=0), dict(steps=4, outfeed_every=2)):
        m = gen_module("mlp", replicas=4, layers=2, dim=8, **kw)
        assert verify(m) == []


def test_while_body_shape_mismatch():
    body = GraphBuilder("body")
    bp = body.parameter(0, Shape((4,), F32), "bp")
    grow = body.emit("broadcast", Shape((8,), F32), (body.emit("reduce", scalar(F32), (bp, body.constant(0.0)), dims=(0,), kind="add"),), dims=())
    body_c = body.finish(grow)

    cond = GraphBuilder("cond")
    cp = cond.parameter(0, Shape((4,), F32), "cp")
    t = cond.emit("constant", scalar(PRED), value=(0.0,), id="f")
    cond_c = cond.finish(t)

    gb = GraphBuilder("main")
    init = gb.parameter(0, Shape((4,), F32), "init")
    w = gb.emit("while", Shape((4,), F32), (init,), cond=cond_c, body=body_c)
    m = module_of(gb.finish(w))
    assert "while body shape mismatch" in rules(verify(m))


def test_conditional_branch_result_mismatch():
    t = GraphBuilder("tb")
    tp = t.parameter(0, Shape((4,), F32), "tp")
    t_c = t.finish(tp)
    f = GraphBuilder("fb")
    fp = f.parameter(0, Shape((4,), F32), "fp")
    fgrown = f.emit("reshape", Shape((2, 2), F32), (fp,))
    f_c = f.finish(fgrown)

    gb = GraphBuilder("main")
    pred = gb.constant(True, PRED, id="pred")
    arg = gb.parameter(0, Shape((4,), F32), "arg")
    c = gb.emit("conditional", Shape((4,), F32), (pred, arg, arg), branches=(t_c, f_c))
    m = module_of(gb.finish(c))
    assert "conditional result shapes" in rules(verify(m))


def test_all_reduce_groups_must_partition():
    gb = GraphBuilder("main")
    g = gb.parameter(0, Shape((4,), F32), "g")
    ar = gb.emit(
        "all-reduce", Shape((4,), F32), (g,), kind="add",
        groups=ReplicaGroups(((0, 1), (1, 2))),
    )
    m = module_of(gb.finish(ar), n=4)
    diags = verify(m)
    assert "replica groups" in rules(diags)
    assert any("not disjoint" in d.message for d in diags)


def test_all_reduce_unequal_groups():
    gb = GraphBuilder("main")
    g = gb.parameter(0, Shape((4,), F32), "g")
    ar = gb.emit(
        "all-reduce", Shape((4,), F32), (g,), kind="add",
        groups=ReplicaGroups(((0,), (1, 2, 3))),
    )
    m = module_of(gb.finish(ar), n=4)
    assert any("equal-sized" in d.message for d in verify(m))


def test_bitcast_must_preserve_physical_bytes():
    gb = GraphBuilder("main")
    x = gb.parameter(0, Shape((16, 128), F32), "x")
    bad = gb.emit("bitcast", Shape((4, 128), F32), (x,))
    m = module_of(gb.finish(bad))
    assert "bitcast bytes" in rules(verify(m))
    # rounding up inside one tile is physical-bytes preserving, hence legal
    ok = GraphBuilder("main2")
    y = ok.parameter(0, Shape((8, 128), F32), "y")
    ok.emit("bitcast", Shape((4, 128), F32), (y,), id="cast")
    m2 = module_of(Computation("main2", ok.instructions, ok.instructions[-1]))
    assert verify(m2) == []


def test_reshape_must_preserve_elements():
    gb = GraphBuilder("main")
    x = gb.parameter(0, Shape((4, 4), F32), "x")
    bad = gb.emit("reshape", Shape((4, 5), F32), (x,))
    m = module_of(gb.finish(bad))
    assert "reshape elements" in rules(verify(m))


def test_dot_shape_rule():
    gb = GraphBuilder("main")
    a = gb.parameter(0, Shape((2, 3), F32), "a")
    b = gb.parameter(1, Shape((4, 5), F32), "b")
    bad = gb.emit("dot", Shape((2, 5), F32), (a, b))
    m = module_of(gb.finish(bad))
    assert "dot contraction" in rules(verify(m))


def test_reduce_result_shape():
    gb = GraphBuilder("main")
    x = gb.parameter(0, Shape((2, 3), F32), "x")
    init = gb.constant(0.0)
    bad = gb.emit("reduce", Shape((2,), F32), (x, init), dims=(0,), kind="add")
    m = module_of(gb.finish(bad))
    assert any(d.rule == "result shape" for d in verify(m))


def test_def_before_use():
    a = GraphBuilder("x")
    p = a.parameter(0, Shape((2,), F32), "p")
    sq = a.emit("sqrt", Shape((2,), F32), (p,), id="sq")
    comp = Computation("main", [sq, p], sq)  # out of order
    m = module_of(comp)
    assert "def before use" in rules(verify(m))


def test_duplicate_ids_across_computations():
    t = GraphBuilder("tb")
    tp = t.parameter(0, scalar(F32), "dup")
    t_c = t.finish(tp)
    f = GraphBuilder("fb")
    fp = f.parameter(0, scalar(F32), "dup")
    f_c = f.finish(fp)
    gb = GraphBuilder("main")
    pred = gb.constant(True, PRED, id="p")
    arg = gb.parameter(0, scalar(F32), "arg")
    c = gb.emit("conditional", scalar(F32), (pred, arg, arg), branches=(t_c, f_c))
    m = module_of(gb.finish(c))
    assert "unique ids" in rules(verify(m))


def test_parameter_index_gap():
    gb = GraphBuilder("main")
    p = gb.parameter(1, scalar(F32), "p")  # index 1 with no index 0
    m = module_of(gb.finish(p))
    assert any(d.rule == "parameter indices" for d in verify(m))


def test_select_pred_shape():
    gb = GraphBuilder("main")
    p = gb.parameter(0, Shape((4,), PRED), "p")
    a = gb.parameter(1, Shape((5,), F32), "a")
    b = gb.parameter(2, Shape((5,), F32), "b")
    bad = gb.emit("select", Shape((5,), F32), (p, a, b))
    m = module_of(gb.finish(bad))
    assert "select shapes" in rules(verify(m))
