"""Synthetic training-step module generators.

Each model is a deterministic single-step graph: a forward chain of matrix
multiplies over a per-replica batch, a weight-shaped gradient per layer
(replica-local noise modulated by the layer's activations), an all-reduce per
gradient, and an optimizer update (SGD, two-moment ADAM, or a LARS-style
trust-ratio update). With `steps` set, the step is wrapped in a counted
training loop carrying (i, x, weights, auxiliaries); `outfeed_every` adds an
every-k conditional that outfeeds the full state from inside the loop.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir import (
    ALL_REPLICAS,
    ElementType,
    F16R,
    F32,
    GraphBuilder,
    Instruction,
    Module,
    S32,
    Shape,
    Topology,
    TupleShape,
    mesh_topology,
    ring_topology,
    scalar,
)

MODELS = ("mlp", "transformer-like", "resnet-like", "ncf-like")


@dataclass
class WeightDef:
    dims: tuple[int, ...]  # 2-D, or 4-D used through a reshape
    in_dim: int
    out_dim: int


@dataclass
class GenConfig:
    name: str
    weights: list[WeightDef]
    batch: int
    optimizer: str  # "sgd" | "adam" | "lars"
    replicas: int
    topology: Topology
    steps: int | None  # None: single-step module without a loop
    outfeed_every: int | None = None
    mixed_precision: bool = False


def _chain(dims: list[int], fourd: dict[int, tuple[int, ...]] | None = None) -> list[WeightDef]:
    out = []
    for i in range(len(dims) - 1):
        w4 = (fourd or {}).get(i)
        if w4 is not None:
            assert _prod(w4[:-1]) == dims[i] and w4[-1] == dims[i + 1]
            out.append(WeightDef(w4, dims[i], dims[i + 1]))
        else:
            out.append(WeightDef((dims[i], dims[i + 1]), dims[i], dims[i + 1]))
    return out


def _prod(xs):
    n = 1
    for x in xs:
        n *= x
    return n


def preset(model: str, layers: int | None = None, dim: int | None = None) -> GenConfig:
    if model == "mlp":
        layers = layers or 2
        dim = dim or 64
        return GenConfig(
            name="mlp",
            weights=_chain([dim] * (layers + 1)),
            batch=8,
            optimizer="adam",
            replicas=8,
            topology=ring_topology(8),
            steps=1000,
        )
    if model == "transformer-like":
        pairs = (layers or 4) // 2 or 1
        dims = [1024]
        for _ in range(pairs):
            dims += [4096, 1024]
        return GenConfig(
            name="transformer-like",
            weights=_chain(dims),
            batch=1,
            optimizer="adam",
            replicas=2048,
            topology=mesh_topology(32, 64),
            steps=1000,
            mixed_precision=True,
        )
    if model == "resnet-like":
        dims = [2304, 256, 1024, 4096, 1024]
        return GenConfig(
            name="resnet-like",
            weights=_chain(dims, fourd={0: (3, 3, 256, 256)}),
            batch=16,
            optimizer="lars",
            replicas=2048,
            topology=mesh_topology(32, 64),
            steps=1000,
            mixed_precision=True,
        )
    if model == "ncf-like":
        return GenConfig(
            name="ncf-like",
            weights=_chain([8192, 64, 256, 8]),
            batch=256,
            optimizer="adam",
            replicas=32,
            topology=mesh_topology(4, 8),
            steps=1000,
        )
    raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")


def gen_module(
    model: str,
    replicas: int | None = None,
    topology: Topology | None = None,
    steps: int | None = -1,
    layers: int | None = None,
    dim: int | None = None,
    batch: int | None = None,
    optimizer: str | None = None,
    outfeed_every: int | None = None,
) -> Module:
    cfg = preset(model, layers, dim)
    if replicas is not None:
        cfg.replicas = replicas
        cfg.topology = ring_topology(replicas)
    if topology is not None:
        cfg.topology = topology
        cfg.replicas = topology.n
    if steps != -1:
        cfg.steps = steps if steps else None
    if batch is not None:
        cfg.batch = batch
    if optimizer is not None:
        cfg.optimizer = optimizer
    cfg.outfeed_every = outfeed_every
    return build_training_module(cfg)


def aux_names(optimizer: str) -> list[str]:
    return {"sgd": [], "adam": ["m", "v"], "lars": ["u"]}[optimizer]


# --------------------------------------------------------------------------- #
# Step emission
# --------------------------------------------------------------------------- #


def _emit_step(gb: GraphBuilder, cfg: GenConfig, vals: dict[str, Instruction]) -> dict[str, Instruction]:
    """Forward chain, gradients, all-reduces and the optimizer update.

    `vals` provides the current value of 'i', 'x' and every weight/auxiliary;
    the returned dict holds the updated state values under the same names.
    """

    def c(v, etype=F32):
        return gb.constant(v, etype)

    def bcast(s: Instruction, shape: Shape) -> Instruction:
        return gb.broadcast_scalar(s, shape)

    x = vals["x"]
    h = x
    acts: list[Instruction] = []
    for li, w in enumerate(cfg.weights):
        wv = vals[f"w{li}"]
        w2d = wv
        if len(w.dims) != 2:
            w2d = gb.emit(
                "reshape", Shape((w.in_dim, w.out_dim), F32), (wv,), id=f"w{li}.2d"
            )
        lhs, rhs = h, w2d
        if cfg.mixed_precision:
            lhs = gb.emit("convert", Shape(h.shape.dims, F16R), (h,), id=f"h{li}.q")
            rhs = gb.emit("convert", Shape(w2d.shape.dims, F16R), (w2d,), id=f"w{li}.q")
        hm = gb.emit(
            "dot", Shape((cfg.batch, w.out_dim), F32), (lhs, rhs), id=f"h{li}.dot"
        )
        zb = bcast(c(0.0), hm.shape)
        h = gb.emit("max", hm.shape, (hm, zb), id=f"h{li}")
        acts.append(h)

    out: dict[str, Instruction] = {"x": x}
    for li, w in enumerate(cfg.weights):
        wshape = Shape(w.dims, F32)
        hred = gb.emit(
            "reduce",
            Shape((w.out_dim,), F32),
            (acts[li], c(0.0)),
            dims=(0,),
            kind="add",
            id=f"hsum{li}",
        )
        mod = gb.emit(
            "broadcast", wshape, (hred,), dims=(len(w.dims) - 1,), id=f"hmod{li}"
        )
        noise = gb.emit("rng", wshape, id=f"noise{li}")
        g = gb.emit("mul", wshape, (noise, mod), id=f"g{li}")
        ar = gb.emit(
            "all-reduce", wshape, (g,), id=f"ar{li}", kind="add", groups=ALL_REPLICAS
        )
        wv = vals[f"w{li}"]
        if cfg.optimizer == "sgd":
            lr = bcast(c(0.01), wshape)
            out[f"w{li}"] = gb.emit(
                "sub", wshape, (wv, gb.emit("mul", wshape, (lr, ar))), id=f"w{li}.new"
            )
        elif cfg.optimizer == "adam":
            out.update(_adam_update(gb, cfg, li, wshape, wv, ar, vals))
        else:
            out.update(_lars_update(gb, cfg, li, wshape, wv, g, ar, vals))
    return out


def _adam_update(gb, cfg, li, wshape, wv, grad, vals) -> dict[str, Instruction]:
    def c(v):
        return gb.constant(v, F32)

    def b(s):
        return gb.broadcast_scalar(s, wshape)

    m, v = vals[f"m{li}"], vals[f"v{li}"]
    i_plus = gb.emit("add", scalar(S32), (vals["i"], gb.constant(1, S32)))
    t = gb.emit("convert", scalar(F32), (i_plus,))
    b1, b2 = c(0.9), c(0.999)
    m_new = gb.emit(
        "add",
        wshape,
        (
            gb.emit("mul", wshape, (b(b1), m)),
            gb.emit("mul", wshape, (b(c(0.1)), grad)),
        ),
        id=f"m{li}.new",
    )
    gsq = gb.emit("mul", wshape, (grad, grad))
    v_new = gb.emit(
        "add",
        wshape,
        (
            gb.emit("mul", wshape, (b(b2), v)),
            gb.emit("mul", wshape, (b(c(0.001)), gsq)),
        ),
        id=f"v{li}.new",
    )
    corr1 = gb.emit("sub", scalar(F32), (c(1.0), gb.emit("power", scalar(F32), (b1, t))))
    corr2 = gb.emit("sub", scalar(F32), (c(1.0), gb.emit("power", scalar(F32), (b2, t))))
    mhat = gb.emit("div", wshape, (m_new, b(corr1)))
    vhat = gb.emit("div", wshape, (v_new, b(corr2)))
    den = gb.emit("add", wshape, (gb.emit("sqrt", wshape, (vhat,)), b(c(1e-8))))
    step = gb.emit("mul", wshape, (b(c(0.001)), gb.emit("div", wshape, (mhat, den))))
    w_new = gb.emit("sub", wshape, (wv, step), id=f"w{li}.new")
    return {f"w{li}": w_new, f"m{li}": m_new, f"v{li}": v_new}


def _lars_update(gb, cfg, li, wshape, wv, local_grad, grad, vals) -> dict[str, Instruction]:
    """Trust-ratio update. The weight norm reads the full weight (shared with
    the forward pass); the gradient magnitude uses a replica-local sum of
    squares combined by a scalar all-reduce, keeping the scalar identical on
    all replicas without gathering the full gradient."""

    def c(v):
        return gb.constant(v, F32)

    def b(s):
        return gb.broadcast_scalar(s, wshape)

    u = vals[f"u{li}"]
    wsq = gb.emit("mul", wshape, (wv, wv))
    wn = gb.emit(
        "sqrt",
        scalar(F32),
        (
            gb.emit(
                "reduce",
                scalar(F32),
                (wsq, c(0.0)),
                dims=tuple(range(len(wshape.dims))),
                kind="add",
                id=f"wnorm{li}.sum",
            ),
        ),
    )
    gsq = gb.emit("mul", wshape, (local_grad, local_grad))
    gsum = gb.emit(
        "reduce",
        scalar(F32),
        (gsq, c(0.0)),
        dims=tuple(range(len(wshape.dims))),
        kind="add",
    )
    gsum_all = gb.emit(
        "all-reduce", scalar(F32), (gsum,), id=f"gnorm{li}.ar", kind="add", groups=ALL_REPLICAS
    )
    gn = gb.emit("sqrt", scalar(F32), (gsum_all,))
    trust = gb.emit("div", scalar(F32), (wn, gb.emit("add", scalar(F32), (gn, c(1e-6)))))
    lr_eff = gb.emit("mul", scalar(F32), (c(0.02), trust))
    u_new = gb.emit(
        "add",
        wshape,
        (
            gb.emit("mul", wshape, (b(c(0.9)), u)),
            gb.emit("mul", wshape, (b(lr_eff), grad)),
        ),
        id=f"u{li}.new",
    )
    w_new = gb.emit("sub", wshape, (wv, u_new), id=f"w{li}.new")
    return {f"w{li}": w_new, f"u{li}": u_new}


# --------------------------------------------------------------------------- #
# Module assembly
# --------------------------------------------------------------------------- #


def _state_names(cfg: GenConfig) -> list[str]:
    names = ["i", "x"]
    for li in range(len(cfg.weights)):
        names.append(f"w{li}")
        for a in aux_names(cfg.optimizer):
            names.append(f"{a}{li}")
    return names


def state_shapes(cfg: GenConfig) -> dict[str, Shape]:
    shapes = {"i": scalar(S32), "x": Shape((cfg.batch, cfg.weights[0].in_dim), F32)}
    for li, w in enumerate(cfg.weights):
        shapes[f"w{li}"] = Shape(w.dims, F32)
        for a in aux_names(cfg.optimizer):
            shapes[f"{a}{li}"] = Shape(w.dims, F32)
    return shapes


def _emit_outfeed_conditional(gb: GraphBuilder, cfg: GenConfig, i_val, new_vals):
    k = cfg.outfeed_every
    kc = gb.constant(k, S32)
    q = gb.emit("div", scalar(S32), (i_val, kc))
    r = gb.emit("sub", scalar(S32), (i_val, gb.emit("mul", scalar(S32), (q, kc))))
    p = gb.emit(
        "compare",
        Shape((), ElementType.PRED),
        (r, gb.constant(0, S32)),
        direction="eq",
        id="snap.pred",
    )
    names = [n for n in _state_names(cfg) if n not in ("i", "x")]
    elems = [new_vals[n] for n in names]
    arg = gb.emit(
        "tuple", TupleShape(tuple(e.shape for e in elems)), tuple(elems), id="snap.state"
    )

    tb = GraphBuilder("snapshot_true", id_prefix="snap.t.")
    tp = tb.parameter(0, arg.shape, "snap.arg")
    for idx in range(len(elems)):
        g = tb.emit("get-tuple-element", arg.shape.elements[idx], (tp,), index=idx)
        tb.emit("outfeed", TupleShape(()), (g,), id=f"snap.out{idx}")
    t_root = tb.emit("tuple", TupleShape(()), (), id="snap.t.root")
    true_comp = tb.finish(t_root)

    fb = GraphBuilder("snapshot_false", id_prefix="snap.f.")
    fb.parameter(0, arg.shape, "snap.skip")
    f_root = fb.emit("tuple", TupleShape(()), (), id="snap.f.root")
    false_comp = fb.finish(f_root)

    gb.emit(
        "conditional",
        TupleShape(()),
        (p, arg, arg),
        id="snap",
        branches=(true_comp, false_comp),
    )


def build_training_module(cfg: GenConfig) -> Module:
    names = _state_names(cfg)
    shapes = state_shapes(cfg)

    if cfg.steps is None:
        gb = GraphBuilder("main")
        vals: dict[str, Instruction] = {}
        for idx, n in enumerate(names):
            vals[n] = gb.parameter(idx, shapes[n], n, replica_equal=(n != "x"))
        new_vals = _emit_step(gb, cfg, vals)
        new_vals["i"] = gb.emit("add", scalar(S32), (vals["i"], gb.constant(1, S32)), id="i.new")
        outs = [new_vals.get(n, vals[n]) for n in names]
        root = gb.emit(
            "tuple", TupleShape(tuple(o.shape for o in outs)), tuple(outs), id="state.out"
        )
        entry = gb.finish(root)
        return Module(entry, cfg.replicas, cfg.topology)

    state_shape = TupleShape(tuple(shapes[n] for n in names))

    body = GraphBuilder("train_body")
    bp = body.parameter(0, state_shape, "bstate")
    bvals = {
        n: body.emit("get-tuple-element", shapes[n], (bp,), index=idx, id=f"b.{n}")
        for idx, n in enumerate(names)
    }
    new_vals = _emit_step(body, cfg, bvals)
    if cfg.outfeed_every:
        _emit_outfeed_conditional(body, cfg, bvals["i"], new_vals)
    new_vals["i"] = body.emit(
        "add", scalar(S32), (bvals["i"], body.constant(1, S32)), id="i.new"
    )
    outs = [new_vals.get(n, bvals[n]) for n in names]
    b_root = body.emit("tuple", state_shape, tuple(outs), id="state.next")
    body_comp = body.finish(b_root)

    cond = GraphBuilder("train_cond")
    cp = cond.parameter(0, state_shape, "cstate")
    ci = cond.emit("get-tuple-element", scalar(S32), (cp,), index=0, id="c.i")
    bound = cond.constant(cfg.steps, S32, id="c.bound")
    c_root = cond.emit(
        "compare", Shape((), ElementType.PRED), (ci, bound), direction="lt", id="c.continue"
    )
    cond_comp = cond.finish(c_root)

    gb = GraphBuilder("main")
    params: dict[str, Instruction] = {}
    pidx = 0
    for n in names:
        if n == "i":
            continue
        params[n] = gb.parameter(pidx, shapes[n], n, replica_equal=(n != "x"))
        pidx += 1
    init_elems = [
        gb.constant(0, S32, id="i0") if n == "i" else params[n] for n in names
    ]
    init = gb.emit("tuple", state_shape, tuple(init_elems), id="state.init")
    loop = gb.emit("while", state_shape, (init,), id="train", cond=cond_comp, body=body_comp)
    entry = gb.finish(loop)
    return Module(entry, cfg.replicas, cfg.topology)
