"""Test oracles kept independent of the optimised code paths."""

from dataclasses import replace as _replace

import numpy as np

from deepobf import ops
from deepobf.graph import BlockSpec, LayerSpec, ModelGraph, init_block_params
from deepobf.tensor import Tensor
from deepobf.zoo import classifier_block


def naive_conv2d(x, w, b, stride, pad):
    """Direct six-loop cross-correlation in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                    out[bi, o, i, j] = acc
    return out


def window_conv2d(x, w, b, stride, pad):
    """Vectorised direct cross-correlation via sliding windows, float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = np.asarray(w, np.float64)
    win = np.lib.stride_tricks.sliding_window_view(x, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w)
    return out if b is None else out + np.asarray(b, np.float64)[None, :, None, None]


def numeric_grad(f, arrays, idx, h=1e-3):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[idx]``."""
    a = arrays[idx]
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = a[k]
        a[k] = old + h
        fp = f(*arrays)
        a[k] = old - h
        fm = f(*arrays)
        a[k] = old
        g[k] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(op, arrays, rng, h=1e-3):
    """Compare analytic and numeric gradients of ``sum(op(*tensors) * R)`` for every input.

    Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = op(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(out.shape)

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * weights))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    y = op(*ts)
    y.backward(weights)
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(ana, num))
    return worst


def away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def distinct_values(rng, shape, gap=0.02):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape) + rng.uniform(0, gap / 10, size=shape)


# --- random blocks --------------------------------------------------------------------------------




def _shrink_chain(rng, shrink):
    """Odd kernels whose (k - 1) values sum to ``shrink``."""
    if shrink == 0:
        return [1]
    if shrink >= 4 and rng.random() < 0.5:
        return [3, shrink - 1]
    return [shrink + 1]


def random_linear_block(rng, name="blk"):
    """conv/concat/add block, depth <= 3 stages, <= 3 branches, <= 8 channels.

    Only convs reading the block input pad; later convs are unpadded, so the
    block has an exact single-conv equivalent.
    Returns (block, params, input_shape).
    """
    cin = int(rng.integers(1, 9))
    size = int(rng.integers(10, 17))
    nodes, prev, c, n = [], "in", cin, 0
    spatial = size
    for stage in range(int(rng.integers(1, 4))):
        entry = prev == "in"
        nb = int(rng.integers(1, 4))
        shrink = 0 if entry else int(rng.choice([0, 2, 4]))
        shrink = min(shrink, spatial - 2)
        shrink -= shrink % 2
        merge = rng.choice(["concat", "add"]) if nb > 1 else None
        add_ch = int(rng.integers(1, 9))
        exits = []
        for _ in range(nb):
            ks = _shrink_chain(rng, shrink) if not entry else [int(rng.choice([1, 3, 5]))] * int(rng.integers(1, 3))
            pad_first = sum(k - 1 for k in ks) // 2 if entry else 0
            src, ch = prev, c
            for j, k in enumerate(ks):
                out = add_ch if (merge == "add" and j == len(ks) - 1) else int(rng.integers(1, 9))
                nid = f"{name}.n{n}"
                n += 1
                nodes.append(LayerSpec(nid, "conv", (src,), ch, out, kernel=k, padding=pad_first if j == 0 else 0))
                src, ch = nid, out
            exits.append((src, ch))
        if merge:
            nid = f"{name}.n{n}"
            n += 1
            nodes.append(LayerSpec(nid, merge, tuple(e for e, _ in exits)))
            prev, c = nid, (sum(ch for _, ch in exits) if merge == "concat" else add_ch)
        else:
            prev, c = exits[0]
        spatial -= shrink
        if c > 8:
            # keep channels bounded with a 1x1 squeeze
            nid = f"{name}.n{n}"
            n += 1
            nodes.append(LayerSpec(nid, "conv", (prev,), c, int(rng.integers(1, 9)), kernel=1))
            prev, c = nid, nodes[-1].out_channels
        if not entry and rng.random() < 0.3 and spatial >= 4:
            nid = f"{name}.n{n}"
            n += 1
            nodes.append(LayerSpec(nid, "conv", (prev,), c, int(rng.integers(1, 9)), kernel=1, stride=2))
            prev, c = nid, nodes[-1].out_channels
            spatial = (spatial - 1) // 2 + 1
    block = BlockSpec(name, tuple(nodes))
    params = {}
    for nd in block.nodes:
        if nd.kind == "conv":
            params[nd.id] = {
                "weight": rng.standard_normal((nd.out_channels, nd.in_channels, nd.kernel, nd.kernel)) * 0.5,
                "bias": rng.standard_normal(nd.out_channels),
            }
    return block, params, (cin, size, size)


def random_kernel_block(rng, name="blk"):
    """Sequential kernel ops and same-padded parallel branches, with BN/ReLU sprinkled in."""
    cin = int(rng.integers(1, 4))
    nodes, prev, c, n = [], "in", cin, 0

    def add(kind, inputs, **kw):
        nonlocal n
        nid = f"{name}.n{n}"
        n += 1
        nodes.append(LayerSpec(nid, kind, tuple(inputs), **kw))
        return nid

    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.6:
            kind = str(rng.choice(["conv", "maxpool", "avgpool"]))
            k = int(rng.choice([1, 2, 3, 5]))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, k // 2 + 1))
            if kind == "conv":
                out = int(rng.integers(1, 5))
                prev = add("conv", [prev], in_channels=c, out_channels=out, kernel=k, stride=s, padding=p)
                c = out
            else:
                prev = add(kind, [prev], kernel=k, stride=s, padding=p)
        else:
            merge = str(rng.choice(["concat", "add"]))
            out = int(rng.integers(1, 5))
            exits = []
            for _ in range(int(rng.integers(2, 4))):
                k = int(rng.choice([1, 3, 5]))
                ch = out if merge == "add" else int(rng.integers(1, 5))
                e = add("conv", [prev], in_channels=c, out_channels=ch, kernel=k, padding=k // 2)
                if rng.random() < 0.5:
                    e = add("batchnorm", [e], in_channels=ch)
                exits.append((e, ch))
            prev = add(merge, [e for e, _ in exits])
            c = sum(ch for _, ch in exits) if merge == "concat" else out
        if rng.random() < 0.3:
            prev = add("relu", [prev])
    return BlockSpec(name, tuple(nodes)), cin


def impulse_footprint(block, in_channels, size=48):
    """Bounding box (rows, cols, first row) of input pixels with non-zero gradient for the centre output pixel.

    Max-pools become average pools and all weights are positive so nothing
    cancels and every ReLU passes gradient.
    """
    oracle = BlockSpec(block.name, tuple(_replace(n, kind="avgpool") if n.kind == "maxpool" else n for n in block.nodes))
    rng = np.random.default_rng(0)
    params = init_block_params(oracle, rng)
    for v in params.values():
        for k in v:
            v[k] = np.abs(v[k]) + 0.1 if k != "running_mean" else np.zeros_like(v[k])
    probe = ModelGraph([oracle, classifier_block(_out_ch(oracle, in_channels), 1, "probe")],
                       params | init_block_params(classifier_block(_out_ch(oracle, in_channels), 1, "probe"), rng),
                       (in_channels, size, size), 1)
    x = Tensor(np.ones((1, in_channels, size, size)), requires_grad=True)
    y = probe.run(x, until=block.name).output
    _, _, oh, ow = y.shape
    i, j = oh // 2, ow // 2
    seed = np.zeros(y.shape)
    seed[0, :, i, j] = 1.0
    y.backward(seed)
    hit = np.abs(x.grad[0]).sum(axis=0) > 0
    rows, cols = np.nonzero(hit.any(axis=1))[0], np.nonzero(hit.any(axis=0))[0]
    touches = rows[0] == 0 or cols[0] == 0 or rows[-1] == size - 1 or cols[-1] == size - 1
    return rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1, int(rows[0]), (i, j), touches


def _out_ch(block, cin):
    from deepobf.analyzer import block_channels

    return block_channels(block, cin)[1]


def forward_linear64(block, params, x):
    """float64 evaluation of a conv/concat/add block, node by node."""
    vals = {"in": np.asarray(x, np.float64)}
    for n in block.nodes:
        ins = [vals[s] for s in n.inputs]
        if n.kind == "conv":
            p = params[n.id]
            vals[n.id] = window_conv2d(ins[0], p["weight"], p["bias"], n.stride, n.padding)
        elif n.kind == "concat":
            vals[n.id] = np.concatenate(ins, axis=1)
        elif n.kind == "add":
            vals[n.id] = sum(ins)
        else:
            raise ValueError(n.kind)
    return vals[block.exit]


def grad_cases(rng):
    """One randomly sized instance of every differentiable op: ``(name, op, arrays)``."""
    b, c, h, w = (int(v) for v in rng.integers(1, 5, size=4))
    b, h, w = max(b, 2), max(h, 2), max(w, 2)
    k, s, p = int(rng.integers(1, min(h, w) + 1)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    co = int(rng.integers(1, 5))
    x = rng.standard_normal((b, c, h, w))
    yield "conv2d", lambda t, wt, bias: ops.conv2d(t, wt, bias, s, p), [x, rng.standard_normal((co, c, k, k)),
                                                                        rng.standard_normal(co)]
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    for training in (True, False):
        yield (f"batchnorm[{'train' if training else 'eval'}]",
               lambda t, g, be, tr=training: ops.batchnorm(t, g, be, rm, rv, training=tr, update_stats=False),
               [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)])
    yield "relu", ops.relu, [away_from_zero(rng, x.shape)]
    xd = distinct_values(rng, x.shape)
    pp = int(rng.integers(0, k // 2 + 1))
    yield "maxpool2d", lambda t: ops.maxpool2d(t, k, s, pp), [xd]
    yield "avgpool2d", lambda t: ops.avgpool2d(t, k, s, pp), [xd]
    yield "global_avgpool", ops.global_avgpool, [xd]
    yield "flatten", ops.flatten, [xd]
    c2 = int(rng.integers(1, 5))
    yield "concat", lambda a, z: ops.concat_channels([a, z]), [x, rng.standard_normal((b, c2, h, w))]
    yield "add", ops.add, [x, rng.standard_normal(x.shape)]
    yield "scale", lambda t: ops.scale(t, 0.7), [x]
    n, f, kk = (int(v) for v in rng.integers(1, 5, size=3))
    kk = max(kk, 2)
    yield "linear", ops.linear, [rng.standard_normal((n, f)), rng.standard_normal((kk, f)), rng.standard_normal(kk)]
    labels = rng.integers(0, kk, size=n)
    yield "softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels), [rng.standard_normal((n, kk))]
    yield "softmax", ops.softmax, [rng.standard_normal((n, kk))]
    target = rng.standard_normal((n, kk))
    yield "l1_loss", lambda q: ops.l1_loss(q, target), [target + away_from_zero(rng, (n, kk))]
