"""Cell-based architecture space with a continuous relaxation.

A network is a stem followed by a stack of cells. Each cell consumes the
outputs of the two previous cells (after 1x1 preprocessing), builds a small
DAG of intermediate nodes, and concatenates the intermediates along the
channel axis. During search every edge of the DAG carries a softmax-weighted
mixture over a fixed catalog of candidate operations; the mixture logits are
the architecture parameters. After search each node keeps its two strongest
incoming edges, each reduced to its single strongest non-zero operation,
giving a discrete cell that a standalone evaluation network is built from.

All cells of the same kind (normal / reduce) share one logits matrix, while
every cell owns private operation weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn

__all__ = [
    "DEFAULT_OPS",
    "SupernetSpec",
    "ArchParams",
    "Supernet",
    "DiscreteCell",
    "EvalNetwork",
    "derive_cell",
    "num_edges",
    "edge_list",
    "opset_hash",
    "genotype_text",
    "parse_genotype_text",
    "GenotypeError",
]

DEFAULT_OPS = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "zero",
    "identity",
)

_KNOWN_OPS = set(DEFAULT_OPS)


class GenotypeError(ValueError):
    """A genotype file or structure is malformed."""


def num_edges(num_intermediate: int) -> int:
    """Edges in one cell: node i (0-based) has i+2 candidate inputs."""
    return num_intermediate * (num_intermediate + 3) // 2


def edge_list(num_intermediate: int) -> list:
    """Canonical (node, input) ordering used to index arch logits rows."""
    out = []
    for i in range(num_intermediate):
        for j in range(i + 2):
            out.append((i, j))
    return out


def opset_hash(ops) -> str:
    """Short stable fingerprint of an ordered op catalog."""
    return hashlib.sha256(",".join(ops).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SupernetSpec:
    """Sizing of the search network.

    ``num_nodes`` counts the two input nodes, the intermediates, and the
    concatenation node, so intermediates = num_nodes - 3. ``in_shape`` is
    (height, width, channels) of the incoming images.
    """

    num_cells: int = 2
    num_nodes: int = 4
    channels: int = 8
    num_classes: int = 4
    in_shape: tuple = (8, 8, 1)
    ops: tuple = DEFAULT_OPS
    use_reduction: bool = False

    def __post_init__(self):
        if self.num_cells < 1:
            raise ValueError("need at least one cell")
        if self.num_nodes < 4:
            raise ValueError("num_nodes must be >= 4 (two inputs, one "
                             "intermediate, one output)")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.in_shape) != 3 or any(int(d) < 1 for d in self.in_shape):
            raise ValueError(f"bad in_shape {self.in_shape}")
        if not self.ops:
            raise ValueError("op catalog is empty")
        unknown = [o for o in self.ops if o not in _KNOWN_OPS]
        if unknown:
            raise ValueError(f"unknown ops {unknown}; known: {sorted(_KNOWN_OPS)}")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError("op catalog has duplicates")
        if all(o == "zero" for o in self.ops):
            raise ValueError("op catalog needs at least one non-zero op")
        if self.use_reduction and self.num_cells < 3:
            raise ValueError("reduction cells need num_cells >= 3")

    @property
    def num_intermediate(self) -> int:
        return self.num_nodes - 3

    @property
    def cell_types(self) -> tuple:
        return ("normal", "reduce") if self.use_reduction else ("normal",)

    def reduction_positions(self) -> set:
        if not self.use_reduction:
            return set()
        return {self.num_cells // 3, (2 * self.num_cells) // 3}


# -- candidate operations ---------------------------------------------------


class _SepConv:
    """relu -> depthwise k x k -> pointwise 1x1 -> batch norm."""

    def __init__(self, prefix, channels, k, stride, dilation=1):
        self.dw = nn.DepthwiseConv2d(f"{prefix}.dw", channels, k,
                                     stride=stride, dilation=dilation)
        self.pw = nn.Conv2d(f"{prefix}.pw", channels, channels, 1)

    def shapes(self):
        return nn.collect_shapes([self.dw, self.pw])

    def init(self, rng):
        return nn.init_weight_arrays([self.dw, self.pw], rng)

    def apply(self, ws, x):
        return ad.batch_norm(self.pw(ws, self.dw(ws, ad.relu(x))))


class _PoolOp:
    def __init__(self, kind, stride):
        self.kind = kind
        self.stride = stride

    def shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, ws, x):
        if self.kind == "max":
            return ad.max_pool(x, 3, stride=self.stride)
        return ad.avg_pool(x, 3, stride=self.stride)


class _Identity:
    def shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, ws, x):
        return x


class _ReducedIdentity:
    """Identity across a stride-2 boundary: 1x1 conv stride 2 plus norm."""

    def __init__(self, prefix, channels):
        self.conv = nn.Conv2d(f"{prefix}.rid", channels, channels, 1, stride=2)

    def shapes(self):
        return self.conv.shapes()

    def init(self, rng):
        return self.conv.init(rng)

    def apply(self, ws, x):
        return ad.batch_norm(self.conv(ws, x))


class _ZeroOp:
    """Contributes nothing. ``apply`` returns None, which the mixture and
    the discrete cell both read as an all-zero feature map."""

    def __init__(self, stride):
        self.stride = stride

    def shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, ws, x):
        return None

    def zeros_for(self, x) -> ad.Tensor:
        s = self.stride
        return ad.constant(np.zeros_like(x.data[:, :, ::s, ::s]))


def make_op(name: str, prefix: str, channels: int, stride: int):
    if name == "sep_conv_3x3":
        return _SepConv(prefix, channels, 3, stride)
    if name == "sep_conv_5x5":
        return _SepConv(prefix, channels, 5, stride)
    if name == "dil_conv_3x3":
        return _SepConv(prefix, channels, 3, stride, dilation=2)
    if name == "dil_conv_5x5":
        return _SepConv(prefix, channels, 5, stride, dilation=2)
    if name == "max_pool_3x3":
        return _PoolOp("max", stride)
    if name == "avg_pool_3x3":
        return _PoolOp("avg", stride)
    if name == "zero":
        return _ZeroOp(stride)
    if name == "identity":
        return _Identity() if stride == 1 else _ReducedIdentity(prefix, channels)
    raise ValueError(f"unknown op {name!r}")


class _ReLUConvBN:
    """The 1x1 preprocessing block in front of each cell input."""

    def __init__(self, prefix, cin, cout, stride=1):
        self.conv = nn.Conv2d(prefix, cin, cout, 1, stride=stride)

    def shapes(self):
        return self.conv.shapes()

    def init(self, rng):
        return self.conv.init(rng)

    def apply(self, ws, x):
        return ad.batch_norm(self.conv(ws, ad.relu(x)))


# -- architecture parameters -------------------------------------------------


class ArchParams:
    """Mixture logits, one [edges, ops] matrix per cell kind.

    Backed by a WeightSet so the same update/gradient machinery used for
    network weights applies to architecture parameters too.
    """

    def __init__(self, weights: ad.WeightSet, ops: tuple, num_intermediate: int):
        for name in weights.names():
            if name not in ("normal", "reduce"):
                raise ValueError(f"unexpected cell kind {name!r}")
        if "normal" not in weights:
            raise ValueError("arch params must cover the 'normal' cell kind")
        e, k = num_edges(num_intermediate), len(ops)
        for name, t in weights.items():
            if t.shape != (e, k):
                raise ValueError(f"logits {name!r} have shape {t.shape}, "
                                 f"expected {(e, k)}")
        self.weights = weights
        self.ops = tuple(ops)
        self.num_intermediate = int(num_intermediate)

    @classmethod
    def init(cls, spec: SupernetSpec, rng: np.random.Generator,
             scale: float = 1e-3) -> "ArchParams":
        e, k = num_edges(spec.num_intermediate), len(spec.ops)
        arrays = {ct: scale * rng.standard_normal((e, k))
                  for ct in spec.cell_types}
        return cls(ad.WeightSet.from_arrays(arrays), spec.ops,
                   spec.num_intermediate)

    def cell_types(self) -> list:
        return self.weights.names()

    def logits(self, cell_type: str) -> ad.Tensor:
        return self.weights[cell_type]

    def softmax_weights(self, cell_type: str) -> np.ndarray:
        """Detached per-edge mixture probabilities, rows summing to one."""
        z = self.weights[cell_type].data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def copy(self) -> "ArchParams":
        return ArchParams(self.weights.copy(), self.ops, self.num_intermediate)


# -- the relaxed network ------------------------------------------------------


class _MixedCell:
    def __init__(self, prefix, cell_type, c_pp, c_p, c, num_intermediate,
                 ops, reduction, reduce_prev):
        self.cell_type = cell_type
        self.num_intermediate = num_intermediate
        self.pre0 = _ReLUConvBN(f"{prefix}.pre0", c_pp, c,
                                stride=2 if reduce_prev else 1)
        self.pre1 = _ReLUConvBN(f"{prefix}.pre1", c_p, c)
        self.edge_ops = []
        for i, j in edge_list(num_intermediate):
            stride = 2 if (reduction and j < 2) else 1
            self.edge_ops.append([
                make_op(op, f"{prefix}.n{i + 2}.in{j}.{op}", c, stride)
                for op in ops
            ])

    def _blocks(self):
        yield self.pre0
        yield self.pre1
        for edge in self.edge_ops:
            yield from edge

    def shapes(self):
        return nn.collect_shapes(list(self._blocks()))

    def init(self, rng):
        return nn.init_weight_arrays(list(self._blocks()), rng)

    def forward(self, ws, logits: ad.Tensor, s0, s1):
        states = [self.pre0.apply(ws, s0), self.pre1.apply(ws, s1)]
        e = 0
        for i in range(self.num_intermediate):
            acc = None
            for j in range(i + 2):
                wrow = ad.softmax(ad.row(logits, e))
                outs = [op.apply(ws, states[j]) for op in self.edge_ops[e]]
                mixed = ad.weighted_sum(wrow, outs)
                acc = mixed if acc is None else acc + mixed
                e += 1
            states.append(acc)
        return ad.concat(states[2:], axis=1)


class Supernet:
    """Relaxed search network: stem, mixed cells, pooled linear head.

    ``in_channels`` and ``head_dim`` override the spec's image channels and
    class count; the adversarial critic reuses the trunk this way (images
    plus a label plane in, one score out).
    """

    def __init__(self, spec: SupernetSpec, in_channels: int = None,
                 head_dim: int = None):
        self.spec = spec
        cin = spec.in_shape[2] if in_channels is None else int(in_channels)
        self.head_dim = spec.num_classes if head_dim is None else int(head_dim)
        i_count = spec.num_intermediate

        self.stem = nn.Conv2d("stem.conv", cin, spec.channels, 3)
        red_at = spec.reduction_positions()
        self.cells = []
        c_pp = c_p = spec.channels
        c = spec.channels
        reduce_prev = False
        for k in range(spec.num_cells):
            reduction = k in red_at
            if reduction:
                c *= 2
            cell = _MixedCell(f"cell{k}", "reduce" if reduction else "normal",
                              c_pp, c_p, c, i_count, spec.ops,
                              reduction, reduce_prev)
            self.cells.append(cell)
            reduce_prev = reduction
            c_pp, c_p = c_p, i_count * c
        self.head = nn.Linear("head.fc", c_p, self.head_dim)

    def _layers(self):
        return [self.stem] + self.cells + [self.head]

    def param_shapes(self) -> dict:
        return nn.collect_shapes(self._layers())

    def init_weights(self, rng: np.random.Generator) -> ad.WeightSet:
        return ad.WeightSet.from_arrays(nn.init_weight_arrays(self._layers(), rng))

    def forward(self, ws: ad.WeightSet, arch: ArchParams, x) -> ad.Tensor:
        """Logits for a batch. ``x`` is a Tensor or array, [B, C, H, W]."""
        x = ad.astensor(x)
        s = ad.batch_norm(self.stem(ws, x))
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell.forward(ws, arch.logits(cell.cell_type), s0, s1)
        return self.head(ws, ad.global_avg_pool(s1))


# -- discretization -----------------------------------------------------------


@dataclass(frozen=True)
class DiscreteCell:
    """Derived cell: per intermediate node, its two kept (input, op) edges.

    ``normal[i]`` is a pair of (input_index, op_name) tuples, input indices
    ordered ascending. ``reduce`` is None when the search ran without
    reduction cells.
    """

    num_intermediate: int
    normal: tuple
    reduce: tuple = None

    def __post_init__(self):
        for kind, nodes in (("normal", self.normal), ("reduce", self.reduce)):
            if nodes is None:
                continue
            if len(nodes) != self.num_intermediate:
                raise GenotypeError(f"{kind} cell has {len(nodes)} nodes, "
                                    f"expected {self.num_intermediate}")
            for i, chosen in enumerate(nodes):
                if len(chosen) != 2:
                    raise GenotypeError(f"node {i + 2} keeps {len(chosen)} "
                                        "edges, expected 2")
                js = [j for j, _ in chosen]
                if len(set(js)) != 2 or any(not 0 <= j < i + 2 for j in js):
                    raise GenotypeError(f"node {i + 2} has bad inputs {js}")
                if js != sorted(js):
                    raise GenotypeError(f"node {i + 2} inputs not sorted")
                for _, op in chosen:
                    if op not in _KNOWN_OPS:
                        raise GenotypeError(f"unknown op {op!r}")


def derive_cell(arch: ArchParams) -> DiscreteCell:
    """Discretize mixture logits into a cell.

    Per edge, the strongest non-zero op wins (ties to the lower op index).
    Per node, the two incoming edges with the largest winning weights are
    kept (ties to the lower input index). Softmax is shift-invariant per
    row, so adding a constant to any logits row never changes the result.
    """
    nonzero = [k for k, op in enumerate(arch.ops) if op != "zero"]
    if not nonzero:
        raise GenotypeError("op catalog has no non-zero ops to derive with")

    def discretize(cell_type):
        probs = arch.softmax_weights(cell_type)
        nodes = []
        e = 0
        for i in range(arch.num_intermediate):
            cand = []
            for j in range(i + 2):
                p = probs[e]
                e += 1
                best = max(nonzero, key=lambda k: (p[k], -k))
                cand.append((p[best], j, arch.ops[best]))
            cand.sort(key=lambda t: (-t[0], t[1]))
            keep = sorted(cand[:2], key=lambda t: t[1])
            nodes.append(tuple((j, op) for _, j, op in keep))
        return tuple(nodes)

    kinds = {ct: discretize(ct) for ct in arch.cell_types()}
    return DiscreteCell(num_intermediate=arch.num_intermediate,
                        normal=kinds["normal"],
                        reduce=kinds.get("reduce"))


# -- evaluation network --------------------------------------------------------


class _DiscreteCellModule:
    def __init__(self, prefix, nodes, c_pp, c_p, c, reduction, reduce_prev):
        self.nodes = nodes
        self.pre0 = _ReLUConvBN(f"{prefix}.pre0", c_pp, c,
                                stride=2 if reduce_prev else 1)
        self.pre1 = _ReLUConvBN(f"{prefix}.pre1", c_p, c)
        self.node_ops = []
        for i, chosen in enumerate(nodes):
            slot_ops = []
            for slot, (j, op) in enumerate(chosen):
                stride = 2 if (reduction and j < 2) else 1
                slot_ops.append(make_op(
                    op, f"{prefix}.n{i + 2}.s{slot}.{op}", c, stride))
            self.node_ops.append(slot_ops)

    def _blocks(self):
        yield self.pre0
        yield self.pre1
        for slots in self.node_ops:
            yield from slots

    def shapes(self):
        return nn.collect_shapes(list(self._blocks()))

    def init(self, rng):
        return nn.init_weight_arrays(list(self._blocks()), rng)

    def forward(self, ws, s0, s1):
        states = [self.pre0.apply(ws, s0), self.pre1.apply(ws, s1)]
        for chosen, slot_ops in zip(self.nodes, self.node_ops):
            acc = None
            for (j, _), op in zip(chosen, slot_ops):
                y = op.apply(ws, states[j])
                if y is None:
                    y = op.zeros_for(states[j])
                acc = y if acc is None else acc + y
            states.append(acc)
        return ad.concat(states[2:], axis=1)


class EvalNetwork:
    """Standalone network built from a discrete cell.

    Shares the macro skeleton of the supernet (stem, cell stack, pooled
    head) but every node computes just its two chosen operations. Reduction
    cells are used when the spec asks for them and the genotype provides
    one.
    """

    def __init__(self, spec: SupernetSpec, cell: DiscreteCell):
        if cell.num_intermediate != spec.num_intermediate:
            raise GenotypeError(
                f"genotype has {cell.num_intermediate} intermediates, "
                f"spec wants {spec.num_intermediate}")
        if spec.use_reduction and cell.reduce is None:
            raise GenotypeError("spec uses reduction cells but genotype "
                                "has no reduce cell")
        for nodes in (cell.normal, cell.reduce or ()):
            for chosen in nodes:
                for _, op in chosen:
                    if op not in spec.ops:
                        raise GenotypeError(f"genotype op {op!r} is not in "
                                            "the spec's op set")
        self.spec = spec
        self.cell = cell
        i_count = spec.num_intermediate
        red_at = spec.reduction_positions()

        self.stem = nn.Conv2d("stem.conv", spec.in_shape[2], spec.channels, 3)
        self.cells = []
        c_pp = c_p = spec.channels
        c = spec.channels
        reduce_prev = False
        for k in range(spec.num_cells):
            reduction = k in red_at
            if reduction:
                c *= 2
            nodes = cell.reduce if reduction else cell.normal
            mod = _DiscreteCellModule(f"cell{k}", nodes, c_pp, c_p, c,
                                      reduction, reduce_prev)
            self.cells.append(mod)
            reduce_prev = reduction
            c_pp, c_p = c_p, i_count * c
        self.head = nn.Linear("head.fc", c_p, spec.num_classes)

    def _layers(self):
        return [self.stem] + self.cells + [self.head]

    def param_shapes(self) -> dict:
        return nn.collect_shapes(self._layers())

    def init_weights(self, rng: np.random.Generator) -> ad.WeightSet:
        return ad.WeightSet.from_arrays(nn.init_weight_arrays(self._layers(), rng))

    def forward(self, ws: ad.WeightSet, x) -> ad.Tensor:
        x = ad.astensor(x)
        s = ad.batch_norm(self.stem(ws, x))
        s0 = s1 = s
        for mod in self.cells:
            s0, s1 = s1, mod.forward(ws, s0, s1)
        return self.head(ws, ad.global_avg_pool(s1))


# -- genotype text format -------------------------------------------------------


def genotype_text(cell: DiscreteCell, config_hash: str = "",
                  ops_fingerprint: str = "") -> str:
    """Serialize a discrete cell to the line-oriented genotype format.

    One line per kept edge: ``<kind> <node> <input> <op>``, nodes numbered
    from 2 (0 and 1 are the cell inputs). Header comments carry the config
    hash and the op-catalog fingerprint for provenance checks at load time.
    """
    lines = ["# trinas genotype v1"]
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    if ops_fingerprint:
        lines.append(f"# opset_hash={ops_fingerprint}")
    for kind, nodes in (("normal", cell.normal), ("reduce", cell.reduce)):
        if nodes is None:
            continue
        for i, chosen in enumerate(nodes):
            for j, op in chosen:
                lines.append(f"{kind} {i + 2} {j} {op}")
    return "\n".join(lines) + "\n"


def parse_genotype_text(text: str) -> tuple:
    """Parse the genotype format. Returns (DiscreteCell, header dict)."""
    header = {}
    edges = {}
    versioned = False
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("trinas genotype"):
                if body != "trinas genotype v1":
                    raise GenotypeError(f"unsupported format: {body!r}")
                versioned = True
            elif "=" in body:
                key, _, val = body.partition("=")
                header[key.strip()] = val.strip()
            continue
        if not versioned:
            raise GenotypeError("missing '# trinas genotype v1' marker "
                                "before the first edge line")
        parts = line.split()
        if len(parts) != 4:
            raise GenotypeError(f"line {ln}: expected 'kind node input op', "
                                f"got {line!r}")
        kind, node_s, in_s, op = parts
        if kind not in ("normal", "reduce"):
            raise GenotypeError(f"line {ln}: unknown cell kind {kind!r}")
        try:
            node, j = int(node_s), int(in_s)
        except ValueError:
            raise GenotypeError(f"line {ln}: non-integer node or input") from None
        if op not in _KNOWN_OPS:
            raise GenotypeError(f"line {ln}: unknown op {op!r}")
        edges.setdefault(kind, {}).setdefault(node, []).append((j, op))

    if "normal" not in edges:
        raise GenotypeError("genotype has no normal-cell edges")

    def build(kind):
        per_node = edges[kind]
        nodes_idx = sorted(per_node)
        expect = list(range(2, 2 + len(nodes_idx)))
        if nodes_idx != expect:
            raise GenotypeError(f"{kind} cell nodes {nodes_idx} are not "
                                f"contiguous from 2")
        return tuple(tuple(sorted(per_node[n], key=lambda t: t[0]))
                     for n in nodes_idx)

    normal = build("normal")
    reduce_nodes = build("reduce") if "reduce" in edges else None
    if reduce_nodes is not None and len(reduce_nodes) != len(normal):
        raise GenotypeError("normal and reduce cells disagree on node count")
    cell = DiscreteCell(num_intermediate=len(normal), normal=normal,
                        reduce=reduce_nodes)
    return cell, header
