"""GIN and Graphormer molecule encoders over the numerics tape.

Both encoders read the same parameter store under the ``encoder.`` prefix and
are used for the primary molecule and for the conditional (context) set.
"""
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

import numerics as nx
from chemgraph import BRACKET_AROMATIC, DISCONNECTED, SUPPORTED_ELEMENTS, BondOrder, all_pairs_shortest_paths, disjoint_union
from config import ConfigError, ValidationError

KINDS = ("gin", "graphormer")
MASK_ATOM_INDEX = 0
ATOM_TYPES = (
    (("[MASK]", False),)
    + tuple((element, False) for element in SUPPORTED_ELEMENTS)
    + tuple((element, True) for element in sorted(set(BRACKET_AROMATIC.values())))
)
_ATOM_INDEX = {key: k for k, key in enumerate(ATOM_TYPES)}
BOND_TYPES = tuple(BondOrder)
VIRTUAL_ROLES = 2
ATTENTION_MASK = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "gin"
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    max_sp_distance: int = 20
    edge_dim: int = 16
    ffn_dim: int = None
    max_degree: int = 8

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise ConfigError(f"encoder kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if kind == "graphormer" and self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by {self.heads} heads")
        if self.max_sp_distance < 1:
            raise ConfigError("max_sp_distance must be at least 1")

    @classmethod
    def from_section(cls, section):
        return cls(**section)

    @property
    def atom_vocab(self):
        return len(ATOM_TYPES)

    @property
    def bond_vocab(self):
        return len(BOND_TYPES)

    @property
    def feedforward_dim(self):
        return self.ffn_dim or self.hidden_dim

    def to_json(self):
        return asdict(self)


@dataclass(frozen=True)
class EncodedMolecule:
    """Per-atom states (n, d) and the graph-level state (1, d)."""

    node_states: object
    global_state: object
    virtual_states: object = None


def atom_type_index(atom):
    if atom.is_mask:
        return MASK_ATOM_INDEX
    return _ATOM_INDEX.get((atom.element, atom.aromatic), _ATOM_INDEX[(atom.element, False)])


@dataclass(frozen=True, eq=False)
class GraphFeatures:
    atom_types: np.ndarray
    bond_types: np.ndarray
    adjacency: np.ndarray
    incidence: np.ndarray
    degrees: np.ndarray


@lru_cache(maxsize=8192)
def graph_features(g):
    n, m = len(g.atoms), len(g.bonds)
    adjacency = np.zeros((n, n))
    incidence = np.zeros((n, m))
    for k, bond in enumerate(g.bonds):
        adjacency[bond.begin, bond.end] = adjacency[bond.end, bond.begin] = 1.0
        incidence[bond.begin, k] = incidence[bond.end, k] = 1.0
    return GraphFeatures(
        atom_types=np.array([atom_type_index(a) for a in g.atoms], dtype=np.int64),
        bond_types=np.array([int(b.order) - 1 for b in g.bonds], dtype=np.int64),
        adjacency=adjacency,
        incidence=incidence,
        degrees=adjacency.sum(axis=1).astype(np.int64),
    )


@dataclass(frozen=True, eq=False)
class TransformerStructure:
    """Atoms plus virtual nodes: spatial indices, attention mask and per-path edge steps."""

    atoms: int
    virtual: int
    spatial_index: np.ndarray
    mask: np.ndarray
    step_pair: np.ndarray
    step_order: np.ndarray
    step_bond: np.ndarray
    step_weight: np.ndarray

    @property
    def size(self):
        return self.atoms + self.virtual


@lru_cache(maxsize=8192)
def transformer_structure(g, max_sp, groups):
    """Spatial index 0 is self (virtual nodes too), 1..max_sp distances, max_sp+1 disconnected, max_sp+2 virtual."""
    n = len(g.atoms)
    total = n + len(groups)
    paths = all_pairs_shortest_paths(g)
    dist = paths.distance
    spatial = np.full((total, total), max_sp + 2, dtype=np.int64)
    spatial[:n, :n] = np.where(dist == DISCONNECTED, max_sp + 1, np.minimum(dist, max_sp))
    np.fill_diagonal(spatial, 0)
    mask = np.zeros((total, total))
    for k, members in enumerate(groups):
        node = n + k
        allowed = np.zeros(total, dtype=bool)
        allowed[list(members)] = True
        allowed[node] = True
        mask[node, ~allowed] = ATTENTION_MASK
        mask[~allowed, node] = ATTENTION_MASK
    pair, order, bond, weight = [], [], [], []
    for i in range(n):
        for j in range(n):
            if i == j or dist[i, j] == DISCONNECTED:
                continue
            steps = paths.bond_path(i, j)[:max_sp]
            for step, k in enumerate(steps):
                pair.append(i * total + j)
                order.append(step)
                bond.append(int(g.bonds[k].order) - 1)
                weight.append(1.0 / len(steps))
    return TransformerStructure(
        atoms=n,
        virtual=len(groups),
        spatial_index=spatial,
        mask=mask,
        step_pair=np.array(pair, dtype=np.int64),
        step_order=np.array(order, dtype=np.int64),
        step_bond=np.array(bond, dtype=np.int64),
        step_weight=np.array(weight),
    )


def init_encoder_params(store, rng, config):
    d = config.hidden_dim
    store.add("encoder.atom_embed", nx.embedding_normal(rng, config.atom_vocab, d))
    if config.kind == "gin":
        for layer in range(config.layers):
            prefix = f"encoder.gin.{layer}"
            store.add(f"{prefix}.bond_embed", nx.embedding_normal(rng, config.bond_vocab, d))
            store.add(f"{prefix}.eps", np.zeros(1))
            nx.init_mlp(store, rng, f"{prefix}.mlp", [d, 2 * d, d])
        return store
    heads, ffn = config.heads, config.feedforward_dim
    store.add("encoder.degree_embed", nx.embedding_normal(rng, config.max_degree + 1, d))
    store.add("encoder.virtual_embed", nx.embedding_normal(rng, VIRTUAL_ROLES, d))
    store.add("encoder.spatial_bias", nx.embedding_normal(rng, config.max_sp_distance + 3, heads))
    store.add("encoder.edge_embed", nx.embedding_normal(rng, config.bond_vocab, config.edge_dim))
    store.add("encoder.edge_weights", rng.normal(0.0, 0.02, size=(config.max_sp_distance, config.edge_dim * heads)))
    for layer in range(config.layers):
        prefix = f"encoder.layer.{layer}"
        for norm in ("ln1", "ln2"):
            store.add(f"{prefix}.{norm}.gamma", np.ones(d))
            store.add(f"{prefix}.{norm}.beta", np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            nx.init_linear(store, rng, f"{prefix}.attn.{proj}", d, d)
        nx.init_mlp(store, rng, f"{prefix}.ffn", [d, ffn, d])
    store.add("encoder.final_ln.gamma", np.ones(d))
    store.add("encoder.final_ln.beta", np.zeros(d))
    return store


def _check_nonempty(g):
    if not len(g.atoms):
        raise ValidationError("cannot encode an empty graph")


def gin_layer(mlp, node_states, edge_embeddings, adjacency, incidence, eps):
    """MLP((1 + eps) h_v + sum of neighbour states + sum of incident edge embeddings)."""
    self_term = nx.add(node_states, nx.scalar_mul(eps, node_states))
    aggregated = nx.add(self_term, nx.matmul(adjacency, node_states))
    aggregated = nx.add(aggregated, nx.matmul(incidence, edge_embeddings))
    return nx.mlp_forward(mlp, aggregated)


def gin_encode(config, tape, g):
    _check_nonempty(g)
    feats = graph_features(g)
    adjacency = feats.adjacency.astype(tape.dtype)
    incidence = feats.incidence.astype(tape.dtype)
    h = nx.take(tape.param("encoder.atom_embed"), feats.atom_types)
    for layer in range(config.layers):
        prefix = f"encoder.gin.{layer}"
        edges = nx.take(tape.param(f"{prefix}.bond_embed"), feats.bond_types)
        h = gin_layer(nx.mlp_layers(tape, f"{prefix}.mlp"), h, edges, adjacency, incidence, tape.param(f"{prefix}.eps"))
        if layer < config.layers - 1:
            h = nx.relu(h)
    readout = nx.reshape(nx.mean(h, axis=0), (1, config.hidden_dim))
    return EncodedMolecule(h, readout)


def attention_bias(config, tape, structure):
    """Per-head additive bias (heads, N, N): spatial term, path edge term and virtual-node mask."""
    heads, total = config.heads, structure.size
    spatial = nx.take(tape.param("encoder.spatial_bias"), structure.spatial_index)
    bias = nx.transpose(spatial, (2, 0, 1))
    if structure.step_pair.size:
        steps = structure.step_pair.size
        x = nx.reshape(nx.take(tape.param("encoder.edge_embed"), structure.step_bond), (steps, 1, config.edge_dim))
        w = nx.take(tape.param("encoder.edge_weights"), structure.step_order)
        w = nx.reshape(w, (steps, config.edge_dim, heads))
        per_step = nx.reshape(nx.matmul(x, w), (steps, heads))
        weights = np.repeat(structure.step_weight[:, None], heads, axis=1).astype(tape.dtype)
        per_step = nx.mul(per_step, weights)
        edge = nx.segment_sum(per_step, structure.step_pair, total * total)
        bias = nx.add(bias, nx.transpose(nx.reshape(edge, (total, total, heads)), (2, 0, 1)))
    mask = np.broadcast_to(structure.mask, (heads, total, total)).astype(tape.dtype)
    return nx.add(bias, mask)


def _split_heads(x, heads):
    total, d = x.shape
    return nx.transpose(nx.reshape(x, (total, heads, d // heads)), (1, 0, 2))


def graphormer_attention(tape, prefix, node_states, bias, heads):
    """Multi-head scaled dot-product attention with an additive (heads, N, N) bias.

    Returns the projected output and the attention weights.
    """
    total, d = node_states.shape
    project = {
        name: nx.linear(node_states, tape.param(f"{prefix}.{name}.W"), tape.param(f"{prefix}.{name}.b"))
        for name in ("q", "k", "v")
    }
    q, k, v = (_split_heads(project[name], heads) for name in ("q", "k", "v"))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d // heads))
    weights = nx.softmax(nx.add(scores, bias))
    out = nx.reshape(nx.transpose(nx.matmul(weights, v), (1, 0, 2)), (total, d))
    return nx.linear(out, tape.param(f"{prefix}.o.W"), tape.param(f"{prefix}.o.b")), weights


def _layer_norm(tape, x, prefix):
    return nx.layer_norm(x, tape.param(f"{prefix}.gamma"), tape.param(f"{prefix}.beta"))


def graphormer_encode(config, tape, g, groups=None, roles=None):
    """Transformer encoding with virtual nodes appended after the atoms.

    ``groups`` lists the atoms each virtual node connects to (default: one node
    over all atoms); ``roles`` picks the learnable token of each virtual node.
    """
    _check_nonempty(g)
    n = len(g.atoms)
    groups = (tuple(range(n)),) if groups is None else tuple(tuple(members) for members in groups)
    roles = tuple(range(len(groups))) if roles is None else tuple(roles)
    if not groups or len(roles) != len(groups) or max(roles) >= VIRTUAL_ROLES:
        raise ValidationError(f"need between 1 and {VIRTUAL_ROLES} virtual nodes with matching roles")
    feats = graph_features(g)
    structure = transformer_structure(g, config.max_sp_distance, groups)
    atoms = nx.add(
        nx.take(tape.param("encoder.atom_embed"), feats.atom_types),
        nx.take(tape.param("encoder.degree_embed"), np.minimum(feats.degrees, config.max_degree)),
    )
    virtual = nx.take(tape.param("encoder.virtual_embed"), np.array(roles, dtype=np.int64))
    h = nx.concat([atoms, virtual], axis=0)
    bias = attention_bias(config, tape, structure)
    for layer in range(config.layers):
        prefix = f"encoder.layer.{layer}"
        attended, _ = graphormer_attention(tape, f"{prefix}.attn", _layer_norm(tape, h, f"{prefix}.ln1"), bias, config.heads)
        h = nx.add(h, attended)
        h = nx.add(h, nx.mlp_forward(nx.mlp_layers(tape, f"{prefix}.ffn"), _layer_norm(tape, h, f"{prefix}.ln2")))
    h = _layer_norm(tape, h, "encoder.final_ln")
    node_states = nx.take(h, np.arange(n))
    virtual_states = nx.take(h, np.arange(n, n + len(groups)))
    return EncodedMolecule(node_states, nx.take(h, np.array([n])), virtual_states)


def encode(config, tape, g):
    if config.kind == "gin":
        return gin_encode(config, tape, g)
    return graphormer_encode(config, tape, g)


def encode_context(config, tape, conditional):
    """Context vector (1, d) of the conditional molecules; zeros when there are none."""
    graphs = [g for g in conditional if len(g.atoms)]
    if not graphs:
        return tape.constant(np.zeros((1, config.hidden_dim)))
    union = disjoint_union(graphs)
    if config.kind == "gin":
        return gin_encode(config, tape, union).global_state
    return graphormer_encode(config, tape, union).global_state
