"""Tree models turning a plan's node features into one graph-level vector.

The main model runs, per layer, two independent graph-attention
convolutions over opposite edge orientations (child-to-parent and
parent-to-child) and mixes the two outputs with a learnable scalar p:

    out_i = p * conv_cp(X, E_cp)_i + (1 - p) * conv_pc(X, E_pc)_i

then reads the node sequence out with a GRU over the post-order
traversal.  Ablations swap in a single edge direction, undirected edges,
or sum pooling.  The baselines are an LSTM and a GRU over the flattened
post-order sequence, an LSTM with additive self-attention over its hidden
states, a child-sum Tree-LSTM, and a binary tree convolution with dynamic
max pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoding import GraphBatch  # noqa: F401  (re-exported: consumed alongside forward)

MODEL_KINDS = (
    "bigg",
    "gnn_addpool_single",
    "gnn_gru_single",
    "gnn_gru_undirected",
    "bigg_addpool",
    "lstm",
    "gru",
    "lstm_attention",
    "tree_lstm",
    "tree_cnn",
)

# Report label for the edge handling of each kind.
EDGE_DIRECTION = {
    "bigg": "weighted_directed",
    "bigg_addpool": "weighted_directed",
    "gnn_addpool_single": "single_directed",
    "gnn_gru_single": "single_directed",
    "gnn_gru_undirected": "undirected",
    "lstm": "-",
    "gru": "-",
    "lstm_attention": "-",
    "tree_lstm": "-",
    "tree_cnn": "-",
}

_CONV_KINDS = ("bigg", "bigg_addpool", "gnn_addpool_single", "gnn_gru_single", "gnn_gru_undirected")
_GRU_READOUT = ("bigg", "gnn_gru_single", "gnn_gru_undirected", "gru")
_ADDPOOL_KINDS = ("gnn_addpool_single", "bigg_addpool")


class ModelError(ValueError):
    """Bad model configuration or malformed model input."""


@dataclass
class ModelConfig:
    model_kind: str = "bigg"
    layers: int = 3
    hidden_dim: int = 128
    heads: int = 1
    dropout: float = 0.1
    d_type: int = 16     # node-type embedding width
    d_col: int = 8       # per-column embedding width
    head_dims: tuple = (128, 64)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.model_kind!r}; valid kinds: {MODEL_KINDS}")
        if self.hidden_dim <= 0 or self.heads < 1 or not 0.0 <= self.dropout < 1.0:
            raise ModelError("hidden_dim must be positive, heads >= 1, dropout in [0, 1)")
        if self.layers < 0:
            raise ModelError("layers must be >= 0")
        if self.layers == 0 and self.model_kind in _ADDPOOL_KINDS + ("tree_cnn",):
            raise ModelError(f"{self.model_kind} needs at least one layer")

    def to_dict(self):
        return {
            "model_kind": self.model_kind,
            "layers": self.layers,
            "hidden_dim": self.hidden_dim,
            "heads": self.heads,
            "dropout": self.dropout,
            "d_type": self.d_type,
            "d_col": self.d_col,
            "head_dims": list(self.head_dims),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["head_dims"] = tuple(data.get("head_dims", (128, 64)))
        return cls(**data)


# ---------------------------------------------------------------------------
# Parameter initialization


def _init_linear(params, name, d_in, d_out, rng, fan_in=None):
    fan = d_in if fan_in is None else fan_in
    params[f"{name}.W"] = nm.Parameter(f"{name}.W", nm.uniform_init((d_in, d_out), fan, rng))
    params[f"{name}.b"] = nm.Parameter(f"{name}.b", nm.uniform_init((1, d_out), fan, rng))


def _init_conv(params, prefix, d_in, d_out, heads, rng):
    for h in range(heads):
        base = f"{prefix}.h{h}"
        for w in ("W1", "W2", "W3", "W4"):
            params[f"{base}.{w}"] = nm.Parameter(f"{base}.{w}", nm.uniform_init((d_in, d_out), d_in, rng))
        params[f"{base}.b"] = nm.Parameter(f"{base}.b", nm.uniform_init((1, d_out), d_in, rng))
    if heads > 1:
        _init_linear(params, f"{prefix}.merge", heads * d_out, d_out, rng)


def _init_gates(params, prefix, gates, d_in, d_h, rng):
    for g in gates:
        params[f"{prefix}.W{g}"] = nm.Parameter(f"{prefix}.W{g}", nm.uniform_init((d_in, d_h), d_in, rng))
        params[f"{prefix}.U{g}"] = nm.Parameter(f"{prefix}.U{g}", nm.uniform_init((d_h, d_h), d_h, rng))
        params[f"{prefix}.b{g}"] = nm.Parameter(f"{prefix}.b{g}", nm.uniform_init((1, d_h), d_h, rng))


def init_model_params(config, d_node, rng):
    """Seeded parameter set for one model kind (encoder and head excluded)."""
    kind = config.model_kind
    d_h = config.hidden_dim
    params = {}
    if kind in _CONV_KINDS:
        for i in range(config.layers):
            d_in = d_node if i == 0 else d_h
            _init_conv(params, f"tree.L{i}.cp", d_in, d_h, config.heads, rng)
            if kind in ("bigg", "bigg_addpool"):
                _init_conv(params, f"tree.L{i}.pc", d_in, d_h, config.heads, rng)
                params[f"tree.L{i}.p"] = nm.Parameter(f"tree.L{i}.p", nm.Tensor([[0.5]]))
        readout_in = d_h if config.layers > 0 else d_node
    elif kind == "tree_cnn":
        for i in range(config.layers):
            d_in = d_node if i == 0 else d_h
            pfx = f"tree.L{i}.tcnn"
            for w in ("Wp", "Wl", "Wr"):
                params[f"{pfx}.{w}"] = nm.Parameter(f"{pfx}.{w}", nm.uniform_init((d_in, d_h), d_in, rng))
            params[f"{pfx}.b"] = nm.Parameter(f"{pfx}.b", nm.uniform_init((1, d_h), d_in, rng))
        readout_in = d_h
    else:
        readout_in = d_node

    if kind in _GRU_READOUT:
        _init_gates(params, "readout.gru", ("z", "r", "h"), readout_in, d_h, rng)
    elif kind in ("lstm", "lstm_attention"):
        _init_gates(params, "readout.lstm", ("i", "f", "o", "u"), readout_in, d_h, rng)
        if kind == "lstm_attention":
            params["readout.attn.Wa"] = nm.Parameter("readout.attn.Wa", nm.uniform_init((d_h, d_h), d_h, rng))
            params["readout.attn.v"] = nm.Parameter("readout.attn.v", nm.uniform_init((d_h, 1), d_h, rng))
    elif kind == "tree_lstm":
        _init_gates(params, "readout.treelstm", ("i", "f", "o", "u"), readout_in, d_h, rng)
    return params


# ---------------------------------------------------------------------------
# Graph attention convolution


def transformer_conv(X, edges, params, prefix, heads, num_nodes):
    """Attention convolution over one directed edge list.

    Per head: out_i = W1 x_i + b + sum_j alpha_ij (W2 x_j) over incoming
    edges j->i, with alpha the softmax over ((W3 x_i) . (W4 x_j)) / sqrt(d)
    grouped by destination.  Nodes without incoming edges keep only the
    root term.  With several heads the concatenated head outputs pass
    through a merge layer.
    """
    dtype = X.data.dtype
    head_outs = []
    for h in range(heads):
        base = f"{prefix}.h{h}"
        w1 = params[f"{base}.W1"].tensor
        bias = params[f"{base}.b"].tensor
        root = nm.linear(X, w1, bias)
        if len(edges) == 0:
            head_outs.append(root)
            continue
        src = edges[:, 0]
        dst = edges[:, 1]
        w2 = params[f"{base}.W2"].tensor
        w3 = params[f"{base}.W3"].tensor
        w4 = params[f"{base}.W4"].tensor
        d_key = w3.shape[1]
        q_e = nm.gather_rows(nm.matmul(X, w3), dst)
        k_e = nm.gather_rows(nm.matmul(X, w4), src)
        scores = nm.scale(nm.sum_reduce(nm.multiply(q_e, k_e), axis=1), 1.0 / math.sqrt(d_key))
        alpha = nm.segment_softmax(scores, dst, num_segments=num_nodes)
        msg = nm.gather_rows(nm.matmul(X, w2), src)
        weighted = nm.multiply(nm.matmul(alpha, nm.ones((1, msg.shape[1]), dtype=dtype)), msg)
        head_outs.append(nm.add(root, nm.scatter_add_rows(weighted, dst, num_nodes)))
    if heads == 1:
        return head_outs[0]
    merged = nm.concat(head_outs, axis=1)
    return nm.linear(merged, params[f"{prefix}.merge.W"].tensor, params[f"{prefix}.merge.b"].tensor)


def bigg_layer(X, cp_edges, pc_edges, params, layer_prefix, heads, num_nodes):
    """One bidirectional layer: both orientations mixed by the scalar p."""
    cp_out = transformer_conv(X, cp_edges, params, f"{layer_prefix}.cp", heads, num_nodes)
    pc_out = transformer_conv(X, pc_edges, params, f"{layer_prefix}.pc", heads, num_nodes)
    p = params[f"{layer_prefix}.p"].tensor
    one = nm.ones((1, 1), dtype=X.data.dtype)
    return nm.add(nm.multiply(p, cp_out), nm.multiply(nm.subtract(one, p), pc_out))


def _maybe_dropout(X, config, training, rng):
    if not training or config.dropout <= 0.0:
        return X
    if rng is None:
        raise ModelError("training with dropout requires an rng")
    mask = (rng.random(X.shape) >= config.dropout).astype(X.data.dtype)
    return nm.dropout(X, mask, config.dropout)


def transform_node_features(batch, params, config, training=False, rng=None):
    """Run the configured convolution stack; identity for sequence models."""
    kind = config.model_kind
    X = batch.node_features
    if kind not in _CONV_KINDS:
        return X
    n = batch.n_nodes
    cp = batch.child_to_parent
    pc = batch.parent_to_child
    undirected = np.concatenate([cp, pc], axis=0) if len(cp) else cp
    for i in range(config.layers):
        prefix = f"tree.L{i}"
        if kind in ("bigg", "bigg_addpool"):
            X = bigg_layer(X, cp, pc, params, prefix, config.heads, n)
        elif kind == "gnn_gru_undirected":
            X = transformer_conv(X, undirected, params, f"{prefix}.cp", config.heads, n)
        else:
            X = transformer_conv(X, cp, params, f"{prefix}.cp", config.heads, n)
        X = nm.relu(X)
        X = _maybe_dropout(X, config, training, rng)
    return X


# ---------------------------------------------------------------------------
# Readouts


def addpool_aggregate(X):
    """Structure-oblivious readout: elementwise sum over node rows."""
    return nm.sum_reduce(X, axis=0)


def gru_aggregate(X, order, params, prefix="readout.gru"):
    """GRU over node rows in the given order, from a zero state."""
    if len(order) == 0:
        raise ModelError("empty node sequence")
    t = {g: params[f"{prefix}.{g}"].tensor for g in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")}
    x_z = nm.linear(X, t["Wz"], t["bz"])
    x_r = nm.linear(X, t["Wr"], t["br"])
    x_h = nm.linear(X, t["Wh"], t["bh"])
    d_h = t["Uz"].shape[0]
    dtype = X.data.dtype
    h = nm.zeros((1, d_h), dtype=dtype)
    one = nm.ones((1, d_h), dtype=dtype)
    for i in order:
        idx = [int(i)]
        z = nm.sigmoid(nm.add(nm.gather_rows(x_z, idx), nm.matmul(h, t["Uz"])))
        r = nm.sigmoid(nm.add(nm.gather_rows(x_r, idx), nm.matmul(h, t["Ur"])))
        cand = nm.tanh(nm.add(nm.gather_rows(x_h, idx), nm.matmul(nm.multiply(r, h), t["Uh"])))
        h = nm.add(nm.multiply(nm.subtract(one, z), h), nm.multiply(z, cand))
    return h


def _lstm_states(X, order, params, prefix="readout.lstm"):
    if len(order) == 0:
        raise ModelError("empty node sequence")
    t = {g: params[f"{prefix}.{g}"].tensor
         for g in ("Wi", "Ui", "bi", "Wf", "Uf", "bf", "Wo", "Uo", "bo", "Wu", "Uu", "bu")}
    x_i = nm.linear(X, t["Wi"], t["bi"])
    x_f = nm.linear(X, t["Wf"], t["bf"])
    x_o = nm.linear(X, t["Wo"], t["bo"])
    x_u = nm.linear(X, t["Wu"], t["bu"])
    d_h = t["Ui"].shape[0]
    dtype = X.data.dtype
    h = nm.zeros((1, d_h), dtype=dtype)
    c = nm.zeros((1, d_h), dtype=dtype)
    states = []
    for idx in order:
        j = [int(idx)]
        i = nm.sigmoid(nm.add(nm.gather_rows(x_i, j), nm.matmul(h, t["Ui"])))
        f = nm.sigmoid(nm.add(nm.gather_rows(x_f, j), nm.matmul(h, t["Uf"])))
        o = nm.sigmoid(nm.add(nm.gather_rows(x_o, j), nm.matmul(h, t["Uo"])))
        u = nm.tanh(nm.add(nm.gather_rows(x_u, j), nm.matmul(h, t["Uu"])))
        c = nm.add(nm.multiply(f, c), nm.multiply(i, u))
        h = nm.multiply(o, nm.tanh(c))
        states.append(h)
    return states


def lstm_forward(X, order, params):
    """Flattened-sequence LSTM; the final hidden state is the embedding."""
    return _lstm_states(X, order, params)[-1]


def lstm_attention_forward(X, order, params):
    """LSTM hidden states aggregated by additive self-attention weights."""
    states = _lstm_states(X, order, params)
    H = nm.concat(states, axis=0) if len(states) > 1 else states[0]
    scores = nm.matmul(nm.tanh(nm.matmul(H, params["readout.attn.Wa"].tensor)),
                       params["readout.attn.v"].tensor)
    alpha = nm.segment_softmax(scores, np.zeros(H.shape[0], dtype=np.intp))
    weighted = nm.multiply(nm.matmul(alpha, nm.ones((1, H.shape[1]), dtype=X.data.dtype)), H)
    return nm.sum_reduce(weighted, axis=0)


def children_lists(batch):
    """Per-node child index lists (original child order preserved)."""
    kids = [[] for _ in range(batch.n_nodes)]
    for parent, child in batch.parent_to_child:
        kids[int(parent)].append(int(child))
    return kids


def tree_lstm_forward(batch, params, prefix="readout.treelstm"):
    """Child-sum Tree-LSTM bottom-up; the root hidden state is the embedding."""
    X = batch.node_features
    t = {g: params[f"{prefix}.{g}"].tensor
         for g in ("Wi", "Ui", "bi", "Wf", "Uf", "bf", "Wo", "Uo", "bo", "Wu", "Uu", "bu")}
    x_i = nm.linear(X, t["Wi"], t["bi"])
    x_f = nm.linear(X, t["Wf"], t["bf"])
    x_o = nm.linear(X, t["Wo"], t["bo"])
    x_u = nm.linear(X, t["Wu"], t["bu"])
    d_h = t["Ui"].shape[0]
    dtype = X.data.dtype
    zero = nm.zeros((1, d_h), dtype=dtype)
    kids = children_lists(batch)
    h = {}
    c = {}
    for idx in batch.postorder:
        j = int(idx)
        row = [j]
        ks = kids[j]
        if ks:
            h_bar = h[ks[0]]
            for k in ks[1:]:
                h_bar = nm.add(h_bar, h[k])
            x_f_j = nm.gather_rows(x_f, row)
            c_sum = None
            for k in ks:
                f_k = nm.sigmoid(nm.add(x_f_j, nm.matmul(h[k], t["Uf"])))
                term = nm.multiply(f_k, c[k])
                c_sum = term if c_sum is None else nm.add(c_sum, term)
        else:
            h_bar = zero
            c_sum = zero
        i = nm.sigmoid(nm.add(nm.gather_rows(x_i, row), nm.matmul(h_bar, t["Ui"])))
        o = nm.sigmoid(nm.add(nm.gather_rows(x_o, row), nm.matmul(h_bar, t["Uo"])))
        u = nm.tanh(nm.add(nm.gather_rows(x_u, row), nm.matmul(h_bar, t["Uu"])))
        c[j] = nm.add(nm.multiply(i, u), c_sum)
        h[j] = nm.multiply(o, nm.tanh(c[j]))
    return h[int(batch.postorder[-1])]


def tree_cnn_forward(batch, params, config, training=False, rng=None):
    """Binary tree convolution stack with dynamic max pooling.

    Requires a binarized plan: internal nodes have exactly two children.
    "⊥" padding children contribute exactly zero to the parent
    pre-activation and are excluded from the pooled readout.
    """
    n = batch.n_nodes
    pad = batch.pad_mask
    kids = children_lists(batch)
    left_idx = np.zeros(n, dtype=np.intp)
    right_idx = np.zeros(n, dtype=np.intp)
    left_on = np.zeros(n)
    right_on = np.zeros(n)
    for j, ks in enumerate(kids):
        if len(ks) not in (0, 2):
            raise ModelError("tree_cnn requires a binarized plan (internal arity 2)")
        if ks:
            l, r = ks
            if not pad[l]:
                left_idx[j], left_on[j] = l, 1.0
            if not pad[r]:
                right_idx[j], right_on[j] = r, 1.0
    cur = batch.node_features
    dtype = cur.data.dtype
    for i in range(config.layers):
        pfx = f"tree.L{i}.tcnn"
        d_out = params[f"{pfx}.Wp"].tensor.shape[1]
        lmask = nm.const(np.repeat(left_on[:, None], d_out, axis=1), dtype)
        rmask = nm.const(np.repeat(right_on[:, None], d_out, axis=1), dtype)
        p_term = nm.linear(cur, params[f"{pfx}.Wp"].tensor, params[f"{pfx}.b"].tensor)
        l_term = nm.multiply(nm.matmul(nm.gather_rows(cur, left_idx), params[f"{pfx}.Wl"].tensor), lmask)
        r_term = nm.multiply(nm.matmul(nm.gather_rows(cur, right_idx), params[f"{pfx}.Wr"].tensor), rmask)
        cur = nm.relu(nm.add(nm.add(p_term, l_term), r_term))
        cur = _maybe_dropout(cur, config, training, rng)
    real = np.where(~pad)[0]
    d = cur.shape[1]
    cols = [nm.reshape(nm.gather_rows(cur, [int(i)]), (d, 1)) for i in real]
    pooled = cols[0] if len(cols) == 1 else nm.row_max(nm.concat(cols, axis=1))
    return nm.reshape(pooled, (1, d))


# ---------------------------------------------------------------------------
# Dispatch


def bigg_forward(batch, params, config, training=False, rng=None):
    """Stacked bidirectional layers, then GRU readout over post-order."""
    X = transform_node_features(batch, params, config, training, rng)
    return gru_aggregate(X, batch.postorder, params)


def forward(batch, params, config, training=False, rng=None):
    """Graph embedding (1, hidden_dim) for any configured model kind."""
    kind = config.model_kind
    if kind not in MODEL_KINDS:
        raise ModelError(f"unknown model kind {kind!r}; valid kinds: {MODEL_KINDS}")
    if kind == "tree_cnn":
        return tree_cnn_forward(batch, params, config, training, rng)
    if kind == "tree_lstm":
        return tree_lstm_forward(batch, params)
    if kind == "lstm":
        return lstm_forward(batch.node_features, batch.postorder, params)
    if kind == "lstm_attention":
        return lstm_attention_forward(batch.node_features, batch.postorder, params)
    if kind == "gru":
        return gru_aggregate(batch.node_features, batch.postorder, params)
    X = transform_node_features(batch, params, config, training, rng)
    if kind in _ADDPOOL_KINDS:
        return addpool_aggregate(X)
    return gru_aggregate(X, batch.postorder, params)
