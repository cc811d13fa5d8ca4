//! Per-timestep session graph and the differentiable state encoder.
//!
//! The graph links the user to candidate items (weighted by preference) and
//! candidate items to the attribute nodes they carry. A two-layer graph
//! convolution produces node representations; the accepted attributes, in
//! acceptance order, then pass through self-attention, a feed-forward block
//! and layer normalization before average pooling into the state vector.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::catalog::Catalog;
use crate::env::{OptionKind, SessionState};
use crate::error::{Error, Result};
use crate::kg_embed::EmbeddingTable;
use crate::neural::{dot, sigmoid, LayerNormAffine, Mlp, MultiHeadAttention, ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var};

/// `σ(e_u·e_v + Σ_acc e_v·e_p − Σ_rej e_v·e_p)`.
pub fn item_preference_score(s: &SessionState, tbl: &EmbeddingTable, c: &Catalog, item: usize) -> Result<f64> {
    if item >= c.num_items() {
        return Err(Error::OutOfRange(format!("item {item} of {}", c.num_items())));
    }
    preference(s, tbl, c, c.item_entity(item))
}

/// `σ(e_u·e_q + Σ_acc e_p·e_q − Σ_rej e_p·e_q)` for candidate attribute `q`.
pub fn attribute_preference_score(s: &SessionState, tbl: &EmbeddingTable, c: &Catalog, attr: usize) -> Result<f64> {
    if attr >= c.num_attributes() {
        return Err(Error::OutOfRange(format!("attribute {attr} of {}", c.num_attributes())));
    }
    preference(s, tbl, c, c.attribute_entity(attr))
}

fn preference(s: &SessionState, tbl: &EmbeddingTable, c: &Catalog, entity: usize) -> Result<f64> {
    let e = tbl.entity(entity)?;
    let mut logit = dot(tbl.entity(c.user_entity(s.user))?, e);
    for &p in &s.acc_attrs {
        logit += dot(e, tbl.entity(c.attribute_entity(p))?);
    }
    for &p in &s.rej_attrs {
        logit -= dot(e, tbl.entity(c.attribute_entity(p))?);
    }
    Ok(sigmoid(logit))
}

/// The `k` best ids by score, descending; ties go to the smaller id.
pub fn prune_candidates(ids: &[usize], scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("pruning size must be positive".into()));
    }
    if ids.len() != scores.len() {
        return Err(Error::shape("prune_candidates", format!("{} ids, {} scores", ids.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    Ok(order.into_iter().take(k).map(|i| ids[i]).collect())
}

/// Role of a node in the session graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeRole {
    User,
    AcceptedAttribute,
    CandidateAttribute,
    RejectedAttribute,
    CandidateItem,
    RejectedItem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphNode {
    /// Entity id in the catalog's shared namespace.
    pub entity: usize,
    pub role: NodeRole,
}

/// Session graph at one timestep, with the pruned action sets it was built on.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    nodes: Vec<GraphNode>,
    /// Undirected edges `(i, j, w)` with `i < j`.
    edges: Vec<(usize, usize, f64)>,
    degrees: Vec<f64>,
    normalized: SparseMatrix,
    /// Pruned candidate items / attributes (catalog ids), best first.
    items: Vec<usize>,
    attributes: Vec<usize>,
    item_nodes: Vec<usize>,
    attribute_nodes: Vec<usize>,
    accepted_nodes: Vec<usize>,
}

/// Builds the graph over the user, all answered attributes and rejected
/// items, and the top-`k_p` / top-`k_v` candidate attributes / items.
///
/// Edges: user–candidate item with weight `w_v`; candidate item–attribute
/// node with weight 1 whenever the item carries that attribute. Rejected
/// items have no edges.
pub fn build_dynamic_graph(s: &SessionState, tbl: &EmbeddingTable, c: &Catalog, k_v: usize, k_p: usize) -> Result<DynamicGraph> {
    let cand = s.candidates(c);
    let item_scores = cand
        .items
        .iter()
        .map(|&v| item_preference_score(s, tbl, c, v))
        .collect::<Result<Vec<_>>>()?;
    let items = prune_candidates(&cand.items, &item_scores, k_v)?;
    let attr_scores = cand
        .attributes
        .iter()
        .map(|&a| attribute_preference_score(s, tbl, c, a))
        .collect::<Result<Vec<_>>>()?;
    let attributes = prune_candidates(&cand.attributes, &attr_scores, k_p)?;
    let w_v: HashMap<usize, f64> = cand.items.iter().copied().zip(item_scores).collect();

    let mut nodes = vec![GraphNode {
        entity: c.user_entity(s.user),
        role: NodeRole::User,
    }];
    let mut attr_index: HashMap<usize, usize> = HashMap::new();
    let mut push_attrs = |nodes: &mut Vec<GraphNode>, ids: &mut dyn Iterator<Item = usize>, role| {
        let mut out = Vec::new();
        for a in ids {
            attr_index.insert(a, nodes.len());
            out.push(nodes.len());
            nodes.push(GraphNode {
                entity: c.attribute_entity(a),
                role,
            });
        }
        out
    };
    let accepted_nodes = push_attrs(&mut nodes, &mut s.acc_attrs.iter().copied(), NodeRole::AcceptedAttribute);
    let attribute_nodes = push_attrs(&mut nodes, &mut attributes.iter().copied(), NodeRole::CandidateAttribute);
    push_attrs(&mut nodes, &mut s.rej_attrs.iter().copied(), NodeRole::RejectedAttribute);

    let mut edges = Vec::new();
    let mut item_nodes = Vec::with_capacity(items.len());
    for &v in &items {
        let idx = nodes.len();
        item_nodes.push(idx);
        nodes.push(GraphNode {
            entity: c.item_entity(v),
            role: NodeRole::CandidateItem,
        });
        edges.push((0, idx, w_v[&v]));
        for a in c.item_attributes(v) {
            if let Some(&j) = attr_index.get(a) {
                edges.push((j.min(idx), j.max(idx), 1.0));
            }
        }
    }
    for &v in &s.rej_items {
        nodes.push(GraphNode {
            entity: c.item_entity(v),
            role: NodeRole::RejectedItem,
        });
    }
    Ok(DynamicGraph::from_edges(nodes, edges, items, attributes, item_nodes, attribute_nodes, accepted_nodes))
}

impl DynamicGraph {
    fn from_edges(
        nodes: Vec<GraphNode>,
        edges: Vec<(usize, usize, f64)>,
        items: Vec<usize>,
        attributes: Vec<usize>,
        item_nodes: Vec<usize>,
        attribute_nodes: Vec<usize>,
        accepted_nodes: Vec<usize>,
    ) -> Self {
        let n = nodes.len();
        let mut degrees = vec![0.0; n];
        for &(i, j, w) in &edges {
            degrees[i] += w;
            degrees[j] += w;
        }
        let mut entries = Vec::with_capacity(2 * edges.len());
        for &(i, j, w) in &edges {
            let norm = w / (degrees[i] * degrees[j]).sqrt();
            entries.push((i, j, norm));
            entries.push((j, i, norm));
        }
        Self {
            normalized: SparseMatrix::from_entries(n, n, entries),
            nodes,
            edges,
            degrees,
            items,
            attributes,
            item_nodes,
            attribute_nodes,
            accepted_nodes,
        }
    }

    /// A graph from explicit nodes and undirected edges, without action sets.
    pub fn from_parts(nodes: Vec<GraphNode>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = nodes.len();
        let mut canon = Vec::with_capacity(edges.len());
        for (i, j, w) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::InvalidArgument(format!("bad edge ({i}, {j}) for {n} nodes")));
            }
            canon.push((i.min(j), i.max(j), w));
        }
        let accepted = (0..n).filter(|&i| nodes[i].role == NodeRole::AcceptedAttribute).collect();
        Ok(Self::from_edges(nodes, canon, Vec::new(), Vec::new(), Vec::new(), Vec::new(), accepted))
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Symmetric edge weight between nodes `i` and `j` (0 if unlinked).
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (i.min(j), i.max(j));
        self.edges.iter().filter(|e| e.0 == a && e.1 == b).map(|e| e.2).sum()
    }

    /// `D^{-1/2} A D^{-1/2}`; rows of isolated nodes are empty.
    pub fn normalized_adjacency(&self) -> &SparseMatrix {
        &self.normalized
    }

    /// Pruned candidate ids for `option`, best first.
    pub fn actions(&self, option: OptionKind) -> &[usize] {
        match option {
            OptionKind::Ask => &self.attributes,
            OptionKind::Rec => &self.items,
        }
    }

    /// Node indices matching [`Self::actions`].
    pub fn action_nodes(&self, option: OptionKind) -> &[usize] {
        match option {
            OptionKind::Ask => &self.attribute_nodes,
            OptionKind::Rec => &self.item_nodes,
        }
    }

    /// Node indices of accepted attributes in acceptance order.
    pub fn accepted_nodes(&self) -> &[usize] {
        &self.accepted_nodes
    }

    pub fn node_of(&self, entity: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.entity == entity)
    }
}

/// One graph-convolution layer: `ReLU(Â X W + X B)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnLayer {
    pub neighbor: ParamId,
    pub own: ParamId,
}

/// Parameters of the state encoder, including the trainable node features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateEncoder {
    pub embeddings: ParamId,
    pub gcn: [GcnLayer; 2],
    pub attention: MultiHeadAttention,
    pub ffn: Mlp,
    pub norm: LayerNormAffine,
}

pub const ATTENTION_HEADS: usize = 2;

impl StateEncoder {
    /// Registers encoder parameters; node features start as a copy of `tbl`.
    pub fn register<R: Rng>(store: &mut ParamStore, tbl: &EmbeddingTable, rng: &mut R) -> Result<Self> {
        let d = tbl.dim();
        let embeddings = store.insert("encoder.embeddings", tbl.entities().clone())?;
        let bound = (6.0 / (2 * d) as f64).sqrt();
        let mut layer = |store: &mut ParamStore, l: usize| -> Result<GcnLayer> {
            Ok(GcnLayer {
                neighbor: store.insert_uniform(format!("encoder.gcn{l}.neighbor"), d, d, bound, rng)?,
                own: store.insert_uniform(format!("encoder.gcn{l}.own"), d, d, bound, rng)?,
            })
        };
        let gcn = [layer(store, 0)?, layer(store, 1)?];
        Ok(Self {
            embeddings,
            gcn,
            attention: MultiHeadAttention::register(store, "encoder.attention", d, ATTENTION_HEADS, rng)?,
            ffn: Mlp::register(store, "encoder.ffn", d, 2 * d, d, rng)?,
            norm: LayerNormAffine::register(store, "encoder.norm", d)?,
        })
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.embeddings).cols()
    }

    /// Two graph-convolution layers over the session graph (`n×d`).
    pub fn gcn_encode(&self, tape: &mut Tape, store: &ParamStore, g: &DynamicGraph) -> Result<Var> {
        if g.is_empty() {
            return Err(Error::Empty("graph without nodes".into()));
        }
        let table = tape.param(store, self.embeddings);
        let mut x = tape.gather_rows(table, g.nodes().iter().map(|n| n.entity).collect())?;
        let adj = Rc::new(g.normalized_adjacency().clone());
        for layer in &self.gcn {
            let w = tape.param(store, layer.neighbor);
            let b = tape.param(store, layer.own);
            let agg = tape.sparse_matmul(Rc::clone(&adj), x)?;
            let agg = tape.matmul(agg, w)?;
            let own = tape.matmul(x, b)?;
            let sum = tape.add(agg, own)?;
            x = tape.relu(sum);
        }
        Ok(x)
    }

    /// Attention block over accepted-attribute rows, then average pooling (`1×d`).
    pub fn encode_state(&self, tape: &mut Tape, store: &ParamStore, g: &DynamicGraph, node_reps: Var) -> Result<Var> {
        let seq_idx = g.accepted_nodes().to_vec();
        if seq_idx.is_empty() {
            return Err(Error::Empty("state without accepted attributes".into()));
        }
        let seq = tape.gather_rows(node_reps, seq_idx)?;
        let mask = vec![true; tape.value(seq).rows()];
        let attended = self.attention.forward(tape, store, seq, &mask)?;
        let residual = tape.add(attended, seq)?;
        let ffn = self.ffn.forward(tape, store, residual)?;
        let normed = self.norm.forward(tape, store, ffn)?;
        tape.mean_rows(normed)
    }

    /// Graph encoding plus state pooling; returns `(node_reps, state)`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, g: &DynamicGraph) -> Result<(Var, Var)> {
        let reps = self.gcn_encode(tape, store, g)?;
        let state = self.encode_state(tape, store, g, reps)?;
        Ok((reps, state))
    }
}

/// Dense reference of `D^{-1/2} A D^{-1/2}` used by tests and diagnostics.
pub fn dense_normalized_adjacency(g: &DynamicGraph) -> Tensor {
    let n = g.len();
    let mut a = Tensor::zeros(n, n);
    for &(i, j, w) in g.edges() {
        a.set(i, j, a.get(i, j) + w);
        a.set(j, i, a.get(j, i) + w);
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum()).collect();
    for i in 0..n {
        for j in 0..n {
            if deg[i] > 0.0 && deg[j] > 0.0 {
                a.set(i, j, a.get(i, j) / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    a
}
