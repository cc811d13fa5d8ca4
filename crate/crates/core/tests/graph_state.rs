use cochpl::catalog::{AttributeRecord, Catalog, CatalogParts, InteractionRecord, ItemRecord};
use cochpl::env::{apply_choice_outcome, reset_session, Choice, OptionKind};
use cochpl::graph_state::{
    attribute_preference_score, build_dynamic_graph, dense_normalized_adjacency, item_preference_score,
    prune_candidates, DynamicGraph, GraphNode, NodeRole, StateEncoder,
};
use cochpl::kg_embed::EmbeddingTable;
use cochpl::neural::{finite_diff_check_subset, ParamStore, Tape, Tensor, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One user; items given as attribute lists over `n_attrs` attributes of one type.
fn catalog(items: &[&[usize]], n_attrs: usize) -> Catalog {
    Catalog::new(CatalogParts {
        items: items
            .iter()
            .enumerate()
            .map(|(i, a)| ItemRecord { item_id: i, attributes: a.to_vec() })
            .collect(),
        attributes: (0..n_attrs).map(|a| AttributeRecord { attribute_id: a, type_id: 0 }).collect(),
        interactions: vec![InteractionRecord { user_id: 0, item_id: 0 }],
        ..CatalogParts::default()
    })
    .unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn item_score_examples() {
    let c = catalog(&[&[0], &[0, 1]], 2);
    let mut tbl = EmbeddingTable::zeros(c.num_entities(), 1, 2);
    let s = reset_session(&c, 0, 0, 0).unwrap();
    assert_eq!(item_preference_score(&s, &tbl, &c, 0).unwrap(), 0.5);

    tbl.set_entity(c.user_entity(0), &[1.0, 0.0]).unwrap();
    tbl.set_entity(c.item_entity(0), &[1.0, 0.0]).unwrap();
    tbl.set_entity(c.attribute_entity(0), &[0.0, 1.0]).unwrap();
    let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!(close(item_preference_score(&s, &tbl, &c, 0).unwrap(), sigma1, 1e-12));
    assert!(close(sigma1, 0.73106, 1e-5));

    // Rejecting an attribute with a zero vector leaves the score unchanged.
    let mut r = s.clone();
    r.rej_attrs.insert(1);
    assert_eq!(item_preference_score(&r, &tbl, &c, 0).unwrap(), item_preference_score(&s, &tbl, &c, 0).unwrap());
    assert!(item_preference_score(&s, &tbl, &c, 9).is_err());
}

#[test]
fn attribute_score_examples() {
    let c = catalog(&[&[0, 1, 2]], 3);
    let mut tbl = EmbeddingTable::zeros(c.num_entities(), 1, 2);
    let s = reset_session(&c, 0, 0, 0).unwrap();
    let p = s.acc_attrs[0];
    let q = (0..3).find(|&a| a != p).unwrap();
    assert_eq!(attribute_preference_score(&s, &tbl, &c, q).unwrap(), 0.5);

    tbl.set_entity(c.attribute_entity(p), &[1.0, 0.0]).unwrap();
    tbl.set_entity(c.attribute_entity(q), &[1.0, 0.0]).unwrap();
    assert!(close(attribute_preference_score(&s, &tbl, &c, q).unwrap(), 0.7310585786300049, 1e-12));

    // Orthogonal to the user and to every answered attribute.
    let other = (0..3).find(|&a| a != p && a != q).unwrap();
    tbl.set_entity(c.attribute_entity(other), &[0.0, 3.0]).unwrap();
    tbl.set_entity(c.user_entity(0), &[2.0, 0.0]).unwrap();
    assert_eq!(attribute_preference_score(&s, &tbl, &c, other).unwrap(), 0.5);
}

#[test]
fn scores_stay_strictly_inside_unit_interval() {
    let c = catalog(&[&[0, 1], &[0, 2], &[1, 2]], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let mut tbl = EmbeddingTable::zeros(c.num_entities(), 1, 3);
        for e in 0..c.num_entities() {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            tbl.set_entity(e, &v).unwrap();
        }
        let s = reset_session(&c, 0, rng.gen_range(0..3), rng.gen()).unwrap();
        for v in 0..3 {
            let w = item_preference_score(&s, &tbl, &c, v).unwrap();
            assert!(w > 0.0 && w < 1.0);
        }
        for a in 0..3 {
            let w = attribute_preference_score(&s, &tbl, &c, a).unwrap();
            assert!(w > 0.0 && w < 1.0);
        }
    }
}

#[test]
fn pruning_examples() {
    assert_eq!(prune_candidates(&[4, 2, 9], &[0.1, 0.2, 0.3], 5).unwrap(), vec![9, 2, 4]);
    assert_eq!(prune_candidates(&[10, 11, 12], &[0.9, 0.1, 0.5], 2).unwrap(), vec![10, 12]);
    assert_eq!(prune_candidates(&[7, 3, 5], &[0.5, 0.5, 0.5], 2).unwrap(), vec![3, 5]);
    assert!(prune_candidates(&[1], &[0.5], 0).is_err());
    assert!(prune_candidates(&[1, 2], &[0.5], 1).is_err());
}

#[test]
fn pruning_is_a_deterministic_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.gen_range(0..30);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..5u8)) / 4.0).collect();
        let k = rng.gen_range(1..12);
        let out = prune_candidates(&ids, &scores, k).unwrap();
        assert_eq!(out.len(), n.min(k));
        assert!(out.iter().all(|x| ids.contains(x)));
        assert_eq!(out, prune_candidates(&ids, &scores, k).unwrap());
    }
}

#[test]
fn fresh_session_with_one_candidate_item() {
    // Item 0 carries {0, 1}; item 1 carries {2}. Opening attribute 0 or 1 leaves item 0 alone.
    let c = catalog(&[&[0, 1], &[2]], 3);
    let tbl = EmbeddingTable::zeros(c.num_entities(), 1, 2);
    let s = reset_session(&c, 0, 0, 0).unwrap();
    let g = build_dynamic_graph(&s, &tbl, &c, 10, 10).unwrap();
    assert_eq!(g.actions(OptionKind::Rec), &[0]);
    let user_item = g.edges().iter().filter(|e| e.0 == 0).count();
    assert_eq!(user_item, 1);
    assert_eq!(g.edges().len() - user_item, 2);
    let item = g.action_nodes(OptionKind::Rec)[0];
    assert_eq!(g.weight(0, item), 0.5);
    for &(i, j, _) in g.edges() {
        assert!(g.nodes()[i].role == NodeRole::User || g.nodes()[j].role == NodeRole::CandidateItem);
    }
}

#[test]
fn user_isolated_without_candidates_and_rejected_items_have_no_edges() {
    let c = catalog(&[&[0, 1], &[0]], 2);
    let tbl = EmbeddingTable::zeros(c.num_entities(), 1, 2);
    let mut s = reset_session(&c, 0, 1, 0).unwrap();
    s = apply_choice_outcome(&s, &c, Choice::Item(0), false).unwrap();
    let g = build_dynamic_graph(&s, &tbl, &c, 10, 10).unwrap();
    let rej = g.node_of(c.item_entity(0)).unwrap();
    assert_eq!(g.nodes()[rej].role, NodeRole::RejectedItem);
    assert_eq!(g.degrees()[rej], 0.0);
    assert!(g.degrees()[0] > 0.0);

    s = apply_choice_outcome(&s, &c, Choice::Item(1), false).unwrap();
    let g = build_dynamic_graph(&s, &tbl, &c, 10, 10).unwrap();
    assert!(g.actions(OptionKind::Rec).is_empty());
    assert_eq!(g.degrees()[0], 0.0);
}

#[test]
fn graph_is_symmetric_and_degrees_are_row_sums() {
    let c = catalog(&[&[0, 1, 2], &[0, 2], &[0, 1], &[0, 3]], 4);
    let mut tbl = EmbeddingTable::zeros(c.num_entities(), 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for e in 0..c.num_entities() {
        tbl.set_entity(e, &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap();
    }
    let mut s = reset_session(&c, 0, 0, 3).unwrap();
    s.acc_attrs = vec![0];
    s = apply_choice_outcome(&s, &c, Choice::Attribute(3), false).unwrap();
    let g = build_dynamic_graph(&s, &tbl, &c, 2, 10).unwrap();
    assert_eq!(g.actions(OptionKind::Rec).len(), 2);
    let n = g.len();
    for i in 0..n {
        let row: f64 = (0..n).filter(|&j| j != i).map(|j| g.weight(i, j)).sum();
        assert!(close(row, g.degrees()[i], 1e-12));
        for j in 0..n {
            assert_eq!(g.weight(i, j), g.weight(j, i));
        }
    }
    let dense = dense_normalized_adjacency(&g);
    assert!(close(g.normalized_adjacency().to_dense().values().iter().zip(dense.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max), 0.0, 1e-15));
}

fn node(entity: usize, role: NodeRole) -> GraphNode {
    GraphNode { entity, role }
}

#[test]
fn star_graph_normalization() {
    let nodes = (0..5).map(|i| node(i, if i == 0 { NodeRole::User } else { NodeRole::CandidateItem })).collect();
    let g = DynamicGraph::from_parts(nodes, (1..5).map(|i| (0, i, 1.0)).collect()).unwrap();
    let a = g.normalized_adjacency().to_dense();
    for leaf in 1..5 {
        assert!(close(a.get(0, leaf), 0.5, 1e-15));
        assert!(close(a.get(leaf, 0), 0.5, 1e-15));
    }
    // Σ_i Â_si · √(d_i/d_s) = 1 for non-isolated s.
    let d = g.degrees();
    for s in 0..5 {
        let sum: f64 = (0..5).map(|i| a.get(s, i) * (d[i] / d[s]).sqrt()).sum();
        assert!(close(sum, 1.0, 1e-12));
    }
}

struct Fixture {
    store: ParamStore,
    enc: StateEncoder,
}

fn encoder(num_entities: usize, d: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tbl = EmbeddingTable::zeros(num_entities, 1, d);
    for e in 0..num_entities {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tbl.set_entity(e, &v).unwrap();
    }
    let mut store = ParamStore::new();
    let enc = StateEncoder::register(&mut store, &tbl, &mut rng).unwrap();
    Fixture { store, enc }
}

fn set(store: &mut ParamStore, id: cochpl::neural::ParamId, t: Tensor) {
    *store.get_mut(id) = t;
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn mat_vec_row(x: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols()).map(|j| (0..m.rows()).map(|i| x[i] * m.get(i, j)).sum()).collect()
}

#[test]
fn isolated_node_sees_only_itself() {
    let mut f = encoder(3, 2, 1);
    let own = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
    set(&mut f.store, f.enc.gcn[0].own, own.clone());
    set(&mut f.store, f.enc.gcn[1].own, own.clone());
    let g = DynamicGraph::from_parts(vec![node(2, NodeRole::User)], vec![]).unwrap();
    let mut tape = Tape::new();
    let reps = f.enc.gcn_encode(&mut tape, &f.store, &g).unwrap();
    let e = f.store.get(f.enc.embeddings).row_slice(2).to_vec();
    let h1: Vec<f64> = mat_vec_row(&e, &own).into_iter().map(relu).collect();
    let h2: Vec<f64> = mat_vec_row(&h1, &own).into_iter().map(relu).collect();
    assert_eq!(tape.value(reps).row_slice(0), &h2[..]);
}

#[test]
fn two_node_graph_matches_dense_oracle() {
    let mut f = encoder(2, 4, 2);
    for l in 0..2 {
        set(&mut f.store, f.enc.gcn[l].neighbor, Tensor::identity(4));
        set(&mut f.store, f.enc.gcn[l].own, Tensor::identity(4));
    }
    let feats = Tensor::from_rows(&[vec![0.2, 0.0, 1.0, 0.4], vec![0.5, 0.3, 0.0, 0.0]]).unwrap();
    set(&mut f.store, f.enc.embeddings, feats.clone());
    let g = DynamicGraph::from_parts(vec![node(0, NodeRole::User), node(1, NodeRole::CandidateItem)], vec![(0, 1, 1.0)]).unwrap();
    let mut tape = Tape::new();
    let reps = f.enc.gcn_encode(&mut tape, &f.store, &g).unwrap();
    // Degree 1 on both ends: each layer maps (x0, x1) to (x0 + x1, x1 + x0).
    let x0 = feats.row_slice(0);
    let x1 = feats.row_slice(1);
    let l1: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| a + b).collect();
    let l2: Vec<f64> = l1.iter().map(|v| 2.0 * v).collect();
    for r in 0..2 {
        for (a, b) in tape.value(reps).row_slice(r).iter().zip(&l2) {
            assert!(close(*a, *b, 1e-15));
        }
    }
}

#[test]
fn gcn_is_permutation_equivariant() {
    let f = encoder(6, 4, 3);
    let roles = [NodeRole::User, NodeRole::CandidateItem, NodeRole::CandidateItem, NodeRole::AcceptedAttribute, NodeRole::CandidateAttribute];
    let nodes: Vec<GraphNode> = (0..5).map(|i| node(i, roles[i])).collect();
    let edges = vec![(0, 1, 0.7), (0, 2, 0.4), (1, 3, 1.0), (2, 3, 1.0), (2, 4, 1.0)];
    let perm = [3, 0, 4, 1, 2];
    let pnodes: Vec<GraphNode> = perm.iter().map(|&p| nodes[p]).collect();
    let inv: Vec<usize> = (0..5).map(|i| perm.iter().position(|&p| p == i).unwrap()).collect();
    let pedges = edges.iter().map(|&(i, j, w)| (inv[i], inv[j], w)).collect();
    let g = DynamicGraph::from_parts(nodes, edges).unwrap();
    let pg = DynamicGraph::from_parts(pnodes, pedges).unwrap();
    let mut t = Tape::new();
    let a = f.enc.gcn_encode(&mut t, &f.store, &g).unwrap();
    let b = f.enc.gcn_encode(&mut t, &f.store, &pg).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        for (x, y) in t.value(b).row_slice(new).iter().zip(t.value(a).row_slice(old)) {
            assert!(close(*x, *y, 1e-14));
        }
    }
}

/// Straight-line evaluation of attention, feed-forward, normalization and pooling.
fn oracle_state(store: &ParamStore, enc: &StateEncoder, rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let heads = enc.attention.heads;
    let dh = d / heads;
    let proj = |id| -> Vec<Vec<f64>> { rows.iter().map(|r| mat_vec_row(r, store.get(id))).collect() };
    let (q, k, v) = (proj(enc.attention.query), proj(enc.attention.key), proj(enc.attention.value));
    let mut joined = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for c in cols.clone() {
                joined[i][c] = (0..n).map(|j| ex[j] / z * v[j][c]).sum();
            }
        }
    }
    let out: Vec<Vec<f64>> = joined.iter().map(|r| mat_vec_row(r, store.get(enc.attention.output))).collect();
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        let res: Vec<f64> = out[i].iter().zip(&rows[i]).map(|(a, b)| a + b).collect();
        let hid: Vec<f64> = mat_vec_row(&res, store.get(enc.ffn.hidden.weight))
            .iter()
            .zip(store.get(enc.ffn.hidden.bias).values())
            .map(|(a, b)| relu(a + b))
            .collect();
        let ffn: Vec<f64> = mat_vec_row(&hid, store.get(enc.ffn.output.weight))
            .iter()
            .zip(store.get(enc.ffn.output.bias).values())
            .map(|(a, b)| a + b)
            .collect();
        let mean = ffn.iter().sum::<f64>() / d as f64;
        let var = ffn.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let gain = store.get(enc.norm.gain).values();
        let shift = store.get(enc.norm.shift).values();
        for c in 0..d {
            pooled[c] += ((ffn[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[c] + shift[c]) / n as f64;
        }
    }
    pooled
}

fn accepted_graph(entities: &[usize]) -> DynamicGraph {
    let mut nodes = vec![node(0, NodeRole::User)];
    nodes.extend(entities.iter().map(|&e| node(e, NodeRole::AcceptedAttribute)));
    DynamicGraph::from_parts(nodes, vec![]).unwrap()
}

#[test]
fn state_encoding_matches_straight_line_oracle() {
    let mut f = encoder(8, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for id in f.store.ids().collect::<Vec<_>>() {
        if id == f.enc.embeddings {
            continue;
        }
        for v in f.store.get_mut(id).values_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    let g = accepted_graph(&[3, 5, 7]);
    let mut tape = Tape::new();
    let reps = tape.constant(f.store.get(f.enc.embeddings).clone());
    // Feed raw features through the attention block by treating the table as node reps.
    let rows: Vec<Vec<f64>> = [3, 5, 7].iter().map(|&e| f.store.get(f.enc.embeddings).row_slice(e).to_vec()).collect();
    let graph_rows = DynamicGraph::from_parts(
        (0..8).map(|e| node(e, if [3, 5, 7].contains(&e) { NodeRole::AcceptedAttribute } else { NodeRole::RejectedItem })).collect(),
        vec![],
    )
    .unwrap();
    let state = f.enc.encode_state(&mut tape, &f.store, &graph_rows, reps).unwrap();
    let want = oracle_state(&f.store, &f.enc, &rows);
    for (a, b) in tape.value(state).values().iter().zip(&want) {
        assert!(close(*a, *b, 1e-10), "{a} vs {b}");
    }
    assert_eq!(g.accepted_nodes(), &[1, 2, 3]);
}

#[test]
fn pooling_identities() {
    let f = encoder(6, 4, 6);
    let mut tape = Tape::new();
    let reps = tape.constant(Tensor::from_rows(&[vec![0.0; 4], vec![0.3, -0.2, 0.9, 0.1], vec![0.3, -0.2, 0.9, 0.1]]).unwrap());
    let one = DynamicGraph::from_parts(vec![node(0, NodeRole::User), node(1, NodeRole::AcceptedAttribute), node(2, NodeRole::User)], vec![]).unwrap();
    let two = DynamicGraph::from_parts(
        vec![node(0, NodeRole::User), node(1, NodeRole::AcceptedAttribute), node(2, NodeRole::AcceptedAttribute)],
        vec![],
    )
    .unwrap();
    let a = f.enc.encode_state(&mut tape, &f.store, &one, reps).unwrap();
    let b = f.enc.encode_state(&mut tape, &f.store, &two, reps).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    let single = oracle_state(&f.store, &f.enc, &[vec![0.3, -0.2, 0.9, 0.1]]);
    for (x, y) in tape.value(a).values().iter().zip(&single) {
        assert!(close(*x, *y, 1e-12));
    }
    let none = DynamicGraph::from_parts(vec![node(0, NodeRole::User)], vec![]).unwrap();
    assert!(f.enc.encode_state(&mut tape, &f.store, &none, reps).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let c = catalog(&[&[0, 1, 2], &[0, 2], &[0, 1], &[0, 3], &[1, 3]], 4);
    for seed in 0..3 {
        let f = encoder(c.num_entities(), 4, 10 + seed);
        let tbl = EmbeddingTable::new(f.store.get(f.enc.embeddings).clone(), Tensor::zeros(1, 4), 0).unwrap();
        let mut s = reset_session(&c, 0, 0, seed).unwrap();
        s.acc_attrs = vec![0];
        s = apply_choice_outcome(&s, &c, Choice::Attribute(1), true).unwrap();
        s = apply_choice_outcome(&s, &c, Choice::Attribute(2), false).unwrap();
        let g = build_dynamic_graph(&s, &tbl, &c, 10, 10).unwrap();
        let head = Tensor::new(4, 1, vec![0.7, -0.4, 0.2, 0.9]).unwrap();
        let ids: Vec<_> = f.store.ids().collect();
        let report = finite_diff_check_subset(&f.store, &ids, 1e-6, |p, t| {
            let (reps, state) = f.enc.encode(t, p, &g)?;
            let w = t.constant(head.clone());
            let out = t.matmul(state, w)?;
            let item = t.gather_rows(reps, vec![g.action_nodes(OptionKind::Rec)[0]])?;
            let extra = t.sum(item);
            let s = t.sum(out);
            t.add(s, extra)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
    }
}
