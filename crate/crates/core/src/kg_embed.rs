//! Translation embeddings (head + relation ≈ tail) pretrained on the
//! catalog's knowledge-graph triples. They seed every node vector used by
//! the agent.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Triple};
use crate::error::{Error, Result};
use crate::neural::Tensor;

pub const EMBEDDING_FORMAT: &str = "cochpl-embeddings";

/// Entity and relation vectors of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    entities: Tensor,
    relations: Tensor,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    num_entities: usize,
    num_relations: usize,
    d: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    header: Header,
    entity_vectors: Vec<f64>,
    relation_vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(entities: Tensor, relations: Tensor, seed: u64) -> Result<Self> {
        if entities.cols() != relations.cols() {
            return Err(Error::shape(
                "embedding table",
                format!("entity dim {} vs relation dim {}", entities.cols(), relations.cols()),
            ));
        }
        if !entities.is_finite() || !relations.is_finite() {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(Self { entities, relations, seed })
    }

    /// All-zero table, handy as a neutral fixture.
    pub fn zeros(num_entities: usize, num_relations: usize, d: usize) -> Self {
        Self {
            entities: Tensor::zeros(num_entities, d),
            relations: Tensor::zeros(num_relations, d),
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entities(&self) -> &Tensor {
        &self.entities
    }

    pub fn relations(&self) -> &Tensor {
        &self.relations
    }

    pub fn entity(&self, id: usize) -> Result<&[f64]> {
        if id >= self.num_entities() {
            return Err(Error::OutOfRange(format!("entity {id} of {}", self.num_entities())));
        }
        Ok(self.entities.row_slice(id))
    }

    pub fn relation(&self, id: usize) -> Result<&[f64]> {
        if id >= self.num_relations() {
            return Err(Error::OutOfRange(format!("relation {id} of {}", self.num_relations())));
        }
        Ok(self.relations.row_slice(id))
    }

    pub fn set_entity(&mut self, id: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::shape("set_entity", format!("{} values for dim {}", values.len(), self.dim())));
        }
        self.entity(id)?;
        self.entities.row_slice_mut(id).copy_from_slice(values);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            header: Header {
                format: EMBEDDING_FORMAT.into(),
                num_entities: self.num_entities(),
                num_relations: self.num_relations(),
                d: self.dim(),
                seed: self.seed,
            },
            entity_vectors: self.entities.values().to_vec(),
            relation_vectors: self.relations.values().to_vec(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.header.format != EMBEDDING_FORMAT {
            return Err(Error::InvalidArgument(format!("not an embedding checkpoint: {}", ck.header.format)));
        }
        let h = ck.header;
        Self::new(
            Tensor::new(h.num_entities, h.d, ck.entity_vectors)?,
            Tensor::new(h.num_relations, h.d, ck.relation_vectors)?,
            h.seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `‖e_h + e_r − e_t‖₂`.
pub fn transe_energy(h: usize, r: usize, t: usize, tbl: &EmbeddingTable) -> Result<f64> {
    let (eh, er, et) = (tbl.entity(h)?, tbl.relation(r)?, tbl.entity(t)?);
    Ok(eh
        .iter()
        .zip(er)
        .zip(et)
        .map(|((a, b), c)| (a + b - c).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Draws corrupted triples that are not positives of the catalog.
#[derive(Debug)]
pub struct NegativeSampler<'a> {
    catalog: &'a Catalog,
    positives: HashSet<Triple>,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(catalog: &'a Catalog) -> Self {
        Self {
            catalog,
            positives: catalog.kg_triples().iter().copied().collect(),
        }
    }

    /// Replaces the head or the tail (chosen by a fair coin) with a uniform
    /// entity from the same namespace, rejecting positives.
    ///
    /// Falls back to the other slot when one slot admits no corruption.
    pub fn sample<R: Rng + ?Sized>(&self, triple: Triple, rng: &mut R) -> Result<Triple> {
        let head_range = self
            .catalog
            .namespace_range(triple.head)
            .ok_or_else(|| Error::OutOfRange(format!("entity {}", triple.head)))?;
        let tail_range = self
            .catalog
            .namespace_range(triple.tail)
            .ok_or_else(|| Error::OutOfRange(format!("entity {}", triple.tail)))?;
        let head_first = rng.gen_bool(0.5);
        let slots = if head_first { [true, false] } else { [false, true] };
        for replace_head in slots {
            let range = if replace_head { head_range.clone() } else { tail_range.clone() };
            let make = |e: usize| {
                if replace_head {
                    Triple { head: e, ..triple }
                } else {
                    Triple { tail: e, ..triple }
                }
            };
            if range.len() < 2 {
                continue;
            }
            for _ in 0..32 {
                let cand = make(rng.gen_range(range.clone()));
                if !self.positives.contains(&cand) {
                    return Ok(cand);
                }
            }
            let valid: Vec<Triple> = range.map(make).filter(|t| !self.positives.contains(t)).collect();
            if let Some(&t) = valid.choose(rng) {
                return Ok(t);
            }
        }
        Err(Error::InvalidArgument(format!(
            "cannot corrupt triple ({}, {}, {}): no negative in either namespace",
            triple.head, triple.relation, triple.tail
        )))
    }
}

/// One-off convenience wrapper around [`NegativeSampler`].
pub fn sample_negative<R: Rng + ?Sized>(triple: Triple, catalog: &Catalog, rng: &mut R) -> Result<Triple> {
    NegativeSampler::new(catalog).sample(triple, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransEConfig {
    pub d: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            d: 64,
            margin: 1.0,
            lr: 0.01,
            epochs: 100,
            batch: 128,
        }
    }
}

fn normalize_rows(t: &mut Tensor, only_if_longer: bool) {
    for r in 0..t.rows() {
        let row = t.row_slice_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && (!only_if_longer || norm > 1.0) {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

/// Adds `scale · (e_h + e_r − e_t)/‖·‖` into the gradient buffers.
fn accumulate_energy_grad(tbl: &EmbeddingTable, t: Triple, scale: f64, ge: &mut Tensor, gr: &mut Tensor) {
    let d = tbl.dim();
    let (eh, er, et) = (
        tbl.entities.row_slice(t.head),
        tbl.relations.row_slice(t.relation),
        tbl.entities.row_slice(t.tail),
    );
    let diff: Vec<f64> = (0..d).map(|i| eh[i] + er[i] - et[i]).collect();
    let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    for i in 0..d {
        let g = scale * diff[i] / norm;
        ge.row_slice_mut(t.head)[i] += g;
        gr.row_slice_mut(t.relation)[i] += g;
        ge.row_slice_mut(t.tail)[i] -= g;
    }
}

/// Pretrains embeddings and returns them with the mean hinge loss per epoch.
pub fn pretrain_transe_with_history(catalog: &Catalog, cfg: &TransEConfig, seed: u64) -> Result<(EmbeddingTable, Vec<f64>)> {
    let triples = catalog.kg_triples();
    if triples.is_empty() {
        return Err(Error::Empty("no knowledge-graph triples to embed".into()));
    }
    if cfg.d == 0 || cfg.batch == 0 {
        return Err(Error::Config("TransE d and batch must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.margin.is_finite()) {
        return Err(Error::Config("TransE lr and margin must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 6.0 / (cfg.d as f64).sqrt();
    let mut init = |rows: usize| {
        let mut t = Tensor::new(rows, cfg.d, (0..rows * cfg.d).map(|_| rng.gen_range(-bound..=bound)).collect())
            .expect("shape matches by construction");
        normalize_rows(&mut t, false);
        t
    };
    let entities = init(catalog.num_entities());
    let relations = init(catalog.num_relations());
    let mut tbl = EmbeddingTable::new(entities, relations, seed)?;

    let sampler = NegativeSampler::new(catalog);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut ge = Tensor::zeros(tbl.num_entities(), cfg.d);
            let mut gr = Tensor::zeros(tbl.num_relations(), cfg.d);
            for &i in chunk {
                let pos = triples[i];
                let neg = sampler.sample(pos, &mut rng)?;
                let loss = cfg.margin + transe_energy(pos.head, pos.relation, pos.tail, &tbl)?
                    - transe_energy(neg.head, neg.relation, neg.tail, &tbl)?;
                if loss > 0.0 {
                    total += loss;
                    accumulate_energy_grad(&tbl, pos, 1.0, &mut ge, &mut gr);
                    accumulate_energy_grad(&tbl, neg, -1.0, &mut ge, &mut gr);
                }
            }
            let step = cfg.lr / chunk.len() as f64;
            for (w, g) in tbl.entities.values_mut().iter_mut().zip(ge.values()) {
                *w -= step * g;
            }
            for (w, g) in tbl.relations.values_mut().iter_mut().zip(gr.values()) {
                *w -= step * g;
            }
        }
        normalize_rows(&mut tbl.entities, true);
        if !tbl.entities.is_finite() || !tbl.relations.is_finite() {
            return Err(Error::NonFinite("TransE diverged".into()));
        }
        history.push(total / triples.len() as f64);
    }
    Ok((tbl, history))
}

/// Margin-ranking TransE with one negative per positive.
///
/// Vectors start uniform in `[-6/√d, 6/√d]` and are normalized; entity
/// vectors are projected back into the unit ball after every epoch.
pub fn pretrain_transe(catalog: &Catalog, cfg: &TransEConfig, seed: u64) -> Result<EmbeddingTable> {
    Ok(pretrain_transe_with_history(catalog, cfg, seed)?.0)
}
