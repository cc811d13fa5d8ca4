//! The static recommendation world: users, items, typed attributes,
//! interactions and knowledge-graph triples.
//!
//! On disk a catalog is a directory of line-delimited JSON files:
//!
//! | file                | record                                              |
//! |---------------------|-----------------------------------------------------|
//! | `items.jsonl`       | `{"item_id": int, "attributes": [int, ...]}`        |
//! | `attributes.jsonl`  | `{"attribute_id": int, "type_id": int}`             |
//! | `interactions.jsonl`| `{"user_id": int, "item_id": int}`                  |
//! | `kg_triples.jsonl`  | `{"head": int, "relation": int, "tail": int}`       |
//! | `labels.jsonl`      | `{"kind": "item"/"attribute"/"type", "id", "label"}` (optional) |
//!
//! Entity ids in triples use one shared namespace: users `[0, U)`, items
//! `[U, U+V)`, attributes `[U+V, U+V+P)`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const ATTRIBUTES_FILE: &str = "attributes.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const TRIPLES_FILE: &str = "kg_triples.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

/// Relation used by [`generate_synthetic`] for user→item triples.
pub const RELATION_INTERACTED: usize = 0;
/// Relation used by [`generate_synthetic`] for item→attribute triples.
pub const RELATION_HAS_ATTRIBUTE: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub item_id: usize,
    pub attributes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRecord {
    pub attribute_id: usize,
    pub type_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub item_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Item,
    Attribute,
    Type,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub kind: LabelKind,
    pub id: usize,
    pub label: String,
}

/// Unvalidated catalog contents, one field per file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CatalogParts {
    pub items: Vec<ItemRecord>,
    pub attributes: Vec<AttributeRecord>,
    pub interactions: Vec<InteractionRecord>,
    pub kg_triples: Vec<Triple>,
    pub labels: Vec<LabelRecord>,
}

/// Which namespace an entity id falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Entity {
    User(usize),
    Item(usize),
    Attribute(usize),
}

/// Counts reported after loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogStats {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub types: usize,
    pub interactions: usize,
    pub triples: usize,
}

impl fmt::Display for CatalogStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} users, {} items, {} attributes, {} types, {} interactions, {} triples",
            self.users, self.items, self.attributes, self.types, self.interactions, self.triples
        )
    }
}

/// A violated catalog invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub invariant: &'static str,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.invariant, self.message)
    }
}

/// Validated, immutable catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    num_users: usize,
    num_types: usize,
    num_relations: usize,
    item_attributes: Vec<Vec<usize>>,
    attribute_types: Vec<usize>,
    items_by_attribute: Vec<Vec<usize>>,
    interactions: Vec<(usize, usize)>,
    kg_triples: Vec<Triple>,
    labels: HashMap<(LabelKind, usize), String>,
}

fn issue(invariant: &'static str, message: String) -> Issue {
    Issue { invariant, message }
}

fn dense_ids(ids: &[usize], what: &'static str, issues: &mut Vec<Issue>) {
    let mut seen = HashSet::new();
    for &id in ids {
        if !seen.insert(id) {
            issues.push(issue("unique-id", format!("duplicate {what} id {id}")));
        }
    }
    for id in 0..ids.len() {
        if !seen.contains(&id) {
            issues.push(issue("dense-id", format!("{what} ids are not dense: {id} missing")));
            break;
        }
    }
}

/// Checks every catalog invariant; an empty list means the parts are valid.
pub fn validate_catalog(parts: &CatalogParts) -> Vec<Issue> {
    let mut issues = Vec::new();
    if parts.items.is_empty() {
        issues.push(issue("non-empty", "no items".into()));
    }
    if parts.attributes.is_empty() {
        issues.push(issue("non-empty", "no attributes".into()));
    }

    let attr_ids: Vec<usize> = parts.attributes.iter().map(|a| a.attribute_id).collect();
    let mut type_of: HashMap<usize, usize> = HashMap::new();
    for a in &parts.attributes {
        match type_of.get(&a.attribute_id) {
            Some(&t) if t != a.type_id => issues.push(issue(
                "single-type",
                format!("attribute {} listed under types {} and {}", a.attribute_id, t, a.type_id),
            )),
            Some(_) => issues.push(issue("unique-id", format!("duplicate attribute id {}", a.attribute_id))),
            None => {
                type_of.insert(a.attribute_id, a.type_id);
            }
        }
    }
    let unique_attrs: BTreeSet<usize> = attr_ids.iter().copied().collect();
    if let Some(missing) = (0..unique_attrs.len()).find(|i| !unique_attrs.contains(i)) {
        issues.push(issue("dense-id", format!("attribute ids are not dense: {missing} missing")));
    }
    let types: BTreeSet<usize> = type_of.values().copied().collect();
    if let Some(missing) = (0..types.len()).find(|i| !types.contains(i)) {
        issues.push(issue("dense-id", format!("type ids are not dense: {missing} missing")));
    }
    let num_attributes = unique_attrs.len();

    let item_ids: Vec<usize> = parts.items.iter().map(|i| i.item_id).collect();
    dense_ids(&item_ids, "item", &mut issues);
    let num_items = parts.items.len();
    for item in &parts.items {
        if item.attributes.is_empty() {
            issues.push(issue("item-has-attribute", format!("item {} has no attributes", item.item_id)));
        }
        let mut seen = HashSet::new();
        for &a in &item.attributes {
            if !type_of.contains_key(&a) {
                issues.push(issue(
                    "dangling-reference",
                    format!("dangling attribute {a} in item {} ({num_attributes} attributes)", item.item_id),
                ));
            }
            if !seen.insert(a) {
                issues.push(issue("unique-id", format!("attribute {a} repeated in item {}", item.item_id)));
            }
        }
    }

    let num_users = parts.interactions.iter().map(|r| r.user_id + 1).max().unwrap_or(0);
    for r in &parts.interactions {
        if r.item_id >= num_items {
            issues.push(issue(
                "dangling-reference",
                format!("dangling item {} in interaction of user {}", r.item_id, r.user_id),
            ));
        }
    }
    let num_entities = num_users + num_items + num_attributes;
    for (i, t) in parts.kg_triples.iter().enumerate() {
        for e in [t.head, t.tail] {
            if e >= num_entities {
                issues.push(issue(
                    "dangling-reference",
                    format!("dangling entity {e} in triple {i} ({num_entities} entities)"),
                ));
            }
        }
    }
    for l in &parts.labels {
        let bound = match l.kind {
            LabelKind::Item => num_items,
            LabelKind::Attribute => num_attributes,
            LabelKind::Type => types.len(),
        };
        if l.id >= bound {
            issues.push(issue("dangling-reference", format!("dangling {:?} label id {}", l.kind, l.id)));
        }
    }
    issues
}

impl Catalog {
    /// Validates `parts` and builds the catalog.
    pub fn new(parts: CatalogParts) -> Result<Self> {
        let issues = validate_catalog(&parts);
        if let Some(first) = issues.first() {
            if first.message == "no items" {
                return Err(Error::Catalog("no items".into()));
            }
            let all: Vec<String> = issues.iter().map(ToString::to_string).collect();
            return Err(Error::Catalog(all.join("; ")));
        }
        let mut attribute_types = vec![0; parts.attributes.len()];
        for a in &parts.attributes {
            attribute_types[a.attribute_id] = a.type_id;
        }
        let num_types = attribute_types.iter().map(|t| t + 1).max().unwrap_or(0);
        let mut item_attributes = vec![Vec::new(); parts.items.len()];
        for item in parts.items {
            let mut attrs = item.attributes;
            attrs.sort_unstable();
            item_attributes[item.item_id] = attrs;
        }
        let mut items_by_attribute = vec![Vec::new(); attribute_types.len()];
        for (v, attrs) in item_attributes.iter().enumerate() {
            for &a in attrs {
                items_by_attribute[a].push(v);
            }
        }
        let num_users = parts.interactions.iter().map(|r| r.user_id + 1).max().unwrap_or(0);
        let num_relations = parts.kg_triples.iter().map(|t| t.relation + 1).max().unwrap_or(0);
        Ok(Self {
            num_users,
            num_types,
            num_relations,
            item_attributes,
            attribute_types,
            items_by_attribute,
            interactions: parts.interactions.iter().map(|r| (r.user_id, r.item_id)).collect(),
            kg_triples: parts.kg_triples,
            labels: parts.labels.into_iter().map(|l| ((l.kind, l.id), l.label)).collect(),
        })
    }

    pub fn to_parts(&self) -> CatalogParts {
        let mut labels: Vec<LabelRecord> = self
            .labels
            .iter()
            .map(|(&(kind, id), label)| LabelRecord {
                kind,
                id,
                label: label.clone(),
            })
            .collect();
        labels.sort_by(|a, b| (a.kind, a.id).cmp(&(b.kind, b.id)));
        CatalogParts {
            items: self
                .item_attributes
                .iter()
                .enumerate()
                .map(|(item_id, attrs)| ItemRecord {
                    item_id,
                    attributes: attrs.clone(),
                })
                .collect(),
            attributes: self
                .attribute_types
                .iter()
                .enumerate()
                .map(|(attribute_id, &type_id)| AttributeRecord { attribute_id, type_id })
                .collect(),
            interactions: self
                .interactions
                .iter()
                .map(|&(user_id, item_id)| InteractionRecord { user_id, item_id })
                .collect(),
            kg_triples: self.kg_triples.clone(),
            labels,
        }
    }

    pub fn stats(&self) -> CatalogStats {
        CatalogStats {
            users: self.num_users,
            items: self.num_items(),
            attributes: self.num_attributes(),
            types: self.num_types,
            interactions: self.interactions.len(),
            triples: self.kg_triples.len(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.item_attributes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_types.len()
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_entities(&self) -> usize {
        self.num_users + self.num_items() + self.num_attributes()
    }

    /// Sorted attribute ids of `item`.
    pub fn item_attributes(&self, item: usize) -> &[usize] {
        &self.item_attributes[item]
    }

    /// Sorted ids of items carrying `attribute`.
    pub fn items_with_attribute(&self, attribute: usize) -> &[usize] {
        &self.items_by_attribute[attribute]
    }

    pub fn attribute_type(&self, attribute: usize) -> usize {
        self.attribute_types[attribute]
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    pub fn kg_triples(&self) -> &[Triple] {
        &self.kg_triples
    }

    pub fn label(&self, kind: LabelKind, id: usize) -> Option<&str> {
        self.labels.get(&(kind, id)).map(String::as_str)
    }

    pub fn user_entity(&self, user: usize) -> usize {
        user
    }

    pub fn item_entity(&self, item: usize) -> usize {
        self.num_users + item
    }

    pub fn attribute_entity(&self, attribute: usize) -> usize {
        self.num_users + self.num_items() + attribute
    }

    pub fn entity(&self, id: usize) -> Option<Entity> {
        let (u, v) = (self.num_users, self.num_items());
        if id < u {
            Some(Entity::User(id))
        } else if id < u + v {
            Some(Entity::Item(id - u))
        } else if id < self.num_entities() {
            Some(Entity::Attribute(id - u - v))
        } else {
            None
        }
    }

    /// Entity-id range of the namespace containing `id`.
    pub fn namespace_range(&self, id: usize) -> Option<std::ops::Range<usize>> {
        let (u, v) = (self.num_users, self.num_items());
        Some(match self.entity(id)? {
            Entity::User(_) => 0..u,
            Entity::Item(_) => u..u + v,
            Entity::Attribute(_) => u + v..self.num_entities(),
        })
    }

    /// Copy whose user→item triples for the listed pairs are removed.
    ///
    /// Used to keep held-out interactions out of embedding pretraining.
    pub fn without_interaction_triples(&self, pairs: &[(usize, usize)]) -> Catalog {
        let hidden: HashSet<(usize, usize)> = pairs
            .iter()
            .map(|&(u, v)| (self.user_entity(u), self.item_entity(v)))
            .collect();
        let mut out = self.clone();
        out.kg_triples.retain(|t| !hidden.contains(&(t.head, t.tail)));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let parts = self.to_parts();
        write_jsonl(&dir.join(ITEMS_FILE), &parts.items)?;
        write_jsonl(&dir.join(ATTRIBUTES_FILE), &parts.attributes)?;
        write_jsonl(&dir.join(INTERACTIONS_FILE), &parts.interactions)?;
        write_jsonl(&dir.join(TRIPLES_FILE), &parts.kg_triples)?;
        if !parts.labels.is_empty() {
            write_jsonl(&dir.join(LABELS_FILE), &parts.labels)?;
        }
        Ok(())
    }

    /// Serializes all files into one string, used for byte-level comparisons.
    pub fn to_jsonl_bundle(&self) -> Result<String> {
        let parts = self.to_parts();
        let mut out = String::new();
        for line in jsonl_lines(&parts.items)?
            .into_iter()
            .chain(jsonl_lines(&parts.attributes)?)
            .chain(jsonl_lines(&parts.interactions)?)
            .chain(jsonl_lines(&parts.kg_triples)?)
            .chain(jsonl_lines(&parts.labels)?)
        {
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }
}

fn jsonl_lines<T: Serialize>(records: &[T]) -> Result<Vec<String>> {
    records.iter().map(|r| Ok(serde_json::to_string(r)?)).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for line in jsonl_lines(records)? {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads the catalog files in `dir` and validates them.
pub fn load_catalog(dir: &Path) -> Result<Catalog> {
    let labels_path = dir.join(LABELS_FILE);
    let parts = CatalogParts {
        items: read_jsonl(&dir.join(ITEMS_FILE))?,
        attributes: read_jsonl(&dir.join(ATTRIBUTES_FILE))?,
        interactions: read_jsonl(&dir.join(INTERACTIONS_FILE))?,
        kg_triples: read_jsonl(&dir.join(TRIPLES_FILE))?,
        labels: if labels_path.exists() {
            read_jsonl(&labels_path)?
        } else {
            Vec::new()
        },
    };
    Catalog::new(parts)
}

/// Parameters of the synthetic catalog generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_attributes: usize,
    pub num_types: usize,
    pub attrs_per_item: usize,
    pub interactions_per_user: usize,
    /// Zipf exponent of attribute popularity; `0` draws attributes uniformly.
    #[serde(default)]
    pub popularity_exponent: f64,
}

impl SynthConfig {
    pub fn new(
        num_users: usize,
        num_items: usize,
        num_attributes: usize,
        num_types: usize,
        attrs_per_item: usize,
        interactions_per_user: usize,
    ) -> Self {
        Self {
            num_users,
            num_items,
            num_attributes,
            num_types,
            attrs_per_item,
            interactions_per_user,
            popularity_exponent: 0.0,
        }
    }

    pub fn with_popularity_exponent(mut self, exponent: f64) -> Self {
        self.popularity_exponent = exponent;
        self
    }
}

/// Generates a random catalog, deterministic for a fixed `seed`.
///
/// Attribute `a` has type `a % num_types`. Each item draws `attrs_per_item`
/// distinct attributes, weighted by a Zipf popularity over a seeded random
/// ranking of the attributes. Each user interacts with
/// `interactions_per_user` distinct uniformly drawn items. Triples are
/// `(user, RELATION_INTERACTED, item)` and `(item, RELATION_HAS_ATTRIBUTE, attribute)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Catalog> {
    if cfg.attrs_per_item == 0 {
        return Err(Error::Config("attrs_per_item must be at least 1".into()));
    }
    if cfg.attrs_per_item > cfg.num_attributes {
        return Err(Error::Config(format!(
            "attrs_per_item {} exceeds num_attributes {}",
            cfg.attrs_per_item, cfg.num_attributes
        )));
    }
    if cfg.num_types == 0 || cfg.num_types > cfg.num_attributes {
        return Err(Error::Config(format!(
            "num_types {} must be in 1..={}",
            cfg.num_types, cfg.num_attributes
        )));
    }
    if cfg.num_items == 0 {
        return Err(Error::Config("num_items must be at least 1".into()));
    }
    if cfg.interactions_per_user > cfg.num_items {
        return Err(Error::Config(format!(
            "interactions_per_user {} exceeds num_items {}",
            cfg.interactions_per_user, cfg.num_items
        )));
    }
    if !(cfg.popularity_exponent.is_finite() && cfg.popularity_exponent >= 0.0) {
        return Err(Error::Config("popularity_exponent must be finite and non-negative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranking: Vec<usize> = (0..cfg.num_attributes).collect();
    ranking.shuffle(&mut rng);
    let weighted: Vec<(usize, f64)> = ranking
        .iter()
        .enumerate()
        .map(|(rank, &a)| (a, ((rank + 1) as f64).powf(-cfg.popularity_exponent)))
        .collect();

    let mut parts = CatalogParts {
        attributes: (0..cfg.num_attributes)
            .map(|a| AttributeRecord {
                attribute_id: a,
                type_id: a % cfg.num_types,
            })
            .collect(),
        ..CatalogParts::default()
    };
    for v in 0..cfg.num_items {
        let mut attrs: Vec<usize> = weighted
            .choose_multiple_weighted(&mut rng, cfg.attrs_per_item, |&(_, w)| w)
            .map_err(|e| Error::Config(format!("attribute sampling: {e}")))?
            .map(|&(a, _)| a)
            .collect();
        attrs.sort_unstable();
        parts.items.push(ItemRecord {
            item_id: v,
            attributes: attrs,
        });
    }
    let all_items: Vec<usize> = (0..cfg.num_items).collect();
    for u in 0..cfg.num_users {
        let mut picked: Vec<usize> = all_items
            .choose_multiple(&mut rng, cfg.interactions_per_user)
            .copied()
            .collect();
        picked.sort_unstable();
        for v in picked {
            parts.interactions.push(InteractionRecord { user_id: u, item_id: v });
        }
    }
    let users = if cfg.interactions_per_user == 0 { 0 } else { cfg.num_users };
    for r in &parts.interactions {
        parts.kg_triples.push(Triple {
            head: r.user_id,
            relation: RELATION_INTERACTED,
            tail: users + r.item_id,
        });
    }
    for item in &parts.items {
        for &a in &item.attributes {
            parts.kg_triples.push(Triple {
                head: users + item.item_id,
                relation: RELATION_HAS_ATTRIBUTE,
                tail: users + cfg.num_items + a,
            });
        }
    }
    for t in 0..cfg.num_types {
        parts.labels.push(LabelRecord {
            kind: LabelKind::Type,
            id: t,
            label: format!("type {t}"),
        });
    }
    Catalog::new(parts)
}

/// Train / validation / test episodes as `(user, target item)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSplit {
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl InteractionSplit {
    /// Shuffles the distinct interactions under `seed` and cuts them by fraction.
    pub fn new(catalog: &Catalog, validation_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&(validation_fraction + test_fraction)) || validation_fraction < 0.0 || test_fraction < 0.0 {
            return Err(Error::Config("split fractions must be non-negative and sum below 1".into()));
        }
        let mut pairs: Vec<(usize, usize)> = catalog.interactions().to_vec();
        pairs.sort_unstable();
        pairs.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        let n = pairs.len();
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_val = (n as f64 * validation_fraction).round() as usize;
        let test = pairs[..n_test].to_vec();
        let validation = pairs[n_test..n_test + n_val].to_vec();
        let train = pairs[n_test + n_val..].to_vec();
        Ok(Self { train, validation, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture_parts() -> CatalogParts {
        CatalogParts {
            items: vec![
                ItemRecord { item_id: 0, attributes: vec![0, 1] },
                ItemRecord { item_id: 1, attributes: vec![0] },
                ItemRecord { item_id: 2, attributes: vec![1] },
            ],
            attributes: vec![
                AttributeRecord { attribute_id: 0, type_id: 0 },
                AttributeRecord { attribute_id: 1, type_id: 0 },
            ],
            interactions: vec![InteractionRecord { user_id: 0, item_id: 2 }],
            kg_triples: vec![Triple { head: 0, relation: 0, tail: 3 }],
            labels: vec![],
        }
    }

    #[test]
    fn fixture_counts() {
        let c = Catalog::new(fixture_parts()).unwrap();
        let s = c.stats();
        assert_eq!((s.users, s.items, s.attributes, s.types), (1, 3, 2, 1));
        assert!(validate_catalog(&fixture_parts()).is_empty());
    }

    #[test]
    fn empty_items_rejected() {
        let mut p = fixture_parts();
        p.items.clear();
        let err = Catalog::new(p).unwrap_err();
        assert_eq!(err.to_string(), "invalid catalog: no items");
    }

    #[test]
    fn dangling_attribute_reported() {
        let mut p = fixture_parts();
        p.items[1].attributes.push(999);
        let issues = validate_catalog(&p);
        assert_eq!(issues.len(), 1);
        assert!(issues[0].message.starts_with("dangling attribute 999 in item 1"));
    }

    #[test]
    fn attribute_under_two_types_reported() {
        let mut p = fixture_parts();
        p.attributes.push(AttributeRecord { attribute_id: 1, type_id: 1 });
        let issues = validate_catalog(&p);
        assert!(issues.iter().any(|i| i.invariant == "single-type"));
    }

    #[test]
    fn duplicate_and_sparse_item_ids_reported() {
        let mut p = fixture_parts();
        p.items[2].item_id = 1;
        let issues = validate_catalog(&p);
        assert!(issues.iter().any(|i| i.message == "duplicate item id 1"));
        assert!(issues.iter().any(|i| i.invariant == "dense-id"));
    }

    #[test]
    fn item_without_attributes_reported() {
        let mut p = fixture_parts();
        p.items[0].attributes.clear();
        assert!(validate_catalog(&p).iter().any(|i| i.invariant == "item-has-attribute"));
    }

    #[test]
    fn entity_namespaces_are_offsets() {
        let c = Catalog::new(fixture_parts()).unwrap();
        assert_eq!(c.entity(0), Some(Entity::User(0)));
        assert_eq!(c.entity(1), Some(Entity::Item(0)));
        assert_eq!(c.entity(4), Some(Entity::Attribute(0)));
        assert_eq!(c.entity(6), None);
        assert_eq!(c.namespace_range(2), Some(1..4));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig::new(10, 100, 30, 6, 3, 5);
        let a = generate_synthetic(&cfg, 7).unwrap().to_jsonl_bundle().unwrap();
        let b = generate_synthetic(&cfg, 7).unwrap().to_jsonl_bundle().unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 8).unwrap().to_jsonl_bundle().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_infeasible() {
        assert!(generate_synthetic(&SynthConfig::new(10, 100, 30, 6, 0, 5), 1).is_err());
        assert!(generate_synthetic(&SynthConfig::new(10, 100, 3, 2, 4, 5), 1).is_err());
        assert!(generate_synthetic(&SynthConfig::new(10, 100, 3, 4, 2, 5), 1).is_err());
    }

    #[test]
    fn tiny_synthetic_items_have_distinct_attributes() {
        let c = generate_synthetic(&SynthConfig::new(2, 4, 4, 2, 2, 1), 1).unwrap();
        for v in 0..c.num_items() {
            let attrs = c.item_attributes(v);
            assert_eq!(attrs.len(), 2);
            assert_ne!(attrs[0], attrs[1]);
        }
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let c = generate_synthetic(&SynthConfig::new(10, 50, 20, 4, 3, 10), 3).unwrap();
        let s = InteractionSplit::new(&c, 0.1, 0.2, 9).unwrap();
        let mut all: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, 100);
        assert_eq!(s.test.len(), 20);
    }

    #[test]
    fn masked_triples_drop_only_listed_pairs() {
        let c = generate_synthetic(&SynthConfig::new(3, 10, 6, 2, 2, 2), 3).unwrap();
        let (u, v) = c.interactions()[0];
        let m = c.without_interaction_triples(&[(u, v)]);
        assert_eq!(m.kg_triples().len(), c.kg_triples().len() - 1);
    }
}
