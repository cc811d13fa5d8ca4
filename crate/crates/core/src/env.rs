//! The conversational environment: per-session state, candidate spaces,
//! the rule-based simulated user, transitions and rewards.
//!
//! A *turn* presents one chain of choices (attributes to ask about or items
//! to recommend); every answered choice advances the *timestep* by one.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};

/// The two options of the long policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Ask,
    Rec,
}

impl OptionKind {
    pub const ALL: [OptionKind; 2] = [OptionKind::Ask, OptionKind::Rec];

    pub fn index(self) -> usize {
        match self {
            OptionKind::Ask => 0,
            OptionKind::Rec => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            OptionKind::Ask => OptionKind::Rec,
            OptionKind::Rec => OptionKind::Ask,
        }
    }

    pub fn choice(self, id: usize) -> Choice {
        match self {
            OptionKind::Ask => Choice::Attribute(id),
            OptionKind::Rec => Choice::Item(id),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptionKind::Ask => "ask",
            OptionKind::Rec => "rec",
        }
    }
}

impl fmt::Display for OptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One attribute or item put to the user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Choice {
    Attribute(usize),
    Item(usize),
}

impl Choice {
    pub fn id(self) -> usize {
        match self {
            Choice::Attribute(id) | Choice::Item(id) => id,
        }
    }

    pub fn option(self) -> OptionKind {
        match self {
            Choice::Attribute(_) => OptionKind::Ask,
            Choice::Item(_) => OptionKind::Rec,
        }
    }
}

/// The ordered choices of one turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceChain {
    pub option: OptionKind,
    pub choices: Vec<Choice>,
}

impl ChoiceChain {
    pub fn new(option: OptionKind) -> Self {
        Self {
            option,
            choices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.choices.iter().map(|c| c.id()).collect()
    }

    /// Checks kind agreement, distinct ids and `1 ≤ len ≤ max_len`.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.choices.is_empty() || self.choices.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "chain length {} outside 1..={max_len}",
                self.choices.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &self.choices {
            if c.option() != self.option {
                return Err(Error::InvalidArgument(format!("{c:?} in a {} chain", self.option)));
            }
            if !seen.insert(c.id()) {
                return Err(Error::InvalidArgument(format!("duplicate choice {}", c.id())));
            }
        }
        Ok(())
    }
}

/// Rewards per (option, outcome).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub r_ask_acc: f64,
    pub r_ask_rej: f64,
    pub r_rec_rej: f64,
    pub r_rec_suc: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_ask_acc: 1e-2,
            r_ask_rej: -1e-4,
            r_rec_rej: -1e-4,
            r_rec_suc: 1.0,
        }
    }
}

impl RewardConfig {
    /// Profile with a much weaker reward for accepted attributes.
    pub fn movielens() -> Self {
        Self {
            r_ask_acc: 1e-5,
            ..Self::default()
        }
    }

    pub fn zero() -> Self {
        Self {
            r_ask_acc: 0.0,
            r_ask_rej: 0.0,
            r_rec_rej: 0.0,
            r_rec_suc: 0.0,
        }
    }

    /// Checks `r_rec_suc > r_ask_acc > 0 > r_ask_rej, r_rec_rej`.
    pub fn validate(&self) -> Result<()> {
        let ok = self.r_rec_suc > self.r_ask_acc && self.r_ask_acc > 0.0 && self.r_ask_rej < 0.0 && self.r_rec_rej < 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("reward ordering violated: {self:?}")))
        }
    }
}

pub fn choice_reward(option: OptionKind, accepted: bool, cfg: &RewardConfig) -> f64 {
    match (option, accepted) {
        (OptionKind::Ask, true) => cfg.r_ask_acc,
        (OptionKind::Ask, false) => cfg.r_ask_rej,
        (OptionKind::Rec, false) => cfg.r_rec_rej,
        (OptionKind::Rec, true) => cfg.r_rec_suc,
    }
}

/// One answered choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 1-based turn in which the choice was presented.
    pub turn: usize,
    pub option: OptionKind,
    pub choice: Choice,
    pub accepted: bool,
}

/// Turn and 1-based chain position of the accepted recommendation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Success {
    pub turn: usize,
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeStatus {
    Ongoing,
    Success,
    Timeout,
}

/// Evolving state of one conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub user: usize,
    /// Hidden target item; `None` when a human plays the user.
    pub target: Option<usize>,
    /// Accepted attributes in acceptance order; the first is the opening one.
    pub acc_attrs: Vec<usize>,
    pub rej_attrs: BTreeSet<usize>,
    pub rej_items: BTreeSet<usize>,
    /// Completed turns.
    pub turn: usize,
    /// Answered choices.
    pub timestep: usize,
    pub history: Vec<HistoryEntry>,
    pub success: Option<Success>,
    /// Set when neither option has candidates left.
    pub exhausted: bool,
}

/// Both candidate spaces, ascending ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Candidates {
    pub items: Vec<usize>,
    pub attributes: Vec<usize>,
}

impl Candidates {
    pub fn get(&self, option: OptionKind) -> &[usize] {
        match option {
            OptionKind::Ask => &self.attributes,
            OptionKind::Rec => &self.items,
        }
    }

    pub fn is_exhausted(&self) -> bool {
        self.items.is_empty() && self.attributes.is_empty()
    }
}

/// Starts a simulated session; the opening attribute is drawn uniformly from
/// the target's attributes under `seed`.
pub fn reset_session(c: &Catalog, user: usize, target: usize, seed: u64) -> Result<SessionState> {
    if target >= c.num_items() {
        return Err(Error::OutOfRange(format!("target item {target} of {}", c.num_items())));
    }
    let attrs = c.item_attributes(target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p0 = *attrs
        .choose(&mut rng)
        .ok_or_else(|| Error::InvalidArgument(format!("target item {target} has no attributes")))?;
    Ok(SessionState::with_opening(user, Some(target), p0))
}

/// Starts a human-mode session from the attribute the person opened with.
pub fn reset_human_session(c: &Catalog, user: usize, initial_attribute: usize) -> Result<SessionState> {
    if initial_attribute >= c.num_attributes() {
        return Err(Error::OutOfRange(format!(
            "attribute {initial_attribute} of {}",
            c.num_attributes()
        )));
    }
    Ok(SessionState::with_opening(user, None, initial_attribute))
}

impl SessionState {
    fn with_opening(user: usize, target: Option<usize>, p0: usize) -> Self {
        Self {
            user,
            target,
            acc_attrs: vec![p0],
            rej_attrs: BTreeSet::new(),
            rej_items: BTreeSet::new(),
            turn: 0,
            timestep: 0,
            history: Vec::new(),
            success: None,
            exhausted: false,
        }
    }

    pub fn is_answered(&self, choice: Choice) -> bool {
        match choice {
            Choice::Attribute(a) => self.acc_attrs.contains(&a) || self.rej_attrs.contains(&a),
            Choice::Item(v) => self.rej_items.contains(&v),
        }
    }

    /// Computes both candidate spaces in one pass.
    pub fn candidates(&self, c: &Catalog) -> Candidates {
        let mut items: Vec<usize> = match self.acc_attrs.iter().min_by_key(|&&a| c.items_with_attribute(a).len()) {
            None => (0..c.num_items()).collect(),
            Some(&rarest) => c
                .items_with_attribute(rarest)
                .iter()
                .copied()
                .filter(|&v| {
                    let attrs = c.item_attributes(v);
                    self.acc_attrs.iter().all(|a| attrs.binary_search(a).is_ok())
                })
                .collect(),
        };
        items.retain(|v| !self.rej_items.contains(v));
        let mut mark = vec![false; c.num_attributes()];
        for &v in &items {
            for &a in c.item_attributes(v) {
                mark[a] = true;
            }
        }
        for &a in self.acc_attrs.iter().chain(&self.rej_attrs) {
            mark[a] = false;
        }
        let attributes = mark.iter().enumerate().filter(|(_, &m)| m).map(|(a, _)| a).collect();
        Candidates { items, attributes }
    }

    pub fn status(&self, t_max: usize) -> EpisodeStatus {
        episode_status(self, t_max)
    }

    /// Applies an answer in place; see [`apply_choice_outcome`].
    pub fn apply_in_place(&mut self, c: &Catalog, choice: Choice, accepted: bool) -> Result<()> {
        if self.success.is_some() {
            return Err(Error::Transition("episode already succeeded".into()));
        }
        if self.is_answered(choice) {
            return Err(Error::Transition(format!("{choice:?} already answered")));
        }
        let cand = self.candidates(c);
        if !cand.get(choice.option()).contains(&choice.id()) {
            return Err(Error::Transition(format!("{choice:?} is not a current candidate")));
        }
        self.record(choice, accepted);
        Ok(())
    }

    /// Records the answer to a choice that was shown to the user. A choice
    /// that has left the candidate space is recorded as rejected; returns the
    /// answer actually recorded.
    pub fn record_presented(&mut self, c: &Catalog, choice: Choice, accepted: bool) -> Result<bool> {
        if self.success.is_some() {
            return Err(Error::Transition("episode already succeeded".into()));
        }
        if self.is_answered(choice) {
            return Err(Error::Transition(format!("{choice:?} already answered")));
        }
        let live = self.candidates(c).get(choice.option()).contains(&choice.id());
        self.record(choice, accepted && live);
        Ok(accepted && live)
    }

    fn record(&mut self, choice: Choice, accepted: bool) {
        let turn = self.turn + 1;
        match (choice, accepted) {
            (Choice::Attribute(a), true) => self.acc_attrs.push(a),
            (Choice::Attribute(a), false) => {
                self.rej_attrs.insert(a);
            }
            (Choice::Item(v), false) => {
                self.rej_items.insert(v);
            }
            (Choice::Item(_), true) => {
                let rank = self.history.iter().filter(|h| h.turn == turn && h.option == OptionKind::Rec).count() + 1;
                self.success = Some(Success { turn, rank });
            }
        }
        self.timestep += 1;
        self.history.push(HistoryEntry {
            turn,
            option: choice.option(),
            choice,
            accepted,
        });
    }

    /// Closes the current turn.
    pub fn end_turn(&mut self) {
        self.turn += 1;
    }

    /// Closes the current turn and flags the session once nothing is left to offer.
    pub fn close_turn(&mut self, c: &Catalog) {
        self.end_turn();
        if self.success.is_none() && self.candidates(c).is_exhausted() {
            self.exhausted = true;
        }
    }
}

/// Candidate ids for `option` in ascending order.
pub fn candidate_actions(s: &SessionState, option: OptionKind, c: &Catalog) -> Vec<usize> {
    let cand = s.candidates(c);
    match option {
        OptionKind::Ask => cand.attributes,
        OptionKind::Rec => cand.items,
    }
}

/// The simulated user answers truthfully against its target.
pub fn simulate_user_response(s: &SessionState, c: &Catalog, choice: Choice) -> Result<bool> {
    let target = s
        .target
        .ok_or_else(|| Error::InvalidArgument("no simulated user in human mode".into()))?;
    Ok(match choice {
        Choice::Attribute(a) => c.item_attributes(target).binary_search(&a).is_ok(),
        Choice::Item(v) => v == target,
    })
}

/// Returns the state after the user answers `choice`.
///
/// Errors if the choice is not in the current candidate space, was answered
/// before, or the episode already succeeded.
pub fn apply_choice_outcome(s: &SessionState, c: &Catalog, choice: Choice, accepted: bool) -> Result<SessionState> {
    let mut next = s.clone();
    next.apply_in_place(c, choice, accepted)?;
    Ok(next)
}

/// Applies a presented chain's answers in chain order and closes the turn.
///
/// A chain built on predicted answers can contain an attribute that left the
/// candidate space once the true answers came in (no remaining candidate item
/// carries it). The user cannot hold that attribute, so it is recorded as
/// rejected. Answers after an accepted recommendation are ignored.
pub fn apply_turn(s: &SessionState, c: &Catalog, chain: &ChoiceChain, accepted: &[bool]) -> Result<SessionState> {
    if accepted.len() != chain.len() {
        return Err(Error::InvalidArgument(format!(
            "{} answers for a chain of {}",
            accepted.len(),
            chain.len()
        )));
    }
    if s.success.is_some() {
        return Err(Error::Transition("episode already succeeded".into()));
    }
    let mut next = s.clone();
    for (&choice, &ok) in chain.choices.iter().zip(accepted) {
        if next.success.is_some() {
            break;
        }
        next.record_presented(c, choice, ok)?;
    }
    next.close_turn(c);
    Ok(next)
}

/// Success once a recommendation is accepted; timeout after `t_max` full
/// turns without success or when no candidates remain.
pub fn episode_status(s: &SessionState, t_max: usize) -> EpisodeStatus {
    if s.success.is_some() {
        EpisodeStatus::Success
    } else if s.turn >= t_max || s.exhausted {
        EpisodeStatus::Timeout
    } else {
        EpisodeStatus::Ongoing
    }
}

/// Answers of one turn in the episode log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnLog {
    pub option: OptionKind,
    pub choices: Vec<usize>,
    pub accepted: Vec<bool>,
}

/// One line of an episode JSONL log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub user: usize,
    pub target: Option<usize>,
    pub turns: Vec<TurnLog>,
    pub status: EpisodeStatus,
    pub success_turn: Option<usize>,
    pub success_rank: Option<usize>,
}

impl EpisodeLog {
    pub fn from_state(episode: usize, s: &SessionState, t_max: usize) -> Self {
        let mut turns: Vec<TurnLog> = Vec::new();
        let mut current = 0;
        for h in &s.history {
            if h.turn != current {
                current = h.turn;
                turns.push(TurnLog {
                    option: h.option,
                    choices: Vec::new(),
                    accepted: Vec::new(),
                });
            }
            let t = turns.last_mut().expect("pushed above");
            t.choices.push(h.choice.id());
            t.accepted.push(h.accepted);
        }
        Self {
            episode,
            user: s.user,
            target: s.target,
            turns,
            status: episode_status(s, t_max),
            success_turn: s.success.map(|x| x.turn),
            success_rank: s.success.map(|x| x.rank),
        }
    }
}

pub fn write_episode_logs(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for log in logs {
        writeln!(w, "{}", serde_json::to_string(log)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
