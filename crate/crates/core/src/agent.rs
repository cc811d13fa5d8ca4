//! Decision core: dueling Q-values over candidate choices, the long policy
//! over options, and the per-option termination and feedback heads that
//! drive chain-of-choice generation.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::env::{choice_reward, simulate_user_response, Choice, ChoiceChain, OptionKind, RewardConfig, SessionState};
use crate::error::{Error, Result};
use crate::graph_state::{build_dynamic_graph, DynamicGraph, StateEncoder};
use crate::kg_embed::EmbeddingTable;
use crate::neural::{Linear, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

/// Chain limits and pruning sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Longest recommendation chain.
    pub k_v: usize,
    /// Longest question chain.
    pub k_p: usize,
    /// Candidate items kept after preference pruning.
    pub prune_v: usize,
    /// Candidate attributes kept after preference pruning.
    pub prune_p: usize,
    /// Center the dueling advantage over the available choices.
    #[serde(default)]
    pub center_advantage: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            k_v: 10,
            k_p: 3,
            prune_v: 10,
            prune_p: 10,
            center_advantage: false,
        }
    }
}

impl AgentConfig {
    pub fn max_len(&self, option: OptionKind) -> usize {
        match option {
            OptionKind::Ask => self.k_p,
            OptionKind::Rec => self.k_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_v == 0 || self.k_p == 0 || self.prune_v == 0 || self.prune_p == 0 {
            return Err(Error::Config("chain lengths and pruning sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of every head, one set per option where applicable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentModel {
    pub encoder: StateEncoder,
    pub value: Mlp,
    pub advantage: [Mlp; 2],
    pub termination: [Linear; 2],
    pub feedback: [Mlp; 2],
}

/// All learnable parameters plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub store: ParamStore,
    pub model: AgentModel,
    /// Subtract the mean advantage of the available choices from `Q_U`.
    pub center_advantage: bool,
}

fn register_model<R: Rng>(store: &mut ParamStore, tbl: &EmbeddingTable, rng: &mut R) -> Result<AgentModel> {
    let d = tbl.dim();
    let encoder = StateEncoder::register(store, tbl, rng)?;
    let value = Mlp::register(store, "value", d, d, 1, rng)?;
    let mut per_option = |store: &mut ParamStore, o: OptionKind| -> Result<(Mlp, Linear, Mlp)> {
        Ok((
            Mlp::register(store, &format!("advantage.{o}"), 2 * d, d, 1, rng)?,
            Linear::register(store, &format!("termination.{o}"), d, 1, rng)?,
            Mlp::register(store, &format!("feedback.{o}"), 2 * d, d, 1, rng)?,
        ))
    };
    let (a0, t0, f0) = per_option(store, OptionKind::Ask)?;
    let (a1, t1, f1) = per_option(store, OptionKind::Rec)?;
    Ok(AgentModel {
        encoder,
        value,
        advantage: [a0, a1],
        termination: [t0, t1],
        feedback: [f0, f1],
    })
}

/// Numeric snapshot of one state under fixed parameters.
#[derive(Clone, Debug)]
pub struct StateEval {
    pub graph: Arc<DynamicGraph>,
    pub state_vec: Tensor,
    pub node_reps: Tensor,
    /// `Q_U` of each pruned candidate, aligned with `graph.actions(option)`.
    pub q: [Vec<f64>; 2],
    /// Termination probability per option.
    pub beta: [f64; 2],
    /// `f_V` of the state.
    pub value: f64,
}

impl StateEval {
    pub fn actions(&self, option: OptionKind) -> &[usize] {
        self.graph.actions(option)
    }

    pub fn q_values(&self, option: OptionKind) -> &[f64] {
        &self.q[option.index()]
    }

    /// `Q_Ω`, or `None` when the option has no candidates.
    pub fn q_omega(&self, option: OptionKind) -> Option<f64> {
        q_omega(self.q_values(option)).ok()
    }

    pub fn action_rep(&self, option: OptionKind, position: usize) -> &[f64] {
        self.node_reps.row_slice(self.graph.action_nodes(option)[position])
    }

    /// Best option by `Q_Ω` (ask on ties); `None` if both are exhausted.
    pub fn greedy_option(&self) -> Option<OptionKind> {
        match (self.q_omega(OptionKind::Ask), self.q_omega(OptionKind::Rec)) {
            (Some(a), Some(r)) => Some(if a >= r { OptionKind::Ask } else { OptionKind::Rec }),
            (Some(_), None) => Some(OptionKind::Ask),
            (None, Some(_)) => Some(OptionKind::Rec),
            (None, None) => None,
        }
    }

    /// `max_ω Q_Ω(s, ω)` over options with candidates.
    pub fn max_q_omega(&self) -> Option<f64> {
        OptionKind::ALL.iter().filter_map(|&o| self.q_omega(o)).reduce(f64::max)
    }
}

/// Softmax over `Q_U` values: the intra-option policy.
pub fn intra_option_distribution(q: &[f64]) -> Result<Vec<f64>> {
    if q.is_empty() {
        return Err(Error::Empty("no candidates for the intra-option policy".into()));
    }
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = q.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|e| e / z).collect())
}

/// `Σ_a π(a|s) Q_U(s, ω, a)`.
pub fn q_omega(q: &[f64]) -> Result<f64> {
    let p = intra_option_distribution(q)?;
    Ok(p.iter().zip(q).map(|(p, q)| p * q).sum())
}

/// Shared read-only inputs for acting in a catalog.
#[derive(Clone, Copy, Debug)]
pub struct AgentContext<'a> {
    pub catalog: &'a Catalog,
    /// Frozen pretrained table used for preference scores and pruning.
    pub scores: &'a EmbeddingTable,
    pub cfg: &'a AgentConfig,
}

impl<'a> AgentContext<'a> {
    pub fn graph(&self, s: &SessionState) -> Result<DynamicGraph> {
        build_dynamic_graph(s, self.scores, self.catalog, self.cfg.prune_v, self.cfg.prune_p)
    }
}

impl AgentParams {
    /// Fresh parameters; node features start from `tbl`.
    pub fn new(tbl: &EmbeddingTable, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = register_model(&mut store, tbl, &mut rng)?;
        Ok(Self {
            store,
            model,
            center_advantage: false,
        })
    }

    pub fn with_centered_advantage(mut self, on: bool) -> Self {
        self.center_advantage = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.model.encoder.dim(&self.store)
    }

    /// Ids of the Q-learning group: encoder, value and advantage heads.
    pub fn q_group(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.store.ids_with_prefix("encoder.").collect();
        ids.extend(self.store.ids_with_prefix("value."));
        ids.extend(self.store.ids_with_prefix("advantage."));
        ids
    }

    pub fn termination_group(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("termination.").collect()
    }

    pub fn feedback_group(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("feedback.").collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    /// Loads a checkpoint written by [`Self::save`].
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(ParamStore::load(path)?)
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let emb = store
            .by_name("encoder.embeddings")
            .ok_or_else(|| Error::InvalidArgument("checkpoint lacks encoder.embeddings".into()))?;
        let probe = EmbeddingTable::zeros(emb.rows(), 1, emb.cols());
        let fresh = Self::new(&probe, 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::InvalidArgument("checkpoint layout differs".into()));
        }
        for id in fresh.store.ids() {
            if fresh.store.name(id) != store.name(id) || fresh.store.get(id).shape() != store.get(id).shape() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint layout differs at {}",
                    fresh.store.name(id)
                )));
            }
        }
        Ok(Self {
            store,
            model: fresh.model,
            center_advantage: false,
        })
    }

    /// Node representations and state vector of `g`, differentiable.
    pub fn encode(&self, tape: &mut Tape, g: &DynamicGraph) -> Result<(Var, Var)> {
        self.model.encoder.encode(tape, &self.store, g)
    }

    /// `f_V(state)` for a `1×d` state.
    pub fn value_on(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        self.model.value.forward(tape, &self.store, state)
    }

    /// `f_A(s ⊕ a)` for each row of `actions` (`k×d`), as `k×1`.
    pub fn advantage_on(&self, tape: &mut Tape, state: Var, option: OptionKind, actions: Var) -> Result<Var> {
        let k = tape.value(actions).rows();
        let states = tape.repeat_row(state, k)?;
        let joint = tape.concat_cols(&[states, actions])?;
        self.model.advantage[option.index()].forward(tape, &self.store, joint)
    }

    /// `Q_U = f_V(s) + f_A(s ⊕ a)` for every pruned candidate of each option
    /// of `g`, as `k×1` per option (`None` for an option without candidates).
    ///
    /// With centering on, the mean advantage over both options' candidates is
    /// subtracted, so `f_V` is the average value of the available choices.
    pub fn q_all(&self, tape: &mut Tape, g: &DynamicGraph, reps: Var, state: Var) -> Result<[Option<Var>; 2]> {
        let value = self.value_on(tape, state)?;
        let mut adv = [None, None];
        for o in OptionKind::ALL {
            let nodes = g.action_nodes(o).to_vec();
            if !nodes.is_empty() {
                let acts = tape.gather_rows(reps, nodes)?;
                adv[o.index()] = Some(self.advantage_on(tape, state, o, acts)?);
            }
        }
        let mut base = value;
        if self.center_advantage {
            let total: usize = OptionKind::ALL.iter().map(|o| g.action_nodes(*o).len()).sum();
            let mut sum: Option<Var> = None;
            for a in adv.iter().flatten() {
                let s = tape.sum(*a);
                sum = Some(match sum {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
            if let Some(sum) = sum {
                let mean = tape.scale(sum, 1.0 / total as f64);
                base = tape.sub(value, mean)?;
            }
        }
        let mut q = [None, None];
        for o in OptionKind::ALL {
            if let Some(a) = adv[o.index()] {
                let k = tape.value(a).rows();
                let b = tape.repeat_row(base, k)?;
                q[o.index()] = Some(tape.add(b, a)?);
            }
        }
        Ok(q)
    }

    /// `β_ω(state)` as `1×1`.
    pub fn termination_on(&self, tape: &mut Tape, state: Var, option: OptionKind) -> Result<Var> {
        let logit = self.model.termination[option.index()].forward(tape, &self.store, state)?;
        Ok(tape.sigmoid(logit))
    }

    /// `T_ω(state, a)` for each row of `actions`, as `k×1`.
    pub fn feedback_on(&self, tape: &mut Tape, state: Var, option: OptionKind, actions: Var) -> Result<Var> {
        let k = tape.value(actions).rows();
        let states = tape.repeat_row(state, k)?;
        let joint = tape.concat_cols(&[states, actions])?;
        let logit = self.model.feedback[option.index()].forward(tape, &self.store, joint)?;
        Ok(tape.sigmoid(logit))
    }

    /// Evaluates every head at `graph` without recording gradients for later use.
    pub fn evaluate_graph(&self, graph: Arc<DynamicGraph>) -> Result<StateEval> {
        let mut tape = Tape::new();
        let (reps, state) = self.encode(&mut tape, &graph)?;
        let mut q: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut beta = [0.0; 2];
        let qs = self.q_all(&mut tape, &graph, reps, state)?;
        for o in OptionKind::ALL {
            if let Some(qv) = qs[o.index()] {
                q[o.index()] = tape.value(qv).values().to_vec();
            }
            let b = self.termination_on(&mut tape, state, o)?;
            beta[o.index()] = tape.scalar(b)?;
        }
        let v = self.value_on(&mut tape, state)?;
        let value = tape.scalar(v)?;
        Ok(StateEval {
            state_vec: tape.value(state).clone(),
            node_reps: tape.value(reps).clone(),
            graph,
            q,
            beta,
            value,
        })
    }

    pub fn evaluate(&self, ctx: &AgentContext<'_>, s: &SessionState) -> Result<StateEval> {
        self.evaluate_graph(Arc::new(ctx.graph(s)?))
    }

    /// Predicted acceptance probability of the candidate at `position`.
    pub fn predict_feedback(&self, eval: &StateEval, option: OptionKind, position: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let state = tape.constant(eval.state_vec.clone());
        let act = tape.constant(Tensor::row(eval.action_rep(option, position).to_vec()));
        let p = self.feedback_on(&mut tape, state, option, act)?;
        tape.scalar(p)
    }
}

/// Long policy: ε-soft over options that still have candidates.
pub fn select_option<R: Rng + ?Sized>(eval: &StateEval, epsilon: f64, rng: &mut R) -> Result<OptionKind> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let greedy = eval
        .greedy_option()
        .ok_or_else(|| Error::Empty("both options exhausted".into()))?;
    let available: Vec<OptionKind> = OptionKind::ALL
        .into_iter()
        .filter(|&o| !eval.q_values(o).is_empty())
        .collect();
    if available.len() == 2 && rng.gen::<f64>() < epsilon {
        return Ok(available[rng.gen_range(0..2)]);
    }
    Ok(greedy)
}

/// Whether choices are sampled and termination drawn, or both made greedy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    Train,
    Eval,
}

/// Where intra-turn answers come from while the chain is being built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    /// The simulated user's true answer.
    Oracle,
    /// The learned feedback head, thresholded at 0.5.
    Predictor,
    /// A fair coin.
    Coin,
}

/// How a chain is put together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainStyle {
    /// Step-by-step generation with simulated transitions.
    Sequential {
        feedback: FeedbackSource,
        use_termination: bool,
    },
    /// Top choices by `Q_U` at the turn's first state, no intra-turn simulation.
    OneShot,
}

/// One generated step of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedStep {
    pub choice: Choice,
    /// Position of the choice among the pruned candidates it was drawn from.
    pub position: usize,
    pub feedback_prob: f64,
    pub assumed_accepted: bool,
    /// Reward of the assumed answer, for logging.
    pub reward: f64,
    /// State after applying the assumed answer.
    pub state: SessionState,
}

/// Result of chain generation, with the state evaluation that opened the turn
/// and one evaluation per generated step (of the state after that step).
#[derive(Clone, Debug)]
pub struct GeneratedChain {
    pub chain: ChoiceChain,
    pub steps: Vec<PredictedStep>,
    pub evals: Vec<StateEval>,
}

fn pick<R: Rng + ?Sized>(q: &[f64], mode: ChainMode, rng: &mut R) -> Result<usize> {
    match mode {
        ChainMode::Eval => Ok(q
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0),
        ChainMode::Train => {
            let p = intra_option_distribution(q)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(p.len() - 1)
        }
    }
}

/// Builds a chain for `option` starting from the evaluated state `first`.
///
/// Each step picks a candidate (sampled in train mode, argmax in eval
/// mode), obtains an answer from `style`'s feedback source, advances a
/// private copy of the state, and stops on termination, `max_len`, no
/// candidates left, or an accepted recommendation.
#[allow(clippy::too_many_arguments)]
pub fn generate_choice_chain<R: Rng + ?Sized>(
    params: &AgentParams,
    ctx: &AgentContext<'_>,
    state: &SessionState,
    first: StateEval,
    option: OptionKind,
    mode: ChainMode,
    style: ChainStyle,
    rewards: &RewardConfig,
    rng: &mut R,
) -> Result<GeneratedChain> {
    let max_len = ctx.cfg.max_len(option);
    if first.q_values(option).is_empty() {
        return Err(Error::Empty(format!("no {option} candidates")));
    }
    let mut chain = ChoiceChain::new(option);
    let mut steps = Vec::new();
    let mut evals = Vec::new();

    if style == ChainStyle::OneShot {
        let q = first.q_values(option);
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
        for &pos in order.iter().take(max_len) {
            let choice = option.choice(first.actions(option)[pos]);
            let feedback_prob = params.predict_feedback(&first, option, pos)?;
            chain.choices.push(choice);
            steps.push(PredictedStep {
                choice,
                position: pos,
                feedback_prob,
                assumed_accepted: false,
                reward: choice_reward(option, false, rewards),
                state: state.clone(),
            });
        }
        evals.push(first);
        return Ok(GeneratedChain { chain, steps, evals });
    }

    let ChainStyle::Sequential {
        feedback,
        use_termination,
    } = style
    else {
        unreachable!("one-shot handled above")
    };
    let mut working = state.clone();
    let mut current = first;
    loop {
        let q = current.q_values(option);
        if q.is_empty() {
            break;
        }
        let pos = pick(q, mode, rng)?;
        let choice = option.choice(current.actions(option)[pos]);
        let feedback_prob = params.predict_feedback(&current, option, pos)?;
        let accepted = match feedback {
            FeedbackSource::Oracle => simulate_user_response(&working, ctx.catalog, choice)?,
            FeedbackSource::Predictor => feedback_prob >= 0.5,
            FeedbackSource::Coin => rng.gen_bool(0.5),
        };
        let mut next = working.clone();
        next.apply_in_place(ctx.catalog, choice, accepted)?;
        let next_eval = params.evaluate(ctx, &next)?;
        chain.choices.push(choice);
        steps.push(PredictedStep {
            choice,
            position: pos,
            feedback_prob,
            assumed_accepted: accepted,
            reward: choice_reward(option, accepted, rewards),
            state: next.clone(),
        });
        let beta = next_eval.beta[option.index()];
        evals.push(current);
        current = next_eval;
        working = next;
        if (option == OptionKind::Rec && accepted) || chain.len() >= max_len {
            break;
        }
        if use_termination {
            let stop = match mode {
                ChainMode::Train => rng.gen::<f64>() < beta,
                ChainMode::Eval => beta >= 0.5,
            };
            if stop {
                break;
            }
        }
    }
    evals.push(current);
    Ok(GeneratedChain { chain, steps, evals })
}
