//! Per-option experience replay, TD targets, the Q / termination / feedback
//! losses and the online training loop.

use std::collections::VecDeque;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    generate_choice_chain, select_option, AgentConfig, AgentContext, AgentParams, ChainMode, ChainStyle,
    FeedbackSource, GeneratedChain, StateEval,
};
use crate::catalog::Catalog;
use crate::env::{
    choice_reward, reset_session, simulate_user_response, Choice, ChoiceChain, EpisodeLog, EpisodeStatus, OptionKind,
    RewardConfig, SessionState,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, Evaluation, MetricsReport, Policy};
use crate::graph_state::DynamicGraph;
use crate::kg_embed::EmbeddingTable;
use crate::neural::{AdamState, Tape, Tensor, Var};

/// Which component of the agent is switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Uniformly random option every turn.
    NoLongPolicy,
    /// Ask chains are the top-k_p attributes by Q in one shot.
    NoIntraAsk,
    /// Recommendation chains are the top-k_v items by Q in one shot.
    NoIntraRec,
    /// Chains always run to their maximum length.
    NoTermination,
    /// Intra-turn answers come from a fair coin instead of the predictor.
    NoFeedback,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoLongPolicy,
        Variant::NoIntraAsk,
        Variant::NoIntraRec,
        Variant::NoTermination,
        Variant::NoFeedback,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLongPolicy => "no_long_policy",
            Variant::NoIntraAsk => "no_intra_ask",
            Variant::NoIntraRec => "no_intra_rec",
            Variant::NoTermination => "no_termination",
            Variant::NoFeedback => "no_feedback",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Variant::Full)
            .chain(Variant::ABLATIONS)
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub episodes: usize,
    pub batch_size: usize,
    /// Capacity of each option's buffer.
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which ε decays linearly; `None` means the first fifth of the run.
    pub epsilon_decay_episodes: Option<usize>,
    pub t_max: usize,
    pub agent: AgentConfig,
    pub rewards: RewardConfig,
    pub seed: u64,
    /// Turns between target-parameter refreshes; 0 keeps no separate target.
    pub target_sync: usize,
    /// Episodes in the rolling success-rate window of the history.
    pub rolling_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            lr: 1e-4,
            episodes: 10_000,
            batch_size: 128,
            buffer_capacity: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_episodes: None,
            t_max: 15,
            agent: AgentConfig::default(),
            rewards: RewardConfig::default(),
            seed: 0,
            target_sync: 20,
            rolling_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.t_max == 0 || self.rolling_window == 0 {
            return bad("batch_size, buffer_capacity, t_max and rolling_window must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_end) || !(0.0..=1.0).contains(&self.epsilon_start) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if self.epsilon_end > self.epsilon_start {
            return bad("epsilon schedule must not increase");
        }
        self.agent.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn decay_episodes(&self) -> usize {
        self.epsilon_decay_episodes.unwrap_or(self.episodes / 5)
    }

    /// ε for the given 0-based episode.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let span = self.decay_episodes();
        if span == 0 || episode >= span {
            return self.epsilon_end;
        }
        let f = episode as f64 / span as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

/// The part of a session state that the agent sees.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub acc_attrs: Vec<usize>,
    pub rej_attrs: Vec<usize>,
    pub rej_items: Vec<usize>,
    pub turn: usize,
    pub timestep: usize,
}

impl From<&SessionState> for StateSnapshot {
    fn from(s: &SessionState) -> Self {
        Self {
            acc_attrs: s.acc_attrs.clone(),
            rej_attrs: s.rej_attrs.iter().copied().collect(),
            rej_items: s.rej_items.iter().copied().collect(),
            turn: s.turn,
            timestep: s.timestep,
        }
    }
}

/// One answered choice, with the graphs it was taken in and led to.
#[derive(Clone, Debug)]
pub struct Experience {
    pub option: OptionKind,
    pub choice: Choice,
    pub accepted: bool,
    pub reward: f64,
    pub terminal: bool,
    pub state_before: StateSnapshot,
    pub state_after: StateSnapshot,
    pub graph_before: Arc<DynamicGraph>,
    pub graph_after: Arc<DynamicGraph>,
    /// Index of the choice among `graph_before.action_nodes(option)`.
    pub action_position: usize,
}

impl Experience {
    /// Pruned candidates per option at the next state.
    pub fn next_candidates(&self, option: OptionKind) -> &[usize] {
        self.graph_after.actions(option)
    }

    fn action_node(&self) -> usize {
        self.graph_before.action_nodes(self.option)[self.action_position]
    }
}

/// Fixed-capacity FIFO of experiences for one option.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }
}

/// Indices of a uniform minibatch: with replacement when `size` exceeds the
/// buffer, without otherwise.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Empty("cannot sample from an empty buffer".into()));
    }
    if size > len {
        Ok((0..size).map(|_| rng.gen_range(0..len)).collect())
    } else {
        Ok(rand::seq::index::sample(rng, len, size).into_vec())
    }
}

pub fn sample_minibatch<'b, R: Rng + ?Sized>(buf: &'b ReplayBuffer, size: usize, rng: &mut R) -> Result<Vec<&'b Experience>> {
    Ok(sample_indices(buf.len(), size, rng)?
        .into_iter()
        .map(|i| &buf.items[i])
        .collect())
}

/// `(1 − β)·q + β·best`.
pub fn mix_continuation(beta: f64, q_option: f64, best: f64) -> f64 {
    (1.0 - beta) * q_option + beta * best
}

/// Value of arriving at `next` while running `option`: continue it with
/// probability `1 − β`, else switch to the best option. An exhausted option
/// forces the switch; with both exhausted the value is 0.
pub fn u_value(next: &StateEval, option: OptionKind) -> f64 {
    match (next.q_omega(option), next.max_q_omega()) {
        (_, None) => 0.0,
        (None, Some(best)) => best,
        (Some(q), Some(best)) => mix_continuation(next.beta[option.index()], q, best),
    }
}

pub fn td_target(reward: f64, terminal: bool, gamma: f64, u: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * u
    }
}

fn encode_values(params: &AgentParams, g: &DynamicGraph) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (reps, state) = params.encode(&mut tape, g)?;
    Ok((tape.value(reps).clone(), tape.value(state).clone()))
}

fn mean_of(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Empty("empty batch".into()))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f64))
}

fn squared_error(tape: &mut Tape, pred: Var, target: f64) -> Result<Var> {
    let y = tape.constant(Tensor::scalar(target));
    let d = tape.sub(pred, y)?;
    tape.mul(d, d)
}

/// Mean of `(y − Q_U(s, ω, a))²`; differentiable in the encoder, value and
/// advantage parameters.
pub fn q_loss(tape: &mut Tape, params: &AgentParams, batch: &[&Experience], targets: &[f64]) -> Result<Var> {
    if batch.len() != targets.len() {
        return Err(Error::shape("q_loss", format!("{} targets for {} experiences", targets.len(), batch.len())));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (e, &y) in batch.iter().zip(targets) {
        let (reps, state) = params.encode(tape, &e.graph_before)?;
        let qs = params.q_all(tape, &e.graph_before, reps, state)?;
        let q = qs[e.option.index()].expect("the taken action is a candidate");
        let q = tape.gather_rows(q, vec![e.action_position])?;
        terms.push(squared_error(tape, q, y)?);
    }
    mean_of(tape, terms)
}

/// Fixed inputs of the termination loss for one experience.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminationInput {
    pub option: OptionKind,
    /// State vector of `s'`.
    pub state_vec: Tensor,
    /// `Q_Ω(s', ω) − V(s')`.
    pub advantage: f64,
}

/// Termination-loss inputs under the current parameters. Terminal steps and
/// steps whose option has nothing left at `s'` carry no termination signal.
pub fn termination_inputs(params: &AgentParams, batch: &[&Experience]) -> Result<Vec<TerminationInput>> {
    let mut out = Vec::new();
    for e in batch {
        if e.terminal || e.graph_after.actions(e.option).is_empty() {
            continue;
        }
        let ev = params.evaluate_graph(Arc::clone(&e.graph_after))?;
        let q = ev.q_omega(e.option).expect("option has candidates");
        out.push(TerminationInput {
            option: e.option,
            state_vec: ev.state_vec,
            advantage: q - ev.value,
        });
    }
    Ok(out)
}

/// Mean of `β_ω(s')·(Q_Ω(s', ω) − V(s'))` with the advantage held fixed, so
/// only the termination heads receive gradient.
pub fn termination_loss(tape: &mut Tape, params: &AgentParams, inputs: &[TerminationInput]) -> Result<Var> {
    let mut terms = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let s = tape.constant(inp.state_vec.clone());
        let beta = params.termination_on(tape, s, inp.option)?;
        terms.push(tape.scale(beta, inp.advantage));
    }
    mean_of(tape, terms)
}

/// Fixed inputs of the feedback loss for one experience.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackInput {
    pub option: OptionKind,
    pub state_vec: Tensor,
    pub action_rep: Tensor,
    pub label: bool,
}

pub fn feedback_inputs(params: &AgentParams, batch: &[&Experience]) -> Result<Vec<FeedbackInput>> {
    batch
        .iter()
        .map(|e| {
            let (reps, state) = encode_values(params, &e.graph_before)?;
            Ok(FeedbackInput {
                option: e.option,
                state_vec: state,
                action_rep: Tensor::row(reps.row_slice(e.action_node()).to_vec()),
                label: e.accepted,
            })
        })
        .collect()
}

/// Mean of `(𝟙[accepted] − T_ω(s, a))²`; only the feedback heads receive gradient.
pub fn feedback_loss(tape: &mut Tape, params: &AgentParams, inputs: &[FeedbackInput]) -> Result<Var> {
    let mut terms = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let s = tape.constant(inp.state_vec.clone());
        let a = tape.constant(inp.action_rep.clone());
        let t = params.feedback_on(tape, s, inp.option, a)?;
        terms.push(squared_error(tape, t, if inp.label { 1.0 } else { 0.0 })?);
    }
    mean_of(tape, terms)
}

/// Picks the option and builds the chain for one agent turn.
#[allow(clippy::too_many_arguments)]
pub fn agent_turn<R: Rng + ?Sized>(
    params: &AgentParams,
    ctx: &AgentContext<'_>,
    s: &SessionState,
    first: StateEval,
    mode: ChainMode,
    variant: Variant,
    epsilon: f64,
    rewards: &RewardConfig,
    rng: &mut R,
) -> Result<GeneratedChain> {
    let option = if variant == Variant::NoLongPolicy {
        let live: Vec<OptionKind> = OptionKind::ALL
            .into_iter()
            .filter(|&o| !first.q_values(o).is_empty())
            .collect();
        *live.choose(rng).ok_or_else(|| Error::Empty("both options exhausted".into()))?
    } else {
        select_option(&first, epsilon, rng)?
    };
    let one_shot = matches!(
        (variant, option),
        (Variant::NoIntraAsk, OptionKind::Ask) | (Variant::NoIntraRec, OptionKind::Rec)
    );
    let style = if one_shot {
        ChainStyle::OneShot
    } else {
        let feedback = match (mode, variant) {
            (ChainMode::Train, _) => FeedbackSource::Oracle,
            (ChainMode::Eval, Variant::NoFeedback) => FeedbackSource::Coin,
            (ChainMode::Eval, _) => FeedbackSource::Predictor,
        };
        ChainStyle::Sequential {
            feedback,
            use_termination: variant != Variant::NoTermination,
        }
    };
    generate_choice_chain(params, ctx, s, first, option, mode, style, rewards, rng)
}

/// The trained agent acting greedily, as a [`Policy`].
#[derive(Clone, Copy, Debug)]
pub struct AgentPolicy<'a> {
    pub params: &'a AgentParams,
    pub ctx: AgentContext<'a>,
    pub variant: Variant,
}

impl Policy for AgentPolicy<'_> {
    fn next_chain(&self, s: &SessionState, rng: &mut ChaCha8Rng) -> Result<ChoiceChain> {
        let first = self.params.evaluate(&self.ctx, s)?;
        let g = agent_turn(
            self.params,
            &self.ctx,
            s,
            first,
            ChainMode::Eval,
            self.variant,
            0.0,
            &RewardConfig::default(),
            rng,
        )?;
        Ok(g.chain)
    }
}

/// Runs the agent over `pairs` and scores it.
pub fn evaluate_agent(
    params: &AgentParams,
    ctx: AgentContext<'_>,
    variant: Variant,
    pairs: &[(usize, usize)],
    t_max: usize,
    seed: u64,
) -> Result<Evaluation> {
    let policy = AgentPolicy { params, ctx, variant };
    evaluate_policy(&policy, ctx.catalog, pairs, t_max, ctx.cfg.k_v, seed)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub episode: usize,
    pub q_loss: Option<f64>,
    pub term_loss: Option<f64>,
    pub fb_loss: Option<f64>,
    #[serde(rename = "rolling_SR")]
    pub rolling_sr: f64,
    pub epsilon: f64,
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Losses of one update; `None` where there was nothing to train on.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateLosses {
    pub q: Option<f64>,
    pub term: Option<f64>,
    pub feedback: Option<f64>,
}

/// Learner state: online and target parameters, buffers and optimizers.
pub struct Trainer<'a> {
    pub ctx: AgentContext<'a>,
    pub cfg: TrainConfig,
    pub variant: Variant,
    pub params: AgentParams,
    target: AgentParams,
    pub buffers: [ReplayBuffer; 2],
    opt_q: AdamState,
    opt_term: AdamState,
    opt_fb: AdamState,
    pub rng: ChaCha8Rng,
    turns: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(ctx: AgentContext<'a>, cfg: TrainConfig, variant: Variant, params: AgentParams) -> Result<Self> {
        cfg.validate()?;
        let opt_q = AdamState::new(&params.store, params.q_group());
        let opt_term = AdamState::new(&params.store, params.termination_group());
        let opt_fb = AdamState::new(&params.store, params.feedback_group());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            ctx,
            target: params.clone(),
            params,
            buffers: [ReplayBuffer::new(cfg.buffer_capacity), ReplayBuffer::new(cfg.buffer_capacity)],
            cfg,
            variant,
            opt_q,
            opt_term,
            opt_fb,
            rng,
            turns: 0,
        })
    }

    /// Parameters used for TD targets: the periodic snapshot, or the online
    /// parameters when syncing is disabled.
    pub fn target_params(&self) -> &AgentParams {
        if self.cfg.target_sync == 0 {
            &self.params
        } else {
            &self.target
        }
    }

    pub fn td_targets(&self, batch: &[&Experience]) -> Result<Vec<f64>> {
        let target = self.target_params();
        batch
            .iter()
            .map(|e| {
                let u = if e.terminal {
                    0.0
                } else {
                    u_value(&target.evaluate_graph(Arc::clone(&e.graph_after))?, e.option)
                };
                Ok(td_target(e.reward, e.terminal, self.cfg.gamma, u))
            })
            .collect()
    }

    /// One gradient step for each loss, in the order Q, termination, feedback.
    pub fn update(&mut self, option: OptionKind) -> Result<UpdateLosses> {
        let mut out = UpdateLosses::default();
        let bs = self.cfg.batch_size;
        let lr = self.cfg.lr;
        if self.buffers[option.index()].is_empty() {
            return Ok(out);
        }

        let idx = sample_indices(self.buffers[option.index()].len(), bs, &mut self.rng)?;
        let batch: Vec<&Experience> = idx.iter().map(|&i| &self.buffers[option.index()].items[i]).collect();
        let targets = self.td_targets(&batch)?;
        let mut tape = Tape::new();
        let loss = q_loss(&mut tape, &self.params, &batch, &targets)?;
        out.q = Some(tape.scalar(loss)?);
        let grads = tape.backward(loss, &self.params.store)?;
        self.opt_q.step(&mut self.params.store, &grads, lr)?;

        let idx = sample_indices(self.buffers[option.index()].len(), bs, &mut self.rng)?;
        let batch: Vec<&Experience> = idx.iter().map(|&i| &self.buffers[option.index()].items[i]).collect();
        let inputs = termination_inputs(&self.params, &batch)?;
        if !inputs.is_empty() {
            let mut tape = Tape::new();
            let loss = termination_loss(&mut tape, &self.params, &inputs)?;
            out.term = Some(tape.scalar(loss)?);
            let grads = tape.backward(loss, &self.params.store)?;
            self.opt_term.step(&mut self.params.store, &grads, lr)?;
        }

        let mut tape = Tape::new();
        let mut parts = Vec::new();
        for o in OptionKind::ALL {
            let buf = &self.buffers[o.index()];
            if buf.is_empty() {
                continue;
            }
            let idx = sample_indices(buf.len(), bs, &mut self.rng)?;
            let batch: Vec<&Experience> = idx.iter().map(|&i| &buf.items[i]).collect();
            let inputs = feedback_inputs(&self.params, &batch)?;
            parts.push(feedback_loss(&mut tape, &self.params, &inputs)?);
        }
        let loss = mean_of(&mut tape, parts)?;
        out.feedback = Some(tape.scalar(loss)?);
        let grads = tape.backward(loss, &self.params.store)?;
        self.opt_fb.step(&mut self.params.store, &grads, lr)?;
        Ok(out)
    }

    fn after_turn(&mut self) -> Result<()> {
        self.turns += 1;
        let period = self.cfg.target_sync as u64;
        if period > 0 && self.turns % period == 0 {
            self.target.store.copy_from(&self.params.store)?;
        }
        Ok(())
    }

    /// Plays one training episode, storing an experience per answered choice
    /// and updating after every turn. Returns the final state and the losses
    /// of each turn.
    pub fn run_episode(&mut self, user: usize, target: usize, epsilon: f64) -> Result<(SessionState, Vec<UpdateLosses>)> {
        let c = self.ctx.catalog;
        let mut s = reset_session(c, user, target, self.rng.gen())?;
        let mut losses = Vec::new();
        let mut graph = Arc::new(self.ctx.graph(&s)?);
        while s.status(self.cfg.t_max) == EpisodeStatus::Ongoing {
            if s.candidates(c).is_exhausted() {
                s.exhausted = true;
                break;
            }
            let first = self.params.evaluate_graph(Arc::clone(&graph))?;
            let g = agent_turn(
                &self.params,
                &self.ctx,
                &s,
                first,
                ChainMode::Train,
                self.variant,
                epsilon,
                &self.cfg.rewards,
                &mut self.rng,
            )?;
            let (next, next_graph, experiences) = self.replay_turn(&s, graph, &g)?;
            let option = g.chain.option;
            for e in experiences {
                self.buffers[option.index()].push(e);
            }
            s = next;
            graph = next_graph;
            losses.push(self.update(option)?);
            self.after_turn()?;
        }
        Ok((s, losses))
    }

    /// Applies the true answers to a generated chain and turns each answered
    /// choice into an experience.
    fn replay_turn(
        &self,
        s: &SessionState,
        start_graph: Arc<DynamicGraph>,
        g: &GeneratedChain,
    ) -> Result<(SessionState, Arc<DynamicGraph>, Vec<Experience>)> {
        let c = self.ctx.catalog;
        let option = g.chain.option;
        let mut cur = s.clone();
        let mut cur_graph = start_graph;
        // (before, after, choice, accepted, position); graphs filled below.
        let mut raw: Vec<(StateSnapshot, SessionState, Choice, bool, Option<usize>, Arc<DynamicGraph>)> = Vec::new();
        for (i, &choice) in g.chain.choices.iter().enumerate() {
            if cur.success.is_some() {
                break;
            }
            if i > 0 {
                let reuse = g.steps.get(i - 1).is_some_and(|st| st.state == cur) && i < g.evals.len();
                cur_graph = if reuse {
                    Arc::clone(&g.evals[i].graph)
                } else {
                    Arc::new(self.ctx.graph(&cur)?)
                };
            }
            let truth = simulate_user_response(&cur, c, choice)?;
            let position = cur_graph.actions(option).iter().position(|&id| id == choice.id());
            let before = StateSnapshot::from(&cur);
            let accepted = cur.record_presented(c, choice, truth)?;
            raw.push((before, cur.clone(), choice, accepted, position, Arc::clone(&cur_graph)));
        }
        let mut closed = cur.clone();
        closed.close_turn(c);
        let end_graph = Arc::new(self.ctx.graph(&closed)?);
        let ended = closed.status(self.cfg.t_max) != EpisodeStatus::Ongoing;

        let n = raw.len();
        let mut experiences = Vec::with_capacity(n);
        for i in 0..n {
            let (before, after, choice, accepted, position, graph_before) = &raw[i];
            let Some(position) = *position else { continue };
            let last = i + 1 == n;
            let graph_after = if last { Arc::clone(&end_graph) } else { Arc::clone(&raw[i + 1].5) };
            experiences.push(Experience {
                option,
                choice: *choice,
                accepted: *accepted,
                reward: choice_reward(option, *accepted, &self.cfg.rewards),
                terminal: after.success.is_some() || (last && ended),
                state_before: before.clone(),
                state_after: StateSnapshot::from(after),
                graph_before: Arc::clone(graph_before),
                graph_after,
                action_position: position,
            });
        }
        Ok((closed, end_graph, experiences))
    }
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AgentParams,
    pub history: Vec<HistoryRow>,
    pub logs: Vec<EpisodeLog>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains from fresh parameters initialised from `ctx.scores`.
pub fn train(ctx: AgentContext<'_>, pairs: &[(usize, usize)], cfg: &TrainConfig, variant: Variant) -> Result<TrainOutcome> {
    let params = AgentParams::new(ctx.scores, cfg.seed)?.with_centered_advantage(cfg.agent.center_advantage);
    train_from(ctx, pairs, cfg, variant, params)
}

/// Online training: each episode draws a `(user, target)` pair uniformly.
pub fn train_from(
    ctx: AgentContext<'_>,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    variant: Variant,
    params: AgentParams,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Empty("no training episodes".into()));
    }
    if *ctx.cfg != cfg.agent {
        return Err(Error::Config("agent settings of context and config differ".into()));
    }
    let mut trainer = Trainer::new(ctx, cfg.clone(), variant, params)?;
    let mut history = Vec::with_capacity(cfg.episodes);
    let mut logs = Vec::with_capacity(cfg.episodes);
    let mut window: VecDeque<bool> = VecDeque::with_capacity(cfg.rolling_window);
    for ep in 0..cfg.episodes {
        let epsilon = cfg.epsilon_at(ep);
        let (user, target) = pairs[trainer.rng.gen_range(0..pairs.len())];
        let (s, losses) = trainer.run_episode(user, target, epsilon)?;
        if window.len() == cfg.rolling_window {
            window.pop_front();
        }
        window.push_back(s.success.is_some());
        history.push(HistoryRow {
            episode: ep,
            q_loss: mean(losses.iter().map(|l| l.q)),
            term_loss: mean(losses.iter().map(|l| l.term)),
            fb_loss: mean(losses.iter().map(|l| l.feedback)),
            rolling_sr: window.iter().filter(|&&x| x).count() as f64 / window.len() as f64,
            epsilon,
        });
        logs.push(EpisodeLog::from_state(ep, &s, cfg.t_max));
    }
    Ok(TrainOutcome {
        params: trainer.params,
        history,
        logs,
    })
}

/// Trains and evaluates one variant with the same configuration.
pub fn run_ablation(
    ctx: AgentContext<'_>,
    train_pairs: &[(usize, usize)],
    test_pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<MetricsReport> {
    let out = train(ctx, train_pairs, cfg, variant)?;
    Ok(evaluate_agent(&out.params, ctx, variant, test_pairs, cfg.t_max, cfg.seed)?.report)
}

/// Catalog, frozen scoring table and agent settings bundled for convenience.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub catalog: Catalog,
    pub scores: EmbeddingTable,
    pub agent: AgentConfig,
}

impl Workspace {
    pub fn ctx(&self) -> AgentContext<'_> {
        AgentContext {
            catalog: &self.catalog,
            scores: &self.scores,
            cfg: &self.agent,
        }
    }
}
