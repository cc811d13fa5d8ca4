//! Success-rate curves, average turns, hDCG, scripted baselines and the
//! episode driver used to evaluate any policy against the simulated user.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{generate_choice_chain, AgentContext, AgentParams, ChainMode, ChainStyle};
use crate::catalog::Catalog;
use crate::env::{
    apply_turn, reset_session, simulate_user_response, Choice, ChoiceChain, EpisodeLog, EpisodeStatus, OptionKind,
    RewardConfig, SessionState,
};
use crate::error::{Error, Result};
use crate::graph_state::{item_preference_score, prune_candidates};

/// Tag stored with every report so hDCG numbers from different formulas are
/// never compared by accident.
pub const FORMULA_VERSION: &str = "v1";

/// Aggregate results of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// `sr_curve[t - 1]` is the fraction of episodes that succeeded by turn `t`.
    pub sr_curve: Vec<f64>,
    pub at: f64,
    pub hdcg: f64,
    pub episodes: usize,
    pub formula_version: String,
}

impl MetricsReport {
    /// SR@t for `1 <= t <= T_max`.
    pub fn sr_at(&self, t: usize) -> f64 {
        self.sr_curve[t - 1]
    }

    /// SR at the last turn.
    pub fn success_rate(&self) -> f64 {
        self.sr_curve.last().copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Per-turn `turn,sr` CSV for plotting.
    pub fn write_sr_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["turn", "sr"])?;
        for (i, sr) in self.sr_curve.iter().enumerate() {
            w.write_record([(i + 1).to_string(), sr.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Gain of one success at turn `t` with the accepted item at rank `k` of its chain.
pub fn hdcg_single(t: usize, k: usize, t_max: usize, k_v: usize) -> Result<f64> {
    if t == 0 || t > t_max {
        return Err(Error::OutOfRange(format!("success turn {t} outside 1..={t_max}")));
    }
    if k == 0 || k > k_v {
        return Err(Error::OutOfRange(format!("success rank {k} outside 1..={k_v}")));
    }
    let (t, k) = (t as f64, k as f64);
    Ok(1.0 / (t + 2.0).log2() + (1.0 / (t + 1.0).log2()) * (1.0 / (k + 1.0).log2()))
}

/// SR curve, AT (failures count as `t_max`) and mean hDCG (failures score 0).
pub fn compute_metrics(logs: &[EpisodeLog], t_max: usize, k_v: usize) -> Result<MetricsReport> {
    if logs.is_empty() {
        return Err(Error::Empty("no episodes to score".into()));
    }
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be positive".into()));
    }
    let n = logs.len() as f64;
    let mut hits = vec![0usize; t_max];
    let mut turns = 0usize;
    let mut gain = 0.0;
    for log in logs {
        match (log.success_turn, log.success_rank) {
            (Some(t), Some(k)) if t <= t_max => {
                hits[t - 1] += 1;
                turns += t;
                gain += hdcg_single(t, k, t_max, k_v)?;
            }
            _ => turns += t_max,
        }
    }
    let mut sr_curve = Vec::with_capacity(t_max);
    let mut cumulative = 0;
    for h in hits {
        cumulative += h;
        sr_curve.push(cumulative as f64 / n);
    }
    Ok(MetricsReport {
        sr_curve,
        at: turns as f64 / n,
        hdcg: gain / n,
        episodes: logs.len(),
        formula_version: FORMULA_VERSION.into(),
    })
}

/// Anything that can pick the next turn's chain from a session state.
pub trait Policy {
    fn next_chain(&self, s: &SessionState, rng: &mut ChaCha8Rng) -> Result<ChoiceChain>;
}

/// Stream-separated generator for episode `index` of a run seeded by `seed`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Plays one simulated episode: each turn the policy presents a chain, the
/// simulated user answers every choice against the pre-turn state, and the
/// answers are applied in chain order.
pub fn play_episode<P: Policy + ?Sized>(
    policy: &P,
    c: &Catalog,
    user: usize,
    target: usize,
    t_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SessionState> {
    let mut s = reset_session(c, user, target, rng.gen())?;
    while s.status(t_max) == EpisodeStatus::Ongoing {
        if s.candidates(c).is_exhausted() {
            s.exhausted = true;
            break;
        }
        let chain = policy.next_chain(&s, rng)?;
        let answers = chain
            .choices
            .iter()
            .map(|&ch| simulate_user_response(&s, c, ch))
            .collect::<Result<Vec<_>>>()?;
        s = apply_turn(&s, c, &chain, &answers)?;
    }
    Ok(s)
}

/// Report plus the per-episode logs it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub logs: Vec<EpisodeLog>,
}

impl Evaluation {
    /// Writes `report.json`, `sr.csv` and `episodes.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.report.save(&dir.join("report.json"))?;
        self.report.write_sr_csv(&dir.join("sr.csv"))?;
        crate::env::write_episode_logs(&dir.join("episodes.jsonl"), &self.logs)
    }
}

/// Runs one episode per `(user, target)` pair and aggregates the metrics.
pub fn evaluate_policy<P: Policy + ?Sized>(
    policy: &P,
    c: &Catalog,
    pairs: &[(usize, usize)],
    t_max: usize,
    k_v: usize,
    seed: u64,
) -> Result<Evaluation> {
    let mut logs = Vec::with_capacity(pairs.len());
    for (i, &(user, target)) in pairs.iter().enumerate() {
        let mut rng = episode_rng(seed, i);
        let s = play_episode(policy, c, user, target, t_max, &mut rng)?;
        logs.push(EpisodeLog::from_state(i, &s, t_max));
    }
    let report = compute_metrics(&logs, t_max, k_v)?;
    Ok(Evaluation { report, logs })
}

/// How many choices the random policy puts in a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomChainLength {
    /// One random choice per turn.
    Single,
    /// A uniformly random length up to the option's maximum.
    Uniform,
    /// Always the option's maximum length.
    Max,
}

/// Uniformly random option among those with candidates, then distinct
/// candidates drawn uniformly.
#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy<'a> {
    pub catalog: &'a Catalog,
    pub k_v: usize,
    pub k_p: usize,
    pub length: RandomChainLength,
}

impl Policy for RandomPolicy<'_> {
    fn next_chain(&self, s: &SessionState, rng: &mut ChaCha8Rng) -> Result<ChoiceChain> {
        let cand = s.candidates(self.catalog);
        let live: Vec<OptionKind> = OptionKind::ALL.into_iter().filter(|&o| !cand.get(o).is_empty()).collect();
        let option = *live
            .choose(rng)
            .ok_or_else(|| Error::Empty("both options exhausted".into()))?;
        let max = match option {
            OptionKind::Ask => self.k_p,
            OptionKind::Rec => self.k_v,
        };
        let len = match self.length {
            RandomChainLength::Single => 1,
            RandomChainLength::Uniform => rng.gen_range(1..=max),
            RandomChainLength::Max => max,
        };
        let picked: Vec<usize> = cand.get(option).choose_multiple(rng, len).copied().collect();
        Ok(ChoiceChain {
            option,
            choices: picked.into_iter().map(|id| option.choice(id)).collect(),
        })
    }
}

/// Recommends the target outright; the upper bound for every metric.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn next_chain(&self, s: &SessionState, _rng: &mut ChaCha8Rng) -> Result<ChoiceChain> {
        let target = s
            .target
            .ok_or_else(|| Error::InvalidArgument("oracle policy needs a simulated target".into()))?;
        Ok(ChoiceChain {
            option: OptionKind::Rec,
            choices: vec![OptionKind::Rec.choice(target)],
        })
    }
}

/// Scripted comparison policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Recommends the best-scored items every turn.
    AbsGreedy,
    /// Asks the most informative attributes half of the time.
    MaxEntropy,
    /// Trained Q-values, greedy option, one-shot top-k without chain simulation.
    TopkNoChain,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_greedy" => Ok(Self::AbsGreedy),
            "max_entropy" => Ok(Self::MaxEntropy),
            "topk_no_chain" => Ok(Self::TopkNoChain),
            other => Err(Error::InvalidArgument(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Binary entropy (nats) of an attribute's presence ratio among `items`.
pub fn presence_entropy(c: &Catalog, items: &[usize], attr: usize) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let have = items
        .iter()
        .filter(|&&v| c.item_attributes(v).binary_search(&attr).is_ok())
        .count();
    let rho = have as f64 / items.len() as f64;
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(rho) + h(1.0 - rho)
}

fn top_items(ctx: &AgentContext<'_>, s: &SessionState, items: &[usize]) -> Result<ChoiceChain> {
    let scores = items
        .iter()
        .map(|&v| item_preference_score(s, ctx.scores, ctx.catalog, v))
        .collect::<Result<Vec<_>>>()?;
    let top = prune_candidates(items, &scores, ctx.cfg.k_v)?;
    Ok(ChoiceChain {
        option: OptionKind::Rec,
        choices: top.into_iter().map(Choice::Item).collect(),
    })
}

/// One turn of a scripted baseline.
pub fn baseline_step(
    kind: BaselineKind,
    s: &SessionState,
    ctx: &AgentContext<'_>,
    params: Option<&AgentParams>,
    rng: &mut ChaCha8Rng,
) -> Result<(OptionKind, ChoiceChain)> {
    let cand = s.candidates(ctx.catalog);
    if cand.is_exhausted() {
        return Err(Error::Empty("both options exhausted".into()));
    }
    let chain = match kind {
        BaselineKind::AbsGreedy => {
            if cand.items.is_empty() {
                return Err(Error::Empty("no candidate items".into()));
            }
            top_items(ctx, s, &cand.items)?
        }
        BaselineKind::MaxEntropy => {
            let ask = !cand.attributes.is_empty() && (cand.items.is_empty() || rng.gen_bool(0.5));
            if ask {
                let h: Vec<f64> = cand
                    .attributes
                    .iter()
                    .map(|&a| presence_entropy(ctx.catalog, &cand.items, a))
                    .collect();
                let top = prune_candidates(&cand.attributes, &h, ctx.cfg.k_p)?;
                ChoiceChain {
                    option: OptionKind::Ask,
                    choices: top.into_iter().map(Choice::Attribute).collect(),
                }
            } else {
                top_items(ctx, s, &cand.items)?
            }
        }
        BaselineKind::TopkNoChain => {
            let params = params.ok_or_else(|| Error::InvalidArgument("topk_no_chain needs trained parameters".into()))?;
            let first = params.evaluate(ctx, s)?;
            let option = first
                .greedy_option()
                .ok_or_else(|| Error::Empty("both options exhausted".into()))?;
            generate_choice_chain(
                params,
                ctx,
                s,
                first,
                option,
                ChainMode::Eval,
                ChainStyle::OneShot,
                &RewardConfig::default(),
                rng,
            )?
            .chain
        }
    };
    Ok((chain.option, chain))
}

/// A scripted baseline as a [`Policy`].
#[derive(Clone, Copy, Debug)]
pub struct BaselinePolicy<'a> {
    pub kind: BaselineKind,
    pub ctx: AgentContext<'a>,
    pub params: Option<&'a AgentParams>,
}

impl Policy for BaselinePolicy<'_> {
    fn next_chain(&self, s: &SessionState, rng: &mut ChaCha8Rng) -> Result<ChoiceChain> {
        Ok(baseline_step(self.kind, s, &self.ctx, self.params, rng)?.1)
    }
}

/// Writes one JSON line per report.
pub fn write_reports_jsonl(path: &Path, reports: &[(String, MetricsReport)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (name, r) in reports {
        let line = serde_json::json!({ "name": name, "report": r });
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
