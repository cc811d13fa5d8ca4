//! Command-line entry points and the HTTP session service.

pub mod api;
pub mod chat;
pub mod server;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cochpl::agent::AgentParams;
use cochpl::catalog::{load_catalog, Catalog};
use cochpl::eval::{
    evaluate_policy, write_reports_jsonl, BaselineKind, BaselinePolicy, Evaluation, OraclePolicy, RandomChainLength,
    RandomPolicy,
};
use cochpl::kg_embed::EmbeddingTable;
use cochpl::pipeline::PipelineConfig;
use cochpl::training::{evaluate_agent, run_ablation, train, write_history_csv, Variant, Workspace};

use crate::api::Service;

#[derive(Parser, Debug)]
#[command(name = "cochpl", version, about = "Conversational recommendation with chain-of-choice hierarchical policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Pipeline configuration file (JSON); built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for every stage; overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Catalog directory written by `data gen`.
    #[arg(long, value_name = "DIR")]
    pub catalog: PathBuf,
    /// Embedding table written by `embed`.
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Catalog utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Pretrain TransE embeddings with the test interactions held out.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        catalog: PathBuf,
        /// Output embedding table (JSON).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train the agent on the training interactions.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Output directory for checkpoint.json, history.csv and train_episodes.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Model variant (full or an ablation).
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Overrides the configured number of training episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate a policy on the held-out interactions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Agent checkpoint; required for the agent and topk_no_chain policies.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyArg::Agent)]
        policy: PolicyArg,
        /// Variant whose turn structure the agent policy follows.
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Choices per turn for the random policy.
        #[arg(long, value_enum, default_value_t = LengthArg::Single)]
        random_length: LengthArg,
        /// Report file (JSON).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write sr.csv and episodes.jsonl into this directory.
        #[arg(long, value_name = "DIR")]
        logs: Option<PathBuf>,
    },
    /// Train and evaluate each variant with the same configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Variants to run; full plus every ablation when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// One JSON line per variant.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Serve the session API over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Overrides the configured port (8080 by default).
        #[arg(long)]
        port: Option<u16>,
        /// Overrides the configured idle-session lifetime.
        #[arg(long)]
        ttl_minutes: Option<u64>,
        /// Browser origin allowed by CORS; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Play the user in the terminal, answering each choice with y or n.
    Chat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Opening attribute id; prompted for when omitted.
        #[arg(long)]
        attribute: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Generate a synthetic catalog.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output catalog directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum PolicyArg {
    Agent,
    Random,
    Oracle,
    AbsGreedy,
    MaxEntropy,
    TopkNoChain,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthArg {
    Single,
    Uniform,
    Max,
}

impl From<LengthArg> for RandomChainLength {
    fn from(l: LengthArg) -> Self {
        match l {
            LengthArg::Single => Self::Single,
            LengthArg::Uniform => Self::Uniform,
            LengthArg::Max => Self::Max,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn load_inputs(inputs: &Inputs) -> anyhow::Result<(Catalog, EmbeddingTable)> {
    let c = load_catalog(&inputs.catalog).with_context(|| format!("loading catalog {}", inputs.catalog.display()))?;
    let tbl = EmbeddingTable::load(&inputs.embeddings)
        .with_context(|| format!("loading embeddings {}", inputs.embeddings.display()))?;
    if tbl.num_entities() != c.num_entities() || tbl.num_relations() != c.num_relations() {
        bail!(
            "embeddings cover {} entities and {} relations, the catalog has {} and {}",
            tbl.num_entities(),
            tbl.num_relations(),
            c.num_entities(),
            c.num_relations()
        );
    }
    Ok((c, tbl))
}

fn load_params(path: &Path, cfg: &PipelineConfig) -> anyhow::Result<AgentParams> {
    let params = AgentParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(params.with_centered_advantage(cfg.train.agent.center_advantage))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Catalog, scoring table and checkpoint bundled into a session service.
pub fn build_service(cfg: &PipelineConfig, c: Catalog, tbl: EmbeddingTable, params: AgentParams) -> Service {
    let ws = Workspace {
        catalog: c,
        scores: tbl,
        agent: cfg.train.agent,
    };
    Service::new(
        Arc::new(ws),
        Arc::new(params),
        cfg.train.t_max,
        cfg.seed,
        Duration::from_secs(cfg.serve.ttl_minutes * 60),
    )
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Data {
            command: DataCommand::Gen { common, out },
        } => {
            let cfg = load_config(&common)?;
            let c = cfg.generate_catalog()?;
            c.save(&out).with_context(|| format!("writing catalog to {}", out.display()))?;
            let s = c.stats();
            println!("wrote catalog to {}: {s:?}", out.display());
        }
        Command::Embed { common, catalog, out } => {
            let cfg = load_config(&common)?;
            let c = load_catalog(&catalog)?;
            let split = cfg.split(&c)?;
            let tbl = cfg.pretrain(&c, &split)?;
            tbl.save(&out)?;
            println!("wrote {}x{} entity embeddings to {}", tbl.num_entities(), tbl.dim(), out.display());
        }
        Command::Train {
            common,
            inputs,
            out,
            variant,
            episodes,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = episodes {
                cfg.train.episodes = n;
            }
            let (c, tbl) = load_inputs(&inputs)?;
            let split = cfg.split(&c)?;
            let outcome = train(cfg.context(&c, &tbl), &split.train, &cfg.train_config(), variant)?;
            create_dir(&out)?;
            outcome.params.save(&out.join("checkpoint.json"))?;
            write_history_csv(&out.join("history.csv"), &outcome.history)?;
            cochpl::env::write_episode_logs(&out.join("train_episodes.jsonl"), &outcome.logs)?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            let last = outcome.history.last().map_or(0.0, |r| r.rolling_sr);
            println!("trained {variant:?} for {} episodes, rolling SR {last:.3}", cfg.train.episodes);
        }
        Command::Eval {
            common,
            inputs,
            checkpoint,
            policy,
            variant,
            random_length,
            out,
            logs,
        } => {
            let cfg = load_config(&common)?;
            let (c, tbl) = load_inputs(&inputs)?;
            let split = cfg.split(&c)?;
            let ctx = cfg.context(&c, &tbl);
            let (t_max, k_v, seed) = (cfg.train.t_max, cfg.train.agent.k_v, cfg.seed);
            let params = match (&checkpoint, policy) {
                (Some(p), _) => Some(load_params(p, &cfg)?),
                (None, PolicyArg::Agent | PolicyArg::TopkNoChain) => bail!("--checkpoint is required for {policy:?}"),
                (None, _) => None,
            };
            let baseline = |kind| BaselinePolicy {
                kind,
                ctx,
                params: params.as_ref(),
            };
            let ev: Evaluation = match policy {
                PolicyArg::Agent => {
                    let p = params.as_ref().expect("checked above");
                    evaluate_agent(p, ctx, variant, &split.test, t_max, seed)?
                }
                PolicyArg::Random => {
                    let r = RandomPolicy {
                        catalog: &c,
                        k_v,
                        k_p: cfg.train.agent.k_p,
                        length: random_length.into(),
                    };
                    evaluate_policy(&r, &c, &split.test, t_max, k_v, seed)?
                }
                PolicyArg::Oracle => evaluate_policy(&OraclePolicy, &c, &split.test, t_max, k_v, seed)?,
                PolicyArg::AbsGreedy => evaluate_policy(&baseline(BaselineKind::AbsGreedy), &c, &split.test, t_max, k_v, seed)?,
                PolicyArg::MaxEntropy => {
                    evaluate_policy(&baseline(BaselineKind::MaxEntropy), &c, &split.test, t_max, k_v, seed)?
                }
                PolicyArg::TopkNoChain => {
                    evaluate_policy(&baseline(BaselineKind::TopkNoChain), &c, &split.test, t_max, k_v, seed)?
                }
            };
            ev.report.save(&out)?;
            if let Some(dir) = logs {
                ev.save(&dir)?;
            }
            println!(
                "{policy:?}: SR@{t_max} {:.3}, AT {:.2}, hDCG {:.3} over {} episodes",
                ev.report.success_rate(),
                ev.report.at,
                ev.report.hdcg,
                ev.report.episodes
            );
        }
        Command::Ablate {
            common,
            inputs,
            variants,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (c, tbl) = load_inputs(&inputs)?;
            let split = cfg.split(&c)?;
            let variants = if variants.is_empty() {
                std::iter::once(Variant::Full).chain(Variant::ABLATIONS).collect()
            } else {
                variants
            };
            let mut reports = Vec::new();
            for v in variants {
                let r = run_ablation(cfg.context(&c, &tbl), &split.train, &split.test, &cfg.train_config(), v)?;
                println!("{}: SR {:.3}, AT {:.2}", v.as_str(), r.success_rate(), r.at);
                reports.push((v.as_str().to_owned(), r));
            }
            write_reports_jsonl(&out, &reports)?;
        }
        Command::Serve {
            common,
            inputs,
            checkpoint,
            host,
            port,
            ttl_minutes,
            cors_origin,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = ttl_minutes {
                cfg.serve.ttl_minutes = m;
            }
            let port = port.unwrap_or(cfg.serve.port);
            let origin = cors_origin.or_else(|| cfg.serve.cors_origin.clone());
            let (c, tbl) = load_inputs(&inputs)?;
            let params = load_params(&checkpoint, &cfg)?;
            let service = Arc::new(build_service(&cfg, c, tbl, params));
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(server::serve(service, SocketAddr::new(host, port), origin.as_deref()))?;
        }
        Command::Chat {
            common,
            inputs,
            checkpoint,
            attribute,
        } => {
            let cfg = load_config(&common)?;
            let (c, tbl) = load_inputs(&inputs)?;
            let params = load_params(&checkpoint, &cfg)?;
            let service = build_service(&cfg, c, tbl, params);
            let stdin = std::io::stdin();
            chat::run_chat(&service, attribute, &mut stdin.lock(), &mut std::io::stdout())?;
        }
    }
    Ok(())
}
