use std::collections::BTreeSet;
use std::sync::Arc;

use cochpl::agent::{AgentConfig, AgentContext, AgentParams, ChainMode};
use cochpl::catalog::{generate_synthetic, Catalog, InteractionSplit, SynthConfig};
use cochpl::env::{apply_choice_outcome, candidate_actions, reset_human_session, reset_session, OptionKind, RewardConfig};
use cochpl::kg_embed::EmbeddingTable;
use cochpl::neural::{finite_diff_check_subset, ParamId, ParamStore, Tape, Tensor};
use cochpl::training::{
    agent_turn, feedback_inputs, feedback_loss, mix_continuation, q_loss, sample_indices, sample_minibatch,
    td_target, termination_inputs, termination_loss, train, u_value, write_history_csv, Experience, FeedbackInput,
    ReplayBuffer, StateSnapshot, TerminationInput, TrainConfig, Trainer, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn catalog() -> Catalog {
    generate_synthetic(&SynthConfig::new(6, 40, 12, 3, 3, 5).with_popularity_exponent(1.0), 8).unwrap()
}

fn table(c: &Catalog, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |r: usize| Tensor::new(r, d, (0..r * d).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let ents = rand(c.num_entities());
    let rels = rand(c.num_relations());
    EmbeddingTable::new(ents, rels, seed).unwrap()
}

fn small_cfg(agent: AgentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        episodes: 6,
        batch_size: 4,
        lr: 1e-3,
        buffer_capacity: 500,
        agent,
        seed,
        ..TrainConfig::default()
    }
}

/// Fills both buffers by playing a few training episodes.
fn filled_trainer<'a>(ctx: AgentContext<'a>, seed: u64) -> Trainer<'a> {
    let params = AgentParams::new(ctx.scores, seed).unwrap().with_centered_advantage(ctx.cfg.center_advantage);
    let mut tr = Trainer::new(ctx, small_cfg(*ctx.cfg, seed), Variant::Full, params).unwrap();
    let mut ep = 0;
    while tr.buffers.iter().any(|b| b.len() < 2) {
        let target = ep % ctx.catalog.num_items();
        tr.run_episode(0, target, 1.0).unwrap();
        ep += 1;
        assert!(ep < 200, "buffers never filled");
    }
    tr
}

fn two_of_each(tr: &Trainer<'_>) -> Vec<Experience> {
    tr.buffers
        .iter()
        .flat_map(|b| vec![b.get(0).unwrap().clone(), b.get(b.len() - 1).unwrap().clone()])
        .collect()
}

fn with_store(p: &AgentParams, store: &ParamStore) -> AgentParams {
    AgentParams {
        store: store.clone(),
        ..p.clone()
    }
}

#[test]
fn continuation_value_examples() {
    assert_eq!(mix_continuation(0.0, 1.0, 2.0), 1.0);
    assert_eq!(mix_continuation(1.0, 1.0, 2.0), 2.0);
    assert!((mix_continuation(0.4, 1.0, 2.0) - 1.4).abs() < 1e-12);
    assert_eq!(td_target(1.0, true, 0.999, 5.0), 1.0);
    assert!((td_target(0.01, false, 0.999, 1.4) - 1.4086).abs() < 1e-12);
    assert_eq!(td_target(0.3, false, 0.0, 7.0), 0.3);
}

#[test]
fn u_value_boundaries_on_real_states() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let p = AgentParams::new(&tbl, 2).unwrap();
    for v in 0..10 {
        let s = reset_session(&c, 0, v, v as u64).unwrap();
        let mut ev = p.evaluate(&ctx, &s).unwrap();
        for o in OptionKind::ALL {
            let Some(q) = ev.q_omega(o) else { continue };
            let best = ev.max_q_omega().unwrap();
            ev.beta[o.index()] = 0.0;
            assert!((u_value(&ev, o) - q).abs() < 1e-12);
            ev.beta[o.index()] = 1.0;
            assert!((u_value(&ev, o) - best).abs() < 1e-12);
        }
        ev.q = [vec![], vec![]];
        assert_eq!(u_value(&ev, OptionKind::Ask), 0.0);
    }
}

#[test]
fn minibatch_sampling_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sample_indices(1, 4, &mut rng).unwrap(), vec![0; 4]);
    assert!(sample_indices(0, 4, &mut rng).is_err());
    let a = sample_indices(50, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, sample_indices(50, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap());
    assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 10, "no replacement when the buffer is large enough");

    let mut counts = [0usize; 10];
    for _ in 0..1000 {
        for i in sample_indices(10, 10, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let mut counts_repl = [0usize; 10];
    for i in sample_indices(10, 10_000, &mut rng).unwrap() {
        counts_repl[i] += 1;
    }
    assert_eq!(counts, [1000; 10]);
    let stat: f64 = counts_repl.iter().map(|&o| (o as f64 - 1000.0).powi(2) / 1000.0).sum();
    assert!(1.0 - ChiSquared::new(9.0).unwrap().cdf(stat) > 0.01, "{counts_repl:?}");
}

#[test]
fn buffer_evicts_oldest_first() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let tr = filled_trainer(ctx, 3);
    let all: Vec<Experience> = tr.buffers[1].iter().cloned().collect();
    let mut buf = ReplayBuffer::new(2);
    for e in all.iter().take(3) {
        buf.push(e.clone());
    }
    assert_eq!(buf.len(), 2);
    assert_eq!(buf.get(0).unwrap().state_before, all[1].state_before);
    assert_eq!(buf.get(1).unwrap().state_before, all[2].state_before);
    let one = ReplayBuffer::new(5);
    assert!(sample_minibatch(&one, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn epsilon_schedule_is_linear_then_flat() {
    let cfg = TrainConfig {
        episodes: 100,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.epsilon_at(0), 1.0);
    assert!((cfg.epsilon_at(10) - (1.0 - 0.99 * 0.5)).abs() < 1e-12);
    assert_eq!(cfg.epsilon_at(20), 0.01);
    assert_eq!(cfg.epsilon_at(99), 0.01);
    let eps: Vec<f64> = (0..100).map(|e| cfg.epsilon_at(e)).collect();
    assert!(eps.windows(2).all(|w| w[1] <= w[0]));
    assert!(TrainConfig::from_json(r#"{"gamma": 1.5}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
    let parsed = TrainConfig::from_json(r#"{"episodes": 7, "agent": {"k_v": 5, "k_p": 2, "prune_v": 10, "prune_p": 10}}"#).unwrap();
    assert_eq!((parsed.episodes, parsed.agent.k_v, parsed.gamma), (7, 5, 0.999));
}

#[test]
fn experiences_match_history_and_replay() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let params = AgentParams::new(&tbl, 5).unwrap();
    let mut tr = Trainer::new(ctx, small_cfg(cfg, 5), Variant::Full, params).unwrap();
    for target in 0..8 {
        let before = [tr.buffers[0].len(), tr.buffers[1].len()];
        let (s, _) = tr.run_episode(1, target, 0.5).unwrap();
        for o in OptionKind::ALL {
            let answered = s.history.iter().filter(|h| h.option == o).count();
            assert_eq!(tr.buffers[o.index()].len() - before[o.index()], answered);
        }
        let new: Vec<&Experience> = OptionKind::ALL
            .iter()
            .flat_map(|o| tr.buffers[o.index()].iter().skip(before[o.index()]))
            .collect();
        assert_eq!(new.iter().filter(|e| e.terminal).count(), 1);
        for e in new {
            assert_eq!(e.choice.option(), e.option);
            let mut st = reset_human_session(&c, 0, e.state_before.acc_attrs[0]).unwrap();
            st.acc_attrs = e.state_before.acc_attrs.clone();
            st.rej_attrs = e.state_before.rej_attrs.iter().copied().collect();
            st.rej_items = e.state_before.rej_items.iter().copied().collect();
            st.turn = e.state_before.turn;
            st.timestep = e.state_before.timestep;
            let next = apply_choice_outcome(&st, &c, e.choice, e.accepted).unwrap();
            assert_eq!(StateSnapshot::from(&next), e.state_after);
            assert_eq!(e.graph_before.actions(e.option)[e.action_position], e.choice.id());
        }
    }
}

#[test]
fn three_choice_ask_turn_stores_three_experiences() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let mut params = AgentParams::new(&tbl, 5).unwrap();
    // Never terminate early and always prefer asking.
    for o in OptionKind::ALL {
        let t = params.model.termination[o.index()];
        params.store.get_mut(t.weight).values_mut().fill(0.0);
        params.store.get_mut(t.bias).values_mut()[0] = -60.0;
    }
    let adv = params.model.advantage[OptionKind::Ask.index()].output;
    params.store.get_mut(adv.bias).values_mut()[0] = 50.0;
    let target = (0..c.num_items())
        .find(|&v| {
            let s = reset_session(&c, 0, v, 0).unwrap();
            candidate_actions(&s, OptionKind::Ask, &c).len() >= 3
        })
        .unwrap();
    let mut tr = Trainer::new(ctx, small_cfg(cfg, 5), Variant::Full, params).unwrap();
    tr.rng = ChaCha8Rng::seed_from_u64(0);
    let s = reset_session(&c, 0, target, 0).unwrap();
    let first = tr.params.evaluate(&ctx, &s).unwrap();
    let g = agent_turn(&tr.params, &ctx, &s, first, ChainMode::Train, Variant::Full, 0.0, &RewardConfig::default(), &mut tr.rng)
        .unwrap();
    assert_eq!(g.chain.option, OptionKind::Ask);
    assert_eq!(g.chain.len(), 3);
    let (s, _) = tr.run_episode(0, target, 0.0).unwrap();
    let first_turn = s.history.iter().filter(|h| h.turn == 1).count();
    assert_eq!(s.history[0].option, OptionKind::Ask);
    assert_eq!(first_turn, 3);
    assert!(tr.buffers[OptionKind::Ask.index()].len() >= 3);
}

#[test]
fn loss_examples() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let tr = filled_trainer(ctx, 4);
    let p = &tr.params;
    let exps = two_of_each(&tr);
    let batch: Vec<&Experience> = exps.iter().take(2).collect();

    let q_of = |e: &Experience| {
        let ev = p.evaluate_graph(Arc::clone(&e.graph_before)).unwrap();
        ev.q_values(e.option)[e.action_position]
    };
    let qs: Vec<f64> = batch.iter().map(|e| q_of(e)).collect();
    let loss = |targets: Vec<f64>| {
        let mut tape = Tape::new();
        let l = q_loss(&mut tape, p, &batch, &targets).unwrap();
        tape.scalar(l).unwrap()
    };
    assert!(loss(qs.clone()).abs() < 1e-20);
    assert!((loss(vec![qs[0] + 1.0, qs[1] - 2.0]) - 2.5).abs() < 1e-10);
    assert!((loss(vec![qs[0] + 1.0, qs[1]]) - 0.5).abs() < 1e-10);

    // Termination head pinned at β = 0.5.
    let mut half = p.clone();
    for o in OptionKind::ALL {
        let t = half.model.termination[o.index()];
        half.store.get_mut(t.weight).values_mut().fill(0.0);
        half.store.get_mut(t.bias).values_mut().fill(0.0);
    }
    let sv = Tensor::row(vec![0.1; 8]);
    let term = |adv: f64| {
        let mut tape = Tape::new();
        let inp = TerminationInput { option: OptionKind::Rec, state_vec: sv.clone(), advantage: adv };
        let l = termination_loss(&mut tape, &half, &[inp]).unwrap();
        tape.scalar(l).unwrap()
    };
    assert_eq!(term(0.0), 0.0);
    assert!((term(0.2) - 0.1).abs() < 1e-12);
    assert!((term(-0.3) + 0.15).abs() < 1e-12);

    // Feedback head pinned at a constant prediction.
    let pinned = |prob: f64| {
        let mut q = p.clone();
        for o in OptionKind::ALL {
            let out = q.model.feedback[o.index()].output;
            q.store.get_mut(out.weight).values_mut().fill(0.0);
            q.store.get_mut(out.bias).values_mut()[0] = (prob / (1.0 - prob)).ln();
        }
        q
    };
    let fb = |params: &AgentParams, labels: &[bool]| {
        let inputs: Vec<FeedbackInput> = labels
            .iter()
            .map(|&label| FeedbackInput {
                option: OptionKind::Ask,
                state_vec: sv.clone(),
                action_rep: Tensor::row(vec![-0.2; 8]),
                label,
            })
            .collect();
        let mut tape = Tape::new();
        let l = feedback_loss(&mut tape, params, &inputs).unwrap();
        tape.scalar(l).unwrap()
    };
    assert!((fb(&pinned(0.75), &[true]) - 0.0625).abs() < 1e-12);
    assert!((fb(&pinned(0.5), &[true, false, true]) - 0.25).abs() < 1e-12);
    assert!(fb(&pinned(1.0 - 1e-12), &[true]) < 1e-20);

    let mut tape = Tape::new();
    assert!(q_loss(&mut tape, p, &[], &[]).is_err());
    assert!(termination_loss(&mut tape, p, &[]).is_err());
    assert!(feedback_loss(&mut tape, p, &[]).is_err());
}

fn nonzero(grads: &cochpl::neural::Gradients, ids: &[ParamId]) -> bool {
    ids.iter().any(|&id| grads.get(id).max_abs() > 0.0)
}

#[test]
fn each_loss_touches_only_its_parameters() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let tr = filled_trainer(ctx, 6);
    let p = &tr.params;
    let exps = two_of_each(&tr);
    let batch: Vec<&Experience> = exps.iter().collect();
    let (q_ids, t_ids, f_ids) = (p.q_group(), p.termination_group(), p.feedback_group());

    let mut tape = Tape::new();
    let l = q_loss(&mut tape, p, &batch, &vec![1.0; batch.len()]).unwrap();
    let g = tape.backward(l, &p.store).unwrap();
    assert!(nonzero(&g, &q_ids) && !nonzero(&g, &t_ids) && !nonzero(&g, &f_ids));

    let inputs: Vec<TerminationInput> = batch
        .iter()
        .map(|e| TerminationInput {
            option: e.option,
            state_vec: p.evaluate_graph(Arc::clone(&e.graph_after)).unwrap().state_vec,
            advantage: 0.7,
        })
        .collect();
    let mut tape = Tape::new();
    let l = termination_loss(&mut tape, p, &inputs).unwrap();
    let g = tape.backward(l, &p.store).unwrap();
    assert!(!nonzero(&g, &q_ids) && nonzero(&g, &t_ids) && !nonzero(&g, &f_ids));
    assert!(termination_inputs(p, &batch).unwrap().len() <= batch.len());

    let mut tape = Tape::new();
    let l = feedback_loss(&mut tape, p, &feedback_inputs(p, &batch).unwrap()).unwrap();
    let g = tape.backward(l, &p.store).unwrap();
    assert!(!nonzero(&g, &q_ids) && !nonzero(&g, &t_ids) && nonzero(&g, &f_ids));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let c = catalog();
    let tbl = table(&c, 4, 1);
    for (seed, centered) in [(11, false), (12, true), (13, false)] {
        let cfg = AgentConfig { center_advantage: centered, ..AgentConfig::default() };
        let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
        let tr = filled_trainer(ctx, seed);
        let p = tr.params.clone();
        let exps = two_of_each(&tr);
        for pair in [&exps[0..2], &exps[2..4]] {
            let batch: Vec<&Experience> = pair.iter().collect();
            let targets = [0.3, -0.2];
            let r = finite_diff_check_subset(&p.store, &p.q_group(), 1e-5, |s, tape| {
                q_loss(tape, &with_store(&p, s), &batch, &targets)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "q loss {r:?}");

            let term = termination_inputs(&p, &batch).unwrap();
            if !term.is_empty() {
                let r = finite_diff_check_subset(&p.store, &p.termination_group(), 1e-5, |s, tape| {
                    termination_loss(tape, &with_store(&p, s), &term)
                })
                .unwrap();
                assert!(r.max_rel_error <= 1e-4, "termination loss {r:?}");
            }

            let fb = feedback_inputs(&p, &batch).unwrap();
            let r = finite_diff_check_subset(&p.store, &p.feedback_group(), 1e-5, |s, tape| {
                feedback_loss(tape, &with_store(&p, s), &fb)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "feedback loss {r:?}");
        }
    }
}

#[test]
fn training_is_deterministic_and_zero_episodes_is_identity() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let split = InteractionSplit::new(&c, 0.0, 0.2, 1).unwrap();
    let tc = small_cfg(cfg, 21);
    let a = train(ctx, &split.train, &tc, Variant::Full).unwrap();
    let b = train(ctx, &split.train, &tc, Variant::Full).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.len(), tc.episodes);
    assert!(a.history.iter().all(|r| r.q_loss.is_some_and(f64::is_finite)));

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_history_csv(&pa, &a.history).unwrap();
    write_history_csv(&pb, &b.history).unwrap();
    let text = std::fs::read_to_string(&pa).unwrap();
    assert_eq!(text, std::fs::read_to_string(&pb).unwrap());
    assert!(text.starts_with("episode,q_loss,term_loss,fb_loss,rolling_SR,epsilon\n"));

    let zero = TrainConfig { episodes: 0, ..tc };
    let z = train(ctx, &split.train, &zero, Variant::Full).unwrap();
    assert_eq!(z.params, AgentParams::new(&tbl, zero.seed).unwrap());
    assert!(z.history.is_empty());
    assert!(train(ctx, &[], &tc, Variant::Full).is_err());
}

#[test]
fn variants_shape_the_turns() {
    let c = catalog();
    let tbl = table(&c, 8, 1);
    let cfg = AgentConfig::default();
    let ctx = AgentContext { catalog: &c, scores: &tbl, cfg: &cfg };
    let p = AgentParams::new(&tbl, 8).unwrap();
    let rewards = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states: Vec<_> = (0..c.num_items())
        .map(|v| reset_session(&c, 0, v, v as u64).unwrap())
        .filter(|s| candidate_actions(s, OptionKind::Ask, &c).len() >= 3)
        .collect();
    assert!(!states.is_empty());

    let mut asks = 0usize;
    let n = 6000;
    for i in 0..n {
        let s = &states[i % states.len()];
        let first = p.evaluate(&ctx, s).unwrap();
        let g = agent_turn(&p, &ctx, s, first, ChainMode::Eval, Variant::NoLongPolicy, 0.0, &rewards, &mut rng).unwrap();
        asks += usize::from(g.chain.option == OptionKind::Ask);
    }
    let e = n as f64 / 2.0;
    let stat = 2.0 * (asks as f64 - e).powi(2) / e;
    assert!(1.0 - ChiSquared::new(1.0).unwrap().cdf(stat) > 0.01, "asks {asks}");

    for s in &states {
        let first = p.evaluate(&ctx, s).unwrap();
        if first.greedy_option() != Some(OptionKind::Ask) {
            continue;
        }
        for variant in [Variant::NoTermination, Variant::NoIntraAsk] {
            let g = agent_turn(&p, &ctx, s, first.clone(), ChainMode::Eval, variant, 0.0, &rewards, &mut rng).unwrap();
            let ran_dry = g.evals.last().unwrap().actions(OptionKind::Ask).is_empty();
            assert!(g.chain.len() == cfg.k_p || (variant == Variant::NoTermination && ran_dry), "{variant:?}");
        }
    }
    assert_eq!("no_intra_rec".parse::<Variant>().unwrap(), Variant::NoIntraRec);
    assert!("no_such".parse::<Variant>().is_err());
}
