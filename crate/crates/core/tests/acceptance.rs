//! Acceptance gate: one test per shipping criterion. Every test prints a
//! single `[PASS]`/`[FAIL]` line with the measured numbers so a plain
//! `cargo test --test acceptance -- --nocapture` doubles as the release
//! checklist. All tolerances are pinned here, not in the library.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmrf::agents::{act_joint, collaborate, critic_value, AgentBundle, AgentConfig, CollabMode};
use mmrf::cli::{cmd_inspect, cmd_train, InspectArgs, TrainArgs};
use mmrf::config::Config;
use mmrf::env::{
    EnvConfig, Environment, FeedbackVector, RequestRecord, CLICK, N_ASPECTS, WATCH_TIME,
};
use mmrf::evalkit::{
    evaluate_online, gauc, ncis, simulate_log, train_bc, BundlePolicy, EvalError, LoggedDataset,
    RandomPolicy, RankingPolicy,
};
use mmrf::nn::{
    dropout, gru_step, load_checkpoint, save_checkpoint, AdamState, GradMap, GruVars, ModelGraph,
    Tensor, Var,
};
use mmrf::rng::RngStream;
use mmrf::training::{
    actor_gradients, polyak_update, sample_nonimpression, td_error, train, update_actors,
    update_critic, NonImpressionMode, Transition,
};
use mmrf::worldmodel::{
    compose_slate, mean_embedding, normalized_targets, uncertainty_multiplier, WmConfig,
    WmSequence, WmStep, WorldModel,
};

/// Runs one criterion body and prints its verdict line. A failed criterion
/// both prints `[FAIL]` and panics so the harness counts it.
fn criterion(n: usize, what: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("[PASS] criterion {n}: {what} — {detail}"),
        Err(e) => {
            println!("[FAIL] criterion {n}: {what} — {e}");
            panic!("criterion {n} failed: {e}");
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn small_agent_config() -> AgentConfig {
    AgentConfig {
        n_agents: 3,
        state_dim: 5,
        action_dim: 3,
        encoder_hidden: 6,
        embed_dim: 4,
        attn_dim: 4,
        attn_heads: 2,
        scaled_attention: false,
        actor_hidden: 6,
        critic_state_dim: 4,
        critic_hidden: 6,
        action_bound: 1.0,
        critic_output_scale: 3.0,
    }
}

fn uniform_vec(rng: &mut RngStream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

// ── 1. gradient fidelity ───────────────────────────────────────────────────

/// Central finite difference of `loss` w.r.t. one element of a leaf, on the
/// graph's pure-f64 replay path.
fn fd_at(g: &mmrf::nn::Graph, loss: Var, leaf: Var, idx: usize, eps: f64) -> f64 {
    let base: Vec<f64> = g.value(leaf).iter().map(|&x| x as f64).collect();
    let mut hi = base.clone();
    hi[idx] += eps;
    let mut lo = base;
    lo[idx] -= eps;
    let fhi = g.eval_scalar_f64(loss, &[(leaf, hi)]);
    let flo = g.eval_scalar_f64(loss, &[(leaf, lo)]);
    (fhi - flo) / (2.0 * eps)
}

/// Compares every parameter gradient of `loss` against finite differences.
/// Returns (max relative error, elements checked).
fn fd_check_all(mg: &mut ModelGraph, loss: Var) -> Result<(f64, usize), String> {
    let grads = mg.graph.backward(loss).map_err(|e| e.to_string())?;
    ensure!(!grads.is_empty(), "loss reached no parameters");
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (name, grad) in &grads {
        let leaf = mg.param(name).map_err(|e| e.to_string())?;
        for idx in 0..grad.data().len() {
            let analytic = grad.data()[idx] as f64;
            let numeric = fd_at(&mg.graph, loss, leaf, idx, 1e-4);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-2);
            ensure!(
                rel < 1e-4,
                "gradient of `{name}`[{idx}] off by rel {rel:.3e} (analytic {analytic:.6e}, \
                 finite-difference {numeric:.6e})"
            );
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok((max_rel, checked))
}

#[test]
fn c01_gradient_fidelity() {
    criterion(1, "finite-difference gradient checks across all blocks", || {
        let start = Instant::now();
        let mut rng = RngStream::from_seed(17).split_str("fd");

        // Policy/critic side: encoders, attention, actors, and critics all
        // feed one scalar, so every reachable parameter gets a gradient.
        let cfg = small_agent_config();
        let bundle = AgentBundle::new(cfg.clone(), &rng.split_str("agents"))
            .map_err(|e| e.to_string())?;
        let mut mg = ModelGraph::new(&bundle.params);
        let state = uniform_vec(&mut rng, cfg.state_dim, -1.0, 1.0);
        let s = mg.graph.input_row(&state);
        let fwd = act_joint(&mut mg, &cfg, s, CollabMode::Attention).map_err(|e| e.to_string())?;
        let mut loss = mg.graph.mean(fwd.actions[cfg.main_index()]);
        for agent in 0..cfg.n_agents {
            let q = critic_value(&mut mg, &cfg, agent, s, fwd.actions[agent])
                .map_err(|e| e.to_string())?;
            loss = mg.graph.add(loss, q).map_err(|e| e.to_string())?;
        }
        let e_sum = mg.graph.sum(fwd.e[0]);
        let loss = mg.graph.add(loss, e_sum).map_err(|e| e.to_string())?;
        let (rel_attn, n_attn) = fd_check_all(&mut mg, loss)?;

        // Concat-collaboration ablation path gets its own scalar.
        let mut mgc = ModelGraph::new(&bundle.params);
        let sc = mgc.graph.input_row(&state);
        let fwdc = act_joint(&mut mgc, &cfg, sc, CollabMode::Concat).map_err(|e| e.to_string())?;
        let mut loss_c = mgc.graph.mean(fwdc.actions[0]);
        for agent in 1..cfg.n_agents {
            let a_mean = mgc.graph.mean(fwdc.actions[agent]);
            loss_c = mgc.graph.add(loss_c, a_mean).map_err(|e| e.to_string())?;
        }
        let (rel_concat, n_concat) = fd_check_all(&mut mgc, loss_c)?;

        // Feedback-model side: input projection, two chained recurrent
        // steps, both predictor stacks, the dropout-off path, and a
        // siamese squared-error loss.
        let mut wm_cfg = WmConfig::for_dims(cfg.state_dim, 4, 3);
        wm_cfg.proj_dim = 6;
        wm_cfg.hidden_dim = 6;
        wm_cfg.pred_hidden = 6;
        wm_cfg.dropout = 0.0;
        let wm =
            WorldModel::new(wm_cfg.clone(), &rng.split_str("wm")).map_err(|e| e.to_string())?;
        let mut wg = ModelGraph::new(&wm.params);
        let in_dim = wm_cfg.state_dim + wm_cfg.slate_dim;
        let x0 = uniform_vec(&mut rng, in_dim, -1.0, 1.0);
        let x1 = uniform_vec(&mut rng, in_dim, -1.0, 1.0);
        let h0 = uniform_vec(&mut rng, wm_cfg.hidden_dim, -0.5, 0.5);
        let targets = uniform_vec(&mut rng, N_ASPECTS, 0.05, 0.95);

        let gru_name = |gate: &str| format!("worldmodel.gru.{gate}");
        let mut gv = |gate: &str| wg.param(&gru_name(gate)).map_err(|e| e.to_string());
        let gru = GruVars {
            wr: gv("wr")?,
            ur: gv("ur")?,
            br: gv("br")?,
            wz: gv("wz")?,
            uz: gv("uz")?,
            bz: gv("bz")?,
            wn: gv("wn")?,
            un: gv("un")?,
            bn: gv("bn")?,
        };
        let mut drop_rng = rng.split_str("dropout");
        let mut h = wg.graph.input_row(&h0);
        for step in [&x0, &x1] {
            let x = wg.graph.input_row(step);
            let p = wg.linear_layer(x, "worldmodel.inproj").map_err(|e| e.to_string())?;
            let p = wg.graph.relu(p);
            h = gru_step(&mut wg.graph, &gru, h, p).map_err(|e| e.to_string())?;
        }
        let t = wg.graph.input_row(&targets);
        let mut loss_w: Option<Var> = None;
        for stack in ["pred_a", "pred_b"] {
            let y = wg
                .linear_layer(h, &format!("worldmodel.{stack}.l0"))
                .map_err(|e| e.to_string())?;
            let y = wg.graph.relu(y);
            let y = if stack == "pred_b" {
                dropout(&mut wg.graph, y, 0.0, true, &mut drop_rng).map_err(|e| e.to_string())?
            } else {
                y
            };
            let y = wg
                .linear_layer(y, &format!("worldmodel.{stack}.heads"))
                .map_err(|e| e.to_string())?;
            let y = wg.graph.sigmoid(y);
            let d = wg.graph.sub(y, t).map_err(|e| e.to_string())?;
            let sq = wg.graph.mul(d, d).map_err(|e| e.to_string())?;
            let m = wg.graph.mean(sq);
            loss_w = Some(match loss_w {
                None => m,
                Some(prev) => wg.graph.add(prev, m).map_err(|e| e.to_string())?,
            });
        }
        let (rel_wm, n_wm) = fd_check_all(&mut wg, loss_w.expect("two stacks"))?;

        let elapsed = start.elapsed().as_secs_f64();
        ensure!(elapsed < 120.0, "gradient suite took {elapsed:.1}s, budget is 120s");
        Ok(format!(
            "{} elements checked (attention {n_attn}, concat {n_concat}, recurrent {n_wm}), \
             max rel err {:.2e}, {elapsed:.1}s",
            n_attn + n_concat + n_wm,
            rel_attn.max(rel_concat).max(rel_wm),
        ))
    });
}

// ── 2. attention oracle ────────────────────────────────────────────────────

/// f64 matrix-vector product for a row-major `[rows, cols]` weight.
fn matvec64(weight: &Tensor, x: &[f32]) -> Vec<f64> {
    let rows = weight.shape()[0];
    let cols = weight.shape()[1];
    assert_eq!(cols, x.len());
    let w = weight.data();
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] as f64 * x[c] as f64).sum())
        .collect()
}

#[test]
fn c02_attention_matches_brute_force_oracle() {
    criterion(2, "peer attention matches a scalar brute-force oracle", || {
        let mut rng = RngStream::from_seed(23).split_str("attn-oracle");
        let mut cfg = small_agent_config();
        cfg.attn_heads = 1; // single head keeps the hand formula flat
        let bundle =
            AgentBundle::new(cfg.clone(), &rng.split_str("bundle")).map_err(|e| e.to_string())?;
        let hs: Vec<Vec<f32>> =
            (0..cfg.n_agents).map(|_| uniform_vec(&mut rng, cfg.embed_dim, -1.0, 1.0)).collect();

        let mut mg = ModelGraph::new(&bundle.params);
        let h_vars: Vec<Var> = hs.iter().map(|h| mg.graph.input_row(h)).collect();
        let collab = collaborate(&mut mg, &cfg, &h_vars, CollabMode::Attention)
            .map_err(|e| e.to_string())?;

        let wq = bundle.params.get("shared_attn.wq").map_err(|e| e.to_string())?;
        let wk = bundle.params.get("shared_attn.wk").map_err(|e| e.to_string())?;
        let wv = bundle.params.get("shared_attn.wv").map_err(|e| e.to_string())?;
        let mut max_diff = 0.0f64;
        for i in 0..cfg.n_agents {
            let q = matvec64(wq, &hs[i]);
            let peers: Vec<usize> = (0..cfg.n_agents).filter(|&j| j != i).collect();
            let logits: Vec<f64> = peers
                .iter()
                .map(|&j| {
                    let k = matvec64(wk, &hs[j]);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let z: f64 = logits.iter().map(|&l| l.exp()).sum();
            let weights: Vec<f64> = logits.iter().map(|&l| l.exp() / z).collect();
            let mut expect = vec![0.0f64; cfg.attn_dim];
            for (slot, &j) in peers.iter().enumerate() {
                let v = matvec64(wv, &hs[j]);
                for (d, e) in expect.iter_mut().enumerate() {
                    *e += weights[slot] * v[d].max(0.0);
                }
            }
            let got = mg.graph.value(collab.e[i]);
            for (d, (&g, &e)) in got.iter().zip(&expect).enumerate() {
                let diff = (g as f64 - e).abs();
                ensure!(
                    diff < 1e-5,
                    "agent {i} context[{d}]: graph {g:.8} vs oracle {e:.8} (diff {diff:.2e})"
                );
                max_diff = max_diff.max(diff);
            }
        }

        // Two agents: one peer, so its attention weight is exactly 1.
        let mut cfg2 = cfg.clone();
        cfg2.n_agents = 2;
        let bundle2 =
            AgentBundle::new(cfg2.clone(), &rng.split_str("pair")).map_err(|e| e.to_string())?;
        let mut mg2 = ModelGraph::new(&bundle2.params);
        let h2: Vec<Var> = hs[..2].iter().map(|h| mg2.graph.input_row(h)).collect();
        let collab2 =
            collaborate(&mut mg2, &cfg2, &h2, CollabMode::Attention).map_err(|e| e.to_string())?;
        for i in 0..2 {
            let w = mg2.graph.value(collab2.alpha[i][0]);
            ensure!(w == [1.0], "two-agent weight for agent {i} is {w:?}, expected exactly [1.0]");
        }

        // Identical peers ⇒ identical keys ⇒ uniform weights.
        let mut mg3 = ModelGraph::new(&bundle.params);
        let twin = hs[1].clone();
        let h3 = [
            mg3.graph.input_row(&hs[0]),
            mg3.graph.input_row(&twin),
            mg3.graph.input_row(&twin),
        ];
        let collab3 =
            collaborate(&mut mg3, &cfg, &h3, CollabMode::Attention).map_err(|e| e.to_string())?;
        let w = mg3.graph.value(collab3.alpha[0][0]);
        for (slot, &x) in w.iter().enumerate() {
            ensure!(
                (x - 0.5).abs() < 1e-6,
                "symmetric-peer weight[{slot}] is {x}, expected 0.5 ± 1e-6"
            );
        }

        Ok(format!(
            "3-agent contexts within {max_diff:.2e} of the oracle, single-peer weight exact, \
             symmetric peers uniform"
        ))
    });
}

// ── 3. actor-step structure ────────────────────────────────────────────────

fn grad_norm(grads: &GradMap, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn c03_actor_update_structure_with_zero_aux_rate() {
    criterion(3, "zero auxiliary rate moves actors but never critics", || {
        let mut rng = RngStream::from_seed(31).split_str("structure");
        let cfg = small_agent_config();
        let mut bundle =
            AgentBundle::new(cfg.clone(), &rng.split_str("bundle")).map_err(|e| e.to_string())?;
        let states: Vec<Vec<f32>> =
            (0..3).map(|_| uniform_vec(&mut rng, cfg.state_dim, -1.0, 1.0)).collect();
        let refs: Vec<&[f32]> = states.iter().map(|s| s.as_slice()).collect();

        let (grads, _) = actor_gradients(&bundle, &refs, 1e-3, 0.0, CollabMode::Attention)
            .map_err(|e| e.to_string())?;
        let main = cfg.main_index();
        for agent in 0..cfg.n_agents {
            let critic = grad_norm(&grads, &format!("agent.{agent}.critic."));
            if agent == main {
                ensure!(critic > 0.0, "main critic should appear in the raw objective gradient");
            } else {
                ensure!(
                    critic == 0.0,
                    "auxiliary agent {agent} critic received gradient norm {critic:e} with a \
                     zero auxiliary rate"
                );
            }
            let actor = grad_norm(&grads, &format!("agent.{agent}.actor."));
            ensure!(
                actor > 0.0,
                "agent {agent} actor gradient vanished; the shared branch must reach every policy"
            );
        }

        let before = bundle.params.clone();
        let mut opt = AdamState::new();
        let norms = update_actors(&mut bundle, &refs, 1e-3, 0.0, &mut opt, CollabMode::Attention)
            .map_err(|e| e.to_string())?;
        ensure!(norms.iter().all(|&n| n > 0.0), "per-agent policy norms {norms:?} must be > 0");
        for (name, tensor) in bundle.params.iter() {
            let old = before.get(name).map_err(|e| e.to_string())?;
            let changed = tensor.data() != old.data();
            if name.contains(".critic.") {
                ensure!(!changed, "critic parameter `{name}` moved during an actor step");
            }
            if name.contains(".actor.") {
                ensure!(changed, "actor parameter `{name}` did not move during an actor step");
            }
        }

        // A terminal transition's error must be exactly reward − Q.
        let state = uniform_vec(&mut rng, cfg.state_dim, -1.0, 1.0);
        let action = uniform_vec(&mut rng, cfg.action_dim, -1.0, 1.0);
        let t = Transition {
            state: state.clone(),
            action: action.clone(),
            reward: 2.25,
            next_state: uniform_vec(&mut rng, cfg.state_dim, -1.0, 1.0),
            done: true,
            impression: true,
            agent: main,
        };
        let delta =
            td_error(&bundle, main, &t, 0.95, CollabMode::Attention).map_err(|e| e.to_string())?;
        let q = bundle.q_value(main, &state, &action).map_err(|e| e.to_string())? as f64;
        ensure!(delta == 2.25 - q, "terminal error {delta} differs from reward − Q = {}", 2.25 - q);

        Ok(format!(
            "aux critic gradients exactly zero, all {} policies moved, terminal error exact",
            cfg.n_agents
        ))
    });
}

// ── 4. critic convergence on a two-state chain ─────────────────────────────

#[test]
fn c04_critic_converges_on_two_state_chain() {
    criterion(4, "critic reaches the closed-form value of a 2-state chain", || {
        let start = Instant::now();
        let mut cfg = small_agent_config();
        cfg.n_agents = 2;
        cfg.state_dim = 2;
        cfg.critic_output_scale = 10.0;
        let mut bundle = AgentBundle::new(cfg.clone(), &RngStream::from_seed(41).split_str("mdp"))
            .map_err(|e| e.to_string())?;
        let main = cfg.main_index();
        let gamma = 0.9;

        // Deterministic alternating chain: s0 pays 1 and moves to s1, s1
        // pays 0 and moves back. Actions are the frozen policy's own
        // choices, so the fitted values are that policy's discounted
        // returns: v0 = 1/(1 − γ²), v1 = γ·v0.
        let s0 = vec![1.0f32, 0.0];
        let s1 = vec![0.0f32, 1.0];
        let a0 = bundle.act(&s0, CollabMode::Attention).map_err(|e| e.to_string())?[main].clone();
        let a1 = bundle.act(&s1, CollabMode::Attention).map_err(|e| e.to_string())?[main].clone();
        let t0 = Transition {
            state: s0.clone(),
            action: a0.clone(),
            reward: 1.0,
            next_state: s1.clone(),
            done: false,
            impression: true,
            agent: main,
        };
        let t1 = Transition {
            state: s1.clone(),
            action: a1.clone(),
            reward: 0.0,
            next_state: s0.clone(),
            done: false,
            impression: true,
            agent: main,
        };
        let v0 = 1.0 / (1.0 - gamma * gamma);
        let v1 = gamma * v0;

        let mut opt = AdamState::new();
        let mut used = 0usize;
        let mut err = f64::INFINITY;
        for step in 1..=10_000usize {
            update_critic(
                &mut bundle,
                main,
                &[&t0, &t1],
                gamma,
                5e-3,
                &mut opt,
                CollabMode::Attention,
            )
            .map_err(|e| e.to_string())?;
            polyak_update(&mut bundle, 0.05).map_err(|e| e.to_string())?;
            used = step;
            if step % 50 == 0 {
                let q0 = bundle.q_value(main, &s0, &a0).map_err(|e| e.to_string())? as f64;
                let q1 = bundle.q_value(main, &s1, &a1).map_err(|e| e.to_string())? as f64;
                err = (q0 - v0).abs().max((q1 - v1).abs());
                if err < 0.03 {
                    break;
                }
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        ensure!(
            err < 0.05,
            "after {used} updates the worst value error is {err:.4}, expected < 0.05 \
             (targets {v0:.4}/{v1:.4})"
        );
        ensure!(elapsed < 60.0, "convergence took {elapsed:.1}s, budget is 60s");
        Ok(format!(
            "|Q − closed form| = {err:.4} after {used} updates ({elapsed:.1}s; targets \
             {v0:.3}/{v1:.3})"
        ))
    });
}

// ── 5. disagreement multiplier ─────────────────────────────────────────────

#[test]
fn c05_uncertainty_multiplier_identities() {
    criterion(5, "disagreement multiplier identity, oracle value, monotonicity", || {
        for (r, lambda) in [(0.1, 0.5), (0.5, 1.0), (0.93, 2.5)] {
            let m = uncertainty_multiplier(r, r, lambda);
            ensure!(
                (m - 1.0).abs() < 1e-12,
                "agreement at r={r} λ={lambda} gave multiplier {m}, expected 1"
            );
        }

        // Hand-computed Bernoulli divergence for (0.8, 0.6), λ = 1.
        let kl = 0.8 * (0.8f64.ln() - 0.6f64.ln()) + 0.2 * (0.2f64.ln() - 0.4f64.ln());
        let oracle = kl.exp();
        let got = uncertainty_multiplier(0.8, 0.6, 1.0);
        ensure!(
            (got - oracle).abs() < 1e-6,
            "multiplier(0.8, 0.6, 1.0) = {got:.9}, oracle {oracle:.9}"
        );

        let mut prev = uncertainty_multiplier(0.8, 0.6, 0.0);
        ensure!(prev == 1.0, "λ=0 must disable the bonus, got {prev}");
        for i in 1..=8 {
            let lambda = i as f64 * 0.25;
            let m = uncertainty_multiplier(0.8, 0.6, lambda);
            ensure!(m > prev, "multiplier not strictly increasing at λ={lambda}: {m} ≤ {prev}");
            prev = m;
        }
        Ok(format!(
            "agreement exact, oracle match {got:.6} (diff {:.1e}), strictly rising in λ",
            (got - oracle).abs()
        ))
    });
}

// ── 6. retained candidate-slate rate ───────────────────────────────────────

#[test]
fn c06_nonimpression_retention_rate() {
    criterion(6, "candidate slates are retained at the configured rate", || {
        let config = EnvConfig {
            n_items: 200,
            pool_size: 30,
            slate_size: 4,
            horizon: 5,
            embed_dim: 8,
            ..EnvConfig::default()
        };
        let env = Environment::new(config, 7).map_err(|e| e.to_string())?;
        let mut rng = RngStream::from_seed(7).split_str("rate");
        let (mut session, _) = env.begin_session(&mut rng);
        env.candidate_pool(&mut session, &mut rng).map_err(|e| e.to_string())?;
        let pool = session.pool().expect("pool drawn").clone();

        let mut sample_rng = RngStream::from_seed(7).split_str("retain");
        let kept = sample_nonimpression(&pool, 4, 8, 1.0, 10_000, 0.25, &mut sample_rng)
            .map_err(|e| e.to_string())?;
        let fraction = kept.len() as f64 / 10_000.0;
        ensure!(
            (0.23..=0.27).contains(&fraction),
            "retained fraction {fraction:.4} outside [0.23, 0.27]"
        );
        for (action, slate) in &kept {
            ensure!(action.len() == 8, "candidate action has width {}", action.len());
            let mut sorted = slate.clone();
            sorted.sort_unstable();
            sorted.dedup();
            ensure!(
                slate.len() == 4 && sorted.len() == 4,
                "candidate slate {slate:?} is not 4 distinct pool indices"
            );
        }
        Ok(format!("{} of 10000 slates kept ({fraction:.4})", kept.len()))
    });
}

// ── 7. importance-sampling identity ────────────────────────────────────────

/// Scores every pool item by its catalog id; `scale` flips the ordering.
struct ScoreById {
    scale: f32,
}

impl RankingPolicy for ScoreById {
    fn name(&self) -> &str {
        "by-id"
    }

    fn score(
        &self,
        _session: u64,
        _round: u32,
        _state: &[f32],
        pool_ids: &[u32],
        _pool_features: &[f32],
    ) -> Result<Vec<f32>, EvalError> {
        Ok(pool_ids.iter().map(|&id| self.scale * id as f32 / 1000.0).collect())
    }
}

fn blank_feedback() -> FeedbackVector {
    FeedbackVector {
        click: 0,
        like: 0,
        follow: 0,
        comment: 0,
        hate: 0,
        long_view: 0,
        watch_ratio: 0.0,
        watch_time: 0.0,
    }
}

#[test]
fn c07_importance_sampling_identity() {
    criterion(7, "importance sampling reproduces the on-policy mean", || {
        let config = EnvConfig {
            n_items: 300,
            pool_size: 30,
            slate_size: 3,
            horizon: 8,
            embed_dim: 8,
            ..EnvConfig::default()
        };
        let env = Environment::new(config, 5).map_err(|e| e.to_string())?;
        let policy = RandomPolicy::new(5);
        let records =
            simulate_log(&env, &policy, 60, &RngStream::from_seed(5).split_str("simulate"))
                .map_err(|e| e.to_string())?;
        let dataset = LoggedDataset::from_records(records).map_err(|e| e.to_string())?;
        let detail =
            ncis(&dataset, &policy, env.catalog(), 10.0, 1.0).map_err(|e| e.to_string())?;
        ensure!(
            (detail.min_weight - 1.0).abs() < 1e-12 && (detail.max_weight - 1.0).abs() < 1e-12,
            "behavior == target must give unit weights, got [{}, {}]",
            detail.min_weight,
            detail.max_weight
        );
        let n = dataset.sessions.len() as f64;
        let mut worst = 0.0f64;
        for aspect in 0..N_ASPECTS {
            let mean: f64 = dataset.sessions.iter().map(|s| s.returns()[aspect]).sum::<f64>() / n;
            let diff = (detail.values[aspect] - mean).abs();
            ensure!(
                diff <= 1e-9,
                "aspect {aspect}: estimate {} vs empirical mean {mean} (diff {diff:e})",
                detail.values[aspect]
            );
            worst = worst.max(diff);
        }

        // Two-session hand computation: one round each, two-item pools, so
        // the sequential selection probability is a plain two-way softmax
        // over the target scores at temperature τ.
        let state = vec![0.0f32; 4];
        let mk = |session: u64, shown: u32, beh_p: f64, watch: f32, click: u8| RequestRecord {
            session,
            round: 0,
            state: state.clone(),
            pool: vec![10, 20],
            scores: vec![0.0, 0.0],
            shown: vec![shown],
            propensities: vec![beh_p],
            feedback: vec![FeedbackVector {
                click,
                watch_ratio: 0.5,
                watch_time: watch,
                ..blank_feedback()
            }],
            done: true,
        };
        let hand =
            LoggedDataset::from_records(vec![mk(1, 10, 0.6, 8.0, 1), mk(2, 20, 0.45, 3.0, 0)])
                .map_err(|e| e.to_string())?;
        let target = ScoreById { scale: 1.0 };
        let cap = 5.0;
        let tau = 0.7;
        let s10 = (10.0f32 / 1000.0) as f64 / tau;
        let s20 = (20.0f32 / 1000.0) as f64 / tau;
        let z = s10.exp() + s20.exp();
        let w1 = (s10.exp() / z / 0.6).min(cap);
        let w2 = (s20.exp() / z / 0.45).min(cap);
        let expect_watch = (w1 * 8.0 + w2 * 3.0) / (w1 + w2);
        let expect_click = w1 / (w1 + w2);
        let got = ncis(&hand, &target, env.catalog(), cap, tau).map_err(|e| e.to_string())?;
        ensure!(
            (got.values[WATCH_TIME] - expect_watch).abs() < 1e-12,
            "hand case watch estimate {} vs {expect_watch}",
            got.values[WATCH_TIME]
        );
        ensure!(
            (got.values[CLICK] - expect_click).abs() < 1e-12,
            "hand case click estimate {} vs {expect_click}",
            got.values[CLICK]
        );

        Ok(format!(
            "identity within {worst:.1e} over {} sessions, two-session hand case matches",
            dataset.sessions.len()
        ))
    });
}

// ── 8. grouped concordance bounds ──────────────────────────────────────────

/// Deterministic pseudo-random scores keyed by (session, round, slot).
struct NoisyScorer {
    seed: u64,
}

impl RankingPolicy for NoisyScorer {
    fn name(&self) -> &str {
        "noise"
    }

    fn score(
        &self,
        session: u64,
        round: u32,
        _state: &[f32],
        pool_ids: &[u32],
        _pool_features: &[f32],
    ) -> Result<Vec<f32>, EvalError> {
        let mut rng = RngStream::from_seed(self.seed).split(session).split(round as u64);
        Ok(pool_ids.iter().map(|_| rng.uniform(0.0, 1.0)).collect())
    }
}

#[test]
fn c08_grouped_concordance_bounds() {
    criterion(8, "grouped concordance hits 1.0/0.0 and ~0.5 on noise", || {
        let config = EnvConfig { n_items: 1600, embed_dim: 4, ..EnvConfig::default() };
        let env = Environment::new(config, 3).map_err(|e| e.to_string())?;
        let catalog = env.catalog();
        let state = vec![0.0f32; 4];

        // Click labels correlate perfectly with item id: two low-id
        // unclicked and two high-id clicked impressions per user.
        let mk = |session: u64, ids: [u32; 4], clicks: [u8; 4]| RequestRecord {
            session,
            round: 0,
            state: state.clone(),
            pool: ids.to_vec(),
            scores: vec![0.0; 4],
            shown: ids.to_vec(),
            propensities: vec![0.5; 4],
            feedback: clicks
                .iter()
                .map(|&c| FeedbackVector {
                    click: c,
                    watch_ratio: 0.5,
                    watch_time: 5.0,
                    ..blank_feedback()
                })
                .collect(),
            done: true,
        };
        let dataset = LoggedDataset::from_records(vec![
            mk(1, [100, 110, 1200, 1210], [0, 0, 1, 1]),
            mk(2, [200, 210, 1300, 1310], [0, 0, 1, 1]),
            mk(3, [300, 310, 1400, 1410], [0, 0, 0, 0]), // constant → skipped
        ])
        .map_err(|e| e.to_string())?;

        let perfect = gauc(&dataset, &ScoreById { scale: 1.0 }, catalog)
            .map_err(|e| e.to_string())?;
        let click = &perfect[CLICK];
        ensure!(
            click.value == Some(1.0),
            "perfect ordering should give exactly 1.0, got {:?}",
            click.value
        );
        ensure!(
            click.scorable_users == 2 && click.skipped_users == 1,
            "expected 2 scorable + 1 skipped user, got {} + {}",
            click.scorable_users,
            click.skipped_users
        );
        let reversed = gauc(&dataset, &ScoreById { scale: -1.0 }, catalog)
            .map_err(|e| e.to_string())?;
        ensure!(
            reversed[CLICK].value == Some(0.0),
            "reversed ordering should give exactly 0.0, got {:?}",
            reversed[CLICK].value
        );

        // 25 users × 20 clicked × 20 unclicked impressions with id-agnostic
        // labels and uniform pseudo-random scores: 25 × 400 = 10 000 pairs,
        // so the averaged concordance sits near 1/2 with ~0.017 spread.
        let mut noise_records = Vec::new();
        for user in 0..25u32 {
            for r in 0..10u32 {
                let base = 40 * user + 4 * r;
                let mut rec =
                    mk(100 + user as u64, [base, base + 1, base + 2, base + 3], [0, 1, 0, 1]);
                rec.round = r;
                noise_records.push(rec);
            }
        }
        let noise_ds = LoggedDataset::from_records(noise_records).map_err(|e| e.to_string())?;
        let noisy = gauc(&noise_ds, &NoisyScorer { seed: 77 }, catalog)
            .map_err(|e| e.to_string())?;
        let v = noisy[CLICK].value.ok_or("noise case returned no value")?;
        ensure!(
            (0.45..=0.55).contains(&v),
            "noise concordance {v:.4} outside [0.45, 0.55] over 10000 pairs"
        );

        Ok(format!("perfect 1.0, reversed 0.0, noise {v:.4} over 10000 pairs"))
    });
}

// ── 9. feedback-model capacity and provenance ──────────────────────────────

#[test]
fn c09_feedback_model_overfits_fixed_sessions() {
    criterion(9, "feedback model memorizes 10 sessions; fake data rejected", || {
        let config = EnvConfig {
            n_items: 120,
            pool_size: 16,
            slate_size: 3,
            horizon: 6,
            embed_dim: 6,
            ..EnvConfig::default()
        };
        let env = Environment::new(config.clone(), 13).map_err(|e| e.to_string())?;
        let records = simulate_log(
            &env,
            &RandomPolicy::new(13),
            10,
            &RngStream::from_seed(13).split_str("wm-data"),
        )
        .map_err(|e| e.to_string())?;
        let dataset = LoggedDataset::from_records(records).map_err(|e| e.to_string())?;

        let mut action_rng = RngStream::from_seed(13).split_str("wm-actions");
        let catalog = env.catalog();
        let d = config.embed_dim;
        let sequences: Vec<WmSequence> = dataset
            .sessions
            .iter()
            .map(|session| WmSequence {
                steps: session
                    .records
                    .iter()
                    .map(|rec| {
                        let embeds: Vec<f32> = rec
                            .shown
                            .iter()
                            .flat_map(|&id| catalog.embedding(id).iter().copied())
                            .collect();
                        let mean_dur = rec.shown.iter().map(|&id| catalog.duration(id)).sum::<f32>()
                            / rec.shown.len() as f32;
                        let action = uniform_vec(&mut action_rng, d, -1.0, 1.0);
                        WmStep {
                            state: rec.state.clone(),
                            slate: compose_slate(
                                &mean_embedding(&embeds, d),
                                &action,
                                mean_dur,
                                config.duration_max,
                            ),
                            targets: normalized_targets(&rec.feedback),
                            impression: true,
                        }
                    })
                    .collect(),
            })
            .collect();

        let mut wm_cfg = WmConfig::for_dims(config.state_dim(), d, d);
        wm_cfg.dropout = 0.0;
        let mut wm = WorldModel::new(wm_cfg, &RngStream::from_seed(13).split_str("wm"))
            .map_err(|e| e.to_string())?;
        let mut opt = AdamState::new();
        let mut first = 0.0;
        let mut last = 0.0;
        for epoch in 0..50 {
            let loss = wm.update(&sequences, 1e-2, &mut opt).map_err(|e| e.to_string())?;
            if epoch == 0 {
                first = loss;
            }
            last = loss;
        }
        ensure!(wm.trained_epochs() == 50, "expected 50 epochs, got {}", wm.trained_epochs());

        let mut sq = [0.0f64; N_ASPECTS];
        let mut steps = 0usize;
        for seq in &sequences {
            let mut hidden = wm.initial_hidden();
            for step in &seq.steps {
                let (pred_a, pred_b, h) =
                    wm.observe(&hidden, &step.state, &step.slate).map_err(|e| e.to_string())?;
                for aspect in 0..N_ASPECTS {
                    let mean = 0.5 * (pred_a[aspect] as f64 + pred_b[aspect] as f64);
                    let d = mean - step.targets[aspect] as f64;
                    sq[aspect] += d * d;
                }
                hidden = h;
                steps += 1;
            }
        }
        let mut worst = 0.0f64;
        for (aspect, s) in sq.iter().enumerate() {
            let mse = s / steps as f64;
            ensure!(mse < 0.02, "aspect {aspect} trained MSE {mse:.4} ≥ 0.02");
            worst = worst.max(mse);
        }

        // Provenance: a single simulated step poisons the whole batch.
        let mut poisoned = sequences.clone();
        poisoned[0].steps[0].impression = false;
        let err = wm.update(&poisoned, 1e-2, &mut opt);
        match err {
            Ok(_) => return Err("simulated step was accepted as training data".into()),
            Err(e) => {
                let msg = e.to_string();
                ensure!(
                    msg.contains("never train the feedback model"),
                    "unexpected rejection message: {msg}"
                );
            }
        }

        Ok(format!(
            "loss {first:.4} → {last:.4} over 50 epochs, worst per-aspect MSE {worst:.4}, \
             simulated data rejected"
        ))
    });
}

// ── 10. end-to-end learning ────────────────────────────────────────────────

#[test]
fn c10_end_to_end_learning_beats_baselines() {
    criterion(10, "trained ranker beats random and imitation baselines", || {
        let start = Instant::now();
        let config = Config::default();
        ensure!(config.seed == 42, "default seed changed; this gate is pinned to 42");
        let env = Environment::new(config.env.clone(), config.seed).map_err(|e| e.to_string())?;
        let acfg = config.agent_config();
        let wcfg = config.wm_config();

        let outcome = train(
            &env,
            &acfg,
            &wcfg,
            &config.training,
            &RngStream::from_seed(config.seed).split_str("train"),
        )
        .map_err(|e| e.to_string())?;
        let trained = BundlePolicy::new(outcome.bundle, config.training.collab);

        let episodes = config.eval.episodes;
        let gamma = config.training.gamma;
        let eval_stream = RngStream::from_seed(config.seed).split_str("eval");
        let online_trained = evaluate_online(&env, &trained, episodes, gamma, &eval_stream)
            .map_err(|e| e.to_string())?;
        let random = RandomPolicy::new(config.seed);
        let online_random = evaluate_online(&env, &random, episodes, gamma, &eval_stream)
            .map_err(|e| e.to_string())?;

        // Imitation baseline: clone the evaluated ranker from its own
        // simulated request log, then roll the clone in the simulator.
        let sim_stream = RngStream::from_seed(config.seed).split_str("simulate");
        let records =
            simulate_log(&env, &trained, episodes, &sim_stream).map_err(|e| e.to_string())?;
        let dataset = LoggedDataset::from_records(records).map_err(|e| e.to_string())?;
        let fit = train_bc(&dataset, env.catalog(), &config.eval.bc).map_err(|e| e.to_string())?;
        let online_bc = evaluate_online(&env, &fit.policy, episodes, gamma, &eval_stream)
            .map_err(|e| e.to_string())?;

        let wt_trained = online_trained.mean_returns[WATCH_TIME];
        let wt_random = online_random.mean_returns[WATCH_TIME];
        let wt_bc = online_bc.mean_returns[WATCH_TIME];
        ensure!(wt_random > 0.0, "random baseline watch time is not positive: {wt_random}");
        let vs_random = wt_trained / wt_random;
        let vs_bc = wt_trained / wt_bc;
        ensure!(
            vs_random >= 1.2,
            "trained/random watch time {wt_trained:.1}/{wt_random:.1} = {vs_random:.3} < 1.2"
        );
        ensure!(
            vs_bc >= 1.0,
            "trained/imitation watch time {wt_trained:.1}/{wt_bc:.1} = {vs_bc:.3} < 1.0"
        );

        // The no-simulation ablation must also train cleanly (shortened
        // schedule: the gate is completion, not its score).
        let mut tc_da = config.training.clone();
        tc_da.nonimpression = NonImpressionMode::Disabled;
        tc_da.epochs = 8;
        let outcome_da = train(
            &env,
            &acfg,
            &wcfg,
            &tc_da,
            &RngStream::from_seed(config.seed).split_str("train"),
        )
        .map_err(|e| e.to_string())?;
        ensure!(!outcome_da.report.epochs.is_empty(), "ablation produced an empty report");
        ensure!(
            outcome_da.report.epochs.iter().all(|e| e.simulated_buffer == 0),
            "ablation stored simulated transitions"
        );

        let elapsed = start.elapsed().as_secs_f64();
        ensure!(elapsed < 900.0, "end-to-end gate took {elapsed:.0}s, budget is 900s");
        Ok(format!(
            "watch time {wt_trained:.1} vs random {wt_random:.1} ({vs_random:.2}×) and \
             imitation {wt_bc:.1} ({vs_bc:.3}×); ablation report {} epochs; {elapsed:.0}s",
            outcome_da.report.epochs.len()
        ))
    });
}

// ── 11. determinism ────────────────────────────────────────────────────────

fn tiny_config_text() -> &'static str {
    "seed = 11\n\
     [env]\n\
     n_items = 60\n\
     pool_size = 12\n\
     slate_size = 3\n\
     horizon = 4\n\
     embed_dim = 4\n\
     [agents]\n\
     encoder_hidden = 8\n\
     embed_dim = 6\n\
     attn_dim = 4\n\
     attn_heads = 2\n\
     actor_hidden = 8\n\
     critic_state_dim = 6\n\
     critic_hidden = 8\n\
     [training]\n\
     epochs = 2\n\
     sessions_per_epoch = 2\n\
     updates_per_epoch = 2\n\
     wm_updates_per_epoch = 1\n\
     batch_size = 8\n\
     random_actions = 2\n\
     [worldmodel]\n\
     proj_dim = 8\n\
     hidden_dim = 8\n\
     pred_hidden = 8\n\
     [eval]\n\
     episodes = 3\n"
}

fn train_tiny(dir: &Path, out_name: &str) -> Result<PathBuf, String> {
    let config_path = dir.join("tiny.toml");
    fs::write(&config_path, tiny_config_text()).map_err(|e| e.to_string())?;
    let out = dir.join(out_name);
    let args =
        TrainArgs { config: Some(config_path), seed: None, preset: None, out: out.clone() };
    cmd_train(&args).map_err(|e| e.to_string())?;
    Ok(out)
}

#[test]
fn c11_training_is_deterministic_and_thread_invariant() {
    criterion(11, "training reruns are byte-identical and thread-invariant", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out_a = train_tiny(dir.path(), "a")?;
        let out_b = train_tiny(dir.path(), "b")?;
        for file in ["report.json", "metrics.csv", "params.bin", "run.json"] {
            let a = fs::read(out_a.join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(out_b.join(file)).map_err(|e| e.to_string())?;
            ensure!(a == b, "`{file}` differs between identically seeded runs");
        }

        let config = Config::from_toml_str(tiny_config_text()).map_err(|e| e.to_string())?;
        let env = Environment::new(config.env.clone(), config.seed).map_err(|e| e.to_string())?;
        let acfg = config.agent_config();
        let wcfg = config.wm_config();
        let mut reports = Vec::new();
        for threads in [1usize, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| e.to_string())?;
            let outcome = pool
                .install(|| {
                    train(
                        &env,
                        &acfg,
                        &wcfg,
                        &config.training,
                        &RngStream::from_seed(config.seed).split_str("train"),
                    )
                })
                .map_err(|e| e.to_string())?;
            reports.push(serde_json::to_string(&outcome.report).map_err(|e| e.to_string())?);
        }
        ensure!(reports[0] == reports[1], "reports differ between 1-thread and 4-thread runs");

        Ok("rerun artifacts byte-identical; 1-thread and 4-thread reports equal".into())
    });
}

// ── 12. checkpoint round-trip ──────────────────────────────────────────────

#[test]
fn c12_checkpoint_round_trip_and_inspection() {
    criterion(12, "checkpoints round-trip byte-for-byte and list namespaces", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = train_tiny(dir.path(), "run")?;

        let (params, opt) = load_checkpoint(&out).map_err(|e| e.to_string())?;
        let resaved = dir.path().join("resaved");
        fs::create_dir_all(&resaved).map_err(|e| e.to_string())?;
        save_checkpoint(&resaved, &params, &opt).map_err(|e| e.to_string())?;
        for file in ["manifest.json", "params.bin", "optstate.bin"] {
            let a = fs::read(out.join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(resaved.join(file)).map_err(|e| e.to_string())?;
            ensure!(a == b, "`{file}` changed across a load/save round-trip");
        }

        let listing =
            cmd_inspect(&InspectArgs { checkpoint: out.clone() }).map_err(|e| e.to_string())?;
        for needle in ["namespaces:", "shared_attn.*", "worldmodel.*", "agent.0.*", "agent.6.*"] {
            ensure!(listing.contains(needle), "inspection output lacks `{needle}`");
        }

        Ok("three checkpoint files byte-identical after reload; all namespaces listed".into())
    });
}
