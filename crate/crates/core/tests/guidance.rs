//! Exact reductions of the guided noise predictions and the cost of each
//! guidance mode.

mod common;

use clusterlab::diffusion::{cfg_combine, cfg_predict, sample_chains, Predictor};
use clusterlab::infer::*;
use clusterlab::numcore::Mat;
use clusterlab::par::ExecMode;
use clusterlab::rng;
use clusterlab::semantics::{make_vocab_dim, Prompt, PromptEmbedding};
use clusterlab::world::make_default_world;
use clusterlab::Error;
use common::tiny_denoiser;
use rand::Rng;

const EMBED: usize = 12;

fn setup(seed: u64) -> (clusterlab::diffusion::Denoiser, PromptEmbedding, TargetContext, Mat) {
    let den = tiny_denoiser(2, EMBED, vec![16, 16], seed);
    let world = make_default_world(seed);
    let vocab = make_vocab_dim(&world, &[], seed, EMBED).unwrap();
    let c_sub = vocab.embed_prompt(&Prompt::subject(&["subject_a"], "beach")).unwrap();
    let mut r = rng::from_seed(seed + 100);
    let ctx = TargetContext { delta_tar: vec![rng::normal_vec(&mut r, EMBED)], delta_aver: vec![rng::normal_vec(&mut r, EMBED)] };
    let z = Mat::from_rows(&(0..7).map(|_| vec![r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0)]).collect::<Vec<_>>());
    (den, c_sub, ctx, z)
}

fn gcfg(eta1: f64, eta2: f64) -> GuidanceConfig {
    GuidanceConfig { eta1, eta2, ..GuidanceConfig::default() }
}

#[test]
fn cfg_endpoints_are_the_two_predictions() {
    for seed in 0..5 {
        let (den, c_sub, _, z) = setup(seed);
        let c = c_sub.pooled();
        let empty = vec![0.0; EMBED];
        for t in [1, 37, 100] {
            assert_eq!(cfg_predict(&den, &z, t, &c, &empty, 0.0).unwrap(), den.predict(&z, t, &empty).unwrap());
            assert_eq!(cfg_predict(&den, &z, t, &c, &empty, 1.0).unwrap(), den.predict(&z, t, &c).unwrap());
        }
    }
}

#[test]
fn cluster_guidance_reductions_are_exact() {
    for seed in 0..5 {
        let (den, c_sub, ctx, z) = setup(seed);
        let conds = GuidedConditions::new(&ctx, &c_sub, 0.8).unwrap();
        for t in [3, 50, 100] {
            let e0 = den.predict(&z, t, &conds.empty).unwrap();
            let et = den.predict(&z, t, &conds.tar).unwrap();
            let run = |g: &GuidanceConfig| cluster_guided_predict(&den, &conds, &z, t, g, 5, None).unwrap();

            // eta2 = 0 is plain guidance on the tuned prompt.
            assert_eq!(run(&gcfg(8.5, 0.0)), cfg_combine(&e0, &et, 8.5));
            // eta1 = eta2 = 0 is the unconditional prediction.
            assert_eq!(run(&gcfg(0.0, 0.0)), e0);
        }
    }
}

#[test]
fn zero_interpolation_is_plain_guidance_on_the_raw_prompt() {
    for seed in 0..5 {
        let (den, c_sub, ctx, z) = setup(seed);
        let conds = GuidedConditions::new(&ctx, &c_sub, 0.0).unwrap();
        assert_eq!(conds.tar, conds.raw);
        assert_eq!(conds.aver, conds.raw);
        for &(e1, e2) in &[(8.5, 1.0), (4.0, 3.0), (2.0, 0.0)] {
            let g = gcfg(e1, e2);
            let got = cluster_guided_predict(&den, &conds, &z, 40, &g, 2, None).unwrap();
            let plain = cfg_predict(&den, &z, 40, &c_sub.pooled(), &conds.empty, e1 - e2).unwrap();
            assert_eq!(got, plain);
        }
    }
}

#[test]
fn in_window_prediction_matches_the_guidance_sum() {
    for seed in 0..5 {
        let (den, c_sub, ctx, z) = setup(seed);
        let conds = GuidedConditions::new(&ctx, &c_sub, 0.8).unwrap();
        let t = 60;
        let e0 = den.predict(&z, t, &conds.empty).unwrap();
        let et = den.predict(&z, t, &conds.tar).unwrap();
        let ea = den.predict(&z, t, &conds.aver).unwrap();
        for &(e1, e2) in &[(8.5, 1.0), (1.0, 2.0), (3.0, 0.5)] {
            let got = cluster_guided_predict(&den, &conds, &z, t, &gcfg(e1, e2), 1, None).unwrap();
            for i in 0..got.data.len() {
                let expect = e0.data[i] + e1 * (et.data[i] - e0.data[i]) - e2 * (ea.data[i] - e0.data[i]);
                assert!((got.data[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{} vs {expect}", got.data[i]);
            }
        }
    }
}

#[test]
fn outside_the_window_the_fallback_applies() {
    let (den, c_sub, ctx, z) = setup(3);
    let conds = GuidedConditions::new(&ctx, &c_sub, 0.8).unwrap();
    let t = 10;
    let e0 = den.predict(&z, t, &conds.empty).unwrap();
    let mut g = gcfg(8.5, 1.0);
    let tuned = cluster_guided_predict(&den, &conds, &z, t, &g, 25, None).unwrap();
    assert_eq!(tuned, cfg_combine(&e0, &den.predict(&z, t, &conds.tar).unwrap(), 7.5));
    g.fallback_prompt = FallbackPrompt::Raw;
    let raw = cluster_guided_predict(&den, &conds, &z, t, &g, 25, None).unwrap();
    assert_eq!(raw, cfg_combine(&e0, &den.predict(&z, t, &conds.raw).unwrap(), 7.5));
    // Step 20 is the last guided step of the default window.
    let inside = cluster_guided_predict(&den, &conds, &z, t, &gcfg(8.5, 1.0), 20, None).unwrap();
    assert_ne!(inside, tuned);
}

#[test]
fn window_contract() {
    let g = GuidanceConfig::default();
    assert!(g.validate().is_ok());
    assert!((1..=20).all(|s| g.in_window(s)));
    assert!((21..=30).all(|s| !g.in_window(s)));
    let empty = GuidanceConfig { window: (0, 0), ..g.clone() };
    assert!(empty.validate().is_ok());
    assert!((1..=30).all(|s| !empty.in_window(s)));
    for w in [(0, 5), (5, 3), (1, 31)] {
        let bad = GuidanceConfig { window: w, ..g.clone() };
        assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))), "{w:?}");
    }
    let neg = GuidanceConfig { eta2: -1.0, ..g.clone() };
    assert!(neg.validate().is_err());
    let (den, c_sub, ctx, z) = setup(0);
    let conds = GuidedConditions::new(&ctx, &c_sub, 0.8).unwrap();
    assert!(cluster_guided_predict(&den, &conds, &z, 10, &g, 0, None).is_err());
    assert!(cluster_guided_predict(&den, &conds, &z, 10, &g, 31, None).is_err());
}

fn calls(eta2: f64, aver_as_empty: bool) -> Vec<u64> {
    let (den, c_sub, ctx, _) = setup(1);
    let g = GuidanceConfig { eta2, aver_as_empty, ..GuidanceConfig::default() };
    let pred = ClusterGuidedPredictor::new(&den, GuidedConditions::new(&ctx, &c_sub, g.v).unwrap(), g.clone());
    // 50 chains fit in one block, so counts are per step.
    sample_chains(&pred, &den.schedule, g.steps, 2, 50, 0, ExecMode::Sequential, false).unwrap();
    pred.counter.per_step()
}

#[test]
fn fast_path_uses_two_evaluations_per_guided_step() {
    let fast = calls(0.0, false);
    let full = calls(1.0, false);
    for step in 1..=30 {
        let guided = step <= 20;
        assert_eq!(fast[step], 2, "step {step}");
        assert_eq!(full[step], if guided { 3 } else { 2 }, "step {step}");
    }
    // Reusing the average prediction as the unconditional one also costs two.
    assert!(calls(1.0, true)[1..=20].iter().all(|&c| c == 2));
}

#[test]
fn guided_predictor_is_deterministic_across_modes() {
    let (den, c_sub, ctx, _) = setup(2);
    let g = GuidanceConfig::default();
    let run = |mode| {
        let pred = ClusterGuidedPredictor::new(&den, GuidedConditions::new(&ctx, &c_sub, g.v).unwrap(), g.clone());
        sample_chains(&pred, &den.schedule, g.steps, 2, 150, 9, mode, false).unwrap().z0
    };
    assert_eq!(run(ExecMode::Sequential), run(ExecMode::Parallel));
    let pred = ClusterGuidedPredictor::new(&den, GuidedConditions::new(&ctx, &c_sub, g.v).unwrap(), g.clone());
    assert_eq!(pred.predict(&Mat::zeros(3, 2), 50, 4).unwrap().rows, 3);
}

#[test]
fn slot_restrictions_zero_the_other_offsets() {
    let mut r = rng::from_seed(0);
    let ctx = TargetContext {
        delta_tar: (0..3).map(|_| rng::normal_vec(&mut r, 4)).collect(),
        delta_aver: (0..3).map(|_| rng::normal_vec(&mut r, 4)).collect(),
    };
    let w = ctx.without_slot(1);
    assert_eq!(w.delta_tar[0], ctx.delta_tar[0]);
    assert!(w.delta_tar[1].iter().chain(&w.delta_aver[1]).all(|&x| x == 0.0));
    let o = ctx.only_slot(2);
    assert_eq!(o.delta_aver[2], ctx.delta_aver[2]);
    assert!(o.delta_tar[0].iter().chain(&o.delta_tar[1]).all(|&x| x == 0.0));
}
