//! Schedule, optimizer, training, tuning and file round trips.

mod common;

use clusterlab::diffusion::*;
use clusterlab::eval::{capture_fraction, consistency, diversity};
use clusterlab::io::{read_csv, read_json, write_csv, write_json};
use clusterlab::numcore::{adamw_step, AdamWConfig, AdamWState, Mat, ParamTensor};
use clusterlab::par::ExecMode;
use clusterlab::rng;
use clusterlab::semantics::*;
use clusterlab::tune::*;
use clusterlab::world::{make_default_world, OraclePredictor};
use clusterlab::Error;
use common::tiny_denoiser;

const CONTEXTS: [&str; 5] = ["plain", "beach", "forest", "city", "snow"];

#[test]
fn schedules_start_clean_and_decrease() {
    for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
        for t_max in [2, 10, 100, 1000] {
            let s = make_schedule(kind, t_max).unwrap();
            assert_eq!(s.alpha_bar[0], 1.0);
            assert_eq!(s.alpha_bar.len(), t_max + 1);
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar[t_max] > 0.0);
        }
    }
    assert!(make_schedule(ScheduleKind::LinearBeta, 1).is_err());
}

#[test]
fn linear_schedule_matches_the_beta_product() {
    let s = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let mut prod = 1.0;
    for t in 1..=100 {
        let beta = 1e-3 + (0.2 - 1e-3) * (t - 1) as f64 / 99.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-14, "t={t}");
    }
}

#[test]
fn cosine_schedule_matches_its_closed_form() {
    let s = make_schedule(ScheduleKind::Cosine, 100).unwrap();
    let f = |t: f64| ((t / 100.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    // Betas are clipped at 0.999, which only bites at the very end.
    for t in [1, 25, 50, 75, 90] {
        assert!((s.alpha_bar(t) - f(t as f64) / f(0.0)).abs() < 1e-12, "t={t}");
    }
    let last_beta = (1.0 - f(100.0) / f(99.0)).min(0.999);
    let expect = f(99.0) / f(0.0) * (1.0 - last_beta);
    assert!((s.alpha_bar(100) - expect).abs() < 1e-15);
}

#[test]
fn strided_steps_are_even_and_end_at_t() {
    let taus = strided_timesteps(100, 30).unwrap();
    assert_eq!(taus.len(), 30);
    assert_eq!(*taus.last().unwrap(), 100);
    assert!(taus[0] >= 1 && taus.windows(2).all(|w| w[1] > w[0]));
    assert!(taus.windows(2).all(|w| (3..=4).contains(&(w[1] - w[0]))));
    assert_eq!(strided_timesteps(100, 100).unwrap(), (1..=100).collect::<Vec<_>>());
    assert!(strided_timesteps(100, 0).is_err());
    assert!(strided_timesteps(100, 101).is_err());
}

#[test]
fn forward_noise_mixes_signal_and_noise() {
    let s = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let z0 = [1.5, -2.0];
    let eps = [0.3, 0.7];
    assert_eq!(forward_noise(&z0, 0, &eps, &s).unwrap(), z0.to_vec());
    let a = s.alpha_bar(60);
    let zt = forward_noise(&z0, 60, &eps, &s).unwrap();
    for i in 0..2 {
        assert!((zt[i] - (a.sqrt() * z0[i] + (1.0 - a).sqrt() * eps[i])).abs() < 1e-15);
    }
    assert!(forward_noise(&z0, 101, &eps, &s).is_err());
    assert!(matches!(forward_noise(&z0, 5, &[0.0], &s), Err(Error::Dimension(_))));
}

#[test]
fn adamw_matches_a_hand_computation() {
    let mut p = vec![ParamTensor { name: "w".into(), shape: vec![2], data: vec![1.0, -2.0] }];
    let mut st = AdamWState::new(&p);
    let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let g1 = [0.5, 0.1];
    let g2 = [-0.2, 0.4];
    let mut expect = [1.0, -2.0];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for (step, g) in [g1, g2].iter().enumerate() {
        let grads = vec![ParamTensor { name: "w".into(), shape: vec![2], data: g.to_vec() }];
        adamw_step(&mut p, &grads, &mut st, &cfg).unwrap();
        let t = (step + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mhat = m[i] / (1.0 - 0.9f64.powi(t));
            let vhat = v[i] / (1.0 - 0.999f64.powi(t));
            expect[i] = expect[i] - 0.1 * 0.01 * expect[i] - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        }
        for i in 0..2 {
            assert!((p[0].data[i] - expect[i]).abs() < 1e-14, "step {t}: {} vs {}", p[0].data[i], expect[i]);
        }
    }
    assert_eq!(st.step_count, 2);
}

#[test]
fn adamw_rejects_non_finite_gradients_without_touching_state() {
    let mut p = vec![ParamTensor { name: "w".into(), shape: vec![2], data: vec![1.0, -2.0] }];
    let mut st = AdamWState::new(&p);
    let bad = vec![ParamTensor { name: "w".into(), shape: vec![2], data: vec![f64::NAN, 0.0] }];
    let before = (p.clone(), st.clone());
    assert!(matches!(adamw_step(&mut p, &bad, &mut st, &AdamWConfig::default()), Err(Error::Numeric(_))));
    assert_eq!((p, st), before);
}

fn small_training() -> (clusterlab::world::WorldSpec, CaptionModel, Vocabulary, DenoiserSpec, NoiseSchedule, TrainConfig) {
    let world = make_default_world(0);
    let vocab = make_vocab_dim(&world, &[], 0, 8).unwrap();
    let mut spec = DenoiserSpec::new(2, 8, world.data_scale());
    spec.hidden = vec![16, 16];
    let sched = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let cfg = TrainConfig { steps: 24, batch_size: 16, seed: 3, ..TrainConfig::default() };
    (world.clone(), CaptionModel::for_world(&world), vocab, spec, sched, cfg)
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (world, captions, vocab, spec, sched, cfg) = small_training();
    let full = train_base(&world, &captions, &vocab, spec.clone(), sched.clone(), &cfg).unwrap();
    let init = init_train_state(spec, sched, &cfg).unwrap();
    let half = train_base_from(init, &world, &captions, &vocab, &cfg, 10).unwrap();
    assert_eq!(half.state.steps_done(), 10);

    // Through a checkpoint file, as the command line does it.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("den.json");
    write_json(&path, &half.state.denoiser.checkpoint(Some(half.state.optimizer.clone()))).unwrap();
    let (den, opt) = Denoiser::from_checkpoint(read_json(&path).unwrap()).unwrap();
    let state = TrainState { denoiser: den, optimizer: opt.unwrap() };
    let rest = train_base_from(state, &world, &captions, &vocab, &cfg, cfg.steps).unwrap();

    assert_eq!(rest.state.denoiser, full.state.denoiser);
    assert_eq!(rest.state.optimizer, full.state.optimizer);
    let joined: Vec<LossRow> = half.log.into_iter().chain(rest.log).collect();
    assert_eq!(joined, full.log);
}

#[test]
fn training_rejects_bad_configs() {
    let (world, captions, vocab, spec, sched, cfg) = small_training();
    for bad in [
        TrainConfig { p_uncond: 1.0, ..cfg.clone() },
        TrainConfig { p_desc: -0.1, ..cfg.clone() },
        TrainConfig { batch_size: 0, ..cfg.clone() },
    ] {
        assert!(train_base(&world, &captions, &vocab, spec.clone(), sched.clone(), &bad).is_err());
    }
    let wide = make_vocab_dim(&world, &[], 0, 9).unwrap();
    assert!(matches!(train_base(&world, &captions, &wide, spec, sched, &cfg), Err(Error::Dimension(_))));
}

#[test]
fn checkpoints_and_logs_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let den = tiny_denoiser(2, 8, vec![12, 12], 4);
    let opt = AdamWState { step_count: 7, ..AdamWState::new(&den.mlp.params) };
    let p = dir.path().join("den.json");
    write_json(&p, &den.checkpoint(Some(opt.clone()))).unwrap();
    let (back, back_opt) = Denoiser::from_checkpoint(read_json(&p).unwrap()).unwrap();
    assert_eq!(back, den);
    assert_eq!(back_opt, Some(opt));

    let mut r = rng::from_seed(1);
    let mut proj = Projector::init(ProjectorSpec::new(12, 8), &mut r).unwrap();
    proj.running_mean[0][3] = 0.1 + 1.0 / 3.0;
    let p = dir.path().join("proj.json");
    write_json(&p, &proj.checkpoint(None)).unwrap();
    assert_eq!(Projector::from_checkpoint(read_json(&p).unwrap()).unwrap(), proj);

    let rows: Vec<LossRow> = (0..5).map(|i| LossRow { step: i, loss: 1.0 / (i as f64 + 3.0) }).collect();
    let p = dir.path().join("loss.csv");
    write_csv(&p, &rows).unwrap();
    assert_eq!(read_csv::<LossRow>(&p).unwrap(), rows);

    // Damaged or foreign files are reported, not panicked on.
    std::fs::write(&p, "{").unwrap();
    assert!(matches!(read_json::<DenoiserCheckpoint>(&p), Err(Error::Format { .. })));
    assert!(matches!(read_json::<DenoiserCheckpoint>(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    let mut ck = den.checkpoint(None);
    ck.version += 1;
    assert!(Denoiser::from_checkpoint(ck).is_err());
}

fn small_base(seed: u64) -> (clusterlab::diffusion::Denoiser, Vocabulary, BaseSet) {
    let world = make_default_world(0);
    let vocab = make_vocab_dim(&world, &[], 0, 8).unwrap();
    let den = tiny_denoiser(2, 8, vec![12, 12], seed);
    let cfg = BaseSetConfig { n: 6, cfg_scale: 1.0, steps: 10 };
    let prompt = Prompt::subject(&["subject_a"], "plain");
    let base = generate_base_set(&den, &vocab, &world, &prompt, &cfg, seed, ExecMode::Parallel).unwrap();
    let base = choose_target(&base, Some(2), &mut rng::from_seed(0)).unwrap();
    (den, vocab, base)
}

#[test]
fn base_set_records_features_from_the_last_step() {
    let (den, _, base) = small_base(0);
    assert_eq!(base.n(), 6);
    assert_eq!(base.aux_indices().unwrap(), vec![0, 1, 3, 4, 5]);
    assert_eq!(base.feature_t, strided_timesteps(100, 10).unwrap()[0]);
    assert!(base.entries.iter().all(|e| e.h.len() == den.spec.feature_dim() && e.z0.len() == 2));
    assert_eq!(base.recompute_features(&den).unwrap(), base.features(&[0, 1, 2, 3, 4, 5]));
    assert!(choose_target(&base, Some(6), &mut rng::from_seed(0)).is_err());
    let mut unset = base.clone();
    unset.target_index = None;
    assert!(unset.aux_indices().is_err());
    let variants = augment_target(&base, 3, 0.0, &mut rng::from_seed(0)).unwrap();
    assert!(variants.iter().all(|v| *v == base.entries[2].z0));
}

#[test]
fn projector_starts_at_zero_offset() {
    for bn in [true, false] {
        let mut spec = ProjectorSpec::new(10, 6);
        spec.batch_norm = bn;
        spec.n_outputs = 2;
        let proj = Projector::init(spec, &mut rng::from_seed(2)).unwrap();
        let mut r = rng::from_seed(3);
        let h = Mat::from_vec(4, 10, rng::normal_vec(&mut r, 40));
        let c = Mat::from_vec(4, 6, rng::normal_vec(&mut r, 24));
        let out = proj.evaluate(&h, &c, BnMode::Running).unwrap();
        assert_eq!(out.cols, 12);
        assert!(out.data.iter().all(|&x| x == 0.0));
        assert_eq!(proj.split_offsets(out.row(0)).len(), 2);
    }
}

fn quick_tune() -> TuneConfig {
    TuneConfig { max_steps: 40, min_steps: 0, width: 16, blocks: 2, noise_draws: 2, ..TuneConfig::default() }
}

#[test]
fn tuning_leaves_the_backbone_untouched() {
    let (den, vocab, base) = small_base(1);
    let before = den.clone();
    let templates = templates_for(&base.prompt_tar, &CONTEXTS).unwrap();
    let out = tune(&den, &vocab, &base, &templates, &quick_tune()).unwrap();
    assert_eq!(den, before);
    assert_eq!(out.log.len(), 40);
    assert_eq!(out.stop, StopReason::MaxSteps);
    assert!(out.log.iter().all(|r| r.loss_total.is_finite()));
    let again = tune(&den, &vocab, &base, &templates, &quick_tune()).unwrap();
    assert_eq!(again.projector, out.projector);
}

#[test]
fn plateau_rule_waits_for_window_and_patience() {
    let (den, vocab, base) = small_base(2);
    let templates = templates_for(&base.prompt_tar, &CONTEXTS).unwrap();
    let loose = TuneConfig { max_steps: 400, plateau_window: 10, plateau_patience: 20, plateau_tol: 1e9, ..quick_tune() };
    let out = tune(&den, &vocab, &base, &templates, &loose).unwrap();
    assert_eq!(out.stop, StopReason::Plateau);
    assert_eq!(out.log.len(), 30);
    let held = TuneConfig { min_steps: 100, ..loose.clone() };
    assert_eq!(tune(&den, &vocab, &base, &templates, &held).unwrap().log.len(), 100);
    let never = TuneConfig { max_steps: 60, plateau_tol: -1e9, ..loose };
    assert_eq!(tune(&den, &vocab, &base, &templates, &never).unwrap().stop, StopReason::MaxSteps);
}

#[test]
fn tuning_rejects_bad_inputs() {
    let (den, vocab, base) = small_base(0);
    let templates = templates_for(&base.prompt_tar, &CONTEXTS).unwrap();
    assert!(tune(&den, &vocab, &base, &templates, &TuneConfig { k: 6, ..quick_tune() }).is_err());
    assert!(tune(&den, &vocab, &base, &[], &quick_tune()).is_err());
    let mut unset = base.clone();
    unset.target_index = None;
    assert!(tune(&den, &vocab, &unset, &templates, &quick_tune()).is_err());
    assert!(tune_on(&den, &vocab, &base, &templates, &quick_tune(), Some(&[])).is_err());
    assert!(tune_on(&den, &vocab, &base, &templates, &quick_tune(), Some(&[2])).is_err());
}

#[test]
fn moving_average_by_hand() {
    let log: Vec<TuneLossRow> =
        [1.0, 2.0, 3.0, 4.0].iter().enumerate().map(|(i, &l)| TuneLossRow { step: i, loss_total: l, loss_tar: 0.0, loss_aux: 0.0, loss_aver: 0.0 }).collect();
    assert_eq!(moving_average(&log, 2), vec![1.5, 2.5, 3.5]);
    assert!(moving_average(&log, 5).is_empty());
}

#[test]
fn metrics_by_hand() {
    assert_eq!(capture_fraction(&[0, 2, 2, 1], 2).unwrap(), 0.5);
    assert!(capture_fraction(&[], 0).is_err());
    let s = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 8.0]];
    assert_eq!(consistency(&s, &[0.0, 0.0]), 5.0);
    // Pairs among the first two only: distance 5.
    assert_eq!(diversity(&s, &[1, 1, 0], 1), 5.0);
    assert_eq!(diversity(&s, &[1, 1, 1], 1), 20.0 / 3.0);
    assert_eq!(diversity(&s, &[0, 0, 1], 1), 0.0);
}

#[test]
fn prompt_embedding_operations() {
    let world = make_default_world(0);
    let vocab = make_vocab_dim(&world, &["extra"], 0, 4).unwrap();
    let p = Prompt::subject(&["subject_b"], "snow");
    let c = vocab.embed_prompt(&p).unwrap();
    let pooled = c.pooled();
    for j in 0..4 {
        assert!((pooled[j] - (vocab.get("subject_b").unwrap()[j] + vocab.get("snow").unwrap()[j]) / 2.0).abs() < 1e-15);
    }
    let d = vec![vec![1.0, -1.0, 0.5, 2.0]];
    let shifted = offset_base(&c, &d, 0.8).unwrap();
    for j in 0..4 {
        assert_eq!(shifted.tokens[0][j], c.tokens[0][j] + 0.8 * d[0][j]);
    }
    assert_eq!(shifted.tokens[1], c.tokens[1]);
    assert_eq!(offset_base(&c, &d, 0.0).unwrap(), c);
    assert!(matches!(offset_base(&c, &[vec![0.0; 3]], 1.0), Err(Error::Dimension(_))));
    assert_eq!(semantic_interpolate_empty(&c, 1.0), c);
    assert!(semantic_interpolate_empty(&c, 0.0).tokens.iter().flatten().all(|&x| x == 0.0));
    assert!(matches!(vocab.embed_prompt(&Prompt::subject(&["subject_c"], "snow")), Err(Error::UnknownToken(_))));
    assert!(vocab.get("extra").is_ok());
    assert_eq!(p.with_context("city").unwrap().context_token(), Some("city"));
    // Vocabularies are a pure function of the seed.
    assert_eq!(make_vocab_dim(&world, &["extra"], 0, 4).unwrap(), vocab);
}

#[test]
fn captions_name_the_identity_at_the_requested_rate() {
    let world = make_default_world(0);
    let cm = CaptionModel::for_world(&world);
    let mut r = rng::from_seed(8);
    let always = cm.caption(&cm.entries[0], 3, "city", 1.0, &mut r);
    assert_eq!(always.tokens, vec!["subject_a".to_string(), descriptor_token("subject_a", 3), "city".into()]);
    let never = cm.caption(&cm.entries[1], 3, "city", 0.0, &mut r);
    assert_eq!(never.tokens, vec!["subject_b".to_string(), "city".into()]);
    let hits = (0..4000).filter(|_| cm.caption(&cm.entries[0], 1, "plain", 0.5, &mut r).tokens.len() == 3).count();
    assert!((hits as f64 / 4000.0 - 0.5).abs() < 0.03);
}

#[test]
fn sampling_is_identical_across_execution_modes() {
    let world = make_default_world(0);
    let sched = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let pred = OraclePredictor::new(&world, &sched, "subject_a", "beach", 1, 2.0, 0.5).unwrap();
    let seq = sample_chains(&pred, &sched, 30, 2, 200, 11, ExecMode::Sequential, true).unwrap();
    let par = sample_chains(&pred, &sched, 30, 2, 200, 11, ExecMode::Parallel, true).unwrap();
    assert_eq!(seq, par);
    // A prefix of the chains does not depend on how many chains follow.
    let few = sample_chains(&pred, &sched, 30, 2, 70, 11, ExecMode::Parallel, false).unwrap();
    assert_eq!(few.z0.data[..], seq.z0.data[..140]);
    assert_eq!(seq.trajectory.unwrap().len(), 31);
}
