mod common;

use agsm_core::agsm::{posttrain, Backbone, Method, PosttrainConfig};
use agsm_core::data::{sample_pairs, MixtureSpec};
use agsm_core::denoiser::{pretrain_backbone, DenoiserConfig, Objective, PretrainConfig, SoftTokenBank};
use agsm_core::eval::stability_curve;
use agsm_core::flow::FlowConfig;
use agsm_core::optim::CosineRestarts;
use agsm_core::sampling::{ddpm_sample, Strategy};
use agsm_core::schedule::NoiseSchedule;
use common::*;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig { time_dim: 8, cond_dim: 8, token_dim: 8, hidden_width: 48, hidden_layers: 2, ..DenoiserConfig::default() }
}

fn ring() -> MixtureSpec {
    MixtureSpec::ring(8, 2, 4.0, 0.3).unwrap()
}

fn short(method: Method, steps: usize) -> PosttrainConfig {
    PosttrainConfig {
        method,
        steps,
        lr: CosineRestarts { base_lr: 1e-2, min_lr: 0.0, period: 100, period_mult: 1 },
        groups_per_step: 1,
        ..PosttrainConfig::default()
    }
}

fn backbone(objective: Objective<'_>, steps: usize) -> agsm_core::denoiser::DenoiserParams {
    let data = sample_pairs(&ring(), 2000, &mut rng(1));
    let cfg = PretrainConfig { steps, ..PretrainConfig::default() };
    pretrain_backbone(&data, objective, tiny(), &cfg, 3).unwrap().0
}

#[test]
fn pretraining_halves_heldout_loss() {
    let s = sched();
    let data = sample_pairs(&ring(), 2000, &mut rng(1));
    for objective in [Objective::Noise(&s), Objective::Velocity] {
        let cfg = PretrainConfig { steps: 600, ..PretrainConfig::default() };
        let (_, rep) = pretrain_backbone(&data, objective, tiny(), &cfg, 3).unwrap();
        assert!(rep.final_heldout_loss <= 0.5 * rep.initial_heldout_loss, "{rep:?}");
    }
}

#[test]
fn zero_pretraining_steps_keep_initialization() {
    let s = sched();
    let data = sample_pairs(&ring(), 100, &mut rng(1));
    let cfg = PretrainConfig { steps: 0, ..PretrainConfig::default() };
    let (a, rep) = pretrain_backbone(&data, Objective::Noise(&s), tiny(), &cfg, 3).unwrap();
    let (b, _) = pretrain_backbone(&data, Objective::Noise(&s), tiny(), &cfg, 3).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(rep.initial_heldout_loss, rep.final_heldout_loss);
    let c = pretrain_backbone(&data, Objective::Noise(&s), tiny(), &PretrainConfig { steps: 1, ..cfg }, 3).unwrap().0;
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn point_mass_backbone_samples_near_the_point() {
    // the denoising optimum for data δ_0 maps every x_t back to 0
    let s = sched();
    let spec = MixtureSpec { dim: 2, centers: vec![vec![0.0, 0.0]], mode_std: 0.5 };
    let data = sample_pairs(&spec, 2000, &mut rng(2));
    let model = DenoiserConfig { num_conditions: 1, ..tiny() };
    let cfg = PretrainConfig { steps: 1500, ..PretrainConfig::default() };
    let (p, _) = pretrain_backbone(&data, Objective::Noise(&s), model, &cfg, 4).unwrap();
    let xs = ddpm_sample(&p, None, &s, 0, 300, 1.0, Strategy::NoTokens, 5).unwrap();
    let mean: Vec<f64> = (0..2).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < spec.mode_std, "mean {mean:?}");
}

fn fresh_bank() -> SoftTokenBank {
    SoftTokenBank::init(3, tiny().token_dim, 0.02, 0.999, &mut rng(9)).unwrap()
}

#[test]
fn zero_steps_and_zero_lr_leave_tokens() {
    let s = sched();
    let p = backbone(Objective::Noise(&s), 50);
    let print = p.fingerprint();
    let (b, rec) = posttrain(&p, fresh_bank(), Backbone::Diffusion(&s), &ring(), &short(Method::Agsm, 0), 1, &mut |_, _| None).unwrap();
    assert!(rec.is_empty());
    assert_eq!(b, fresh_bank());
    let mut cfg = short(Method::Agsm, 20);
    cfg.lr = CosineRestarts::constant(0.0);
    let (b, rec) = posttrain(&p, fresh_bank(), Backbone::Diffusion(&s), &ring(), &cfg, 1, &mut |_, _| None).unwrap();
    assert_eq!(rec.len(), 20);
    assert_eq!(b.psi_pos, fresh_bank().psi_pos);
    assert_eq!(b.psi_neg, fresh_bank().psi_neg);
    assert_eq!(p.fingerprint(), print);
}

#[test]
fn posttraining_is_deterministic_and_leaves_backbone() {
    let s = sched();
    let fc = FlowConfig::default();
    let pd = backbone(Objective::Noise(&s), 50);
    let pf = backbone(Objective::Velocity, 50);
    for (p, bb) in [(&pd, Backbone::Diffusion(&s)), (&pf, Backbone::Flow(&fc))] {
        let print = p.fingerprint();
        for m in [Method::Agsm, Method::Bt, Method::PositiveOnly, Method::SharedToken, Method::Softrepa] {
            let mut calls = 0;
            let run = |calls: &mut usize| {
                posttrain(p, fresh_bank(), bb, &ring(), &short(m, 15), 8, &mut |step, _| {
                    *calls += 1;
                    (step % 5 == 4).then_some(step as f64)
                })
                .unwrap()
            };
            let (b1, r1) = run(&mut calls);
            let (b2, r2) = run(&mut calls);
            assert_eq!(calls, 30);
            assert_eq!(b1, b2, "{}", m.name());
            assert_eq!(format!("{r1:?}"), format!("{r2:?}"));
            assert_eq!(r1[4].val_alignment, Some(4.0));
            assert_eq!(r1[3].val_alignment, None);
            assert_ne!(b1.psi_pos, fresh_bank().psi_pos);
            match m {
                Method::SharedToken | Method::Softrepa => assert_eq!(b1.psi_pos, b1.psi_neg),
                Method::PositiveOnly => {
                    assert_eq!(b1.psi_neg, fresh_bank().psi_neg);
                    assert!(r1.iter().all(|r| r.neg_loss.is_nan()));
                }
                Method::Agsm | Method::Bt => assert_ne!(b1.psi_neg, fresh_bank().psi_neg),
            }
            let (b3, _) = posttrain(p, fresh_bank(), bb, &ring(), &short(m, 15), 9, &mut |_, _| None).unwrap();
            assert_ne!(b1, b3);
        }
        assert_eq!(p.fingerprint(), print);
    }
}

#[test]
fn configuration_errors_are_reported() {
    let s = sched();
    let p = backbone(Objective::Noise(&s), 5);
    let mut cfg = short(Method::Agsm, 3);
    cfg.group_size = 9;
    assert!(posttrain(&p, fresh_bank(), Backbone::Diffusion(&s), &ring(), &cfg, 1, &mut |_, _| None).is_err());
    cfg.group_size = 0;
    assert!(posttrain(&p, fresh_bank(), Backbone::Diffusion(&s), &ring(), &cfg, 1, &mut |_, _| None).is_err());
    let mut cfg = short(Method::Agsm, 3);
    cfg.guidance.gamma_neg = -1.0;
    assert!(posttrain(&p, fresh_bank(), Backbone::Diffusion(&s), &ring(), &cfg, 1, &mut |_, _| None).is_err());
    for m in [Method::Agsm, Method::Bt, Method::PositiveOnly, Method::SharedToken, Method::Softrepa] {
        assert_eq!(Method::parse(m.name()).unwrap(), m);
    }
    assert!(Method::parse("dpo").is_err());
}

/// Short-horizon proxy for the stability comparison: the contrastive
/// objective lifts the negative-pair denoising error while the guided one
/// keeps it near its starting level.
#[test]
fn contrastive_objective_inflates_negative_error() {
    let s = sched();
    let p = backbone(Objective::Noise(&s), 1500);
    let ratio = |m| {
        let (_, rec) = posttrain(&p, fresh_bank(), Backbone::Diffusion(&s), &ring(), &short(m, 600), 21, &mut |_, _| None).unwrap();
        stability_curve(&rec, 100).unwrap().last().unwrap().ratio_to_baseline
    };
    let (soft, guided) = (ratio(Method::Softrepa), ratio(Method::Agsm));
    assert!(soft > 1.0, "softrepa {soft}");
    assert!(guided < soft, "agsm {guided} vs softrepa {soft}");
}
