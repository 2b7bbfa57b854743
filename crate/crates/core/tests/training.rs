//! End-to-end training loop behaviour.

use std::fs;
use std::path::Path;

use grpo_forge::algorithms::Algorithm;
use grpo_forge::checkpoint::Checkpoint;
use grpo_forge::envs::{reference_answer, TaskFamily, TaskGenSpec, TaskInstance};
use grpo_forge::policy::{PolicyParams, PolicyShape, PolicyTriple, Vocab};
use grpo_forge::trainer::{
    evaluate, read_steps_csv, train_in_dir, train_run, PolicyConfig, RunDir, Trainer, TrainerConfig, TrainingSetup,
};
use grpo_forge::Error;

fn config(alg: Algorithm, steps: usize) -> TrainerConfig {
    TrainerConfig {
        algorithm: alg,
        steps,
        batch_size: 4,
        eval_count: 32,
        eval_interval: 3,
        checkpoint_interval: 3,
        augmentation_enabled: true,
        task: TaskGenSpec {
            count: 24,
            ..TaskGenSpec::default()
        },
        ..TrainerConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn single_step_writes_one_row_and_a_checkpoint() {
    for alg in Algorithm::ALL {
        let dir = tempfile::tempdir().unwrap();
        train_in_dir(&config(alg, 1), dir.path(), None).unwrap();
        let rows = read_steps_csv(&dir.path().join(RunDir::STEPS)).unwrap();
        assert_eq!(rows.len(), 1, "{alg}");
        assert!(RunDir::new(dir.path()).checkpoint_path(1).exists());
        for f in [RunDir::CONFIG, RunDir::METRICS, RunDir::EVENTS, RunDir::SUMMARY] {
            assert!(dir.path().join(f).exists(), "{alg}: {f}");
        }
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let cfg = config(Algorithm::RegGrpo, 6);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_in_dir(&cfg, a.path(), None).unwrap();
    train_in_dir(&cfg, b.path(), None).unwrap();
    for f in [RunDir::STEPS, RunDir::METRICS, RunDir::EVENTS, RunDir::SUMMARY, RunDir::CONFIG] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn resuming_reproduces_the_remaining_steps() {
    for alg in [Algorithm::Ppo, Algorithm::RegGrpo, Algorithm::OnlineDpo] {
        let cfg = config(alg, 7);
        let full = tempfile::tempdir().unwrap();
        train_in_dir(&cfg, full.path(), None).unwrap();

        let part = tempfile::tempdir().unwrap();
        let stopped = TrainerConfig { steps: 3, ..cfg.clone() };
        train_in_dir(&stopped, part.path(), None).unwrap();
        let ckpt = RunDir::new(part.path()).checkpoint_path(3);
        train_in_dir(&cfg, part.path(), Some(&ckpt)).unwrap();

        for f in [RunDir::STEPS, RunDir::METRICS, RunDir::EVENTS, RunDir::SUMMARY] {
            assert_eq!(read(&full.path().join(f)), read(&part.path().join(f)), "{alg}: {f}");
        }
        let last = |d: &Path| read(&RunDir::new(d).checkpoint_path(7));
        assert_eq!(last(full.path()), last(part.path()), "{alg}");
    }
}

#[test]
fn resume_rejects_a_foreign_checkpoint() {
    let cfg = config(Algorithm::Grpo, 3);
    let dir = tempfile::tempdir().unwrap();
    train_in_dir(&cfg, dir.path(), None).unwrap();
    let ckpt = RunDir::new(dir.path()).checkpoint_path(3);
    let other = TrainerConfig {
        algorithm: Algorithm::Rloo,
        ..cfg.clone()
    };
    let err = train_in_dir(&other, tempfile::tempdir().unwrap().path(), Some(&ckpt)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let wider = TrainerConfig {
        policy: PolicyConfig {
            max_len: 9,
            ..cfg.policy
        },
        ..cfg.clone()
    };
    let err = train_in_dir(&wider, tempfile::tempdir().unwrap().path(), Some(&ckpt)).unwrap_err();
    assert!(matches!(err, Error::Descriptor(_)), "{err}");

    let mut text = fs::read_to_string(&ckpt).unwrap();
    text = text.replacen("next_step=3", "next_step=2", 1);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, text).unwrap();
    assert!(matches!(Checkpoint::load(&bad, None), Err(Error::Integrity(_))));
}

#[test]
fn reference_policy_is_frozen_and_window_is_bounded() {
    let mut cfg = config(Algorithm::RegGrpo, 12);
    cfg.hyperparams.window = 4;
    let setup = TrainingSetup::from_config(&cfg).unwrap();
    let mut trainer = Trainer::new(&cfg, &setup).unwrap();
    while !trainer.is_done() {
        trainer.step().unwrap();
        let st = trainer.state();
        assert!(st.window.len() <= 4);
        assert!(st.window.entries().all(|e| e.step < st.next_step));
        assert_eq!(st.triple.reference(), &setup.initial);
        assert_eq!(st.triple.old, st.triple.current);
    }
    assert_ne!(trainer.state().triple.current, setup.initial);
}

#[test]
fn constant_reward_batches_leave_grpo_parameters_untouched() {
    // A format-only task under a saturated format prior: every response is
    // well-formed, every group has constant reward 1.
    let cfg = TrainerConfig {
        algorithm: Algorithm::Grpo,
        steps: 4,
        batch_size: 4,
        augmentation_enabled: false,
        eval_count: 8,
        task: TaskGenSpec {
            family: TaskFamily::FormatOnly,
            count: 8,
            ..TaskGenSpec::default()
        },
        policy: PolicyConfig {
            max_len: 8,
            format_strength: 1000.0,
            copy_strength: 0.0,
        },
        hyperparams: grpo_forge::algorithms::Hyperparams {
            kl_beta: 0.0,
            ..Default::default()
        },
        ..TrainerConfig::default()
    };
    let setup = TrainingSetup::from_config(&cfg).unwrap();
    let mut trainer = Trainer::new(&cfg, &setup).unwrap();
    for _ in 0..cfg.steps {
        let rec = trainer.step().unwrap();
        assert_eq!(rec.log.vanishing_ratio, 1.0);
        assert!(rec.applied_grad.iter().all(|&g| g == 0.0));
        assert_eq!(trainer.state().triple.current.theta(), setup.initial.theta());
    }
}

#[test]
fn step_logs_stay_in_range() {
    for alg in Algorithm::ALL {
        let out = train_run(&config(alg, 5)).unwrap();
        for l in &out.logs {
            assert!(l.loss.is_finite() && l.grad_norm.is_finite() && l.kl_value.is_finite(), "{alg}");
            assert!((0.0..=1.0).contains(&l.vanishing_ratio));
            assert!((0.0..=1.0).contains(&l.clip_active_fraction));
            assert!(l.kl_value >= 0.0);
            assert_eq!(l.aug_none + l.aug_decrease + l.aug_increase, 4);
        }
    }
}

#[test]
fn reg_grpo_improves_reward_on_grouped_qa() {
    let cfg = TrainerConfig {
        algorithm: Algorithm::RegGrpo,
        steps: 500,
        eval_interval: 0,
        task: TaskGenSpec {
            count: 256,
            distractor_strength: 0.3,
            ..TaskGenSpec::default()
        },
        ..TrainerConfig::default()
    };
    assert_eq!(cfg.hyperparams.group_size, 8);
    let out = train_run(&cfg).unwrap();
    let tail = out.logs[450..].iter().map(|l| l.mean_reward).sum::<f64>() / 50.0;
    assert!(tail > out.logs[0].mean_reward, "{tail} vs {}", out.logs[0].mean_reward);
    assert!(out.final_eval.mean_reward > out.initial_eval.mean_reward);
}

/// Linear policy whose position biases spell out `y` regardless of input.
fn scripted_policy(y: &[u32], vocab: &Vocab, d: usize, max_len: usize) -> PolicyParams {
    let mut p = PolicyParams::zeros(PolicyShape::linear(vocab.size(), d, max_len)).unwrap();
    for (pos, &t) in y.iter().enumerate() {
        let i = p.pos_index(pos, t);
        p.theta_mut()[i] = 50.0;
    }
    p
}

#[test]
fn emitting_the_reference_answer_scores_perfectly() {
    for family in [TaskFamily::GroupedQa, TaskFamily::TemporalGrounding] {
        let spec = TaskGenSpec {
            family,
            count: 400,
            ..TaskGenSpec::default()
        };
        let vocab = spec.validate().unwrap();
        let data = spec.generate().unwrap();
        let gt = data[0].gt_answer.clone();
        let same: Vec<TaskInstance> = data.into_iter().filter(|x| x.gt_answer == gt).collect();
        let y = reference_answer(&same[0], 8).unwrap();
        let triple = PolicyTriple::new(scripted_policy(&y, &vocab, spec.feature_dim, 8));
        let report = evaluate(&triple, &same, &vocab, &family.default_reward()).unwrap();
        assert_eq!(report.acc, Some(1.0));
        assert_eq!(report.mean_reward, family.default_reward().max_total());
        if family == TaskFamily::TemporalGrounding {
            assert_eq!(report.miou, Some(1.0));
            assert_eq!(report.r_at_05, Some(1.0));
        } else {
            assert_eq!(report.miou, None);
        }
        let again = evaluate(&triple, &same, &vocab, &family.default_reward()).unwrap();
        assert_eq!(report, again);
    }
}
