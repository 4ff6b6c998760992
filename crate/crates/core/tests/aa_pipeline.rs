//! End-to-end use of the public API: sample, price, train, save, reload,
//! compare.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptcf_core::analytics::{check_feasibility, optimal_rewards, DEFAULT_TOL};
use ptcf_core::harness::plan::{load_policy, CHECKPOINT_FILE};
use ptcf_core::harness::{
    compare_report, plan_reports, run_plan, Algorithm, ExperimentConfig, ExperimentPlan, SamplingSpec,
};
use ptcf_core::market::{ContractMenu, PTParams};
use ptcf_core::rl::reward::contract_reward;
use ptcf_core::rl::{evaluate, EvalSet, TrainerConfig};

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        trainer: TrainerConfig {
            max_steps: 200,
            batch_size: 32,
            eval_interval: 100,
            eval_set_size: 10,
            actor_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            ..TrainerConfig::desk_scale()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn closed_form_menus_are_rewarded() {
    let spec = SamplingSpec::default();
    let pt = PTParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let env = spec.sample_env(&mut rng).unwrap();
        let l = vec![0.2 * env.max_latency, 0.9 * env.max_latency];
        let menu = ContractMenu::new(l.clone(), optimal_rewards(&env, &l).unwrap()).unwrap();
        assert!(check_feasibility(&env, &menu, DEFAULT_TOL).unwrap().feasible());
        assert!(contract_reward(&env, &pt, &menu, DEFAULT_TOL).unwrap() != 0.0);
    }
}

#[test]
fn plan_outputs_reload_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan {
        name: "pipeline".into(),
        algorithms: vec![
            Algorithm::DiffusionSac,
            Algorithm::Oracle,
            Algorithm::CompleteInfo,
            Algorithm::Random,
        ],
        sweep: None,
        seeds: vec![5],
        output_dir: dir.path().to_path_buf(),
        config: small_config(),
    };
    let cells = run_plan(&plan, None).unwrap();
    let reports = plan_reports(&cells).unwrap();
    assert_eq!(reports.len(), 1);
    let report = &reports[0];
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.pairs.len(), 6);
    // complete_info >= oracle holds on every env.
    assert!(!report
        .violations
        .iter()
        .any(|v| v.expected_higher == Algorithm::CompleteInfo && v.expected_lower == Algorithm::Oracle));

    let trained = cells.iter().find(|c| c.algorithm == Algorithm::DiffusionSac).unwrap();
    let ckpt = plan.cell_dir(Algorithm::DiffusionSac, None, 5).join(CHECKPOINT_FILE);
    let (policy, record) = load_policy(&ckpt, None).unwrap();
    assert_eq!(record.seed, 5);
    let set = EvalSet::build(&plan.config.sampling, &plan.config.pt, 5, 10).unwrap();
    assert_eq!(set.hash, trained.eval_hash);
    let again = evaluate(&policy, &set, &plan.config.pt, DEFAULT_TOL).unwrap();
    assert_eq!(again.per_env_reward, trained.per_env_reward);

    let mut other = trained.clone();
    other.eval_seed += 1;
    assert!(compare_report(&[trained.clone(), other]).is_err());
}
