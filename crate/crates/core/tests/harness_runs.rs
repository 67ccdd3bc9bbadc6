use attnlab::attention::AttentionParams;
use attnlab::config::parse_config;
use attnlab::data::{DataDistribution, TaskDistribution};
use attnlab::gaussian::{GaussianSpec, NoiseSpec, RngStream};
use attnlab::harness::{
    mc_bayes_error, mc_generalization_error, run_scenario, to_csv_string, PretrainMode, ShiftScenario, TauPolicy,
};
use attnlab::linalg::{Mat, Vector};
use attnlab::pretrain::pretrain_population;
use attnlab::theory::{generalization_error, TestEnvironment};

fn isotropic(d: usize, cx: f64, sigma: f64) -> DataDistribution {
    DataDistribution::new(
        GaussianSpec::isotropic(Vector::zeros(d), cx),
        TaskDistribution::new(GaussianSpec::standard(d)),
        NoiseSpec::from_std(sigma).unwrap(),
    )
    .unwrap()
}

#[test]
fn isotropic_no_shift_value_confirmed_by_monte_carlo() {
    let (d, l) = (50, 5000);
    let dist = isotropic(d, 1.0, 0.1);
    let params = pretrain_population(&dist, l).unwrap();
    let theory = generalization_error(&params, &TestEnvironment::from_distribution(&dist, l).unwrap()).unwrap();
    assert!((theory - 0.5101).abs() < 1e-3, "{theory}");
    let mc = mc_generalization_error(&params, &dist, l, 2000, &RngStream::new(5, 0)).unwrap();
    let allowance = 3.0 * mc.stderr + 5.0 * (d as f64 / l as f64) * theory;
    assert!((mc.mean - theory).abs() <= allowance, "{} vs {theory}", mc.mean);
}

#[test]
fn zero_model_error_is_the_floor() {
    let d = 10;
    let dist = isotropic(d, 1.0, 0.5);
    let mc = mc_generalization_error(&AttentionParams::zeros(d), &dist, 20, 20_000, &RngStream::new(1, 0)).unwrap();
    let floor = d as f64 + 0.25;
    assert!((mc.mean - floor).abs() < 4.0 * mc.stderr, "{} vs {floor}", mc.mean);
}

#[test]
fn stderr_shrinks_like_root_n() {
    let d = 8;
    let dist = isotropic(d, 1.0, 0.3);
    let params = pretrain_population(&dist, 40).unwrap();
    let small = mc_generalization_error(&params, &dist, 40, 2_000, &RngStream::new(2, 0)).unwrap();
    let large = mc_generalization_error(&params, &dist, 40, 32_000, &RngStream::new(2, 0)).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((ratio - 4.0).abs() < 0.6, "{ratio}");
}

#[test]
fn bayes_beats_the_model_on_matched_data() {
    let d = 10;
    let dist = isotropic(d, 1.0, 0.2);
    let prior = attnlab::bayes::RidgePrior::new(Vector::zeros(d), Mat::identity(d, d), 0.04).unwrap();
    let stream = RngStream::new(8, 0);
    let bayes = mc_bayes_error(&prior, &dist, 40, 4000, &stream).unwrap();
    let model = mc_generalization_error(&pretrain_population(&dist, 40).unwrap(), &dist, 40, 4000, &stream).unwrap();
    assert!(bayes.mean < model.mean);
}

fn small_scenario(seed: u64) -> ShiftScenario {
    let mut s = ShiftScenario::new("cov", isotropic(6, 1.0, 0.1), isotropic(6, 2.0, 0.1), vec![12, 48]).unwrap();
    s.m = 100;
    s.n_prompts = 400;
    s.seed = seed;
    s.tau_policies = vec![TauPolicy::PretrainDefault, TauPolicy::Theorem2Optimal];
    s
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let s = small_scenario(3);
    let csv_with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| to_csv_string(&[&run_scenario(&s).unwrap()]).unwrap())
    };
    let one = csv_with(1);
    assert_eq!(one, csv_with(3));
    assert_eq!(one, csv_with(1));
}

#[test]
fn seed_moves_monte_carlo_rows_only() {
    let mut a = small_scenario(1);
    let mut b = small_scenario(2);
    a.pretrain = PretrainMode::Population;
    b.pretrain = PretrainMode::Population;
    let (ra, rb) = (run_scenario(&a).unwrap(), run_scenario(&b).unwrap());
    for (x, y) in ra.rows.iter().zip(&rb.rows) {
        assert_eq!(x.theory_error, y.theory_error);
        assert_eq!(x.tau_used, y.tau_used);
        assert_ne!(x.mc.mean, y.mc.mean);
    }
}

#[test]
fn csv_layout() {
    let report = run_scenario(&small_scenario(0)).unwrap();
    let text = to_csv_string(&[&report]).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario_id,case_label,d,l,m,tau_policy,tau,mode,error,stderr,n_prompts,seed"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * report.rows.len());
    for chunk in rows.chunks(3) {
        let modes: Vec<&str> = chunk.iter().map(|r| r[7]).collect();
        assert_eq!(modes, ["bayes", "mc", "theory"]);
        assert_eq!(chunk[2][9], "");
        assert_eq!(chunk[2][10], "");
        assert_eq!(chunk[1][10], "400");
    }
}

#[test]
fn config_driven_run_matches_hand_built_scenario() {
    let text = r#"
id = "cov"
d = 6
l_grid = [12, 48]
m = 100
seed = 0
n_prompts = 400
tau_policy = ["pretrain_default", "theorem2_optimal"]

[train]
noise_std = 0.1

[test]
x_cov = "scaled_identity(d, 2)"
"#;
    let set = parse_config(text, &[]).unwrap();
    let from_config = run_scenario(&set.scenarios[0]).unwrap();
    let by_hand = run_scenario(&small_scenario(0)).unwrap();
    assert_eq!(
        to_csv_string(&[&from_config]).unwrap(),
        to_csv_string(&[&by_hand]).unwrap()
    );
}
