use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Activation;
use crate::data::collect_random;
use crate::models::{ModelKind, NetConfig};

fn frozen_model(norm: Normalizer, action_dim: usize) -> DynamicsModel {
    let arch = NetConfig { hidden: vec![4], activation: Activation::Tanh };
    DynamicsModel::build(ModelKind::DynodeEuler, &arch, norm, action_dim, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// 1-dim sequences `s_h = s_0 + h c`.
fn ramp_set(c: f64, horizon: usize, n: usize) -> EvalSet {
    let rollouts = (0..n)
        .map(|i| {
            let s0 = i as f64;
            Rollout { initial: vec![s0], actions: vec![vec![0.0]; horizon], states: (1..=horizon).map(|h| vec![s0 + h as f64 * c]).collect() }
        })
        .collect();
    EvalSet::new(rollouts, Normalizer::identity(1)).unwrap()
}

#[test]
fn standard_set_shape() {
    for kind in EnvKind::ALL {
        let env = Env::new(kind);
        let set = EvalSet::standard(&env).unwrap();
        assert_eq!(set.rollouts.len(), EVAL_ROLLOUTS);
        assert!(set.rollouts.iter().all(|r| r.horizon() == EVAL_HORIZON));
        assert_eq!(set, EvalSet::standard(&env).unwrap());
    }
}

#[test]
fn eval_starts_differ_from_training() {
    let env = Env::new(EnvKind::Pendulum);
    let set = EvalSet::standard(&env).unwrap();
    let train = collect_random(&env, 1000, 200, 0).unwrap();
    for r in &set.rollouts {
        assert!(train.iter().all(|t| t.state != r.initial));
    }
}

#[test]
fn perfect_model_scores_zero() {
    for kind in EnvKind::ALL {
        let env = Env::new(kind);
        let set = EvalSet::standard(&env).unwrap();
        assert_eq!(mpe(&TruePredictor(env), &set).unwrap(), 0.0);
        assert!(cumulative_error(&TruePredictor(env), &set, &[0, 50, 200]).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn frozen_prediction_gives_arithmetic_series() {
    for (c, h) in [(0.5, 200), (0.01, 10), (2.0, 1)] {
        let set = ramp_set(c, h, 3);
        let model = frozen_model(Normalizer::identity(1), 1);
        let expected = c * (h as f64 + 1.0) / 2.0;
        assert!((mpe(&model, &set).unwrap() - expected).abs() < 1e-12 * expected.max(1.0));
        let cum = cumulative_error(&model, &set, &[0, 1, h]).unwrap();
        assert_eq!(cum[0], 0.0);
        assert!((cum[1] - c).abs() < 1e-12);
        assert!((cum[2] - c * (h * (h + 1)) as f64 / 2.0).abs() < 1e-9);
    }
}

#[test]
fn cumulative_at_full_horizon_matches_mpe() {
    let env = Env::new(EnvKind::CartPoleSwingup);
    let set = EvalSet::standard(&env).unwrap();
    let buf = collect_random(&env, 200, 200, 1).unwrap();
    let model = frozen_model(Normalizer::from_buffer(&buf).unwrap(), 1);
    let cum = cumulative_error(&model, &set, &[200]).unwrap()[0];
    assert!((cum / 200.0 - mpe(&model, &set).unwrap()).abs() < 1e-10);
}

#[test]
fn cumulative_curve_is_monotone() {
    let env = Env::new(EnvKind::Pendulum);
    let set = EvalSet::standard(&env).unwrap();
    let model = frozen_model(set.normalizer.clone(), 1);
    let hs: Vec<usize> = (0..=200).collect();
    let curve = cumulative_error(&model, &set, &hs).unwrap();
    assert!(curve.windows(2).all(|w| w[1] >= w[0]));
    assert!(cumulative_error(&model, &set, &[201]).is_err());
}

#[test]
fn metrics_ignore_rollout_order() {
    let env = Env::new(EnvKind::CartPoleBalance);
    let set = EvalSet::standard(&env).unwrap();
    let model = frozen_model(set.normalizer.clone(), 1);
    let mut rev = set.clone();
    rev.rollouts.reverse();
    assert!((mpe(&model, &set).unwrap() - mpe(&model, &rev).unwrap()).abs() < 1e-12);
}

#[test]
fn scripted_trajectory_spirals_outward() {
    let r = scripted_mountain_car().unwrap();
    let last = r.states.last().unwrap();
    assert!(last[0] >= 0.45);
    let mut traj = vec![r.initial.clone()];
    traj.extend(r.states.iter().cloned());
    let amps = swing_amplitudes(&traj);
    assert!(amps.len() >= 3, "{amps:?}");
    assert!(amps.windows(2).all(|w| w[1] > w[0]), "{amps:?}");
}

#[test]
fn true_model_reconstruction_overlays_truth() {
    let env = Env::new(EnvKind::MountainCar);
    let r = scripted_mountain_car().unwrap();
    let ps = phase_space_reconstruction(&TruePredictor(env), &r, &Normalizer::identity(2)).unwrap();
    assert_eq!(ps.truth, ps.predicted);
    assert_eq!(ps.final_error, 0.0);
    assert_eq!(ps.truth.len(), r.horizon() + 1);
}

#[test]
fn phase_outputs_are_well_formed() {
    let env = Env::new(EnvKind::MountainCar);
    let r = scripted_mountain_car().unwrap();
    let buf = collect_random(&env, 300, 200, 0).unwrap();
    let train: Vec<Vec<f64>> = buf.iter().map(|t| t.state.clone()).collect();
    let model = frozen_model(Normalizer::from_buffer(&buf).unwrap(), 1);
    let ps = phase_space_reconstruction(&model, &r, model.normalizer()).unwrap();
    assert!(ps.final_error > 0.0);
    let preds = [("frozen", ps.predicted.as_slice())];
    let svg = phase_svg(&ps.truth, &preds, &train);
    assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    assert!(svg.contains("fill-opacity"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    let csv = phase_csv(&ps.truth, &preds);
    assert_eq!(csv.lines().next(), Some("step,true_pos,true_vel,frozen_pos,frozen_vel"));
    assert_eq!(csv.lines().count(), ps.truth.len() + 1);
}

fn grid_report() -> MetricReport {
    let mut cells = Vec::new();
    for model in ["dynode-euler", "dynode-rk4", "baseline"] {
        for samples in [200, 500, 1000] {
            for seed in 0..5u64 {
                let mpe = 0.01 * (1 + seed) as f64 / samples as f64 * 1000.0 + if model == "baseline" { 0.03 } else { 0.0 };
                let cumulative = (0..=200).map(|h| h as f64 * mpe).collect();
                cells.push(Cell { env: "mountaincar".into(), model: model.into(), samples, seed, mpe, cumulative });
            }
        }
    }
    MetricReport { cells }
}

#[test]
fn grid_gives_45_cells_and_9_rows() {
    let report = grid_report();
    assert_eq!(report.cells_csv().lines().count(), 46);
    let table = report.table();
    assert_eq!(table.len(), 9);
    assert!(table.iter().all(|r| r.n_seeds == 5));
    // Seeds contribute 1..=5 times a base value: population std is base * sqrt(2).
    let row = table.iter().find(|r| r.model == "dynode-euler" && r.samples == 1000).unwrap();
    assert!((row.mean - 0.03).abs() < 1e-15);
    assert!((row.std - 0.01 * 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn empty_and_single_reports() {
    let empty = MetricReport::default();
    let csv = empty.table_csv();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1);
    assert!(parse_table_csv(&csv).unwrap().is_empty());
    let one =
        MetricReport { cells: vec![Cell { env: "pendulum".into(), model: "baseline".into(), samples: 200, seed: 0, mpe: 0.25, cumulative: vec![] }] };
    let csv = one.table_csv();
    let row = csv.lines().last().unwrap();
    assert_eq!(row, "pendulum,baseline,200,1,0.25,0,n=1");
}

#[test]
fn csv_parse_back_matches_report() {
    let report = grid_report();
    assert_eq!(parse_table_csv(&report.table_csv()).unwrap(), report.table());
    let cells = parse_cells_csv(&report.cells_csv()).unwrap();
    let strip = |c: &Cell| (c.env.clone(), c.model.clone(), c.samples, c.seed, c.mpe.to_bits());
    assert_eq!(cells.iter().map(strip).collect::<Vec<_>>(), report.cells.iter().map(strip).collect::<Vec<_>>());
    assert!(parse_table_csv("nonsense").is_err());
}

#[test]
fn report_files_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = grid_report().write(a.path()).unwrap();
    grid_report().write(b.path()).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["table1.csv", "cells.csv", "fig2_mountaincar.svg", "fig4_mountaincar.svg", "fig4_mountaincar.csv"]);
    for n in &names {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap());
    }
    let fig4 = std::fs::read_to_string(a.path().join("fig4_mountaincar.csv")).unwrap();
    assert_eq!(fig4.lines().next(), Some("horizon,baseline,dynode-euler,dynode-rk4"));
    assert_eq!(fig4.lines().count(), 202);
}
