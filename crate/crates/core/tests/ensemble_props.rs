use proptest::prelude::*;
use tqs_core::backbone::NoiseMode;
use tqs_core::ensemble::{ensemble_stats, noise_scale_sweep, run_ensemble, PerturbKind, PerturbStrategy};
use tqs_core::grid::{synth_dataset, DayIndex, GridSpec, Splits, SynthConfig, VariableCatalog};
use tqs_core::metrics::{quantile_sorted, rmse};
use tqs_core::model::{Model, ModelConfig};
use tqs_core::train::{forecast_range_with, Dataset, ModelFamily};

fn members_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (1usize..8, 1usize..6).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec(-50.0f32..50.0, n), m))
}

proptest! {
    #[test]
    fn stats_are_recomputable(members in members_strategy(), levels in prop::collection::vec(0.0f64..=1.0, 0..5)) {
        let (mean, spread, q) = ensemble_stats(&members, &levels).unwrap();
        let m = members.len() as f64;
        for i in 0..mean.len() {
            let mut col: Vec<f64> = members.iter().map(|x| x[i] as f64).collect();
            let mu = col.iter().sum::<f64>() / m;
            prop_assert_eq!(mean[i], mu);
            prop_assert_eq!(spread[i], (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m).sqrt());
            col.sort_by(f64::total_cmp);
            for (l, &a) in levels.iter().enumerate() {
                prop_assert_eq!(q[l][i], quantile_sorted(&col, a));
                prop_assert!(q[l][i] >= col[0] && q[l][i] <= col[col.len() - 1]);
            }
            prop_assert!(spread[i] >= 0.0);
        }
    }

    #[test]
    fn spread_vanishes_only_for_identical_members(base in prop::collection::vec(-10.0f32..10.0, 1..6), copies in 1usize..6, bump in 0.01f32..1.0) {
        let same = vec![base.clone(); copies];
        let (_, spread, _) = ensemble_stats(&same, &[]).unwrap();
        prop_assert!(spread.iter().all(|s| s.abs() <= 1e-12));
        let mut other = same.clone();
        other.push(base.iter().map(|v| v + bump).collect());
        let (_, spread, _) = ensemble_stats(&other, &[]).unwrap();
        prop_assert!(spread.iter().all(|s| *s > 1e-12));
    }
}

#[test]
fn quantile_examples() {
    let (mean, spread, q) = ensemble_stats(&[vec![7.5]], &[0.1, 0.5, 0.9]).unwrap();
    assert_eq!((mean[0], spread[0]), (7.5, 0.0));
    assert!(q.iter().all(|l| l[0] == 7.5));
    let (_, _, q) = ensemble_stats(&[vec![3.0], vec![1.0], vec![2.0]], &[0.5]).unwrap();
    assert_eq!(q[0][0], 2.0);
}

struct Fixture {
    data: Dataset,
    family: ModelFamily,
    anchors: Vec<DayIndex>,
}

fn fixture(strong_noise: bool) -> Fixture {
    let grid = GridSpec::uniform(8, 16, 4).unwrap();
    let cat = VariableCatalog::desk();
    let states = synth_dataset(&grid, &cat, &SynthConfig { years: 4, seed: 6, ..SynthConfig::default() }).unwrap();
    let splits = Splits::by_years(1979, 4).unwrap();
    let data = Dataset::new(&states, &grid, &cat, splits).unwrap();
    let cfg = ModelConfig { dim: 8, depth: 2, heads: 2, mlp_ratio: 2, fusion_rank: 4, ..ModelConfig::desk() };
    let mut family = ModelFamily::new();
    for lead in [40u32, 45] {
        let mut m = Model::<f32>::new(&cfg, &grid, &cat, lead as u64).unwrap();
        if strong_noise {
            let mut p = m.params.clone();
            for blk in 0..cfg.depth {
                let id = p.id_of(&format!("blocks.{blk}.noise.log_gain")).unwrap();
                p.get_mut(id)[0] = 0.0;
            }
            m = m.with_params(p).unwrap();
        }
        family.insert(lead, m);
    }
    let anchors = data.anchors(splits.test, 45).into_iter().step_by(60).collect();
    Fixture { data, family, anchors }
}

#[test]
fn zero_scale_strategies_reproduce_the_control() {
    let f = fixture(false);
    let init = f.anchors[0];
    for kind in [PerturbKind::LayerNoise, PerturbKind::FixedLayerNoise, PerturbKind::IcPerturb] {
        let mut s = PerturbStrategy::new(kind, 0.0);
        s.ic_amplitude = 0.0;
        let e = run_ensemble(&f.family, &f.data, init, &s, 5, 40, &[40, 45], &[0.5]).unwrap();
        assert_eq!(e.days, (36..=45).collect::<Vec<u32>>());
        for day in &e.standardized {
            assert!(day.members.iter().all(|m| *m == day.members[0]), "{kind}");
            assert!(day.spread.iter().all(|s| *s == 0.0));
        }
    }
}

#[test]
fn ic_members_share_parameters_and_differ_at_input() {
    let s = PerturbStrategy::new(PerturbKind::IcPerturb, 1.0);
    for m in 0..4 {
        let (noise, perturb) = s.member(m, 10);
        assert_eq!(noise.mode, NoiseMode::Off);
        assert_eq!(perturb.is_some(), m > 0);
    }
    let f = fixture(false);
    let e = run_ensemble(&f.family, &f.data, f.anchors[0], &s, 4, 10, &[45], &[]).unwrap();
    let day = &e.standardized[4];
    assert!(day.members[1] != day.members[2] && day.members[0] != day.members[1]);
    let again = run_ensemble(&f.family, &f.data, f.anchors[0], &s, 4, 10, &[45], &[]).unwrap();
    assert_eq!(again.standardized[4].members, day.members);
    let shifted = run_ensemble(&f.family, &f.data, f.anchors[0], &s, 4, 11, &[45], &[]).unwrap();
    assert_eq!(shifted.standardized[4].members[1], day.members[2]);
}

#[test]
fn ic_member_mean_approaches_the_control() {
    let f = fixture(false);
    let mut s = PerturbStrategy::new(PerturbKind::IcPerturb, 0.0);
    s.ic_amplitude = 0.01;
    let init = f.anchors[0];
    let gap = |m: usize| {
        let e = run_ensemble(&f.family, &f.data, init, &s, m, 500, &[45], &[]).unwrap();
        let day = &e.standardized[4];
        let ctl = &day.members[0];
        (day.mean.iter().zip(ctl).map(|(a, &c)| (a - c as f64).powi(2)).sum::<f64>() / ctl.len() as f64).sqrt()
    };
    let gaps: Vec<f64> = [2, 8, 32].iter().map(|&m| gap(m)).collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn zero_sigma_sweep_matches_the_deterministic_forecast() {
    let f = fixture(true);
    let sigmas = [0.0, 1.0];
    let t = noise_scale_sweep(&f.family, &f.data, &f.anchors, &sigmas, 4, 3).unwrap();
    let cat = &f.data.catalog;
    let dynamic = cat.dynamic_channels();
    assert_eq!(t.summary.len(), sigmas.len() * 2);
    assert_eq!(t.rows.len(), sigmas.len() * 2 * dynamic.len());
    let grid = &f.data.grid;
    let cells = grid.cells();
    let weights: Vec<f64> = f.data.row_weights().iter().map(|&v| v as f64).collect();
    let names = cat.channel_names();
    for lead in [40u32, 45] {
        let off: Vec<_> = f
            .anchors
            .iter()
            .map(|&a| {
                forecast_range_with(&f.family, &f.data, a, &tqs_core::backbone::NoiseConfig::off(), None, &[40, 45]).unwrap()
            })
            .collect();
        for &ch in &dynamic {
            let i = off[0].days.iter().position(|&d| d == lead).unwrap();
            let pred: Vec<f64> =
                off.iter().flat_map(|r| r.frames[i][ch * cells..(ch + 1) * cells].iter().map(|&v| v as f64)).collect();
            let truth: Vec<f64> = f
                .anchors
                .iter()
                .flat_map(|&a| {
                    f.data.native_frame(a + lead as DayIndex).unwrap()[ch * cells..(ch + 1) * cells]
                        .iter()
                        .map(|&v| v as f64)
                        .collect::<Vec<_>>()
                })
                .collect();
            let expected = rmse(&pred, &truth, &weights, grid.h(), grid.w()).unwrap();
            let row = t.rows.iter().find(|r| r.sigma == 0.0 && r.lead == lead && r.variable == names[ch]).unwrap();
            assert!((row.rmse_ensemble_mean - expected).abs() <= 1e-12 * expected.max(1.0));
            let noisy = t.rows.iter().find(|r| r.sigma == 1.0 && r.lead == lead && r.variable == names[ch]).unwrap();
            assert_ne!(noisy.rmse_ensemble_mean, row.rmse_ensemble_mean);
        }
    }
    assert_eq!(t.argmin_per_lead().len(), 2);
}
