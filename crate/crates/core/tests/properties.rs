use ndarray::Array2;
use proptest::prelude::*;
use tpa_core::dataset::{
    fit_scaler, sample_initial_conditions, split_dataset, winsorize, PLDataset, ParamRanges, ScalerKind,
};
use tpa_core::field::{gaussian_spectrum, FieldSynthesizer, FrequencyGrid, PulseSpec};
use tpa_core::pl::{beta_grid, pl_value, PLScaling};
use tpa_core::simplex::{nelder_mead, FitSettings, Histogram};

fn small_synth() -> FieldSynthesizer {
    let s = PulseSpec::default();
    FieldSynthesizer::new(&s, FrequencyGrid::for_pulse(&s, 1 << 14, 0.05).unwrap()).unwrap()
}

fn scaler_kind() -> impl Strategy<Value = ScalerKind> {
    prop_oneof![Just(ScalerKind::Standard), Just(ScalerKind::Robust), Just(ScalerKind::RobustWinsor)]
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-1e3f64..1e3, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chirp_sign_mirrors_time(beta in -3000.0f64..3000.0) {
        let synth = small_synth();
        let plus = synth.synthesize(beta, 0.0).unwrap();
        let minus = synth.synthesize(-beta, 0.0).unwrap();
        let n = plus.len();
        for j in (1..n).step_by(97) {
            prop_assert!((minus.samples[j] - plus.samples[n - j].conj()).norm() < 1e-9);
        }
    }

    #[test]
    fn interpolation_hits_nodes(beta in -2000.0f64..2000.0, k in 0usize..16_000) {
        let f = small_synth().synthesize(beta, 0.0).unwrap();
        let k = k.min(f.len() - 1);
        prop_assert_eq!(f.at(f.time(k)), f.samples[k]);
    }

    #[test]
    fn spectrum_is_positive_and_bounded(fwhm in 100.0f64..800.0) {
        let s = PulseSpec { fwhm_wavenumber: fwhm, ..PulseSpec::default() };
        let g = FrequencyGrid::for_pulse(&s, 1 << 12, 0.05).unwrap();
        prop_assert!(gaussian_spectrum(&g, &s).iter().all(|&a| (0.0..=1.0).contains(&a)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pl_map_inverts(rho in 0.0f64..1.0, a in 1.0f64..2000.0, b in 0.0f64..200.0) {
        let s = PLScaling { a, b };
        let pl = pl_value(rho, &s).unwrap();
        prop_assert!((s.invert(pl) - rho).abs() < 1e-12);
        prop_assert!(pl_value(rho + 1e-3, &s).map_or(true, |hi| hi > pl));
    }

    #[test]
    fn beta_grid_shape(n in 2usize..200, half in 1.0f64..1e4) {
        let g = beta_grid(n, -half, half).unwrap();
        prop_assert_eq!(g.len(), n);
        prop_assert_eq!((g[0], g[n - 1]), (-half, half));
        prop_assert!(g.windows(2).all(|w| w[1] > w[0]));
        for k in 0..n {
            prop_assert!((g[k] + g[n - 1 - k]).abs() <= 1e-9 * half);
        }
        if n % 2 == 1 {
            prop_assert_eq!(g[n / 2], 0.0);
        }
    }

    #[test]
    fn draws_stay_in_range_and_repeat(n in 1usize..50, seed in any::<u64>(), e2 in any::<bool>()) {
        let r = ParamRanges::default();
        let a = sample_initial_conditions(n, &r, e2, seed).unwrap();
        prop_assert_eq!(&a, &sample_initial_conditions(n, &r, e2, seed).unwrap());
        for p in &a {
            prop_assert!(r.omega_2p.contains(p.omega_2p) && r.gamma2.contains(p.gamma2) && r.gamma12.contains(p.gamma12));
            prop_assert_eq!(p.e2.is_some(), e2);
            prop_assert!(p.e2.map_or(true, |v| r.e2.contains(v)));
        }
    }

    #[test]
    fn split_partitions_rows(n in 5usize..80, seed in any::<u64>()) {
        let f = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let t = Array2::from_shape_fn((n, 3), |(i, _)| i as f64);
        let ds = PLDataset::new(f, t, 0).unwrap();
        let (a, b, c) = split_dataset(&ds, seed).unwrap();
        prop_assert_eq!((a.len(), b.len(), a.len() + b.len() + c.len()), (3 * n / 5, n / 5, n));
        let mut ids: Vec<i64> = [&a, &b, &c].iter().flat_map(|d| d.targets.column(0).to_vec()).map(|v| v as i64).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..n as i64).collect::<Vec<_>>());
    }

    #[test]
    fn scalers_round_trip(data in matrix(12, 3), kind in scaler_kind()) {
        if let Ok(s) = fit_scaler(kind, data.view()) {
            let back = s.inverse_transform(s.transform(data.view()).unwrap().view()).unwrap();
            let reference = if kind == ScalerKind::RobustWinsor { winsorize(data.view(), 1.0, 99.0).unwrap() } else { data.clone() };
            for (x, y) in back.iter().zip(reference.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn winsorized_values_stay_inside_the_data_range(data in matrix(20, 2)) {
        let w = winsorize(data.view(), 1.0, 99.0).unwrap();
        for j in 0..2 {
            let col = data.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w.column(j).iter().all(|&v| (lo..=hi).contains(&v)));
        }
    }

    #[test]
    fn histogram_counts_everything(values in proptest::collection::vec(-50.0f64..50.0, 1..200), bins in 1usize..30) {
        let h = Histogram::new(&values, bins);
        prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
        prop_assert_eq!(h.edges.len(), h.counts.len() + 1);
    }

    #[test]
    fn simplex_best_never_rises(cx in -3.0f64..3.0, cy in -3.0f64..3.0, x0 in -3.0f64..3.0, y0 in -3.0f64..3.0) {
        let f = |x: &[f64]| (x[0] - cx).powi(2) + 3.0 * (x[1] - cy).powi(2) + (x[0] - cx) * (x[1] - cy);
        let s = FitSettings { initial_step: 0.3, ftol: 1e-10, maxiter: 300, ..FitSettings::default() };
        let r = nelder_mead(f, &[x0, y0], &s).unwrap();
        prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(r.loss_star >= 0.0);
        prop_assert_eq!(*r.history.last().unwrap(), r.loss_star);
    }
}
