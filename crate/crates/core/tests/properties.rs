use blowup_wave::analysis::{error_report, relative_errors, ExactSolutionEx1};
use blowup_wave::manifest::{RunManifest, Settings};
use blowup_wave::output::fmt_f64;
use blowup_wave::presets::{build_problem, Preset, EX1_D, EX1_T};
use blowup_wave::rescale::{block_ranges, run_global, ScaleFactor};
use blowup_wave::solver::{step, FieldSlice, GridSpec, Nonlinearity, Topology};
use proptest::prelude::*;

proptest! {
    #[test]
    fn float_text_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn scale_factor_text_round_trips(m in 1u32..1000) {
        let s = ScaleFactor::new(m).unwrap();
        prop_assert_eq!(s.to_string().parse::<ScaleFactor>().unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(serde_json::from_str::<ScaleFactor>(&json).unwrap(), s);
    }

    #[test]
    fn blocks_tile_the_grid(j in 2usize..24, periodic in any::<bool>()) {
        let topo = if periodic { Topology::Periodic } else { Topology::Dirichlet };
        let g = GridSpec::unit(j * j, topo).unwrap();
        let r = block_ranges(&g, j).unwrap();
        prop_assert_eq!(r.len(), j);
        prop_assert_eq!(r[0].0, 0);
        prop_assert_eq!(r[j - 1].1, g.node_count() - 1);
        for w in r.windows(2) {
            prop_assert_eq!(w[1].0, w[0].1 + 1);
        }
        prop_assert!(block_ranges(&g, j + 1).is_err());
    }

    #[test]
    fn linear_waves_travel_exactly(
        n in 8usize..80,
        amps in proptest::collection::vec(-2.0f64..2.0, 3),
        steps in 1usize..120,
    ) {
        let g = GridSpec::unit(n, Topology::Periodic).unwrap();
        let h = g.dt();
        let wave = |x: f64| {
            amps.iter().enumerate().map(|(k, a)| a * (2.0 * std::f64::consts::PI * (k + 1) as f64 * x).sin()).sum::<f64>()
        };
        let exact = |m: usize| g.sample(|x| wave(x + m as f64 * h));
        let nl = Nonlinearity::zero();
        let mut prev = FieldSlice::new(exact(0), 0, 0.0);
        let mut curr = FieldSlice::new(exact(1), 1, h);
        for m in 2..steps + 2 {
            let next = step(&g, &nl, &prev, &curr, None, 1e12).unwrap();
            prev = curr;
            curr = next;
            let want = exact(m);
            let scale = want.iter().fold(1e-300_f64, |a, v| a.max(v.abs()));
            for (a, b) in curr.values.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-11 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn settings_accept_every_key_spelling(k in 1usize..60, pad in 0usize..20) {
        let text = format!("preset=example2\nk_max = {k}\n--pad-cells = {pad}\n");
        let m = RunManifest::from_settings(&Settings::parse(&text).unwrap()).unwrap();
        prop_assert_eq!(m.cfg.k_max, k);
        prop_assert_eq!(m.cfg.pad_cells, pad);
    }
}

#[test]
fn exact_samples_have_zero_error() {
    let s = ExactSolutionEx1::new(2.0, EX1_T, EX1_D).unwrap();
    let g = GridSpec::unit(64, Topology::Dirichlet).unwrap();
    let u = g.sample(|x| s.eval(x, 0.3).unwrap());
    assert_eq!(relative_errors(&u, &u, g.spacing()), (0.0, 0.0));

    // no steps taken: the assembled solution is the sampled initial data
    let setup = build_problem(Preset::Example1, 2.0, 64, (EX1_T, EX1_D), None).unwrap();
    let mut cfg = Preset::Example1.default_config(2.0);
    cfg.record_history = true;
    let (h, _) = run_global(&setup.problem, &cfg).unwrap();
    let r = error_report(&h, &s, 0.0).unwrap();
    assert_eq!((r.rel_l2, r.rel_linf), (0.0, 0.0));
}

#[test]
fn example1_blocks_recover_the_line() {
    let setup = build_problem(Preset::Example1, 3.0, 64, (EX1_T, EX1_D), None).unwrap();
    let cfg = Preset::Example1.default_config(3.0);
    let res = blowup_wave::rescale::run_blocks(&setup.problem, &cfg, 8).unwrap();
    let ests: Vec<_> = res.iter().map(|r| r.1).collect();
    let curve = blowup_wave::analysis::blowup_curve(&ests, &setup.problem.grid, 8).unwrap();
    for p in &curve[1..] {
        assert!((p.t_j - (EX1_T + EX1_D * p.x_mid)).abs() < 0.05, "{p:?}");
    }
}
