use loadsim::binpack::{brute_force_pack, lpt_identical_bound, lpt_pack, PackingInstance};
use loadsim::cli::parse_scenario;
use loadsim::metrics_report::{aggregate, read_csv, write_csv, CsvRow, Replicate};
use loadsim::platform::{Link, PlatformGraph};
use loadsim::workload::{generate_qtm_workload, QtmParams};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = PackingInstance> {
    (
        prop::collection::vec(1u32..=500, 1..=9),
        prop::collection::vec(prop::sample::select(vec![0.5, 1.0, 1.5, 2.0, 3.0]), 1..=3),
    )
        .prop_map(|(w, s)| {
            PackingInstance::new(w.into_iter().map(|x| x as f64 / 10.0).collect(), s)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lpt_never_beats_the_optimum(inst in instance()) {
        let lpt = lpt_pack(&inst).unwrap();
        let opt = brute_force_pack(&inst).unwrap();
        prop_assert!(lpt.predicted_makespan >= opt.predicted_makespan);
        prop_assert_eq!(inst.makespan_of(&lpt.bins), lpt.predicted_makespan);
        prop_assert_eq!(inst.makespan_of(&opt.bins), opt.predicted_makespan);
    }

    #[test]
    fn lpt_respects_graham_on_identical_bins(w in prop::collection::vec(1u32..=100, 1..=10), m in 1usize..=4) {
        let inst = PackingInstance::new(w.into_iter().map(f64::from).collect(), vec![1.0; m]);
        let lpt = lpt_pack(&inst).unwrap().predicted_makespan;
        let opt = brute_force_pack(&inst).unwrap().predicted_makespan;
        prop_assert!(lpt <= lpt_identical_bound(m) * opt * (1.0 + 1e-12), "{} vs {}", lpt, opt);
    }

    #[test]
    fn scaling_weights_by_a_power_of_two_scales_the_makespan(inst in instance(), k in 0i32..4) {
        let f = 2f64.powi(k);
        let scaled = PackingInstance::new(inst.item_weights.iter().map(|w| w * f).collect(), inst.bin_speeds.clone());
        let a = lpt_pack(&inst).unwrap();
        let b = lpt_pack(&scaled).unwrap();
        prop_assert_eq!(&a.bins, &b.bins);
        prop_assert_eq!(a.predicted_makespan * f, b.predicted_makespan);
        prop_assert_eq!(
            brute_force_pack(&inst).unwrap().predicted_makespan * f,
            brute_force_pack(&scaled).unwrap().predicted_makespan
        );
    }

    #[test]
    fn message_delay_is_symmetric(
        m in 2usize..7,
        extra in prop::collection::vec((0usize..7, 0usize..7, 1u32..50, 1u32..50), 0..6),
        size in 0u64..100_000,
    ) {
        // a random spanning chain plus extra links with uneven constants
        let mut links: Vec<Link> = (1..m).map(|i| Link::new(i - 1, i, 1e-4 * i as f64, 1e-8 * (m - i) as f64)).collect();
        for (a, b, x, y) in extra {
            if a < m && b < m && a != b {
                links.push(Link::new(a, b, 1e-5 * x as f64, 1e-9 * y as f64));
            }
        }
        let g = PlatformGraph::explicit(&vec![1.0; m], links).unwrap();
        for a in 0..m {
            prop_assert_eq!(g.message_delay(a, a, size).unwrap(), 0.0);
            for b in 0..m {
                prop_assert_eq!(g.message_delay(a, b, size).unwrap(), g.message_delay(b, a, size).unwrap());
            }
        }
    }

    #[test]
    fn qtm_costs_are_seeded_and_bounded(seed in any::<u64>(), nonu in 0.0f64..0.9, step in 0usize..50) {
        let params = QtmParams { nonuniformity: nonu, ..QtmParams::default() };
        let a = generate_qtm_workload(60, 50, &params, seed).unwrap();
        let b = generate_qtm_workload(60, 50, &params, seed).unwrap();
        for l in 0..a.loops.len() {
            let costs = a.loop_costs(step, l);
            prop_assert_eq!(&costs, &b.loop_costs(step, l));
            for c in costs {
                if l < 3 {
                    let base = params.heavy_loop_base;
                    prop_assert!(c >= base * (1.0 - nonu) * (1.0 - 1e-12) && c <= base * (1.0 + nonu) * (1.0 + 1e-12));
                } else {
                    prop_assert_eq!(c, params.light_loop_base);
                }
            }
        }
    }

    #[test]
    fn aggregate_ignores_replicate_order(
        cps in prop::collection::vec(1.0f64..1e4, 1..8),
        shuffle in any::<u64>(),
    ) {
        let reps: Vec<Replicate> = cps
            .iter()
            .enumerate()
            .map(|(i, &c)| Replicate {
                policy: "af".into(),
                m: 4,
                seed: 100 + i as u64,
                t_p: c / 4.0,
                c_p: c,
                max_inbound: (c as u64) % 97,
                idle_fraction: (c / 1e4).min(1.0),
            })
            .collect();
        let mut shuffled = reps.clone();
        let len = shuffled.len();
        for i in 0..len {
            let j = (shuffle.rotate_left(i as u32) as usize) % len;
            shuffled.swap(i, j);
        }
        let a = aggregate(&reps).unwrap();
        let b = aggregate(&shuffled).unwrap();
        prop_assert_eq!(&a, &b);
        let lo = cps.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a.mean_c_p >= lo && a.mean_c_p <= hi);
    }

    #[test]
    fn csv_round_trip_is_lossless(cps in prop::collection::vec(prop::num::f64::POSITIVE | prop::num::f64::SUBNORMAL, 1..5)) {
        let reps: Vec<Replicate> = cps
            .iter()
            .enumerate()
            .map(|(i, &c)| Replicate {
                policy: "fixed:c=3".into(),
                m: 8,
                seed: i as u64,
                t_p: c / 8.0,
                c_p: c,
                max_inbound: i as u64,
                idle_fraction: 0.5,
            })
            .collect();
        let result = aggregate(&reps).unwrap();
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&result), &mut buf).unwrap();
        let rows = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(rows, vec![CsvRow::from(&result)]);
    }

    #[test]
    fn explain_round_trips(
        particles in 1usize..5000,
        steps in 1usize..500,
        nonu in 0.0f64..0.99,
        overhead in 0.0f64..0.01,
        rate in 0.01f64..5.0,
        mean in 0.001f64..1.0,
        seed in any::<u64>(),
        reps in 1usize..9,
        period in 1usize..20,
        speeds in prop::sample::select(vec!["heterogeneous", "homogeneous:1.5", "1,2.4,0.8,1.4,1,1,1,1"]),
        policies in prop::sample::select(vec!["af", "static,fac", "fixed:c=7,wf,awf,multiagent"]),
    ) {
        let text = format!(
            "workload = qtm:n={particles},steps={steps}\nm = 2,8\npolicies = {policies}\n\
             [workload]\nnonuniformity = {nonu}\n\
             [platform]\nspeeds = {speeds}\noverhead = {overhead}\nperturbation = busy:rate={rate},mean={mean}\n\
             [experiment]\nseed = {seed}\nreplicates = {reps}\n\
             [multiagent]\nresample_period = {period}\nfit_method = poly:2\n"
        );
        let sc = parse_scenario(&text).unwrap();
        let explained = sc.explain();
        let again = parse_scenario(&explained).unwrap();
        prop_assert_eq!(&again, &sc);
        prop_assert_eq!(again.explain(), explained);
    }
}
