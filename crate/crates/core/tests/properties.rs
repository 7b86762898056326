use modcausal::adaptation::{adaptation_weights, predict_intervention_target, ScoreVector};
use modcausal::graph::{generate_er, shd, shd_dag, BinaryMatrix, Dag};
use modcausal::metrics::aggregate;
use modcausal::nn::{log_softmax, MaskedMlp, ModelStack, Scratch};
use modcausal::scm::{read_csv, write_csv, GroundTruthScm, Intervention, InterventionSpec};
use modcausal::seed;
use modcausal::training::{extract_graph, SoftAdjacency};
use proptest::prelude::*;
use rand::Rng;

fn er_dag(n: usize, d: f64, s: u64) -> Dag {
    generate_er(n, d, &mut seed::stream(s, &[])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn er_graphs_are_dags(n in 2usize..25, d in 0.5f64..3.0, s in any::<u64>()) {
        let g = er_dag(n, d, s);
        let order = g.topological_order().unwrap();
        let pos: Vec<usize> = {
            let mut p = vec![0; n];
            for (r, &v) in order.iter().enumerate() { p[v] = r; }
            p
        };
        for (p, c) in g.edges() {
            prop_assert!(pos[p] < pos[c]);
        }
        prop_assert_eq!(Dag::from_edge_list(&g.to_edge_list()).unwrap(), g.clone());
        prop_assert_eq!(shd_dag(&g, &g).unwrap(), 0);
    }

    #[test]
    fn shd_is_a_metric(n in 2usize..10, a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let (x, y, z) = (er_dag(n, 1.0, a), er_dag(n, 1.5, b), er_dag(n, 2.0, c));
        let (xy, yz, xz) = (shd_dag(&x, &y).unwrap(), shd_dag(&y, &z).unwrap(), shd_dag(&x, &z).unwrap());
        prop_assert_eq!(xy, shd_dag(&y, &x).unwrap());
        prop_assert!(xz <= xy + yz);
        prop_assert!(xy <= x.edge_count() + y.edge_count());
        prop_assert_eq!(shd(&x.adjacency().transpose(), x.adjacency()).unwrap(), x.edge_count());
    }

    #[test]
    fn module_ignores_masked_out_inputs(
        n in 2usize..7, k in 2usize..6, s in any::<u64>(), mask_bits in any::<u16>(),
    ) {
        let mut rng = seed::stream(s, &[]);
        let mut m = MaskedMlp::glorot(n, k, 8, &mut rng);
        let mask: Vec<bool> = (0..n).map(|j| mask_bits >> j & 1 == 1).collect();
        m.set_mask(&mask);
        let x: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut y = x.clone();
        for j in 0..n {
            if !mask[j] { y[j] = rng.gen_range(0..k); }
        }
        prop_assert_eq!(m.forward(&x).unwrap(), m.forward(&y).unwrap());
        let total: f64 = m.forward(&x).unwrap().iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_normalizes(v in prop::collection::vec(-500.0f64..500.0, 2..20)) {
        let mut w = v.clone();
        log_softmax(&mut w);
        let total: f64 = w.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in v.windows(2).zip(w.windows(2)) {
            prop_assert!(((a[1] - a[0]) - (b[1] - b[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn adaptation_weights_are_a_distribution(
        scores in prop::collection::vec(0.0f64..20.0, 1..30), t in 0.0f64..50.0,
    ) {
        let s = ScoreVector(scores.clone());
        let w = adaptation_weights(&s, t);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let top = predict_intervention_target(&s);
        prop_assert!(w.iter().all(|&x| x <= w[top]));
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] { prop_assert!(w[i] >= w[j]); }
            }
        }
    }

    #[test]
    fn extracted_graphs_are_acyclic(n in 2usize..8, s in any::<u64>(), thr in 0.05f64..0.95) {
        let mut g = SoftAdjacency::uniform(n, 0.25).unwrap();
        let mut rng = seed::stream(s, &[]);
        for x in g.u.iter_mut().chain(g.v.iter_mut()) {
            *x = rng.gen_range(-4.0..6.0);
        }
        let e = extract_graph(&g, thr);
        for (p, c) in e.dag.edges() {
            prop_assert!(g.prob(c, p) > thr);
        }
        prop_assert!(e.dag.topological_order().is_ok());
    }

    #[test]
    fn scm_conditionals_depend_on_parents_only(n in 2usize..6, k in 2usize..5, s in any::<u64>()) {
        let dag = er_dag(n, 1.5, s);
        let scm = GroundTruthScm::init(dag.clone(), k, &mut seed::stream(s, &[1])).unwrap();
        let mut rng = seed::stream(s, &[2]);
        let x: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        for i in 0..n {
            let pa = dag.parents(i).unwrap();
            let mut y = x.clone();
            for (j, v) in y.iter_mut().enumerate() {
                if !pa.contains(&j) { *v = rng.gen_range(0..k); }
            }
            let (p, q) = (scm.cpd(i, &x).unwrap(), scm.cpd(i, &y).unwrap());
            prop_assert_eq!(&p, &q);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interventions_pin_the_target_and_csv_round_trips(
        n in 2usize..6, k in 2usize..5, s in any::<u64>(), t in 0usize..6, v in 0usize..5,
    ) {
        let (t, v) = (t % n, v % k);
        let scm = GroundTruthScm::init(er_dag(n, 1.0, s), k, &mut seed::stream(s, &[1])).unwrap();
        let mut rng = seed::stream(s, &[3]);
        let d = scm
            .sample_interventional(InterventionSpec::Fixed(Intervention { target: t, value: v }), 40, &mut rng)
            .unwrap();
        prop_assert!(d.rows().all(|x| x[t] == v));
        let obs = scm.sample_observational(7, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_csv(&[obs.clone(), d.clone()], &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice(), k).unwrap(), vec![obs, d]);
        let bz = scm.bound_zero_shot(&scm.sample_interventional(
            InterventionSpec::Uniform { target: t }, 30, &mut rng).unwrap()).unwrap();
        let ba = scm.bound_adaptation(&scm.sample_interventional(
            InterventionSpec::Uniform { target: t }, 30, &mut seed::stream(s, &[3])).unwrap()).unwrap();
        prop_assert!(bz.iter().chain(&ba).all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn aggregate_mean_is_mean_of_nodes(n in 2usize..8, s in any::<u64>(), m in 1usize..5) {
        let dag = er_dag(n, 1.0, s);
        let scm = GroundTruthScm::init(dag.clone(), 3, &mut seed::stream(s, &[1])).unwrap();
        let tests = scm.make_test_suite(m, 5, Default::default(), &mut seed::stream(s, &[2])).unwrap();
        let mut rng = seed::stream(s, &[4]);
        let nll: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        let rec = aggregate(&dag, &tests, &nll).unwrap();
        let direct = nll.iter().flatten().sum::<f64>() / (n * m) as f64;
        prop_assert!((rec.nll_mean - direct).abs() < 1e-12);
        prop_assert!((rec.per_node.iter().sum::<f64>() / n as f64 - direct).abs() < 1e-12);
    }

    #[test]
    fn stack_masks_round_trip(n in 1usize..8, s in any::<u64>()) {
        let mut rng = seed::stream(s, &[]);
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|i| (0..n).map(|j| u8::from(i != j && rng.gen_bool(0.5))).collect())
            .collect();
        let mask = BinaryMatrix::from_rows(&rows).unwrap();
        let mut stack = ModelStack::new(n, 2, 4, s).unwrap();
        stack.set_mask(&mask).unwrap();
        prop_assert_eq!(stack.mask_matrix(), mask);
        let mut out = vec![0.0; n];
        let x = vec![1usize; n];
        stack.nll_vector(&x, &mut Scratch::for_mlp(&stack.mlps[0]), &mut out);
        prop_assert!(out.iter().all(|v| v.is_finite() && *v > 0.0));
    }
}
