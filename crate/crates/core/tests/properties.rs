mod common;

use certfg::graph::{odometry_initialization, random_initialization};
use certfg::io::{generate_synthetic, parse_str, write_g2o, NoiseSpec, SyntheticConfig, SyntheticProblem, Topology};
use certfg::objective::{assemble_q, direct_objective};
use certfg::staircase::{run_staircase, StaircaseConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn problem(kind: u8, size: usize, seed: u64) -> SyntheticProblem {
    let (topology, chain_dim, landmarks, ranges) = match kind % 5 {
        0 => (Topology::Chain, 2, 0, 0),
        1 => (Topology::Chain, 3, 0, 0),
        2 => (Topology::Chain, 2, 3, 0),
        3 => (Topology::Chain, 3, 2, 3),
        _ => (Topology::Grid2d, 2, 0, 2),
    };
    generate_synthetic(&SyntheticConfig {
        topology,
        chain_dim,
        size: if topology == Topology::Grid2d { 2 + size % 3 } else { size },
        noise: NoiseSpec {
            translation_sigma: 0.2,
            rotation_kappa: 20.0,
            range_sigma: 0.1,
        },
        loop_closure_probability: 0.3,
        landmarks,
        observations_per_landmark: 2,
        ranges,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assembled_q_matches_factor_definitions(kind in 0u8..5, size in 3usize..9, seed in 0u64..1000) {
        let graph = problem(kind, size, seed).graph;
        let q = assemble_q(&graph).matrix().to_dense();
        let oracle = common::dense_q(&graph);
        prop_assert!((&q - &oracle).amax() <= 1e-9 * oracle.amax().max(1.0));
        prop_assert!((&q - q.transpose()).amax() == 0.0);
    }

    #[test]
    fn trace_form_equals_sum_of_factor_losses(
        kind in 0u8..5, size in 3usize..9, seed in 0u64..1000, extra in 0usize..3,
    ) {
        let graph = problem(kind, size, seed).graph;
        let p = graph.d() + extra;
        let y = random_initialization(&graph, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let rows = common::aggregate(&graph, &y);
        let q = common::dense_q(&graph);
        let trace = (rows.transpose() * q * &rows).trace();
        let direct = direct_objective(&graph, &y);
        let assembled = assemble_q(&graph).evaluate(&y).unwrap();
        prop_assert!((trace - direct).abs() <= 1e-9 * direct.max(1.0));
        prop_assert!((assembled - direct).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn g2o_round_trip_preserves_the_data_matrix(kind in 0u8..5, size in 3usize..9, seed in 0u64..1000) {
        let prob = problem(kind, size, seed);
        let mut buf = Vec::new();
        write_g2o(&prob.graph, Some(&prob.ground_truth), &mut buf).unwrap();
        let back = parse_str(std::str::from_utf8(&buf).unwrap()).unwrap().graph;
        prop_assert_eq!(back.num_poses(), prob.graph.num_poses());
        prop_assert_eq!(back.num_landmarks(), prob.graph.num_landmarks());
        prop_assert_eq!(back.factors().len(), prob.graph.factors().len());
        let a = common::dense_q(&prob.graph);
        let b = common::dense_q(&back);
        prop_assert!((&a - &b).amax() <= 1e-9 * a.amax().max(1.0));
    }
}

#[test]
fn certified_estimate_is_no_worse_than_ground_truth() {
    for seed in 0..5 {
        let prob = generate_synthetic(&SyntheticConfig {
            size: 10,
            noise: NoiseSpec {
                translation_sigma: 0.1,
                rotation_kappa: 0.0,
                range_sigma: 0.0,
            }
            .with_angular_sigma(0.05),
            loop_closure_probability: 0.3,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let graph = &prob.graph;
        let init = odometry_initialization(graph, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let res = run_staircase(graph, &StaircaseConfig::for_class(graph.problem_class()), init).unwrap();
        assert!(res.report.certified, "seed {seed}: {:?}", res.report.status);
        let truth = direct_objective(graph, &prob.ground_truth);
        let sdp = res.report.sdp_value.unwrap();
        assert!(sdp <= truth * (1.0 + 1e-9), "seed {seed}: {sdp} > {truth}");
        let best = res.report.refined_value.or(res.report.rounded_value).unwrap();
        assert!(best >= sdp * (1.0 - 1e-6));
    }
}
