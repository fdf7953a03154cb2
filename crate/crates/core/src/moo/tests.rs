use proptest::prelude::*;

use super::*;

/// Peels off the points no remaining point dominates, one front at a time.
fn brute_fronts(objs: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..objs.len()).collect();
    let mut fronts = vec![];
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&p| !left.iter().any(|&q| dominates(&objs[q], &objs[p])))
            .collect();
        left.retain(|p| !front.contains(p));
        fronts.push(front);
    }
    fronts
}

/// Unit cells of the integer grid covered by at least one dominated box.
fn grid_volume(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let dims: Vec<usize> = reference.iter().map(|r| *r as usize).collect();
    let total: usize = dims.iter().product();
    let mut covered = 0;
    for cell in 0..total {
        let mut rest = cell;
        let corner: Vec<f64> = dims
            .iter()
            .map(|d| {
                let c = rest % d;
                rest /= d;
                c as f64
            })
            .collect();
        if points
            .iter()
            .any(|p| p.iter().zip(&corner).all(|(x, c)| x <= c))
        {
            covered += 1;
        }
    }
    covered as f64
}

#[test]
fn single_individual_is_one_front() {
    assert_eq!(
        fast_nondominated_sort(&[vec![1.0, 2.0, 3.0]]),
        vec![vec![0]]
    );
}

#[test]
fn dominating_pair_gives_two_fronts() {
    let objs = vec![vec![2.0, 2.0, 2.0], vec![1.0, 1.0, 1.0]];
    assert_eq!(fast_nondominated_sort(&objs), vec![vec![1], vec![0]]);
}

#[test]
fn crowding_boundaries_and_spacing() {
    let two = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    assert_eq!(crowding_distance(&two, &[0, 1]), vec![None, None]);
    let line = vec![vec![0.0, 5.0], vec![1.0, 5.0], vec![2.0, 5.0]];
    assert_eq!(
        crowding_distance(&line, &[0, 1, 2]),
        vec![None, Some(1.0), None]
    );
    let same = vec![vec![3.0, 3.0]; 4];
    let d = crowding_distance(&same, &[0, 1, 2, 3]);
    assert_eq!(&d[1..3], &[Some(0.0), Some(0.0)]);
}

#[test]
fn hypervolume_of_known_sets() {
    assert_eq!(hypervolume(&[vec![1.0, 1.0]], &[3.0, 3.0]), 4.0);
    assert_eq!(
        hypervolume(&[vec![1.0, 2.0], vec![2.0, 1.0]], &[3.0, 3.0]),
        3.0
    );
    assert_eq!(hypervolume(&[vec![0.0, 0.0, 0.0]], &[2.0, 3.0, 4.0]), 24.0);
    assert_eq!(hypervolume(&[vec![5.0, 0.0]], &[3.0, 3.0]), 0.0);
}

#[test]
fn genome_hex_packs_msb_first() {
    assert_eq!(genome_hex(&[true, false, true, true, false, true]), "b4");
    assert_eq!(genome_hex(&[]), "");
}

#[test]
fn invalid_parameters_are_rejected() {
    for p in [
        GaParams {
            population: 5,
            ..GaParams::default()
        },
        GaParams {
            population: 2,
            ..GaParams::default()
        },
        GaParams {
            crossover_prob: 1.5,
            ..GaParams::default()
        },
        GaParams {
            mutation_prob: Some(-0.1),
            ..GaParams::default()
        },
    ] {
        assert!(matches!(p.validate(), Err(GaError::InvalidParams(_))));
    }
}

/// Three conflicting objectives over bit counts in thirds of the genome.
fn toy(genomes: &[Vec<bool>]) -> Result<Vec<Vec<f64>>, crate::scheduler::EvalError> {
    Ok(genomes
        .iter()
        .map(|g| {
            let n = g.len();
            let ones = |r: std::ops::Range<usize>| g[r].iter().filter(|b| **b).count() as f64;
            let (a, b, c) = (ones(0..n / 3), ones(n / 3..2 * n / 3), ones(2 * n / 3..n));
            vec![
                1.0 + a + (n as f64 / 3.0 - b),
                1.0 + b + c * c,
                1.0 + (n as f64 - a - c),
            ]
        })
        .collect())
}

#[test]
fn zero_generations_archive_is_the_seeded_front() {
    let params = GaParams {
        population: 4,
        generations: 0,
        ..GaParams::default()
    };
    let seeds = vec![vec![true; 9], vec![false; 9]];
    let out = nsga2(9, &seeds, &params, toy).unwrap();
    let pop = &out.snapshots[0].population;
    let objs: Vec<Vec<f64>> = pop.iter().map(|i| i.objectives.clone()).collect();
    let mut front: Vec<Vec<f64>> = brute_fronts(&objs)[0]
        .iter()
        .map(|i| objs[*i].clone())
        .collect();
    front.sort_by(|a, b| a.partial_cmp(b).unwrap());
    front.dedup();
    let archive: Vec<Vec<f64>> = out.archive.iter().map(|i| i.objectives.clone()).collect();
    assert_eq!(archive, front);
    assert_eq!(out.evaluations, 4);
}

#[test]
fn fixed_seed_is_reproducible() {
    let params = GaParams {
        population: 8,
        generations: 3,
        seed: 11,
        ..GaParams::default()
    };
    let a = nsga2(12, &[], &params, toy).unwrap();
    let b = nsga2(12, &[], &params, toy).unwrap();
    assert_eq!(a, b);
    let c = nsga2(12, &[], &GaParams { seed: 12, ..params }, toy).unwrap();
    assert_ne!(a.snapshots, c.snapshots);
}

#[test]
fn evaluation_errors_keep_finished_snapshots() {
    let mut calls = 0;
    let params = GaParams {
        population: 4,
        generations: 3,
        ..GaParams::default()
    };
    let r = nsga2(6, &[], &params, |g| {
        calls += 1;
        if calls == 3 {
            Err(crate::scheduler::EvalError::Schedule(
                crate::scheduler::ScheduleError::InvalidMapping("x".into()),
            ))
        } else {
            toy(g)
        }
    });
    match r {
        Err(GaError::Evaluation { snapshots, .. }) => assert_eq!(snapshots.len(), 2),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sort_matches_brute_force(objs in prop::collection::vec(prop::collection::vec(0u8..6, 3), 1..=64)) {
        let objs: Vec<Vec<f64>> = objs.into_iter().map(|o| o.into_iter().map(f64::from).collect()).collect();
        prop_assert_eq!(fast_nondominated_sort(&objs), brute_fronts(&objs));
    }

    #[test]
    fn hypervolume_matches_grid_count(pts in prop::collection::vec(prop::collection::vec(0u8..6, 3), 0..8)) {
        let pts: Vec<Vec<f64>> = pts.into_iter().map(|o| o.into_iter().map(f64::from).collect()).collect();
        let r = [6.0, 6.0, 6.0];
        prop_assert_eq!(hypervolume(&pts, &r), grid_volume(&pts, &r));
    }

    #[test]
    fn runs_keep_elitism_and_a_clean_archive(seed in any::<u64>(), len in 3usize..20) {
        let params = GaParams { population: 12, generations: 4, seed, ..GaParams::default() };
        let out = nsga2(len, &[vec![true; len], vec![false; len]], &params, toy).unwrap();
        for a in &out.archive {
            for b in &out.archive {
                prop_assert!(!dominates(&a.objectives, &b.objectives));
            }
        }
        for w in out.snapshots.windows(2) {
            prop_assert!(w[1].hypervolume >= w[0].hypervolume);
            for k in 0..3 {
                let best = |s: &Snapshot| s.population.iter().map(|i| i.objectives[k]).fold(f64::INFINITY, f64::min);
                prop_assert!(best(&w[1]) <= best(&w[0]));
            }
        }
        prop_assert_eq!(out.snapshots.len(), 5);
        prop_assert!(out.snapshots.iter().all(|s| s.population.len() == 12));
    }
}
