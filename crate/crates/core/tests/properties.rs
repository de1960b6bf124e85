mod common;

use contact_intensity::grid::{rotate_from_diff, rotate_to_diff, AgeGrid, Bracket, CoarseBracketing};
use contact_intensity::kernels::{
    approx_l_factor, build_basis, field_eval, kernel_eval, KernelFamily, KernelHyperparams,
};
use contact_intensity::model::{nb_cell_loglik, ModelConfig, Parameterization, RateConsistencyModel};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{fd_grad, max_rel_err, toy_table};

const FAMILIES: [KernelFamily; 3] = [KernelFamily::SquaredExponential, KernelFamily::Matern32, KernelFamily::Matern52];

fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

fn points(n: usize) -> Vec<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    (0..n).map(|i| i as f64 - half).collect()
}

fn hp(s: f64, l: f64) -> KernelHyperparams {
    KernelHyperparams::new(s, l).unwrap()
}

/// `max |L̃L̃ᵀ - K|` over an `n`-point grid.
fn gram_error(family: KernelFamily, n: usize, m: usize, factor: f64, h: &KernelHyperparams) -> f64 {
    let x = points(n);
    let half = (n as f64 - 1.0) / 2.0;
    let basis = build_basis(&x, factor * half, m).unwrap();
    let l = approx_l_factor(&basis, h, family).unwrap();
    let approx = l.dot(&l.t());
    let mut worst = 0f64;
    for i in 0..n {
        for j in 0..n {
            let k = kernel_eval(family, h, x[i], x[j]).unwrap();
            worst = worst.max((approx[[i, j]] - k).abs());
        }
    }
    worst
}

/// Log-pmf of `NB(r1, ν) * NB(r2, ν)` at `y` by direct convolution.
fn convolved_log_pmf(y: i64, r1: f64, r2: f64, nu: f64) -> f64 {
    (0..=y)
        .map(|k| (nb_cell_loglik(k, r1, nu).unwrap() + nb_cell_loglik(y - k, r2, nu).unwrap()).exp())
        .sum::<f64>()
        .ln()
}

#[test]
fn eigenfunctions_vanish_at_the_boundary() {
    let eps = 1e-9;
    let b = build_basis(&[-3.0 + eps, 3.0 - eps], 3.0, 12).unwrap();
    assert!(b.phi.iter().all(|v| v.abs() < 1e-8));
    assert!(build_basis(&[3.0], 3.0, 4).is_err());
}

#[test]
fn hsgp_error_non_increasing_in_m() {
    for family in FAMILIES {
        let h = hp(1.3, 0.25 * 42.0);
        let errs: Vec<f64> = [5, 10, 20, 40].iter().map(|&m| gram_error(family, 85, m, 1.5, &h)).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{family:?}: {errs:?}");
        }
    }
}

#[test]
fn prior_field_covariance_matches_low_rank_gram() {
    let x = points(9);
    let basis = build_basis(&x, 6.0, 8).unwrap();
    let h = hp(0.8, 2.0);
    let l = approx_l_factor(&basis, &h, KernelFamily::Matern52).unwrap();
    let target = l.dot(&l.t());
    let (i, j) = (2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let mut prods = Vec::with_capacity(n);
    let mut vi = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let f = |r: usize| (0..8).map(|c| l[[r, c]] * z[c]).sum::<f64>();
        let (a, b) = (f(i), f(j));
        prods.push(a * b);
        vi.push(a * a);
    }
    for (vals, want) in [(&prods, target[[i, j]]), (&vi, target[[i, i]])] {
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
    }
}

#[test]
fn repeat_participants_shift_the_intensity_optimum() {
    // One cell with y contacts from N participants; the m maximising the
    // likelihood must grow as the fatigue effect becomes more negative.
    let (y, n, nu) = (14i64, 5.0, 0.7);
    let best_m = |rho: f64| {
        let ll = |m: f64| nb_cell_loglik(y, m * rho.exp() * n / nu, nu).unwrap();
        let (mut lo, mut hi) = (1e-3f64, 1e3f64);
        for _ in 0..200 {
            let a = lo + (hi - lo) / 3.0;
            let b = hi - (hi - lo) / 3.0;
            if ll(a) < ll(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        0.5 * (lo + hi)
    };
    let ms: Vec<f64> = [0.0, -0.3, -0.6, -1.2].iter().map(|&r| best_m(r)).collect();
    for w in ms.windows(2) {
        assert!(w[1] > w[0], "{ms:?}");
    }
}

#[test]
fn log_posterior_is_bit_reproducible() {
    let (table, pop) = toy_table();
    let cfg = ModelConfig { m1: 3, m2: 2, ..ModelConfig::default() };
    let a = RateConsistencyModel::new(cfg, &table, &pop).unwrap();
    let b = RateConsistencyModel::new(cfg, &table, &pop).unwrap();
    let x: Vec<f64> = (0..a.dim()).map(|i| (0.7 * i as f64).cos()).collect();
    assert_eq!(a.log_posterior(&x).unwrap().to_bits(), b.log_posterior(&x).unwrap().to_bits());
    assert_eq!(a.log_posterior(&x).unwrap().to_bits(), a.log_posterior(&x).unwrap().to_bits());
}

fn param_strategy() -> impl Strategy<Value = Parameterization> {
    prop_oneof![Just(Parameterization::DiffInAge), Just(Parameterization::AgeAge)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn diff_grid_size_and_rotation(lo in 0u32..40, width in 0u32..30) {
        let grid = AgeGrid::new(lo, lo + width).unwrap();
        let b = grid.len() as i64;
        prop_assert_eq!(grid.diff_grid().len() as i64, 2 * b - 1);
        let mut seen = std::collections::BTreeSet::new();
        for a in grid.ages() {
            for c in grid.ages() {
                let (aa, d) = rotate_to_diff(&grid, a as i64, c as i64).unwrap();
                prop_assert!(grid.diff_grid().index_of(d).is_ok());
                prop_assert!(seen.insert((aa, d)));
                prop_assert_eq!(rotate_from_diff(&grid, aa, d).unwrap(), (a as i64, c as i64));
            }
        }
    }

    #[test]
    fn brackets_partition_the_grid(lo in 0u32..20, cuts in proptest::collection::btree_set(1u32..30, 0..6)) {
        let hi = lo + 30;
        let grid = AgeGrid::new(lo, hi).unwrap();
        let mut edges: Vec<u32> = cuts.into_iter().map(|c| lo + c).collect();
        edges.push(hi + 1);
        let mut start = lo;
        let mut brackets = Vec::new();
        for e in edges {
            brackets.push(Bracket::new(start, e - 1).unwrap());
            start = e;
        }
        let br = CoarseBracketing::new(grid, brackets).unwrap();
        let total: usize = br.brackets().iter().map(|b| b.len()).sum();
        prop_assert_eq!(total, grid.len());
        for age in grid.ages() {
            let owners = br.brackets().iter().filter(|b| b.contains(age)).count();
            prop_assert_eq!(owners, 1);
        }
        if br.len() > 1 {
            let mut gap = br.brackets().to_vec();
            gap.remove(0);
            prop_assert!(CoarseBracketing::new(grid, gap).is_err());
        }
    }

    #[test]
    fn kronecker_vec_trick(n1 in 1usize..9, n2 in 1usize..9, m1 in 1usize..5, m2 in 1usize..5, fam in 0usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = build_basis(&points(n1), 1.5 * (n1 as f64).max(2.0), m1).unwrap();
        let b2 = build_basis(&points(n2), 1.5 * (n2 as f64).max(2.0), m2).unwrap();
        let h1 = hp(0.5 + rand::Rng::random::<f64>(&mut rng), 0.5 + 3.0 * rand::Rng::random::<f64>(&mut rng));
        let h2 = hp(0.5 + rand::Rng::random::<f64>(&mut rng), 0.5 + 3.0 * rand::Rng::random::<f64>(&mut rng));
        let z: Vec<f64> = (0..m1 * m2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let family = FAMILIES[fam];
        let f = field_eval(&b1, &b2, &h1, &h2, family, &z).unwrap();
        let l1 = approx_l_factor(&b1, &h1, family).unwrap();
        let l2 = approx_l_factor(&b2, &h2, family).unwrap();
        let dense = kron(&l2, &l1);
        for r in 0..n1 * n2 {
            let v: f64 = (0..m1 * m2).map(|c| dense[[r, c]] * z[c]).sum();
            prop_assert!((v - f[[r % n1, r / n1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn nb_aggregation_is_closed(r1 in 0.01f64..20.0, r2 in 0.01f64..20.0, nu in 0.01f64..10.0, y in 0i64..50) {
        let direct = nb_cell_loglik(y, r1 + r2, nu).unwrap();
        let conv = convolved_log_pmf(y, r1, r2, nu);
        prop_assert!((direct.exp() - conv.exp()).abs() < 1e-12);
    }

    #[test]
    fn rate_symmetry_holds_for_any_parameters(p in param_strategy(), seed in any::<u64>(), scale in 0.1f64..1.0) {
        let (table, pop) = toy_table();
        let cfg = ModelConfig { parameterization: p, m1: 3, m2: 2, ..ModelConfig::default() };
        let model = RateConsistencyModel::new(cfg, &table, &pop).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..model.dim()).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); scale * v }).collect();
        let field = model.intensity(&x).unwrap();
        prop_assert!(field.max_rate_asymmetry(&pop) <= 1e-12 * field.values().iter().cloned().fold(1.0, f64::max));
        prop_assert!(field.values().iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn gradient_matches_central_differences(p in param_strategy(), seed in any::<u64>()) {
        let (table, pop) = toy_table();
        let cfg = ModelConfig { parameterization: p, m1: 3, m2: 2, ..ModelConfig::default() };
        let model = RateConsistencyModel::new(cfg, &table, &pop).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..model.dim()).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); 0.5 * v }).collect();
        let mut g = vec![0.0; model.dim()];
        model.log_posterior_grad(&x, &mut g).unwrap();
        let fd = fd_grad(|v| model.log_posterior(v).unwrap(), &x, 1e-5);
        prop_assert!(max_rel_err(&g, &fd) < 1e-5);
    }

    #[test]
    fn sampler_coordinates_round_trip(seed in any::<u64>()) {
        let (table, pop) = toy_table();
        let model = RateConsistencyModel::new(ModelConfig { m1: 3, m2: 2, ..ModelConfig::default() }, &table, &pop).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..model.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let back = model.from_model(&model.to_model(&x).unwrap()).unwrap();
        prop_assert!(max_rel_err(&x, &back) < 1e-12);
    }
}
