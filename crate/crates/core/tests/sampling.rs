use annealflow_core::annealing::{estimate_expectation, importance_log_weights};
use annealflow_core::diffgraph::Dense;
use annealflow_core::targets::{gmm_sample, GaussianTarget, GmmTarget, TargetDensity};
use annealflow_core::SeedRng;
use rand::SeedableRng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

#[test]
fn mixture_component_frequencies() {
    let w = [0.5, 0.3, 0.2];
    let g = GmmTarget::new(&[vec![-30.0, 0.0], vec![0.0, 0.0], vec![30.0, 0.0]], 1.0, &w).unwrap();
    let n = 60_000;
    let x = gmm_sample(&g, n, &mut SeedRng::seed_from_u64(1));
    let mut counts = [0usize; 3];
    for r in 0..n {
        counts[((x.get(r, 0) + 45.0) / 30.0) as usize] += 1;
    }
    let stat: f64 = counts.iter().zip(w).map(|(&c, p)| (c as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum();
    let pval = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
    assert!(pval > 1e-3, "chi2 {stat}, p {pval}");
}

#[test]
fn mixture_components_are_unit_normals() {
    let g = GmmTarget::new(&[vec![5.0, -7.0]], 1.0, &[1.0]).unwrap();
    let n = 20_000;
    let x = gmm_sample(&g, n, &mut SeedRng::seed_from_u64(2));
    let std = Normal::new(0.0, 1.0).unwrap();
    // binned chi-square of the standardized first coordinate
    let edges = [-f64::INFINITY, -1.5, -0.75, 0.0, 0.75, 1.5, f64::INFINITY];
    let mut counts = [0usize; 6];
    for r in 0..n {
        let v = x.get(r, 0) - 5.0;
        counts[edges.iter().rposition(|&e| v >= e).unwrap()] += 1;
    }
    let stat: f64 = (0..6)
        .map(|b| {
            let e = n as f64 * (std.cdf(edges[b + 1]) - std.cdf(edges[b]));
            (counts[b] as f64 - e).powi(2) / e
        })
        .sum();
    assert!(1.0 - ChiSquared::new(5.0).unwrap().cdf(stat) > 1e-3, "chi2 {stat}");
}

#[test]
fn mixture_density_integrates_to_one() {
    let g = GmmTarget::forty_modes(annealflow_core::targets::GMM_SEED);
    let (n, lo, hi) = (600, -50.0, 50.0);
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            total += g.log_density(&p).exp() * h * h;
        }
    }
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn self_normalized_estimate_of_a_gaussian_mean() {
    // proposal N(0, 2^2), target N(1, 1): E_p[x] = 1
    let q = GaussianTarget::new(vec![0.0], 2.0).unwrap();
    let p = GaussianTarget::new(vec![1.0], 1.0).unwrap();
    let n = 50_000;
    let mut rng = SeedRng::seed_from_u64(4);
    let mut x = Dense::zeros(n, 1);
    for r in 0..n {
        q.sample_into(&mut rng, x.row_mut(r));
    }
    let logq: Vec<f64> = (0..n).map(|r| -q.energy(x.row(r))).collect();
    let logw = importance_log_weights(&logq, &p, 1.0, &x, None).unwrap();
    let est = estimate_expectation(x.data(), &logw).unwrap();
    assert!((est - 1.0).abs() < 0.03, "{est}");
}
