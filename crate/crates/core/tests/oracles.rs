use kltwin::field::{kernel_basis, sample_gaussian_field, Axis, Field, FieldKind, Grid, RngStream, SeKernel};
use kltwin::kl::{empirical_basis, ensemble_mean};
use nalgebra::DMatrix;
use rand::Rng;

fn line_grid() -> Grid {
    // 100 space nodes.
    Grid::new(98, 1, 1.0, 1.0).unwrap()
}

fn ensemble(grid: Grid, m: usize, seed: u64) -> Vec<Field> {
    let basis = kernel_basis(&SeKernel::space(1.0, 0.2), &grid, Axis::Space, 30).unwrap();
    (0..m as u64)
        .map(|i| {
            let (f, _) = sample_gaussian_field(&basis, &RngStream::new(seed, i));
            let mut rng = RngStream::new(seed + 1, i).rng();
            let noisy: Vec<f64> = f.values().iter().map(|v| v + 0.05 * rng.random_range(-1.0..1.0)).collect();
            Field::new(grid, FieldKind::SpaceOnly, noisy).unwrap()
        })
        .collect()
}

/// Eigenvalues of the unbiased sample covariance, descending.
fn dense_covariance_spectrum(samples: &[Field]) -> Vec<f64> {
    let mean = ensemble_mean(samples).unwrap();
    let n = mean.len();
    let m = samples.len();
    let mut c = DMatrix::<f64>::zeros(n, n);
    for s in samples {
        let d: Vec<f64> = s.values().iter().zip(mean.values()).map(|(a, b)| a - b).collect();
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] += d[i] * d[j] / (m - 1) as f64;
            }
        }
    }
    let mut ev: Vec<f64> = c.symmetric_eigenvalues().iter().cloned().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

fn check_against_dense(m: usize, terms: usize) {
    let samples = ensemble(line_grid(), m, 3);
    let basis = empirical_basis(&samples, terms).unwrap();
    let dense = dense_covariance_spectrum(&samples);
    for (i, (a, b)) in basis.eigenvalues().iter().zip(&dense).enumerate() {
        assert!((a - b).abs() <= 1e-9 * dense[0], "eigenvalue {i}: {a:e} vs {b:e}");
    }
    // Energy identity: the discarded share and the trace agree.
    let trace: f64 = dense.iter().sum();
    let kept: f64 = basis.eigenvalues().iter().sum();
    assert!(((trace - kept) / trace - basis.rtol()).abs() <= 1e-8);
}

#[test]
fn snapshot_eigenvalues_match_dense_covariance() {
    check_against_dense(50, 20);
}

#[test]
fn direct_svd_eigenvalues_match_dense_covariance() {
    check_against_dense(150, 40);
}

#[test]
fn full_rank_energy_identity() {
    let samples = ensemble(line_grid(), 50, 9);
    let basis = empirical_basis(&samples, 49).unwrap();
    let trace: f64 = dense_covariance_spectrum(&samples).iter().sum();
    let kept: f64 = basis.eigenvalues().iter().sum();
    assert!((trace - kept).abs() <= 1e-8 * trace);
}

/// Node variance of `sum psi_i xi_i` is `sum psi_i^2`; with 1e5 draws the
/// sample variance has relative standard error `sqrt(2 / n)`.
#[test]
fn sampling_variance_matches_expansion() {
    let grid = Grid::new(10, 1, 1.0, 1.0).unwrap();
    let basis = kernel_basis(&SeKernel::space(2.0, 0.3), &grid, Axis::Space, 8).unwrap();
    let n = 100_000u64;
    let nodes = basis.n_nodes();
    let mut sum = vec![0.0; nodes];
    let mut sq = vec![0.0; nodes];
    for i in 0..n {
        let (f, _) = sample_gaussian_field(&basis, &RngStream::new(17, i));
        for (j, v) in f.values().iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let bound = 3.0 * (2.0 / n as f64).sqrt();
    for j in 0..nodes {
        let mean = sum[j] / n as f64;
        let var = (sq[j] - n as f64 * mean * mean) / (n - 1) as f64;
        let want: f64 = basis.modes().row(j).iter().map(|p| p * p).sum();
        assert!((var - want).abs() <= bound * want, "node {j}: {var} vs {want}");
    }
}
