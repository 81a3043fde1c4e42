//! Karhunen–Loève bases and the discrete forward/inverse transforms.
//!
//! A basis stores a mean field and *scaled* eigenfunctions
//! `psi_i = sqrt(lambda_i) phi_i`, where the `phi_i` are orthonormal under
//! unit node weights. The forward transform is `mean + Psi eta`; the inverse
//! is the ridge-regularized projection
//! `argmin ||field - mean - Psi eta||^2 + gamma ||eta||^2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::field::{l2_distance, Field, FieldKind, Grid};

#[derive(Clone, Debug, PartialEq)]
pub struct KlBasis {
    grid: Grid,
    kind: FieldKind,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    modes: DMatrix<f64>,
    rtol: f64,
}

impl KlBasis {
    /// Assembles a basis from its parts and applies the sign convention
    /// (largest-magnitude entry of every mode is positive).
    pub fn from_parts(
        grid: Grid,
        kind: FieldKind,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        mut modes: DMatrix<f64>,
        rtol: f64,
    ) -> Result<Self> {
        let n = grid.len_of(kind);
        if mean.len() != n || modes.nrows() != n || modes.ncols() != eigenvalues.len() {
            return Err(Error::invalid(format!(
                "basis parts disagree: {} nodes, mean {}, modes {}x{}, {} eigenvalues",
                n,
                mean.len(),
                modes.nrows(),
                modes.ncols(),
                eigenvalues.len()
            )));
        }
        if eigenvalues.is_empty() {
            return Err(Error::invalid("basis needs at least one term"));
        }
        fix_signs(&mut modes);
        Ok(Self {
            grid,
            kind,
            mean,
            eigenvalues,
            modes,
            rtol,
        })
    }

    /// Same basis with a different mean (the transferable part of a model is
    /// everything but the mean).
    pub fn with_mean(&self, mean: &Field) -> Result<Self> {
        if *mean.grid() != self.grid || mean.kind() != self.kind {
            return Err(Error::invalid("replacement mean lives on a different grid axis"));
        }
        Ok(Self {
            mean: mean.values().to_vec(),
            ..self.clone()
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn n_terms(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_field(&self) -> Field {
        Field::new(self.grid, self.kind, self.mean.clone()).expect("mean matches grid")
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Scaled eigenfunctions, one column per term.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    /// Orthonormal eigenfunctions `phi_i = psi_i / sqrt(lambda_i)`.
    pub fn eigenfunctions(&self) -> DMatrix<f64> {
        let mut phi = self.modes.clone();
        for (c, &l) in self.eigenvalues.iter().enumerate() {
            let s = l.sqrt();
            if s > 0.0 {
                phi.column_mut(c).scale_mut(1.0 / s);
            }
        }
        phi
    }

    pub fn rtol(&self) -> f64 {
        self.rtol
    }

    /// Keeps the leading `n` terms.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_terms() {
            return Err(Error::invalid(format!(
                "cannot truncate a {}-term basis to {n} terms",
                self.n_terms()
            )));
        }
        // Recover the full variance from the stored tail fraction.
        let kept: f64 = self.eigenvalues.iter().sum();
        let total = kept / (1.0 - self.rtol);
        let retained: f64 = self.eigenvalues[..n].iter().sum();
        let rtol = if total > 0.0 { (total - retained) / total } else { 0.0 };
        Ok(Self {
            eigenvalues: self.eigenvalues[..n].to_vec(),
            modes: self.modes.columns(0, n).into_owned(),
            rtol,
            ..self.clone()
        })
    }

    /// `mean + Psi eta`.
    pub fn forward(&self, eta: &[f64]) -> Result<Field> {
        if eta.len() != self.n_terms() {
            return Err(Error::invalid(format!(
                "latent vector has {} entries, basis has {} terms",
                eta.len(),
                self.n_terms()
            )));
        }
        let mut out = self.mean.clone();
        for (c, &e) in eta.iter().enumerate() {
            if e != 0.0 {
                for (o, m) in out.iter_mut().zip(self.modes.column(c).iter()) {
                    *o += e * m;
                }
            }
        }
        Field::new(self.grid, self.kind, out)
    }

    /// Precomputes the regularized inverse transform for repeated use.
    pub fn projector(&self, gamma: f64) -> Result<Projector> {
        Projector::new(self, gamma)
    }

    /// Regularized inverse transform (`KL^{-1}`).
    pub fn inverse(&self, field: &Field, gamma: f64) -> Result<Vec<f64>> {
        self.projector(gamma)?.project(field)
    }

    fn check_field(&self, field: &Field) -> Result<()> {
        if *field.grid() != self.grid || field.kind() != self.kind {
            return Err(Error::invalid(format!(
                "field ({:?}) does not live on the basis axis ({:?})",
                field.kind(),
                self.kind
            )));
        }
        Ok(())
    }
}

/// Flips every column so its largest-magnitude entry is positive (first
/// occurrence wins on exact ties).
fn fix_signs(modes: &mut DMatrix<f64>) {
    for mut col in modes.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Cached solution operator `P = (Psi^T Psi + gamma I)^{-1} Psi^T`, computed
/// through a QR factorization of `[Psi; sqrt(gamma) I]`.
#[derive(Clone, Debug)]
pub struct Projector {
    mean: Vec<f64>,
    grid: Grid,
    kind: FieldKind,
    operator: DMatrix<f64>,
    gamma: f64,
}

impl Projector {
    fn new(basis: &KlBasis, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("regularization must be >= 0, got {gamma}")));
        }
        let n = basis.n_nodes();
        let m = basis.n_terms();
        let design = if gamma > 0.0 {
            let mut d = DMatrix::zeros(n + m, m);
            d.view_mut((0, 0), (n, m)).copy_from(&basis.modes);
            for i in 0..m {
                d[(n + i, i)] = gamma.sqrt();
            }
            d
        } else {
            basis.modes.clone()
        };
        let (q, r) = design.qr().unpack();
        check_triangular(&r, "inverse KL transform (try gamma > 0)")?;
        // P = R^{-1} Q_1^T, restricted to the data rows.
        let qt = q.rows(0, n).transpose();
        let operator = r
            .solve_upper_triangular(&qt)
            .ok_or_else(|| Error::decomposition("singular KL normal matrix (try gamma > 0)"))?;
        Ok(Self {
            mean: basis.mean.clone(),
            grid: basis.grid,
            kind: basis.kind,
            operator,
            gamma,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn project(&self, field: &Field) -> Result<Vec<f64>> {
        if *field.grid() != self.grid || field.kind() != self.kind {
            return Err(Error::invalid("field does not live on the projector's axis"));
        }
        Ok(self.project_values(field.values()))
    }

    pub(crate) fn project_values(&self, values: &[f64]) -> Vec<f64> {
        let centered = DVector::from_iterator(
            values.len(),
            values.iter().zip(&self.mean).map(|(v, m)| v - m),
        );
        (&self.operator * centered).as_slice().to_vec()
    }
}

pub(crate) fn check_triangular(r: &DMatrix<f64>, what: &str) -> Result<()> {
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0_f64, f64::max);
    if diag.len() < r.ncols() || !(top > 0.0) || diag.iter().any(|&d| d <= 1e-13 * top) {
        return Err(Error::decomposition(format!("{what}: rank-deficient system")));
    }
    Ok(())
}

/// Node-wise arithmetic mean of an ensemble.
pub fn ensemble_mean(samples: &[Field]) -> Result<Field> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("ensemble mean of an empty sample set"))?;
    let mut acc = vec![0.0; first.len()];
    for s in samples {
        first.ensure_compatible(s)?;
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Field::new(*first.grid(), first.kind(), acc)
}

/// Empirical KL basis of an ensemble (method of snapshots).
///
/// The eigenpairs are those of the unbiased sample covariance with unit node
/// weights. Ensembles with fewer nodes than samples use the singular values
/// of the centred snapshot matrix directly; otherwise the `M x M` snapshot
/// Gram matrix gives the subspace and a Rayleigh–Ritz step refines it.
pub fn empirical_basis(samples: &[Field], n_terms: usize) -> Result<KlBasis> {
    let mean = ensemble_mean(samples)?;
    let m = samples.len();
    let n = mean.len();
    if n_terms == 0 || m < 2 || n_terms > (m - 1).min(n) {
        return Err(Error::invalid(format!(
            "{n_terms} KL terms requested from {m} samples of {n} nodes (at most min(M - 1, N))"
        )));
    }
    let scale = 1.0 / ((m - 1) as f64).sqrt();
    let mut snaps = DMatrix::zeros(n, m);
    for (j, s) in samples.iter().enumerate() {
        for (i, (v, mu)) in s.values().iter().zip(mean.values()).enumerate() {
            snaps[(i, j)] = (v - mu) * scale;
        }
    }
    let energy: f64 = snaps.iter().map(|v| v * v).sum();
    if !(energy > 0.0) {
        return Err(Error::invalid(
            "ensemble has zero variance; cannot build a KL basis (all samples identical?)",
        ));
    }

    let (phi, eigenvalues, gram_values) = if n <= m {
        snapshot_svd(&snaps, n_terms)?
    } else {
        snapshot_gram(&snaps, n_terms)?
    };
    let mut modes = phi;
    for (c, &l) in eigenvalues.iter().enumerate() {
        modes.column_mut(c).scale_mut(l.sqrt());
    }
    let total: f64 = gram_values.iter().sum();
    let tail: f64 = gram_values[n_terms..].iter().sum();
    let rtol = tail / total;
    KlBasis::from_parts(*mean.grid(), mean.kind(), mean.into_values(), eigenvalues, modes, rtol)
}

/// Few nodes: the singular values of the snapshot matrix resolve
/// eigenvalues down to `eps^2` of the leading one.
fn snapshot_svd(snaps: &DMatrix<f64>, n_terms: usize) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let (n, m) = snaps.shape();
    let svd = SVD::new(snaps.clone(), true, false);
    let u = svd.u.ok_or_else(|| Error::decomposition("snapshot SVD failed"))?;
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lead = svd.singular_values[idx[0]];
    let floor = lead * f64::EPSILON * n.max(m) as f64;
    if let Some(k) = idx[..n_terms].iter().position(|&i| svd.singular_values[i] <= floor) {
        return Err(Error::invalid(format!(
            "ensemble carries variance in only {k} directions, {n_terms} terms requested"
        )));
    }
    let mut phi = DMatrix::zeros(n, n_terms);
    for (c, &i) in idx[..n_terms].iter().enumerate() {
        phi.set_column(c, &u.column(i));
    }
    let values: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    Ok((phi, values[..n_terms].to_vec(), values))
}

/// Many nodes: eigenvectors of the `M x M` snapshot Gram matrix span the
/// retained subspace, refined by a Rayleigh–Ritz step.
fn snapshot_gram(snaps: &DMatrix<f64>, n_terms: usize) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let (n, m) = snaps.shape();
    let gram = snaps.tr_mul(snaps);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let gram_values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let lead = gram_values[0];
    if let Some(k) = gram_values[..n_terms].iter().position(|&l| l <= 1e-13 * lead) {
        return Err(Error::invalid(format!(
            "ensemble carries variance in only {k} directions, {n_terms} terms requested"
        )));
    }

    // Initial subspace from the snapshot eigenvectors.
    let mut sub = DMatrix::zeros(m, n_terms);
    for (c, &i) in order[..n_terms].iter().enumerate() {
        sub.set_column(c, &eig.eigenvectors.column(i));
    }
    let u0 = snaps * sub;
    let q = u0.qr().q();
    // Rayleigh–Ritz: SVD of the snapshots projected onto the subspace.
    let projected = q.tr_mul(snaps);
    let svd = SVD::new(projected, true, false);
    let u_small = svd.u.ok_or_else(|| Error::decomposition("snapshot SVD failed"))?;
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut phi = DMatrix::zeros(n, n_terms);
    let mut eigenvalues = Vec::with_capacity(n_terms);
    for (c, &i) in idx[..n_terms].iter().enumerate() {
        let s = svd.singular_values[i];
        eigenvalues.push(s * s);
        phi.set_column(c, &(&q * u_small.column(i)));
    }
    Ok((phi, eigenvalues, gram_values))
}

/// `KL[mean, Psi, eta]`.
pub fn kld_forward(basis: &KlBasis, eta: &[f64]) -> Result<Field> {
    basis.forward(eta)
}

/// `KL^{-1}[field; mean, Psi]` with ridge weight `gamma`.
pub fn kld_inverse(basis: &KlBasis, field: &Field, gamma: f64) -> Result<Vec<f64>> {
    basis.check_field(field)?;
    basis.inverse(field, gamma)
}

/// Relative representation error `||h - KL[KL^{-1} h]|| / ||h||`.
pub fn representation_error(field: &Field, basis: &KlBasis, gamma: f64) -> Result<f64> {
    let norm = field.norm();
    if !(norm > 0.0) {
        return Err(Error::invalid("representation error of a zero-norm field"));
    }
    let eta = kld_inverse(basis, field, gamma)?;
    let back = basis.forward(&eta)?;
    Ok(l2_distance(field.values(), back.values()) / norm)
}

/// Mean absolute node-wise difference between the first `n` eigenfunctions
/// of two bases (both sign-fixed).
pub fn eigenfunction_difference(a: &KlBasis, b: &KlBasis, n: usize) -> Result<f64> {
    if a.n_nodes() != b.n_nodes() || n > a.n_terms().min(b.n_terms()) {
        return Err(Error::invalid("eigenfunction comparison needs matching bases"));
    }
    let (pa, pb) = (a.eigenfunctions(), b.eigenfunctions());
    let mut acc = 0.0;
    for c in 0..n {
        acc += pa
            .column(c)
            .iter()
            .zip(pb.column(c).iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    }
    Ok(acc / (n * a.n_nodes()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{kernel_basis, sample_gaussian_field, Axis, RngStream, SeKernel};

    fn grid() -> Grid {
        Grid::new(8, 5, 1.0, 1.0).unwrap()
    }

    fn random_ensemble(m: usize, seed: u64) -> Vec<Field> {
        let g = grid();
        let b = kernel_basis(&SeKernel::space_time(1.0, 0.3, 0.4), &g, Axis::SpaceTime, 30)
            .unwrap();
        (0..m)
            .map(|i| sample_gaussian_field(&b, &RngStream::new(seed, i as u64)).0)
            .collect()
    }

    #[test]
    fn mean_of_identical_and_symmetric_samples() {
        let g = grid();
        let u = Field::space_time_fn(g, |x, t| x + 2.0 * t);
        assert_eq!(ensemble_mean(&[u.clone(), u.clone()]).unwrap(), u);
        let neg = u.map(|v| -v).unwrap();
        let z = ensemble_mean(&[u, neg]).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert!(matches!(ensemble_mean(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rank_one_ensemble() {
        let g = grid();
        let mean = Field::space_time_fn(g, |x, _| 1.0 + x);
        let psi = Field::space_time_fn(g, |x, t| (3.0 * x).sin() * (1.0 + t));
        let plus = Field::new(g, FieldKind::SpaceTime, mean.values().iter().zip(psi.values()).map(|(a, b)| a + b).collect()).unwrap();
        let minus = Field::new(g, FieldKind::SpaceTime, mean.values().iter().zip(psi.values()).map(|(a, b)| a - b).collect()).unwrap();
        let b = empirical_basis(&[plus, minus], 1).unwrap();
        // Covariance = 2 psi psi^T with the 1/(M-1) normalization.
        let expected = 2.0 * psi.norm().powi(2);
        assert!((b.eigenvalues()[0] - expected).abs() <= 1e-12 * expected);
        let phi = b.eigenfunctions();
        let cos = phi.column(0).dot(&DVector::from_column_slice(psi.values())) / psi.norm();
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        assert_eq!(b.rtol(), 0.0);
    }

    #[test]
    fn identical_samples_are_rejected() {
        let g = grid();
        let u = Field::constant(g, FieldKind::SpaceTime, 1.5);
        let err = empirical_basis(&[u.clone(), u.clone(), u], 1).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(msg) if msg.contains("zero variance")));
    }

    #[test]
    fn too_many_terms_rejected() {
        let s = random_ensemble(5, 1);
        assert!(matches!(empirical_basis(&s, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn roundtrip_and_in_span_exactness() {
        let s = random_ensemble(40, 2);
        let b = empirical_basis(&s, 12).unwrap();
        let eta: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = b.forward(&eta).unwrap();
        let back = b.inverse(&f, 0.0).unwrap();
        for (a, e) in back.iter().zip(&eta) {
            assert!((a - e).abs() < 1e-10);
        }
        assert_eq!(b.inverse(&b.mean_field(), 0.7).unwrap(), vec![0.0; 12]);
        assert!(representation_error(&f, &b, 0.0).unwrap() < 1e-10);
    }

    #[test]
    fn forward_unit_latent_adds_first_mode() {
        let s = random_ensemble(20, 3);
        let b = empirical_basis(&s, 4).unwrap();
        assert_eq!(b.forward(&[0.0; 4]).unwrap(), b.mean_field());
        let f = b.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for i in 0..b.n_nodes() {
            assert!((f.values()[i] - b.mean()[i] - b.modes()[(i, 0)]).abs() < 1e-15);
        }
        assert!(matches!(b.forward(&[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn orthogonal_residual_error() {
        let g = Grid::new(3, 1, 1.0, 1.0).unwrap();
        // Basis spanned by node 0 only.
        let mut modes = DMatrix::zeros(g.len(), 1);
        modes[(0, 0)] = 2.0;
        let b = KlBasis::from_parts(g, FieldKind::SpaceTime, vec![1.0; g.len()], vec![4.0], modes, 0.0).unwrap();
        let mut v = vec![1.0; g.len()];
        v[0] = 3.0;
        v[4] = 1.5; // orthogonal direction
        let f = Field::new(g, FieldKind::SpaceTime, v).unwrap();
        let expected = 0.5 / f.norm();
        assert!((representation_error(&f, &b, 0.0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_norm_field_rejected() {
        let s = random_ensemble(10, 4);
        let b = empirical_basis(&s, 3).unwrap();
        let z = Field::zeros(grid(), FieldKind::SpaceTime);
        assert!(matches!(representation_error(&z, &b, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sign_convention() {
        let s = random_ensemble(30, 5);
        let b = empirical_basis(&s, 6).unwrap();
        for col in b.modes().column_iter() {
            let (mut best, mut val) = (0.0_f64, 0.0);
            for &v in col.iter() {
                if v.abs() > best {
                    best = v.abs();
                    val = v;
                }
            }
            assert!(val > 0.0);
        }
    }

    #[test]
    fn monotone_truncation() {
        let s = random_ensemble(60, 6);
        let b = empirical_basis(&s, 20).unwrap();
        let probe = random_ensemble(1, 99).pop().unwrap();
        let mut last = f64::INFINITY;
        for n in 1..=20 {
            let e = representation_error(&probe, &b.truncated(n).unwrap(), 0.0).unwrap();
            assert!(e <= last + 1e-14);
            last = e;
        }
    }

    #[test]
    fn regularization_limit() {
        let s = random_ensemble(40, 7);
        let b = empirical_basis(&s, 8).unwrap();
        let probe = random_ensemble(1, 100).pop().unwrap();
        let exact = b.inverse(&probe, 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [1e-2, 1e-4, 1e-6, 1e-8] {
            let approx = b.inverse(&probe, gamma).unwrap();
            let d = l2_distance(&exact, &approx);
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-6);
    }
}
