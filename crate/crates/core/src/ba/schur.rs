use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::BaError;

/// Gauss–Newton normal equations in camera/point block form. `h_cp[j]` is the
/// dense `n_c × 3` coupling between all camera parameters and point `j`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h_cc: DMatrix<f64>,
    pub h_cp: Vec<DMatrix<f64>>,
    pub h_pp: Vec<Matrix3<f64>>,
    pub g_c: DVector<f64>,
    pub g_p: Vec<Vector3<f64>>,
}

impl NormalEquations {
    pub fn zeros(n_cam: usize, n_points: usize) -> Self {
        Self {
            h_cc: DMatrix::zeros(n_cam, n_cam),
            h_cp: vec![DMatrix::zeros(n_cam, 3); n_points],
            h_pp: vec![Matrix3::zeros(); n_points],
            g_c: DVector::zeros(n_cam),
            g_p: vec![Vector3::zeros(); n_points],
        }
    }

    pub fn n_cam(&self) -> usize {
        self.g_c.len()
    }

    pub fn gradient_inf_norm(&self) -> f64 {
        let c = self.g_c.amax();
        self.g_p.iter().fold(c, |m, g| m.max(g.amax()))
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.n_cam() + 3 * self.h_pp.len();
        if n == 0 {
            return 0.0;
        }
        let s = self.h_cc.diagonal().sum() + self.h_pp.iter().map(|h| h.trace()).sum::<f64>();
        s / n as f64
    }

    /// Reduced camera matrix `H_cc − Σ H_cp H_pp⁻¹ H_pc` without damping.
    /// Points whose block is not positive definite are skipped.
    pub fn reduced_camera_matrix(&self) -> DMatrix<f64> {
        let mut s = self.h_cc.clone();
        for (hcp, hpp) in self.h_cp.iter().zip(&self.h_pp) {
            if let Some(chol) = hpp.cholesky() {
                let inv = chol.inverse();
                s -= hcp * inv * hcp.transpose();
            }
        }
        s
    }
}

/// Solves `(H + λI) Δ = −g` by eliminating the point blocks first.
pub fn schur_solve(ne: &NormalEquations, lambda: f64) -> Result<(DVector<f64>, Vec<Vector3<f64>>), BaError> {
    let nc = ne.n_cam();
    let mut s = ne.h_cc.clone();
    for i in 0..nc {
        s[(i, i)] += lambda;
    }
    let mut b = -&ne.g_c;
    let mut inv_blocks = Vec::with_capacity(ne.h_pp.len());
    for ((hcp, hpp), gp) in ne.h_cp.iter().zip(&ne.h_pp).zip(&ne.g_p) {
        let damped = hpp + Matrix3::identity() * lambda;
        let inv = damped
            .cholesky()
            .ok_or_else(|| BaError::SingularSystem("point block not positive definite".into()))?
            .inverse();
        let w = hcp * inv; // n_c × 3
        s -= &w * hcp.transpose();
        b += &w * gp;
        inv_blocks.push(inv);
    }
    let dc = if nc == 0 {
        DVector::zeros(0)
    } else {
        let chol = s
            .cholesky()
            .ok_or_else(|| BaError::SingularSystem("reduced camera system not positive definite".into()))?;
        chol.solve(&b)
    };
    let dp = ne
        .h_cp
        .iter()
        .zip(&inv_blocks)
        .zip(&ne.g_p)
        .map(|((hcp, inv), gp)| inv * (-gp - hcp.transpose() * &dc))
        .collect();
    Ok((dc, dp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random SPD system with BA sparsity: every point seen by a subset of cameras.
    fn random_system(n_cams: usize, n_points: usize, seed: u64) -> (NormalEquations, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nc = 6 * n_cams;
        let n = nc + 3 * n_points;
        // H = JᵀJ + εI with a random sparse J
        let rows = 2 * n_cams * n_points;
        let mut j = DMatrix::<f64>::zeros(rows, n);
        for p in 0..n_points {
            for c in 0..n_cams {
                if rng.random_bool(0.8) {
                    let r = 2 * (p * n_cams + c);
                    for k in 0..6 {
                        j[(r, 6 * c + k)] = rng.random_range(-1.0..1.0);
                        j[(r + 1, 6 * c + k)] = rng.random_range(-1.0..1.0);
                    }
                    for k in 0..3 {
                        j[(r, nc + 3 * p + k)] = rng.random_range(-1.0..1.0);
                        j[(r + 1, nc + 3 * p + k)] = rng.random_range(-1.0..1.0);
                    }
                }
            }
        }
        let h = j.transpose() * &j + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let mut ne = NormalEquations::zeros(nc, n_points);
        ne.h_cc.copy_from(&h.view((0, 0), (nc, nc)));
        ne.g_c.copy_from(&g.rows(0, nc));
        for p in 0..n_points {
            let o = nc + 3 * p;
            ne.h_cp[p].copy_from(&h.view((0, o), (nc, 3)));
            ne.h_pp[p].copy_from(&h.view((o, o), (3, 3)));
            ne.g_p[p].copy_from(&g.rows(o, 3));
        }
        (ne, h, g)
    }

    fn stack(dc: &DVector<f64>, dp: &[Vector3<f64>]) -> DVector<f64> {
        let mut v = DVector::zeros(dc.len() + 3 * dp.len());
        v.rows_mut(0, dc.len()).copy_from(dc);
        for (i, p) in dp.iter().enumerate() {
            v.rows_mut(dc.len() + 3 * i, 3).copy_from(p);
        }
        v
    }

    #[test]
    fn matches_dense_solve() {
        for (seed, lambda) in [(1, 0.0), (2, 1e-3), (3, 10.0)] {
            let (ne, h, g) = random_system(3, 50, seed);
            let (dc, dp) = schur_solve(&ne, lambda).unwrap();
            let n = h.nrows();
            let dense = (h + DMatrix::identity(n, n) * lambda).lu().solve(&(-g)).unwrap();
            let ours = stack(&dc, &dp);
            let rel = (&ours - &dense).norm() / dense.norm();
            assert!(rel < 1e-8, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let (mut ne, _, _) = random_system(3, 10, 4);
        ne.g_c.fill(0.0);
        ne.g_p.iter_mut().for_each(|g| g.fill(0.0));
        let (dc, dp) = schur_solve(&ne, 1e-3).unwrap();
        assert_eq!(dc.amax(), 0.0);
        assert!(dp.iter().all(|p| p.amax() == 0.0));
    }

    #[test]
    fn heavy_damping_bounds_step() {
        let (ne, _, g) = random_system(3, 20, 5);
        let lambda = 1e9;
        let (dc, dp) = schur_solve(&ne, lambda).unwrap();
        let norm = stack(&dc, &dp).norm();
        assert!(norm <= g.norm() / lambda * (1.0 + 1e-6));
    }

    #[test]
    fn bit_for_bit_repeatable() {
        let (ne, _, _) = random_system(3, 30, 6);
        let a = schur_solve(&ne, 0.5).unwrap();
        let b = schur_solve(&ne, 0.5).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn singular_reduced_system_is_reported() {
        let (mut ne, _, _) = random_system(2, 5, 7);
        // a camera parameter with no information at all
        let nc = ne.n_cam();
        for i in 0..nc {
            ne.h_cc[(0, i)] = 0.0;
            ne.h_cc[(i, 0)] = 0.0;
        }
        for hcp in &mut ne.h_cp {
            hcp.row_mut(0).fill(0.0);
        }
        assert!(matches!(schur_solve(&ne, 0.0), Err(BaError::SingularSystem(_))));
    }
}
