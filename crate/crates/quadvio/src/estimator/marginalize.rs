//! Schur-complement marginalization and the resulting dense prior.
//!
//! When the oldest frame leaves the window, every factor touching it is
//! linearized at the current estimate and the frame's 15 parameters plus the
//! inverse depths anchored there are eliminated. The remaining quadratic
//! becomes a prior on the retained frame states. The prior keeps its
//! linearization point and Jacobian fixed (first-estimate style): later
//! evaluations only update the residual through the boxminus of the current
//! states against the stored linearization.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{boxminus, BodyState, STATE_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum MarginalizeError {
    #[error("eliminated block is rank deficient beyond regularization")]
    RankDeficient,
}

/// Dense Gaussian prior over retained window states.
#[derive(Debug, Clone)]
pub struct MarginalizationPrior {
    /// Global frame indices the prior constrains, window order.
    pub frame_indices: Vec<usize>,
    /// Linearization states, same order.
    pub lin_states: Vec<BodyState>,
    /// Information matrix H' (dim = 15 * frames).
    pub information: DMatrix<f64>,
    /// Information vector g' such that cost = const + 2 g'^T d + d^T H' d.
    pub info_vector: DVector<f64>,
    /// Square-root factor: residual = sqrt_jacobian * d + sqrt_rhs.
    pub sqrt_jacobian: DMatrix<f64>,
    pub sqrt_rhs: DVector<f64>,
}

impl MarginalizationPrior {
    /// Builds the prior from an information pair, factoring it through an
    /// eigendecomposition (tolerates rank deficiency).
    pub fn from_information(
        frame_indices: Vec<usize>,
        lin_states: Vec<BodyState>,
        information: DMatrix<f64>,
        info_vector: DVector<f64>,
    ) -> MarginalizationPrior {
        let sym = 0.5 * (&information + information.transpose());
        // fast path: positive definite priors factor directly
        if let Some(chol) = sym.clone().cholesky() {
            let l = chol.l();
            let sqrt_rhs = chol.l_dirty().solve_lower_triangular(&info_vector).unwrap_or_else(
                || DVector::zeros(sym.nrows()),
            );
            return MarginalizationPrior {
                frame_indices,
                lin_states,
                information: sym,
                info_vector,
                sqrt_jacobian: l.transpose(),
                sqrt_rhs,
            };
        }
        let eig = sym.clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let tol = max_eig.max(1.0) * 1e-12;
        let mut rows = Vec::new();
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > tol {
                rows.push(k);
            }
        }
        let n = sym.nrows();
        let mut sqrt_jacobian = DMatrix::zeros(rows.len(), n);
        let mut sqrt_rhs = DVector::zeros(rows.len());
        for (r, &k) in rows.iter().enumerate() {
            let lam = eig.eigenvalues[k];
            let v = eig.eigenvectors.column(k);
            let s = lam.sqrt();
            for c in 0..n {
                sqrt_jacobian[(r, c)] = s * v[c];
            }
            sqrt_rhs[r] = v.dot(&info_vector) / s;
        }
        MarginalizationPrior {
            frame_indices,
            lin_states,
            information: sym,
            info_vector,
            sqrt_jacobian,
            sqrt_rhs,
        }
    }

    pub fn dim(&self) -> usize {
        self.sqrt_jacobian.nrows()
    }

    /// Boxminus of the given states against the linearization point.
    pub fn delta(&self, states: &[&BodyState]) -> DVector<f64> {
        debug_assert_eq!(states.len(), self.lin_states.len());
        let mut d = DVector::zeros(STATE_DIM * states.len());
        for (i, s) in states.iter().enumerate() {
            d.rows_mut(STATE_DIM * i, STATE_DIM)
                .copy_from(&boxminus(s, &self.lin_states[i]));
        }
        d
    }

    /// Residual at the given states (whitened).
    pub fn residual(&self, states: &[&BodyState]) -> DVector<f64> {
        &self.sqrt_jacobian * self.delta(states) + &self.sqrt_rhs
    }

    /// Eliminates one covered frame from the prior without adding any new
    /// measurement information (used when a non-keyframe is discarded).
    pub fn drop_frame(&self, frame_index: usize) -> Result<MarginalizationPrior, MarginalizeError> {
        let pos = self
            .frame_indices
            .iter()
            .position(|&f| f == frame_index)
            .expect("frame not covered by prior");
        let n = self.frame_indices.len();
        let keep: Vec<usize> = (0..n).filter(|&i| i != pos).collect();

        let block = |i: usize, j: usize| {
            self.information
                .view((STATE_DIM * i, STATE_DIM * j), (STATE_DIM, STATE_DIM))
                .into_owned()
        };
        let h_mm = block(pos, pos);
        // no information on the dropped frame: just remove its rows/columns
        if h_mm.norm() < 1e-12 {
            let (h, g) = self.submatrix(&keep);
            return Ok(MarginalizationPrior::from_information(
                keep.iter().map(|&i| self.frame_indices[i]).collect(),
                keep.iter().map(|&i| self.lin_states[i]).collect(),
                h,
                g,
            ));
        }
        let (h, g, h_om, g_m) = self.split(pos, &keep);
        let h_mm_reg = &h_mm + DMatrix::identity(STATE_DIM, STATE_DIM) * 1e-8;
        let inv = h_mm_reg.try_inverse().ok_or(MarginalizeError::RankDeficient)?;
        let h_new = &h - &h_om * &inv * h_om.transpose();
        let g_new = &g - &h_om * &inv * &g_m;
        Ok(MarginalizationPrior::from_information(
            keep.iter().map(|&i| self.frame_indices[i]).collect(),
            keep.iter().map(|&i| self.lin_states[i]).collect(),
            h_new,
            g_new,
        ))
    }

    fn submatrix(&self, keep: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let k = keep.len();
        let mut h = DMatrix::zeros(STATE_DIM * k, STATE_DIM * k);
        let mut g = DVector::zeros(STATE_DIM * k);
        for (a, &i) in keep.iter().enumerate() {
            g.rows_mut(STATE_DIM * a, STATE_DIM)
                .copy_from(&self.info_vector.rows(STATE_DIM * i, STATE_DIM));
            for (b, &j) in keep.iter().enumerate() {
                h.view_mut((STATE_DIM * a, STATE_DIM * b), (STATE_DIM, STATE_DIM))
                    .copy_from(&self.information.view(
                        (STATE_DIM * i, STATE_DIM * j),
                        (STATE_DIM, STATE_DIM),
                    ));
            }
        }
        (h, g)
    }

    fn split(
        &self,
        pos: usize,
        keep: &[usize],
    ) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let (h, g) = self.submatrix(keep);
        let k = keep.len();
        let mut h_om = DMatrix::zeros(STATE_DIM * k, STATE_DIM);
        for (a, &i) in keep.iter().enumerate() {
            h_om.view_mut((STATE_DIM * a, 0), (STATE_DIM, STATE_DIM))
                .copy_from(&self.information.view(
                    (STATE_DIM * i, STATE_DIM * pos),
                    (STATE_DIM, STATE_DIM),
                ));
        }
        let g_m = self.info_vector.rows(STATE_DIM * pos, STATE_DIM).into_owned();
        (h, g, h_om, g_m)
    }
}

/// Schur complement: eliminates the leading `n_elim` parameters of (H, g).
/// Returns the reduced (H', g'). The eliminated block is regularized with
/// eps = 1e-8 on the diagonal; a still-singular block is an error.
pub fn schur_eliminate(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    n_elim: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), MarginalizeError> {
    let n = h.nrows();
    debug_assert!(n_elim <= n);
    let n_keep = n - n_elim;
    if n_elim == 0 {
        return Ok((h.clone(), g.clone()));
    }
    let h_mm = h.view((0, 0), (n_elim, n_elim)).into_owned();
    let h_mo = h.view((0, n_elim), (n_elim, n_keep)).into_owned();
    let h_oo = h.view((n_elim, n_elim), (n_keep, n_keep)).into_owned();
    let g_m = g.rows(0, n_elim).into_owned();
    let g_o = g.rows(n_elim, n_keep).into_owned();

    let reg = &h_mm + DMatrix::identity(n_elim, n_elim) * 1e-8;
    let chol = reg.cholesky().ok_or(MarginalizeError::RankDeficient)?;
    let hmm_inv_hmo = chol.solve(&h_mo);
    let hmm_inv_gm = chol.solve(&g_m);

    let h_prime = &h_oo - h_mo.transpose() * &hmm_inv_hmo;
    let g_prime = &g_o - h_mo.transpose() * &hmm_inv_gm;
    Ok((0.5 * (&h_prime + h_prime.transpose()), g_prime))
}
