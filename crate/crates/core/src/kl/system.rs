//! Precomputed quantities shared by the structured bound, the uncollapsed
//! SVI bound and the sparse predictive: the inducing Gram matrix, the
//! cross-covariance, the per-instance blocks `Σ̂ₚ` and their inverses.

use nalgebra::{DMatrix, DVector};

use crate::covariates::{CovariateMatrix, Rows};
use crate::error::Result;
use crate::kernels::DimPrior;
use crate::linalg::{symmetrize, Factor};

pub(crate) struct BlockSystem {
    pub inv: DMatrix<f64>,
    pub logdet: f64,
}

pub(crate) struct StructuredSystem<'a> {
    pub dim: DimPrior<'a>,
    pub x: &'a CovariateMatrix,
    pub s: Rows<'a>,
    /// `K_SS⁽ᴬ⁾`, possibly jittered.
    pub kss: DMatrix<f64>,
    pub kss_factor: Factor,
    /// `K_SS⁽ᴬ⁾⁻¹`.
    pub j: DMatrix<f64>,
    /// `K_XS⁽ᴬ⁾`, N×M.
    pub kxs: DMatrix<f64>,
    pub blocks: Vec<BlockSystem>,
    /// `Σ̂⁻¹ K_XS⁽ᴬ⁾`, N×M.
    pub u: DMatrix<f64>,
    /// `K_SX⁽ᴬ⁾ Σ̂⁻¹ K_XS⁽ᴬ⁾`.
    pub phi: DMatrix<f64>,
}

impl<'a> StructuredSystem<'a> {
    pub fn new(dim: DimPrior<'a>, x: &'a CovariateMatrix, s: Rows<'a>) -> Result<Self> {
        let mut kss = dim.a_kernel(s, s)?;
        let kss_factor = Factor::new_in_place(&mut kss, "inducing covariance")?;
        let j = kss_factor.inverse();
        let kxs = dim.a_kernel(x.view(), s)?;
        let m = s.len();
        let mut u = DMatrix::zeros(x.len(), m);
        let mut phi = DMatrix::zeros(m, m);
        let mut blocks = Vec::with_capacity(x.n_instances());
        for (p, b) in x.blocks().iter().enumerate() {
            let mut sigma_hat = dim.instance_block(x.block_view(p))?;
            let f = Factor::new_in_place(&mut sigma_hat, "instance covariance block")?;
            let inv = f.inverse();
            let kxs_p = kxs.rows(b.start, b.len);
            let u_p = &inv * kxs_p;
            phi += kxs_p.transpose() * &u_p;
            u.rows_mut(b.start, b.len).copy_from(&u_p);
            blocks.push(BlockSystem {
                inv,
                logdet: f.logdet(),
            });
        }
        symmetrize(&mut phi);
        Ok(StructuredSystem {
            dim,
            x,
            s,
            kss,
            kss_factor,
            j,
            kxs,
            blocks,
            u,
            phi,
        })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.kss.nrows()
    }

    pub fn sigma_hat_logdet(&self) -> f64 {
        self.blocks.iter().map(|b| b.logdet).sum()
    }

    /// `Σ̂⁻¹ Y` block by block.
    pub fn apply_inv_blocks(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(y.nrows(), y.ncols());
        for (b, bs) in self.x.blocks().iter().zip(&self.blocks) {
            let prod = &bs.inv * y.rows(b.start, b.len);
            out.rows_mut(b.start, b.len).copy_from(&prod);
        }
        out
    }

    pub fn apply_inv_blocks_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(y.len());
        for (b, bs) in self.x.blocks().iter().zip(&self.blocks) {
            let prod = &bs.inv * y.rows(b.start, b.len);
            out.rows_mut(b.start, b.len).copy_from(&prod);
        }
        out
    }

    /// Factor of `V = K_SS⁽ᴬ⁾ + K_SX⁽ᴬ⁾ Σ̂⁻¹ K_XS⁽ᴬ⁾`.
    pub fn v_factor(&self) -> Result<Factor> {
        let mut v = &self.kss + &self.phi;
        Factor::new_in_place(&mut v, "woodbury capacitance")
    }

    /// `Σₚ tr(Σ̂ₚ⁻¹ K⁽ᴬ⁾_{XₚXₚ})`, together with the diagonal blocks of `K⁽ᴬ⁾`.
    pub fn candidate_block_traces(&self) -> Result<(f64, Vec<DMatrix<f64>>)> {
        let mut total = 0.0;
        let mut kaa = Vec::with_capacity(self.blocks.len());
        for (p, bs) in self.blocks.iter().enumerate() {
            let rows = self.x.block_view(p);
            let k = self.dim.a_kernel(rows, rows)?;
            total += crate::linalg::frobenius_dot(&bs.inv, &k);
            kaa.push(k);
        }
        Ok((total, kaa))
    }
}
