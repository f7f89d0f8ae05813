//! Block-sparse global Gaussian over `(u_1..u_L, gamma, beta)`.
//!
//! The precision matrix is stored as L symmetric Q x Q group blocks, L
//! Q x (H+P) cross blocks, and one (H+P) x (H+P) shared block; the
//! information vector splits the same way. Auxiliary statistics cache
//!
//! - `group_inv[l]`    = B11_l^-1
//! - `cross_solved[l]` = B11_l^-1 B12_l
//! - `cross_folded`    = sum_l B12_l' B11_l^-1 B12_l
//! - `info_folded`     = sum_l (B11_l^-1 B12_l)' d1_l
//! - `schur`           = B22 - cross_folded, `schur_inv` = schur^-1
//!
//! so that per-group marginals, site-delta application, and marginal
//! summaries all cost O(1) in L. `apply_delta_*` maintains the cache
//! incrementally by unfolding one group's contribution, mutating, and folding
//! it back; a non-positive-definite intermediate rolls the whole update back
//! so callers can skip the offending site. Raw `add_*` accumulation (used
//! during assembly and bulk application) invalidates the cache instead;
//! `refresh_aux` rebuilds it from scratch.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::expfam::{sym_pd_inverse, symmetrize, GaussianMoments, GaussianNat};
use crate::model::ParamLayout;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Aux {
    group_inv: Vec<DMatrix<f64>>,
    cross_solved: Vec<DMatrix<f64>>,
    cross_folded: DMatrix<f64>,
    info_folded: DVector<f64>,
    schur: DMatrix<f64>,
    schur_inv: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGlobal {
    pub layout: ParamLayout,
    /// B11_l, one symmetric Q x Q block per group.
    pub prec_group: Vec<DMatrix<f64>>,
    /// B12_l, one Q x (H+P) block per group.
    pub prec_cross: Vec<DMatrix<f64>>,
    /// B22, symmetric (H+P) x (H+P).
    pub prec_shared: DMatrix<f64>,
    /// d1_l, one length-Q vector per group.
    pub info_group: Vec<DVector<f64>>,
    /// d2, length H+P.
    pub info_shared: DVector<f64>,
    /// Rebuilt by `refresh_aux`; never serialized.
    #[serde(skip)]
    aux: Option<Aux>,
}

/// Undo record for one incremental update; everything touched is O(1)-sized.
struct BlockStash {
    prec_group: DMatrix<f64>,
    prec_cross: DMatrix<f64>,
    prec_shared: DMatrix<f64>,
    info_group: DVector<f64>,
    info_shared: DVector<f64>,
    group_inv: DMatrix<f64>,
    cross_solved: DMatrix<f64>,
    cross_folded: DMatrix<f64>,
    info_folded: DVector<f64>,
    schur: DMatrix<f64>,
    schur_inv: DMatrix<f64>,
}

impl SparseGlobal {
    /// All-zero blocks (an improper global; callers accumulate sites and then
    /// call `refresh_aux`).
    pub fn zeroed(layout: ParamLayout) -> Result<Self> {
        if layout.n_groups == 0 {
            return Err(Error::Config("global approximation needs at least one group".into()));
        }
        if layout.q == 0 {
            return Err(Error::Config("global approximation needs Q >= 1".into()));
        }
        let (l, q, s) = (layout.n_groups, layout.q, layout.shared_dim());
        Ok(SparseGlobal {
            layout,
            prec_group: vec![DMatrix::zeros(q, q); l],
            prec_cross: vec![DMatrix::zeros(q, s); l],
            prec_shared: DMatrix::zeros(s, s),
            info_group: vec![DVector::zeros(q); l],
            info_shared: DVector::zeros(s),
            aux: None,
        })
    }

    fn aux(&self) -> &Aux {
        self.aux
            .as_ref()
            .expect("auxiliary statistics are stale; call refresh_aux first")
    }

    pub fn aux_fresh(&self) -> bool {
        self.aux.is_some()
    }

    /// Adds a natural-parameter contribution over `(u_l, gamma, beta)`;
    /// invalidates the auxiliary cache.
    pub fn add_alpha(&mut self, l: usize, nat: &GaussianNat) {
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        assert_eq!(nat.dim(), q + s, "alpha contribution has wrong dimension");
        self.prec_group[l] += nat.prec.view((0, 0), (q, q));
        self.prec_cross[l] += nat.prec.view((0, q), (q, s));
        self.prec_shared += nat.prec.view((q, q), (s, s));
        self.info_group[l] += nat.info.rows(0, q);
        self.info_shared += nat.info.rows(q, s);
        self.aux = None;
    }

    /// Adds a contribution over `u_l` only; invalidates the auxiliary cache.
    pub fn add_u(&mut self, l: usize, nat: &GaussianNat) {
        assert_eq!(nat.dim(), self.layout.q, "u contribution has wrong dimension");
        self.prec_group[l] += &nat.prec;
        self.info_group[l] += &nat.info;
        self.aux = None;
    }

    /// Adds a contribution over `(gamma, beta)` only; invalidates the cache.
    pub fn add_shared(&mut self, nat: &GaussianNat) {
        assert_eq!(nat.dim(), self.layout.shared_dim(), "shared contribution has wrong dimension");
        self.prec_shared += &nat.prec;
        self.info_shared += &nat.info;
        self.aux = None;
    }

    /// Rebuilds every auxiliary statistic from the base blocks.
    pub fn refresh_aux(&mut self) -> Result<()> {
        let (l_count, s) = (self.layout.n_groups, self.layout.shared_dim());
        if l_count == 0 {
            return Err(Error::Config("global approximation has no groups".into()));
        }
        let mut group_inv = Vec::with_capacity(l_count);
        let mut cross_solved = Vec::with_capacity(l_count);
        let mut cross_folded = DMatrix::zeros(s, s);
        let mut info_folded = DVector::zeros(s);
        for l in 0..l_count {
            let inv = sym_pd_inverse(&self.prec_group[l]).ok_or_else(|| {
                Error::Numerical(format!("group precision block {l} is not positive definite"))
            })?;
            let solved = &inv * &self.prec_cross[l];
            cross_folded += self.prec_cross[l].transpose() * &solved;
            info_folded += solved.transpose() * &self.info_group[l];
            group_inv.push(inv);
            cross_solved.push(solved);
        }
        let schur = &self.prec_shared - &cross_folded;
        let schur_inv = sym_pd_inverse(&schur).ok_or_else(|| {
            Error::Numerical("shared-block Schur complement is not positive definite".into())
        })?;
        self.aux = Some(Aux { group_inv, cross_solved, cross_folded, info_folded, schur, schur_inv });
        Ok(())
    }

    fn stash(&self, l: usize) -> BlockStash {
        let aux = self.aux();
        BlockStash {
            prec_group: self.prec_group[l].clone(),
            prec_cross: self.prec_cross[l].clone(),
            prec_shared: self.prec_shared.clone(),
            info_group: self.info_group[l].clone(),
            info_shared: self.info_shared.clone(),
            group_inv: aux.group_inv[l].clone(),
            cross_solved: aux.cross_solved[l].clone(),
            cross_folded: aux.cross_folded.clone(),
            info_folded: aux.info_folded.clone(),
            schur: aux.schur.clone(),
            schur_inv: aux.schur_inv.clone(),
        }
    }

    fn unstash(&mut self, l: usize, st: BlockStash) {
        self.prec_group[l] = st.prec_group;
        self.prec_cross[l] = st.prec_cross;
        self.prec_shared = st.prec_shared;
        self.info_group[l] = st.info_group;
        self.info_shared = st.info_shared;
        let aux = self.aux.as_mut().expect("stash taken with fresh aux");
        aux.group_inv[l] = st.group_inv;
        aux.cross_solved[l] = st.cross_solved;
        aux.cross_folded = st.cross_folded;
        aux.info_folded = st.info_folded;
        aux.schur = st.schur;
        aux.schur_inv = st.schur_inv;
    }

    /// Removes group l's contribution from the folded sums. The products are
    /// recomputed from the unchanged inputs, so removal is bit-exact.
    fn fold_out(&mut self, l: usize) {
        let aux = self.aux.as_mut().expect("fold_out requires fresh aux");
        aux.cross_folded -= self.prec_cross[l].transpose() * &aux.cross_solved[l];
        aux.info_folded -= aux.cross_solved[l].transpose() * &self.info_group[l];
    }

    /// Recomputes group l's derived blocks and folds them back in. Assumes
    /// `fold_out(l)` already ran.
    fn fold_in(&mut self, l: usize) -> Result<()> {
        let inv = sym_pd_inverse(&self.prec_group[l]).ok_or_else(|| {
            Error::Numerical(format!("group precision block {l} lost positive definiteness"))
        })?;
        let solved = &inv * &self.prec_cross[l];
        let aux = self.aux.as_mut().expect("fold_in requires fresh aux");
        aux.cross_folded += self.prec_cross[l].transpose() * &solved;
        aux.info_folded += solved.transpose() * &self.info_group[l];
        aux.group_inv[l] = inv;
        aux.cross_solved[l] = solved;
        aux.schur = &self.prec_shared - &aux.cross_folded;
        aux.schur_inv = sym_pd_inverse(&aux.schur).ok_or_else(|| {
            Error::Numerical("shared-block Schur complement lost positive definiteness".into())
        })?;
        Ok(())
    }

    /// Applies a site delta over `(u_l, gamma, beta)`, keeping the auxiliary
    /// cache exact. On error the state is untouched and the caller should
    /// skip the update.
    pub fn apply_delta_alpha(&mut self, l: usize, delta: &GaussianNat) -> Result<()> {
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        assert_eq!(delta.dim(), q + s, "alpha delta has wrong dimension");
        let st = self.stash(l);
        self.fold_out(l);
        self.prec_group[l] += delta.prec.view((0, 0), (q, q));
        self.prec_cross[l] += delta.prec.view((0, q), (q, s));
        self.prec_shared += delta.prec.view((q, q), (s, s));
        self.info_group[l] += delta.info.rows(0, q);
        self.info_shared += delta.info.rows(q, s);
        self.fold_in(l).map_err(|e| {
            self.unstash(l, st);
            e
        })
    }

    /// Applies a site delta over `u_l` only; same rollback contract as
    /// `apply_delta_alpha`.
    pub fn apply_delta_u(&mut self, l: usize, delta: &GaussianNat) -> Result<()> {
        assert_eq!(delta.dim(), self.layout.q, "u delta has wrong dimension");
        let st = self.stash(l);
        self.fold_out(l);
        self.prec_group[l] += &delta.prec;
        self.info_group[l] += &delta.info;
        self.fold_in(l).map_err(|e| {
            self.unstash(l, st);
            e
        })
    }

    /// Marginal over `(u_l, gamma, beta)`; O(1) in L.
    pub fn marginal_alpha(&self, l: usize) -> GaussianMoments {
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        let aux = self.aux();
        let t = &aux.schur_inv;
        let gt = &aux.cross_solved[l] * t;
        let sigma_uu = symmetrize(&(&aux.group_inv[l] + &gt * aux.cross_solved[l].transpose()));
        let resid = &self.info_shared - &aux.info_folded;
        let mu_u = &aux.group_inv[l] * &self.info_group[l] - &gt * &resid;
        let mu_s = t * &resid;

        let mut cov = DMatrix::zeros(q + s, q + s);
        cov.view_mut((0, 0), (q, q)).copy_from(&sigma_uu);
        cov.view_mut((0, q), (q, s)).copy_from(&(-&gt));
        cov.view_mut((q, 0), (s, q)).copy_from(&(-gt.transpose()));
        cov.view_mut((q, q), (s, s)).copy_from(t);
        let mut mean = DVector::zeros(q + s);
        mean.rows_mut(0, q).copy_from(&mu_u);
        mean.rows_mut(q, s).copy_from(&mu_s);
        GaussianMoments { mean, cov }
    }

    /// Marginal over `u_l`; O(1) in L.
    pub fn marginal_u(&self, l: usize) -> GaussianMoments {
        let aux = self.aux();
        let gt = &aux.cross_solved[l] * &aux.schur_inv;
        let cov = symmetrize(&(&aux.group_inv[l] + &gt * aux.cross_solved[l].transpose()));
        let resid = &self.info_shared - &aux.info_folded;
        let mean = &aux.group_inv[l] * &self.info_group[l] - &gt * &resid;
        GaussianMoments { mean, cov }
    }

    /// All marginal means and standard deviations, ordered by the layout.
    pub fn marginal_summaries(&self) -> (DVector<f64>, DVector<f64>) {
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        let mut mu = DVector::zeros(self.layout.dim());
        let mut sd = DVector::zeros(self.layout.dim());
        for l in 0..self.layout.n_groups {
            let m = self.marginal_u(l);
            mu.rows_mut(l * q, q).copy_from(&m.mean);
            for k in 0..q {
                sd[l * q + k] = m.cov[(k, k)].max(0.0).sqrt();
            }
        }
        let aux = self.aux();
        let resid = &self.info_shared - &aux.info_folded;
        let mu_s = &aux.schur_inv * resid;
        let base = self.layout.n_groups * q;
        for j in 0..s {
            mu[base + j] = mu_s[j];
            sd[base + j] = aux.schur_inv[(j, j)].max(0.0).sqrt();
        }
        (mu, sd)
    }

    /// Reconstructs the dense precision matrix (test oracle; O(L^2) storage).
    pub fn dense_prec(&self) -> DMatrix<f64> {
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        let dim = self.layout.dim();
        let mut full = DMatrix::zeros(dim, dim);
        for l in 0..self.layout.n_groups {
            full.view_mut((l * q, l * q), (q, q)).copy_from(&self.prec_group[l]);
            full.view_mut((l * q, self.layout.n_groups * q), (q, s))
                .copy_from(&self.prec_cross[l]);
            full.view_mut((self.layout.n_groups * q, l * q), (s, q))
                .copy_from(&self.prec_cross[l].transpose());
        }
        full.view_mut(
            (self.layout.n_groups * q, self.layout.n_groups * q),
            (s, s),
        )
        .copy_from(&self.prec_shared);
        full
    }

    /// Reconstructs the dense information vector (test oracle).
    pub fn dense_info(&self) -> DVector<f64> {
        let q = self.layout.q;
        let mut full = DVector::zeros(self.layout.dim());
        for l in 0..self.layout.n_groups {
            full.rows_mut(l * q, q).copy_from(&self.info_group[l]);
        }
        full.rows_mut(self.layout.n_groups * q, self.layout.shared_dim())
            .copy_from(&self.info_shared);
        full
    }

    /// Factorizes once for repeated exact draws.
    pub fn sampler(&self) -> Result<SparseSampler> {
        let aux = self.aux();
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        let mut l_group = Vec::with_capacity(self.layout.n_groups);
        for (l, block) in self.prec_group.iter().enumerate() {
            let chol = nalgebra::Cholesky::new(block.clone()).ok_or_else(|| {
                Error::Numerical(format!("group precision block {l} is not positive definite"))
            })?;
            l_group.push(chol.l());
        }
        let l_schur = nalgebra::Cholesky::new(aux.schur.clone())
            .ok_or_else(|| {
                Error::Numerical("shared-block Schur complement is not positive definite".into())
            })?
            .l();

        // v = L(Q)^-1 r: per-group forward solves, then the shared part uses
        // d2 - sum_l Btilde12_l' d1_l, which is exactly the folded info.
        let mut v = DVector::zeros(self.layout.dim());
        for l in 0..self.layout.n_groups {
            let w = l_group[l]
                .solve_lower_triangular(&self.info_group[l])
                .ok_or_else(|| Error::Numerical("singular group Cholesky factor".into()))?;
            v.rows_mut(l * q, q).copy_from(&w);
        }
        let resid = &self.info_shared - &aux.info_folded;
        let w2 = l_schur
            .solve_lower_triangular(&resid)
            .ok_or_else(|| Error::Numerical("singular shared Cholesky factor".into()))?;
        v.rows_mut(self.layout.n_groups * q, s).copy_from(&w2);

        Ok(SparseSampler {
            layout: self.layout,
            l_group,
            l_schur,
            cross_solved: aux.cross_solved.clone(),
            v,
        })
    }

    /// One exact draw from the Gaussian given standard-normal `noise`. Zero
    /// noise returns the mean.
    pub fn sample(&self, noise: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.sampler()?.draw(noise))
    }
}

/// Cached structured Cholesky factors of the block-sparse precision: the
/// global factor's blocks are L(B11_l), B12_l' L(B11_l)^-T, and L(S), so both
/// substitutions run in O(L) without ever forming a dense matrix.
pub struct SparseSampler {
    layout: ParamLayout,
    l_group: Vec<DMatrix<f64>>,
    l_schur: DMatrix<f64>,
    cross_solved: Vec<DMatrix<f64>>,
    /// L(Q)^-1 r, precomputed.
    v: DVector<f64>,
}

impl SparseSampler {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// theta = L^-T (L^-1 r + noise).
    pub fn draw(&self, noise: &DVector<f64>) -> DVector<f64> {
        assert_eq!(noise.len(), self.layout.dim(), "noise has wrong dimension");
        let (q, s) = (self.layout.q, self.layout.shared_dim());
        let w = &self.v + noise;

        let mut theta = DVector::zeros(self.layout.dim());
        let base = self.layout.n_groups * q;
        let theta_s = self
            .l_schur
            .tr_solve_lower_triangular(&w.rows(base, s).clone_owned())
            .expect("factor has positive diagonal");
        for l in 0..self.layout.n_groups {
            let wu = w.rows(l * q, q).clone_owned();
            let tu = self.l_group[l]
                .tr_solve_lower_triangular(&wu)
                .expect("factor has positive diagonal")
                - &self.cross_solved[l] * &theta_s;
            theta.rows_mut(l * q, q).copy_from(&tu);
        }
        theta.rows_mut(base, s).copy_from(&theta_s);
        theta
    }

    /// Draws with noise from `rng`.
    pub fn draw_with<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let noise = DVector::from_fn(self.layout.dim(), |_, _| StandardNormal.sample(rng));
        self.draw(&noise)
    }
}
