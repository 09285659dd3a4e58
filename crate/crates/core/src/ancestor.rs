//! Ancestral reconstruction of function-valued traits.
//!
//! Each mixing row gets its own Gaussian posterior at the target nodes;
//! rows are independent a priori, so the curve posterior is the
//! basis-weighted sum of the row posteriors.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{self, GaussianPosterior};
use crate::scalar::Real;
use crate::simcore::{BasisSet, GammaVector};
use crate::tree::{NodeId, Phylogeny};

/// Posterior of one mixing row at `targets`, trained on all tips.
///
/// `row_hat[i]` is the value at `t.tips()[i]`. Targets never receive the
/// tip-noise term, so a tip target reports its phylogenetic component.
pub fn reconstruct_row<T: Real>(
    t: &Phylogeny<T>,
    row_hat: ArrayView1<'_, T>,
    gamma_hat: &GammaVector<T>,
    targets: &[NodeId],
) -> Result<GaussianPosterior<T>> {
    let tips = t.tips();
    if row_hat.len() != tips.len() {
        return Err(Error::DimensionMismatch(format!(
            "row has {} values for {} tips",
            row_hat.len(),
            tips.len()
        )));
    }
    let train_d = t.patristic_matrix(&tips)?;
    let cross_d = t.cross_distances(targets, &tips)?;
    let query_d = t.patristic_matrix(targets)?;
    gpr::gp_posterior(
        train_d.view(),
        cross_d.view(),
        query_d.view(),
        row_hat,
        gamma_hat,
        &vec![true; tips.len()],
        &vec![false; targets.len()],
    )
}

/// Curve-valued posterior at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionValuedPosterior<T> {
    pub node: NodeId,
    /// `offset + Σ Â_i φ̂_i`.
    pub mean_curve: Array1<T>,
    /// Pointwise `Σ B̂_i φ̂_i(x)²`.
    pub phylo_var_curve: Array1<T>,
    /// `Σ σ̂_n,i² φ̂_i(x)²`, reported for tips only as the size of the
    /// variation no phylogenetic method can reconstruct.
    pub nonphylo_var_curve: Option<Array1<T>>,
    /// `Σ B̂_i φ̂_i φ̂_iᵀ` when requested.
    pub covariance: Option<Array2<T>>,
    pub grid: Vec<T>,
}

impl<T: Real> FunctionValuedPosterior<T> {
    pub fn phylo_sd(&self) -> Array1<T> {
        self.phylo_var_curve.mapv(|v| v.sqrt())
    }

    pub fn nonphylo_sd(&self) -> Option<Array1<T>> {
        self.nonphylo_var_curve.as_ref().map(|v| v.mapv(|x| x.sqrt()))
    }
}

/// Lift scalar row posteriors at one node to a curve posterior.
///
/// `means[i]`, `variances[i]` describe row `i`; `noise_sd`, when given,
/// holds `σ̂_n,i` for the non-phylogenetic band.
pub fn reconstruct_functions<T: Real>(
    basis_hat: &BasisSet<T>,
    offset: ArrayView1<'_, T>,
    node: NodeId,
    means: &[T],
    variances: &[T],
    noise_sd: Option<&[T]>,
    full_covariance: bool,
) -> Result<FunctionValuedPosterior<T>> {
    let k = basis_hat.k();
    let g = basis_hat.grid_len();
    if means.len() != k || variances.len() != k || noise_sd.is_some_and(|s| s.len() != k) {
        return Err(Error::DimensionMismatch(format!(
            "{k} basis rows but {} means, {} variances",
            means.len(),
            variances.len()
        )));
    }
    if offset.len() != g {
        return Err(Error::DimensionMismatch(format!("offset has {} points, grid has {g}", offset.len())));
    }
    if variances.iter().any(|&v| !(v >= T::zero())) {
        return Err(Error::InvalidParameter("row variances must be non-negative".into()));
    }
    let phi = &basis_hat.functions;
    let a = Array1::from(means.to_vec());
    let b = Array1::from(variances.to_vec());
    let sq = phi.mapv(|v| v * v);
    let mean_curve = &offset + &phi.t().dot(&a);
    let phylo_var_curve = sq.t().dot(&b);
    let nonphylo_var_curve = noise_sd.map(|s| {
        let s2 = Array1::from_iter(s.iter().map(|&x| x * x));
        sq.t().dot(&s2)
    });
    let covariance = full_covariance.then(|| {
        let weighted = phi * &b.view().insert_axis(Axis(1));
        phi.t().dot(&weighted)
    });
    Ok(FunctionValuedPosterior {
        node,
        mean_curve,
        phylo_var_curve,
        nonphylo_var_curve,
        covariance,
        grid: basis_hat.grid.clone(),
    })
}

/// Curve posteriors at every target from the estimated basis, mixing rows
/// (`k × n_tips`, columns in `t.tips()` order) and per-row hyperparameters.
pub fn reconstruct_nodes<T: Real>(
    t: &Phylogeny<T>,
    basis_hat: &BasisSet<T>,
    offset: ArrayView1<'_, T>,
    mixing_hat: &Array2<T>,
    gammas: &[GammaVector<T>],
    targets: &[NodeId],
    full_covariance: bool,
) -> Result<Vec<FunctionValuedPosterior<T>>> {
    let k = basis_hat.k();
    if mixing_hat.nrows() != k || gammas.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} basis rows, {} mixing rows, {} hyperparameter vectors",
            mixing_hat.nrows(),
            gammas.len()
        )));
    }
    let rows: Vec<GaussianPosterior<T>> = (0..k)
        .map(|i| reconstruct_row(t, mixing_hat.row(i), &gammas[i], targets))
        .collect::<Result<_>>()?;
    let noise: Vec<T> = gammas.iter().map(|g| g.sigma_n).collect();
    targets
        .iter()
        .enumerate()
        .map(|(j, &node)| {
            let means: Vec<T> = rows.iter().map(|r| r.mean[j]).collect();
            let vars: Vec<T> = rows.iter().map(|r| r.covariance[[j, j]]).collect();
            let band = t.is_tip(node).then_some(noise.as_slice());
            reconstruct_functions(basis_hat, offset, node, &means, &vars, band, full_covariance)
        })
        .collect()
}

/// `Σ_i (σ_f,i² + σ_n,i²) φ_i φ_iᵀ`, the second-moment function of a tip
/// curve around the mean curve.
pub fn autocovariance_estimate<T: Real>(basis_hat: &BasisSet<T>, gammas: &[GammaVector<T>]) -> Result<Array2<T>> {
    if gammas.len() != basis_hat.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} hyperparameter vectors for {} basis rows",
            gammas.len(),
            basis_hat.k()
        )));
    }
    for g in gammas {
        g.validate()?;
    }
    let w = Array1::from_iter(gammas.iter().map(|g| g.sigma_f * g.sigma_f + g.sigma_n * g.sigma_n));
    let phi = &basis_hat.functions;
    let weighted = phi * &w.view().insert_axis(Axis(1));
    Ok(phi.t().dot(&weighted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Share of grid points where the truth lies within two posterior s.d.
    pub per_node_fraction: BTreeMap<NodeId, f64>,
    /// Mean of the per-node fractions.
    pub overall: f64,
}

pub fn coverage_report<T: Real>(
    posteriors: &[FunctionValuedPosterior<T>],
    truth: &HashMap<NodeId, Array1<T>>,
) -> Result<CoverageReport> {
    if posteriors.is_empty() {
        return Err(Error::InvalidParameter("coverage needs at least one posterior".into()));
    }
    let mut per_node_fraction = BTreeMap::new();
    for p in posteriors {
        let curve = truth
            .get(&p.node)
            .ok_or_else(|| Error::UnknownNode(format!("no true curve for node {}", p.node)))?;
        if curve.len() != p.mean_curve.len() {
            return Err(Error::DimensionMismatch(format!(
                "true curve has {} points, posterior {}",
                curve.len(),
                p.mean_curve.len()
            )));
        }
        let two = T::lit(2.0);
        let inside = curve
            .iter()
            .zip(p.mean_curve.iter().zip(p.phylo_var_curve.iter()))
            .filter(|(&x, (&m, &v))| (x - m).abs() <= two * v.sqrt())
            .count();
        per_node_fraction.insert(p.node, inside as f64 / curve.len() as f64);
    }
    let overall = per_node_fraction.values().sum::<f64>() / per_node_fraction.len() as f64;
    Ok(CoverageReport {
        per_node_fraction,
        overall,
    })
}
