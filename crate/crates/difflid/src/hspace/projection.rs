//! Two-dimensional PCA projection of feature sets, for plotting. Computed by
//! power iteration so the result is deterministic and dependency-free.

use crate::error::{Error, Result};
use crate::hspace::{Domain, HFeature};
use crate::tensor::{derive_seed, Rng};
use crate::Real;

#[derive(Clone, Debug)]
pub struct ProjectionRow {
    pub image_id: u32,
    pub domain: Domain,
    pub t: usize,
    pub pc1: Real,
    pub pc2: Real,
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub rows: Vec<ProjectionRow>,
    /// True when the features were all identical, leaving no direction of
    /// variance; coordinates are all zero in that case.
    pub degenerate: bool,
}

/// Leading principal direction of the centered rows, orthogonal to `ortho`
/// when given. Returns (direction, variance along it).
fn power_component(rows: &[Vec<Real>], ortho: Option<&[Real]>) -> (Vec<Real>, Real) {
    let n = rows.len();
    let d = rows[0].len();
    let mut rng = Rng::new(derive_seed(0x9e3779b97f4a7c15, "pca/init"));
    let mut v: Vec<Real> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0) as Real).collect();
    let mut eig = 0.0;
    for _ in 0..500 {
        // w = (Xᵀ X / (n-1)) v without forming the covariance matrix.
        let mut w = vec![0.0; d];
        for row in rows {
            let dot: Real = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (acc, x) in w.iter_mut().zip(row) {
                *acc += dot * x;
            }
        }
        for x in w.iter_mut() {
            *x /= (n - 1) as Real;
        }
        if let Some(u) = ortho {
            let dot: Real = w.iter().zip(u).map(|(a, b)| a * b).sum();
            for (acc, x) in w.iter_mut().zip(u) {
                *acc -= dot * x;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<Real>().sqrt();
        if norm < 1e-15 {
            return (vec![0.0; d], 0.0);
        }
        let next: Vec<Real> = w.iter().map(|x| x / norm).collect();
        let drift: Real = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        eig = norm;
        if drift < 1e-13 {
            break;
        }
    }
    (v, eig)
}

/// Project features onto their two leading principal components.
pub fn project_features(features: &[HFeature]) -> Result<Projection> {
    if features.len() < 3 {
        return Err(Error::contract(
            "project_features",
            format!("need at least 3 features, got {}", features.len()),
        ));
    }
    let d = features[0].feature.numel();
    if features.iter().any(|f| f.feature.numel() != d) {
        return Err(Error::dimension("project_features", "features disagree on size"));
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (acc, v) in mean.iter_mut().zip(f.feature.data()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= n as Real;
    }
    let rows: Vec<Vec<Real>> = features
        .iter()
        .map(|f| f.feature.data().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let total_var: Real =
        rows.iter().flat_map(|r| r.iter()).map(|x| x * x).sum::<Real>() / (n - 1) as Real;
    if total_var < 1e-18 {
        let zero_rows = features
            .iter()
            .map(|f| ProjectionRow { image_id: f.image_id, domain: f.domain, t: f.t, pc1: 0.0, pc2: 0.0 })
            .collect();
        return Ok(Projection { rows: zero_rows, degenerate: true });
    }
    let (v1, _) = power_component(&rows, None);
    let (v2, _) = power_component(&rows, Some(&v1));
    let out = features
        .iter()
        .zip(&rows)
        .map(|(f, r)| ProjectionRow {
            image_id: f.image_id,
            domain: f.domain,
            t: f.t,
            pc1: r.iter().zip(&v1).map(|(a, b)| a * b).sum(),
            pc2: r.iter().zip(&v2).map(|(a, b)| a * b).sum(),
        })
        .collect();
    Ok(Projection { rows: out, degenerate: false })
}

/// CSV rendering: `image_id,domain,t,pc1,pc2`.
pub fn projection_csv(p: &Projection) -> String {
    let mut out = String::from("image_id,domain,t,pc1,pc2\n");
    for r in &p.rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.image_id, r.domain, r.t, r.pc1, r.pc2));
    }
    out
}
