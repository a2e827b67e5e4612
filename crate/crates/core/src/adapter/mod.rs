//! Low-rank adapters: the `delta W = scale * B * A` parameterization, the
//! standard and orthogonalized initialization schemes, merge arithmetic,
//! and the on-disk tensor container format.

mod file;

pub use file::{
    load_adapter, load_adapter_file, load_weights, save_adapter, save_adapter_file, save_weights,
    AdapterFile, FormatError, RawTensor, TensorDtype,
};

use crate::numkit::{orthonormal_rowspace_basis, Matrix, NumError, Rng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("rank {r} out of range for a {m}x{n} target")]
    RankOutOfRange { r: usize, m: usize, n: usize },
    #[error("adapter '{name}' delta is {dr}x{dc} but target is {tr}x{tc}")]
    DeltaShape {
        name: String,
        dr: usize,
        dc: usize,
        tr: usize,
        tc: usize,
    },
    #[error("accumulated rows already span the full input space (rank {rank} of {n})")]
    ComplementEmpty { rank: usize, n: usize },
    #[error("accumulated matrix is {got_r}x{got_n}, expected {r}x{n}")]
    AccumulatorShape {
        got_r: usize,
        got_n: usize,
        r: usize,
        n: usize,
    },
    #[error("duplicate layer name '{0}'")]
    DuplicateLayer(String),
    #[error("no layer named '{0}'")]
    UnknownLayer(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// How a fresh adapter's `A` factor is oriented against the accumulated
/// `A` matrices of earlier tasks.
///
/// Both modes approximate the same intent (steer new tasks away from old
/// directions) from two readings of an ambiguous construction: `Project`
/// removes the accumulated row space from a random init, `SvdMin` uses the
/// single direction paired with the smallest singular value, which yields
/// a rank-1 factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthMode {
    Project,
    SvdMin,
}

impl Default for OrthMode {
    fn default() -> Self {
        OrthMode::Project
    }
}

/// A low-rank adapter: `delta W = scale * b * a` with `a: r x n`,
/// `b: m x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl LoraAdapter {
    /// Conventional default for the init std of `A`: `1/sqrt(r)`, which
    /// keeps the delta's gradient scale rank-independent.
    pub fn default_std(r: usize) -> f64 {
        1.0 / (r as f64).sqrt()
    }

    /// Standard init: `A ~ N(0, std_a^2)`, `B = 0`, so the initial delta
    /// is exactly zero.
    pub fn init_standard(
        rng: &mut Rng,
        name: impl Into<String>,
        m: usize,
        n: usize,
        r: usize,
        std_a: f64,
    ) -> Result<Self, AdapterError> {
        if r == 0 || r > m.min(n) {
            return Err(AdapterError::RankOutOfRange { r, m, n });
        }
        Ok(Self {
            name: name.into(),
            a: rng.normal_matrix(r, n, std_a),
            b: Matrix::zeros(m, r),
            scale: 1.0,
        })
    }

    /// Orthogonalized init: `B = 0` and `A` oriented against `acc_a`, the
    /// elementwise sum of the `A` factors trained so far.
    ///
    /// `Project` draws a standard-normal `A` and removes the component
    /// inside `acc_a`'s row space, so every row of the result is orthogonal
    /// to every row of `acc_a`. `SvdMin` instead scales the right singular
    /// vector of `acc_a`'s smallest singular value by one normal draw per
    /// row, which gives the same orthogonality with a rank-1 `A`.
    pub fn init_orthogonal(
        rng: &mut Rng,
        acc_a: &Matrix,
        name: impl Into<String>,
        m: usize,
        n: usize,
        r: usize,
        std_a: f64,
        mode: OrthMode,
    ) -> Result<Self, AdapterError> {
        if r == 0 || r > m.min(n) {
            return Err(AdapterError::RankOutOfRange { r, m, n });
        }
        if acc_a.shape() != (r, n) {
            return Err(AdapterError::AccumulatorShape {
                got_r: acc_a.rows(),
                got_n: acc_a.cols(),
                r,
                n,
            });
        }
        let a = match mode {
            OrthMode::Project => {
                let q = orthonormal_rowspace_basis(acc_a)?;
                if q.rows() >= n {
                    return Err(AdapterError::ComplementEmpty { rank: q.rows(), n });
                }
                let g = rng.normal_matrix(r, n, std_a);
                if q.rows() == 0 {
                    g
                } else {
                    // Two projection passes; the second mops up rounding.
                    let once = project_out(&g, &q)?;
                    project_out(&once, &q)?
                }
            }
            OrthMode::SvdMin => {
                let svd = acc_a.svd()?;
                if svd.rank(r, n) >= n {
                    return Err(AdapterError::ComplementEmpty { rank: n, n });
                }
                // Last column of the full V pairs with the smallest
                // singular value; for rank < n it lies in the null space.
                let v_min: Vec<f64> = (0..n).map(|i| svd.v.get(i, n - 1)).collect();
                let gains = rng.normal_vec(r, std_a);
                Matrix::from_fn(r, n, |i, j| gains[i] * v_min[j])
            }
        };
        Ok(Self {
            name: name.into(),
            a,
            b: Matrix::zeros(m, r),
            scale: 1.0,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// The weight update this adapter contributes: `scale * b * a`.
    pub fn delta(&self) -> Result<Matrix, AdapterError> {
        Ok(self.b.matmul(&self.a)?.scaled(self.scale))
    }

    pub fn delta_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }
}

fn project_out(g: &Matrix, q: &Matrix) -> Result<Matrix, NumError> {
    // g - (g q^T) q removes the row-space component spanned by q.
    let coeff = g.matmul(&q.transpose())?;
    g.sub(&coeff.matmul(q)?)
}

/// `base + delta(adapter)`; shapes must line up.
pub fn merge(base: &Matrix, adapter: &LoraAdapter) -> Result<Matrix, AdapterError> {
    let (dr, dc) = adapter.delta_shape();
    if (dr, dc) != base.shape() {
        return Err(AdapterError::DeltaShape {
            name: adapter.name.clone(),
            dr,
            dc,
            tr: base.rows(),
            tc: base.cols(),
        });
    }
    Ok(base.add(&adapter.delta()?)?)
}

/// Named base weights, one matrix per adapted layer. Shapes are fixed for
/// the lifetime of an experiment and names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    layers: Vec<(String, Matrix)>,
}

impl BaseWeights {
    pub fn new(layers: Vec<(String, Matrix)>) -> Result<Self, AdapterError> {
        for i in 0..layers.len() {
            for j in i + 1..layers.len() {
                if layers[i].0 == layers[j].0 {
                    return Err(AdapterError::DuplicateLayer(layers[i].0.clone()));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn single(name: impl Into<String>, w: Matrix) -> Self {
        Self {
            layers: vec![(name.into(), w)],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[(String, Matrix)] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &Matrix {
        &self.layers[idx].1
    }

    pub fn layer_name(&self, idx: usize) -> &str {
        &self.layers[idx].0
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    /// Add one adapter's delta to the matching layer, by name.
    pub fn merge_adapter(&self, adapter: &LoraAdapter) -> Result<BaseWeights, AdapterError> {
        let mut layers = self.layers.clone();
        let slot = layers
            .iter_mut()
            .find(|(n, _)| *n == adapter.name)
            .ok_or_else(|| AdapterError::UnknownLayer(adapter.name.clone()))?;
        slot.1 = merge(&slot.1, adapter)?;
        Ok(BaseWeights { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::new(77)
    }

    #[test]
    fn standard_init_has_zero_delta() {
        let mut r = rng();
        let ad = LoraAdapter::init_standard(&mut r, "w", 6, 9, 3, 0.5).unwrap();
        assert!(ad.delta().unwrap().is_zero());
        let base = r.normal_matrix(6, 9, 1.0);
        let merged = merge(&base, &ad).unwrap();
        assert_eq!(merged, base);
    }

    #[test]
    fn standard_init_default_std_statistics() {
        let mut r = rng();
        let std_a = LoraAdapter::default_std(4);
        let ad = LoraAdapter::init_standard(&mut r, "w", 4, 2500, 4, std_a).unwrap();
        let data = ad.a.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.5).abs() < 0.02, "sample std {std}");
    }

    #[test]
    fn standard_init_deterministic() {
        let a = LoraAdapter::init_standard(&mut Rng::new(3), "w", 5, 7, 2, 0.3).unwrap();
        let b = LoraAdapter::init_standard(&mut Rng::new(3), "w", 5, 7, 2, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_out_of_range() {
        let mut r = rng();
        assert!(matches!(
            LoraAdapter::init_standard(&mut r, "w", 4, 8, 5, 0.5),
            Err(AdapterError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            LoraAdapter::init_standard(&mut r, "w", 4, 8, 0, 0.5),
            Err(AdapterError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn delta_hand_case() {
        // m=n=2, r=1, A=[[1,2]], B=[[1],[0]], scale=1, base=I2.
        let ad = LoraAdapter {
            name: "w".into(),
            a: Matrix::new(1, 2, vec![1.0, 2.0]).unwrap(),
            b: Matrix::new(2, 1, vec![1.0, 0.0]).unwrap(),
            scale: 1.0,
        };
        let merged = merge(&Matrix::identity(2), &ad).unwrap();
        assert_eq!(merged.data(), &[2.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_scale_merge_is_base() {
        let mut r = rng();
        let mut ad = LoraAdapter::init_standard(&mut r, "w", 3, 4, 2, 0.5).unwrap();
        ad.b = r.normal_matrix(3, 2, 1.0);
        ad.scale = 0.0;
        let base = r.normal_matrix(3, 4, 1.0);
        assert_eq!(merge(&base, &ad).unwrap(), base);
    }

    #[test]
    fn orthogonal_project_empty_accumulator_matches_standard() {
        let acc = Matrix::zeros(3, 8);
        let a = LoraAdapter::init_orthogonal(
            &mut Rng::new(4),
            &acc,
            "w",
            6,
            8,
            3,
            0.5,
            OrthMode::Project,
        )
        .unwrap();
        let b = LoraAdapter::init_standard(&mut Rng::new(4), "w", 6, 8, 3, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonal_project_kills_covered_direction() {
        let acc = Matrix::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let ad = LoraAdapter::init_orthogonal(
            &mut rng(),
            &acc,
            "w",
            4,
            4,
            1,
            0.5,
            OrthMode::Project,
        )
        .unwrap();
        assert!(ad.a.get(0, 0).abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_modes_inner_product_oracle() {
        let mut r = rng();
        let acc = r.normal_matrix(4, 64, 0.8);
        for mode in [OrthMode::Project, OrthMode::SvdMin] {
            let ad =
                LoraAdapter::init_orthogonal(&mut r, &acc, "w", 16, 64, 4, 0.5, mode).unwrap();
            let cross = ad.a.matmul(&acc.transpose()).unwrap();
            assert!(
                cross.max_abs() <= 1e-9,
                "{mode:?} cross talk {}",
                cross.max_abs()
            );
            assert!(ad.b.is_zero());
        }
    }

    #[test]
    fn svd_min_init_is_rank_one() {
        let mut r = rng();
        let acc = r.normal_matrix(4, 32, 1.0);
        let ad = LoraAdapter::init_orthogonal(&mut r, &acc, "w", 8, 32, 4, 0.5, OrthMode::SvdMin)
            .unwrap();
        let svd = ad.a.svd().unwrap();
        assert!(svd.sigma[1] <= 1e-10 * svd.sigma[0].max(1e-300));
    }

    #[test]
    fn complement_empty_error() {
        // r = n = 3 and a full-rank accumulator leaves no room.
        let acc = Matrix::identity(3);
        let err = LoraAdapter::init_orthogonal(
            &mut rng(),
            &acc,
            "w",
            3,
            3,
            3,
            0.5,
            OrthMode::Project,
        )
        .unwrap_err();
        assert!(matches!(err, AdapterError::ComplementEmpty { .. }));
    }

    #[test]
    fn scale_linearity() {
        let mut r = rng();
        let mut ad = LoraAdapter::init_standard(&mut r, "w", 5, 6, 2, 0.5).unwrap();
        ad.b = r.normal_matrix(5, 2, 1.0);
        let unit = ad.delta().unwrap();
        ad.scale = -2.5;
        let scaled = ad.delta().unwrap();
        for (u, s) in unit.data().iter().zip(scaled.data()) {
            let want = -2.5 * u;
            let tol = 1e-15 * want.abs().max(1e-300);
            assert!((s - want).abs() <= tol);
        }
    }

    #[test]
    fn merge_is_additive() {
        let mut r = rng();
        let base = r.normal_matrix(5, 6, 1.0);
        let mk = |r: &mut Rng| {
            let mut ad = LoraAdapter::init_standard(r, "w", 5, 6, 2, 0.5).unwrap();
            ad.b = r.normal_matrix(5, 2, 1.0);
            ad
        };
        let d1 = mk(&mut r);
        let d2 = mk(&mut r);
        let chained = merge(&merge(&base, &d1).unwrap(), &d2).unwrap();
        let summed = base
            .add(&d1.delta().unwrap())
            .unwrap()
            .add(&d2.delta().unwrap())
            .unwrap();
        assert!(chained.sub(&summed).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn base_weights_unique_names() {
        let w = Matrix::zeros(2, 2);
        assert!(BaseWeights::new(vec![
            ("a".into(), w.clone()),
            ("a".into(), w.clone())
        ])
        .is_err());
    }
}
