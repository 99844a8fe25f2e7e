use crate::error::{MdeError, Result};
use crate::linalg::{self, CMat, RMat, C64};
use crate::superop::{SelfEnergy, SymmetryClass};
use nalgebra::DVector;

/// A random matrix model `H = A + W` described by its first two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub label: String,
    pub class: SymmetryClass,
    pub a: CMat,
    pub s: SelfEnergy,
    eff_diag: Option<DVector<f64>>,
    reduction: Option<DiagReduction>,
}

impl ModelSpec {
    pub fn new(label: impl Into<String>, class: SymmetryClass, a: CMat, s: SelfEnergy) -> Result<Self> {
        let n = s.n();
        if a.nrows() != a.ncols() {
            return Err(MdeError::InvalidModel(format!(
                "expectation matrix is {}x{}, not square",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() != n {
            return Err(MdeError::InvalidModel(format!(
                "expectation matrix has dimension {} but the self-energy has dimension {n}",
                a.nrows()
            )));
        }
        if a.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(MdeError::InvalidModel("expectation matrix has non-finite entries".into()));
        }
        let defect = (&a - a.adjoint()).camax();
        if defect > 1e-12 {
            return Err(MdeError::InvalidModel(format!(
                "expectation matrix is not Hermitian (defect {defect:e})"
            )));
        }
        if class.is_real() && a.iter().any(|v| v.im.abs() > 1e-12) {
            return Err(MdeError::InvalidModel(
                "expectation matrix must be real for the real symmetric class".into(),
            ));
        }
        if let SelfEnergy::VarianceProfile { second_moments, .. } = &s {
            if second_moments.is_some() != class.is_real() {
                return Err(MdeError::InvalidModel(
                    "variance profile was built for the other symmetry class".into(),
                ));
            }
        }
        let a = linalg::re_part(&a);
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] == C64::new(0.0, 0.0)));
        let eff_diag = (is_diag && s.diagonal_action().is_some())
            .then(|| DVector::from_fn(n, |i, _| a[(i, i)].re));
        let reduction = eff_diag
            .as_ref()
            .map(|d| DiagReduction::new(d, &s.diagonal_action().expect("diagonal model")));
        Ok(ModelSpec {
            label: label.into(),
            class,
            a,
            s,
            eff_diag,
            reduction,
        })
    }

    /// `A = 0`, `S[R] = s²⟨R⟩I` (complex) or its real-class analogue.
    pub fn flat(n: usize, class: SymmetryClass, scale: f64) -> Self {
        let label = if scale == 1.0 { "flat".to_string() } else { format!("flat_s{scale}") };
        ModelSpec::new(label, class, CMat::zeros(n, n), SelfEnergy::flat(n, class, scale))
            .expect("flat model is valid")
    }

    /// `A = diag(a,…,a,−a,…,−a)` with flat self-energy; the first `⌈N/2⌉` entries are `+a`.
    pub fn two_band(n: usize, class: SymmetryClass, a: f64) -> Self {
        let half = n.div_ceil(2);
        let am = CMat::from_fn(n, n, |i, j| {
            if i != j {
                C64::new(0.0, 0.0)
            } else if i < half {
                C64::new(a, 0.0)
            } else {
                C64::new(-a, 0.0)
            }
        });
        ModelSpec::new("two_band", class, am, SelfEnergy::flat(n, class, 1.0))
            .expect("two-band model is valid")
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Diagonal of `A` when both `A` and `S` preserve diagonal matrices, so that `M` is diagonal.
    pub fn diagonal_expectation(&self) -> Option<&DVector<f64>> {
        self.eff_diag.as_ref()
    }

    pub(crate) fn diag_reduction(&self) -> Option<&DiagReduction> {
        self.reduction.as_ref()
    }

    pub fn with_parts(&self, label: impl Into<String>, a: CMat, s: SelfEnergy) -> Result<Self> {
        ModelSpec::new(label, self.class, a, s)
    }

    /// Interval containing the self-consistent spectrum: `Spec A + [−2‖S‖^{1/2}, 2‖S‖^{1/2}]`.
    pub fn spectral_bounds(&self) -> (f64, f64) {
        let ev = linalg::herm_eigenvalues(&self.a);
        let n = self.n();
        let s_norm = linalg::op_norm(&self.s.act(&linalg::identity(n)));
        let r = 2.0 * s_norm.sqrt();
        (ev[0] - r, ev[n - 1] + r)
    }
}


/// Diagonal model restricted to one value per lumped index class.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DiagReduction {
    pub classes: Vec<usize>,
    pub reps: Vec<usize>,
    pub a: DVector<f64>,
    pub k: RMat,
}

impl DiagReduction {
    fn new(a: &DVector<f64>, k: &RMat) -> Self {
        let n = a.len();
        let (classes, reps) = lump(a, k);
        let nc = reps.len();
        let mut kr = RMat::zeros(nc, nc);
        for (ci, &r) in reps.iter().enumerate() {
            for c in 0..n {
                kr[(ci, classes[c])] += k[(r, c)];
            }
        }
        DiagReduction {
            a: DVector::from_fn(nc, |ci, _| a[reps[ci]]),
            k: kr,
            classes,
            reps,
        }
    }
}

fn quantize(v: f64, scale: f64) -> i64 {
    (v / scale * 1e12).round() as i64
}

/// Coarsest partition on which `a` is constant and every row sum of `K` over each class
/// depends only on the row's class. The diagonal solution is constant on such classes.
fn lump(a: &DVector<f64>, k: &RMat) -> (Vec<usize>, Vec<usize>) {
    let n = a.len();
    let scale_a = a.amax().max(1e-300);
    let scale_k = k.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300) * n as f64;
    let group = |keys: Vec<Vec<i64>>| {
        let mut ids = std::collections::HashMap::new();
        let mut class = vec![0; n];
        let mut reps = Vec::new();
        for (i, key) in keys.into_iter().enumerate() {
            let next = ids.len();
            let id = *ids.entry(key).or_insert(next);
            if id == reps.len() {
                reps.push(i);
            }
            class[i] = id;
        }
        (class, reps)
    };
    let (mut class, mut reps) =
        group((0..n).map(|i| vec![quantize(a[i], scale_a), quantize(k[(i, i)], scale_k)]).collect());
    loop {
        if reps.len() * 4 > n * 3 {
            return ((0..n).collect(), (0..n).collect());
        }
        let nc = reps.len();
        let keys = (0..n)
            .map(|i| {
                let mut sums = vec![0.0; nc];
                for c in 0..n {
                    sums[class[c]] += k[(i, c)];
                }
                let mut key = vec![class[i] as i64];
                key.extend(sums.iter().map(|&v| quantize(v, scale_k)));
                key
            })
            .collect();
        let (next, next_reps) = group(keys);
        if next_reps.len() == nc {
            return (class, reps);
        }
        class = next;
        reps = next_reps;
    }
}
