use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Gradients, Parameters};

/// Flat scalar access for finite-difference probing.
pub trait Probe {
    fn num_scalars(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
}

impl Probe for Vec<f64> {
    fn num_scalars(&self) -> usize {
        self.len()
    }
    fn get(&self, i: usize) -> f64 {
        self[i]
    }
    fn set(&mut self, i: usize, v: f64) {
        self[i] = v;
    }
}

fn locate(sizes: impl Iterator<Item = usize>, mut i: usize) -> (usize, usize) {
    for (slot, n) in sizes.enumerate() {
        if i < n {
            return (slot, i);
        }
        i -= n;
    }
    panic!("scalar index out of range");
}

impl Probe for Parameters {
    fn num_scalars(&self) -> usize {
        Parameters::num_scalars(self)
    }
    fn get(&self, i: usize) -> f64 {
        let (s, j) = locate(self.tensors().iter().map(|t| t.data.len()), i);
        self.tensors()[s].data[j]
    }
    fn set(&mut self, i: usize, v: f64) {
        let (s, j) = locate(self.tensors().iter().map(|t| t.data.len()), i);
        self.tensors_mut()[s].data[j] = v;
    }
}

impl Gradients {
    /// Slot-major flattening matching [`Probe`] indices on [`Parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.slots.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(scalar index, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, f64, f64)>,
    pub tol: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that gradients indistinguishable from zero at
/// finite-difference resolution are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences (`h = 1e-5`) at
/// `n_probes` randomly chosen scalars. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`; passes iff the maximum is `< tol`.
pub fn grad_check<P, F>(
    params: &mut P,
    loss_fn: F,
    analytic: &[f64],
    n_probes: usize,
    tol: f64,
    seed: u64,
) -> GradCheckReport
where
    P: Probe,
    F: Fn(&P) -> f64,
{
    assert_eq!(
        analytic.len(),
        params.num_scalars(),
        "analytic gradient size"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for _ in 0..n_probes {
        let i = rng.gen_range(0..params.num_scalars());
        let orig = params.get(i);
        params.set(i, orig + FD_STEP);
        let up = loss_fn(params);
        params.set(i, orig - FD_STEP);
        let down = loss_fn(params);
        params.set(i, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some((i, a, numeric));
        }
    }
    GradCheckReport {
        probes: n_probes,
        max_rel_error: max_rel,
        worst,
        tol,
        passed: n_probes > 0 && max_rel < tol,
    }
}
