//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that near-zero gradients are
/// judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled per parameter tensor; `None` checks every entry.
    pub entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries whose +h / -h evaluations switched a ReLU on or off and
    /// were therefore not comparable.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = other.max_rel_error;
            self.worst_param = other.worst_param;
            self.worst_index = other.worst_index;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Runs `build` once and backpropagates from the loss it returns.
pub fn analytic_grads<F>(store: &ParamStore, build: &mut F) -> Result<(f64, Grads, u64)>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    let value = tape.scalar(loss)?;
    let pattern = tape.relu_pattern();
    let grads = tape.backward(loss)?;
    Ok((value, grads, pattern))
}

fn eval_loss<F>(store: &ParamStore, build: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    Ok((tape.scalar(loss)?, tape.relu_pattern()))
}

/// Compares `analytic` against `(f(θ+h) - f(θ-h)) / 2h` entry by entry.
/// Missing analytic gradients count as zero.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    analytic: &Grads,
    base_pattern: u64,
    opts: &GradCheckOptions,
    build: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let h = opts.step;
    for &id in params {
        let n = store.value(id).len();
        let entries: Vec<usize> = match opts.entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut local = GradCheckReport {
            worst_param: store.name(id).to_string(),
            ..Default::default()
        };
        for idx in entries {
            let orig = store.value(id).as_slice()[idx];
            store.value_mut(id).as_mut_slice()[idx] = orig + h;
            let plus = eval_loss(store, build);
            store.value_mut(id).as_mut_slice()[idx] = orig - h;
            let minus = eval_loss(store, build);
            store.value_mut(id).as_mut_slice()[idx] = orig;
            let ((fp, pp), (fm, pm)) = (plus?, minus?);
            if pp != base_pattern || pm != base_pattern {
                local.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.as_slice()[idx]);
            let err = relative_error(a, numeric);
            local.checked += 1;
            if err > local.max_rel_error {
                local.max_rel_error = err;
                local.worst_index = idx;
            }
        }
        report.merge(local);
    }
    Ok(report)
}

/// Full check: analytic gradients from one backward pass, then central
/// differences over `params`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: &GradCheckOptions,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let (_, grads, pattern) = analytic_grads(store, &mut build)?;
    compare_with_finite_differences(store, params, &grads, pattern, opts, &mut build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let w = store.register("w", Matrix::row_vector(vec![0.3, -0.7, 1.1])).unwrap();
        let coeffs = Matrix::row_vector(vec![2.0, -1.0, 0.5]);
        let (_, grads, _) = analytic_grads(&store, &mut |t: &mut Tape| {
            let p = t.param(w);
            let c = t.input(coeffs.clone());
            let m = t.mul(p, c)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), coeffs.as_slice());
    }

    type Build = fn(&mut Tape, &[Var], &[Matrix]) -> Result<Var>;

    /// Each op followed by a random linear read-out, over 20 seeds.
    #[test]
    fn every_op_matches_central_differences() {
        let cases: Vec<(&str, Vec<(usize, usize)>, Build)> = vec![
            ("dense", vec![(3, 4), (5, 4), (1, 5)], |t, p, _| t.dense(p[0], p[1], Some(p[2]))),
            ("dense_no_bias", vec![(3, 4), (5, 4)], |t, p, _| t.dense(p[0], p[1], None)),
            ("add", vec![(2, 3), (2, 3)], |t, p, _| t.add(p[0], p[1])),
            ("mul", vec![(2, 3), (2, 3)], |t, p, _| t.mul(p[0], p[1])),
            ("scale", vec![(2, 3)], |t, p, _| Ok(t.scale(p[0], -1.7))),
            ("relu", vec![(3, 5)], |t, p, _| Ok(t.relu(p[0]))),
            ("sigmoid", vec![(3, 5)], |t, p, _| Ok(t.sigmoid(p[0]))),
            ("mul_col", vec![(3, 4), (3, 1)], |t, p, _| t.mul_col(p[0], p[1])),
            ("div_col", vec![(3, 4), (3, 1)], |t, p, _| {
                let s = t.mul(p[1], p[1])?;
                let one = t.input(Matrix::filled(3, 1, 0.5));
                let d = t.add(s, one)?;
                t.div_col(p[0], d)
            }),
            ("concat", vec![(2, 3), (2, 1), (2, 2)], |t, p, _| t.concat(&[p[0], p[1], p[2]])),
            ("reshape", vec![(2, 6)], |t, p, _| t.reshape(p[0], 4, 3)),
            ("attention", vec![(8, 3), (8, 3), (8, 3)], |t, p, _| t.attention(p[0], p[1], p[2], 4)),
            ("focal", vec![(3, 5)], |t, p, x| t.focal_loss(p[0], x[0].clone(), 2.0)),
            ("focal_gamma0", vec![(3, 5)], |t, p, x| t.focal_loss(p[0], x[0].clone(), 0.0)),
            ("uncertainty", vec![(1, 1), (1, 1), (1, 2)], |t, p, _| {
                let a = t.mul(p[0], p[0])?;
                let b = t.mul(p[1], p[1])?;
                t.uncertainty_total(&[a, b], p[2])
            }),
        ];
        for (name, shapes, build) in cases {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let ids: Vec<ParamId> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, &(r, c))| store.register(format!("p{i}"), random(&mut rng, r, c)).unwrap())
                    .collect();
                let mut targets = random(&mut rng, 3, 5).map(f64::abs);
                for r in 0..3 {
                    let s: f64 = targets.row(r).iter().sum();
                    targets.row_mut(r).iter_mut().for_each(|v| *v /= s);
                }
                let extra = vec![targets];
                let probe_seed = seed ^ 0xFF;
                let report = grad_check(&mut store, &ids, &GradCheckOptions::default(), |t| {
                    let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                    let out = build(t, &vars, &extra)?;
                    let (r, c) = t.shape(out);
                    let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
                    let probe = t.input(random(&mut prng, r, c));
                    let m = t.mul(out, probe)?;
                    Ok(t.sum(m))
                })
                .unwrap();
                assert!(report.passed(1e-6), "{name} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.register("w", random(&mut rng, 4, 3)).unwrap();
        let x = random(&mut rng, 2, 3);
        let mut build = |t: &mut Tape| {
            let p = t.param(w);
            let xi = t.input(x.clone());
            let y = t.dense(xi, p, None)?;
            let s = t.sigmoid(y);
            Ok(t.sum(s))
        };
        let (_, mut grads, pattern) = analytic_grads(&store, &mut build).unwrap();
        let clean = compare_with_finite_differences(&mut store, &[w], &grads, pattern, &GradCheckOptions::default(), &mut build).unwrap();
        assert!(clean.passed(1e-6));
        grads.slots[w.0].as_mut().unwrap().as_mut_slice()[5] *= 1.01;
        let bad = compare_with_finite_differences(&mut store, &[w], &grads, pattern, &GradCheckOptions::default(), &mut build).unwrap();
        assert!(!bad.passed(1e-4));
        assert_eq!(bad.worst_index, 5);
    }
}
