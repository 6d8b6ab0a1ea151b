//! Central finite-difference verification of analytic parameter gradients,
//! shared by the module-level and end-to-end test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::adam::GradMap;
use crate::nn::params::{ParamId, ParamStore};

/// Worst observed deviation of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

/// Perturb parameter entries by `±h` and compare the central difference of
/// a scalar loss against the analytic gradient. `ctx` owns the parameters;
/// `store_access` exposes them and `eval` re-runs the forward pass. Probes
/// must be side-effect free (run batch-norm in the frozen phase).
///
/// `max_entries_per_param = 0` probes every entry. The relative error
/// denominator is `max(|analytic|, |fd|, 1)` so near-zero gradients compare
/// absolutely.
pub fn fd_sweep<C>(
    ctx: &mut C,
    store_access: impl Fn(&mut C) -> &mut ParamStore<f64>,
    mut eval: impl FnMut(&mut C) -> f64,
    ids: &[ParamId],
    analytic: &GradMap<f64>,
    h: f64,
    max_entries_per_param: usize,
    seed: u64,
) -> SweepReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SweepReport {
        max_rel: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for &id in ids {
        let len = store_access(ctx).get(id).len();
        if len == 0 {
            continue;
        }
        let entries: Vec<usize> = if max_entries_per_param == 0 || len <= max_entries_per_param {
            (0..len).collect()
        } else {
            (0..max_entries_per_param)
                .map(|_| rng.gen_range(0..len))
                .collect()
        };
        for e in entries {
            let a = analytic.get(id).map_or(0.0, |g| g.data[e]);
            let original = store_access(ctx).get(id).data[e];
            store_access(ctx).get_mut(id).data[e] = original + h;
            let plus = eval(ctx);
            store_access(ctx).get_mut(id).data[e] = original - h;
            let minus = eval(ctx);
            store_access(ctx).get_mut(id).data[e] = original;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel {
                let name = store_access(ctx).name(id).to_string();
                report.max_rel = rel;
                report.worst = format!("{name}[{e}]: analytic {a:.6e} vs fd {fd:.6e}");
            }
        }
    }
    report
}
