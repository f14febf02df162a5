//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Module, Tensor};

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.scalar(out))
}

/// Max over every input coordinate of `|analytic − fd| / max(1, |fd|)`.
///
/// `f` builds the function from leaves bound to `inputs`, all of which are
/// treated as differentiable.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Gradient check over the trainable parameters of a module.
///
/// With `coords_per_param = Some(n)`, at most `n` coordinates of each
/// parameter tensor are probed, chosen by `seed`; otherwise all of them.
/// Frozen parameters are skipped.
pub fn grad_check_module<M, F>(module: &mut M, f: F, coords_per_param: Option<usize>, seed: u64) -> Result<f64>
where
    M: Module,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, module)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut targets: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.visit_params(&mut |p| {
        if !p.value.requires_grad() {
            return;
        }
        let n = p.value.len();
        let idx: Vec<usize> = match coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.param(&p.name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        targets.push((p.name.clone(), idx, analytic));
    });

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, m)?;
        eval_scalar(&g, out)
    };
    let nudge = |m: &mut M, name: &str, j: usize, delta: f64| {
        m.visit_params_mut(&mut |p| {
            if p.name == name {
                p.value.data_mut()[j] += delta;
            }
        });
    };

    let mut worst: f64 = 0.0;
    for (name, idx, analytic) in &targets {
        for &j in idx {
            let orig = find_value(module, name, j);
            nudge(module, name, j, FD_STEP);
            let up = eval(module)?;
            set_value(module, name, j, orig - FD_STEP);
            let down = eval(module)?;
            set_value(module, name, j, orig);
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

fn find_value<M: Module>(m: &M, name: &str, j: usize) -> f64 {
    let mut out = f64::NAN;
    m.visit_params(&mut |p| {
        if p.name == name {
            out = p.value.data()[j];
        }
    });
    out
}

fn set_value<M: Module>(m: &mut M, name: &str, j: usize, v: f64) {
    m.visit_params_mut(&mut |p| {
        if p.name == name {
            p.value.data_mut()[j] = v;
        }
    });
}
