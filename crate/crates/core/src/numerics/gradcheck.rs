//! Central finite-difference verification of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Relative error between analytic `a` and numeric `n`, with magnitudes below
/// `floor` treated as `floor` so tiny gradients are compared absolutely.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| b.max_rel_err >= self.tolerance).collect()
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` receives a fresh tape plus one leaf per entry of `inputs` and must
/// return the scalar output. Every element of every input is perturbed unless
/// `max_per_block` caps it, in which case an evenly spaced subset is checked.
pub fn check_gradients<F>(
    inputs: &[(String, Tensor<f64>)],
    build: F,
    tolerance: f64,
    max_per_block: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[b]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let numel = t.numel();
        let stride = match max_per_block {
            Some(cap) if cap > 0 && numel > cap => numel.div_ceil(cap),
            _ => 1,
        };
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in (0..numel).step_by(stride) {
            let orig = values[b].data()[i];
            values[b].data_mut()[i] = orig + FD_EPS;
            let up = eval(&values)?;
            values[b].data_mut()[i] = orig - FD_EPS;
            let down = eval(&values)?;
            values[b].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(analytic.data()[i], numeric, 1e-4));
            checked += 1;
        }
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_err: worst,
            checked,
        });
    }
    Ok(GradCheckReport { tolerance, blocks })
}

/// A primitive op reduced to a scalar with fixed non-uniform weights.
#[derive(Clone)]
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Builder,
}

impl OpCase {
    /// Checks the case on inputs drawn uniformly from `[-1, 1)` with `seed`.
    pub fn check(&self, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = self
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{}.{i}", self.name), Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0))))
            .collect();
        check_gradients(&inputs, self.build, tolerance, None)
    }
}

pub type Builder = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Every primitive wrapped into a scalar so its gradient can be checked.
pub fn op_suite() -> Vec<OpCase> {
    fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let w = Tensor::from_fn(g.value(y).shape(), |i| ((i * 7 % 5) as f64 - 1.7) * 0.3);
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        g.sum(p)
    }
    let cases: Vec<(&'static str, Vec<Vec<usize>>, Builder)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            weighted(g, y)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            weighted(g, c)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted(g, y)
        }),
        ("scale_rows", vec![vec![3, 2]], |g, v| {
            let y = g.scale_rows(v[0], &[0.5, -2.0, 1.5])?;
            let y = g.scale(y, 0.7)?;
            weighted(g, y)
        }),
        ("concat_split", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let parts = g.split_cols(c, &[1, 4])?;
            let a = g.gelu(parts[0])?;
            let b = weighted(g, parts[1])?;
            let a = weighted(g, a)?;
            g.add(a, b)
        }),
        ("softmax", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0])?;
            weighted(g, y)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(g, y)
        }),
        ("gelu", vec![vec![4, 3]], |g, v| {
            let y = g.gelu(v[0])?;
            weighted(g, y)
        }),
        ("gather", vec![vec![5, 3]], |g, v| {
            let y = g.gather(v[0], &[4, 0, 4, 2])?;
            weighted(g, y)
        }),
        ("mse_mean", vec![vec![3, 3], vec![3, 3]], |g, v| {
            let a = g.mse(v[0], v[1])?;
            let m = g.mean(v[0])?;
            g.add(a, m)
        }),
        ("masked_fill", vec![vec![2, 4]], |g, v| {
            let y = g.masked_fill(v[0], &[false, true, false, true], -1e9)?;
            let y = g.softmax(y)?;
            weighted(g, y)
        }),
        ("neg_sq_dist", vec![vec![3, 2], vec![5, 2]], |g, v| {
            let y = g.neg_sq_dist(v[0], v[1])?;
            weighted(g, y)
        }),
        ("cross_entropy", vec![vec![4, 5]], |g, v| g.cross_entropy(v[0], &[0, 3, 4, 1], &[1.0, 0.0, 0.5, 2.0])),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, build)| OpCase { name, shapes, build })
        .collect()
}
