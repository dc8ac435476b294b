//! Central finite-difference verification of the analytic gradients.
//! Always runs in f64; f32 rounding would drown the comparison.

use std::collections::BTreeMap;

use super::params::{Graph, ParamStore};
use super::tape::NodeId;
use super::Tensor;

/// Per-parameter worst relative error between analytic and numeric grads.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.values().all(|&e| e < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.per_param {
            let mark = if *err < self.tol { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {name}: max rel err {err:.3e}")?;
        }
        write!(
            f,
            "{} ({} params, tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.per_param.len(),
            self.tol
        )
    }
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences for every coordinate of every parameter.
///
/// `build` must be deterministic given the store contents; it is re-run
/// 2 x numel times for the numeric side.
pub fn grad_check<B>(store: &ParamStore<f64>, build: B, h: f64, tol: f64) -> GradCheckReport
where
    B: Fn(&mut Graph<'_, f64>) -> NodeId,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    let analytic = g.grads_by_name(loss);
    compare_to_fd(store, &build, &analytic, h, tol)
}

/// FD comparison against a caller-supplied gradient map. `grad_check` feeds
/// it the tape's own output; tests feed it corrupted maps as a negative
/// control.
pub(crate) fn compare_to_fd<B>(
    store: &ParamStore<f64>,
    build: &B,
    analytic: &BTreeMap<String, Tensor<f64>>,
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    B: Fn(&mut Graph<'_, f64>) -> NodeId,
{
    let mut per_param = BTreeMap::new();
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in names {
        let numel = store.get(&name).unwrap().numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let lp = eval_loss(&work, build);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let lm = eval_loss(&work, build);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
        per_param.insert(name, worst);
    }
    GradCheckReport { per_param, tol }
}

fn eval_loss<B>(store: &ParamStore<f64>, build: &B) -> f64
where
    B: Fn(&mut Graph<'_, f64>) -> NodeId,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    g.value(loss).item()
}

/// Symmetric relative error with a magnitude floor: coordinates whose
/// gradients sit below the floor compare quasi-absolutely, since central
/// differences bottom out around h^2 x curvature and would otherwise
/// report pure roundoff as disagreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-3);
    (a - b).abs() / denom
}

/// Run every forward primitive through a finite-difference check with
/// random shapes drawn from `seed`. The report keys are primitive names;
/// each value is the worst relative error over that primitive's inputs.
pub fn primitive_battery(seed: u64, h: f64, tol: f64) -> GradCheckReport {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = BTreeMap::new();

    // Random tensor with values bounded away from the relu kink.
    let randt = |rng: &mut ChaCha8Rng, shape: Vec<usize>| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data)
    };

    let mut run = |name: &str, store: ParamStore<f64>, build: Box<dyn Fn(&mut Graph<'_, f64>) -> NodeId>| {
        let report = grad_check(&store, build.as_ref(), h, tol);
        per_param.insert(name.to_string(), report.worst());
    };

    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));

    // matmul
    {
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![m, k]));
        store.insert("b", randt(&mut rng, vec![k, n]));
        let w = randt(&mut rng, vec![m, n]);
        run(
            "matmul",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let b = g.param("b");
                let c = g.tape.matmul(a, b);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(c, wc);
                g.tape.sum(p)
            }),
        );
    }

    // add / mul across the three broadcast forms
    for (op, name) in [(0, "add"), (1, "mul")] {
        for (form, suffix) in [(0, "same"), (1, "scalar"), (2, "leading")] {
            let mut store = ParamStore::new();
            store.insert("a", randt(&mut rng, vec![m, n]));
            let b_shape = match form {
                0 => vec![m, n],
                1 => vec![1],
                _ => vec![n],
            };
            store.insert("b", randt(&mut rng, b_shape));
            let w = randt(&mut rng, vec![m, n]);
            run(
                &format!("{name}_{suffix}"),
                store,
                Box::new(move |g| {
                    let a = g.param("a");
                    let b = g.param("b");
                    let c = if op == 0 { g.tape.add(a, b) } else { g.tape.mul(a, b) };
                    let wc = g.constant(w.clone());
                    let p = g.tape.mul(c, wc);
                    g.tape.sum(p)
                }),
            );
        }
    }

    // unary elementwise
    for name in ["scale", "relu", "gelu", "sigmoid", "tanh", "log"] {
        let mut store = ParamStore::new();
        let mut a = randt(&mut rng, vec![m, n]);
        if name == "log" {
            for v in a.data_mut() {
                *v = v.abs() + 0.1;
            }
        }
        store.insert("a", a);
        let w = randt(&mut rng, vec![m, n]);
        let op_name = name.to_string();
        run(
            name,
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let c = match op_name.as_str() {
                    "scale" => g.tape.scale(a, 1.7),
                    "relu" => g.tape.relu(a),
                    "gelu" => g.tape.gelu(a),
                    "sigmoid" => g.tape.sigmoid(a),
                    "tanh" => g.tape.tanh(a),
                    _ => g.tape.log(a),
                };
                let wc = g.constant(w.clone());
                let p = g.tape.mul(c, wc);
                g.tape.sum(p)
            }),
        );
    }

    // softmax over the last axis, weighted so the gradient is nontrivial
    {
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![m, n.max(2)]));
        let w = randt(&mut rng, vec![m, n.max(2)]);
        run(
            "softmax_last",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let s = g.tape.softmax_last(a);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(s, wc);
                g.tape.sum(p)
            }),
        );
    }

    // layer_norm
    {
        let d = n.max(2);
        let mut store = ParamStore::new();
        store.insert("x", randt(&mut rng, vec![m, d]));
        store.insert("gamma", randt(&mut rng, vec![d]));
        store.insert("beta", randt(&mut rng, vec![d]));
        let w = randt(&mut rng, vec![m, d]);
        run(
            "layer_norm",
            store,
            Box::new(move |g| {
                let x = g.param("x");
                let gamma = g.param("gamma");
                let beta = g.param("beta");
                let ln = g.tape.layer_norm(x, gamma, beta, 1e-5);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(ln, wc);
                g.tape.sum(p)
            }),
        );
    }

    // embedding_lookup (repeated ids exercise scatter accumulation)
    {
        let v = 6;
        let d = n.max(2);
        let mut store = ParamStore::new();
        store.insert("table", randt(&mut rng, vec![v, d]));
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..v)).collect();
        let w = randt(&mut rng, vec![ids.len(), d]);
        run(
            "embedding_lookup",
            store,
            Box::new(move |g| {
                let t = g.param("table");
                let e = g.tape.embedding(t, &ids);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(e, wc);
                g.tape.sum(p)
            }),
        );
    }

    // concat along the last axis
    {
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![m, k]));
        store.insert("b", randt(&mut rng, vec![m, n]));
        let w = randt(&mut rng, vec![m, k + n]);
        run(
            "concat_last",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let b = g.param("b");
                let c = g.tape.concat_last(&[a, b]);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(c, wc);
                g.tape.sum(p)
            }),
        );
    }

    // cross_entropy
    {
        let classes = n.max(2);
        let mut store = ParamStore::new();
        store.insert("logits", randt(&mut rng, vec![m, classes]));
        let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        run(
            "cross_entropy",
            store,
            Box::new(move |g| {
                let l = g.param("logits");
                g.tape.cross_entropy(l, &targets)
            }),
        );
    }

    // sum / transpose / slice_cols / select_rows
    {
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![m, n]));
        run(
            "sum",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                g.tape.sum(a)
            }),
        );
    }
    {
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![m, n]));
        let w = randt(&mut rng, vec![n, m]);
        run(
            "transpose",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let t = g.tape.transpose(a);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(t, wc);
                g.tape.sum(p)
            }),
        );
    }
    {
        let cols = n.max(2);
        let start = rng.gen_range(0..cols - 1);
        let end = rng.gen_range(start + 1..=cols);
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![m, cols]));
        let w = randt(&mut rng, vec![m, end - start]);
        run(
            "slice_cols",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let s = g.tape.slice_cols(a, start, end);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(s, wc);
                g.tape.sum(p)
            }),
        );
    }
    {
        let rows = m.max(2);
        let mut store = ParamStore::new();
        store.insert("a", randt(&mut rng, vec![rows, n]));
        let sel: Vec<usize> = (0..4).map(|_| rng.gen_range(0..rows)).collect();
        let w = randt(&mut rng, vec![sel.len(), n]);
        run(
            "select_rows",
            store,
            Box::new(move |g| {
                let a = g.param("a");
                let s = g.tape.select_rows(a, &sel);
                let wc = g.constant(w.clone());
                let p = g.tape.mul(s, wc);
                g.tape.sum(p)
            }),
        );
    }

    GradCheckReport { per_param, tol }
}
