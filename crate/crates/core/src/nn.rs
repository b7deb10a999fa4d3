//! Shared neural building blocks: a named parameter store, initializers, and
//! tape-level forward helpers (linear, two-layer MLP, multi-head attention,
//! encoder layer, layer norm, sinusoidal positions).
//!
//! Parameters are addressed by dotted names ("enc0.attn.q.w"), which is also
//! how checkpoints and the optimizer see them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};

/// Named tensors: trainable parameters plus fixed buffers (priors, category
/// embeddings). Iteration order is the name order, so every consumer is
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, trainable: true });
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    /// Non-trainable tensor that still travels with the model.
    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, trainable: false });
        assert!(prev.is_none(), "buffer {name} registered twice");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}")).tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_element_count(&self) -> usize {
        self.iter_trainable().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameters registered on one tape; forward helpers look leaves up by name.
/// Holds only `Var` handles, so it can live alongside the owning tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &Tape, store: &ParamStore) -> Self {
        let mut vars = BTreeMap::new();
        for (name, entry) in store.iter() {
            let var = if entry.trainable {
                tape.leaf(entry.tensor.clone())
            } else {
                tape.constant(entry.tensor.clone())
            };
            vars.insert(name.to_string(), var);
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients of every trainable parameter, zeros where the loss did not
    /// reach the leaf.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, tensor) in store.iter_trainable() {
            let var = self.var(name);
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
            out.insert(name.to_string(), g);
        }
        out
    }
}

// ───────────────────────── initializers ─────────────────────────

pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn xavier_conv(rng: &mut impl Rng, k: usize, c_in: usize, c_out: usize) -> Tensor {
    let a = (6.0 / (k * c_in + k * c_out) as f64).sqrt();
    Tensor::new(vec![k, c_in, c_out], (0..k * c_in * c_out).map(|_| rng.gen_range(-a..a)).collect())
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.w"), xavier(rng, d_in, d_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
}

/// Two-layer fully connected block with a ReLU hidden layer.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut impl Rng,
) {
    init_linear(store, &format!("{prefix}.l1"), d_in, hidden, rng);
    init_linear(store, &format!("{prefix}.l2"), hidden, d_out, rng);
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(vec![d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng);
    }
}

pub fn init_conv1d(
    store: &mut ParamStore,
    prefix: &str,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) {
    store.insert(format!("{prefix}.w"), xavier_conv(rng, kernel, c_in, c_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![c_out]));
}

/// Self-attention encoder layer: attention + feed-forward, post-norm residuals.
pub fn init_encoder_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ffn_hidden: usize,
    rng: &mut impl Rng,
) {
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_norm(store, &format!("{prefix}.n1"), d);
    init_mlp(store, &format!("{prefix}.ffn"), d, ffn_hidden, d, rng);
    init_norm(store, &format!("{prefix}.n2"), d);
}

/// Deterministic unit-length embedding rows (one per category).
pub fn seeded_unit_rows(seed: u64, n: usize, d: usize) -> Tensor {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(vec![n, d]);
    for r in 0..n {
        let row: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (dst, v) in out.row_mut(r).iter_mut().zip(row) {
            *dst = v / norm;
        }
    }
    out
}

/// Box–Muller sample; keeps us off any external distribution crate.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Classic fixed sinusoidal positions, one row per step.
pub fn sinusoidal_positions(steps: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![steps, d]);
    for t in 0..steps {
        let row = out.row_mut(t);
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 * rate;
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

// ───────────────────────── forward helpers ─────────────────────────

pub fn linear(tape: &Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, bias)
}

pub fn mlp(tape: &Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, b, &format!("{prefix}.l1"), x);
    let h = tape.relu(h);
    linear(tape, b, &format!("{prefix}.l2"), h)
}

pub fn norm(tape: &Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    tape.layer_norm(x, b.var(&format!("{prefix}.g")), b.var(&format!("{prefix}.b")), 1e-5)
}

pub fn conv1d(tape: &Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    tape.conv1d_same(x, b.var(&format!("{prefix}.w")), b.var(&format!("{prefix}.b")))
}

/// Multi-head attention; `queries` and `keys_values` may differ (cross) or
/// coincide (self).
pub fn attention(
    tape: &Tape,
    b: &Bound,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    heads: usize,
) -> Var {
    let q = linear(tape, b, &format!("{prefix}.q"), queries);
    let k = linear(tape, b, &format!("{prefix}.k"), keys_values);
    let v = linear(tape, b, &format!("{prefix}.v"), keys_values);
    let d = tape.value(q).cols();
    assert!(d % heads == 0, "model width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        parts.push(tape.matmul(weights, vh));
    }
    let merged = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
    linear(tape, b, &format!("{prefix}.o"), merged)
}

/// `x <- LN(x + SelfAttn(x)); x <- LN(x + FFN(x))`
pub fn encoder_layer(tape: &Tape, b: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    let a = attention(tape, b, &format!("{prefix}.attn"), x, x, heads);
    let x = tape.add(x, a);
    let x = norm(tape, b, &format!("{prefix}.n1"), x);
    let f = mlp(tape, b, &format!("{prefix}.ffn"), x);
    let x = tape.add(x, f);
    norm(tape, b, &format!("{prefix}.n2"), x)
}

// ───────────────────────── numeric gradient checking ─────────────────────────

/// Central-difference gradients of `loss` w.r.t. every trainable parameter.
/// The probe only sees loss values, never the tape, so it is an independent
/// check of the analytic backward pass.
pub fn central_diff_grads(
    store: &ParamStore,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let names: Vec<String> = store.iter_trainable().map(|(n, _)| n.to_string()).collect();
    let mut probe = store.clone();
    for name in names {
        let n = store.get(&name).numel();
        let mut grad = Tensor::zeros(store.get(&name).shape().to_vec());
        for i in 0..n {
            let base = store.get(&name).data()[i];
            probe.get_mut(&name).data_mut()[i] = base + step;
            let up = loss(&probe);
            probe.get_mut(&name).data_mut()[i] = base - step;
            let down = loss(&probe);
            probe.get_mut(&name).data_mut()[i] = base;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    out
}

/// Worst relative disagreement between two gradient sets, with a small floor
/// so near-zero entries compare absolutely.
pub fn max_rel_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let n = &numeric[name];
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let rel = (av - nv).abs() / f64::max(1e-3, f64::max(av.abs(), nv.abs()));
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", 6, 10, &mut rng);
        let input = xavier(&mut rng, 4, 6);

        let run = |s: &ParamStore| {
            let tape = Tape::new();
            let b = Bound::bind(&tape, s);
            let x = tape.constant(input.clone());
            let y = encoder_layer(&tape, &b, "enc", x, 2);
            let l = tape.mean(y);
            (tape, b, l)
        };

        let (tape, bound, loss) = run(&store);
        let analytic = bound.collect_grads(&tape.backward(loss), &store);
        let numeric = central_diff_grads(&store, 1e-5, |s| {
            let (tape, _, l) = run(s);
            tape.item(l)
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "encoder layer gradient mismatch: {err}");
    }

    #[test]
    fn zeroed_encoder_layer_is_double_layer_norm() {
        // With all projection weights zero and unit norms, attention and FFN
        // vanish and the layer reduces to two successive layer norms.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", 4, 8, &mut rng);
        for (name, entry) in store.entries.clone() {
            if name.contains("attn") || name.contains("ffn") {
                store.entries.insert(name, ParamEntry { tensor: entry.tensor.map(|_| 0.0), ..entry });
            }
        }
        let input = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 2.0, 0.0]]);

        let tape = Tape::new();
        let b = Bound::bind(&tape, &store);
        let x = tape.constant(input.clone());
        let y = encoder_layer(&tape, &b, "enc", x, 2);

        let expect = {
            let t2 = Tape::new();
            let x2 = t2.constant(input);
            let g = t2.constant(Tensor::full(vec![4], 1.0));
            let bb = t2.constant(Tensor::zeros(vec![4]));
            let n1 = t2.layer_norm(x2, g, bb, 1e-5);
            let n2 = t2.layer_norm(n1, g, bb, 1e-5);
            t2.value_clone(n2)
        };
        let got = tape.value_clone(y);
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_unit_rows_are_unit_and_reproducible() {
        let a = seeded_unit_rows(11, 5, 16);
        let b = seeded_unit_rows(11, 5, 16);
        assert_eq!(a, b);
        for r in 0..5 {
            let n: f64 = a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sinusoidal_positions_distinguish_steps() {
        let p = sinusoidal_positions(8, 6);
        for t in 1..8 {
            assert_ne!(p.row(t), p.row(0));
        }
    }
}
