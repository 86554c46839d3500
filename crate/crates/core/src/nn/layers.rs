use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Mat, Tape, Var};

/// Affine map `x . w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.randn(
            format!("{name}.w"),
            (d_in, d_out),
            1.0 / (d_in as f64).sqrt(),
            trainable,
            rng,
        );
        let b = store.zeros(format!("{name}.b"), (1, d_out), trainable);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), (1, d), true),
            beta: store.zeros(format!("{name}.beta"), (1, d), true),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer block: multi-head self-attention followed by a
/// GELU feed-forward, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    pub width: usize,
    pub heads: usize,
    norm_attn: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

impl SelfAttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width must split evenly into heads");
        let hidden = 4 * width;
        Self {
            width,
            heads,
            norm_attn: Norm::new(store, &format!("{name}.norm_attn"), width),
            query: Linear::new(store, &format!("{name}.query"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, true, rng),
            norm_ff: Norm::new(store, &format!("{name}.norm_ff"), width),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, hidden, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), hidden, width, true, rng),
        }
    }

    /// `x` is `n x width`; `key_mask[j] == false` hides token `j` from
    /// every query.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let h = self.norm_attn.forward(tape, store, x);
        let q = self.query.forward(tape, store, h);
        let k = self.key.forward(tape, store, h);
        let v = self.value.forward(tape, store, h);
        let a = tape.attention(q, k, v, self.heads, key_mask);
        let a = self.output.forward(tape, store, a);
        let x = tape.add(x, a);

        let h = self.norm_ff.forward(tape, store, x);
        let h = self.ff_in.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Standard sinusoidal position table, `n x d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Mat {
    Mat::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_layer_preserves_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = SelfAttentionLayer::new(&mut store, "l", 8, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_shape_fn((5, 8), |(i, j)| (i * j) as f64 * 0.1));
        let y = layer.forward(&mut tape, &store, x, None);
        assert_eq!(tape.value(y).dim(), (5, 8));
        assert!(tape.value(y).iter().all(|z| z.is_finite()));
    }

    #[test]
    fn positions_are_distinct() {
        let p = sinusoidal_positions(15, 8);
        for i in 0..15 {
            for j in i + 1..15 {
                assert_ne!(p.row(i), p.row(j));
            }
        }
    }
}
