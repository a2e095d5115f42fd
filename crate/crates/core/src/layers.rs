//! Small building blocks shared by the projector, encoders and decoder.

use rand::Rng;

use crate::error::Result;
use crate::params::{init_matrix, Graph, Group, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `x · w + b` with `w` stored `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init_matrix(rng, d_in, d_out), true);
        let b = bias.then(|| store.add(format!("{name}.b"), group, Tensor::zeros(&[1, d_out]), false));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            up: Linear::new(store, &format!("{name}.up"), group, d_in, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.up.ids();
        ids.extend(self.down.ids());
        ids
    }
}

/// RMS normalisation with a learned per-feature gain.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, group: Group, d: usize) -> Self {
        RmsNorm {
            gain: store.add(format!("{name}.gain"), group, Tensor::full(&[1, d], 1.0), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.rms_norm_rows(x, Self::EPS)?;
        let gain = g.param(self.gain);
        g.mul_row(n, gain)
    }
}

/// Fixed sinusoidal position table, `len × d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for p in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            t.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_adds_bias_to_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", Group::Projector, 3, 2, true, &mut rng);
        *store.get_mut(lin.b.unwrap()) = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let mut g = Graph::frozen(&store);
        let xv = g.input(x.clone());
        let y = lin.forward(&mut g, xv).unwrap();
        let base = x.matmul(store.get(lin.w)).unwrap();
        for r in 0..4 {
            assert!((g.value(y).get(r, 0) - base.get(r, 0) - 1.0).abs() < 1e-15);
            assert!((g.value(y).get(r, 1) - base.get(r, 1) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_unit_gain_has_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let norm = RmsNorm::new(&mut store, "n", Group::Lm, 5);
        let mut g = Graph::frozen(&store);
        let xv = g.input(Tensor::uniform(&[3, 5], 4.0, &mut rng));
        let y = norm.forward(&mut g, xv).unwrap();
        for r in 0..3 {
            let ms: f64 = g.value(y).row(r).iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!((ms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sinusoids_start_at_zero_phase() {
        let t = sinusoidal_positions(3, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((t.get(1, 2) - 0.01f64.sin()).abs() < 1e-15);
    }
}
