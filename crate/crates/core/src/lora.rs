//! Low-rank adapters: `W + (alpha / r) · B · A` without materialising the
//! merged matrix during training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`, small random init.
    pub a: ParamId,
    /// `d_out × r`, zero init.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::RankMismatch("rank must be positive".into()));
        }
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let a = store.add(
            format!("{name}.lora_a"),
            group,
            Tensor::uniform(&[rank, d_in], bound, rng),
            true,
        );
        let b = store.add(format!("{name}.lora_b"), group, Tensor::zeros(&[d_out, rank]), true);
        Ok(LoraAdapter { a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check(&self, store: &ParamStore, d_in: usize, d_out: usize) -> Result<()> {
        let (a, b) = (store.get(self.a), store.get(self.b));
        if a.rows() != self.rank || b.cols() != self.rank {
            return Err(Error::RankMismatch(format!(
                "rank {} but A is {:?} and B is {:?}",
                self.rank,
                a.shape(),
                b.shape()
            )));
        }
        if a.cols() != d_in || b.rows() != d_out {
            return Err(Error::RankMismatch(format!(
                "adapter maps {} -> {} but the layer maps {d_in} -> {d_out}",
                a.cols(),
                b.rows()
            )));
        }
        Ok(())
    }

    /// Low-rank path only: `(alpha/r) · x Aᵀ Bᵀ`.
    pub fn delta(&self, g: &mut Graph, x: Var, d_out: usize) -> Result<Var> {
        let d_in = g.value(x).cols();
        self.check(g.store(), d_in, d_out)?;
        let a = g.param(self.a);
        let b = g.param(self.b);
        let xa = g.matmul_nt(x, a)?;
        let xab = g.matmul_nt(xa, b)?;
        Ok(g.scale(xab, self.scaling()))
    }

    /// `base_w + (alpha/r) · B A`.
    pub fn merge(&self, store: &ParamStore, base_w: &Tensor) -> Result<Tensor> {
        self.check(store, base_w.cols(), base_w.rows())?;
        lora_merge(base_w, store.get(self.a), store.get(self.b), self.alpha)
    }
}

/// `x · (base_w + (alpha/r) B A)ᵀ`, computed as the base path plus the
/// low-rank path. `base_w` is `d_out × d_in`.
pub fn lora_forward(g: &mut Graph, x: Var, base_w: Var, ad: &LoraAdapter) -> Result<Var> {
    let d_out = g.value(base_w).rows();
    let base = g.matmul_nt(x, base_w)?;
    let delta = ad.delta(g, x, d_out)?;
    g.add(base, delta)
}

/// Merged weight for deployment. `a` is `r × d_in`, `b` is `d_out × r`.
pub fn lora_merge(base_w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    let rank = a.rows();
    if b.cols() != rank {
        return Err(Error::RankMismatch(format!(
            "A is {:?} but B is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let delta = b.matmul(a)?.scale(alpha / rank as f64);
    base_w.add(&delta)
}

/// `x · w` for a weight stored `d_in × d_out`, plus an optional adapter.
pub fn project(g: &mut Graph, x: Var, w: ParamId, lora: Option<&LoraAdapter>) -> Result<Var> {
    let wv = g.param(w);
    let base = g.matmul(x, wv)?;
    match lora {
        Some(ad) => {
            let d_out = g.store().get(w).cols();
            let delta = ad.delta(g, x, d_out)?;
            g.add(base, delta)
        }
        None => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GroupSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> (ParamStore, ParamId, LoraAdapter) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Lm, Tensor::uniform(&[d_out, d_in], 1.0, &mut rng), true);
        let ad = LoraAdapter::new(&mut store, "w", Group::LmLora, d_in, d_out, rank, alpha, &mut rng).unwrap();
        (store, w, ad)
    }

    fn forward(store: &ParamStore, w: ParamId, ad: &LoraAdapter, x: &Tensor) -> Tensor {
        let mut g = Graph::frozen(store);
        let xv = g.input(x.clone());
        let wv = g.param(w);
        let y = lora_forward(&mut g, xv, wv, ad).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_b_is_exactly_base() {
        let (store, w, ad) = setup(1, 6, 5, 2, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 6], 1.0, &mut rng);
        let base = x.matmul_nt(store.get(w)).unwrap();
        assert_eq!(forward(&store, w, &ad, &x), base);
        assert_eq!(ad.merge(&store, store.get(w)).unwrap(), *store.get(w));
    }

    #[test]
    fn full_rank_equals_additive_update() {
        let (mut store, w, ad) = setup(3, 4, 3, 4, 8.0);
        *store.get_mut(ad.a) = Tensor::eye(4).scale(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        *store.get_mut(ad.b) = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        // (8/4) * B * 0.5 I = B
        let full = store.get(w).add(store.get(ad.b)).unwrap();
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let got = forward(&store, w, &ad, &x);
        assert!(got.max_abs_diff(&x.matmul_nt(&full).unwrap()) < 1e-12);
    }

    #[test]
    fn merged_forward_matches_low_rank_path() {
        for seed in 0..20 {
            let (mut store, w, ad) = setup(seed, 7, 5, 3, 6.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            *store.get_mut(ad.b) = Tensor::uniform(&[5, 3], 1.0, &mut rng);
            let x = Tensor::uniform(&[4, 7], 1.0, &mut rng);
            let merged = ad.merge(&store, store.get(w)).unwrap();
            let diff = forward(&store, w, &ad, &x).max_abs_diff(&x.matmul_nt(&merged).unwrap());
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn alpha_is_linear() {
        let (mut store, w, ad) = setup(5, 4, 4, 2, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        *store.get_mut(ad.b) = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let base = store.get(w).clone();
        let d1 = ad.merge(&store, &base).unwrap().zip_map(&base, |a, b| a - b).unwrap();
        let doubled = LoraAdapter { alpha: 4.0, ..ad.clone() };
        let d2 = doubled.merge(&store, &base).unwrap().zip_map(&base, |a, b| a - b).unwrap();
        assert!(d2.max_abs_diff(&d1.scale(2.0)) < 1e-12);
    }

    #[test]
    fn gradients_reach_adapter_only() {
        let (mut store, w, ad) = setup(8, 4, 3, 2, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        *store.get_mut(ad.b) = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let trainable: GroupSet = [Group::LmLora].into_iter().collect();
        let mut g = Graph::new(&store, trainable);
        let xv = g.input(x);
        let wv = g.param(w);
        let y = lora_forward(&mut g, xv, wv, &ad).unwrap();
        let loss = g.sum(y);
        let grads = g.param_grads(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(ad.a).is_some());
        assert!(grads.get(ad.b).is_some());
    }

    #[test]
    fn rank_mismatch_is_reported() {
        let (mut store, w, ad) = setup(10, 4, 3, 2, 4.0);
        *store.get_mut(ad.b) = Tensor::zeros(&[3, 3]);
        let mut g = Graph::frozen(&store);
        let xv = g.input(Tensor::zeros(&[1, 4]));
        let wv = g.param(w);
        assert!(matches!(lora_forward(&mut g, xv, wv, &ad), Err(Error::RankMismatch(_))));
    }
}
