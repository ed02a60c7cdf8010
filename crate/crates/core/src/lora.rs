//! Low-rank reparametrization of linear layers with merge-and-reinit
//! restarts.
//!
//! A wrapped projection computes `x W + s (x A) B` where `W` (`in x out`)
//! is frozen and only `A` (`in x r`) and `B` (`r x out`) train. A restart
//! folds `s A B` into `W`, redraws `A` and zeroes `B`, so the forward map is
//! unchanged while the next low-rank update is free to explore a new
//! subspace.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Linear, LinearKind, ModelConfig, ParamId, Transformer};
use crate::tensor::{gemm, Graph, MatRef, Scalar, Tensor, Var};

/// Normal samples with std `sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct LoraLinear<T> {
    base: Tensor<T>,
    lora_a: Tensor<T>,
    lora_b: Tensor<T>,
    rank: usize,
    scale: f64,
    merged_count: usize,
}

/// Graph handles produced by [`LoraLinear::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub base: Var,
    pub lora_a: Var,
    pub lora_b: Var,
    pub out: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeRecord {
    /// Frobenius norm of the merged `s A B`.
    pub delta_norm: f64,
    pub merged_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WrapReport {
    pub layers_wrapped: usize,
    pub trainable_param_count: usize,
    pub frozen_param_count: usize,
}

impl<T: Scalar> LoraLinear<T> {
    /// Freezes `w` and attaches a Kaiming-initialized `A` and a zero `B`.
    pub fn wrap<R: Rng + ?Sized>(w: Tensor<T>, rank: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let (fan_in, fan_out) = w.dims2()?;
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if rank > fan_in.min(fan_out) {
            return Err(Error::Rank(format!(
                "rank {rank} exceeds min(in, out) = {} for a {fan_in}x{fan_out} weight",
                fan_in.min(fan_out)
            )));
        }
        if !scale.is_finite() {
            return Err(Error::Config(format!("LoRA scale {scale} is not finite")));
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("weight being wrapped".into()));
        }
        let mut base = w;
        base.set_requires_grad(false);
        Ok(LoraLinear {
            base,
            lora_a: kaiming_normal(&[fan_in, rank], fan_in, rng).with_requires_grad(true),
            lora_b: Tensor::zeros(&[rank, fan_out]).with_requires_grad(true),
            rank,
            scale,
            merged_count: 0,
        })
    }

    /// Reassembles a wrapped layer from stored tensors.
    pub fn from_parts(base: Tensor<T>, lora_a: Tensor<T>, lora_b: Tensor<T>, scale: f64, merged_count: usize) -> Result<Self> {
        let (i, o) = base.dims2()?;
        let (ai, r) = lora_a.dims2()?;
        let (rb, bo) = lora_b.dims2()?;
        if ai != i || rb != r || bo != o {
            return Err(Error::shape("lora parts", lora_a.shape(), lora_b.shape()));
        }
        if r == 0 || r > i.min(o) {
            return Err(Error::Rank(format!("stored rank {r} is invalid for a {i}x{o} weight")));
        }
        Ok(LoraLinear {
            base: base.with_requires_grad(false),
            lora_a: lora_a.with_requires_grad(true),
            lora_b: lora_b.with_requires_grad(true),
            rank: r,
            scale,
            merged_count,
        })
    }

    pub fn base(&self) -> &Tensor<T> {
        &self.base
    }

    pub fn lora_a(&self) -> &Tensor<T> {
        &self.lora_a
    }

    pub fn lora_b(&self) -> &Tensor<T> {
        &self.lora_b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn merged_count(&self) -> usize {
        self.merged_count
    }

    pub fn in_features(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.base, &mut self.lora_a, &mut self.lora_b)
    }

    /// Overwrites both factors, keeping their shapes.
    pub fn set_factors(&mut self, a: Vec<T>, b: Vec<T>) -> Result<()> {
        if a.len() != self.lora_a.numel() || b.len() != self.lora_b.numel() {
            return Err(Error::shape("set_factors", &[a.len()], &[b.len()]));
        }
        self.lora_a.data_mut().copy_from_slice(&a);
        self.lora_b.data_mut().copy_from_slice(&b);
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<LoraVars> {
        let base = g.leaf(&self.base);
        let lora_a = g.leaf(&self.lora_a);
        let lora_b = g.leaf(&self.lora_b);
        let dense = g.matmul(x, base)?;
        let low = g.matmul(x, lora_a)?;
        let low = g.matmul(low, lora_b)?;
        let low = g.scale(low, self.scale)?;
        let out = g.add(dense, low)?;
        Ok(LoraVars {
            base,
            lora_a,
            lora_b,
            out,
        })
    }

    /// `x W + s (x A) B` for a 2-D `x`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let vars = self.forward_graph(&mut g, xv)?;
        Ok(g.to_tensor(vars.out))
    }

    /// `s A B` in double precision, row-major `in x out`.
    pub fn delta_f64(&self) -> Vec<f64> {
        let (i, o, r) = (self.in_features(), self.out_features(), self.rank);
        let a = self.lora_a.to_f64();
        let b = self.lora_b.to_f64();
        let mut out = vec![0.0f64; i * o];
        gemm(MatRef::row_major(&a, i, r), MatRef::row_major(&b, r, o), self.scale, 0.0, &mut out, o);
        out
    }

    /// `W + s A B` in double precision.
    pub fn effective_weight_f64(&self) -> Vec<f64> {
        let mut w = self.base.to_f64();
        for (x, d) in w.iter_mut().zip(self.delta_f64()) {
            *x += d;
        }
        w
    }

    /// Folds `s A B` into the frozen weight (in double precision), redraws
    /// `A` and zeroes `B`.
    pub fn merge_and_reinit<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<MergeRecord> {
        let delta = self.delta_f64();
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("LoRA update being merged".into()));
        }
        let delta_norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (w, d) in self.base.data_mut().iter_mut().zip(&delta) {
            *w = T::of(w.f64() + d);
        }
        let (i, r) = (self.in_features(), self.rank);
        self.lora_a = kaiming_normal(&[i, r], i, rng).with_requires_grad(true);
        self.lora_b = Tensor::zeros(&[r, self.out_features()]).with_requires_grad(true);
        self.merged_count += 1;
        Ok(MergeRecord {
            delta_norm,
            merged_count: self.merged_count,
        })
    }

    /// Kaiming-initializes `B` as well, for plain low-rank training without
    /// restarts where a zero `B` would leave the factors symmetric.
    pub fn lora_only_init<R: Rng + ?Sized>(&mut self, rng: &mut R, restarts_enabled: bool) -> Result<()> {
        if restarts_enabled {
            return Err(Error::Config(
                "lora_only_init is only valid when restarts are disabled".into(),
            ));
        }
        let (i, o, r) = (self.in_features(), self.out_features(), self.rank);
        self.lora_a = kaiming_normal(&[i, r], i, rng).with_requires_grad(true);
        self.lora_b = kaiming_normal(&[r, o], r, rng).with_requires_grad(true);
        Ok(())
    }
}

/// Trainable count of a model whose seven per-layer projections are
/// wrapped at rank `r`: `layers * sum r*(in+out)` plus embeddings, output
/// head and norm gains.
pub fn relora_trainable_count(cfg: &ModelConfig, rank: usize) -> usize {
    let h = cfg.hidden;
    let per_layer: usize = LinearKind::ALL
        .iter()
        .map(|&k| {
            let (i, o) = cfg.linear_shape(k);
            rank * (i + o)
        })
        .sum();
    let embed = cfg.vocab * h * if cfg.tie_embeddings { 1 } else { 2 };
    embed + cfg.layers * (per_layer + 2 * h) + h
}

/// Wraps all seven projections of every layer; embeddings, head and norms
/// stay full-rank and trainable.
pub fn wrap_model<T: Scalar, R: Rng + ?Sized>(model: &mut Transformer<T>, rank: usize, scale: f64, rng: &mut R) -> Result<WrapReport> {
    if model.is_wrapped() {
        return Err(Error::Config("model is already wrapped".into()));
    }
    let mut layers_wrapped = 0;
    for block in model.blocks_mut() {
        for kind in LinearKind::ALL {
            let lin = block.linear_mut(kind);
            let Linear::Dense(w) = lin else { unreachable!("checked unwrapped above") };
            let w = std::mem::replace(w, Tensor::zeros(&[0]));
            *lin = Linear::Lora(LoraLinear::wrap(w, rank, scale, rng)?);
            layers_wrapped += 1;
        }
    }
    Ok(WrapReport {
        layers_wrapped,
        trainable_param_count: model.trainable_count(),
        frozen_param_count: model.frozen_count(),
    })
}

/// Runs [`LoraLinear::merge_and_reinit`] on every wrapped projection.
pub fn merge_and_reinit_all<T: Scalar, R: Rng + ?Sized>(model: &mut Transformer<T>, rng: &mut R) -> Result<Vec<(ParamId, MergeRecord)>> {
    let mut records = Vec::new();
    for (l, block) in model.blocks_mut().iter_mut().enumerate() {
        for kind in LinearKind::ALL {
            if let Some(lora) = block.linear_mut(kind).as_lora_mut() {
                records.push((ParamId::Weight(l, kind), lora.merge_and_reinit(rng)?));
            }
        }
    }
    Ok(records)
}

pub fn lora_only_init_all<T: Scalar, R: Rng + ?Sized>(model: &mut Transformer<T>, rng: &mut R, restarts_enabled: bool) -> Result<()> {
    for block in model.blocks_mut() {
        for kind in LinearKind::ALL {
            if let Some(lora) = block.linear_mut(kind).as_lora_mut() {
                lora.lora_only_init(rng, restarts_enabled)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn scalar_forward_by_hand() {
        let w = Tensor::from_vec(&[1, 1], vec![2.0f64]).unwrap();
        let mut layer = LoraLinear::wrap(w, 1, 1.0, &mut rng()).unwrap();
        layer.set_factors(vec![3.0], vec![4.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1], vec![5.0]).unwrap();
        // 5*2 + 1*(5*3)*4
        assert_eq!(layer.forward(&x).unwrap().data(), &[70.0]);
    }

    #[test]
    fn rank_validation() {
        let w = Tensor::<f64>::zeros(&[4, 3]);
        assert!(matches!(LoraLinear::wrap(w.clone(), 4, 0.25, &mut rng()), Err(Error::Rank(_))));
        assert!(matches!(LoraLinear::wrap(w, 0, 1.0, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn lora_only_init_rejected_with_restarts() {
        let w = Tensor::<f64>::zeros(&[4, 4]);
        let mut layer = LoraLinear::wrap(w, 2, 0.5, &mut rng()).unwrap();
        assert!(matches!(layer.lora_only_init(&mut rng(), true), Err(Error::Config(_))));
        layer.lora_only_init(&mut rng(), false).unwrap();
        assert!(layer.lora_b().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn wrap_freezes_base() {
        let w = Tensor::<f32>::full(&[3, 3], 1.0).with_requires_grad(true);
        let layer = LoraLinear::wrap(w, 1, 1.0, &mut rng()).unwrap();
        assert!(!layer.base().requires_grad());
        assert!(layer.lora_a().requires_grad() && layer.lora_b().requires_grad());
        assert!(layer.lora_b().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn count_formula_for_square_layer() {
        let w = Tensor::<f64>::zeros(&[64, 64]);
        let layer = LoraLinear::wrap(w, 8, 0.125, &mut rng()).unwrap();
        assert_eq!(layer.lora_a().numel() + layer.lora_b().numel(), 8 * (64 + 64));
    }
}
