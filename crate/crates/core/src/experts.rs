//! Expert pool parameterizations and expert-level probes.
//!
//! Static pools store one vector per expert; the update is a weighted sum
//! independent of token state. MLP pools store rank-r down/up pairs whose
//! SiLU nonlinearity makes each hop's update depend on the current state.

use crate::error::{Error, Result};
use crate::numkern::{l2_norm_f64, Scalar, Tape, Tensor};
use crate::routing::RouteDecision;

/// Static expert vectors, [M × d_model].
#[derive(Clone, Debug)]
pub struct StaticPool<T: Scalar> {
    pub v: Tensor<T>,
}

/// Rank-r MLP experts. `w_down` rows flatten [r × d_model]; `w_up` rows
/// flatten [d_model × r].
#[derive(Clone, Debug)]
pub struct MlpPool<T: Scalar> {
    pub w_down: Tensor<T>,
    pub w_up: Tensor<T>,
    pub rank: usize,
}

impl<T: Scalar> StaticPool<T> {
    pub fn num_experts(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.v.shape()[1]
    }
}

impl<T: Scalar> MlpPool<T> {
    pub fn new(w_down: Tensor<T>, w_up: Tensor<T>, rank: usize) -> Result<Self> {
        let m = w_down.shape()[0];
        if w_up.shape()[0] != m {
            return Err(Error::Shape("expert count mismatch between w_down and w_up".to_string()));
        }
        if rank == 0 || w_down.shape()[1] % rank != 0 {
            return Err(Error::Shape(format!(
                "w_down width {} not divisible by rank {rank}",
                w_down.shape()[1]
            )));
        }
        if w_down.shape()[1] != w_up.shape()[1] {
            return Err(Error::Shape("w_down/w_up width mismatch".to_string()));
        }
        Ok(MlpPool { w_down, w_up, rank })
    }

    pub fn num_experts(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.w_down.shape()[1] / self.rank
    }
}

#[derive(Clone, Debug)]
pub enum ExpertPool<T: Scalar> {
    Static(StaticPool<T>),
    Mlp(MlpPool<T>),
}

impl<T: Scalar> ExpertPool<T> {
    pub fn num_experts(&self) -> usize {
        match self {
            ExpertPool::Static(p) => p.num_experts(),
            ExpertPool::Mlp(p) => p.num_experts(),
        }
    }
}

/// Δh = Σ wᵢVᵢ for one token; independent of token state.
pub fn update_static<T: Scalar>(pool: &StaticPool<T>, decision: &RouteDecision<T>) -> Result<Tensor<T>> {
    let d = pool.d_model();
    let k = decision.indices.len();
    let mut tape = Tape::new();
    let v = tape.constant(pool.v.clone());
    let w = tape.constant(Tensor::from_vec(vec![1, k], decision.weights.clone())?);
    let out = tape.moe_static_update(v, &decision.indices, k, w)?;
    Tensor::from_vec(vec![d], tape.value(out).data().to_vec())
}

/// Δh = Σ wᵢ·W_up,i·SiLU(W_down,i·h_current) for one token.
pub fn update_mlp<T: Scalar>(
    pool: &MlpPool<T>,
    decision: &RouteDecision<T>,
    h_current: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = pool.d_model();
    if h_current.numel() != d {
        return Err(Error::Shape(format!(
            "h_current has {} elements, pool expects {d}",
            h_current.numel()
        )));
    }
    let k = decision.indices.len();
    let mut tape = Tape::new();
    let wd = tape.constant(pool.w_down.clone());
    let wu = tape.constant(pool.w_up.clone());
    let w = tape.constant(Tensor::from_vec(vec![1, k], decision.weights.clone())?);
    let h = tape.constant(Tensor::from_vec(vec![1, d], h_current.data().to_vec())?);
    let out = tape.moe_mlp_update(wd, wu, pool.rank, &decision.indices, k, w, h)?;
    Tensor::from_vec(vec![d], tape.value(out).data().to_vec())
}

/// Summary of per-expert cos(w_down, w_up) over a rank-1 pool.
#[derive(Clone, Debug)]
pub struct IdentityReport {
    pub per_expert: Vec<f64>,
    pub mean_cos: f64,
    pub mean_abs_cos: f64,
    /// Fraction with |cos| > 0.8.
    pub frac_identity_like: f64,
    /// Fraction with |cos| < 0.2.
    pub frac_near_orthogonal: f64,
}

/// Cosine between each expert's down and up vectors (rank 1 only).
pub fn identity_cosines<T: Scalar>(pool: &MlpPool<T>) -> Result<IdentityReport> {
    if pool.rank != 1 {
        return Err(Error::Unsupported(format!(
            "identity cosine probe defined for rank-1 experts, pool has rank {}",
            pool.rank
        )));
    }
    let m = pool.num_experts();
    let d = pool.d_model();
    let mut per_expert = Vec::with_capacity(m);
    for e in 0..m {
        let down: Vec<f64> = pool.w_down.data()[e * d..(e + 1) * d].iter().map(|v| v.as_f64()).collect();
        let up: Vec<f64> = pool.w_up.data()[e * d..(e + 1) * d].iter().map(|v| v.as_f64()).collect();
        let dot: f64 = down.iter().zip(&up).map(|(a, b)| a * b).sum();
        let denom = l2_norm_f64(&down) * l2_norm_f64(&up);
        per_expert.push(if denom > 0.0 { dot / denom } else { 0.0 });
    }
    let mean_cos = per_expert.iter().sum::<f64>() / m as f64;
    let mean_abs_cos = per_expert.iter().map(|c| c.abs()).sum::<f64>() / m as f64;
    let frac_identity_like =
        per_expert.iter().filter(|c| c.abs() > 0.8).count() as f64 / m as f64;
    let frac_near_orthogonal =
        per_expert.iter().filter(|c| c.abs() < 0.2).count() as f64 / m as f64;
    Ok(IdentityReport { per_expert, mean_cos, mean_abs_cos, frac_identity_like, frac_near_orthogonal })
}

/// Token ids with the n largest dot products ⟨embedding_v, w_up⟩,
/// descending, ties broken by lowest id. Rank-1 pools only.
pub fn vocab_projection<T: Scalar>(
    pool: &MlpPool<T>,
    expert: usize,
    embedding: &Tensor<T>,
    n: usize,
) -> Result<Vec<usize>> {
    if pool.rank != 1 {
        return Err(Error::Unsupported(
            "vocabulary projection defined for rank-1 experts".to_string(),
        ));
    }
    if expert >= pool.num_experts() {
        return Err(Error::Index(format!("expert {expert} out of range")));
    }
    let d = pool.d_model();
    let (vocab, d2) = (embedding.shape()[0], embedding.shape()[1]);
    if d2 != d {
        return Err(Error::Shape("embedding width differs from expert width".to_string()));
    }
    if n > vocab {
        return Err(Error::Config(format!("n {n} exceeds vocab {vocab}")));
    }
    let up = &pool.w_up.data()[expert * d..(expert + 1) * d];
    let mut scores: Vec<(f64, usize)> = (0..vocab)
        .map(|v| {
            let row = &embedding.data()[v * d..(v + 1) * d];
            let dot: f64 = row.iter().zip(up).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            (dot, v)
        })
        .collect();
    scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scores[..n].iter().map(|&(_, v)| v).collect())
}
