//! Routing mechanisms: cosine-centroid, standard linear, hash, and
//! random-fixed, plus the balance loss and routing-parameter accounting.
//!
//! Cosine routing scores are τ·⟨pos, ĉᵢ⟩ with centroids stored unnormalized
//! and L2-normalized at every use, so gradients flow through the
//! normalization. Top-k ties break toward the lowest expert index.

use crate::error::{Error, Result};
use crate::numkern::{Scalar, Tape, Tensor, Var};

pub const L2_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterKind {
    Cosine,
    Linear,
    Hash,
    RandomFixed,
}

impl RouterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RouterKind::Cosine => "cosine",
            RouterKind::Linear => "linear",
            RouterKind::Hash => "hash",
            RouterKind::RandomFixed => "random_fixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(RouterKind::Cosine),
            "linear" => Ok(RouterKind::Linear),
            "hash" => Ok(RouterKind::Hash),
            "random_fixed" => Ok(RouterKind::RandomFixed),
            other => Err(Error::Config(format!("unknown router kind '{other}'"))),
        }
    }

    /// Kinds whose positions come from a learned projection.
    pub fn uses_projection(&self) -> bool {
        matches!(self, RouterKind::Cosine | RouterKind::RandomFixed)
    }
}

/// Per-layer routing state. Exactly the fields demanded by `kind` are set.
#[derive(Clone, Debug)]
pub struct RoutingSpace<T: Scalar> {
    pub kind: RouterKind,
    /// [d_model × d_space], no bias. Cosine and random-fixed kinds.
    pub proj_in: Option<Tensor<T>>,
    /// [M × d_space], stored unnormalized. Cosine and random-fixed kinds.
    pub centroids: Option<Tensor<T>>,
    /// [M × d_space]. Counted in the parameter budget, never used in forward.
    pub kinematic: Option<Tensor<T>>,
    /// [d_model × M]. Linear kind only.
    pub linear_weights: Option<Tensor<T>>,
    pub tau: f64,
}

impl<T: Scalar> RoutingSpace<T> {
    pub fn cosine(
        proj_in: Tensor<T>,
        centroids: Tensor<T>,
        kinematic: Option<Tensor<T>>,
        tau: f64,
    ) -> Self {
        RoutingSpace {
            kind: RouterKind::Cosine,
            proj_in: Some(proj_in),
            centroids: Some(centroids),
            kinematic,
            linear_weights: None,
            tau,
        }
    }

    pub fn random_fixed(proj_in: Tensor<T>, centroids: Tensor<T>, tau: f64) -> Self {
        RoutingSpace {
            kind: RouterKind::RandomFixed,
            proj_in: Some(proj_in),
            centroids: Some(centroids),
            kinematic: None,
            linear_weights: None,
            tau,
        }
    }

    pub fn linear(weights: Tensor<T>) -> Self {
        RoutingSpace {
            kind: RouterKind::Linear,
            proj_in: None,
            centroids: None,
            kinematic: None,
            linear_weights: Some(weights),
            tau: 1.0,
        }
    }

    pub fn hash() -> Self {
        RoutingSpace {
            kind: RouterKind::Hash,
            proj_in: None,
            centroids: None,
            kinematic: None,
            linear_weights: None,
            tau: 1.0,
        }
    }

    pub fn num_experts(&self) -> Option<usize> {
        match self.kind {
            RouterKind::Cosine | RouterKind::RandomFixed => {
                self.centroids.as_ref().map(|c| c.shape()[0])
            }
            RouterKind::Linear => self.linear_weights.as_ref().map(|w| w.shape()[1]),
            RouterKind::Hash => None,
        }
    }
}

/// Expert selection for one token.
#[derive(Clone, Debug)]
pub struct RouteDecision<T: Scalar> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
    pub full_probs: Vec<T>,
}

/// Indices of the k largest entries per row, ties broken by lowest index.
pub(crate) fn top_k_rows<T: Scalar>(probs: &[T], rows: usize, m: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for r in 0..rows {
        let row = &probs[r * m..(r + 1) * m];
        order.clear();
        order.extend(0..m);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        out.extend_from_slice(&order[..k]);
    }
    out
}

/// Tape-level routing over a batch of rows.
///
/// For projection kinds, `rows` must already be normalized positions
/// [A × d_space]; for the linear kind, raw token states [A × d_model].
/// Returns (flat top-k indices, renormalized weights [A×k], probs [A×M]).
pub(crate) fn route_rows_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    kind: RouterKind,
    centroids: Option<Var>,
    linear_weights: Option<Var>,
    tau: f64,
    rows: Var,
    k: usize,
) -> Result<(Vec<usize>, Var, Var)> {
    let probs = match kind {
        RouterKind::Cosine | RouterKind::RandomFixed => {
            let c = centroids
                .ok_or_else(|| Error::Config("cosine routing needs centroids".to_string()))?;
            let cn = tape.l2_normalize(c, T::of_f64(L2_EPS))?;
            let scores = tape.matmul_nt(rows, cn)?;
            let scaled = tape.scale(scores, T::of_f64(tau))?;
            tape.softmax(scaled)?
        }
        RouterKind::Linear => {
            let w = linear_weights
                .ok_or_else(|| Error::Config("linear routing needs weights".to_string()))?;
            let logits = tape.matmul(rows, w)?;
            tape.softmax(logits)?
        }
        RouterKind::Hash => {
            return Err(Error::Unsupported(
                "hash routing does not score probabilities".to_string(),
            ))
        }
    };
    let (n_rows, m) = (tape.value(probs).shape()[0], tape.value(probs).shape()[1]);
    if k > m {
        return Err(Error::Config(format!("top-k {k} exceeds expert count {m}")));
    }
    let indices = top_k_rows(tape.value(probs).data(), n_rows, m, k);
    let gathered = tape.gather_rows_cols(probs, &indices, k)?;
    let weights = tape.div_rows_by_sum(gathered)?;
    Ok((indices, weights, probs))
}

/// L2-normalized projection of a token state into routing space.
pub fn position<T: Scalar>(space: &RoutingSpace<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    if !space.kind.uses_projection() {
        return Err(Error::Unsupported(format!(
            "position undefined for {} routing",
            space.kind.as_str()
        )));
    }
    let proj = space.proj_in.as_ref().expect("projection kinds carry proj_in");
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::from_vec(vec![1, h.numel()], h.data().to_vec())?);
    let pv = tape.constant(proj.clone());
    let projected = tape.matmul(hv, pv)?;
    let normed = tape.l2_normalize(projected, T::of_f64(L2_EPS))?;
    Tensor::from_vec(vec![proj.shape()[1]], tape.value(normed).data().to_vec())
}

/// Route one token. Cosine/random-fixed expect a routing-space position,
/// linear expects the raw d_model state. Hash tokens go through `hash_route`.
pub fn route<T: Scalar>(
    space: &RoutingSpace<T>,
    pos_or_h: &Tensor<T>,
    k: usize,
) -> Result<RouteDecision<T>> {
    let mut tape = Tape::new();
    let row = tape.constant(Tensor::from_vec(vec![1, pos_or_h.numel()], pos_or_h.data().to_vec())?);
    let centroids = space.centroids.as_ref().map(|c| tape.constant(c.clone()));
    let linear = space.linear_weights.as_ref().map(|w| tape.constant(w.clone()));
    let (indices, weights, probs) =
        route_rows_on_tape(&mut tape, space.kind, centroids, linear, space.tau, row, k)?;
    Ok(RouteDecision {
        indices,
        weights: tape.value(weights).data().to_vec(),
        full_probs: tape.value(probs).data().to_vec(),
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic hash routing: k distinct experts from a splitmix64 mix of
/// (token key, layer, slot), reduced mod M with linear re-probing on
/// collision. Uniform weights 1/k; stable across runs and processes.
pub fn hash_route<T: Scalar>(
    token_key: u64,
    layer: usize,
    m: usize,
    k: usize,
) -> Result<RouteDecision<T>> {
    if k > m {
        return Err(Error::Config(format!("top-k {k} exceeds expert count {m}")));
    }
    let mut indices: Vec<usize> = Vec::with_capacity(k);
    for slot in 0..k {
        let mixed = splitmix64(splitmix64(token_key ^ splitmix64(layer as u64)) ^ slot as u64);
        let mut idx = (mixed % m as u64) as usize;
        while indices.contains(&idx) {
            idx = (idx + 1) % m;
        }
        indices.push(idx);
    }
    let w = T::of_f64(1.0 / k as f64);
    let p = T::of_f64(1.0 / m as f64);
    Ok(RouteDecision { indices, weights: vec![w; k], full_probs: vec![p; m] })
}

/// Switch-style balance loss α·M·Σᵢ fᵢpᵢ over a batch of routing events.
///
/// `full_probs` is [events × M]; `indices` holds k selections per event.
/// Every (event, slot) counts as one assignment.
pub fn balance_loss<T: Scalar>(
    full_probs: &Tensor<T>,
    indices: &[usize],
    k: usize,
    alpha: f64,
) -> Result<f64> {
    let (events, m) = (full_probs.shape()[0], full_probs.shape()[1]);
    if events == 0 {
        return Err(Error::Shape("balance_loss: no routing events".to_string()));
    }
    if indices.len() != events * k {
        return Err(Error::Shape(format!(
            "balance_loss: expected {} indices, got {}",
            events * k,
            indices.len()
        )));
    }
    let mut counts = vec![0u64; m];
    for &i in indices {
        counts[i] += 1;
    }
    let total = (events * k) as f64;
    let mut loss = 0.0f64;
    for i in 0..m {
        let f_i = counts[i] as f64 / total;
        let mut p_i = 0.0f64;
        for e in 0..events {
            p_i += full_probs.data()[e * m + i].as_f64();
        }
        p_i /= events as f64;
        loss += f_i * p_i;
    }
    Ok(alpha * m as f64 * loss)
}

/// Learned routing parameter counts per kind.
///
/// Cosine and random-fixed: layers·d_space·(d_model + M), plus another
/// layers·d_space·M when kinematic vectors are allocated. Linear:
/// layers·d_model·M. Hash: zero.
pub fn routing_param_count(
    kind: RouterKind,
    d_model: usize,
    d_space: usize,
    m: usize,
    layers: usize,
    include_kinematic: bool,
) -> u64 {
    match kind {
        RouterKind::Cosine | RouterKind::RandomFixed => {
            let per_layer = if include_kinematic {
                d_space * (d_model + 2 * m)
            } else {
                d_space * (d_model + m)
            };
            (layers * per_layer) as u64
        }
        RouterKind::Linear => (layers * d_model * m) as u64,
        RouterKind::Hash => 0,
    }
}
