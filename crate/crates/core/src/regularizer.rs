//! Penalty terms and their gradients: FRO, N3, DURA and the equivariance
//! regularizer (ER).
//!
//! ER has two parts. A norm term keeps entity embeddings bounded:
//! `n(h) + n(t)` averaged over the batch. A pair term works on pairs of
//! same-relation head entities `(x_a, x_b)` with a similarity label `a ∈ [0, 1]`:
//!
//! ```text
//! a · m(T_r(x_a) - T_r(x_b)) + (1 - a) · m(T_r(x_a) + T_r(x_b))
//! ```
//!
//! averaged over the sampled pairs. `n` and `m` are `‖·‖₂²` for norm order 2
//! and `‖·‖₃³` for order 3. Labels come from entity categories (proximity and
//! dissimilarity modes) or from a learned per-relation distance threshold
//! `ε_r` relaxed through a logistic with temperature `τ` (joint mode).
//!
//! Every penalty accumulates `weight · ∂penalty` into a [`Gradients`] buffer
//! and returns the unweighted penalty value.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{outgoing, CategoryMap, Triple};
use crate::error::{KgError, Result};
use crate::grad::Gradients;
use crate::model::{self, axpy, ModelKind, ModelParams};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegularizerKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "FRO")]
    Fro,
    #[serde(rename = "N3")]
    N3,
    #[serde(rename = "DURA")]
    Dura,
    #[serde(rename = "ER")]
    Er,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErMode {
    /// Category labels; only same-category pairs, pulled together.
    Proximity,
    /// Category labels; only cross-category pairs, with the plus-sign term.
    Dissimilarity,
    /// Soft labels from the learned threshold on every pair.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonInit {
    /// Median head-pair distance in the first batch that touches the relation.
    BatchMedian,
    Constant(f64),
}

/// What to do when a category-mode pair has an unlabeled entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledPolicy {
    /// Label the pair with the learned threshold instead (warns).
    FallbackJoint,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub er_mode: ErMode,
    pub norm_order: u8,
    /// Maximum same-relation pairs per relation per batch.
    pub pair_budget: usize,
    pub second_order: bool,
    /// Maximum path pairs per `(r1, r2)` group per batch.
    pub path_budget: usize,
    pub temperature: f64,
    pub epsilon_init: EpsilonInit,
    /// Multiplier on the dissimilarity (plus-sign) term relative to `lambda`.
    pub dissimilarity_weight: f64,
    pub unlabeled: UnlabeledPolicy,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::None,
            lambda: 0.0,
            er_mode: ErMode::Proximity,
            norm_order: 2,
            pair_budget: 32,
            second_order: false,
            path_budget: 32,
            temperature: 1.0,
            epsilon_init: EpsilonInit::BatchMedian,
            dissimilarity_weight: 1.0,
            unlabeled: UnlabeledPolicy::FallbackJoint,
        }
    }
}

impl RegularizerSpec {
    pub fn er(lambda: f64, mode: ErMode) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::Er,
            lambda,
            er_mode: mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(KgError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !matches!(self.norm_order, 2 | 3) {
            return Err(KgError::Config(format!(
                "norm_order must be 2 or 3, got {}",
                self.norm_order
            )));
        }
        if self.kind == RegularizerKind::Er && self.pair_budget == 0 {
            return Err(KgError::Config("pair_budget must be >= 1 for ER".into()));
        }
        if self.second_order && self.path_budget == 0 {
            return Err(KgError::Config("path_budget must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(KgError::Config("temperature must be > 0".into()));
        }
        if !(self.dissimilarity_weight >= 0.0) {
            return Err(KgError::Config("dissimilarity_weight must be >= 0".into()));
        }
        if let EpsilonInit::Constant(v) = self.epsilon_init {
            if !v.is_finite() {
                return Err(KgError::Config("epsilon constant must be finite".into()));
            }
        }
        Ok(())
    }

    /// Checks the regularizer is defined for `kind`.
    pub fn check_model(&self, kind: ModelKind) -> Result<()> {
        let unsupported = |regularizer| KgError::Unsupported {
            regularizer,
            model: kind.name(),
        };
        match self.kind {
            RegularizerKind::N3 if !kind.is_diagonal_bilinear() => Err(unsupported("N3")),
            RegularizerKind::Dura if !kind.is_bilinear() => Err(unsupported("DURA")),
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// norms

/// `‖x‖₂²` (order 2) or `Σ|x_i|³` (order 3; complex coordinates use the modulus).
pub fn norm_pow(x: &[f64], order: u8, complex: bool) -> f64 {
    match order {
        2 => x.iter().map(|v| v * v).sum(),
        _ if complex => x.chunks_exact(2).map(|c| c[0].hypot(c[1]).powi(3)).sum(),
        _ => x.iter().map(|v| v.abs().powi(3)).sum(),
    }
}

/// `out += weight · ∇ norm_pow(x)`.
pub fn norm_pow_grad(x: &[f64], order: u8, complex: bool, weight: f64, out: &mut [f64]) {
    match order {
        2 => axpy(2.0 * weight, x, out),
        _ if complex => {
            for (o, c) in out.chunks_exact_mut(2).zip(x.chunks_exact(2)) {
                let m = c[0].hypot(c[1]);
                o[0] += 3.0 * weight * m * c[0];
                o[1] += 3.0 * weight * m * c[1];
            }
        }
        _ => {
            for (o, v) in out.iter_mut().zip(x) {
                *o += 3.0 * weight * v.abs() * v;
            }
        }
    }
}

fn require_batch(batch: &[Triple]) -> Result<()> {
    if batch.is_empty() {
        return Err(KgError::Empty("regularizer batch"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// baselines

/// Mean over the batch of `‖h‖² + ‖r‖² + ‖t‖²` (Frobenius norm for RESCAL).
pub fn penalty_fro(params: &ModelParams, batch: &[Triple], grads: &mut Gradients, weight: f64) -> Result<f64> {
    norm_penalty(params, batch, 2, grads, weight)
}

/// Mean over the batch of `‖h‖₃³ + ‖r‖₃³ + ‖t‖₃³` with complex moduli.
pub fn penalty_n3(params: &ModelParams, batch: &[Triple], grads: &mut Gradients, weight: f64) -> Result<f64> {
    if !params.kind().is_diagonal_bilinear() {
        return Err(KgError::Unsupported {
            regularizer: "N3",
            model: params.kind().name(),
        });
    }
    norm_penalty(params, batch, 3, grads, weight)
}

fn norm_penalty(params: &ModelParams, batch: &[Triple], order: u8, grads: &mut Gradients, weight: f64) -> Result<f64> {
    require_batch(batch)?;
    let complex = params.kind().is_complex();
    let w = weight / batch.len() as f64;
    let (hb, tb) = (params.head_block(), params.tail_block());
    let mut total = 0.0;
    for t in batch {
        let h = params.row(hb, t.head);
        let r = params.relation(t.relation);
        let tl = params.row(tb, t.tail);
        total += norm_pow(h, order, complex) + norm_pow(r, order, complex) + norm_pow(tl, order, complex);
        norm_pow_grad(h, order, complex, w, grads.block_mut(hb).row_mut(t.head));
        norm_pow_grad(r, order, complex, w, grads.relations.row_mut(t.relation));
        norm_pow_grad(tl, order, complex, w, grads.block_mut(tb).row_mut(t.tail));
    }
    Ok(total / batch.len() as f64)
}

/// `T_r^⊤(t)`: conjugate multiplication for diagonal kinds, `t Rᵀ` for RESCAL.
fn adjoint_transform(kind: ModelKind, t: &[f64], rel: &[f64], out: &mut [f64]) {
    if kind == ModelKind::Rescal {
        let d = t.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = model::dot(&rel[i * d..(i + 1) * d], t);
        }
    } else {
        model::transform(kind, t, rel, true, out);
    }
}

fn adjoint_backward(kind: ModelKind, t: &[f64], rel: &[f64], dy: &[f64], dt: &mut [f64], drel: &mut [f64]) {
    if kind == ModelKind::Rescal {
        let d = t.len();
        for i in 0..d {
            axpy(dy[i], &rel[i * d..(i + 1) * d], dt);
            axpy(dy[i], t, &mut drel[i * d..(i + 1) * d]);
        }
    } else {
        model::transform_backward(kind, t, rel, true, dy, dt, drel);
    }
}

/// Mean over the batch of `‖T_r(h)‖² + ‖t‖² + ‖T_r^⊤(t)‖² + ‖h‖²`.
pub fn penalty_dura(params: &ModelParams, batch: &[Triple], grads: &mut Gradients, weight: f64) -> Result<f64> {
    let kind = params.kind();
    if !kind.is_bilinear() {
        return Err(KgError::Unsupported {
            regularizer: "DURA",
            model: kind.name(),
        });
    }
    require_batch(batch)?;
    let d = params.dim();
    let w = weight / batch.len() as f64;
    let (hb, tb) = (params.head_block(), params.tail_block());
    let mut hr = vec![0.0; d];
    let mut tr = vec![0.0; d];
    let mut total = 0.0;
    for t in batch {
        let h = params.row(hb, t.head);
        let rel = params.relation(t.relation);
        let tl = params.row(tb, t.tail);
        model::transform(kind, h, rel, false, &mut hr);
        adjoint_transform(kind, tl, rel, &mut tr);
        total += model::dot(&hr, &hr) + model::dot(tl, tl) + model::dot(&tr, &tr) + model::dot(h, h);

        let dhr: Vec<f64> = hr.iter().map(|v| 2.0 * w * v).collect();
        let dtr: Vec<f64> = tr.iter().map(|v| 2.0 * w * v).collect();
        let mut dh = vec![0.0; d];
        let mut dt = vec![0.0; d];
        axpy(2.0 * w, h, &mut dh);
        axpy(2.0 * w, tl, &mut dt);
        {
            let drel = grads.relations.row_mut(t.relation);
            model::transform_backward(kind, h, rel, false, &dhr, &mut dh, drel);
            adjoint_backward(kind, tl, rel, &dtr, &mut dt, drel);
        }
        model::add_into(grads.block_mut(hb).row_mut(t.head), &dh);
        model::add_into(grads.block_mut(tb).row_mut(t.tail), &dt);
    }
    Ok(total / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// ER pairs and labels

/// Two batch triples sharing a relation, by index into the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub a: usize,
    pub b: usize,
    pub relation: usize,
}

/// Groups the batch by relation and draws up to `budget` pairs of triples with
/// distinct heads per relation. Deterministic in `(batch order, seed)`.
pub fn select_pairs(batch: &[Triple], budget: usize, seed: u64) -> Vec<RawPair> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in batch.iter().enumerate() {
        groups.entry(t.relation).or_default().push(i);
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for (relation, members) in groups {
        let candidates = distinct_pairs(members.len(), |i, j| batch[members[i]].head != batch[members[j]].head);
        let chosen = draw(&candidates, budget, &mut rng);
        out.extend(chosen.into_iter().map(|(i, j)| RawPair {
            a: members[i],
            b: members[j],
            relation,
        }));
    }
    out
}

fn distinct_pairs(n: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if keep(i, j) {
                v.push((i, j));
            }
        }
    }
    v
}

/// Up to `budget` elements without replacement, in original order.
fn draw<T: Copy>(items: &[T], budget: usize, rng: &mut rng::Rng) -> Vec<T> {
    if items.len() <= budget {
        return items.to_vec();
    }
    let mut picked = index::sample(rng, items.len(), budget).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairLabel {
    /// Hard label from categories (or supplied directly).
    Fixed(f64),
    /// `σ((ε_r - ‖x_a - x_b‖)/τ)`, evaluated against current parameters.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub relation: usize,
    pub label: PairLabel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<LabeledPair>,
}

/// Per-relation learned similarity thresholds and their Adagrad state.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonState {
    values: Vec<f64>,
    pub accumulators: Vec<f64>,
}

impl EpsilonState {
    pub fn new(n_relations: usize) -> Self {
        EpsilonState {
            values: vec![f64::NAN; n_relations],
            accumulators: vec![0.0; n_relations],
        }
    }

    /// Restores thresholds from raw values; `NaN` marks "not initialized".
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        EpsilonState {
            values,
            accumulators: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: usize) -> Option<f64> {
        self.values.get(r).copied().filter(|v| !v.is_nan())
    }

    pub fn set(&mut self, r: usize, value: f64) {
        self.values[r] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn any_initialized(&self) -> bool {
        self.values.iter().any(|v| !v.is_nan())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn head_distance(params: &ModelParams, a: usize, b: usize) -> f64 {
    let (xa, xb) = (params.head(a), params.head(b));
    xa.iter().zip(xb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Category label when both entities are labeled, otherwise `None`.
fn category_label(categories: Option<&CategoryMap>, a: usize, b: usize) -> Option<f64> {
    let cats = categories?;
    match (cats.category(a), cats.category(b)) {
        (Some(x), Some(y)) => Some(if x == y { 1.0 } else { 0.0 }),
        _ => None,
    }
}

/// Similarity label for two head entities under relation `r`.
///
/// Proximity and dissimilarity modes use categories (1 if equal, else 0) and
/// fall back to the learned threshold for unlabeled entities unless `policy`
/// is [`UnlabeledPolicy::Error`]. Joint mode always uses `σ((ε_r - ‖x_a - x_b‖)/τ)`.
#[allow(clippy::too_many_arguments)]
pub fn pair_label(
    params: &ModelParams,
    h_a: usize,
    h_b: usize,
    r: usize,
    mode: ErMode,
    categories: Option<&CategoryMap>,
    eps: &EpsilonState,
    tau: f64,
    policy: UnlabeledPolicy,
) -> Result<f64> {
    if mode != ErMode::Joint {
        if let Some(a) = category_label(categories, h_a, h_b) {
            return Ok(a);
        }
        if policy == UnlabeledPolicy::Error {
            return Err(KgError::Config(format!("entity {h_a} or {h_b} has no category")));
        }
    }
    let e = eps
        .get(r)
        .ok_or_else(|| KgError::Config(format!("epsilon for relation {r} not initialized")))?;
    Ok(sigmoid((e - head_distance(params, h_a, h_b)) / tau))
}

/// Attaches labels to raw pairs and applies the mode's pair filter.
pub fn label_pairs(
    batch: &[Triple],
    raw: &[RawPair],
    spec: &RegularizerSpec,
    categories: Option<&CategoryMap>,
) -> Result<PairBatch> {
    let mut pairs = Vec::with_capacity(raw.len());
    let mut fallbacks = 0;
    for p in raw {
        let label = resolve_label(
            spec,
            categories,
            batch[p.a].head,
            batch[p.b].head,
            &mut fallbacks,
        )?;
        if let Some(label) = label {
            pairs.push(LabeledPair {
                a: p.a,
                b: p.b,
                relation: p.relation,
                label,
            });
        }
    }
    if fallbacks > 0 {
        warn!("{fallbacks} ER pair(s) had unlabeled entities; using learned threshold");
    }
    Ok(PairBatch { pairs })
}

/// `None` drops the pair.
fn resolve_label(
    spec: &RegularizerSpec,
    categories: Option<&CategoryMap>,
    a: usize,
    b: usize,
    fallbacks: &mut usize,
) -> Result<Option<PairLabel>> {
    if spec.er_mode == ErMode::Joint {
        return Ok(Some(PairLabel::Learned));
    }
    match category_label(categories, a, b) {
        Some(l) => {
            let keep = match spec.er_mode {
                ErMode::Proximity => l == 1.0,
                _ => l == 0.0,
            };
            Ok(keep.then_some(PairLabel::Fixed(l)))
        }
        None if spec.unlabeled == UnlabeledPolicy::Error => Err(KgError::Config(format!(
            "entity {a} or {b} has no category"
        ))),
        None => {
            *fallbacks += 1;
            Ok(Some(PairLabel::Learned))
        }
    }
}

/// Initializes `ε_r` for relations that have learned-label pairs and no value yet.
pub fn init_epsilon<'a>(
    params: &ModelParams,
    heads: impl IntoIterator<Item = (usize, usize, usize)> + 'a,
    init: EpsilonInit,
    eps: &mut EpsilonState,
) {
    let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (a, b, r) in heads {
        if eps.get(r).is_none() {
            pending.entry(r).or_default().push(head_distance(params, a, b));
        }
    }
    for (r, mut dists) in pending {
        let value = match init {
            EpsilonInit::Constant(v) => v,
            EpsilonInit::BatchMedian => median(&mut dists),
        };
        eps.set(r, value);
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// ER penalties

struct LabelValue {
    a: f64,
    /// `∂a/∂ε` (0 for fixed labels); `∂a/∂x_a = -slope · (x_a - x_b)/‖x_a - x_b‖`.
    slope: f64,
}

fn label_value(
    params: &ModelParams,
    label: PairLabel,
    h_a: usize,
    h_b: usize,
    r: usize,
    eps: &EpsilonState,
    tau: f64,
) -> Result<LabelValue> {
    match label {
        PairLabel::Fixed(a) => Ok(LabelValue { a, slope: 0.0 }),
        PairLabel::Learned => {
            let e = eps
                .get(r)
                .ok_or_else(|| KgError::Config(format!("epsilon for relation {r} not initialized")))?;
            let a = sigmoid((e - head_distance(params, h_a, h_b)) / tau);
            Ok(LabelValue {
                a,
                slope: a * (1.0 - a) / tau,
            })
        }
    }
}

/// Pushes `∂f/∂a` back into `ε_r` and both head embeddings.
#[allow(clippy::too_many_arguments)]
fn label_backward(
    params: &ModelParams,
    lv: &LabelValue,
    df_da: f64,
    h_a: usize,
    h_b: usize,
    r: usize,
    weight: f64,
    grads: &mut Gradients,
) {
    if lv.slope == 0.0 {
        return;
    }
    let g = weight * df_da * lv.slope;
    grads.epsilon.row_mut(r)[0] += g;
    let dist = head_distance(params, h_a, h_b);
    if dist > 0.0 {
        let diff: Vec<f64> = params
            .head(h_a)
            .iter()
            .zip(params.head(h_b))
            .map(|(u, v)| (u - v) / dist)
            .collect();
        axpy(-g, &diff, grads.entities.row_mut(h_a));
        axpy(g, &diff, grads.entities.row_mut(h_b));
    }
}

/// First-order ER: entity norm term over the batch plus the labelled pair term.
pub fn penalty_er(
    params: &ModelParams,
    batch: &[Triple],
    pairs: &PairBatch,
    spec: &RegularizerSpec,
    eps: &EpsilonState,
    grads: &mut Gradients,
    weight: f64,
) -> Result<f64> {
    require_batch(batch)?;
    let kind = params.kind();
    let complex = kind.is_complex();
    let order = spec.norm_order;
    let d = params.dim();
    let (hb, tb) = (params.head_block(), params.tail_block());

    let wn = weight / batch.len() as f64;
    let mut norm_total = 0.0;
    for t in batch {
        let h = params.row(hb, t.head);
        let tl = params.row(tb, t.tail);
        norm_total += norm_pow(h, order, complex) + norm_pow(tl, order, complex);
        norm_pow_grad(h, order, complex, wn, grads.block_mut(hb).row_mut(t.head));
        norm_pow_grad(tl, order, complex, wn, grads.block_mut(tb).row_mut(t.tail));
    }
    let norm_part = norm_total / batch.len() as f64;

    if pairs.pairs.is_empty() {
        return Ok(norm_part);
    }
    let wp = weight / pairs.pairs.len() as f64;
    let wd = spec.dissimilarity_weight;
    let mut ya = vec![0.0; d];
    let mut yb = vec![0.0; d];
    let mut diff = vec![0.0; d];
    let mut sum = vec![0.0; d];
    let mut pair_total = 0.0;
    for p in &pairs.pairs {
        let (ha, hbid) = (batch[p.a].head, batch[p.b].head);
        let r = p.relation;
        let lv = label_value(params, p.label, ha, hbid, r, eps, spec.temperature)?;
        let rel = params.relation(r);
        let (xa, xb) = (params.head(ha), params.head(hbid));
        model::transform(kind, xa, rel, false, &mut ya);
        model::transform(kind, xb, rel, false, &mut yb);
        for k in 0..d {
            diff[k] = ya[k] - yb[k];
            sum[k] = ya[k] + yb[k];
        }
        let md = norm_pow(&diff, order, complex);
        let ms = norm_pow(&sum, order, complex);
        pair_total += lv.a * md + wd * (1.0 - lv.a) * ms;

        let mut g_diff = vec![0.0; d];
        let mut g_sum = vec![0.0; d];
        norm_pow_grad(&diff, order, complex, wp * lv.a, &mut g_diff);
        norm_pow_grad(&sum, order, complex, wp * wd * (1.0 - lv.a), &mut g_sum);
        let dya: Vec<f64> = g_sum.iter().zip(&g_diff).map(|(s, g)| s + g).collect();
        let dyb: Vec<f64> = g_sum.iter().zip(&g_diff).map(|(s, g)| s - g).collect();
        let mut dxa = vec![0.0; d];
        let mut dxb = vec![0.0; d];
        params.transform_backward(xa, r, &dya, &mut dxa, grads);
        params.transform_backward(xb, r, &dyb, &mut dxb, grads);
        model::add_into(grads.entities.row_mut(ha), &dxa);
        model::add_into(grads.entities.row_mut(hbid), &dxb);
        label_backward(params, &lv, md - wd * ms, ha, hbid, r, wp, grads);
    }
    Ok(norm_part + pair_total / pairs.pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// second order

/// A two-hop path `head -r1-> mid -r2-> end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Path {
    pub head: usize,
    pub r1: usize,
    pub mid: usize,
    pub r2: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathPair {
    pub a: Path,
    pub b: Path,
    pub label: PairLabel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathPairBatch {
    pub pairs: Vec<PathPair>,
}

/// Continuation lookup over the training split.
#[derive(Clone, Debug, Default)]
pub struct PathIndex {
    outgoing: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl PathIndex {
    pub fn new(train: &[Triple]) -> Self {
        PathIndex {
            outgoing: outgoing(train),
        }
    }

    pub fn continuations(&self, entity: usize) -> &[(usize, usize)] {
        self.outgoing.get(&entity).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Above this many paths in a group, pairs are drawn by rejection instead of
/// full enumeration.
const ENUMERATION_LIMIT: usize = 128;

/// Extends each batch triple by one training hop, groups the paths by
/// `(r1, r2)` and draws up to `budget` path pairs with distinct heads per group.
/// Paths that return to their own head are skipped.
pub fn sample_path_pairs(index: &PathIndex, batch: &[Triple], budget: usize, seed: u64) -> Vec<(Path, Path)> {
    let mut groups: BTreeMap<(usize, usize), Vec<Path>> = BTreeMap::new();
    for t in batch {
        for &(r2, end) in index.continuations(t.tail) {
            if end == t.head {
                continue;
            }
            groups.entry((t.relation, r2)).or_default().push(Path {
                head: t.head,
                r1: t.relation,
                mid: t.tail,
                r2,
                end,
            });
        }
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for (_, mut paths) in groups {
        paths.sort_unstable();
        paths.dedup();
        let n = paths.len();
        if n <= ENUMERATION_LIMIT {
            let candidates = distinct_pairs(n, |i, j| paths[i].head != paths[j].head);
            out.extend(draw(&candidates, budget, &mut rng).into_iter().map(|(i, j)| (paths[i], paths[j])));
        } else {
            let mut chosen = std::collections::BTreeSet::new();
            let mut attempts = 0;
            while chosen.len() < budget && attempts < 50 * budget {
                attempts += 1;
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                let (i, j) = (i.min(j), i.max(j));
                if i != j && paths[i].head != paths[j].head {
                    chosen.insert((i, j));
                }
            }
            out.extend(chosen.into_iter().map(|(i, j)| (paths[i], paths[j])));
        }
    }
    out
}

/// Labels path pairs by their heads under `r1`; category modes keep only
/// same-category heads.
pub fn label_path_pairs(
    raw: &[(Path, Path)],
    spec: &RegularizerSpec,
    categories: Option<&CategoryMap>,
) -> Result<PathPairBatch> {
    let proximity_spec = RegularizerSpec {
        er_mode: if spec.er_mode == ErMode::Joint {
            ErMode::Joint
        } else {
            ErMode::Proximity
        },
        ..spec.clone()
    };
    let mut fallbacks = 0;
    let mut pairs = Vec::new();
    for &(a, b) in raw {
        if let Some(label) = resolve_label(&proximity_spec, categories, a.head, b.head, &mut fallbacks)? {
            pairs.push(PathPair { a, b, label });
        }
    }
    if fallbacks > 0 {
        warn!("{fallbacks} path pair(s) had unlabeled heads; using learned threshold");
    }
    Ok(PathPairBatch { pairs })
}

/// Mean over path pairs of `a · m(T_{r2}(T_{r1}(x_a)) - T_{r2}(T_{r1}(x_b)))`.
pub fn penalty_er_second_order(
    params: &ModelParams,
    path_pairs: &PathPairBatch,
    spec: &RegularizerSpec,
    eps: &EpsilonState,
    grads: &mut Gradients,
    weight: f64,
) -> Result<f64> {
    if path_pairs.pairs.is_empty() {
        return Ok(0.0);
    }
    let kind = params.kind();
    let complex = kind.is_complex();
    let d = params.dim();
    let w = weight / path_pairs.pairs.len() as f64;
    let mut total = 0.0;
    let mut ua = vec![0.0; d];
    let mut ub = vec![0.0; d];
    let mut ya = vec![0.0; d];
    let mut yb = vec![0.0; d];
    for pp in &path_pairs.pairs {
        let (r1, r2) = (pp.a.r1, pp.a.r2);
        debug_assert_eq!((r1, r2), (pp.b.r1, pp.b.r2));
        let lv = label_value(params, pp.label, pp.a.head, pp.b.head, r1, eps, spec.temperature)?;
        let (xa, xb) = (params.head(pp.a.head), params.head(pp.b.head));
        let (rel1, rel2) = (params.relation(r1), params.relation(r2));
        model::transform(kind, xa, rel1, false, &mut ua);
        model::transform(kind, xb, rel1, false, &mut ub);
        model::transform(kind, &ua, rel2, false, &mut ya);
        model::transform(kind, &ub, rel2, false, &mut yb);
        let diff: Vec<f64> = ya.iter().zip(&yb).map(|(p, q)| p - q).collect();
        let m = norm_pow(&diff, spec.norm_order, complex);
        total += lv.a * m;

        let mut dya = vec![0.0; d];
        norm_pow_grad(&diff, spec.norm_order, complex, w * lv.a, &mut dya);
        let dyb: Vec<f64> = dya.iter().map(|v| -v).collect();
        for (x, u, dy, head) in [(xa, &ua, &dya, pp.a.head), (xb, &ub, &dyb, pp.b.head)] {
            let mut du = vec![0.0; d];
            params.transform_backward(u, r2, dy, &mut du, grads);
            let mut dx = vec![0.0; d];
            params.transform_backward(x, r1, &du, &mut dx, grads);
            model::add_into(grads.entities.row_mut(head), &dx);
        }
        label_backward(params, &lv, m, pp.a.head, pp.b.head, r1, w, grads);
    }
    Ok(total / path_pairs.pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// dispatch

/// Regularizer bound to its static context (categories, path index), used by
/// the trainer once per batch.
#[derive(Clone, Debug)]
pub struct Regularizer<'a> {
    pub spec: RegularizerSpec,
    pub categories: Option<&'a CategoryMap>,
    pub paths: Option<PathIndex>,
}

impl<'a> Regularizer<'a> {
    pub fn new(spec: RegularizerSpec, categories: Option<&'a CategoryMap>, train: &[Triple]) -> Self {
        let paths = (spec.kind == RegularizerKind::Er && spec.second_order).then(|| PathIndex::new(train));
        Regularizer {
            spec,
            categories,
            paths,
        }
    }

    pub fn is_active(&self) -> bool {
        self.spec.kind != RegularizerKind::None && self.spec.lambda > 0.0
    }

    /// Evaluates the penalty on `batch`, accumulating `weight · ∂penalty`.
    /// For ER this samples pairs with `seed` and initializes any new thresholds.
    pub fn apply(
        &self,
        params: &ModelParams,
        batch: &[Triple],
        eps: &mut EpsilonState,
        grads: &mut Gradients,
        weight: f64,
        seed: u64,
    ) -> Result<f64> {
        match self.spec.kind {
            RegularizerKind::None => Ok(0.0),
            RegularizerKind::Fro => penalty_fro(params, batch, grads, weight),
            RegularizerKind::N3 => penalty_n3(params, batch, grads, weight),
            RegularizerKind::Dura => penalty_dura(params, batch, grads, weight),
            RegularizerKind::Er => {
                let raw = select_pairs(batch, self.spec.pair_budget, rng::derive(seed, &[1]));
                let pairs = label_pairs(batch, &raw, &self.spec, self.categories)?;
                let learned = pairs
                    .pairs
                    .iter()
                    .filter(|p| p.label == PairLabel::Learned)
                    .map(|p| (batch[p.a].head, batch[p.b].head, p.relation));
                init_epsilon(params, learned, self.spec.epsilon_init, eps);
                let mut value = penalty_er(params, batch, &pairs, &self.spec, eps, grads, weight)?;
                if let Some(index) = &self.paths {
                    let raw = sample_path_pairs(index, batch, self.spec.path_budget, rng::derive(seed, &[2]));
                    let path_pairs = label_path_pairs(&raw, &self.spec, self.categories)?;
                    let learned = path_pairs
                        .pairs
                        .iter()
                        .filter(|p| p.label == PairLabel::Learned)
                        .map(|p| (p.a.head, p.b.head, p.a.r1));
                    init_epsilon(params, learned, self.spec.epsilon_init, eps);
                    value += penalty_er_second_order(params, &path_pairs, &self.spec, eps, grads, weight)?;
                }
                Ok(value)
            }
        }
    }
}
