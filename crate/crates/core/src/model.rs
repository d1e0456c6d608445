//! Embedding tables, score functions and relational transforms.
//!
//! Complex-valued kinds (ComplEx, RotatE) store `d/2` complex coordinates as
//! interleaved `(re, im)` pairs, so every row has `d` reals regardless of kind.
//!
//! Bilinear kinds score `Re(<h ⊙ conj(r), t>)` (head conjugated, written here in
//! the equivalent form with the relation conjugated); RESCAL scores `h R tᵀ`.
//! Distance kinds score `-‖T_r(h) - t‖₂`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{KgError, Result};
use crate::grad::Gradients;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "CP")]
    Cp,
    DistMult,
    ComplEx,
    #[serde(rename = "RESCAL")]
    Rescal,
    TransE,
    RotatE,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Cp,
        ModelKind::DistMult,
        ModelKind::ComplEx,
        ModelKind::Rescal,
        ModelKind::TransE,
        ModelKind::RotatE,
    ];

    pub fn is_bilinear(self) -> bool {
        !self.is_distance()
    }

    pub fn is_distance(self) -> bool {
        matches!(self, ModelKind::TransE | ModelKind::RotatE)
    }

    pub fn is_complex(self) -> bool {
        matches!(self, ModelKind::ComplEx | ModelKind::RotatE)
    }

    /// Diagonal bilinear kinds (the ones N3 is defined for).
    pub fn is_diagonal_bilinear(self) -> bool {
        matches!(self, ModelKind::Cp | ModelKind::DistMult | ModelKind::ComplEx)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cp => "CP",
            ModelKind::DistMult => "DistMult",
            ModelKind::ComplEx => "ComplEx",
            ModelKind::Rescal => "RESCAL",
            ModelKind::TransE => "TransE",
            ModelKind::RotatE => "RotatE",
        }
    }

    /// Byte used in checkpoint headers.
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Cp => 0,
            ModelKind::DistMult => 1,
            ModelKind::ComplEx => 2,
            ModelKind::Rescal => 3,
            ModelKind::TransE => 4,
            ModelKind::RotatE => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ModelKind::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| KgError::Config(format!("unknown model kind `{s}`")))
    }
}

/// Parameter block identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    /// Entity table (head-role table for CP).
    Entity,
    /// CP's tail-role table.
    TailEntity,
    Relation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    dim: usize,
    n_entities: usize,
    n_relations: usize,
    entities: Vec<f64>,
    tail_entities: Vec<f64>,
    relations: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters (RotatE relations are still zero; call
    /// [`ModelParams::project_constraints`] to make them unit).
    pub fn zeros(kind: ModelKind, n_entities: usize, n_relations: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(KgError::Config("dim must be positive".into()));
        }
        if kind.is_complex() && dim % 2 != 0 {
            return Err(KgError::Config(format!("{kind} needs an even dim, got {dim}")));
        }
        let rel_width = if kind == ModelKind::Rescal { dim * dim } else { dim };
        let tail = if kind == ModelKind::Cp { n_entities * dim } else { 0 };
        Ok(ModelParams {
            kind,
            dim,
            n_entities,
            n_relations,
            entities: vec![0.0; n_entities * dim],
            tail_entities: vec![0.0; tail],
            relations: vec![0.0; n_relations * rel_width],
        })
    }

    /// Uniform `[-1/√d, 1/√d]` entries; RotatE relations get uniform phases.
    pub fn init(kind: ModelKind, n_entities: usize, n_relations: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(kind, n_entities, n_relations, dim)?;
        let mut rng = rng::seeded(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        for x in p.entities.iter_mut().chain(p.tail_entities.iter_mut()) {
            *x = rng.gen_range(-bound..=bound);
        }
        if kind == ModelKind::RotatE {
            for pair in p.relations.chunks_exact_mut(2) {
                let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                pair[0] = phase.cos();
                pair[1] = phase.sin();
            }
        } else {
            for x in p.relations.iter_mut() {
                *x = rng.gen_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn entity_width(&self) -> usize {
        self.dim
    }

    pub fn relation_width(&self) -> usize {
        if self.kind == ModelKind::Rescal {
            self.dim * self.dim
        } else {
            self.dim
        }
    }

    pub fn has_tail_table(&self) -> bool {
        self.kind == ModelKind::Cp
    }

    /// Block that holds an entity in the head role.
    pub fn head_block(&self) -> Block {
        Block::Entity
    }

    /// Block that holds an entity in the tail role.
    pub fn tail_block(&self) -> Block {
        if self.has_tail_table() {
            Block::TailEntity
        } else {
            Block::Entity
        }
    }

    /// Blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<Block> {
        if self.has_tail_table() {
            vec![Block::Entity, Block::TailEntity, Block::Relation]
        } else {
            vec![Block::Entity, Block::Relation]
        }
    }

    pub fn block(&self, block: Block) -> &[f64] {
        match block {
            Block::Entity => &self.entities,
            Block::TailEntity => &self.tail_entities,
            Block::Relation => &self.relations,
        }
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        match block {
            Block::Entity => &mut self.entities,
            Block::TailEntity => &mut self.tail_entities,
            Block::Relation => &mut self.relations,
        }
    }

    pub fn block_width(&self, block: Block) -> usize {
        match block {
            Block::Relation => self.relation_width(),
            _ => self.dim,
        }
    }

    pub fn row(&self, block: Block, i: usize) -> &[f64] {
        let w = self.block_width(block);
        &self.block(block)[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, block: Block, i: usize) -> &mut [f64] {
        let w = self.block_width(block);
        &mut self.block_mut(block)[i * w..(i + 1) * w]
    }

    pub fn head(&self, e: usize) -> &[f64] {
        self.row(Block::Entity, e)
    }

    pub fn tail(&self, e: usize) -> &[f64] {
        self.row(self.tail_block(), e)
    }

    pub fn relation(&self, r: usize) -> &[f64] {
        self.row(Block::Relation, r)
    }

    pub fn all_finite(&self) -> bool {
        self.entities
            .iter()
            .chain(&self.tail_entities)
            .chain(&self.relations)
            .all(|x| x.is_finite())
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e >= self.n_entities {
            return Err(KgError::Index {
                what: "entity",
                id: e,
                size: self.n_entities,
            });
        }
        Ok(())
    }

    fn check_relation(&self, r: usize) -> Result<()> {
        if r >= self.n_relations {
            return Err(KgError::Index {
                what: "relation",
                id: r,
                size: self.n_relations,
            });
        }
        Ok(())
    }

    /// `T_r(x)`: the relation's action on an embedding (no conjugation).
    pub fn relational_transform(&self, x: &[f64], r: usize) -> Result<Vec<f64>> {
        self.check_relation(r)?;
        if x.len() != self.dim {
            return Err(KgError::Shape {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        transform(self.kind, x, self.relation(r), false, &mut out);
        Ok(out)
    }

    /// Accumulates `dy`'s pull-back through `T_r` into `dx` and the relation gradient.
    pub fn transform_backward(&self, x: &[f64], r: usize, dy: &[f64], dx: &mut [f64], grads: &mut Gradients) {
        transform_backward(
            self.kind,
            x,
            self.relation(r),
            false,
            dy,
            dx,
            grads.relations.row_mut(r),
        );
    }

    /// The per-query vector: for bilinear kinds `q` with `score = q · t`, for
    /// distance kinds `v = T_r(h)` with `score = -‖v - t‖`.
    pub fn query(&self, h: usize, r: usize) -> Vec<f64> {
        let mut q = vec![0.0; self.dim];
        self.query_into(h, r, &mut q);
        q
    }

    pub fn query_into(&self, h: usize, r: usize, out: &mut [f64]) {
        let conj = self.kind == ModelKind::ComplEx;
        transform(self.kind, self.head(h), self.relation(r), conj, out);
    }

    fn score_with_query(&self, q: &[f64], t: usize) -> f64 {
        let tail = self.tail(t);
        if self.kind.is_bilinear() {
            dot(q, tail)
        } else {
            -dist(q, tail)
        }
    }

    pub fn score(&self, h: usize, r: usize, t: usize) -> Result<f64> {
        self.check_entity(h)?;
        self.check_entity(t)?;
        self.check_relation(r)?;
        Ok(self.score_with_query(&self.query(h, r), t))
    }

    pub fn score_all_tails(&self, h: usize, r: usize) -> Result<Vec<f64>> {
        self.check_entity(h)?;
        self.check_relation(r)?;
        let q = self.query(h, r);
        let mut out = vec![0.0; self.n_entities];
        self.scores_from_query(&q, &mut out);
        Ok(out)
    }

    /// Scores every tail for a precomputed query vector.
    pub fn scores_from_query(&self, q: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let table = self.block(self.tail_block());
        if self.kind.is_bilinear() {
            for (s, row) in out.iter_mut().zip(table.chunks_exact(d)) {
                *s = dot(q, row);
            }
        } else {
            for (s, row) in out.iter_mut().zip(table.chunks_exact(d)) {
                *s = -dist(q, row);
            }
        }
    }

    /// Back-propagates `upstream[e] = ∂L/∂score(h, r, e)` for all tails `e`.
    ///
    /// `q` must be `self.query(h, r)`. Rows with zero upstream weight are skipped.
    pub fn tails_backward(&self, h: usize, r: usize, q: &[f64], upstream: &[f64], grads: &mut Gradients) {
        let d = self.dim;
        let tail_block = self.tail_block();
        let table = self.block(tail_block);
        let mut dq = vec![0.0; d];
        if self.kind.is_bilinear() {
            for (e, (&g, row)) in upstream.iter().zip(table.chunks_exact(d)).enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, row, &mut dq);
                axpy(g, q, grads.block_mut(tail_block).row_mut(e));
            }
        } else {
            let mut diff = vec![0.0; d];
            for (e, (&g, row)) in upstream.iter().zip(table.chunks_exact(d)).enumerate() {
                if g == 0.0 {
                    continue;
                }
                for ((o, a), b) in diff.iter_mut().zip(q).zip(row) {
                    *o = a - b;
                }
                let n = norm2(&diff);
                if n == 0.0 {
                    continue;
                }
                // score = -‖q - t‖: ∂/∂q = -(q - t)/n, ∂/∂t = (q - t)/n
                axpy(-g / n, &diff, &mut dq);
                axpy(g / n, &diff, grads.block_mut(tail_block).row_mut(e));
            }
        }
        self.query_backward(h, r, &dq, grads);
    }

    /// Pulls `dq = ∂L/∂query(h, r)` back to the head row and relation.
    pub fn query_backward(&self, h: usize, r: usize, dq: &[f64], grads: &mut Gradients) {
        let conj = self.kind == ModelKind::ComplEx;
        let mut dh = vec![0.0; self.dim];
        transform_backward(
            self.kind,
            self.head(h),
            self.relation(r),
            conj,
            dq,
            &mut dh,
            grads.relations.row_mut(r),
        );
        add_into(grads.entities.row_mut(h), &dh);
    }

    /// Accumulates `weight · ∂score(h, r, t)` into `grads`.
    pub fn score_backward(&self, h: usize, r: usize, t: usize, weight: f64, grads: &mut Gradients) {
        let q = self.query(h, r);
        let mut upstream = vec![0.0; self.n_entities];
        upstream[t] = weight;
        self.tails_backward(h, r, &q, &upstream, grads);
    }

    /// Restores RotatE's unit-modulus relation coordinates. Returns how many
    /// zero-modulus coordinates were reset to `1 + 0i`. No-op for other kinds.
    pub fn project_constraints(&mut self) -> usize {
        if self.kind != ModelKind::RotatE {
            return 0;
        }
        let mut resets = 0;
        for pair in self.relations.chunks_exact_mut(2) {
            let m = pair[0].hypot(pair[1]);
            if m == 0.0 {
                pair[0] = 1.0;
                pair[1] = 0.0;
                resets += 1;
            } else {
                pair[0] /= m;
                pair[1] /= m;
            }
        }
        if resets > 0 {
            warn!("reset {resets} zero-modulus RotatE coordinate(s) to 1+0i");
        }
        resets
    }
}

/// `out = T(x)` for relation parameters `rel`; `conj` conjugates complex relations.
pub(crate) fn transform(kind: ModelKind, x: &[f64], rel: &[f64], conj: bool, out: &mut [f64]) {
    match kind {
        ModelKind::Cp | ModelKind::DistMult => {
            for ((o, a), b) in out.iter_mut().zip(x).zip(rel) {
                *o = a * b;
            }
        }
        ModelKind::ComplEx | ModelKind::RotatE => {
            let sign = if conj { -1.0 } else { 1.0 };
            for ((o, a), c) in out
                .chunks_exact_mut(2)
                .zip(x.chunks_exact(2))
                .zip(rel.chunks_exact(2))
            {
                let (cr, ci) = (c[0], sign * c[1]);
                o[0] = a[0] * cr - a[1] * ci;
                o[1] = a[0] * ci + a[1] * cr;
            }
        }
        ModelKind::Rescal => {
            let d = x.len();
            out.fill(0.0);
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, &rel[i * d..(i + 1) * d], out);
                }
            }
        }
        ModelKind::TransE => {
            for ((o, a), b) in out.iter_mut().zip(x).zip(rel) {
                *o = a + b;
            }
        }
    }
}

/// Adds the pull-back of `dy` through `transform` into `dx` and `drel`.
pub(crate) fn transform_backward(
    kind: ModelKind,
    x: &[f64],
    rel: &[f64],
    conj: bool,
    dy: &[f64],
    dx: &mut [f64],
    drel: &mut [f64],
) {
    match kind {
        ModelKind::Cp | ModelKind::DistMult => {
            for i in 0..x.len() {
                dx[i] += dy[i] * rel[i];
                drel[i] += dy[i] * x[i];
            }
        }
        ModelKind::ComplEx | ModelKind::RotatE => {
            let sign = if conj { -1.0 } else { 1.0 };
            for k in (0..x.len()).step_by(2) {
                let (xr, xi) = (x[k], x[k + 1]);
                let (cr, ci) = (rel[k], sign * rel[k + 1]);
                let (gr, gi) = (dy[k], dy[k + 1]);
                dx[k] += gr * cr + gi * ci;
                dx[k + 1] += -gr * ci + gi * cr;
                drel[k] += gr * xr + gi * xi;
                drel[k + 1] += sign * (-gr * xi + gi * xr);
            }
        }
        ModelKind::Rescal => {
            let d = x.len();
            for i in 0..d {
                let row = &rel[i * d..(i + 1) * d];
                dx[i] += dot(row, dy);
                if x[i] != 0.0 {
                    axpy(x[i], dy, &mut drel[i * d..(i + 1) * d]);
                }
            }
        }
        ModelKind::TransE => {
            add_into(dx, dy);
            add_into(drel, dy);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}
