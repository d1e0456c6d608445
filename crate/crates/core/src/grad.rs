//! Row-sparse gradient buffers matching the parameter blocks of a model.

use crate::model::{Block, ModelParams};

/// Dense storage for one parameter block plus a record of touched rows, so
/// clearing and optimizer steps only visit rows that received gradient.
#[derive(Clone, Debug)]
pub struct GradBlock {
    width: usize,
    data: Vec<f64>,
    touched: Vec<bool>,
    touched_rows: Vec<usize>,
}

impl GradBlock {
    pub fn new(rows: usize, width: usize) -> Self {
        GradBlock {
            width,
            data: vec![0.0; rows * width],
            touched: vec![false; rows],
            touched_rows: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.touched.len()
    }

    /// Mutable row, marking it touched.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        if !self.touched[i] {
            self.touched[i] = true;
            self.touched_rows.push(i);
        }
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    /// The row if it was touched since the last clear.
    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.touched[i].then(|| &self.data[i * self.width..(i + 1) * self.width])
    }

    /// Row contents regardless of touch state (zeros when untouched).
    pub fn row_or_zero(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Touched rows in first-touch order.
    pub fn touched_rows(&self) -> &[usize] {
        &self.touched_rows
    }

    pub fn clear(&mut self) {
        for &i in &self.touched_rows {
            self.data[i * self.width..(i + 1) * self.width].fill(0.0);
            self.touched[i] = false;
        }
        self.touched_rows.clear();
    }

    /// Adds `other` row by row, visiting rows in `other`'s touch order.
    pub fn add_from(&mut self, other: &GradBlock) {
        debug_assert_eq!(self.width, other.width);
        for &i in &other.touched_rows {
            let src = &other.data[i * other.width..(i + 1) * other.width];
            for (d, s) in self.row_mut(i).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Gradient of a scalar objective with respect to every trainable block.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub entities: GradBlock,
    pub tail_entities: GradBlock,
    pub relations: GradBlock,
    /// One scalar per relation: the learned ER similarity threshold.
    pub epsilon: GradBlock,
}

impl Gradients {
    pub fn for_params(params: &ModelParams) -> Self {
        let tail_rows = if params.has_tail_table() {
            params.n_entities()
        } else {
            0
        };
        Gradients {
            entities: GradBlock::new(params.n_entities(), params.entity_width()),
            tail_entities: GradBlock::new(tail_rows, params.entity_width()),
            relations: GradBlock::new(params.n_relations(), params.relation_width()),
            epsilon: GradBlock::new(params.n_relations(), 1),
        }
    }

    pub fn block_mut(&mut self, block: Block) -> &mut GradBlock {
        match block {
            Block::Entity => &mut self.entities,
            Block::TailEntity => &mut self.tail_entities,
            Block::Relation => &mut self.relations,
        }
    }

    pub fn block(&self, block: Block) -> &GradBlock {
        match block {
            Block::Entity => &self.entities,
            Block::TailEntity => &self.tail_entities,
            Block::Relation => &self.relations,
        }
    }

    pub fn clear(&mut self) {
        self.entities.clear();
        self.tail_entities.clear();
        self.relations.clear();
        self.epsilon.clear();
    }

    pub fn add_from(&mut self, other: &Gradients) {
        self.entities.add_from(&other.entities);
        self.tail_entities.add_from(&other.tail_entities);
        self.relations.add_from(&other.relations);
        self.epsilon.add_from(&other.epsilon);
    }

    /// Gradient entry for a flat parameter coordinate, zero if untouched.
    pub fn get(&self, block: Block, row: usize, col: usize) -> f64 {
        self.block(block).row(row).map_or(0.0, |r| r[col])
    }

    pub fn epsilon_grad(&self, relation: usize) -> f64 {
        self.epsilon.row(relation).map_or(0.0, |r| r[0])
    }
}
