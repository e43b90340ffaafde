//! Named-slot token layout and the prompt encoding.
//!
//! Each token column packs [x; y; w; pbar; rprime; g; sbar; 1; t]. The pbar,
//! rprime and sbar slots hold the per-layer scratch blocks the constructed
//! stack writes; the constant-1 coordinate feeds value writes and the flag t
//! distinguishes the n in-context examples (t = 1) from the test query (t = 0).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::network::{Dataset, NetworkShape};
use crate::{Error, Result};

/// A contiguous coordinate range within a token column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// Offsets of every named slot for a given network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub shape: NetworkShape,
    x: Slot,
    y: Slot,
    w: Slot,
    pbar: Slot,
    rprime: Slot,
    g: Slot,
    sbar: Slot,
    one: usize,
    flag: usize,
    dim: usize,
}

impl TokenLayout {
    pub fn new(shape: NetworkShape) -> Result<Self> {
        shape.validate()?;
        let (dx, dy, k, depth) = (
            shape.input_dim,
            shape.output_dim,
            shape.width,
            shape.depth,
        );
        // pbar, rprime and sbar each hold N-1 width-K blocks plus one
        // width-d_y block
        let scratch = (depth - 1) * k + dy;
        let mut cursor = 0;
        let mut take = |len: usize| {
            let slot = Slot {
                offset: cursor,
                len,
            };
            cursor += len;
            slot
        };
        let x = take(dx);
        let y = take(dy);
        let w = take(shape.param_count());
        let pbar = take(scratch);
        let rprime = take(scratch);
        let g = take(dy);
        let sbar = take(scratch);
        let one = cursor;
        cursor += 1;
        let flag = cursor;
        cursor += 1;
        Ok(TokenLayout {
            shape,
            x,
            y,
            w,
            pbar,
            rprime,
            g,
            sbar,
            one,
            flag,
            dim: cursor,
        })
    }

    /// Embedding dimension D.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self) -> Slot {
        self.x
    }

    pub fn y(&self) -> Slot {
        self.y
    }

    pub fn w(&self) -> Slot {
        self.w
    }

    pub fn g(&self) -> Slot {
        self.g
    }

    pub fn one(&self) -> usize {
        self.one
    }

    pub fn flag(&self) -> usize {
        self.flag
    }

    /// Block of pbar holding layer j's output, j = 1..=N. Layer outputs of
    /// width K for j < N, d_y for j = N. p(0) is not stored; reads alias the
    /// x slot via [`Self::pbar_or_x`].
    pub fn pbar_block(&self, j: usize) -> Slot {
        debug_assert!(j >= 1 && j <= self.shape.depth);
        Slot {
            offset: self.pbar.offset + (j - 1) * self.shape.width,
            len: self.shape.layer_width(j),
        }
    }

    /// The slot a layer reads p(j-1) from: the x slot for j = 1, otherwise
    /// the stored pbar block.
    pub fn pbar_or_x(&self, j_minus_1: usize) -> Slot {
        if j_minus_1 == 0 {
            self.x
        } else {
            self.pbar_block(j_minus_1)
        }
    }

    /// Block of rprime holding the derivatives at layer j+1's preactivations,
    /// j = 0..=N-1 (block j has width K for j < N-1, d_y for j = N-1).
    pub fn rprime_block(&self, j: usize) -> Slot {
        debug_assert!(j < self.shape.depth);
        Slot {
            offset: self.rprime.offset + j * self.shape.width,
            len: if j + 1 < self.shape.depth {
                self.shape.width
            } else {
                self.shape.output_dim
            },
        }
    }

    /// Block of sbar holding s(j), j = 1..=N. Stored highest layer first:
    /// s(N) (width d_y), then s(N-1)..s(1) (width K each).
    pub fn sbar_block(&self, j: usize) -> Slot {
        debug_assert!(j >= 1 && j <= self.shape.depth);
        let depth = self.shape.depth;
        if j == depth {
            Slot {
                offset: self.sbar.offset,
                len: self.shape.output_dim,
            }
        } else {
            Slot {
                offset: self.sbar.offset + self.shape.output_dim + (depth - 1 - j) * self.shape.width,
                len: self.shape.width,
            }
        }
    }

    /// Position of row v_{j,k} inside the token (w slot plus the flat offset).
    pub fn w_row(&self, j: usize, k: usize) -> Slot {
        let offsets = self.shape.layer_offsets();
        let len = self.shape.row_len(j);
        Slot {
            offset: self.w.offset + offsets[j - 1] + k * len,
            len,
        }
    }

    /// All scratch coordinates cleared at the end of each block
    /// (pbar, rprime, g, sbar).
    pub fn scratch_range(&self) -> Slot {
        Slot {
            offset: self.pbar.offset,
            len: self.sbar.end() - self.pbar.offset,
        }
    }

    /// Named (slot, label) pairs in layout order, for trace output.
    pub fn named_slots(&self) -> Vec<(&'static str, Slot)> {
        vec![
            ("x", self.x),
            ("y", self.y),
            ("w", self.w),
            ("pbar", self.pbar),
            ("rprime", self.rprime),
            ("g", self.g),
            ("sbar", self.sbar),
            (
                "one",
                Slot {
                    offset: self.one,
                    len: 1,
                },
            ),
            (
                "flag",
                Slot {
                    offset: self.flag,
                    len: 1,
                },
            ),
        ]
    }
}

/// The D x (n+1) in-context encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    pub h: Array2<f64>,
    pub layout: TokenLayout,
}

/// Column i = [x_i; y_i; w0; 0; 0; 0; 0; 1; t_i] for the n examples, then the
/// query column with y = 0 and t = 0. The carried parameters w0 are identical
/// in every column.
pub fn encode_prompt(data: &Dataset, w0: &[f64], layout: &TokenLayout) -> Result<PromptMatrix> {
    let shape = layout.shape;
    if w0.len() != shape.param_count() {
        return Err(Error::DimensionMismatch {
            expected: shape.param_count(),
            got: w0.len(),
            context: "carried parameter vector".into(),
        });
    }
    let n = data.len();
    let mut h = Array2::<f64>::zeros((layout.dim(), n + 1));
    for (i, (x, y)) in data.examples.iter().enumerate() {
        if x.len() != shape.input_dim || y.len() != shape.output_dim {
            return Err(Error::DimensionMismatch {
                expected: shape.input_dim,
                got: x.len(),
                context: format!("example {i}"),
            });
        }
        for (c, v) in x.iter().enumerate() {
            h[(layout.x().offset + c, i)] = *v;
        }
        for (c, v) in y.iter().enumerate() {
            h[(layout.y().offset + c, i)] = *v;
        }
        h[(layout.flag(), i)] = 1.0;
    }
    for (c, v) in data.query.iter().enumerate() {
        h[(layout.x().offset + c, n)] = *v;
    }
    for i in 0..=n {
        for (c, v) in w0.iter().enumerate() {
            h[(layout.w().offset + c, i)] = *v;
        }
        h[(layout.one(), i)] = 1.0;
    }
    Ok(PromptMatrix {
        h,
        layout: *layout,
    })
}

impl PromptMatrix {
    pub fn tokens(&self) -> usize {
        self.h.ncols()
    }

    /// The w slot of token i.
    pub fn w_column(&self, token: usize) -> Vec<f64> {
        let slot = self.layout.w();
        (slot.offset..slot.end())
            .map(|r| self.h[(r, token)])
            .collect()
    }

    pub fn slot_column(&self, slot: Slot, token: usize) -> Vec<f64> {
        (slot.offset..slot.end())
            .map(|r| self.h[(r, token)])
            .collect()
    }

    /// Inverse of `encode_prompt` on a block-boundary state.
    pub fn decode(&self) -> Result<(Dataset, Vec<f64>)> {
        let n = self.tokens() - 1;
        let layout = &self.layout;
        let examples = (0..n)
            .map(|i| {
                (
                    self.slot_column(layout.x(), i),
                    self.slot_column(layout.y(), i),
                )
            })
            .collect();
        let query = self.slot_column(layout.x(), n);
        Ok((Dataset::new(examples, query)?, self.w_column(0)))
    }

    /// CSV dump, one column per token.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.h.nrows() {
            let row: Vec<String> = (0..self.h.ncols())
                .map(|c| format!("{}", self.h[(r, c)]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
