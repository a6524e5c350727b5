//! A small reverse-mode recorder for chains of separable filtering steps.

use std::collections::HashMap;
use std::sync::Arc;

use super::stencil::{self, Stencil};
use super::{Band, FilterBank};
use crate::grid::Grid3;

struct Op {
    band: Band,
    axis: usize,
    stencil: Arc<Stencil>,
    src: usize,
    dst: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Analysis,
    Synthesis,
}

pub(crate) struct Graph<'a> {
    bank: &'a FilterBank,
    nodes: Vec<Grid3>,
    ops: Vec<Op>,
    /// Nodes created by `input`; their gradients are never needed.
    leaves: Vec<bool>,
    stencils: HashMap<(Kind, usize, usize, i64), Arc<Stencil>>,
}

impl<'a> Graph<'a> {
    pub(crate) fn new(bank: &'a FilterBank) -> Self {
        Self {
            bank,
            nodes: Vec::new(),
            ops: Vec::new(),
            leaves: Vec::new(),
            stencils: HashMap::new(),
        }
    }

    pub(crate) fn input(&mut self, g: Grid3) -> usize {
        self.nodes.push(g);
        self.leaves.push(true);
        self.nodes.len() - 1
    }

    pub(crate) fn node(&self, id: usize) -> &Grid3 {
        &self.nodes[id]
    }

    pub(crate) fn take(&mut self, id: usize) -> Grid3 {
        std::mem::replace(&mut self.nodes[id], Grid3::zeros([0, 0, 0]))
    }

    fn stencil(&mut self, kind: Kind, n_in: usize, n_out: usize, offset: i64) -> Arc<Stencil> {
        let len = self.bank.len();
        self.stencils
            .entry((kind, n_in, n_out, offset))
            .or_insert_with(|| {
                Arc::new(match kind {
                    Kind::Analysis => Stencil::analysis(n_in, len, offset),
                    Kind::Synthesis => Stencil::synthesis(n_in, n_out, len, offset),
                })
            })
            .clone()
    }

    fn record(
        &mut self,
        band: Band,
        axis: usize,
        st: Arc<Stencil>,
        src: usize,
        dst: Option<usize>,
    ) -> usize {
        let dims = stencil::output_dims(&st, self.nodes[src].dims(), axis);
        let dst = match dst {
            Some(d) => {
                debug_assert_eq!(self.nodes[d].dims(), dims);
                d
            }
            None => {
                self.nodes.push(Grid3::zeros(dims));
                self.leaves.push(false);
                self.nodes.len() - 1
            }
        };
        let taps = self.bank.filter(band).taps();
        let (src_grid, dst_grid) = if src < dst {
            let (a, b) = self.nodes.split_at_mut(dst);
            (&a[src], &mut b[0])
        } else {
            let (a, b) = self.nodes.split_at_mut(src);
            (&b[0], &mut a[dst])
        };
        stencil::apply(&st, taps, axis, src_grid, dst_grid);
        self.ops.push(Op {
            band,
            axis,
            stencil: st,
            src,
            dst,
        });
        dst
    }

    /// Analysis along `axis` with the low or high filter.
    pub(crate) fn analyze(&mut self, src: usize, axis: usize, band: Band) -> usize {
        let n = self.nodes[src].dims()[axis];
        let m = stencil::analysis_len(n, self.bank.len());
        let st = self.stencil(Kind::Analysis, n, m, self.bank.filter(band).offset());
        self.record(band, axis, st, src, None)
    }

    /// Synthesis along `axis` into a signal of length `n_out`, added into `dst`
    /// when given.
    pub(crate) fn synthesize(
        &mut self,
        src: usize,
        axis: usize,
        band: Band,
        n_out: usize,
        dst: Option<usize>,
    ) -> usize {
        let m = self.nodes[src].dims()[axis];
        let st = self.stencil(Kind::Synthesis, m, n_out, self.bank.filter(band).offset());
        self.record(band, axis, st, src, dst)
    }

    /// Splits `src` into its 8 subbands, indexed `bx + 2 by + 4 bz`
    /// (0 = low, 1 = high per axis).
    pub(crate) fn analyze_all(&mut self, src: usize) -> Vec<usize> {
        let mut bands = vec![src];
        for axis in 0..3 {
            let lows: Vec<usize> = bands
                .iter()
                .map(|&b| self.analyze(b, axis, Band::AnalysisLow))
                .collect();
            let highs: Vec<usize> = bands
                .iter()
                .map(|&b| self.analyze(b, axis, Band::AnalysisHigh))
                .collect();
            bands = lows.into_iter().chain(highs).collect();
        }
        bands
    }

    pub(crate) fn analyze_low(&mut self, src: usize) -> usize {
        (0..3).fold(src, |n, axis| self.analyze(n, axis, Band::AnalysisLow))
    }

    /// Inverse of [`Graph::analyze_all`], trimmed to `target`.
    pub(crate) fn synthesize_all(&mut self, bands: &[usize], target: [usize; 3]) -> usize {
        debug_assert_eq!(bands.len(), 8);
        let mut bands = bands.to_vec();
        for axis in (0..3).rev() {
            let half = bands.len() / 2;
            bands = (0..half)
                .map(|i| {
                    let d = self.synthesize(bands[i], axis, Band::SynthesisLow, target[axis], None);
                    self.synthesize(
                        bands[i + half],
                        axis,
                        Band::SynthesisHigh,
                        target[axis],
                        Some(d),
                    )
                })
                .collect();
        }
        bands[0]
    }

    /// Low-pass-only synthesis: the missing details are zero.
    pub(crate) fn synthesize_low(&mut self, src: usize, target: [usize; 3]) -> usize {
        (0..3).rev().fold(src, |n, axis| {
            self.synthesize(n, axis, Band::SynthesisLow, target[axis], None)
        })
    }

    /// Reverse sweep from a single seeded node. Returns per-band tap
    /// gradients in [`Band`] order.
    pub(crate) fn backward(&self, seed: usize, seed_grad: Grid3) -> [Vec<f64>; 4] {
        let len = self.bank.len();
        let mut taps: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; len]);
        let mut grads: Vec<Option<Grid3>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed] = Some(seed_grad);
        for op in self.ops.iter().rev() {
            let Some(gd) = grads[op.dst].as_ref() else {
                continue;
            };
            let tg = stencil::tap_gradient(&op.stencil, op.axis, gd, &self.nodes[op.src]);
            for (a, b) in taps[op.band as usize].iter_mut().zip(tg) {
                *a += b;
            }
            if self.leaves[op.src] {
                continue;
            }
            let mut gs = grads[op.src]
                .take()
                .unwrap_or_else(|| Grid3::zeros(self.nodes[op.src].dims()));
            let gd = grads[op.dst].as_ref().expect("checked above");
            stencil::apply_adjoint(
                &op.stencil,
                self.bank.filter(op.band).taps(),
                op.axis,
                gd,
                &mut gs,
            );
            grads[op.src] = Some(gs);
        }
        taps
    }
}
