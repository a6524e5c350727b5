//! Separable multi-level 3D biorthogonal wavelet transform with learnable
//! taps.
//!
//! # Conventions
//!
//! * Boundaries use half-sample symmetric extension on both analysis and
//!   synthesis. Analysis is expansive: a length-`n` axis with `L`-tap
//!   filters produces `floor((n + L - 1) / 2)` coefficients, and synthesis
//!   trims back to the stored length of the finer level. For Haar this is
//!   exactly `ceil(n / 2)`; for bior6.8 a 48-sample axis becomes 32, 24, 20
//!   over three levels.
//! * Filters keep their natural DC gain (`sqrt 2` per axis for the presets),
//!   so the coarse band of a constant volume `c` is `c * 2^(3J/2)`.
//! * Subbands are indexed `bx + 2 by + 4 bz` with 0 = low-pass: index 0 is
//!   the coarse LLL band and 1..=7 are the fine channels.
//! * All four filters of a bank share one length `L`; presets are zero
//!   padded the usual way to make that true.
//!
//! Only the level-`J` details are kept. Details of levels `1..J` are
//! dropped, which is where the transform loses information; the
//! [`decompose_full`] / [`invert_full`] pair keeps them for diagnostics.

mod io;
mod optimize;
mod stencil;
mod tape;

pub use io::{
    bank_from_json, bank_to_json, load_bank, read_pyramid, save_bank, write_pyramid, PYRAMID_MAGIC,
    PYRAMID_VERSION,
};
pub use optimize::{optimize_filters, OptimizeConfig, OptimizeResult, TraceRow, Trainable};
pub use stencil::analysis_len;

use tape::Graph;

use crate::error::{invalid, mismatch, Error, Result};
use crate::geometry::Vec3;
use crate::grid::Grid3;
use crate::volume::{unit_domain, UdfVolume, WeightMask, DEFAULT_TRUNCATION};

pub const DEFAULT_LEVELS: usize = 3;
pub const FINE_CHANNELS: usize = 7;
pub const PRESETS: [&str; 3] = ["haar", "bior3.3", "bior6.8"];

/// The four filters of a bank, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    AnalysisLow = 0,
    AnalysisHigh = 1,
    SynthesisLow = 2,
    SynthesisHigh = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [
        Band::AnalysisLow,
        Band::AnalysisHigh,
        Band::SynthesisLow,
        Band::SynthesisHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Band::AnalysisLow => "analysis_low",
            Band::AnalysisHigh => "analysis_high",
            Band::SynthesisLow => "synthesis_low",
            Band::SynthesisHigh => "synthesis_high",
        }
    }

    pub fn is_analysis(self) -> bool {
        matches!(self, Band::AnalysisLow | Band::AnalysisHigh)
    }
}

/// A tap vector plus an integer shift of its support.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    taps: Vec<f64>,
    offset: i64,
}

impl Filter {
    pub fn new(taps: Vec<f64>, offset: i64) -> Result<Self> {
        if taps.len() < 2 {
            return Err(invalid(format!(
                "filter needs at least 2 taps, got {}",
                taps.len()
            )));
        }
        if !taps.iter().all(|t| t.is_finite()) {
            return Err(invalid("non-finite filter tap"));
        }
        Ok(Self { taps, offset })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }
}

/// Analysis (decomposition) and synthesis (inversion) filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    filters: [Filter; 4],
}

const R: f64 = std::f64::consts::FRAC_1_SQRT_2;
const HAAR: [[f64; 2]; 4] = [[R, R], [-R, R], [R, R], [R, -R]];

const BIOR33: [[f64; 8]; 4] = [
    [
        0.06629126073623882,
        -0.1988737822087165,
        -0.15467960838455727,
        0.9943689110435825,
        0.9943689110435825,
        -0.15467960838455727,
        -0.1988737822087165,
        0.06629126073623882,
    ],
    [
        0.0,
        0.0,
        -0.1767766952966369,
        0.5303300858899106,
        -0.5303300858899106,
        0.1767766952966369,
        0.0,
        0.0,
    ],
    [
        0.0,
        0.0,
        0.1767766952966369,
        0.5303300858899106,
        0.5303300858899106,
        0.1767766952966369,
        0.0,
        0.0,
    ],
    [
        0.06629126073623882,
        0.1988737822087165,
        -0.15467960838455727,
        -0.9943689110435825,
        0.9943689110435825,
        0.15467960838455727,
        -0.1988737822087165,
        -0.06629126073623882,
    ],
];

const BIOR68: [[f64; 18]; 4] = [
    [
        0.0,
        0.0019088317364812906,
        -0.0019142861290887667,
        -0.016990639867602342,
        0.01193456527972926,
        0.04973290349094079,
        -0.07726317316720414,
        -0.09405920349573646,
        0.4207962846098268,
        0.8259229974584023,
        0.4207962846098268,
        -0.09405920349573646,
        -0.07726317316720414,
        0.04973290349094079,
        0.01193456527972926,
        -0.016990639867602342,
        -0.0019142861290887667,
        0.0019088317364812906,
    ],
    [
        0.0,
        0.0,
        0.0,
        0.014426282505624435,
        -0.014467504896790148,
        -0.07872200106262882,
        0.04036797903033992,
        0.41784910915027457,
        -0.7589077294536541,
        0.41784910915027457,
        0.04036797903033992,
        -0.07872200106262882,
        -0.014467504896790148,
        0.014426282505624435,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        0.0,
        0.0,
        0.0,
        0.014426282505624435,
        0.014467504896790148,
        -0.07872200106262882,
        -0.04036797903033992,
        0.41784910915027457,
        0.7589077294536541,
        0.41784910915027457,
        -0.04036797903033992,
        -0.07872200106262882,
        0.014467504896790148,
        0.014426282505624435,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        0.0,
        -0.0019088317364812906,
        -0.0019142861290887667,
        0.016990639867602342,
        0.01193456527972926,
        -0.04973290349094079,
        -0.07726317316720414,
        0.09405920349573646,
        0.4207962846098268,
        -0.8259229974584023,
        0.4207962846098268,
        0.09405920349573646,
        -0.07726317316720414,
        -0.04973290349094079,
        0.01193456527972926,
        0.016990639867602342,
        -0.0019142861290887667,
        -0.0019088317364812906,
    ],
];

impl FilterBank {
    pub fn new(
        analysis_low: Filter,
        analysis_high: Filter,
        synthesis_low: Filter,
        synthesis_high: Filter,
    ) -> Result<Self> {
        let filters = [analysis_low, analysis_high, synthesis_low, synthesis_high];
        let len = filters[0].taps.len();
        if let Some((b, f)) = Band::ALL
            .iter()
            .zip(&filters)
            .find(|(_, f)| f.taps.len() != len)
        {
            return Err(invalid(format!(
                "{} has {} taps but analysis_low has {len}; pad filters to a common length",
                b.name(),
                f.taps.len()
            )));
        }
        Ok(Self { filters })
    }

    fn from_rows<const L: usize>(rows: &[[f64; L]; 4]) -> Self {
        let f = |r: &[f64; L]| Filter {
            taps: r.to_vec(),
            offset: 0,
        };
        Self {
            filters: [f(&rows[0]), f(&rows[1]), f(&rows[2]), f(&rows[3])],
        }
    }

    /// One of [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "haar" | "db1" | "bior1.1" => Ok(Self::from_rows(&HAAR)),
            "bior3.3" => Ok(Self::from_rows(&BIOR33)),
            "bior6.8" => Ok(Self::from_rows(&BIOR68)),
            other => Err(invalid(format!(
                "unknown filter preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    /// Common tap count.
    pub fn len(&self) -> usize {
        self.filters[0].taps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn filter(&self, band: Band) -> &Filter {
        &self.filters[band as usize]
    }

    pub fn analysis_low(&self) -> &Filter {
        &self.filters[0]
    }

    pub fn analysis_high(&self) -> &Filter {
        &self.filters[1]
    }

    pub fn synthesis_low(&self) -> &Filter {
        &self.filters[2]
    }

    pub fn synthesis_high(&self) -> &Filter {
        &self.filters[3]
    }

    /// All taps, concatenated in [`Band`] order.
    pub fn params(&self) -> Vec<f64> {
        self.filters
            .iter()
            .flat_map(|f| f.taps.iter().copied())
            .collect()
    }

    /// A copy with taps replaced from a [`FilterBank::params`]-shaped slice.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let len = self.len();
        if params.len() != 4 * len {
            return Err(mismatch(format!(
                "{} parameters for a bank of 4 x {len} taps",
                params.len()
            )));
        }
        let mut out = self.clone();
        for (f, chunk) in out.filters.iter_mut().zip(params.chunks(len)) {
            if !chunk.iter().all(|t| t.is_finite()) {
                return Err(Error::Numeric("non-finite filter tap".into()));
            }
            f.taps.copy_from_slice(chunk);
        }
        Ok(out)
    }
}

/// Physical placement of the volume a pyramid was computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceFrame {
    pub origin: Vec3,
    pub spacing: f64,
    pub truncation: f64,
}

impl SourceFrame {
    pub fn of(udf: &UdfVolume) -> Self {
        Self {
            origin: udf.origin(),
            spacing: udf.spacing(),
            truncation: udf.truncation(),
        }
    }

    /// Unit-domain placement for a grid with `n` samples along x.
    pub fn unit(n: usize) -> Self {
        let (origin, spacing) = unit_domain(n.max(2));
        Self {
            origin,
            spacing,
            truncation: DEFAULT_TRUNCATION,
        }
    }
}

/// Coarse LLL band plus the seven fine level-`J` bands.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub coarse: Grid3,
    /// Channels 1..=7 of the subband index, stored as `fine[c - 1]`.
    pub fine: Vec<Grid3>,
    pub levels: usize,
    pub filter_len: usize,
    /// Grid dimensions at levels `0..=J`; `chain[0]` is the source.
    pub chain: Vec<[usize; 3]>,
    pub frame: SourceFrame,
}

impl WaveletPyramid {
    pub fn source_resolution(&self) -> [usize; 3] {
        self.chain[0]
    }

    pub fn coarse_resolution(&self) -> [usize; 3] {
        self.chain[self.levels]
    }

    /// The same pyramid with every fine channel set to zero.
    pub fn without_fine(&self) -> Self {
        let mut p = self.clone();
        for f in &mut p.fine {
            f.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    fn check(&self, bank: &FilterBank) -> Result<()> {
        if bank.len() != self.filter_len {
            return Err(mismatch(format!(
                "bank has {} taps, pyramid was built with {}",
                bank.len(),
                self.filter_len
            )));
        }
        if self.levels == 0 || self.chain.len() != self.levels + 1 {
            return Err(mismatch("pyramid level metadata is inconsistent"));
        }
        if self.chain != level_chain(self.chain[0], self.filter_len, self.levels) {
            return Err(mismatch(
                "pyramid resolution chain does not follow the length rule",
            ));
        }
        let c = self.coarse_resolution();
        if self.coarse.dims() != c {
            return Err(mismatch(format!(
                "coarse band is {:?}, expected {c:?}",
                self.coarse.dims()
            )));
        }
        if self.fine.len() != FINE_CHANNELS || self.fine.iter().any(|f| f.dims() != c) {
            return Err(mismatch(format!("fine bands must be 7 volumes of {c:?}")));
        }
        Ok(())
    }
}

/// Grid dimensions at each level, source first.
pub fn level_chain(source: [usize; 3], filter_len: usize, levels: usize) -> Vec<[usize; 3]> {
    let mut chain = vec![source];
    for _ in 0..levels {
        let last = *chain.last().unwrap();
        chain.push(last.map(|n| analysis_len(n, filter_len)));
    }
    chain
}

fn check_levels(dims: [usize; 3], levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(invalid("levels must be at least 1"));
    }
    if levels >= usize::BITS as usize || dims.iter().any(|&n| n < 1usize << levels) {
        return Err(invalid(format!(
            "every dimension of {dims:?} must be at least 2^{levels}"
        )));
    }
    Ok(())
}

/// Builds the lossy decompose-then-invert chain on `graph`, returning the
/// coarse node, the seven fine nodes and the reconstruction node.
fn record_roundtrip(
    graph: &mut Graph,
    input: usize,
    chain: &[[usize; 3]],
) -> (usize, Vec<usize>, usize) {
    let levels = chain.len() - 1;
    let mut node = input;
    for _ in 1..levels {
        node = graph.analyze_low(node);
    }
    let bands = graph.analyze_all(node);
    let mut out = graph.synthesize_all(&bands, chain[levels - 1]);
    for l in (0..levels - 1).rev() {
        out = graph.synthesize_low(out, chain[l]);
    }
    (bands[0], bands[1..].to_vec(), out)
}

/// Decomposition of a raw grid; the frame is only carried along.
pub fn decompose_grid(
    u: &Grid3,
    bank: &FilterBank,
    levels: usize,
    frame: SourceFrame,
) -> Result<WaveletPyramid> {
    check_levels(u.dims(), levels)?;
    let chain = level_chain(u.dims(), bank.len(), levels);
    let mut g = Graph::new(bank);
    let mut node = g.input(u.clone());
    for _ in 1..levels {
        node = g.analyze_low(node);
    }
    let bands = g.analyze_all(node);
    let coarse = g.take(bands[0]);
    let fine = bands[1..].iter().map(|&b| g.take(b)).collect();
    Ok(WaveletPyramid {
        coarse,
        fine,
        levels,
        filter_len: bank.len(),
        chain,
        frame,
    })
}

pub fn decompose(udf: &UdfVolume, bank: &FilterBank, levels: usize) -> Result<WaveletPyramid> {
    decompose_grid(&udf.to_grid(), bank, levels, SourceFrame::of(udf))
}

/// Inversion without the final clamp.
pub fn invert_grid(pyr: &WaveletPyramid, bank: &FilterBank) -> Result<Grid3> {
    pyr.check(bank)?;
    let mut g = Graph::new(bank);
    let mut bands = vec![g.input(pyr.coarse.clone())];
    bands.extend(pyr.fine.iter().map(|f| g.input(f.clone())));
    let j = pyr.levels;
    let mut out = g.synthesize_all(&bands, pyr.chain[j - 1]);
    for l in (0..j - 1).rev() {
        out = g.synthesize_low(out, pyr.chain[l]);
    }
    Ok(g.take(out))
}

/// Inversion clamped to `[0, truncation]` of the source frame.
pub fn invert(pyr: &WaveletPyramid, bank: &FilterBank) -> Result<UdfVolume> {
    let g = invert_grid(pyr, bank)?;
    UdfVolume::from_grid(
        &g,
        pyr.frame.origin,
        pyr.frame.spacing,
        pyr.frame.truncation,
    )
}

/// Every level's details retained; lossless for perfect-reconstruction banks.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPyramid {
    pub coarse: Grid3,
    /// `details[l]` holds the 7 detail bands of level `l + 1`.
    pub details: Vec<Vec<Grid3>>,
    pub chain: Vec<[usize; 3]>,
}

pub fn decompose_full(u: &Grid3, bank: &FilterBank, levels: usize) -> Result<FullPyramid> {
    check_levels(u.dims(), levels)?;
    let chain = level_chain(u.dims(), bank.len(), levels);
    let mut g = Graph::new(bank);
    let mut node = g.input(u.clone());
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let bands = g.analyze_all(node);
        details.push(bands[1..].iter().map(|&b| g.take(b)).collect());
        node = bands[0];
    }
    Ok(FullPyramid {
        coarse: g.take(node),
        details,
        chain,
    })
}

pub fn invert_full(pyr: &FullPyramid, bank: &FilterBank) -> Result<Grid3> {
    let levels = pyr.details.len();
    if pyr.chain.len() != levels + 1 || pyr.coarse.dims() != pyr.chain[levels] {
        return Err(mismatch("full pyramid metadata is inconsistent"));
    }
    let mut g = Graph::new(bank);
    let mut node = g.input(pyr.coarse.clone());
    for l in (0..levels).rev() {
        if pyr.details[l].len() != FINE_CHANNELS
            || pyr.details[l].iter().any(|d| d.dims() != pyr.chain[l + 1])
        {
            return Err(mismatch(format!(
                "level {} details have the wrong shape",
                l + 1
            )));
        }
        let mut bands = vec![node];
        bands.extend(pyr.details[l].iter().map(|d| g.input(d.clone())));
        node = g.synthesize_all(&bands, pyr.chain[l]);
    }
    Ok(g.take(node))
}

/// Loss value and its gradient with respect to every tap.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    /// Per-band gradients in [`Band`] order.
    pub taps: [Vec<f64>; 4],
}

impl LossGradient {
    /// Flattened like [`FilterBank::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.taps.iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.taps
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_weights(dims: [usize; 3], weights: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if weights.len() != n {
        return Err(mismatch(format!(
            "{} weights for a volume of {n} voxels",
            weights.len()
        )));
    }
    Ok(())
}

/// `mean(w * (invert(decompose(u)) - u)^2)` with the unclamped reconstruction.
pub fn recon_loss_grid(
    u: &Grid3,
    weights: &[f64],
    bank: &FilterBank,
    levels: usize,
) -> Result<f64> {
    check_weights(u.dims(), weights)?;
    check_levels(u.dims(), levels)?;
    let chain = level_chain(u.dims(), bank.len(), levels);
    let mut g = Graph::new(bank);
    let input = g.input(u.clone());
    let (_, _, out) = record_roundtrip(&mut g, input, &chain);
    Ok(weighted_mse(g.node(out), u, weights))
}

fn weighted_mse(recon: &Grid3, u: &Grid3, weights: &[f64]) -> f64 {
    let s: f64 = recon
        .data()
        .iter()
        .zip(u.data())
        .zip(weights)
        .map(|((r, x), w)| w * (r - x) * (r - x))
        .sum();
    s / u.len() as f64
}

/// Exact reverse-mode gradient of [`recon_loss_grid`].
pub fn loss_gradient_grid(
    u: &Grid3,
    weights: &[f64],
    bank: &FilterBank,
    levels: usize,
) -> Result<LossGradient> {
    check_weights(u.dims(), weights)?;
    check_levels(u.dims(), levels)?;
    let chain = level_chain(u.dims(), bank.len(), levels);
    let mut g = Graph::new(bank);
    let input = g.input(u.clone());
    let (_, _, out) = record_roundtrip(&mut g, input, &chain);
    let recon = g.node(out);
    let loss = weighted_mse(recon, u, weights);
    let scale = 2.0 / u.len() as f64;
    let seed = Grid3::from_vec(
        u.dims(),
        recon
            .data()
            .iter()
            .zip(u.data())
            .zip(weights)
            .map(|((r, x), w)| scale * w * (r - x))
            .collect(),
    )?;
    let taps = g.backward(out, seed);
    Ok(LossGradient { loss, taps })
}

fn check_mask(udf: &UdfVolume, mask: &WeightMask) -> Result<()> {
    if udf.resolution() != mask.resolution() {
        return Err(mismatch(format!(
            "mask {:?} vs volume {:?}",
            mask.resolution(),
            udf.resolution()
        )));
    }
    Ok(())
}

/// Weighted reconstruction loss of one volume.
pub fn recon_loss(
    udf: &UdfVolume,
    bank: &FilterBank,
    mask: &WeightMask,
    levels: usize,
) -> Result<f64> {
    check_mask(udf, mask)?;
    recon_loss_grid(&udf.to_grid(), mask.weights(), bank, levels)
}

pub fn loss_gradient(
    udf: &UdfVolume,
    bank: &FilterBank,
    mask: &WeightMask,
    levels: usize,
) -> Result<LossGradient> {
    check_mask(udf, mask)?;
    loss_gradient_grid(&udf.to_grid(), mask.weights(), bank, levels)
}
