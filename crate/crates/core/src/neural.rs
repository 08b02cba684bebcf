//! Synthetic stimulus corpus and multi-participant neural recordings.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{tr_features, CONTEXT_TRS};
use crate::error::{Error, Result};
use crate::grammar::{story, Lexicon, Token};
use crate::io::{atomic_write, put_f64s, read, Reader};
use crate::linalg::Matrix;
use crate::model::DualHeadModel;
use crate::seeds::rng_for;

pub const N_RUNS: usize = 4;

/// Smallest TR count accepted by cohort generation.
pub const MIN_TRS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_trs: usize,
    pub tokens_per_tr: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_trs: 600,
            tokens_per_tr: 4,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trs < N_RUNS * 2 {
            return Err(Error::config(format!("corpus needs at least {} TRs", N_RUNS * 2)));
        }
        if self.tokens_per_tr == 0 {
            return Err(Error::config("tokens_per_tr must be positive"));
        }
        Ok(())
    }
}

/// Token stream cut into TRs, with TRs grouped into consecutive runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusCorpus {
    pub tokens: Vec<Token>,
    pub tr_boundaries: Vec<Range<usize>>,
    pub run_boundaries: Vec<Range<usize>>,
}

impl StimulusCorpus {
    /// Builds a corpus from explicit boundaries, checking coverage.
    pub fn new(tokens: Vec<Token>, tr_boundaries: Vec<Range<usize>>, run_boundaries: Vec<Range<usize>>) -> Result<Self> {
        let c = Self {
            tokens,
            tr_boundaries,
            run_boundaries,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (t, r) in self.tr_boundaries.iter().enumerate() {
            if r.start != next || r.end < r.start {
                return Err(Error::contract(format!("TR {t} range {r:?} is not contiguous")));
            }
            next = r.end;
        }
        if next != self.tokens.len() {
            return Err(Error::contract("TR ranges do not cover the token sequence"));
        }
        if self.run_boundaries.len() != N_RUNS {
            return Err(Error::contract(format!("expected {N_RUNS} runs, found {}", self.run_boundaries.len())));
        }
        let mut next = 0;
        for r in &self.run_boundaries {
            if r.start != next || r.is_empty() {
                return Err(Error::contract(format!("run range {r:?} is not a consecutive section")));
            }
            next = r.end;
        }
        if next != self.tr_boundaries.len() {
            return Err(Error::contract("runs do not partition the TRs"));
        }
        Ok(())
    }

    pub fn n_trs(&self) -> usize {
        self.tr_boundaries.len()
    }

    pub fn tr_tokens(&self, tr: usize) -> &[Token] {
        &self.tokens[self.tr_boundaries[tr].clone()]
    }

    /// Tokens of TRs `trs` concatenated.
    pub fn span_tokens(&self, trs: Range<usize>) -> &[Token] {
        let start = self.tr_boundaries[trs.start].start;
        let end = self.tr_boundaries[trs.end - 1].end;
        &self.tokens[start..end]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_slice(&read(path)?)?;
        c.validate()?;
        Ok(c)
    }
}

/// Splits `n` items into `parts` consecutive near-equal ranges.
pub fn consecutive_sections(n: usize, parts: usize) -> Vec<Range<usize>> {
    (0..parts).map(|i| i * n / parts..(i + 1) * n / parts).collect()
}

/// Generates the stimulus story and cuts it into fixed-size TRs and four runs.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<StimulusCorpus> {
    spec.validate()?;
    let lexicon = Lexicon::new();
    let n_tokens = spec.n_trs * spec.tokens_per_tr;
    let mut tokens = story(&mut rng_for(seed, "stimulus"), &lexicon, n_tokens);
    tokens.truncate(n_tokens);
    let trs = (0..spec.n_trs)
        .map(|t| t * spec.tokens_per_tr..(t + 1) * spec.tokens_per_tr)
        .collect();
    StimulusCorpus::new(tokens, trs, consecutive_sections(spec.n_trs, N_RUNS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_participants: usize,
    pub n_voxels: usize,
    pub roi_fraction: f64,
    pub shared_signal_dim: usize,
    /// Signal-to-noise amplitude ratio inside the ROI; `inf` means noiseless.
    pub snr_in_roi: f64,
    pub snr_out_roi: f64,
    /// Weight on TR `t - j` at index `j`.
    pub lag_kernel: Vec<f64>,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_participants: 8,
            n_voxels: 500,
            roi_fraction: 0.2,
            shared_signal_dim: 1,
            snr_in_roi: 10.0,
            snr_out_roi: 0.0,
            lag_kernel: vec![0.0, 0.25, 0.25, 0.25, 0.25],
            seed: 7,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("cohort spec: {m}")));
        if self.n_participants == 0 || self.n_voxels == 0 || self.shared_signal_dim == 0 {
            return fail("n_participants, n_voxels and shared_signal_dim must be positive".into());
        }
        if !(self.roi_fraction > 0.0 && self.roi_fraction <= 1.0) {
            return fail(format!("roi_fraction {} outside (0, 1]", self.roi_fraction));
        }
        if !(self.snr_out_roi >= 0.0 && self.snr_in_roi > self.snr_out_roi) || self.snr_out_roi.is_infinite() {
            return fail(format!(
                "need snr_in_roi > snr_out_roi >= 0, got {} and {}",
                self.snr_in_roi, self.snr_out_roi
            ));
        }
        if self.lag_kernel.is_empty() || self.lag_kernel.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return fail("lag_kernel weights must be finite and nonnegative".into());
        }
        let total: f64 = self.lag_kernel.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return fail(format!("lag_kernel sums to {total}, not 1"));
        }
        Ok(())
    }

    pub fn n_roi(&self) -> usize {
        ((self.roi_fraction * self.n_voxels as f64).round() as usize).clamp(1, self.n_voxels)
    }
}

/// One participant's TR x voxel responses.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralRecording {
    pub participant_id: String,
    pub responses: Matrix,
    pub roi_mask: Vec<bool>,
    pub noise_ceiling: Option<Vec<f64>>,
}

impl NeuralRecording {
    pub fn new(participant_id: String, responses: Matrix, roi_mask: Vec<bool>) -> Result<Self> {
        let r = Self {
            participant_id,
            responses,
            roi_mask,
            noise_ceiling: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi_mask.len() != self.responses.cols() {
            return Err(Error::contract("roi_mask length differs from voxel count"));
        }
        if !self.roi_mask.iter().any(|&b| b) {
            return Err(Error::contract("roi_mask selects no voxel"));
        }
        if let Some(nc) = &self.noise_ceiling {
            if nc.len() != self.responses.cols() {
                return Err(Error::contract("noise ceiling length differs from voxel count"));
            }
        }
        Ok(())
    }

    pub fn n_trs(&self) -> usize {
        self.responses.rows()
    }

    pub fn n_voxels(&self) -> usize {
        self.responses.cols()
    }

    /// Voxels in the ROI whose noise ceiling exceeds `threshold`. Without a
    /// ceiling estimate only the ROI mask applies.
    pub fn selected_voxels(&self, threshold: f64) -> Vec<usize> {
        (0..self.n_voxels())
            .filter(|&v| self.roi_mask[v] && self.noise_ceiling.as_ref().is_none_or(|nc| nc[v] > threshold))
            .collect()
    }
}

/// Draws one recording per participant.
///
/// The shared signal is a fixed random projection of per-TR base-model
/// features, convolved with the lag kernel. Each participant mixes it with
/// their own random matrix; every voxel's signal is scaled to unit variance,
/// multiplied by its SNR and added to unit Gaussian noise.
pub fn generate_cohort(corpus: &StimulusCorpus, base_model: &DualHeadModel, spec: &CohortSpec) -> Result<Vec<NeuralRecording>> {
    spec.validate()?;
    let d = base_model.config().d_model;
    if corpus.n_trs() < MIN_TRS {
        return Err(Error::config(format!("cohort needs at least {MIN_TRS} TRs, corpus has {}", corpus.n_trs())));
    }
    if spec.shared_signal_dim > d {
        return Err(Error::config(format!("shared_signal_dim {} exceeds d_model {d}", spec.shared_signal_dim)));
    }
    let features = tr_features(base_model, corpus, CONTEXT_TRS)?;
    let shared = shared_signal(&features, spec)?;
    let roi = roi_mask(spec);
    (0..spec.n_participants)
        .map(|p| participant_recording(&shared, &roi, spec, p))
        .collect()
}

/// Lagged, standardized projection of the features; `T x shared_signal_dim`.
fn shared_signal(features: &Matrix, spec: &CohortSpec) -> Result<Matrix> {
    let mut rng = rng_for(spec.seed, "projection");
    let k = spec.shared_signal_dim;
    let projection = gaussian(&mut rng, features.cols(), k);
    let mut raw = features.matmul(&projection)?;
    raw.standardize_columns();
    let mut lagged = Matrix::zeros(raw.rows(), k);
    for t in 0..raw.rows() {
        for (j, &w) in spec.lag_kernel.iter().enumerate() {
            if w == 0.0 || j > t {
                continue;
            }
            for c in 0..k {
                let v = lagged.get(t, c) + w * raw.get(t - j, c);
                lagged.set(t, c, v);
            }
        }
    }
    lagged.standardize_columns();
    Ok(lagged)
}

fn roi_mask(spec: &CohortSpec) -> Vec<bool> {
    let mut rng = rng_for(spec.seed, "roi");
    let mut mask = vec![false; spec.n_voxels];
    for v in rand::seq::index::sample(&mut rng, spec.n_voxels, spec.n_roi()) {
        mask[v] = true;
    }
    mask
}

fn participant_recording(shared: &Matrix, roi: &[bool], spec: &CohortSpec, p: usize) -> Result<NeuralRecording> {
    let mut rng = rng_for(spec.seed, &format!("participant-{p}"));
    let mixing = gaussian(&mut rng, shared.cols(), spec.n_voxels);
    let mut signal = shared.matmul(&mixing)?;
    signal.standardize_columns();
    let t = signal.rows();
    let mut responses = Matrix::zeros(t, spec.n_voxels);
    for v in 0..spec.n_voxels {
        let snr = if roi[v] { spec.snr_in_roi } else { spec.snr_out_roi };
        for i in 0..t {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let value = if snr.is_infinite() { signal.get(i, v) } else { snr * signal.get(i, v) + noise };
            responses.set(i, v, value);
        }
    }
    NeuralRecording::new(format!("p{:02}", p + 1), responses, roi.to_vec())
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

const RECORDING_FORMAT: &str = "neuroalign-recording";
const RECORDING_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RecordingHeader {
    format: String,
    version: u32,
    participant_id: String,
    n_trs: usize,
    n_voxels: usize,
    roi_mask: Vec<bool>,
    has_noise_ceiling: bool,
}

/// Layout: one JSON header line, then `n_trs * n_voxels` row-major
/// little-endian f64 responses, then `n_voxels` f64 noise ceilings when the
/// header says so.
pub fn save_recording(rec: &NeuralRecording, path: &Path) -> Result<()> {
    rec.validate()?;
    let header = RecordingHeader {
        format: RECORDING_FORMAT.into(),
        version: RECORDING_VERSION,
        participant_id: rec.participant_id.clone(),
        n_trs: rec.n_trs(),
        n_voxels: rec.n_voxels(),
        roi_mask: rec.roi_mask.clone(),
        has_noise_ceiling: rec.noise_ceiling.is_some(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    put_f64s(&mut out, rec.responses.data());
    if let Some(nc) = &rec.noise_ceiling {
        put_f64s(&mut out, nc);
    }
    atomic_write(path, &out)
}

pub fn load_recording(path: &Path) -> Result<NeuralRecording> {
    parse_recording(&read(path)?)
}

pub fn parse_recording(bytes: &[u8]) -> Result<NeuralRecording> {
    let mut r = Reader::new(bytes);
    let line = r.line("header")?;
    let header: RecordingHeader =
        serde_json::from_slice(line).map_err(|e| Error::format("header", 0, e.to_string()))?;
    if header.format != RECORDING_FORMAT || header.version != RECORDING_VERSION {
        return Err(Error::format(
            "header",
            0,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if header.n_voxels == 0 || header.n_trs == 0 {
        return Err(Error::format("header", 0, "n_trs and n_voxels must be positive"));
    }
    if header.roi_mask.len() != header.n_voxels {
        return Err(Error::format(
            "header",
            0,
            format!("roi_mask has {} entries for {} voxels", header.roi_mask.len(), header.n_voxels),
        ));
    }
    if !header.roi_mask.iter().any(|&b| b) {
        return Err(Error::format("header", 0, "roi_mask selects no voxel"));
    }
    let n = header
        .n_trs
        .checked_mul(header.n_voxels)
        .ok_or_else(|| Error::format("header", 0, "matrix size overflows"))?;
    let data = r.f64s(n, "responses")?;
    let noise_ceiling = if header.has_noise_ceiling {
        Some(r.f64s(header.n_voxels, "noise_ceiling")?)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(Error::format("trailer", r.offset(), format!("{} unexpected trailing bytes", r.remaining())));
    }
    Ok(NeuralRecording {
        participant_id: header.participant_id,
        responses: Matrix::new(header.n_trs, header.n_voxels, data)?,
        roi_mask: header.roi_mask,
        noise_ceiling,
    })
}
