//! Synthetic two-view utterances.
//!
//! Each token `t` is split into two shares: the Whisper-like view carries a
//! random `r` drawn from `0..share_span`, the mHuBERT-like view carries
//! `(t - r) mod K`. The Whisper-like view alone is independent of the
//! transcript, the mHuBERT-like view alone narrows each token down to
//! `share_span` candidates, and both together determine it.
//!
//! Every token occupies a fixed number of frames in both views, the
//! Whisper-like view ends with a few silence frames, and the mHuBERT-like
//! view is longer (5:4) with extra silence at the end, so truncating both
//! to the shorter length loses nothing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{unit_for, Unit};
use crate::tensor::Tensor;

/// Pronounceable names for token symbols, used to render transcripts.
pub fn symbol_name(k: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let c = CONSONANTS[(k / VOWELS.len()) % CONSONANTS.len()] as char;
    let v = VOWELS[k % VOWELS.len()] as char;
    format!("{c}{v}")
}

/// Largest symbol inventory with distinct names.
pub const MAX_SYMBOLS: usize = 61;

/// Transcript text for a token list. Word-scored languages separate
/// symbols with spaces; character-scored ones run them together.
pub fn render_tokens(tokens: &[usize], lang: &str) -> Result<String> {
    let sep = match unit_for(lang)? {
        Unit::Word => " ",
        Unit::Char => "",
    };
    Ok(tokens.iter().map(|&t| symbol_name(t)).collect::<Vec<_>>().join(sep))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Token inventory size `K`.
    pub symbols: usize,
    /// Raw feature dimension of each view.
    pub d_raw: usize,
    pub noise: f64,
    pub frames_per_token: usize,
    pub trailing_silence: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Notional duration of one Whisper-view frame.
    pub frame_seconds: f64,
    /// Fixes the prototypes, shared by every split of one task.
    pub task_seed: u64,
    /// The Whisper-view share is drawn from `0..share_span`. At `symbols`
    /// neither view alone says anything about a token; smaller spans let
    /// the mHuBERT view narrow each token down to `share_span` candidates.
    pub share_span: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            symbols: 8,
            d_raw: 16,
            noise: 0.5,
            frames_per_token: 2,
            trailing_silence: 3,
            min_tokens: 3,
            max_tokens: 12,
            frame_seconds: 1.0,
            task_seed: 1234,
            share_span: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.symbols < 2 || self.symbols > MAX_SYMBOLS {
            return Err(Error::Config(format!("symbols must be in 2..={MAX_SYMBOLS}")));
        }
        if self.d_raw == 0 || self.frames_per_token == 0 {
            return Err(Error::Config("d_raw and frames_per_token must be positive".into()));
        }
        if self.share_span == 0 || self.share_span > self.symbols {
            return Err(Error::Config("share_span must be in 1..=symbols".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("need 1 <= min_tokens <= max_tokens".into()));
        }
        if !(self.noise >= 0.0 && self.frame_seconds > 0.0) {
            return Err(Error::Config("noise must be >= 0 and frame_seconds > 0".into()));
        }
        Ok(())
    }

    pub fn whisper_frames(&self, n_tokens: usize) -> usize {
        n_tokens * self.frames_per_token + self.trailing_silence
    }

    pub fn mhubert_frames(&self, n_tokens: usize) -> usize {
        (self.whisper_frames(n_tokens) * 5 + 2) / 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub lang: String,
    /// Symbol indices in `0..K`.
    pub tokens: Vec<usize>,
    pub view_w: Tensor,
    pub view_m: Tensor,
    pub duration_s: f64,
}

impl SyntheticUtterance {
    pub fn text(&self) -> Result<String> {
        render_tokens(&self.tokens, &self.lang)
    }
}

/// Per-view symbol prototypes for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub w: Tensor,
    pub m: Tensor,
}

impl Prototypes {
    pub fn new(cfg: &DataConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.task_seed);
        Prototypes {
            w: Tensor::normal(&[cfg.symbols, cfg.d_raw], 1.0, &mut rng),
            m: Tensor::normal(&[cfg.symbols, cfg.d_raw], 1.0, &mut rng),
        }
    }
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Deterministic in `(cfg, seed)`. Languages are drawn uniformly from `langs`.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, n_utts: usize, langs: &[String]) -> Result<Vec<SyntheticUtterance>> {
    cfg.validate()?;
    if n_utts == 0 {
        return Err(Error::Empty("dataset"));
    }
    if langs.is_empty() {
        return Err(Error::Empty("language list"));
    }
    for l in langs {
        unit_for(l)?;
    }
    let protos = Prototypes::new(cfg);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.symbols;
    let mut out = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let lang = langs[rng.gen_range(0..langs.len())].clone();
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let (t_w, t_m) = (cfg.whisper_frames(n), cfg.mhubert_frames(n));
        let mut view_w = Tensor::zeros(&[t_w, cfg.d_raw]);
        let mut view_m = Tensor::zeros(&[t_m, cfg.d_raw]);
        for (j, &t) in tokens.iter().enumerate() {
            let r = rng.gen_range(0..cfg.share_span);
            let s = (t + k - r) % k;
            for f in 0..cfg.frames_per_token {
                let frame = j * cfg.frames_per_token + f;
                view_w.row_mut(frame).copy_from_slice(protos.w.row(r));
                view_m.row_mut(frame).copy_from_slice(protos.m.row(s));
            }
        }
        for v in view_w.data_mut().iter_mut().chain(view_m.data_mut()) {
            *v += noise.sample(&mut rng);
        }
        round_f32(&mut view_w);
        round_f32(&mut view_m);
        out.push(SyntheticUtterance {
            id: format!("utt{seed}-{i:05}"),
            lang,
            tokens,
            view_w,
            view_m,
            duration_s: t_w as f64 * cfg.frame_seconds,
        });
    }
    Ok(out)
}

/// Which views a nearest-prototype decoder may look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewSet {
    WhisperOnly,
    MhubertOnly,
    Both,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive nearest-prototype decoding. Each candidate token is scored
/// by its best-matching share pair over the visible views; ties go to the
/// lowest token index.
pub fn oracle_decode(cfg: &DataConfig, protos: &Prototypes, utt: &SyntheticUtterance, views: ViewSet) -> Vec<usize> {
    let k = cfg.symbols;
    let fpt = cfg.frames_per_token;
    let n = (utt.view_w.rows() - cfg.trailing_silence) / fpt;
    let cost = |view: &Tensor, proto: &Tensor, j: usize, sym: usize| -> f64 {
        (0..fpt).map(|f| sq_dist(view.row(j * fpt + f), proto.row(sym))).sum()
    };
    (0..n)
        .map(|j| {
            let mut best = (f64::INFINITY, 0);
            for t in 0..k {
                let score = (0..cfg.share_span)
                    .map(|r| {
                        let s = (t + k - r) % k;
                        let cw = if views == ViewSet::MhubertOnly { 0.0 } else { cost(&utt.view_w, &protos.w, j, r) };
                        let cm = if views == ViewSet::WhisperOnly { 0.0 } else { cost(&utt.view_m, &protos.m, j, s) };
                        cw + cm
                    })
                    .fold(f64::INFINITY, f64::min);
                if score < best.0 {
                    best = (score, t);
                }
            }
            best.1
        })
        .collect()
}

/// Fraction of tokens the oracle recovers (position by position).
pub fn oracle_accuracy(cfg: &DataConfig, data: &[SyntheticUtterance], views: ViewSet) -> f64 {
    let protos = Prototypes::new(cfg);
    let (mut hits, mut total) = (0usize, 0usize);
    for u in data {
        let dec = oracle_decode(cfg, &protos, u, views);
        hits += dec.iter().zip(&u.tokens).filter(|(a, b)| a == b).count();
        total += u.tokens.len();
    }
    hits as f64 / total.max(1) as f64
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    shape: [usize; 2],
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    lang: String,
    tokens: Vec<usize>,
    duration_s: f64,
    view_w: MatrixRecord,
    view_m: MatrixRecord,
}

fn encode_matrix(t: &Tensor) -> MatrixRecord {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    MatrixRecord {
        shape: [t.rows(), t.cols()],
        data: B64.encode(bytes),
    }
}

fn decode_matrix(m: &MatrixRecord) -> Result<Tensor> {
    let bytes = B64
        .decode(&m.data)
        .map_err(|e| Error::format("dataset", format!("bad base64: {e}")))?;
    let [rows, cols] = m.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::format(
            "dataset",
            format!("shape {rows}x{cols} needs {} bytes, got {}", rows * cols * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// One JSON record per line.
pub fn write_dataset(path: &Path, data: &[SyntheticUtterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in data {
        let rec = UtteranceRecord {
            id: u.id.clone(),
            lang: u.lang.clone(),
            tokens: u.tokens.clone(),
            duration_s: u.duration_s,
            view_w: encode_matrix(&u.view_w),
            view_m: encode_matrix(&u.view_m),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticUtterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", i + 1)))?;
        unit_for(&rec.lang)?;
        out.push(SyntheticUtterance {
            id: rec.id,
            lang: rec.lang,
            tokens: rec.tokens,
            duration_s: rec.duration_s,
            view_w: decode_matrix(&rec.view_w)?,
            view_m: decode_matrix(&rec.view_m)?,
        });
    }
    Ok(out)
}

/// Splits off the last `ceil(fraction · n)` utterances (at least one,
/// never all) after a seeded shuffle.
pub fn split_validation(
    mut data: Vec<SyntheticUtterance>,
    fraction: f64,
    seed: u64,
) -> (Vec<SyntheticUtterance>, Vec<SyntheticUtterance>) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.shuffle(&mut rng);
    let n = data.len();
    let n_valid = ((fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let valid = data.split_off(n - n_valid.min(n));
    (data, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs() -> Vec<String> {
        ["en", "ja", "th", "ru"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = DataConfig::default();
        let a = generate_dataset(&cfg, 7, 20, &langs()).unwrap();
        let b = generate_dataset(&cfg, 7, 20, &langs()).unwrap();
        let c = generate_dataset(&cfg, 8, 20, &langs()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_durations() {
        let cfg = DataConfig::default();
        for u in generate_dataset(&cfg, 1, 50, &langs()).unwrap() {
            let n = u.tokens.len();
            assert!((3..=12).contains(&n));
            assert_eq!(u.view_w.shape(), &[2 * n + 3, 16]);
            assert_eq!(u.view_m.rows(), ((2 * n + 3) as f64 * 1.25).round() as usize);
            assert_eq!(u.duration_s, (2 * n + 3) as f64);
            assert!(u.tokens.iter().all(|&t| t < 8));
        }
    }

    #[test]
    fn errors() {
        let cfg = DataConfig::default();
        assert!(matches!(generate_dataset(&cfg, 0, 0, &langs()), Err(Error::Empty(_))));
        assert!(matches!(generate_dataset(&cfg, 0, 3, &[]), Err(Error::Empty(_))));
        assert!(matches!(
            generate_dataset(&cfg, 0, 3, &["xx".to_string()]),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn views_are_complementary() {
        let cfg = DataConfig::default();
        let data = generate_dataset(&cfg, 3, 200, &langs()).unwrap();
        let chance = 1.0 / cfg.symbols as f64;
        let w = oracle_accuracy(&cfg, &data, ViewSet::WhisperOnly);
        let m = oracle_accuracy(&cfg, &data, ViewSet::MhubertOnly);
        let both = oracle_accuracy(&cfg, &data, ViewSet::Both);
        assert!(w <= 2.0 * chance, "{w}");
        assert!(m <= 1.0 / cfg.share_span as f64 + 0.03, "{m}");
        assert!(both >= 0.99, "{both}");
        assert!(both - w >= 0.30);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let cfg = DataConfig::default();
        let data = generate_dataset(&cfg, 4, 10, &langs()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
    }

    #[test]
    fn rendering_by_language() {
        assert_eq!(symbol_name(0), "ba");
        assert_eq!(symbol_name(7), "di");
        assert_eq!(render_tokens(&[0, 7], "en").unwrap(), "ba di");
        assert_eq!(render_tokens(&[0, 7], "ko").unwrap(), "badi");
        let names: std::collections::BTreeSet<_> = (0..MAX_SYMBOLS).map(symbol_name).collect();
        assert_eq!(names.len(), MAX_SYMBOLS);
    }

    #[test]
    fn validation_split_sizes() {
        let cfg = DataConfig::default();
        let data = generate_dataset(&cfg, 5, 100, &langs()).unwrap();
        let (train, valid) = split_validation(data, 0.05, 1);
        assert_eq!((train.len(), valid.len()), (95, 5));
    }
}
