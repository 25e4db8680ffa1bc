//! Dataset construction: subtitle/audio alignment arithmetic, text
//! normalization, leakage-free source-level splits, manifest IO, and a
//! synthetic aligned audio-visual task.
//!
//! The synthetic task stands in for a subtitle corpus: each record carries a
//! target token sequence, audio features that encode a possibly corrupted
//! copy of the targets (fixed random embeddings repeated along time plus
//! noise), and visual features that encode the subtitle text itself.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{gaussian, rng_for, seed_for};

/// Reserved special token ids, shared by every model in a run.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
/// First id available to task alphabets.
pub const FIRST_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Zh,
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lang::En => write!(f, "en"),
            Lang::Zh => write!(f, "zh"),
        }
    }
}

/// One subtitle line with its time interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtitleCue {
    pub source_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub text: String,
    pub lang: Lang,
}

impl SubtitleCue {
    pub fn new(source_id: &str, t_s: f64, t_e: f64, text: &str, lang: Lang) -> Result<SubtitleCue> {
        if !(t_s.is_finite() && t_e.is_finite()) || t_s < 0.0 || t_e < t_s {
            return Err(Error::Validation(format!("bad cue interval [{t_s}, {t_e}]")));
        }
        Ok(SubtitleCue { source_id: source_id.into(), t_s, t_e, text: text.into(), lang })
    }
}

/// Frame index of the interval midpoint: `floor(((t_s + t_e) / 2) * fps)`.
pub fn middle_frame_index(cue: &SubtitleCue, fps: f64) -> Result<u64> {
    if !(fps > 0.0) {
        return Err(Error::Validation(format!("fps must be positive, got {fps}")));
    }
    if cue.t_e < cue.t_s {
        return Err(Error::Validation(format!("t_e {} < t_s {}", cue.t_e, cue.t_s)));
    }
    Ok((((cue.t_s + cue.t_e) / 2.0) * fps).floor() as u64)
}

/// Sample bounds covering the cue (end exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioClip {
    pub start: u64,
    pub end: u64,
}

impl AudioClip {
    /// Zero-length clips arise from degenerate cues with `t_s == t_e`
    /// landing on an exact sample boundary; callers should warn on them.
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Clip `(floor(t_s * sr), ceil(t_e * sr))`, guaranteed to cover `[t_s, t_e]`.
pub fn audio_clip_bounds(cue: &SubtitleCue, sample_rate: u32) -> Result<AudioClip> {
    if sample_rate == 0 {
        return Err(Error::Validation("sample rate must be positive".into()));
    }
    if cue.t_s < 0.0 || cue.t_e < cue.t_s {
        return Err(Error::Validation(format!(
            "bad cue times [{}, {}]",
            cue.t_s, cue.t_e
        )));
    }
    let sr = f64::from(sample_rate);
    Ok(AudioClip { start: (cue.t_s * sr).floor() as u64, end: (cue.t_e * sr).ceil() as u64 })
}

/// Fold full-width ASCII-range characters (U+FF01..=U+FF5E) to half-width;
/// the ideographic space folds to an ASCII space.
fn fold_width(c: char) -> char {
    match c {
        '\u{3000}' => ' ',
        '\u{FF01}'..='\u{FF5E}' => {
            char::from_u32(c as u32 - 0xFEE0).unwrap_or(c)
        }
        _ => c,
    }
}

/// Normalize text for scoring: lowercase, fold widths, strip punctuation and
/// symbols, collapse whitespace (removed entirely for Chinese).
///
/// Idempotent; output contains only lowercase letters, digits, CJK
/// characters, and (for English) single spaces.
pub fn normalize_text(s: &str, lang: Lang) -> String {
    let mut kept = String::with_capacity(s.len());
    for c in s.chars() {
        let c = fold_width(c);
        if c.is_whitespace() {
            kept.push(' ');
        } else if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                // A few codepoints (mathematical capitals) have no lowercase
                // mapping; drop them rather than leak uppercase through.
                if !lc.is_uppercase() {
                    kept.push(lc);
                }
            }
        }
        // Everything else (punctuation in either script, symbols) is dropped.
    }
    match lang {
        Lang::Zh => kept.split_whitespace().collect::<Vec<_>>().concat(),
        Lang::En => kept.split_whitespace().collect::<Vec<_>>().join(" "),
    }
}

/// One aligned training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source_id: String,
    /// Ground-truth token ids (alphabet range, no specials).
    pub targets: Vec<usize>,
    /// Audio features, `[T, d_a]`, possibly corrupted.
    pub audio: Tensor,
    /// Visual features, `[Lv, d_v]`.
    pub visual: Tensor,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Synthetic task parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskConfig {
    /// Distinct target symbols; ids run from `FIRST_TOKEN`.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability each audio token is substituted by a different symbol.
    pub audio_corruption: f64,
    /// Gaussian noise added per audio frame element.
    pub audio_noise: f64,
    /// Probability each visual token is substituted.
    pub visual_corruption: f64,
    /// Time frames emitted per audio token.
    pub repeats: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub records: usize,
    pub sources: usize,
}

impl Default for SynthTaskConfig {
    fn default() -> SynthTaskConfig {
        SynthTaskConfig {
            alphabet: 24,
            min_len: 4,
            max_len: 10,
            audio_corruption: 0.3,
            audio_noise: 0.1,
            visual_corruption: 0.0,
            repeats: 3,
            audio_dim: 32,
            visual_dim: 48,
            records: 600,
            sources: 24,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet < 2 {
            return Err(Error::Config("alphabet needs at least 2 symbols".into()));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        for (name, p) in [
            ("audio_corruption", self.audio_corruption),
            ("visual_corruption", self.visual_corruption),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.audio_noise < 0.0 {
            return Err(Error::Config("audio_noise must be >= 0".into()));
        }
        if self.repeats < 1 || self.audio_dim < 1 || self.visual_dim < 1 {
            return Err(Error::Config("repeats and feature widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Token id of the i-th alphabet symbol.
    pub fn token(&self, i: usize) -> usize {
        FIRST_TOKEN + i
    }

    /// Vocabulary size needed by models on this task.
    pub fn vocab(&self) -> usize {
        FIRST_TOKEN + self.alphabet
    }
}

/// Fixed random embedding table derived from a seed; the "waveform" of the
/// synthetic world, independent of any model parameters.
pub fn frozen_embedding(seed: u64, purpose: &str, symbols: usize, dim: usize) -> Tensor {
    let mut rng = rng_for(seed, purpose);
    let data = (0..symbols * dim).map(|_| gaussian(&mut rng)).collect();
    Tensor::new(vec![symbols, dim], data).expect("finite embedding")
}

/// Substitute `token` (alphabet index) with a uniformly random *different*
/// symbol.
fn substitute(rng: &mut impl Rng, symbol: usize, alphabet: usize) -> usize {
    (symbol + 1 + rng.gen_range(0..alphabet - 1)) % alphabet
}

/// Generate one sample. Pure function of `(cfg, base_seed, index)`:
/// per-record seeds are derived by hashing, so generation order and worker
/// layout cannot change the data.
pub fn generate_synthetic(cfg: &SynthTaskConfig, base_seed: u64, index: usize) -> Result<SampleRecord> {
    cfg.validate()?;
    let record_seed = seed_for(base_seed, &format!("record-{index}"));
    let mut rng = rng_for(record_seed, "sample");
    let audio_embed = frozen_embedding(base_seed, "audio-embed", cfg.alphabet, cfg.audio_dim);
    let visual_embed = frozen_embedding(base_seed, "visual-embed", cfg.alphabet, cfg.visual_dim);

    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.alphabet)).collect();

    // Audio: possibly substituted symbol embeddings, repeated along time,
    // with independent per-element noise.
    let t = len * cfg.repeats;
    let mut audio = vec![0.0; t * cfg.audio_dim];
    for (i, &sym) in symbols.iter().enumerate() {
        let heard = if rng.gen::<f64>() < cfg.audio_corruption {
            substitute(&mut rng, sym, cfg.alphabet)
        } else {
            sym
        };
        let row = &audio_embed.data()[heard * cfg.audio_dim..(heard + 1) * cfg.audio_dim];
        for r in 0..cfg.repeats {
            let frame = i * cfg.repeats + r;
            for (j, &v) in row.iter().enumerate() {
                audio[frame * cfg.audio_dim + j] = v + cfg.audio_noise * gaussian(&mut rng);
            }
        }
    }

    // Visual: the subtitle text itself, optionally corrupted, one token per
    // symbol, no noise.
    let mut visual = vec![0.0; len * cfg.visual_dim];
    for (i, &sym) in symbols.iter().enumerate() {
        let seen = if rng.gen::<f64>() < cfg.visual_corruption {
            substitute(&mut rng, sym, cfg.alphabet)
        } else {
            sym
        };
        visual[i * cfg.visual_dim..(i + 1) * cfg.visual_dim]
            .copy_from_slice(&visual_embed.data()[seen * cfg.visual_dim..(seen + 1) * cfg.visual_dim]);
    }

    let source = index % cfg.sources.max(1);
    Ok(SampleRecord {
        id: format!("synth-{index:05}"),
        source_id: format!("src-{source:03}"),
        targets: symbols.iter().map(|&s| cfg.token(s)).collect(),
        audio: Tensor::new(vec![t, cfg.audio_dim], audio)?,
        visual: Tensor::new(vec![len, cfg.visual_dim], visual)?,
        split: Split::Train,
        seed: record_seed,
    })
}

/// Generate the whole corpus (splits unassigned).
pub fn generate_corpus(cfg: &SynthTaskConfig, base_seed: u64) -> Result<Vec<SampleRecord>> {
    (0..cfg.records).map(|i| generate_synthetic(cfg, base_seed, i)).collect()
}

/// Assign splits so that every record of one source lands in one split.
///
/// Sources are shuffled deterministically by seed, then each is assigned
/// greedily to the split with the largest remaining record-count deficit
/// (ties resolved in `train, dev, test` order).
pub fn split_by_source(
    records: &mut [SampleRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let mut by_source: BTreeMap<String, usize> = BTreeMap::new();
    for r in records.iter() {
        *by_source.entry(r.source_id.clone()).or_insert(0) += 1;
    }
    if by_source.len() < Split::ALL.len() {
        return Err(Error::Config(format!(
            "{} sources cannot fill {} splits",
            by_source.len(),
            Split::ALL.len()
        )));
    }
    let mut sources: Vec<(String, usize)> = by_source.into_iter().collect();
    sources.shuffle(&mut rng_for(seed, "split-by-source"));

    let total: usize = records.len();
    let targets = [
        ratios.0 * total as f64,
        ratios.1 * total as f64,
        ratios.2 * total as f64,
    ];
    let mut assigned = [0.0f64; 3];
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (source, count) in sources {
        let deficit = |i: usize| targets[i] - assigned[i];
        let mut best = 0;
        for i in 1..3 {
            if deficit(i) > deficit(best) {
                best = i;
            }
        }
        assigned[best] += count as f64;
        assignment.insert(source, Split::ALL[best]);
    }
    for r in records.iter_mut() {
        r.split = assignment[&r.source_id];
    }
    Ok(())
}

/// Write one JSON record per line. `read_manifest(write_manifest(x)) == x`.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Parse a cue file: one cue per line, `source_id TAB t_s TAB t_e TAB text`.
pub fn read_cue_file(path: &Path, lang: Lang) -> Result<Vec<SubtitleCue>> {
    let file = BufReader::new(File::open(path)?);
    let mut cues = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        cues.push(parse_cue_line(&line, lang).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(cues)
}

fn parse_cue_line(line: &str, lang: Lang) -> std::result::Result<SubtitleCue, String> {
    let fields: Vec<&str> = line.splitn(4, '\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, got {}", fields.len()));
    }
    let t_s: f64 = fields[1].parse().map_err(|e| format!("t_s: {e}"))?;
    let t_e: f64 = fields[2].parse().map_err(|e| format!("t_e: {e}"))?;
    SubtitleCue::new(fields[0], t_s, t_e, fields[3], lang).map_err(|e| e.to_string())
}

/// Map token ids to a printable string (one char per id) so error-rate
/// scoring can treat synthetic outputs as character sequences.
pub fn tokens_to_text(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| {
            char::from_u32(('a' as usize + t.saturating_sub(FIRST_TOKEN)) as u32).unwrap_or('?')
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cue(t_s: f64, t_e: f64) -> SubtitleCue {
        SubtitleCue::new("s", t_s, t_e, "text", Lang::En).unwrap()
    }

    #[test]
    fn middle_frame_examples() {
        assert_eq!(middle_frame_index(&cue(2.0, 4.0), 25.0).unwrap(), 75);
        assert_eq!(middle_frame_index(&cue(0.0, 1.0), 30.0).unwrap(), 15);
        // Degenerate interval: floor(t * fps).
        assert_eq!(middle_frame_index(&cue(1.3, 1.3), 10.0).unwrap(), 13);
        assert!(middle_frame_index(&cue(0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn middle_frame_within_interval_bounds() {
        let mut rng = rng_for(71, "mid");
        for _ in 0..500 {
            let t_s = rng.gen_range(0.0..100.0);
            let t_e = t_s + rng.gen_range(0.0..10.0);
            let fps = rng.gen_range(1.0..60.0);
            let c = cue(t_s, t_e);
            let idx = middle_frame_index(&c, fps).unwrap();
            assert!(idx >= (t_s * fps).floor() as u64);
            assert!(idx <= (t_e * fps).floor() as u64);
        }
    }

    #[test]
    fn audio_clip_examples() {
        assert_eq!(
            audio_clip_bounds(&cue(0.0, 1.0), 16_000).unwrap(),
            AudioClip { start: 0, end: 16_000 }
        );
        assert_eq!(
            audio_clip_bounds(&cue(0.25, 0.5), 8_000).unwrap(),
            AudioClip { start: 2_000, end: 4_000 }
        );
        let degenerate = audio_clip_bounds(&cue(2.0, 2.0), 1_000).unwrap();
        assert!(degenerate.is_empty());
        assert!(SubtitleCue::new("s", -1.0, 2.0, "x", Lang::En).is_err());
    }

    #[test]
    fn audio_clip_covers_interval() {
        let mut rng = rng_for(72, "clip");
        for _ in 0..500 {
            let t_s = rng.gen_range(0.0..50.0);
            let t_e = t_s + rng.gen_range(0.0..5.0);
            let sr = rng.gen_range(1_000u32..48_000);
            let clip = audio_clip_bounds(&cue(t_s, t_e), sr).unwrap();
            assert!(clip.start as f64 <= t_s * f64::from(sr));
            assert!(clip.end as f64 >= t_e * f64::from(sr));
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Hello,  WORLD!", Lang::En), "hello world");
        assert_eq!(normalize_text("你好。１２３", Lang::Zh), "你好123");
        assert_eq!(normalize_text("ＡＢＣ　ｄｅｆ？", Lang::Zh), "abcdef");
        assert_eq!(normalize_text("it's 5 o'clock; really?", Lang::En), "its 5 oclock really");
    }

    mod normalize_props {
        use super::super::{normalize_text, Lang};
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_idempotent(s in "\\PC{0,40}", zh in proptest::bool::ANY) {
                let lang = if zh { Lang::Zh } else { Lang::En };
                let once = normalize_text(&s, lang);
                prop_assert_eq!(normalize_text(&once, lang), once);
            }

            #[test]
            fn normalize_output_alphabet(s in "\\PC{0,40}") {
                for c in normalize_text(&s, Lang::En).chars() {
                    prop_assert!(c == ' ' || c.is_alphanumeric());
                    if c.is_alphabetic() {
                        prop_assert!(!c.is_uppercase());
                    }
                }
                prop_assert!(!normalize_text(&s, Lang::Zh).contains(' '));
            }
        }
    }

    fn mini_corpus(n_sources: usize, per_source: usize) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        for s in 0..n_sources {
            for i in 0..per_source {
                out.push(SampleRecord {
                    id: format!("r{s}-{i}"),
                    source_id: format!("src{s}"),
                    targets: vec![FIRST_TOKEN],
                    audio: Tensor::zeros(vec![2, 2]),
                    visual: Tensor::zeros(vec![1, 2]),
                    split: Split::Train,
                    seed: 0,
                });
            }
        }
        out
    }

    #[test]
    fn split_is_leakage_free_and_deterministic() {
        let mut a = mini_corpus(10, 3);
        let mut b = mini_corpus(10, 3);
        split_by_source(&mut a, (0.8, 0.1, 0.1), 99).unwrap();
        split_by_source(&mut b, (0.8, 0.1, 0.1), 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.split, y.split);
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &a {
            if let Some(prev) = seen.insert(&r.source_id, r.split) {
                assert_eq!(prev, r.split, "source split across sets");
            }
        }
    }

    #[test]
    fn split_ten_equal_sources_gives_8_1_1() {
        let mut corpus = mini_corpus(10, 5);
        split_by_source(&mut corpus, (0.8, 0.1, 0.1), 7).unwrap();
        let mut sources_per_split: BTreeMap<Split, HashSet<&str>> = BTreeMap::new();
        for r in &corpus {
            sources_per_split.entry(r.split).or_default().insert(&r.source_id);
        }
        assert_eq!(sources_per_split[&Split::Train].len(), 8);
        assert_eq!(sources_per_split[&Split::Dev].len(), 1);
        assert_eq!(sources_per_split[&Split::Test].len(), 1);
    }

    #[test]
    fn split_rejects_too_few_sources() {
        let mut corpus = mini_corpus(2, 4);
        assert!(matches!(
            split_by_source(&mut corpus, (0.8, 0.1, 0.1), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_clean_audio_encodes_targets_exactly() {
        let cfg = SynthTaskConfig {
            audio_corruption: 0.0,
            audio_noise: 0.0,
            ..SynthTaskConfig::default()
        };
        let rec = generate_synthetic(&cfg, 5, 0).unwrap();
        let embed = frozen_embedding(5, "audio-embed", cfg.alphabet, cfg.audio_dim);
        for (i, &tok) in rec.targets.iter().enumerate() {
            let sym = tok - FIRST_TOKEN;
            let row = &embed.data()[sym * cfg.audio_dim..(sym + 1) * cfg.audio_dim];
            for r in 0..cfg.repeats {
                let frame = i * cfg.repeats + r;
                let got = &rec.audio.data()[frame * cfg.audio_dim..(frame + 1) * cfg.audio_dim];
                assert_eq!(got, row);
            }
        }
    }

    #[test]
    fn synthetic_full_corruption_never_matches_target() {
        let cfg = SynthTaskConfig {
            audio_corruption: 1.0,
            audio_noise: 0.0,
            ..SynthTaskConfig::default()
        };
        let embed = frozen_embedding(6, "audio-embed", cfg.alphabet, cfg.audio_dim);
        for i in 0..20 {
            let rec = generate_synthetic(&cfg, 6, i).unwrap();
            for (k, &tok) in rec.targets.iter().enumerate() {
                let sym = tok - FIRST_TOKEN;
                let row = &embed.data()[sym * cfg.audio_dim..(sym + 1) * cfg.audio_dim];
                let frame = k * cfg.repeats;
                let got = &rec.audio.data()[frame * cfg.audio_dim..(frame + 1) * cfg.audio_dim];
                assert_ne!(got, row, "substitution must exclude the original symbol");
            }
        }
    }

    #[test]
    fn synthetic_corruption_rate_matches_probability() {
        let cfg = SynthTaskConfig {
            audio_corruption: 0.3,
            audio_noise: 0.0,
            min_len: 10,
            max_len: 10,
            records: 1_000,
            ..SynthTaskConfig::default()
        };
        let embed = frozen_embedding(7, "audio-embed", cfg.alphabet, cfg.audio_dim);
        let mut corrupted = 0usize;
        let mut total = 0usize;
        for i in 0..1_000 {
            let rec = generate_synthetic(&cfg, 7, i).unwrap();
            for (k, &tok) in rec.targets.iter().enumerate() {
                let sym = tok - FIRST_TOKEN;
                let row = &embed.data()[sym * cfg.audio_dim..(sym + 1) * cfg.audio_dim];
                let frame = k * cfg.repeats;
                let got = &rec.audio.data()[frame * cfg.audio_dim..(frame + 1) * cfg.audio_dim];
                if got != row {
                    corrupted += 1;
                }
                total += 1;
            }
        }
        let rate = corrupted as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.01, "empirical corruption rate {rate}");
    }

    #[test]
    fn synthetic_is_pure_function_of_cfg_and_seed() {
        let cfg = SynthTaskConfig::default();
        let a = generate_synthetic(&cfg, 11, 42).unwrap();
        let b = generate_synthetic(&cfg, 11, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 12, 42).unwrap();
        assert_ne!(a.targets, c.targets);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");

        write_manifest(&path, &[]).unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());

        let cfg = SynthTaskConfig { records: 30, ..SynthTaskConfig::default() };
        let mut records = generate_corpus(&cfg, 3).unwrap();
        records[0].id = "带中文-0".into();
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(records, back);
        // Feature round trip is bit-exact.
        for (a, b) in records.iter().zip(&back) {
            for (x, y) in a.audio.data().iter().zip(b.audio.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn manifest_parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{}\nnot json\n").unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert!(line <= 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn cue_file_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cues.tsv");
        std::fs::write(&path, "vid1\t0.5\t2.25\thello there\nvid2\t1\t1.5\t你好\n").unwrap();
        let cues = read_cue_file(&path, Lang::En).unwrap();
        assert_eq!(cues.len(), 2);
        assert_eq!(cues[0].source_id, "vid1");
        assert_eq!(cues[1].text, "你好");

        std::fs::write(&path, "only\ttwo\n").unwrap();
        assert!(matches!(read_cue_file(&path, Lang::En), Err(Error::Parse { line: 1, .. })));
    }
}
