//! Synthetic bilingual-style corpus and its JSON-lines format.
//!
//! Images are grids of patch codes. A region cell carries one-hot codes of its
//! colour, count and shape; every other cell carries the scene code, and the
//! outer ring of cells additionally sets a border flag. Captions describe the
//! same attributes with tokens from one of two disjoint language ranges, so
//! every phrase can be read back from the image it came from.
//!
//! Token layout: `0` padding, `1`/`2` language markers, then per language a
//! block of scene, colour, count and shape tokens.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{PatchGrid, ResolutionBuckets, MAX_TEXT_LEN};
use crate::error::{Error, Result};
use crate::losses::HARD_NEGATIVES;
use crate::numerics::Tensor;
use crate::region::BBox;

/// Pixel side of one patch in generated images.
pub const PATCH_PIXELS: u32 = 16;
const LANG_TOKEN_BASE: u32 = 1;
const FIRST_BLOCK_TOKEN: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub phrase: Vec<u32>,
    pub hard_negatives: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Patch codes, one row per patch in row-major grid order.
    pub image: Vec<Vec<f64>>,
    pub lang: u8,
    pub short_caption: Vec<u32>,
    pub long_caption: Vec<u32>,
    pub regions: Vec<Region>,
}

impl Sample {
    /// Side of the (square) patch grid, if the patch count is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let n = self.image.len();
        let s = (n as f64).sqrt().round() as usize;
        (s > 0 && s * s == n).then_some(s)
    }

    /// Image side in pixels.
    pub fn pixel_side(&self) -> u32 {
        self.grid_side().unwrap_or(0) as u32 * PATCH_PIXELS
    }

    pub fn patch_grid(&self) -> Result<PatchGrid> {
        let side = self
            .grid_side()
            .ok_or_else(|| Error::Shape(format!("{} patches do not form a square grid", self.image.len())))?;
        PatchGrid::new(side, side, Tensor::from_rows(&self.image)?)
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Scene,
    Color,
    Count,
    Shape,
}

impl Slot {
    pub const PERTURBABLE: [Slot; 3] = [Slot::Color, Slot::Count, Slot::Shape];

    fn name(self) -> &'static str {
        match self {
            Slot::Scene => "scene",
            Slot::Color => "color",
            Slot::Count => "count",
            Slot::Shape => "shape",
        }
    }
}

/// Number of values per slot; every perturbable slot needs at least 11 so ten
/// distinct single-slot negatives exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocab {
    pub scenes: u32,
    pub colors: u32,
    pub counts: u32,
    pub shapes: u32,
}

impl Default for AttributeVocab {
    fn default() -> Self {
        Self { scenes: 4, colors: 11, counts: 11, shapes: 11 }
    }
}

impl AttributeVocab {
    pub fn validate(&self) -> Result<()> {
        let need = HARD_NEGATIVES as u32 + 1;
        for slot in Slot::PERTURBABLE {
            let got = self.size(slot);
            if got < need {
                return Err(Error::VocabTooSmall { slot: slot.name(), got: got as usize, need: need as usize });
            }
        }
        if self.scenes == 0 {
            return Err(Error::VocabTooSmall { slot: "scene", got: 0, need: 1 });
        }
        Ok(())
    }

    pub fn size(&self, slot: Slot) -> u32 {
        match slot {
            Slot::Scene => self.scenes,
            Slot::Color => self.colors,
            Slot::Count => self.counts,
            Slot::Shape => self.shapes,
        }
    }

    fn offset(&self, slot: Slot) -> u32 {
        match slot {
            Slot::Scene => 0,
            Slot::Color => self.scenes,
            Slot::Count => self.scenes + self.colors,
            Slot::Shape => self.scenes + self.colors + self.counts,
        }
    }

    fn block(&self) -> u32 {
        self.scenes + self.colors + self.counts + self.shapes
    }

    pub fn vocab_size(&self) -> usize {
        (FIRST_BLOCK_TOKEN + 2 * self.block()) as usize
    }

    pub fn lang_token(lang: u8) -> u32 {
        LANG_TOKEN_BASE + u32::from(lang)
    }

    pub fn token(&self, lang: u8, slot: Slot, value: u32) -> u32 {
        debug_assert!(value < self.size(slot));
        FIRST_BLOCK_TOKEN + u32::from(lang) * self.block() + self.offset(slot) + value
    }

    /// Inverse of [`AttributeVocab::token`].
    pub fn decode(&self, token: u32) -> Option<(u8, Slot, u32)> {
        let rel = token.checked_sub(FIRST_BLOCK_TOKEN)?;
        let lang = rel / self.block();
        if lang > 1 {
            return None;
        }
        let mut r = rel % self.block();
        for slot in [Slot::Scene, Slot::Color, Slot::Count, Slot::Shape] {
            if r < self.size(slot) {
                return Some((lang as u8, slot, r));
            }
            r -= self.size(slot);
        }
        None
    }

    /// Values per patch code: scene, colour, count, shape one-hots plus the
    /// border flag.
    pub fn patch_dim(&self) -> usize {
        (self.block() + 1) as usize
    }

    fn region_code(&self, color: u32, count: u32, shape: u32) -> Vec<f64> {
        let mut v = vec![0.0; self.patch_dim()];
        v[(self.offset(Slot::Color) + color) as usize] = 1.0;
        v[(self.offset(Slot::Count) + count) as usize] = 1.0;
        v[(self.offset(Slot::Shape) + shape) as usize] = 1.0;
        v
    }

    fn background_code(&self, scene: u32, border: bool) -> Vec<f64> {
        let mut v = vec![0.0; self.patch_dim()];
        v[(self.offset(Slot::Scene) + scene) as usize] = 1.0;
        if border {
            v[self.block() as usize] = 1.0;
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Hard negatives

/// Ten distinct variants of `phrase`, each changing exactly one attribute token
/// to another value of the same slot and language. Perturbations go
/// round-robin over the phrase's attribute positions.
pub fn perturb_attributes(phrase: &[u32], vocab: &AttributeVocab, seed: u64) -> Result<Vec<Vec<u32>>> {
    vocab.validate()?;
    let positions: Vec<(usize, u8, Slot, u32)> = phrase
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| vocab.decode(t).map(|(l, s, v)| (i, l, s, v)))
        .filter(|(_, _, s, _)| Slot::PERTURBABLE.contains(s))
        .collect();
    if positions.is_empty() {
        return Err(Error::NoSlot);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alternatives: Vec<Vec<u32>> = positions
        .iter()
        .map(|&(_, _, slot, value)| {
            let mut alt: Vec<u32> = (0..vocab.size(slot)).filter(|&v| v != value).collect();
            alt.shuffle(&mut rng);
            alt.reverse();
            alt
        })
        .collect();
    let mut out = Vec::with_capacity(HARD_NEGATIVES);
    for k in 0..HARD_NEGATIVES {
        let p = k % positions.len();
        let (idx, lang, slot, _) = positions[p];
        let value = alternatives[p].pop().expect("at least 10 alternatives per slot");
        let mut neg = phrase.to_vec();
        neg[idx] = vocab.token(lang, slot, value);
        out.push(neg);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub seed: u64,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Patch-grid side; `grid_side · 16` must be a resolution bucket.
    pub grid_side: usize,
    pub vocab: AttributeVocab,
    /// Reject images whose scene, colour set and shape set repeat an earlier one.
    pub distinct_captions: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            seed: 0,
            min_regions: 1,
            max_regions: 3,
            grid_side: 8,
            vocab: AttributeVocab::default(),
            distinct_captions: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.min_regions == 0 || self.min_regions > self.max_regions || self.max_regions > 4 {
            return Err(Error::Config(format!(
                "region count range {}..={} must satisfy 1 ≤ min ≤ max ≤ 4",
                self.min_regions, self.max_regions
            )));
        }
        let side = self.grid_side as u32 * PATCH_PIXELS;
        if self.grid_side < 6 || !ResolutionBuckets::default().sides().contains(&side) {
            return Err(Error::Config(format!(
                "grid side {} ({} px) is not a resolution bucket layout",
                self.grid_side, side
            )));
        }
        Ok(())
    }
}

struct Placed {
    row: usize,
    col: usize,
    h: usize,
    w: usize,
    color: u32,
    count: u32,
    shape: u32,
}

/// Deterministic corpus for `config.seed`.
pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let vocab = &config.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.samples);

    let side = config.grid_side;
    // Interior (inside the border ring) split into four quadrants.
    let quad = (side - 2) / 2;
    let max_extent = quad.min(4);

    while out.len() < config.samples {
        let mut attempts = 0;
        let (scene, placed) = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config("cannot draw enough distinct samples for this vocabulary".into()));
            }
            let scene = rng.random_range(0..vocab.scenes);
            let k = rng.random_range(config.min_regions..=config.max_regions);
            let mut quads = [0usize, 1, 2, 3];
            quads.shuffle(&mut rng);
            let placed: Vec<Placed> = quads[..k]
                .iter()
                .map(|&q| {
                    let h = rng.random_range(2..=max_extent);
                    let w = rng.random_range(2..=max_extent);
                    let r0 = 1 + (q / 2) * quad + rng.random_range(0..=quad - h);
                    let c0 = 1 + (q % 2) * quad + rng.random_range(0..=quad - w);
                    Placed {
                        row: r0,
                        col: c0,
                        h,
                        w,
                        color: rng.random_range(0..vocab.colors),
                        count: rng.random_range(0..vocab.counts),
                        shape: rng.random_range(0..vocab.shapes),
                    }
                })
                .collect();
            if !config.distinct_captions {
                break (scene, placed);
            }
            let mut colors: Vec<u32> = placed.iter().map(|p| p.color).collect();
            let mut shapes: Vec<u32> = placed.iter().map(|p| p.shape).collect();
            colors.sort_unstable();
            shapes.sort_unstable();
            if seen.insert((scene, colors, shapes)) {
                break (scene, placed);
            }
        };
        let lang: u8 = rng.random_range(0..2);

        let mut image: Vec<Vec<f64>> = (0..side * side)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                vocab.background_code(scene, r == 0 || c == 0 || r == side - 1 || c == side - 1)
            })
            .collect();
        let lt = AttributeVocab::lang_token(lang);
        let scene_tok = vocab.token(lang, Slot::Scene, scene);
        let mut short = vec![lt, scene_tok];
        let mut long = vec![lt];
        let mut regions = Vec::with_capacity(placed.len());
        for p in &placed {
            let code = vocab.region_code(p.color, p.count, p.shape);
            for r in p.row..p.row + p.h {
                for c in p.col..p.col + p.w {
                    image[r * side + c] = code.clone();
                }
            }
            let color = vocab.token(lang, Slot::Color, p.color);
            let count = vocab.token(lang, Slot::Count, p.count);
            let shape = vocab.token(lang, Slot::Shape, p.shape);
            short.extend([color, shape]);
            long.extend([count, color, shape]);
            let phrase = vec![lt, count, color, shape];
            let hard_negatives = perturb_attributes(&phrase, vocab, rng.random())?;
            let s = side as f64;
            let bbox = BBox::new(
                p.col as f64 / s,
                p.row as f64 / s,
                (p.col + p.w) as f64 / s,
                (p.row + p.h) as f64 / s,
            )?;
            regions.push(Region { bbox, phrase, hard_negatives });
        }
        long.push(scene_tok);
        out.push(Sample { image, lang, short_caption: short, long_caption: long, regions });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON lines

fn validate_sample(s: &Sample, line: usize) -> Result<()> {
    let fail = |msg: String| Err(Error::Validation { line, msg });
    if s.lang > 1 {
        return fail(format!("lang must be 0 or 1, got {}", s.lang));
    }
    for (name, cap) in [("short_caption", &s.short_caption), ("long_caption", &s.long_caption)] {
        if cap.is_empty() {
            return fail(format!("{name} is empty"));
        }
        if cap.len() > MAX_TEXT_LEN {
            return fail(format!("{name} has {} tokens, exceeding the {MAX_TEXT_LEN}-token limit", cap.len()));
        }
    }
    let width = s.image.first().map_or(0, Vec::len);
    if width == 0 || s.image.iter().any(|r| r.len() != width) {
        return fail("image rows must be non-empty and of equal width".into());
    }
    if s.image.iter().flatten().any(|v| !v.is_finite()) {
        return fail("image contains non-finite values".into());
    }
    let side = s.pixel_side();
    if s.grid_side().is_none() || !ResolutionBuckets::default().sides().contains(&side) {
        return fail(format!("{} patches do not match any resolution bucket layout", s.image.len()));
    }
    for (r, region) in s.regions.iter().enumerate() {
        if region.phrase.is_empty() || region.phrase.len() > MAX_TEXT_LEN {
            return fail(format!("region {r}: phrase length {} outside 1..={MAX_TEXT_LEN}", region.phrase.len()));
        }
        if region.hard_negatives.len() != HARD_NEGATIVES {
            return fail(format!(
                "region {r}: expected exactly {HARD_NEGATIVES} hard negatives, got {}",
                region.hard_negatives.len()
            ));
        }
        for (k, neg) in region.hard_negatives.iter().enumerate() {
            if neg.len() != region.phrase.len() {
                return fail(format!("region {r}: hard negative {k} changes the phrase length"));
            }
            if *neg == region.phrase {
                return fail(format!("region {r}: hard negative {k} equals the phrase"));
            }
        }
    }
    Ok(())
}

/// Parses a JSON-lines corpus; blank lines are skipped, line numbers are 1-based.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        validate_sample(&sample, line_no)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    parse_corpus(BufReader::new(fs::File::open(path)?))
}

pub fn write_corpus<W: Write>(samples: &[Sample], mut w: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(samples: &[Sample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(samples, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Largest token id used anywhere in the corpus.
pub fn max_token_id(samples: &[Sample]) -> u32 {
    let mut m = 0;
    for s in samples {
        let texts = [&s.short_caption, &s.long_caption]
            .into_iter()
            .chain(s.regions.iter().flat_map(|r| std::iter::once(&r.phrase).chain(&r.hard_negatives)));
        for t in texts {
            m = m.max(t.iter().copied().max().unwrap_or(0));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(samples: usize) -> SynthConfig {
        SynthConfig { samples, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(20)).unwrap();
        let b = generate_corpus(&small(20)).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_corpus(&a, &mut ba).unwrap();
        write_corpus(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = generate_corpus(&SynthConfig { seed: 1, ..small(20) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_region_long_caption_is_phrase_plus_scene() {
        let cfg = SynthConfig { min_regions: 1, max_regions: 1, ..small(15) };
        for s in generate_corpus(&cfg).unwrap() {
            let r = &s.regions[0];
            let mut want = r.phrase.clone();
            want.push(s.short_caption[1]);
            assert_eq!(s.long_caption, want);
        }
    }

    #[test]
    fn vocab_too_small_is_rejected() {
        let cfg = SynthConfig { vocab: AttributeVocab { colors: 10, ..Default::default() }, ..small(3) };
        assert!(matches!(generate_corpus(&cfg), Err(Error::VocabTooSmall { slot: "color", got: 10, need: 11 })));
    }

    #[test]
    fn phrases_decode_from_patch_codes() {
        let cfg = small(100);
        let vocab = cfg.vocab;
        let corpus = generate_corpus(&SynthConfig { distinct_captions: false, ..cfg }).unwrap();
        for s in &corpus {
            let side = s.grid_side().unwrap();
            for r in &s.regions {
                let [x1, y1, x2, y2] = r.bbox.coords();
                let rows = (y1 * side as f64).round() as usize..(y2 * side as f64).round() as usize;
                let cols = (x1 * side as f64).round() as usize..(x2 * side as f64).round() as usize;
                // Every cell of the region carries exactly three hot entries,
                // one per attribute block, and no border flag.
                for i in rows.clone() {
                    assert!(i > 0 && i < side - 1);
                    for j in cols.clone() {
                        assert!(j > 0 && j < side - 1);
                        let code = &s.image[i * side + j];
                        let hot: Vec<usize> = (0..code.len()).filter(|&c| code[c] == 1.0).collect();
                        assert_eq!(hot.len(), 3);
                        // Read tokens back: the block layout mirrors the token layout.
                        let toks: Vec<u32> = hot.iter().map(|&c| 3 + u32::from(s.lang) * 37 + c as u32).collect();
                        assert_eq!(&toks[..], &[r.phrase[2], r.phrase[1], r.phrase[3]]);
                    }
                }
                assert_eq!(vocab.decode(r.phrase[2]).unwrap().1, Slot::Color);
            }
        }
    }

    #[test]
    fn perturbation_examples() {
        let vocab = AttributeVocab::default();
        let red = vocab.token(0, Slot::Color, 3);
        let phrase = vec![1, red, 60];
        // Token 60 decodes as nothing perturbable? Build an unambiguous one instead.
        let plain = vec![AttributeVocab::lang_token(0), red];
        let negs = perturb_attributes(&plain, &vocab, 9).unwrap();
        assert_eq!(negs.len(), 10);
        let mut colors: Vec<u32> = negs.iter().map(|n| vocab.decode(n[1]).unwrap().2).collect();
        assert!(negs.iter().all(|n| n[0] == plain[0] && n.len() == 2));
        colors.sort_unstable();
        colors.dedup();
        assert_eq!(colors.len(), 10);
        assert!(!colors.contains(&3));
        let _ = phrase;

        assert!(matches!(perturb_attributes(&[1, 2], &vocab, 0), Err(Error::NoSlot)));
        assert_eq!(perturb_attributes(&plain, &vocab, 9).unwrap(), negs);
    }

    #[test]
    fn random_phrases_get_valid_negatives() {
        let vocab = AttributeVocab::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let lang = rng.random_range(0..2u8);
            let mut phrase = vec![AttributeVocab::lang_token(lang)];
            let n = rng.random_range(1..5);
            for _ in 0..n {
                let slot = Slot::PERTURBABLE[rng.random_range(0..3)];
                phrase.push(vocab.token(lang, slot, rng.random_range(0..vocab.size(slot))));
            }
            let negs = perturb_attributes(&phrase, &vocab, rng.random()).unwrap();
            for (i, a) in negs.iter().enumerate() {
                assert_eq!(a.len(), phrase.len());
                assert_eq!(a.iter().zip(&phrase).filter(|(x, y)| x != y).count(), 1);
                let (pos, _) = a.iter().zip(&phrase).enumerate().find(|(_, (x, y))| x != y).unwrap();
                let (l0, s0, _) = vocab.decode(phrase[pos]).unwrap();
                let (l1, s1, _) = vocab.decode(a[pos]).unwrap();
                assert_eq!((l0, s0), (l1, s1));
                for b in &negs[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let corpus = generate_corpus(&small(10)).unwrap();
        let mut bytes = Vec::new();
        write_corpus(&corpus, &mut bytes).unwrap();
        let back = parse_corpus(&bytes[..]).unwrap();
        assert_eq!(back, corpus);
        let mut again = Vec::new();
        write_corpus(&back, &mut again).unwrap();
        assert_eq!(bytes, again);

        let text = String::from_utf8(bytes).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        lines[3] = lines[3].replace("\"hard_negatives\"", "\"negatives_hard\"");
        let err = parse_corpus(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");

        let mut s = corpus[0].clone();
        s.long_caption = vec![3; 197];
        let mut buf = Vec::new();
        write_corpus(&[corpus[1].clone(), s], &mut buf).unwrap();
        match parse_corpus(&buf[..]).unwrap_err() {
            Error::Validation { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("196"));
            }
            e => panic!("unexpected {e}"),
        }

        let mut s = corpus[0].clone();
        s.regions[0].hard_negatives.pop();
        let mut buf = Vec::new();
        write_corpus(&[s], &mut buf).unwrap();
        assert!(matches!(parse_corpus(&buf[..]), Err(Error::Validation { line: 1, .. })));
    }
}
