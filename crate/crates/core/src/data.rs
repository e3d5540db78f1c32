//! MNIST IDX ingestion, synthetic digit strings, corpus files and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::ctc::LabelSeq;
use crate::error::{config_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Side of an MNIST glyph in pixels.
pub const GLYPH: usize = 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Sequence(LabelSeq),
}

/// Single-channel images of one size, with labels, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    labels: Vec<Label>,
}

impl DatasetSplit {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, labels: Vec<Label>) -> Result<Self> {
        if pixels.len() != height * width * labels.len() {
            return Err(config_err(format!(
                "{} pixels for {} images of {height}×{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(DatasetSplit {
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &Label {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        DatasetSplit {
            height: self.height,
            width: self.width,
            pixels: self.pixels[..n * self.height * self.width].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Stacks the given samples into a `B×1×H×W` tensor.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        offset: offset as u64,
        needed: (offset + 4 - bytes.len().min(offset + 4)) as u64,
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len() as u64,
        needed: (offset + len - bytes.len()) as u64,
    })
}

/// Parses IDX image and label buffers; `paths` only label errors.
pub fn parse_idx(images: &[u8], labels: &[u8], paths: (&Path, &Path)) -> Result<DatasetSplit> {
    let (ip, lp) = paths;
    check_magic(images, IMAGES_MAGIC, ip)?;
    check_magic(labels, LABELS_MAGIC, lp)?;
    let n_img = be_u32(images, 4, ip)? as usize;
    let rows = be_u32(images, 8, ip)? as usize;
    let cols = be_u32(images, 12, ip)? as usize;
    let n_lab = be_u32(labels, 4, lp)? as usize;
    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let px = payload(images, 16, n_img * rows * cols, ip)?;
    let lb = payload(labels, 8, n_lab, lp)?;
    let pixels = px.iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lb.iter().map(|&b| Label::Class(b as usize)).collect();
    DatasetSplit::new(rows, cols, pixels, labels)
}

pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit> {
    let images = fs::read(images_path).map_err(|e| io_context(e, images_path))?;
    let labels = fs::read(labels_path).map_err(|e| io_context(e, labels_path))?;
    parse_idx(&images, &labels, (images_path, labels_path))
}

pub(crate) fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// `$DRN_MNIST_DIR`, or `data/mnist` under the current directory.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("DRN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<DatasetSplit> {
    let stem = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    read_idx(
        &dir.join(format!("{stem}-images-idx3-ubyte")),
        &dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

/// Layout of synthetic digit strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub height: usize,
    pub width: usize,
    /// Largest horizontal gap between neighbouring glyphs.
    pub max_gap: usize,
    /// Largest vertical offset of a glyph.
    pub max_jitter: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            min_len: 3,
            max_len: 5,
            height: 32,
            width: 160,
            max_gap: 8,
            max_jitter: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(config_err(format!(
                "string length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if self.height < GLYPH || self.max_len * GLYPH > self.width {
            return Err(Error::CanvasOverflow {
                needed: self.max_len * GLYPH,
                width: self.width,
            });
        }
        Ok(())
    }
}

/// Draws one digit string from `glyphs` (an MNIST-style split) and renders
/// it on a black canvas. Labels use the digit alphabet: digit `d` is symbol
/// `d + 1`.
///
/// Gaps are drawn from `0..=g` with `g` the largest gap (up to `max_gap`)
/// that still lets `n` glyphs fit; the string then starts at a random offset
/// within the remaining slack.
pub fn synth_string_sample(rng: &mut Rng, glyphs: &DatasetSplit, spec: &SynthSpec) -> Result<(Vec<f32>, LabelSeq)> {
    spec.validate()?;
    if glyphs.dims() != (GLYPH, GLYPH) || glyphs.is_empty() {
        return Err(config_err("glyph source must hold 28×28 images"));
    }
    let n = spec.min_len + rng.below((spec.max_len - spec.min_len + 1) as u64) as usize;
    let slack = spec.width - n * GLYPH;
    let gap_cap = if n > 1 { spec.max_gap.min(slack / (n - 1)) } else { 0 };
    let picks: Vec<usize> = (0..n).map(|_| rng.below(glyphs.len() as u64) as usize).collect();
    let gaps: Vec<usize> = (1..n).map(|_| rng.below(gap_cap as u64 + 1) as usize).collect();
    let used: usize = gaps.iter().sum();
    let mut x = rng.below((slack - used) as u64 + 1) as usize;
    let jitter_cap = spec.max_jitter.min(spec.height - GLYPH);
    let mut canvas = vec![0.0f32; spec.height * spec.width];
    let mut labels = Vec::with_capacity(n);
    for (i, &g) in picks.iter().enumerate() {
        let Label::Class(d) = *glyphs.label(g) else {
            return Err(config_err("glyph source must carry class labels"));
        };
        labels.push(d + 1);
        let y = rng.below(jitter_cap as u64 + 1) as usize;
        let src = glyphs.image(g);
        for r in 0..GLYPH {
            let dst = &mut canvas[(y + r) * spec.width + x..][..GLYPH];
            for (d, &s) in dst.iter_mut().zip(&src[r * GLYPH..(r + 1) * GLYPH]) {
                *d = d.max(s);
            }
        }
        x += GLYPH + gaps.get(i).copied().unwrap_or(0);
    }
    Ok((canvas, LabelSeq::new(labels, 11)?))
}

/// `count` strings from one seeded stream.
pub fn synth_corpus(rng: &mut Rng, glyphs: &DatasetSplit, spec: &SynthSpec, count: usize) -> Result<DatasetSplit> {
    let mut pixels = Vec::with_capacity(count * spec.height * spec.width);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (p, l) = synth_string_sample(rng, glyphs, spec)?;
        pixels.extend(p);
        labels.push(Label::Sequence(l));
    }
    DatasetSplit::new(spec.height, spec.width, pixels, labels)
}

const INDEX_HEADER: &str = "id,file,height,width,label";

fn label_field(label: &Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Sequence(s) => s.as_slice().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
    }
}

/// Writes `{id:06}.f32` raw little-endian pixel files plus `index.csv`.
pub fn write_corpus(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for i in 0..split.len() {
        let file = format!("{i:06}.f32");
        let bytes: Vec<u8> = split.image(i).iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        index.push_str(&format!(
            "{i},{file},{},{},{}\n",
            split.height,
            split.width,
            label_field(split.label(i))
        ));
    }
    let mut f = fs::File::create(dir.join("index.csv"))?;
    f.write_all(index.as_bytes())?;
    Ok(())
}

/// Reads a directory written by [`write_corpus`]. Labels with spaces or a
/// leading `seq:` are sequences; bare integers are classes unless
/// `sequences` is set.
pub fn read_corpus(dir: &Path, sequences: bool) -> Result<DatasetSplit> {
    let text = fs::read_to_string(dir.join("index.csv")).map_err(|e| io_context(e, &dir.join("index.csv")))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Parse(format!(
            "{}: expected header `{INDEX_HEADER}`",
            dir.display()
        )));
    }
    let mut dims = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        let [_, file, h, w, label] = fields[..] else {
            return Err(Error::Parse(format!("index.csv line {}: expected 5 fields", n + 2)));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("index.csv line {}: bad integer `{s}`", n + 2)))
        };
        let (h, w) = (parse(h)?, parse(w)?);
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Parse(format!("index.csv line {}: mixed image sizes", n + 2)));
        }
        let bytes = fs::read(dir.join(file)).map_err(|e| io_context(e, &dir.join(file)))?;
        if bytes.len() != h * w * 4 {
            return Err(Error::Truncated {
                path: dir.join(file),
                offset: bytes.len() as u64,
                needed: (h * w * 4).saturating_sub(bytes.len()) as u64,
            });
        }
        pixels.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
        );
        let values = label.split_whitespace().map(parse).collect::<Result<Vec<usize>>>()?;
        labels.push(if sequences || values.len() != 1 {
            Label::Sequence(LabelSeq::new(values, usize::MAX)?)
        } else {
            Label::Class(values[0])
        });
    }
    let (h, w) = dims.ok_or(Error::Empty("corpus"))?;
    DatasetSplit::new(h, w, pixels, labels)
}

pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn classes(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => Ok(*c),
                Label::Sequence(_) => Err(config_err("expected class labels")),
            })
            .collect()
    }

    pub fn sequences(&self) -> Result<Vec<LabelSeq>> {
        self.labels
            .iter()
            .map(|l| match l {
                Label::Sequence(s) => Ok(s.clone()),
                Label::Class(_) => Err(config_err("expected sequence labels")),
            })
            .collect()
    }
}

/// Batches over a fixed sample order; the last batch may be short.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    /// Shuffled by one permutation drawn from `rng`.
    pub fn shuffled(split: &'a DatasetSplit, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        Self::check(split, batch_size)?;
        Ok(Self::with_order(split, batch_size, rng.permutation(split.len())))
    }

    /// Storage order.
    pub fn sequential(split: &'a DatasetSplit, batch_size: usize) -> Result<Self> {
        Self::check(split, batch_size)?;
        Ok(Self::with_order(split, batch_size, (0..split.len()).collect()))
    }

    fn check(split: &DatasetSplit, batch_size: usize) -> Result<()> {
        if split.is_empty() {
            return Err(Error::Empty("dataset split"));
        }
        if batch_size == 0 {
            return Err(config_err("batch size must be at least 1"));
        }
        Ok(())
    }

    fn with_order(split: &'a DatasetSplit, batch_size: usize, order: Vec<usize>) -> Self {
        BatchIter {
            split,
            order,
            batch_size,
            pos: 0,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self.split.stack(&indices).expect("consistent split");
        let labels = indices.iter().map(|&i| self.split.label(i).clone()).collect();
        Some(Batch {
            indices,
            images,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(body);
        v
    }

    fn idx_labels(n: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [LABELS_MAGIC, n] {
            v.extend(x.to_be_bytes());
        }
        v.extend(body);
        v
    }

    fn paths() -> (&'static Path, &'static Path) {
        (Path::new("img"), Path::new("lab"))
    }

    #[test]
    fn idx_round_trip() {
        let body: Vec<u8> = (0..8).map(|i| (i * 30) as u8).collect();
        let s = parse_idx(&idx_images(2, 2, 2, &body), &idx_labels(2, &[3, 7]), paths()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dims(), (2, 2));
        for (i, &b) in body.iter().enumerate() {
            assert_eq!(s.pixels[i], b as f32 / 255.0);
        }
        assert_eq!(s.label(1), &Label::Class(7));
    }

    #[test]
    fn idx_errors_are_distinct() {
        let img = idx_images(2, 2, 2, &[0; 8]);
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx(&bad, &idx_labels(2, &[0, 0]), paths()),
            Err(Error::IdxMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_idx(&img, &img, paths()),
            Err(Error::IdxMagic {
                expected: LABELS_MAGIC,
                ..
            })
        ));
        assert!(matches!(
            parse_idx(&img[..20], &idx_labels(2, &[0, 0]), paths()),
            Err(Error::Truncated { offset: 20, .. })
        ));
        assert!(matches!(
            parse_idx(&img, &idx_labels(3, &[0, 0, 0]), paths()),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    fn fake_glyphs() -> DatasetSplit {
        let mut rng = Rng::new(9);
        let n = 20;
        let pixels = (0..n * GLYPH * GLYPH).map(|_| rng.uniform() as f32).collect();
        let labels = (0..n).map(|i| Label::Class(i % 10)).collect();
        DatasetSplit::new(GLYPH, GLYPH, pixels, labels).unwrap()
    }

    #[test]
    fn synth_lengths_and_determinism() {
        let glyphs = fake_glyphs();
        let spec = SynthSpec::default();
        let mut seen = [false; 6];
        for seed in 0..50 {
            let (a, la) = synth_string_sample(&mut Rng::new(seed), &glyphs, &spec).unwrap();
            let (b, lb) = synth_string_sample(&mut Rng::new(seed), &glyphs, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(la, lb);
            assert!((3..=5).contains(&la.len()));
            assert!(la.as_slice().iter().all(|&v| (1..=10).contains(&v)));
            assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
            seen[la.len()] = true;
        }
        assert!(seen[3] && seen[4] && seen[5]);
    }

    #[test]
    fn synth_overflow_rejected() {
        let spec = SynthSpec {
            width: 100,
            ..SynthSpec::default()
        };
        assert!(matches!(
            synth_string_sample(&mut Rng::new(0), &fake_glyphs(), &spec),
            Err(Error::CanvasOverflow {
                needed: 140,
                width: 100
            })
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = synth_corpus(&mut Rng::new(1), &fake_glyphs(), &SynthSpec::default(), 4).unwrap();
        write_corpus(dir.path(), &split).unwrap();
        assert_eq!(read_corpus(dir.path(), true).unwrap(), split);
        let classes = fake_glyphs().take(3);
        write_corpus(&dir.path().join("c"), &classes).unwrap();
        assert_eq!(read_corpus(&dir.path().join("c"), false).unwrap(), classes);
    }

    #[test]
    fn batches_cover_and_keep_short_tail() {
        let split = fake_glyphs().take(10);
        let sizes: Vec<usize> = BatchIter::sequential(&split, 4)
            .unwrap()
            .map(|b| b.indices.len())
            .collect();
        assert_eq!(sizes, [4, 4, 2]);
        let mut seen: Vec<usize> = BatchIter::shuffled(&split, 3, &mut Rng::new(2))
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_one_follows_permutation() {
        let split = fake_glyphs().take(10);
        let it = BatchIter::shuffled(&split, 1, &mut Rng::new(5)).unwrap();
        let order = it.order().to_vec();
        let got: Vec<usize> = it.map(|b| b.indices[0]).collect();
        assert_eq!(got, order);
        assert_eq!(order, Rng::new(5).permutation(10));
        let again: Vec<Vec<usize>> = BatchIter::shuffled(&split, 4, &mut Rng::new(5))
            .unwrap()
            .map(|b| b.indices)
            .collect();
        let twice: Vec<Vec<usize>> = BatchIter::shuffled(&split, 4, &mut Rng::new(5))
            .unwrap()
            .map(|b| b.indices)
            .collect();
        assert_eq!(again, twice);
    }

    #[test]
    fn empty_split_rejected() {
        let split = DatasetSplit::new(2, 2, vec![], vec![]).unwrap();
        assert!(BatchIter::sequential(&split, 2).is_err());
    }
}
