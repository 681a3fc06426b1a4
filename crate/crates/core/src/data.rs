//! Dataset ingestion and synthetic generators.
//!
//! Images arrive as IDX files (big-endian headers, row-major bytes) and are
//! turned into token sequences by bit-depth reduction in raster order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::arm::TokenBuffer;
use crate::codec::{write_u32, Reader};
use crate::error::{Error, Result};
use crate::numeric::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// 8-bit images, `count × rows × cols × channels`, channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Images {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Images {
    pub fn new(count: usize, rows: usize, cols: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        let expected = count * rows * cols * channels;
        if pixels.len() != expected {
            return Err(crate::error::shape_err("image pixels", expected, pixels.len()));
        }
        Ok(Self {
            count,
            rows,
            cols,
            channels,
            pixels,
        })
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn image(&self, n: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[n * len..(n + 1) * len]
    }

    /// Average-pools non-overlapping `factor × factor` blocks (floor of the
    /// mean), cropping any remainder symmetrically first.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || factor > self.rows || factor > self.cols {
            return Err(Error::InvalidArgument(format!("bad downsampling factor {factor}")));
        }
        let rows = self.rows / factor;
        let cols = self.cols / factor;
        let top = (self.rows - rows * factor) / 2;
        let left = (self.cols - cols * factor) / 2;
        let c = self.channels;
        let area = (factor * factor) as u32;
        let mut pixels = Vec::with_capacity(self.count * rows * cols * c);
        for n in 0..self.count {
            let img = self.image(n);
            for r in 0..rows {
                for q in 0..cols {
                    for ch in 0..c {
                        let mut sum = 0u32;
                        for dr in 0..factor {
                            for dq in 0..factor {
                                let y = top + r * factor + dr;
                                let x = left + q * factor + dq;
                                sum += u32::from(img[(y * self.cols + x) * c + ch]);
                            }
                        }
                        pixels.push((sum / area) as u8);
                    }
                }
            }
        }
        Self::new(self.count, rows, cols, c, pixels)
    }
}

fn read_idx_header(r: &mut Reader<impl Read>, magic: u32) -> Result<Vec<usize>> {
    let found = r.u32_be()?;
    if found != magic {
        return Err(Error::NotIdx);
    }
    let dims = (magic & 0xff) as usize;
    (0..dims).map(|_| r.u32_be().map(|v| v as usize)).collect()
}

/// Parses an unsigned-byte, three-dimensional IDX image stream.
pub fn read_idx_images(r: impl Read) -> Result<Images> {
    let mut r = Reader::new(r);
    let dims = read_idx_header(&mut r, IDX_IMAGES_MAGIC)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = r.bytes(count * rows * cols)?;
    Images::new(count, rows, cols, 1, pixels)
}

/// Parses an unsigned-byte, one-dimensional IDX label stream.
pub fn read_idx_labels(r: impl Read) -> Result<Vec<u8>> {
    let mut r = Reader::new(r);
    let dims = read_idx_header(&mut r, IDX_LABELS_MAGIC)?;
    r.bytes(dims[0])
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Images> {
    read_idx_images(BufReader::new(File::open(path)?))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    read_idx_labels(BufReader::new(File::open(path)?))
}

/// Writes single-channel images in IDX form.
pub fn write_idx_images(w: &mut impl Write, images: &Images) -> Result<()> {
    if images.channels != 1 {
        return Err(Error::InvalidArgument("IDX images must have one channel".into()));
    }
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(&images.pixels)?;
    Ok(())
}

pub fn write_idx_labels(w: &mut impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Keeps the top `bits` bits of a pixel.
pub fn quantize_pixel(pixel: u8, bits: u32) -> usize {
    usize::from(pixel >> (8 - bits))
}

/// Named collection of equal-shape token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    seq_len: usize,
    categories: usize,
    /// `(rows, cols)` when items are raster-flattened images.
    shape: Option<(usize, usize)>,
    items: Vec<TokenBuffer>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        seq_len: usize,
        categories: usize,
        shape: Option<(usize, usize)>,
        items: Vec<TokenBuffer>,
    ) -> Result<Self> {
        for item in &items {
            if item.len() != seq_len || item.categories() != categories || !item.is_complete() {
                return Err(Error::InvalidArgument(format!(
                    "dataset item must be a complete ({seq_len}, {categories}) buffer"
                )));
            }
        }
        if let Some((r, c)) = shape {
            if r * c != seq_len {
                return Err(crate::error::shape_err("dataset shape", seq_len, r * c));
            }
        }
        Ok(Self {
            name: name.into(),
            seq_len,
            categories,
            shape,
            items,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn items(&self) -> &[TokenBuffer] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn subset(&self, items: Vec<TokenBuffer>) -> Self {
        Self {
            name: self.name.clone(),
            seq_len: self.seq_len,
            categories: self.categories,
            shape: self.shape,
            items,
        }
    }

    /// Cache layout: `PSDS`, version u32, d u32, K u32, n u32, rows u32,
    /// cols u32 (both 0 when unshaped), then `n * d` token bytes.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.categories > 256 {
            return Err(Error::InvalidArgument("dataset cache needs K <= 256".into()));
        }
        w.write_all(CACHE_MAGIC)?;
        let (rows, cols) = self.shape.unwrap_or((0, 0));
        for v in [CACHE_VERSION, self.seq_len as u32, self.categories as u32, self.items.len() as u32, rows as u32, cols as u32] {
            write_u32(w, v)?;
        }
        for item in &self.items {
            let bytes: Vec<u8> = item.tokens().iter().map(|&t| t as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(name: impl Into<String>, r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic("dataset cache", CACHE_MAGIC)?;
        r.version("dataset cache", CACHE_VERSION)?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let shape = (rows > 0).then_some((rows, cols));
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let bytes = r.bytes(d)?;
            items.push(TokenBuffer::from_tokens(bytes.into_iter().map(usize::from).collect(), k)?);
        }
        Self::new(name, d, k, shape, items)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Self::read_from(name, BufReader::new(File::open(path)?))
    }
}

const CACHE_MAGIC: &[u8; 4] = b"PSDS";
const CACHE_VERSION: u32 = 1;

/// Reduces images to `2^bits` levels and flattens them row-major, channels
/// last within each pixel.
pub fn quantize(images: &Images, bits: u32) -> Result<Dataset> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 1..=8, got {bits}")));
    }
    let k = 1usize << bits;
    let items = (0..images.count)
        .map(|n| TokenBuffer::from_tokens(images.image(n).iter().map(|&p| quantize_pixel(p, bits)).collect(), k))
        .collect::<Result<Vec<_>>>()?;
    let shape = (images.channels == 1).then_some((images.rows, images.cols));
    Dataset::new(format!("images-{bits}bit"), images.image_len(), k, shape, items)
}

/// Binary sequences with `x_0` uniform and `x_i = x_{i-1} XOR 1` except
/// with probability `flip`, where the bit repeats instead.
pub fn synth_parity(n: usize, d: usize, flip: f64, rng: &mut Rng) -> Result<Dataset> {
    if d < 2 {
        return Err(Error::InvalidArgument("parity sequences need d >= 2".into()));
    }
    if !(0.0..=1.0).contains(&flip) {
        return Err(Error::InvalidArgument(format!("flip probability {flip} outside [0, 1]")));
    }
    let items = (0..n)
        .map(|_| {
            let mut x = Vec::with_capacity(d);
            x.push(rng.below(2));
            for i in 1..d {
                let prev = x[i - 1];
                x.push(if rng.bernoulli(flip) { prev } else { prev ^ 1 });
            }
            TokenBuffer::from_tokens(x, 2)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("parity", d, 2, None, items)
}

/// True bits per dimension of the parity process.
pub fn parity_entropy_bpd(d: usize, flip: f64) -> f64 {
    let h = if flip <= 0.0 || flip >= 1.0 {
        0.0
    } else {
        -(flip * flip.log2() + (1.0 - flip) * (1.0 - flip).log2())
    };
    (1.0 + (d as f64 - 1.0) * h) / d as f64
}

/// `side × side` binary images where every full row and every full column
/// is lit independently with probability `p`.
pub fn synth_bars(n: usize, side: usize, p: f64, rng: &mut Rng) -> Result<Dataset> {
    if side < 2 {
        return Err(Error::InvalidArgument("bars images need side >= 2".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("bar probability {p} outside [0, 1]")));
    }
    let items = (0..n)
        .map(|_| {
            let rows: Vec<bool> = (0..side).map(|_| rng.bernoulli(p)).collect();
            let cols: Vec<bool> = (0..side).map(|_| rng.bernoulli(p)).collect();
            bars_image(&rows, &cols)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("bars", side * side, 2, Some((side, side)), items)
}

/// Renders lit rows and columns into a raster-order binary image.
pub fn bars_image(rows: &[bool], cols: &[bool]) -> Result<TokenBuffer> {
    let side = rows.len();
    if cols.len() != side {
        return Err(crate::error::shape_err("bars columns", side, cols.len()));
    }
    let tokens = (0..side * side)
        .map(|idx| usize::from(rows[idx / side] || cols[idx % side]))
        .collect();
    TokenBuffer::from_tokens(tokens, 2)
}

/// Train, validation and test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle, then contiguous split. Sizes are `floor(f * n)` for the
/// validation and test parts; training takes the remainder. A part with a
/// positive fraction that comes out empty is an error.
pub fn split(dataset: &Dataset, fractions: [f64; 3], rng: &mut Rng) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_valid = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (fractions[2] * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;
    for (name, size, f) in [("train", n_train, fractions[0]), ("validation", n_valid, fractions[1]), ("test", n_test, fractions[2])] {
        if f > 0.0 && size == 0 {
            return Err(Error::EmptySplit(name));
        }
    }
    let take = |range: std::ops::Range<usize>| dataset.subset(order[range].iter().map(|&i| dataset.items[i].clone()).collect());
    Ok(Splits {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn hand_crafted_idx() {
        let bytes = idx_bytes(0x803, &[1, 2, 2], &[0, 255, 128, 7]);
        let img = read_idx_images(bytes.as_slice()).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (1, 2, 2));
        assert_eq!(img.pixels, vec![0, 255, 128, 7]);
    }

    #[test]
    fn idx_errors() {
        let labels = idx_bytes(0x801, &[2], &[3, 4]);
        let err = read_idx_images(labels.as_slice()).unwrap_err();
        assert!(matches!(err, Error::NotIdx));
        assert_eq!(err.to_string(), "not an IDX file");
        assert_eq!(read_idx_labels(labels.as_slice()).unwrap(), vec![3, 4]);
        let short = idx_bytes(0x803, &[1, 2, 2], &[1, 2, 3]);
        let err = read_idx_images(short.as_slice()).unwrap_err();
        assert_eq!(err.to_string(), "short read at byte 19");
    }

    #[test]
    fn idx_roundtrip() {
        let mut rng = Rng::new(3);
        let pixels: Vec<u8> = (0..5 * 3 * 4).map(|_| rng.below(256) as u8).collect();
        let img = Images::new(5, 3, 4, 1, pixels).unwrap();
        let mut bytes = Vec::new();
        write_idx_images(&mut bytes, &img).unwrap();
        assert_eq!(read_idx_images(bytes.as_slice()).unwrap(), img);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_pixel(255, 1), 1);
        assert_eq!(quantize_pixel(127, 1), 0);
        assert_eq!(quantize_pixel(128, 1), 1);
        assert_eq!(quantize_pixel(200, 5), 25);
        for p in 0..=255u8 {
            assert_eq!(quantize_pixel(p, 8), p as usize);
        }
        let img = Images::new(1, 2, 2, 1, vec![0, 255, 128, 7]).unwrap();
        let ds = quantize(&img, 1).unwrap();
        assert_eq!(ds.items()[0].tokens(), &[0, 1, 1, 0]);
        assert_eq!(ds.shape(), Some((2, 2)));
        assert!(quantize(&img, 0).is_err());
        assert!(quantize(&img, 9).is_err());
    }

    #[test]
    fn downsample_pools_blocks() {
        let img = Images::new(1, 4, 4, 1, (0..16).map(|v| v * 10).collect()).unwrap();
        let small = img.downsample(2).unwrap();
        assert_eq!((small.rows, small.cols), (2, 2));
        // block (0,0) = {0, 10, 40, 50}
        assert_eq!(small.pixels, vec![25, 45, 105, 125]);
        let odd = Images::new(1, 5, 5, 1, vec![1; 25]).unwrap().downsample(2).unwrap();
        assert_eq!(odd.pixels, vec![1; 4]);
    }

    #[test]
    fn parity_generator() {
        let ds = synth_parity(10, 8, 0.0, &mut Rng::new(1)).unwrap();
        for x in ds.items() {
            for i in 1..8 {
                assert_ne!(x.get(i), x.get(i - 1));
            }
        }
        assert!((parity_entropy_bpd(8, 0.0) - 0.125).abs() < 1e-15);
        // binary entropy of 0.05 via independent high-precision evaluation
        assert!((parity_entropy_bpd(16, 0.05) - 0.330997147296).abs() < 1e-11);
        let a = synth_parity(20, 16, 0.05, &mut Rng::new(9)).unwrap();
        let b = synth_parity(20, 16, 0.05, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(synth_parity(1, 1, 0.05, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn parity_flip_rate() {
        let ds = synth_parity(1000, 101, 0.05, &mut Rng::new(4)).unwrap();
        let mut repeats = 0usize;
        for x in ds.items() {
            repeats += (1..101).filter(|&i| x.get(i) == x.get(i - 1)).count();
        }
        let rate = repeats as f64 / 100_000.0;
        assert!((rate - 0.05).abs() < 0.005, "{rate}");
    }

    #[test]
    fn bars_generator() {
        let ds = synth_bars(5, 4, 0.0, &mut Rng::new(0)).unwrap();
        assert!(ds.items().iter().all(|x| x.tokens().iter().all(|&t| t == 0)));
        let x = bars_image(&[false, false, true, false], &[false; 4]).unwrap();
        let lit: Vec<usize> = (0..16).filter(|&i| x.get(i) == 1).collect();
        assert_eq!(lit, vec![8, 9, 10, 11]);
    }

    #[test]
    fn bars_lit_fraction() {
        // Brute-force expectation over all 2^16 row/column masks for side 4
        // matches 1 - (1-p)^2 per pixel; check side 8 by Monte Carlo against
        // that value (0.36).
        let p: f64 = 0.2;
        let side = 4;
        let mut expected = 0.0;
        for mask in 0u32..1 << (2 * side) {
            let rows: Vec<bool> = (0..side).map(|b| mask >> b & 1 == 1).collect();
            let cols: Vec<bool> = (0..side).map(|b| mask >> (side + b) & 1 == 1).collect();
            let lit = mask.count_ones() as i32;
            let weight = p.powi(lit) * (1.0 - p).powi(2 * side as i32 - lit);
            let img = bars_image(&rows, &cols).unwrap();
            expected += weight * img.tokens().iter().sum::<usize>() as f64 / (side * side) as f64;
        }
        assert!((expected - 0.36).abs() < 1e-12);
        let ds = synth_bars(4000, 8, p, &mut Rng::new(2)).unwrap();
        let total: usize = ds.items().iter().map(|x| x.tokens().iter().sum::<usize>()).sum();
        let frac = total as f64 / (4000.0 * 64.0);
        assert!((frac - expected).abs() < 0.01, "{frac}");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = synth_parity(100, 4, 0.1, &mut Rng::new(0)).unwrap();
        let s = split(&ds, [0.8, 0.1, 0.1], &mut Rng::new(5)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let again = split(&ds, [0.8, 0.1, 0.1], &mut Rng::new(5)).unwrap();
        assert_eq!(s, again);
        let all = split(&ds, [1.0, 0.0, 0.0], &mut Rng::new(5)).unwrap();
        assert_eq!(all.train.len(), 100);
        let tiny = synth_parity(3, 4, 0.1, &mut Rng::new(0)).unwrap();
        assert!(matches!(split(&tiny, [0.8, 0.1, 0.1], &mut Rng::new(0)), Err(Error::EmptySplit(_))));
        assert!(split(&ds, [0.5, 0.1, 0.1], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn cache_roundtrip() {
        let ds = synth_bars(7, 3, 0.3, &mut Rng::new(1)).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PSDS");
        assert_eq!(Dataset::read_from("bars", bytes.as_slice()).unwrap(), ds);
        bytes[0] = b'X';
        assert!(Dataset::read_from("bars", bytes.as_slice()).is_err());
    }
}
