//! Image datasets: the binary `PSND` container, synthetic pattern
//! generators and portable-pixmap export.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"PSND";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1 + 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset version {0} is not supported")]
    Version(u32),
    #[error("dataset payload holds {got} bytes, header implies {expected}")]
    Length { expected: usize, got: usize },
    #[error("pixel value {value} at offset {offset} is outside depth {depth}")]
    OutOfAlphabet {
        value: u8,
        offset: usize,
        depth: u16,
    },
    #[error("dataset checksum mismatch")]
    Checksum,
    #[error("invalid dataset geometry: {0}")]
    Geometry(String),
}

/// `n` images of `C x H x W` pixels with levels in `0..depth`, stored
/// flat as `[n, C, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub depth: u16,
    pub pixels: Vec<u8>,
}

impl ImageDataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        depth: u16,
        pixels: Vec<u8>,
    ) -> Result<Self, DataError> {
        if !(2..=256).contains(&depth) {
            return Err(DataError::Geometry(format!(
                "depth {depth} outside 2..=256"
            )));
        }
        if channels == 0
            || height == 0
            || width == 0
            || height > u16::MAX as usize
            || width > u16::MAX as usize
            || channels > u8::MAX as usize
        {
            return Err(DataError::Geometry(format!("{channels}x{height}x{width}")));
        }
        let dims = channels * height * width;
        if !pixels.len().is_multiple_of(dims) {
            return Err(DataError::Length {
                expected: pixels.len() / dims * dims,
                got: pixels.len(),
            });
        }
        if let Some((offset, &value)) = pixels.iter().enumerate().find(|(_, &v)| v as u16 >= depth)
        {
            return Err(DataError::OutOfAlphabet {
                value,
                offset,
                depth,
            });
        }
        Ok(ImageDataset {
            n: pixels.len() / dims,
            channels,
            height,
            width,
            depth,
            pixels,
        })
    }

    /// Subpixels per image.
    pub fn dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.dims();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Concatenates the images at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Vec<u8> {
        indices
            .iter()
            .flat_map(|&i| self.image(i).iter().copied())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&self.depth.to_le_bytes());
        out.extend_from_slice(&self.pixels);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
            return Err(DataError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Length {
                expected: HEADER_LEN + 4,
                got: bytes.len(),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(DataError::Version(version));
        }
        let n = u32_at(8) as usize;
        let height = u16_at(12) as usize;
        let width = u16_at(14) as usize;
        let channels = bytes[16] as usize;
        let depth = u16_at(17);
        let payload = n * channels * height * width;
        if bytes.len() != HEADER_LEN + payload + 4 {
            return Err(DataError::Length {
                expected: HEADER_LEN + payload + 4,
                got: bytes.len(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(DataError::Checksum);
        }
        let ds = ImageDataset::new(channels, height, width, depth, body[HEADER_LEN..].to_vec())?;
        debug_assert_eq!(ds.n, n);
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Empirical per-subpixel entropy in bits, from level frequencies
    /// pooled over all pixels and channels.
    pub fn empirical_entropy_bits(&self) -> f64 {
        let mut counts = vec![0usize; self.depth as usize];
        for &v in &self.pixels {
            counts[v as usize] += 1;
        }
        let total = self.pixels.len() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.log2()
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Checker,
    Gradient,
    Stripes,
    Constant,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Checker,
        Pattern::Gradient,
        Pattern::Stripes,
        Pattern::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Checker => "checker",
            Pattern::Gradient => "gradient",
            Pattern::Stripes => "stripes",
            Pattern::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Pattern> {
        Pattern::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Two distinct levels in random order.
fn two_levels<R: Rng>(rng: &mut R, depth: u16) -> (u8, u8) {
    let mut levels: Vec<u8> = (0..depth).map(|v| v as u8).collect();
    levels.shuffle(rng);
    (levels[0], levels[1])
}

fn synth_image<R: Rng>(
    pattern: Pattern,
    c: usize,
    h: usize,
    w: usize,
    depth: u16,
    rng: &mut R,
    out: &mut Vec<u8>,
) {
    let top = depth as usize - 1;
    match pattern {
        Pattern::Checker => {
            let (a, b) = two_levels(rng, depth);
            for _ in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out.push(if (i + j) % 2 == 0 { a } else { b });
                    }
                }
            }
        }
        Pattern::Gradient => {
            let lo = rng.gen_range(0..=top);
            let hi = rng.gen_range(0..=top);
            for _ in 0..c {
                for _ in 0..h {
                    for j in 0..w {
                        let t = if w == 1 {
                            0.0
                        } else {
                            j as f64 / (w - 1) as f64
                        };
                        let v = lo as f64 + t * (hi as f64 - lo as f64);
                        out.push(v.round() as u8);
                    }
                }
            }
        }
        Pattern::Stripes => {
            let (a, b) = two_levels(rng, depth);
            let period = rng.gen_range(1..=3usize);
            for _ in 0..c {
                for i in 0..h {
                    for _ in 0..w {
                        out.push(if (i / period) % 2 == 0 { a } else { b });
                    }
                }
            }
        }
        Pattern::Constant => {
            let v = rng.gen_range(0..=top) as u8;
            out.extend(std::iter::repeat_n(v, c * h * w));
        }
    }
}

/// Deterministic synthetic images of one pattern.
pub fn gen_synthetic(
    pattern: Pattern,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    depth: u16,
    seed: u64,
) -> Result<ImageDataset, DataError> {
    ImageDataset::new(c, h, w, depth, Vec::new())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        synth_image(pattern, c, h, w, depth, &mut rng, &mut pixels);
    }
    ImageDataset::new(c, h, w, depth, pixels)
}

/// Binary PGM (`C = 1`) or PPM (`C = 3`) bytes with maxval `depth - 1`.
pub fn encode_pnm(
    image: &[u8],
    channels: usize,
    height: usize,
    width: usize,
    depth: u16,
) -> Result<Vec<u8>, DataError> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(DataError::Geometry(format!(
                "{channels} channels cannot be exported"
            )))
        }
    };
    if image.len() != channels * height * width {
        return Err(DataError::Length {
            expected: channels * height * width,
            got: image.len(),
        });
    }
    if let Some((offset, &value)) = image.iter().enumerate().find(|(_, &v)| v as u16 >= depth) {
        return Err(DataError::OutOfAlphabet {
            value,
            offset,
            depth,
        });
    }
    let mut out = format!("{magic}\n{width} {height}\n{}\n", depth - 1).into_bytes();
    let plane = height * width;
    for p in 0..plane {
        for ch in 0..channels {
            out.push(image[ch * plane + p]);
        }
    }
    Ok(out)
}

pub fn export_image(
    image: &[u8],
    channels: usize,
    height: usize,
    width: usize,
    depth: u16,
    path: &Path,
) -> Result<(), DataError> {
    fs::write(path, encode_pnm(image, channels, height, width, depth)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ds = gen_synthetic(Pattern::Gradient, 5, 3, 4, 6, 16, 2).unwrap();
        assert_eq!(ImageDataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
        let empty = ImageDataset::new(1, 2, 2, 4, vec![]).unwrap();
        assert_eq!(empty.n, 0);
        assert_eq!(ImageDataset::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn distinct_errors() {
        let ds = gen_synthetic(Pattern::Checker, 2, 1, 2, 2, 4, 0).unwrap();
        let good = ds.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'Q';
        assert!(matches!(
            ImageDataset::from_bytes(&bad),
            Err(DataError::BadMagic)
        ));

        assert!(matches!(
            ImageDataset::from_bytes(&good[..good.len() - 2]),
            Err(DataError::Length { .. })
        ));

        let mut flipped = good.clone();
        flipped[HEADER_LEN] ^= 1;
        assert!(matches!(
            ImageDataset::from_bytes(&flipped),
            Err(DataError::Checksum)
        ));

        // A value equal to D with a consistent checksum.
        let mut raw = good[..good.len() - 4].to_vec();
        raw[HEADER_LEN + 1] = 4;
        let crc = crc32fast::hash(&raw);
        raw.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            ImageDataset::from_bytes(&raw),
            Err(DataError::OutOfAlphabet {
                value: 4,
                offset: 1,
                depth: 4
            })
        ));
    }

    #[test]
    fn pattern_definitions() {
        let constant = gen_synthetic(Pattern::Constant, 6, 1, 5, 5, 16, 1).unwrap();
        for i in 0..6 {
            let img = constant.image(i);
            assert!(img.iter().all(|&v| v == img[0]));
        }
        let checker = gen_synthetic(Pattern::Checker, 4, 1, 4, 4, 2, 3).unwrap();
        let mut seen: Vec<u8> = checker.pixels.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1]);
        for p in Pattern::ALL {
            assert_eq!(
                gen_synthetic(p, 3, 3, 4, 4, 8, 9).unwrap().to_bytes(),
                gen_synthetic(p, 3, 3, 4, 4, 8, 9).unwrap().to_bytes()
            );
            assert_eq!(Pattern::parse(p.name()), Some(p));
        }
    }

    #[test]
    fn minimal_pgm() {
        assert_eq!(
            encode_pnm(&[0], 1, 1, 1, 2).unwrap(),
            b"P5\n1 1\n1\n\0".to_vec()
        );
    }

    #[test]
    fn ppm_interleaves_channels() {
        // planes: R = [1, 2], G = [3, 4], B = [5, 6]
        let bytes = encode_pnm(&[1, 2, 3, 4, 5, 6], 3, 1, 2, 8).unwrap();
        assert_eq!(bytes, b"P6\n2 1\n7\n\x01\x03\x05\x02\x04\x06".to_vec());
        assert!(encode_pnm(&[8, 0, 0], 3, 1, 1, 8).is_err());
    }

    #[test]
    fn entropy_of_balanced_binary_is_one_bit() {
        let ds = ImageDataset::new(1, 1, 2, 2, vec![0, 1, 1, 0]).unwrap();
        assert!((ds.empirical_entropy_bits() - 1.0).abs() < 1e-15);
    }
}
