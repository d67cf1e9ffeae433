//! Raster value types, the WSLR binary format, median compositing, and PNG
//! map export.
//!
//! A [`Raster`] is a multi-band 32-bit float image laid out band-sequential,
//! row-major. A [`ClassMap`] is a per-pixel class grid with codes
//! `{0 = non-forest, 1 = forest, 255 = unlabeled}`. Both are immutable after
//! construction; every operation here is a pure function.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Class code for non-forest pixels.
pub const NON_FOREST: u8 = 0;
/// Class code for forest pixels.
pub const FOREST: u8 = 1;
/// Class code for pixels without a label.
pub const UNLABELED: u8 = 255;

const WSLR_MAGIC: &[u8; 4] = b"WSLR";
const WSLR_VERSION: u16 = 1;
/// Upper bound on bands*height*width, guards against corrupt headers.
const MAX_ELEMS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("empty raster stack")]
    EmptyStack,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("raster has zero extent")]
    ZeroExtent,
    #[error("data length {got} does not match bands*height*width = {expected}")]
    BadDataLength { expected: usize, got: usize },
    #[error("class map contains invalid code {0}")]
    InvalidCode(u8),
    #[error("bad magic: expected \"WSLR\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported WSLR version {0}")]
    BadVersion(u16),
    #[error("file truncated: expected {expected} data bytes, got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("declared dimensions overflow ({0} elements)")]
    DimensionOverflow(u64),
    #[error("class map raster holds non-code value {0}")]
    NonCodeValue(f32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Multi-band 32-bit float image. `data` is band-sequential row-major:
/// index = band*height*width + row*width + col. SAR bands hold dB values.
#[derive(Debug, Clone)]
pub struct Raster {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Sentinel for missing data. NaN by default; NaN is matched bitwise so
    /// payloads survive round-trips.
    pub nodata: f32,
}

// Bitwise equality so NaN nodata and NaN payloads compare meaningfully; this
// is the identity the WSLR round-trip guarantees.
impl PartialEq for Raster {
    fn eq(&self, other: &Self) -> bool {
        self.bands == other.bands
            && self.height == other.height
            && self.width == other.width
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Raster {
    pub fn new(
        bands: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        nodata: f32,
    ) -> Result<Self, RasterError> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(RasterError::ZeroExtent);
        }
        let expected = bands * height * width;
        if data.len() != expected {
            return Err(RasterError::BadDataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
            nodata,
        })
    }

    /// All-`fill` raster with NaN nodata.
    pub fn filled(bands: usize, height: usize, width: usize, fill: f32) -> Self {
        Self {
            bands,
            height,
            width,
            data: vec![fill; bands * height * width],
            nodata: f32::NAN,
        }
    }

    #[inline]
    pub fn index(&self, band: usize, row: usize, col: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(band, row, col)]
    }

    /// Nodata test; NaN sentinels match any NaN value.
    #[inline]
    pub fn is_nodata(&self, value: f32) -> bool {
        if self.nodata.is_nan() {
            value.is_nan()
        } else {
            value.to_bits() == self.nodata.to_bits()
        }
    }
}

/// Per-pixel class grid over `{NON_FOREST, FOREST, UNLABELED}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::ZeroExtent);
        }
        if values.len() != height * width {
            return Err(RasterError::BadDataLength {
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some(&bad) = values
            .iter()
            .find(|&&v| v != NON_FOREST && v != FOREST && v != UNLABELED)
        {
            return Err(RasterError::InvalidCode(bad));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, code: u8) -> Self {
        Self {
            height,
            width,
            values: vec![code; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, code: u8) {
        self.values[row * self.width + col] = code;
    }

    /// Fraction of pixels equal to `code`.
    pub fn fraction(&self, code: u8) -> f64 {
        let n = self.values.iter().filter(|&&v| v == code).count();
        n as f64 / self.values.len() as f64
    }
}

/// Per-band per-pixel median over the stack, skipping nodata entries. Even
/// counts take the mean of the two middle values; all-nodata pixels stay
/// nodata.
pub fn median_composite(stack: &[Raster]) -> Result<Raster, RasterError> {
    let first = stack.first().ok_or(RasterError::EmptyStack)?;
    for r in stack {
        if (r.bands, r.height, r.width) != (first.bands, first.height, first.width) {
            return Err(RasterError::DimensionMismatch {
                expected: format!("{}x{}x{}", first.bands, first.height, first.width),
                got: format!("{}x{}x{}", r.bands, r.height, r.width),
            });
        }
    }
    let n = first.data.len();
    let mut out = vec![first.nodata; n];
    let mut vals: Vec<f32> = Vec::with_capacity(stack.len());
    for i in 0..n {
        vals.clear();
        for r in stack {
            let v = r.data[i];
            if !r.is_nodata(v) {
                vals.push(v);
            }
        }
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = vals.len();
        out[i] = if m % 2 == 1 {
            vals[m / 2]
        } else {
            0.5 * (vals[m / 2 - 1] + vals[m / 2])
        };
    }
    Raster::new(first.bands, first.height, first.width, out, first.nodata)
}

/// Write a raster in the WSLR format (little-endian):
/// magic "WSLR" | version u16 | bands u16 | height u32 | width u32 |
/// nodata f32 | data f32[bands*height*width] band-sequential row-major.
pub fn write_raster<P: AsRef<Path>>(raster: &Raster, path: P) -> Result<(), RasterError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WSLR_MAGIC)?;
    w.write_all(&WSLR_VERSION.to_le_bytes())?;
    w.write_all(&(raster.bands as u16).to_le_bytes())?;
    w.write_all(&(raster.height as u32).to_le_bytes())?;
    w.write_all(&(raster.width as u32).to_le_bytes())?;
    w.write_all(&raster.nodata.to_bits().to_le_bytes())?;
    for v in &raster.data {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(
    r: &mut impl Read,
    buf: &mut [u8],
    expected: u64,
    got_so_far: &mut u64,
) -> Result<(), RasterError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(RasterError::Truncated {
                expected,
                got: *got_so_far + filled as u64,
            });
        }
        filled += n;
    }
    *got_so_far += buf.len() as u64;
    Ok(())
}

/// Read a WSLR raster. Bit-exact inverse of [`write_raster`], including NaN
/// payloads.
pub fn read_raster<P: AsRef<Path>>(path: P) -> Result<Raster, RasterError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    let mut got = 0u64;
    read_exact_or_truncated(&mut r, &mut magic, 20, &mut got)?;
    if &magic != WSLR_MAGIC {
        return Err(RasterError::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    let mut b4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut b2, 20, &mut got)?;
    let version = u16::from_le_bytes(b2);
    if version != WSLR_VERSION {
        return Err(RasterError::BadVersion(version));
    }
    read_exact_or_truncated(&mut r, &mut b2, 20, &mut got)?;
    let bands = u16::from_le_bytes(b2) as u64;
    read_exact_or_truncated(&mut r, &mut b4, 20, &mut got)?;
    let height = u32::from_le_bytes(b4) as u64;
    read_exact_or_truncated(&mut r, &mut b4, 20, &mut got)?;
    let width = u32::from_le_bytes(b4) as u64;
    read_exact_or_truncated(&mut r, &mut b4, 20, &mut got)?;
    let nodata = f32::from_bits(u32::from_le_bytes(b4));

    let elems = bands * height * width;
    if elems == 0 {
        return Err(RasterError::ZeroExtent);
    }
    if elems > MAX_ELEMS {
        return Err(RasterError::DimensionOverflow(elems));
    }
    let expected_bytes = elems * 4;
    let mut data = Vec::with_capacity(elems as usize);
    let mut got_data = 0u64;
    for _ in 0..elems {
        read_exact_or_truncated(&mut r, &mut b4, expected_bytes, &mut got_data)?;
        data.push(f32::from_bits(u32::from_le_bytes(b4)));
    }
    Raster::new(bands as usize, height as usize, width as usize, data, nodata)
}

/// Store a class map as a one-band WSLR raster with codes as floats.
pub fn write_class_map<P: AsRef<Path>>(map: &ClassMap, path: P) -> Result<(), RasterError> {
    let data: Vec<f32> = map.values.iter().map(|&c| c as f32).collect();
    let raster = Raster::new(1, map.height, map.width, data, f32::NAN)?;
    write_raster(&raster, path)
}

/// Read a class map stored by [`write_class_map`].
pub fn read_class_map<P: AsRef<Path>>(path: P) -> Result<ClassMap, RasterError> {
    let raster = read_raster(path)?;
    if raster.bands != 1 {
        return Err(RasterError::DimensionMismatch {
            expected: "1 band".into(),
            got: format!("{} bands", raster.bands),
        });
    }
    let mut values = Vec::with_capacity(raster.data.len());
    for &v in &raster.data {
        if v == 0.0 || v == 1.0 || v == 255.0 {
            values.push(v as u8);
        } else {
            return Err(RasterError::NonCodeValue(v));
        }
    }
    ClassMap::new(raster.height, raster.width, values)
}

/// Render a class map as an 8-bit PNG with a fixed palette:
/// non-forest tan (210,180,140), forest dark green (0,100,0),
/// unlabeled gray (128,128,128). The palette is not configurable so map
/// artifacts stay byte-comparable across runs.
pub fn export_png<P: AsRef<Path>>(map: &ClassMap, path: P) -> Result<(), RasterError> {
    if map.height == 0 || map.width == 0 {
        return Err(RasterError::ZeroExtent);
    }
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for row in 0..map.height {
        for col in 0..map.width {
            let rgb = match map.get(row, col) {
                NON_FOREST => [210, 180, 140],
                FOREST => [0, 100, 0],
                _ => [128, 128, 128],
            };
            img.put_pixel(col as u32, row as u32, image::Rgb(rgb));
        }
    }
    img.save(path.as_ref())
        .map_err(|e| RasterError::Io(std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster1(vals: &[f32]) -> Raster {
        Raster::new(1, 1, vals.len(), vals.to_vec(), f32::NAN).unwrap()
    }

    #[test]
    fn median_odd_count() {
        let stack = [raster1(&[3.0]), raster1(&[1.0]), raster1(&[2.0])];
        assert_eq!(median_composite(&stack).unwrap().data, vec![2.0]);
    }

    #[test]
    fn median_even_count_means_middles() {
        let stack = [raster1(&[1.0]), raster1(&[3.0])];
        assert_eq!(median_composite(&stack).unwrap().data, vec![2.0]);
    }

    #[test]
    fn median_skips_nodata() {
        let stack = [raster1(&[1.0]), raster1(&[f32::NAN]), raster1(&[5.0])];
        assert_eq!(median_composite(&stack).unwrap().data, vec![3.0]);
    }

    #[test]
    fn median_all_nodata_stays_nodata() {
        let stack = [raster1(&[f32::NAN]), raster1(&[f32::NAN])];
        assert!(median_composite(&stack).unwrap().data[0].is_nan());
    }

    #[test]
    fn median_empty_stack_errors() {
        assert!(matches!(median_composite(&[]), Err(RasterError::EmptyStack)));
    }

    #[test]
    fn median_mismatched_dims_error() {
        let stack = [raster1(&[1.0]), raster1(&[1.0, 2.0])];
        assert!(matches!(
            median_composite(&stack),
            Err(RasterError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn median_single_raster_is_identity() {
        let r = raster1(&[4.0, -2.5, 7.0]);
        assert_eq!(median_composite(std::slice::from_ref(&r)).unwrap(), r);
    }

    #[test]
    fn wslr_round_trip_with_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wslr");
        let mut data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        data[7] = f32::NAN;
        let r = Raster::new(2, 3, 4, data, f32::NAN).unwrap();
        write_raster(&r, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back.bands, 2);
        assert_eq!(back.height, 3);
        assert_eq!(back.width, 4);
        for (a, b) in r.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(r.nodata.to_bits(), back.nodata.to_bits());
    }

    #[test]
    fn wslr_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wslr");
        std::fs::write(&path, b"XXXXrestoffile_what_ever_this_is").unwrap();
        assert!(matches!(read_raster(&path), Err(RasterError::BadMagic(_))));
    }

    #[test]
    fn wslr_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wslr");
        let r = Raster::new(1, 2, 5, vec![1.0; 10], f32::NAN).unwrap();
        write_raster(&r, &path).unwrap();
        // drop the last 4 bytes: header declares 10 floats, file holds 9
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_raster(&path),
            Err(RasterError::Truncated { .. })
        ));
    }

    #[test]
    fn class_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wslr");
        let m = ClassMap::new(2, 2, vec![0, 1, 255, 1]).unwrap();
        write_class_map(&m, &path).unwrap();
        assert_eq!(read_class_map(&path).unwrap(), m);
    }

    #[test]
    fn class_map_rejects_bad_code() {
        assert!(matches!(
            ClassMap::new(1, 2, vec![0, 7]),
            Err(RasterError::InvalidCode(7))
        ));
    }

    #[test]
    fn png_palette() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = ClassMap::new(1, 3, vec![0, 1, 255]).unwrap();
        export_png(&m, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0).0, [210, 180, 140]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 100, 0]);
        assert_eq!(img.get_pixel(2, 0).0, [128, 128, 128]);
    }

    #[test]
    fn png_rejects_empty_map() {
        let m = ClassMap {
            height: 0,
            width: 0,
            values: vec![],
        };
        assert!(export_png(&m, "/tmp/never_written.png").is_err());
    }
}
