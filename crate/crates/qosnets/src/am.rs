//! Behavioral models of 8x8-bit unsigned approximate multipliers.
//!
//! A multiplier is a 65536-entry lookup table over all operand pairs plus a
//! relative power figure. The accurate multiplier is always synthesized and
//! always sits at library index 0, so every pipeline has an exact baseline
//! and a 100%-power reference.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Operand bit width. Only 8x8-bit unsigned multipliers are modeled.
pub const BITWIDTH: u8 = 8;
/// Number of LUT entries: one per (a, b) operand pair.
pub const LUT_LEN: usize = 1 << (2 * BITWIDTH as usize);

const MAGIC: &[u8; 6] = b"AMLUT1";
/// Canonical name of the synthesized exact multiplier.
pub const ACCURATE_NAME: &str = "accurate";

/// Behavioral model of one approximate multiplier.
#[derive(Debug, Clone)]
pub struct AmModel {
    name: String,
    lut: Box<[u16]>,
    relative_power: f64,
}

impl AmModel {
    /// Build a model from a raw LUT. Entry `a * 256 + b` must hold the
    /// approximate product of unsigned codes `a` and `b`.
    pub fn new(name: impl Into<String>, lut: Vec<u16>, relative_power: f64) -> Result<Self> {
        if lut.len() != LUT_LEN {
            return Err(Error::InvalidArgument(format!(
                "LUT must have {} entries, got {}",
                LUT_LEN,
                lut.len()
            )));
        }
        if !(relative_power > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "relative_power must be positive, got {relative_power}"
            )));
        }
        Ok(AmModel {
            name: name.into(),
            lut: lut.into_boxed_slice(),
            relative_power,
        })
    }

    /// The exact multiplier: `lut(a, b) = a * b`, relative power 1.0.
    pub fn accurate() -> Self {
        let mut lut = vec![0u16; LUT_LEN];
        for a in 0..256u32 {
            for b in 0..256u32 {
                lut[(a as usize) << 8 | b as usize] = (a * b) as u16;
            }
        }
        AmModel {
            name: ACCURATE_NAME.to_string(),
            lut: lut.into_boxed_slice(),
            relative_power: 1.0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn relative_power(&self) -> f64 {
        self.relative_power
    }

    /// Approximate product of operand codes `a` and `b`.
    #[inline(always)]
    pub fn mul(&self, a: u8, b: u8) -> u16 {
        self.lut[(a as usize) << 8 | b as usize]
    }

    pub fn lut(&self) -> &[u16] {
        &self.lut
    }

    /// True iff the LUT reproduces every exact product.
    pub fn is_accurate(&self) -> bool {
        (0..256u32).all(|a| (0..256u32).all(|b| self.mul(a as u8, b as u8) as u32 == a * b))
    }

    /// Serialize to the `.amlut` binary format (see the file-formats chapter
    /// of the guide). The file stem on load becomes the model name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(6 + 1 + 8 + 2 * LUT_LEN);
        bytes.extend_from_slice(MAGIC);
        bytes.push(BITWIDTH);
        bytes.extend_from_slice(&self.relative_power.to_le_bytes());
        for &entry in self.lut.iter() {
            bytes.extend_from_slice(&entry.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Load one model from an `.amlut` file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |reason: &str| Error::AmFormat {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 15 || &bytes[..6] != MAGIC {
            return Err(fail("bad magic"));
        }
        if bytes[6] != BITWIDTH {
            return Err(fail(&format!("unsupported bitwidth {}", bytes[6])));
        }
        let relative_power = f64::from_le_bytes(bytes[7..15].try_into().unwrap());
        let body = &bytes[15..];
        if body.len() != 2 * LUT_LEN {
            return Err(fail("truncated LUT"));
        }
        let lut: Vec<u16> = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| fail("file name is not valid UTF-8"))?
            .to_string();
        AmModel::new(name, lut, relative_power)
    }
}

/// Ordered collection of multipliers. The position of a model is its column
/// index in the error matrix; index 0 is always the accurate multiplier.
#[derive(Debug, Clone)]
pub struct AmLibrary {
    models: Vec<AmModel>,
}

impl AmLibrary {
    /// Library holding only the accurate multiplier.
    pub fn accurate_only() -> Self {
        AmLibrary {
            models: vec![AmModel::accurate()],
        }
    }

    /// Build a library from approximate models; the accurate instance is
    /// synthesized and prepended, the rest are sorted by name.
    pub fn from_models(mut approx: Vec<AmModel>) -> Result<Self> {
        approx.sort_by(|a, b| a.name.cmp(&b.name));
        let mut models = vec![AmModel::accurate()];
        models.extend(approx);
        for pair in models.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(Error::DuplicateAm(pair[1].name.clone()));
            }
        }
        if models.iter().skip(1).any(|m| m.name == ACCURATE_NAME) {
            return Err(Error::DuplicateAm(ACCURATE_NAME.to_string()));
        }
        Ok(AmLibrary { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[AmModel] {
        &self.models
    }

    pub fn get(&self, index: usize) -> &AmModel {
        &self.models[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }
}

/// Load every `.amlut` file under `directory` into a library.
///
/// The accurate instance is always synthesized and placed at index 0; loaded
/// models follow in name order. An empty (or missing extension) directory
/// yields the accurate-only library.
pub fn load_am_library(directory: &Path) -> Result<AmLibrary> {
    let entries = fs::read_dir(directory).map_err(|e| Error::io(directory, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "amlut"))
        .collect();
    paths.sort();
    let mut models = Vec::with_capacity(paths.len());
    for path in &paths {
        models.push(AmModel::load(path)?);
    }
    AmLibrary::from_models(models)
}

/// Truncation multiplier: both operands have their low `k` bits zeroed
/// before an exact multiply. `relative_power = ((8 - k) / 8)^2`, a quadratic
/// area proxy for the shrunken partial-product array.
pub fn make_truncation_am(k: u32) -> Result<AmModel> {
    if k > 7 {
        return Err(Error::InvalidArgument(format!(
            "truncation bits must be in 0..=7, got {k}"
        )));
    }
    let mask = (0xFFu32 << k) & 0xFF;
    let mut lut = vec![0u16; LUT_LEN];
    for a in 0..256u32 {
        for b in 0..256u32 {
            lut[(a as usize) << 8 | b as usize] = ((a & mask) * (b & mask)) as u16;
        }
    }
    let rp = ((8 - k) as f64 / 8.0).powi(2);
    AmModel::new(format!("trunc{k}"), lut, rp)
}

/// Signed error of a model against the exact product, per operand pair.
#[derive(Debug, Clone)]
pub struct ErrorSurface {
    err: Box<[i32]>,
}

impl ErrorSurface {
    #[inline(always)]
    pub fn at(&self, a: u8, b: u8) -> i32 {
        self.err[(a as usize) << 8 | b as usize]
    }

    pub fn values(&self) -> &[i32] {
        &self.err
    }

    pub fn is_zero(&self) -> bool {
        self.err.iter().all(|&e| e == 0)
    }
}

/// `err(a, b) = lut(a, b) - a * b` for all 65536 operand pairs.
pub fn error_surface(am: &AmModel) -> ErrorSurface {
    let mut err = vec![0i32; LUT_LEN];
    for a in 0..256u32 {
        for b in 0..256u32 {
            let idx = (a as usize) << 8 | b as usize;
            err[idx] = am.lut()[idx] as i32 - (a * b) as i32;
        }
    }
    ErrorSurface {
        err: err.into_boxed_slice(),
    }
}

/// Error statistics of a model over the uniform distribution of all operand
/// pairs: `(mean, population std, max |err|)`.
pub fn am_summary(am: &AmModel) -> (f64, f64, u32) {
    let surface = error_surface(am);
    let n = LUT_LEN as f64;
    let mut sum = 0.0;
    let mut max_abs = 0u32;
    for &e in surface.values() {
        sum += e as f64;
        max_abs = max_abs.max(e.unsigned_abs());
    }
    let mean = sum / n;
    let var = surface
        .values()
        .iter()
        .map(|&e| (e as f64 - mean) * (e as f64 - mean))
        .sum::<f64>()
        / n;
    (mean, var.sqrt(), max_abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn accurate_is_exact_everywhere() {
        let am = AmModel::accurate();
        assert!(am.is_accurate());
        assert_eq!(am.relative_power(), 1.0);
        assert!(error_surface(&am).is_zero());
        assert_eq!(am_summary(&am), (0.0, 0.0, 0));
    }

    #[test]
    fn trunc0_matches_accurate() {
        let t0 = make_truncation_am(0).unwrap();
        assert!(t0.is_accurate());
        assert_eq!(t0.relative_power(), 1.0);
    }

    #[test]
    fn trunc2_spot_values() {
        let t2 = make_truncation_am(2).unwrap();
        // a=7 -> 4, b=9 -> 8 after masking the low two bits.
        assert_eq!(t2.mul(7, 9), 32);
        assert_eq!(error_surface(&t2).at(7, 9), 32 - 63);
        assert_eq!(t2.relative_power(), 0.5625);
    }

    #[test]
    fn trunc1_spot_value() {
        let t1 = make_truncation_am(1).unwrap();
        assert_eq!(t1.mul(3, 3), 4);
        assert_eq!(error_surface(&t1).at(3, 3), -5);
    }

    #[test]
    fn truncation_out_of_range_rejected() {
        assert!(make_truncation_am(8).is_err());
    }

    #[test]
    fn truncation_surfaces_nonpositive() {
        // Masking operands can only shrink an unsigned product.
        for k in 0..=7 {
            let am = make_truncation_am(k).unwrap();
            let surface = error_surface(&am);
            assert!(
                surface.values().iter().all(|&e| e <= 0),
                "trunc{k} has a positive error"
            );
        }
    }

    #[test]
    fn lut_identity_holds_exactly() {
        let am = make_truncation_am(3).unwrap();
        let surface = error_surface(&am);
        for a in 0..256u32 {
            for b in 0..256u32 {
                let exact = (a * b) as i64;
                let approx = am.mul(a as u8, b as u8) as i64;
                assert_eq!(approx, exact + surface.at(a as u8, b as u8) as i64);
            }
        }
    }

    #[test]
    fn truncation_mean_abs_error_is_monotone() {
        let mut prev = -1.0;
        for k in 0..=7 {
            let am = make_truncation_am(k).unwrap();
            let surface = error_surface(&am);
            let mean_abs = surface.values().iter().map(|&e| e.abs() as f64).sum::<f64>()
                / LUT_LEN as f64;
            assert!(
                mean_abs >= prev,
                "mean |err| decreased from trunc{} to trunc{k}",
                k.max(1) - 1
            );
            prev = mean_abs;
        }
    }

    #[test]
    fn summary_matches_bruteforce() {
        // Independent single-pass enumeration over all operand pairs.
        let am = make_truncation_am(2).unwrap();
        let mut n = 0.0;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut max_abs = 0i64;
        for a in 0..256u32 {
            for b in 0..256u32 {
                let e = am.mul(a as u8, b as u8) as i64 - (a * b) as i64;
                n += 1.0;
                sum += e as f64;
                sum_sq += (e * e) as f64;
                max_abs = max_abs.max(e.abs());
            }
        }
        let mean = sum / n;
        let std = (sum_sq / n - mean * mean).sqrt();
        let (m, s, x) = am_summary(&am);
        assert!((m - mean).abs() < 1e-9);
        assert!((s - std).abs() < 1e-6);
        assert_eq!(x as i64, max_abs);
    }

    #[test]
    fn trunc7_max_error_matches_masked_products() {
        let am = make_truncation_am(7).unwrap();
        let mut expected = 0i64;
        for a in 0..256i64 {
            for b in 0..256i64 {
                let masked = (a & 0x80) * (b & 0x80);
                expected = expected.max((masked - a * b).abs());
            }
        }
        let (_, _, max_abs) = am_summary(&am);
        assert_eq!(max_abs as i64, expected);
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let am = make_truncation_am(3).unwrap();
        let path = dir.path().join("trunc3.amlut");
        am.save(&path).unwrap();
        let loaded = AmModel::load(&path).unwrap();
        assert_eq!(loaded.name(), "trunc3");
        assert_eq!(loaded.lut(), am.lut());
        assert_eq!(loaded.relative_power(), am.relative_power());
    }

    #[test]
    fn load_library_from_directory() {
        let dir = tempdir().unwrap();
        // Empty directory: accurate only.
        let lib = load_am_library(dir.path()).unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.get(0).name(), ACCURATE_NAME);

        make_truncation_am(2)
            .unwrap()
            .save(&dir.path().join("trunc2.amlut"))
            .unwrap();
        let lib = load_am_library(dir.path()).unwrap();
        assert_eq!(lib.len(), 2);
        assert_eq!(lib.get(1).name(), "trunc2");
    }

    #[test]
    fn truncated_lut_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.amlut");
        let am = make_truncation_am(1).unwrap();
        am.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2); // drop one LUT entry
        std::fs::write(&path, bytes).unwrap();
        match AmModel::load(&path) {
            Err(Error::AmFormat { reason, .. }) => assert!(reason.contains("truncated LUT")),
            other => panic!("expected truncated-LUT error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bitwidth_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.amlut");
        std::fs::write(&path, b"NOTLUT").unwrap();
        assert!(matches!(AmModel::load(&path), Err(Error::AmFormat { .. })));

        let path = dir.path().join("wide.amlut");
        let am = make_truncation_am(1).unwrap();
        am.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] = 16;
        std::fs::write(&path, bytes).unwrap();
        match AmModel::load(&path) {
            Err(Error::AmFormat { reason, .. }) => assert!(reason.contains("bitwidth")),
            other => panic!("expected bitwidth error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_conflict() {
        let a = make_truncation_am(1).unwrap();
        let b = make_truncation_am(1).unwrap();
        assert!(matches!(
            AmLibrary::from_models(vec![a, b]),
            Err(Error::DuplicateAm(_))
        ));
    }
}
