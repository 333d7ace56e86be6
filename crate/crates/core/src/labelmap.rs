//! Tissue label maps: file ingestion, geometric augmentation and ground-truth masks.
//!
//! Rows run along the depth axis (row 0 touches the transducer) and every column is
//! one scanline.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryGrid;

/// Largest number of distinct tissues an 8-bit label image can carry.
pub const MAX_LABELS: usize = 256;

/// On-disk encodings accepted for label maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelFormat {
    Pgm8,
    Png8,
    Csv,
}

impl LabelFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(LabelFormat::Pgm8),
            "png" => Some(LabelFormat::Png8),
            "csv" | "txt" => Some(LabelFormat::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    num_labels: usize,
    /// Value each dense id had in the source file.
    source_values: Vec<i64>,
    label_names: Vec<String>,
}

impl LabelMap {
    /// Build a map whose cells are already dense ids in `0..num_labels`.
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_labels: usize) -> Result<Self> {
        if height < 2 || width < 1 {
            return Err(Error::LabelMap(format!(
                "size {height}x{width}: need height >= 2 and width >= 1"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::LabelMap(format!(
                "{} cells for a {height}x{width} map",
                labels.len()
            )));
        }
        if num_labels == 0 || num_labels > MAX_LABELS {
            return Err(Error::LabelMap(format!(
                "label count {num_labels} outside 1..={MAX_LABELS}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::LabelMap(format!(
                "label id {bad} out of range for {num_labels} labels"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            num_labels,
            source_values: (0..num_labels as i64).collect(),
            label_names: (0..num_labels).map(|i| i.to_string()).collect(),
        })
    }

    /// Densify arbitrary integer values: the sorted distinct values become ids `0..K`.
    pub fn from_values(height: usize, width: usize, values: &[i64]) -> Result<Self> {
        let distinct: BTreeSet<i64> = values.iter().copied().collect();
        if distinct.len() > MAX_LABELS {
            return Err(Error::LabelMap(format!(
                "{} distinct labels, at most {MAX_LABELS} supported",
                distinct.len()
            )));
        }
        let source_values: Vec<i64> = distinct.into_iter().collect();
        let labels = values
            .iter()
            .map(|v| source_values.binary_search(v).expect("value in set") as u8)
            .collect();
        let mut map = Self::new(height, width, labels, source_values.len())?;
        map.label_names = source_values.iter().map(|v| v.to_string()).collect();
        map.source_values = source_values;
        Ok(map)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_labels {
            return Err(Error::LabelMap(format!(
                "{} names for {} labels",
                names.len(),
                self.num_labels
            )));
        }
        self.label_names = names;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of tissue ids `K`; every cell is in `0..K`.
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    /// Source-file value for each dense id (the densification record).
    pub fn source_values(&self) -> &[i64] {
        &self.source_values
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// Ids that occur at least once.
    pub fn present_labels(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    /// Count of pixels per label id.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Same map with the tissue ids renamed by `perm` (new id = `perm[old id]`).
    pub fn relabel(&self, perm: &[u8]) -> Result<Self> {
        if perm.len() != self.num_labels {
            return Err(Error::LabelMap(format!(
                "permutation of length {} for {} labels",
                perm.len(),
                self.num_labels
            )));
        }
        let labels = self.labels.iter().map(|&l| perm[l as usize]).collect();
        Self::new(self.height, self.width, labels, self.num_labels)
    }
}

/// Load a label map and densify its values.
pub fn load_labelmap(path: &Path, format: LabelFormat) -> Result<LabelMap> {
    let (h, w, values) = read_values(path, format)?;
    LabelMap::from_values(h, w, &values).map_err(|e| Error::parse(path, e.to_string()))
}

/// Load a label map whose pixel values already are ids in `0..num_labels`.
///
/// Used for maps written by this crate, where some ids may be absent
/// (e.g. cropped away by augmentation) and densifying would shift them.
pub fn load_labelmap_ids(path: &Path, format: LabelFormat, num_labels: usize) -> Result<LabelMap> {
    let (h, w, values) = read_values(path, format)?;
    let labels = values
        .iter()
        .map(|&v| {
            u8::try_from(v)
                .map_err(|_| Error::parse(path, format!("label value {v} is not an 8-bit id")))
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(h, w, labels, num_labels).map_err(|e| Error::parse(path, e.to_string()))
}

/// Write the dense ids of `map`.
pub fn save_labelmap(map: &LabelMap, path: &Path, format: LabelFormat) -> Result<()> {
    let bytes = match format {
        LabelFormat::Pgm8 => {
            let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
            out.extend_from_slice(&map.labels);
            out
        }
        LabelFormat::Png8 => {
            let img = image::GrayImage::from_raw(map.width as u32, map.height as u32, map.labels.clone())
                .expect("buffer size");
            let mut buf = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
                .map_err(|e| Error::parse(path, e.to_string()))?;
            buf
        }
        LabelFormat::Csv => {
            let mut out = Vec::new();
            for row in map.labels.chunks(map.width) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(",")).expect("write to vec");
            }
            out
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_values(path: &Path, format: LabelFormat) -> Result<(usize, usize, Vec<i64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        LabelFormat::Pgm8 => parse_pgm(&bytes).map_err(|m| Error::parse(path, m)),
        LabelFormat::Png8 => {
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::parse(path, e.to_string()))?;
            let gray = match img {
                image::DynamicImage::ImageLuma8(g) => g,
                other => {
                    return Err(Error::parse(
                        path,
                        format!("expected 8-bit grayscale PNG, found {:?}", other.color()),
                    ))
                }
            };
            let (w, h) = gray.dimensions();
            let values = gray.into_raw().into_iter().map(i64::from).collect();
            Ok((h as usize, w as usize, values))
        }
        LabelFormat::Csv => parse_csv(&bytes).map_err(|m| Error::parse(path, m)),
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<i64>), String> {
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(format!("unsupported PGM magic {magic:?}, expected P5"));
    }
    let number = |pos: &mut usize, what: &str| -> std::result::Result<usize, String> {
        let tok = next_token(pos)?;
        tok.parse()
            .map_err(|_| format!("bad PGM {what} {tok:?}"))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("PGM maxval {maxval} is not 8-bit"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + width * height).ok_or("truncated PGM raster")?;
    Ok((height, width, raster.iter().map(|&b| b as i64).collect()))
}

fn parse_csv(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<i64>), String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        if width.is_some_and(|w| w != record.len()) {
            return Err(format!("row {row} has {} cells, expected {}", record.len(), width.unwrap()));
        }
        width = Some(record.len());
        for (col, cell) in record.iter().enumerate() {
            let v: i64 = cell
                .parse()
                .map_err(|_| format!("non-integer label {cell:?} at row {row}, column {col}"))?;
            values.push(v);
        }
        height += 1;
    }
    Ok((height, width.unwrap_or(0), values))
}

/// Ranges from which one similarity transform is drawn per augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub rotation_deg: [f64; 2],
    pub translation_x_px: [f64; 2],
    pub translation_y_px: [f64; 2],
    pub scale: [f64; 2],
    pub fill_label: u8,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: [-15.0, 15.0],
            translation_x_px: [-10.0, 10.0],
            translation_y_px: [-10.0, 10.0],
            scale: [0.9, 1.1],
            fill_label: 0,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// All ranges collapsed to the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0, 0.0],
            translation_x_px: [0.0, 0.0],
            translation_y_px: [0.0, 0.0],
            scale: [1.0, 1.0],
            fill_label: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("translation_x_px", self.translation_x_px),
            ("translation_y_px", self.translation_y_px),
            ("scale", self.scale),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!("augment.{name}: invalid range [{lo}, {hi}]")));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Config(format!(
                "augment.scale: range must be strictly positive, got [{}, {}]",
                self.scale[0], self.scale[1]
            )));
        }
        if self.fill_label as usize >= num_labels {
            return Err(Error::Config(format!(
                "augment.fill_label: {} is not a valid id for {num_labels} labels",
                self.fill_label
            )));
        }
        Ok(())
    }
}

/// One sampled similarity transform. Applied as scale, then rotation, then
/// translation, all about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub rotation_deg: f64,
    pub translation_x_px: f64,
    pub translation_y_px: f64,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation_deg: 0.0,
        translation_x_px: 0.0,
        translation_y_px: 0.0,
        scale: 1.0,
    };
}

fn sample_range(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_transform(spec: &AugmentSpec, seed: u64) -> Transform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Transform {
        rotation_deg: sample_range(&mut rng, spec.rotation_deg),
        translation_x_px: sample_range(&mut rng, spec.translation_x_px),
        translation_y_px: sample_range(&mut rng, spec.translation_y_px),
        scale: sample_range(&mut rng, spec.scale),
    }
}

/// Resample `map` under `t` by inverse mapping with nearest-neighbor lookup.
///
/// Positive rotation turns the content counter-clockwise as displayed (y down).
pub fn apply_transform(map: &LabelMap, t: &Transform, fill_label: u8) -> LabelMap {
    let (h, w) = map.shape();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let px = c as f64 + 0.5 - cx - t.translation_x_px;
            let py = r as f64 + 0.5 - cy - t.translation_y_px;
            let qx = (cos * px - sin * py) / t.scale + cx;
            let qy = (sin * px + cos * py) / t.scale + cy;
            let (sc, sr) = (qx.floor(), qy.floor());
            let label = if sc >= 0.0 && sr >= 0.0 && (sc as usize) < w && (sr as usize) < h {
                map.get(sr as usize, sc as usize)
            } else {
                fill_label
            };
            labels.push(label);
        }
    }
    LabelMap {
        labels,
        ..map.clone()
    }
}

/// Draw one transform from `spec` using `seed` and apply it.
pub fn augment(map: &LabelMap, spec: &AugmentSpec, seed: u64) -> Result<LabelMap> {
    spec.validate(map.num_labels())?;
    let t = sample_transform(spec, seed);
    Ok(apply_transform(map, &t, spec.fill_label))
}

/// Binary mask of the pixels carrying `target`.
pub fn gt_mask(map: &LabelMap, target: u8) -> Result<BinaryGrid> {
    if target as usize >= map.num_labels() {
        return Err(Error::LabelMap(format!(
            "unknown target label {target} (map has {} labels)",
            map.num_labels()
        )));
    }
    let values = map.labels.iter().map(|&l| u8::from(l == target)).collect();
    Ok(BinaryGrid::new(map.height, map.width, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn loads_small_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "a.pgm", b"P5\n2 2\n255\n\x00\x00\x01\x01");
        let m = load_labelmap(&p, LabelFormat::Pgm8).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.num_labels(), 2);
        assert_eq!(m.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn pgm_with_comment_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "a.pgm", b"P5\n# made by hand\n1 2\n255\n\x03\x04");
        let m = load_labelmap(&p, LabelFormat::Pgm8).unwrap();
        assert_eq!(m.shape(), (2, 1));
        assert_eq!(m.source_values(), &[3, 4]);
    }

    #[test]
    fn sparse_values_are_densified() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "s.pgm", b"P5\n2 2\n255\n\x00\x07\x07\x00");
        let m = load_labelmap(&p, LabelFormat::Pgm8).unwrap();
        assert_eq!(m.num_labels(), 2);
        assert_eq!(m.labels(), &[0, 1, 1, 0]);
        assert_eq!(m.source_values(), &[0, 7]);
        assert_eq!(m.label_names()[1], "7");
    }

    #[test]
    fn csv_non_integer_cell_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "bad.csv", b"0,1\n1,2.5\n");
        let err = load_labelmap(&p, LabelFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("non-integer label"), "{err}");
    }

    #[test]
    fn csv_ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "bad.csv", b"0,1\n1\n");
        assert!(load_labelmap(&p, LabelFormat::Csv).is_err());
    }

    #[test]
    fn too_many_labels() {
        let dir = tempfile::tempdir().unwrap();
        let row: Vec<String> = (0..300).map(|v| v.to_string()).collect();
        let text = format!("{}\n{}\n", row.join(","), row.join(","));
        let p = write_tmp(&dir, "many.csv", text.as_bytes());
        let err = load_labelmap(&p, LabelFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("at most 256"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_labelmap(Path::new("/nonexistent/x.pgm"), LabelFormat::Pgm8).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn rejects_tiny_maps() {
        assert!(LabelMap::new(1, 3, vec![0; 3], 1).is_err());
        assert!(LabelMap::new(2, 0, vec![], 1).is_err());
    }

    #[test]
    fn save_load_round_trip_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMap::new(3, 4, vec![0, 1, 2, 2, 1, 1, 0, 0, 2, 2, 2, 1], 3).unwrap();
        for (fmt, name) in [
            (LabelFormat::Pgm8, "m.pgm"),
            (LabelFormat::Png8, "m.png"),
            (LabelFormat::Csv, "m.csv"),
        ] {
            let p = dir.path().join(name);
            save_labelmap(&m, &p, fmt).unwrap();
            assert_eq!(load_labelmap(&p, fmt).unwrap(), m, "{name}");
            assert_eq!(load_labelmap_ids(&p, fmt, 3).unwrap(), m, "{name}");
        }
    }

    #[test]
    fn identity_augment_is_identity() {
        let m = LabelMap::new(3, 5, (0..15).map(|i| (i % 4) as u8).collect(), 4).unwrap();
        assert_eq!(augment(&m, &AugmentSpec::identity(), 99).unwrap(), m);
    }

    #[test]
    fn rotate_2x2_by_90_degrees() {
        // [[a, b], [c, d]] turned counter-clockwise becomes [[b, d], [a, c]]
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 3], 4).unwrap();
        let spec = AugmentSpec {
            rotation_deg: [90.0, 90.0],
            ..AugmentSpec::identity()
        };
        let out = augment(&m, &spec, 1).unwrap();
        assert_eq!(out.labels(), &[1, 3, 0, 2]);
    }

    #[test]
    fn translation_exposes_fill_label() {
        let m = LabelMap::new(2, 3, vec![1, 1, 1, 1, 1, 1], 3).unwrap();
        let spec = AugmentSpec {
            translation_x_px: [1.0, 1.0],
            fill_label: 2,
            ..AugmentSpec::identity()
        };
        let out = augment(&m, &spec, 0).unwrap();
        assert_eq!(out.labels(), &[2, 1, 1, 2, 1, 1]);
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let m = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect(), 3).unwrap();
        let spec = AugmentSpec::default();
        assert_eq!(augment(&m, &spec, 5).unwrap(), augment(&m, &spec, 5).unwrap());
        assert_ne!(sample_transform(&spec, 5), sample_transform(&spec, 6));
    }

    #[test]
    fn invalid_specs() {
        let m = LabelMap::new(2, 2, vec![0; 4], 2).unwrap();
        let bad_scale = AugmentSpec {
            scale: [0.0, 1.0],
            ..AugmentSpec::identity()
        };
        assert!(augment(&m, &bad_scale, 0).is_err());
        let inverted = AugmentSpec {
            rotation_deg: [5.0, -5.0],
            ..AugmentSpec::identity()
        };
        assert!(augment(&m, &inverted, 0).is_err());
        let bad_fill = AugmentSpec {
            fill_label: 2,
            ..AugmentSpec::identity()
        };
        assert!(augment(&m, &bad_fill, 0).is_err());
    }

    #[test]
    fn gt_mask_cases() {
        let m = LabelMap::new(2, 2, vec![0, 1, 1, 0], 3).unwrap();
        assert_eq!(gt_mask(&m, 1).unwrap().values(), &[0, 1, 1, 0]);
        assert_eq!(gt_mask(&m, 2).unwrap().count_ones(), 0);
        assert!(gt_mask(&m, 3).is_err());
    }

    fn arb_map() -> impl Strategy<Value = LabelMap> {
        (2usize..10, 1usize..10, 1usize..6).prop_flat_map(|(h, w, k)| {
            proptest::collection::vec(0..k as u8, h * w)
                .prop_map(move |labels| LabelMap::new(h, w, labels, k).unwrap())
        })
    }

    proptest! {
        #[test]
        fn augment_never_invents_labels(map in arb_map(), seed in any::<u64>()) {
            let spec = AugmentSpec { rotation_deg: [-180.0, 180.0], scale: [0.5, 2.0], ..AugmentSpec::default() };
            let out = augment(&map, &spec, seed).unwrap();
            let mut allowed = map.present_labels();
            allowed.insert(spec.fill_label);
            prop_assert!(out.present_labels().is_subset(&allowed));
        }

        #[test]
        fn identity_spec_is_identity(map in arb_map(), seed in any::<u64>()) {
            prop_assert_eq!(augment(&map, &AugmentSpec::identity(), seed).unwrap(), map);
        }

        #[test]
        fn masks_partition_the_map(map in arb_map()) {
            let mut total = vec![0u8; map.labels().len()];
            for t in 0..map.num_labels() {
                for (acc, v) in total.iter_mut().zip(gt_mask(&map, t as u8).unwrap().values()) {
                    *acc += v;
                }
            }
            prop_assert!(total.iter().all(|&v| v == 1));
        }
    }
}
