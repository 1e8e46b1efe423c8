//! Image and noise-map persistence, plus the dataset directory layout.
//!
//! ```text
//! <root>/noisy/*.png          training / evaluation inputs
//! <root>/clean/*.png          optional references, matched by file name
//! <root>/maps/<stem>_dep.cvfr, <stem>_indep.cvfr   optional true noise maps
//! ```
//!
//! Float maps (`.cvfr`) are little-endian: magic `CVFR`, `u32` version (1),
//! `c, h, w` as `u32`, then `c*h*w` `f32` values in row-major order.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::noise::GroundTruthTriple;
use crate::tensor::{Real, Shape, Tensor};

const FLOAT_MAP_MAGIC: &[u8; 4] = b"CVFR";
const FLOAT_MAP_VERSION: u32 = 1;
pub const FLOAT_MAP_HEADER_LEN: usize = 20;

fn read_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Read {
        path: path.to_path_buf(),
        source,
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(write_err(path))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        write_err(path)(e)
    })
}

/// Decodes an 8-bit RGB PNG into a `(1, 3, h, w)` tensor with values `v / 255`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "unsupported png bit depth {} (only 8-bit RGB is accepted)",
            info.bit_depth as u8
        )));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::Format(format!(
            "unsupported png color type {:?} (only 8-bit RGB is accepted)",
            info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png data: {e}")))?;
    let stride = frame.line_size;
    let shape = Shape::new(1, 3, h, w);
    Ok(Tensor::from_fn(shape, |_, c, y, x| {
        buf[y * stride + x * 3 + c] as f32 / 255.0
    }))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(read_err(path))?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Format(msg) if msg.starts_with("png data") => Error::Read {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::UnexpectedEof, msg),
        },
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn quantize<T: Real>(v: T) -> u8 {
    let v = v.as_f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn encode_png<T: Real>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let s = tensor.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Dimension(format!(
            "image export needs shape (1, 3, h, w), got {s}"
        )));
    }
    let mut rgb = Vec::with_capacity(s.len());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                rgb.push(quantize(tensor.at(0, c, y, x)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), s.w as u32, s.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        writer.finish().map_err(|e| Error::Format(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn save_image<T: Real>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_png(tensor)?)
}

/// Rescales a map so that its minimum becomes 0 and its maximum 1.
pub fn min_max_normalize<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v.as_f64()), hi.max(v.as_f64()))
    });
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| T::from_f64_lossy((v.as_f64() - lo) / span))
}

pub fn float_map_bytes<T: Real>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let s = tensor.shape();
    if s.n != 1 {
        return Err(Error::Dimension(format!("float map needs batch 1, got {s}")));
    }
    tensor.check_finite("float map")?;
    let mut out = Vec::with_capacity(FLOAT_MAP_HEADER_LEN + s.len() * 4);
    out.extend_from_slice(FLOAT_MAP_MAGIC);
    out.extend_from_slice(&FLOAT_MAP_VERSION.to_le_bytes());
    for d in [s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn float_map_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < FLOAT_MAP_HEADER_LEN {
        return Err(Error::Format(format!(
            "float map header needs {FLOAT_MAP_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != FLOAT_MAP_MAGIC {
        return Err(Error::Format("float map magic is not CVFR".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != FLOAT_MAP_VERSION {
        return Err(Error::Format(format!("unsupported float map version {version}")));
    }
    let shape = Shape::new(1, word(2) as usize, word(3) as usize, word(4) as usize);
    let payload = &bytes[FLOAT_MAP_HEADER_LEN..];
    if payload.len() != shape.len() * 4 {
        return Err(Error::Format(format!(
            "float map payload is {} bytes, shape {shape} needs {}",
            payload.len(),
            shape.len() * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save_float_map<T: Real>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    atomic_write(path, &float_map_bytes(tensor)?)
}

pub fn load_float_map(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(read_err(path))?;
    float_map_from_bytes(&bytes)
}

/// One image of a dataset. Reference data is reachable only through
/// [`Dataset`], which counts every access.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    noisy: Tensor<f32>,
    clean: Option<Tensor<f32>>,
    gt_maps: Option<GroundTruthTriple<f32>>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, noisy: Tensor<f32>) -> Self {
        Self {
            id: id.into(),
            noisy,
            clean: None,
            gt_maps: None,
        }
    }

    pub fn with_clean(mut self, clean: Tensor<f32>) -> Self {
        self.clean = Some(clean);
        self
    }

    pub fn with_ground_truth(mut self, gt: GroundTruthTriple<f32>) -> Self {
        self.clean = Some(gt.clean.clone());
        self.gt_maps = Some(gt);
        self
    }

    pub fn noisy(&self) -> &Tensor<f32> {
        &self.noisy
    }
}

#[derive(Debug, Default)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    ground_truth_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self::new(self.records.clone())
    }
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Self {
            records,
            ground_truth_reads: AtomicUsize::new(0),
        }
    }

    /// A dataset of noisy images only.
    pub fn from_noisy(images: Vec<(String, Tensor<f32>)>) -> Self {
        Self::new(images.into_iter().map(|(id, t)| ImageRecord::new(id, t)).collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.records[i].id
    }

    pub fn noisy(&self, i: usize) -> &Tensor<f32> {
        &self.records[i].noisy
    }

    pub fn noisy_images(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.records.iter().map(|r| &r.noisy)
    }

    pub fn has_clean(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.clean.is_some())
    }

    /// Reference clean image; counted as a ground-truth read.
    pub fn clean(&self, i: usize) -> Option<&Tensor<f32>> {
        self.ground_truth_reads.fetch_add(1, Ordering::Relaxed);
        self.records[i].clean.as_ref()
    }

    /// True noise maps; counted as a ground-truth read.
    pub fn ground_truth(&self, i: usize) -> Option<&GroundTruthTriple<f32>> {
        self.ground_truth_reads.fetch_add(1, Ordering::Relaxed);
        self.records[i].gt_maps.as_ref()
    }

    pub fn ground_truth_reads(&self) -> usize {
        self.ground_truth_reads.load(Ordering::Relaxed)
    }

    /// Same ids and references with the noisy inputs replaced.
    pub fn with_noisy(&self, noisy: Vec<Tensor<f32>>) -> Self {
        debug_assert_eq!(noisy.len(), self.records.len());
        Self::new(
            self.records
                .iter()
                .zip(noisy)
                .map(|(r, n)| ImageRecord { noisy: n, ..r.clone() })
                .collect(),
        )
    }

    /// Loads `<root>/noisy/*.png` plus any matching references.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let noisy_dir = root.join("noisy");
        let files = list_pngs(&noisy_dir)?;
        if files.is_empty() {
            return Err(Error::Argument(format!("no png files in {}", noisy_dir.display())));
        }
        let clean_dir = root.join("clean");
        let maps_dir = root.join("maps");
        let mut records = Vec::with_capacity(files.len());
        for path in files {
            let stem = file_stem(&path);
            let file_name = path.file_name().expect("listed file").to_owned();
            let mut rec = ImageRecord::new(stem.clone(), load_image(&path)?);
            let clean_path = clean_dir.join(&file_name);
            if clean_path.is_file() {
                let clean = load_image(&clean_path)?;
                let dep = maps_dir.join(format!("{stem}_dep.cvfr"));
                let indep = maps_dir.join(format!("{stem}_indep.cvfr"));
                let shape = rec.noisy.shape();
                rec = if dep.is_file() && indep.is_file() {
                    rec.with_ground_truth(GroundTruthTriple {
                        clean,
                        dep_map: load_float_map(&dep)?.reshape(shape)?,
                        indep_map: load_float_map(&indep)?.reshape(shape)?,
                    })
                } else {
                    rec.with_clean(clean)
                };
            }
            records.push(rec);
        }
        Ok(Self::new(records))
    }
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `*.png` files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(read_err(dir))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bytes_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| {
            rng.random_range(0u8..=255) as f32 / 255.0
        })
    }

    #[test]
    fn quantization_convention() {
        assert_eq!(quantize(0.5f32), 128);
        assert_eq!(quantize(-0.2f32), 0);
        assert_eq!(quantize(1.0f32), 255);
        assert_eq!(quantize(1.7f64), 255);
        assert_eq!(quantize(0.0f32), 0);
    }

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let img = random_bytes_image(7, 11, 1);
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn black_image_loads_as_zeros() {
        let img = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 5));
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
        assert_eq!(back.shape(), Shape::new(1, 3, 4, 5));
    }

    #[test]
    fn sixteen_bit_png_names_the_depth() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 2 * 2 * 3 * 2]).unwrap();
        }
        match decode_png(&out) {
            Err(Error::Format(msg)) => assert!(msg.contains("16"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn float_map_header_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::from_fn(Shape::new(1, 3, 40, 40), |_, _, _, _| rng.random_range(-1.0f32..1.0));
        let bytes = float_map_bytes(&t).unwrap();
        assert_eq!(bytes.len(), FLOAT_MAP_HEADER_LEN + 3 * 40 * 40 * 4);
        assert_eq!(&bytes[..4], b"CVFR");
        let back = float_map_from_bytes(&bytes).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bad_float_map_magic_and_length() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let mut bytes = float_map_bytes(&t).unwrap();
        assert!(float_map_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(float_map_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn min_max_normalization() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-0.2f32, 0.0, 0.3]).unwrap();
        let n = min_max_normalize(&t);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[2], 1.0);
        assert!(min_max_normalize(&Tensor::<f32>::full(t.shape(), 4.0))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_counts_reference_reads() {
        let img = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let ds = Dataset::new(vec![ImageRecord::new("a", img.clone()).with_clean(img)]);
        assert_eq!(ds.ground_truth_reads(), 0);
        let _ = ds.noisy(0);
        assert_eq!(ds.ground_truth_reads(), 0);
        assert!(ds.clean(0).is_some());
        assert_eq!(ds.ground_truth_reads(), 1);
    }

    #[test]
    fn directory_layout_loads_references() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["noisy", "clean", "maps"] {
            fs::create_dir(dir.path().join(sub)).unwrap();
        }
        let img = random_bytes_image(6, 6, 3);
        save_image(&img, &dir.path().join("noisy/x.png")).unwrap();
        save_image(&img, &dir.path().join("clean/x.png")).unwrap();
        save_image(&img, &dir.path().join("noisy/y.png")).unwrap();
        let map = Tensor::<f32>::full(img.shape(), 0.01);
        save_float_map(&map, &dir.path().join("maps/x_dep.cvfr")).unwrap();
        save_float_map(&map, &dir.path().join("maps/x_indep.cvfr")).unwrap();
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.id(0), "x");
        assert!(ds.ground_truth(0).is_some());
        assert!(ds.clean(1).is_none());
        assert!(!ds.has_clean());
        assert!(Dataset::load_dir(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn unwritable_path_is_a_write_error() {
        let img = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        let r = save_image(&img, Path::new("/nonexistent-dir/x.png"));
        assert!(matches!(r, Err(Error::Write { .. })));
    }
}
