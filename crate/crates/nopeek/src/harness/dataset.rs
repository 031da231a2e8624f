//! Dataset ingestion and synthesis: seeded synthetic tasks plus the public
//! 3073-byte-record binary image format.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

pub const DATASET_MAGIC: [u8; 4] = *b"NPKD";
const DATASET_VERSION: u16 = 1;

/// Invertible per-feature affine record: raw = x * scale + offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Inputs as fed to the network (post-normalization).
    pub x: Matrix,
    /// Named one-hot labelings, aligned with rows of x; the first is the
    /// primary attribute.
    pub attributes: Vec<(String, Matrix)>,
    /// (h, w, c, channel-planar) when x carries flattened images.
    pub image_shape: Option<(usize, usize, usize, bool)>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn attribute(&self, name: &str) -> Result<&Matrix> {
        self.attributes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Config(format!("dataset has no attribute {:?}", name)))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            attributes: self
                .attributes
                .iter()
                .map(|(n, m)| (n.clone(), m.select_rows(idx)))
                .collect(),
            image_shape: self.image_shape,
            normalization: self.normalization.clone(),
        }
    }

    /// Deterministic train/validation split: one fifth held out,
    /// stratified on the primary attribute so both splits keep the class
    /// balance, then reshuffled so neither split is class-ordered.
    pub fn split_train_val(&self, seed: u64) -> (Dataset, Dataset) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = Rng::substream(seed, "data-split");
        rng.shuffle(&mut idx);
        let primary = &self.attributes[0].1;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); primary.cols()];
        for &i in &idx {
            groups[crate::model::argmax(primary.row(i))].push(i);
        }
        let mut val = Vec::new();
        let mut train = Vec::new();
        for g in &groups {
            let k = if g.is_empty() { 0 } else { (g.len() / 5).max(1).min(g.len() - 1) };
            val.extend_from_slice(&g[..k]);
            train.extend_from_slice(&g[k..]);
        }
        rng.shuffle(&mut train);
        rng.shuffle(&mut val);
        (self.select(&train), self.select(&val))
    }
}

/// Synthetic datasets.
///
/// `blobs`: Gaussian clusters in 6 dims with three attribute labelings.
/// Dims 0,1 encode a quadrant (4 values), dims 2,3 independently encode a
/// class (4 values, parity-of-class gives the third attribute), dims 4,5
/// are noise. Class and quadrant are independent partitions, so a
/// representation can keep one while dropping the other.
///
/// `stripes-image`: 16x16 grayscale stripe patterns in [0,1]; the class is
/// the stripe orientation, giving an attacker spatial structure to invert.
pub fn gen_synthetic(kind: &str, n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::SampleSize(format!("synthetic data needs n >= 4, got {}", n)));
    }
    match kind {
        "blobs" => Ok(gen_blobs(n, seed, 10.0)),
        "stripes-image" | "stripes" => Ok(gen_stripes(n, seed)),
        other => Err(Error::Config(format!(
            "unknown synthetic kind {:?} (expected blobs or stripes-image)",
            other
        ))),
    }
}

pub fn gen_blobs(n: usize, seed: u64, separation: f64) -> Dataset {
    let mut rng = Rng::substream(seed, "data");
    let d = 6;
    let mut x = Matrix::zeros(n, d);
    let mut class = Matrix::zeros(n, 4);
    let mut parity = Matrix::zeros(n, 2);
    let mut quadrant = Matrix::zeros(n, 4);
    let corner = |v: usize| -> (f64, f64) {
        match v {
            0 => (-1.0, -1.0),
            1 => (-1.0, 1.0),
            2 => (1.0, -1.0),
            _ => (1.0, 1.0),
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for (slot, &i) in order.iter().enumerate() {
        let cluster = slot % 16;
        let q = cluster % 4;
        let c = cluster / 4;
        let (qx, qy) = corner(q);
        let (cx, cy) = corner(c);
        let half = separation / 2.0;
        x.set(i, 0, qx * half + rng.normal(0.0, 1.0));
        x.set(i, 1, qy * half + rng.normal(0.0, 1.0));
        x.set(i, 2, cx * half + rng.normal(0.0, 1.0));
        x.set(i, 3, cy * half + rng.normal(0.0, 1.0));
        x.set(i, 4, rng.normal(0.0, 1.0));
        x.set(i, 5, rng.normal(0.0, 1.0));
        class.set(i, c, 1.0);
        parity.set(i, c % 2, 1.0);
        quadrant.set(i, q, 1.0);
    }
    let (x, normalization) = standardize(&x);
    Dataset {
        name: "blobs".to_string(),
        x,
        attributes: vec![
            ("class".to_string(), class),
            ("parity".to_string(), parity),
            ("quadrant".to_string(), quadrant),
        ],
        image_shape: None,
        normalization,
    }
}

pub fn gen_stripes(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::substream(seed, "data");
    let (h, w) = (16usize, 16usize);
    let mut x = Matrix::zeros(n, h * w);
    let mut orientation = Matrix::zeros(n, 4);
    for i in 0..n {
        let class = i % 4;
        let freq = 1.0 + rng.below(3) as f64; // 1..3 cycles
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        for y in 0..h {
            for xx in 0..w {
                let t = match class {
                    0 => xx as f64,
                    1 => y as f64,
                    2 => (xx + y) as f64 / 2.0,
                    _ => (xx as f64 - y as f64) / 2.0,
                };
                let v = 0.5
                    + 0.45 * (std::f64::consts::TAU * freq * t / 16.0 + phase).cos()
                    + rng.normal(0.0, 0.02);
                x.set(i, y * w + xx, v.clamp(0.0, 1.0));
            }
        }
        orientation.set(i, class, 1.0);
    }
    Dataset {
        name: "stripes-image".to_string(),
        x,
        attributes: vec![("orientation".to_string(), orientation)],
        image_shape: Some((h, w, 1, false)),
        normalization: Normalization::identity(h * w),
    }
}

fn standardize(x: &Matrix) -> (Matrix, Normalization) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..n {
            s += x.at(i, j);
        }
        mean[j] = s / n as f64;
        let mut v = 0.0;
        for i in 0..n {
            let diff = x.at(i, j) - mean[j];
            v += diff * diff;
        }
        std[j] = (v / n as f64).sqrt().max(1e-9);
    }
    let z = Matrix::from_fn(n, d, |i, j| (x.at(i, j) - mean[j]) / std[j]);
    (z, Normalization { offset: mean, scale: std })
}

/// Load the public 3073-byte-record binary image format: per record one
/// label byte then 3072 pixel bytes (32x32x3, channel-planar), pixels
/// scaled to [0,1].
pub fn load_cifar10_bin(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_cifar10_records(&bytes)
}

pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Dataset> {
    const RECORD: usize = 3073;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "file size {} is not a multiple of the {}-byte record",
            bytes.len(),
            RECORD
        )));
    }
    let n = bytes.len() / RECORD;
    let mut x = Matrix::zeros(n, 3072);
    let mut labels = Matrix::zeros(n, 10);
    for i in 0..n {
        let rec = &bytes[i * RECORD..(i + 1) * RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("record {} has label byte {}", i, rec[0])));
        }
        labels.set(i, label, 1.0);
        for (j, &b) in rec[1..].iter().enumerate() {
            x.set(i, j, b as f64 / 255.0);
        }
    }
    let mut norm = Normalization::identity(3072);
    norm.scale = vec![255.0; 3072];
    Ok(Dataset {
        name: "cifar10".to_string(),
        x,
        attributes: vec![("label".to_string(), labels)],
        image_shape: Some((32, 32, 3, true)),
        normalization: norm,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    write_str(&mut buf, &ds.name);
    write_matrix(&mut buf, &ds.x);
    buf.extend_from_slice(&(ds.attributes.len() as u32).to_le_bytes());
    for (name, m) in &ds.attributes {
        write_str(&mut buf, name);
        write_matrix(&mut buf, m);
    }
    match ds.image_shape {
        Some((h, w, c, planar)) => {
            buf.push(1);
            for v in [h, w, c] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            buf.push(planar as u8);
        }
        None => buf.push(0),
    }
    for v in &ds.normalization.offset {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &ds.normalization.scale {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a dataset file, sniffing the format: the native container by its
/// magic, otherwise the 3073-byte-record image format.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() >= 4 && bytes[..4] == DATASET_MAGIC {
        return parse_native(&bytes);
    }
    if !bytes.is_empty() && bytes.len() % 3073 == 0 {
        return parse_cifar10_records(&bytes);
    }
    Err(Error::Format(format!(
        "{:?} is neither a native dataset nor a 3073-byte-record file",
        path
    )))
}

fn parse_native(bytes: &[u8]) -> Result<Dataset> {
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("truncated dataset file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", version)));
    }
    let name = read_str(bytes, &mut pos)?;
    let x = read_matrix(bytes, &mut pos)?;
    let n_attrs = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut attributes = Vec::with_capacity(n_attrs);
    for _ in 0..n_attrs {
        let name = read_str(bytes, &mut pos)?;
        let m = read_matrix(bytes, &mut pos)?;
        attributes.push((name, m));
    }
    let image_shape = if take(&mut pos, 1)?[0] != 0 {
        let h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let planar = take(&mut pos, 1)?[0] != 0;
        Some((h, w, c, planar))
    } else {
        None
    };
    let d = x.cols();
    let mut offset = Vec::with_capacity(d);
    for _ in 0..d {
        offset.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    let mut scale = Vec::with_capacity(d);
    for _ in 0..d {
        scale.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    Ok(Dataset {
        name,
        x,
        attributes,
        image_shape,
        normalization: Normalization { offset, scale },
    })
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(bytes: &[u8], pos: &mut usize) -> Result<String> {
    if *pos + 2 > bytes.len() {
        return Err(Error::Format("truncated dataset string".into()));
    }
    let len = u16::from_le_bytes(bytes[*pos..*pos + 2].try_into().unwrap()) as usize;
    *pos += 2;
    if *pos + len > bytes.len() {
        return Err(Error::Format("truncated dataset string".into()));
    }
    let s = String::from_utf8(bytes[*pos..*pos + len].to_vec())
        .map_err(|_| Error::Format("dataset string is not utf-8".into()))?;
    *pos += len;
    Ok(s)
}

fn write_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(bytes: &[u8], pos: &mut usize) -> Result<Matrix> {
    if *pos + 8 > bytes.len() {
        return Err(Error::Format("truncated dataset matrix".into()));
    }
    let rows = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[*pos + 4..*pos + 8].try_into().unwrap()) as usize;
    *pos += 8;
    let need = rows * cols * 8;
    if *pos + need > bytes.len() {
        return Err(Error::Format("truncated dataset matrix".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[*pos..*pos + need].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    *pos += need;
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = gen_synthetic("blobs", 64, 5).unwrap();
        let b = gen_synthetic("blobs", 64, 5).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic("blobs", 64, 6).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn stripes_pixels_stay_in_unit_interval() {
        let ds = gen_synthetic("stripes-image", 32, 7).unwrap();
        assert!(ds.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.image_shape, Some((16, 16, 1, false)));
        assert_eq!(ds.x.cols(), 256);
    }

    #[test]
    fn blobs_attributes_are_consistent_partitions() {
        let ds = gen_synthetic("blobs", 128, 9).unwrap();
        let class = ds.attribute("class").unwrap();
        let parity = ds.attribute("parity").unwrap();
        for i in 0..128 {
            let c = crate::model::argmax(class.row(i));
            let p = crate::model::argmax(parity.row(i));
            assert_eq!(p, c % 2);
        }
    }

    #[test]
    fn cifar_fixture_parses_labels_and_pixels() {
        // two hand-built records
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[0] = 3; // label of record 0
        bytes[1] = 255; // first pixel of record 0
        bytes[3073] = 7; // label of record 1
        bytes[3073 + 1 + 100] = 128;
        let ds = parse_cifar10_records(&bytes).unwrap();
        assert_eq!(ds.x.shape(), (2, 3072));
        assert_eq!(crate::model::argmax(ds.attributes[0].1.row(0)), 3);
        assert_eq!(crate::model::argmax(ds.attributes[0].1.row(1)), 7);
        assert!((ds.x.at(0, 0) - 1.0).abs() < 1e-12);
        assert!((ds.x.at(1, 100) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn cifar_rejects_truncated_file() {
        let bytes = vec![0u8; 3072]; // one byte short
        assert!(matches!(parse_cifar10_records(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_roundtrip_through_file() {
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 1;
        for (i, b) in bytes[1..].iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_bin(&path).unwrap();
        for (i, &b) in bytes[1..].iter().enumerate() {
            assert!((ds.x.at(0, i) - b as f64 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn native_container_roundtrip() {
        let ds = gen_synthetic("blobs", 24, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.npkd");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn split_train_val_is_disjoint_and_deterministic() {
        let ds = gen_synthetic("blobs", 50, 13).unwrap();
        let (t1, v1) = ds.split_train_val(3);
        let (t2, v2) = ds.split_train_val(3);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(t1.len() + v1.len(), 50);
        for i in 0..v1.len() {
            for j in 0..t1.len() {
                assert_ne!(v1.x.row(i), t1.x.row(j));
            }
        }
    }
}
