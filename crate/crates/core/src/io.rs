//! Checkpoints, image files, and dataset manifests.
//!
//! A checkpoint is one file: a fixed magic, a JSON manifest (format version,
//! model config, tensor directory, opaque training state), then a contiguous
//! little-endian f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: u64,
    pub len: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Training bookkeeping (epoch, step, data RNG seed, ...); opaque here.
    pub state: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    pub fn build(
        config: ModelConfig,
        entries: impl IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>,
        state: serde_json::Value,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (name, shape, data) in entries {
            assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: bad entry");
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len() as u64,
                len: data.len() as u64,
                dtype: "f32".into(),
            });
            payload.extend_from_slice(&data);
        }
        Checkpoint {
            manifest: CheckpointManifest { version: CHECKPOINT_VERSION, config, tensors, state },
            payload,
        }
    }

    /// Snapshot a model's parameters plus extra named tensors (e.g. optimizer
    /// moments).
    pub fn from_model<E: Element>(
        model: &Model<E>,
        extra: impl IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>,
        state: serde_json::Value,
    ) -> Checkpoint {
        let entries = model
            .store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect::<Vec<_>>();
        Checkpoint::build(model.cfg.clone(), entries.into_iter().chain(extra), state)
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        let e = self.manifest.tensors.iter().find(|e| e.name == name)?;
        let (o, l) = (e.offset as usize, e.len as usize);
        Some((&e.shape, &self.payload[o..o + l]))
    }

    /// Instantiate a model from the stored config and overwrite every
    /// parameter with checkpoint values.
    pub fn restore_model<E: Element>(&self) -> Result<Model<E>> {
        let mut model = Model::new(self.manifest.config.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Load checkpoint values into an existing model; every model parameter
    /// must be present.
    pub fn apply_to<E: Element>(&self, model: &mut Model<E>) -> Result<()> {
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let (_, data) = self.tensor(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {name}"))
            })?;
            model
                .store
                .set_by_name(&name, data.iter().map(|v| E::of_f64(*v as f64)).collect())?;
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let json = serde_json::to_vec(&self.manifest)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let json_len = u64::from_le_bytes(len8) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                manifest.version, CHECKPOINT_VERSION
            )));
        }
        let total: u64 = manifest.tensors.iter().map(|e| e.len).sum();
        let mut bytes = vec![0u8; total as usize * 4];
        r.read_exact(&mut bytes)?;
        let payload = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { manifest, payload })
    }
}

/// Decode a PNG into a [1,3,H,W] tensor with values in [0,1].
pub fn read_png<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![E::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                E::of_f64(p.0[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(data, &[1, 3, h, w]))
}

/// Encode a [1,3,H,W] tensor as an 8-bit PNG. Values are clamped to [0,1]
/// and quantized with round-half-up.
pub fn write_png<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    if t.ndim() != 4 || t.shape()[0] != 1 || t.shape()[1] != 3 {
        return Err(Error::InvalidShape(format!(
            "write_png expects [1,3,H,W], got {:?}",
            t.shape()
        )));
    }
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let data = t.data();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = data[c * h * w + y as usize * w + x as usize]
                .as_f64()
                .clamp(0.0, 1.0);
            p.0[c] = (v * 255.0 + 0.5).floor().min(255.0) as u8;
        }
    }
    img.save(path)?;
    Ok(())
}

/// Quantize exactly as `write_png` does, returning a tensor on the 1/255
/// grid; decoding a written file reproduces this.
pub fn quantize_8bit<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let data = t
        .data()
        .iter()
        .map(|v| {
            let q = (v.as_f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0);
            E::of_f64(q / 255.0)
        })
        .collect();
    Tensor::new(data, t.shape())
}

/// Reflection-pad right/bottom so both extents are multiples of `m`.
/// Returns the padded tensor and the original extents for `crop_to`.
pub fn pad_to_multiple<E: Element>(t: &Tensor<E>, m: usize) -> Result<(Tensor<E>, (usize, usize))> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let (ph, pw) = (h.next_multiple_of(m), w.next_multiple_of(m));
    if ph - h >= h || pw - w >= w {
        return Err(Error::InvalidShape(format!(
            "image {h}x{w} too small to reflection-pad to a multiple of {m}"
        )));
    }
    let mut out = t.clone();
    if pw > w {
        // reflect without repeating the edge column
        let idx: Vec<usize> = (0..w).chain((0..pw - w).map(|i| w - 2 - i)).collect();
        out = out.index_select(3, &idx);
    }
    if ph > h {
        let idx: Vec<usize> = (0..h).chain((0..ph - h).map(|i| h - 2 - i)).collect();
        out = out.index_select(2, &idx);
    }
    Ok((out, (h, w)))
}

pub fn crop_to<E: Element>(t: &Tensor<E>, (h, w): (usize, usize)) -> Tensor<E> {
    t.narrow(2, 0, h).narrow(3, 0, w)
}

/// One triplet of an on-disk evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame0: String,
    pub frame1: String,
    pub gt: String,
    #[serde(default = "default_t")]
    pub t: f64,
}

fn default_t() -> f64 {
    0.5
}

/// Read a dataset manifest: a JSON array of triplet entries with paths
/// relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let entries: Vec<ManifestEntry> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if entries.is_empty() {
        return Err(Error::Data(format!("empty dataset manifest {}", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            frame0: base.join(&e.frame0).to_string_lossy().into_owned(),
            frame1: base.join(&e.frame1).to_string_lossy().into_owned(),
            gt: base.join(&e.gt).to_string_lossy().into_owned(),
            t: e.t,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::tiny(4, 1, 4);
        let model = Model::<f32>::new(cfg, 7).unwrap();
        let state = serde_json::json!({"epoch": 3, "step": 42, "seed": 7});
        let ck = Checkpoint::from_model(&model, [], state);
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.payload, ck.payload);
        assert_eq!(back.manifest.state["step"], 42);
        let restored: Model<f32> = back.restore_model().unwrap();
        for ((na, a), (nb, b)) in model.store.iter().zip(restored.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data(), "{na} not bitwise equal");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::tiny(4, 1, 4);
        let mut ck = Checkpoint::build(cfg, [("w".into(), vec![2], vec![1.0, 2.0])], serde_json::json!({}));
        ck.manifest.version = CHECKPOINT_VERSION + 1;
        ck.write(&path).unwrap();
        let err = Checkpoint::read(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }

    #[test]
    fn missing_parameter_reported() {
        let cfg = ModelConfig::tiny(4, 1, 4);
        let ck = Checkpoint::build(cfg, [], serde_json::json!({}));
        let err = match ck.restore_model::<f32>() {
            Err(e) => e,
            Ok(_) => panic!("expected missing-parameter error"),
        };
        assert!(err.to_string().contains("missing parameter"), "{err}");
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = StdRng::seed_from_u64(80);
        let t = Tensor::<f32>::new(
            (0..3 * 24 * 16).map(|_| rng.gen_range(-0.1..1.1)).collect(),
            &[1, 3, 24, 16],
        );
        write_png(&path, &t).unwrap();
        let back: Tensor<f32> = read_png(&path).unwrap();
        let q = quantize_8bit(&t);
        assert_eq!(back.shape(), q.shape());
        for (a, b) in back.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn round_half_up_quantization() {
        // 0.5/255 rounds up to 1/255; just below rounds down to 0
        let t = Tensor::<f64>::new(vec![0.5 / 255.0, 0.4999 / 255.0, 1.0], &[1, 1, 1, 3]);
        let q = quantize_8bit(&t);
        assert!((q.data()[0] - 1.0 / 255.0).abs() < 1e-12);
        assert_eq!(q.data()[1], 0.0);
        assert_eq!(q.data()[2], 1.0);
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let mut rng = StdRng::seed_from_u64(81);
        let t = Tensor::<f64>::new(
            (0..3 * 37 * 45).map(|_| rng.gen_range(0.0..1.0)).collect(),
            &[1, 3, 37, 45],
        );
        let (padded, orig) = pad_to_multiple(&t, 16).unwrap();
        assert_eq!(padded.shape()[2] % 16, 0);
        assert_eq!(padded.shape()[3] % 16, 0);
        assert_eq!(padded.shape(), &[1, 3, 48, 48]);
        let back = crop_to(&padded, orig);
        assert_eq!(back.data(), t.data());
        // padded border mirrors the interior: row h is row h-2 reflected
        let w = 45;
        for x in 0..w {
            assert_eq!(padded.data()[37 * 48 + x], t.data()[35 * w + x]);
        }
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.json");
        std::fs::write(
            &path,
            r#"[{"frame0":"a.png","frame1":"b.png","gt":"m.png"},
               {"frame0":"c.png","frame1":"d.png","gt":"n.png","t":0.25}]"#,
        )
        .unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert!(entries[0].frame0.ends_with("a.png"));
        assert!(std::path::Path::new(&entries[0].frame0).is_absolute());
        assert_eq!(entries[0].t, 0.5);
        assert_eq!(entries[1].t, 0.25);
        std::fs::write(&path, "[]").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
