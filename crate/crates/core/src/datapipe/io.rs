//! On-disk dataset layout: `<root>/<identity>/<camera>/<name>.png` (8-bit RGB),
//! plus `dataset.txt` (the generating config) and `split.txt` (MLR membership).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::kv::{KvDoc, KvWriter};

use super::resample::{bilinear_resize, synthesize_lr};
use super::split::MlrSplit;
use super::{DatasetConfig, ImageRecord};

pub const DATASET_FILE: &str = "dataset.txt";
pub const SPLIT_FILE: &str = "split.txt";

/// Membership of an MLR split by record key (`identity/camera/name`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub lr_camera: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// `(key, rate)` per query, in query order.
    pub query: Vec<(String, u32)>,
    pub gallery: Vec<String>,
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        let query: Vec<String> = self.query.iter().map(|(k, r)| format!("{k}@{r}")).collect();
        w.section("split")
            .kv("lr_camera", self.lr_camera)
            .list("train_ids", &self.train_ids)
            .list("test_ids", &self.test_ids)
            .list("query", &query)
            .list("gallery", &self.gallery);
        w.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        doc.expect_sections(&["split"])?;
        let mut s = doc.section("split");
        let lr_camera = s.get("lr_camera")?.ok_or_else(|| Error::Config("split: missing lr_camera".into()))?;
        let train_ids = s.get_list("train_ids")?.unwrap_or_default();
        let test_ids = s.get_list("test_ids")?.unwrap_or_default();
        let query = s
            .get_list::<String>("query")?
            .unwrap_or_default()
            .into_iter()
            .map(|q| {
                let (key, rate) = q
                    .rsplit_once('@')
                    .ok_or_else(|| Error::Config(format!("split: query entry `{q}` lacks @rate")))?;
                let rate = rate
                    .parse()
                    .map_err(|e| Error::Config(format!("split: query entry `{q}`: {e}")))?;
                Ok((key.to_string(), rate))
            })
            .collect::<Result<_>>()?;
        let gallery = s.get_list("gallery")?.unwrap_or_default();
        s.finish()?;
        Ok(Self {
            lr_camera,
            train_ids,
            test_ids,
            query,
            gallery,
        })
    }
}

fn record_key(identity: usize, camera: usize, name: &str) -> String {
    format!("{identity}/{camera}/{name}")
}

/// Write HR `records` as PNGs plus `dataset.txt` and the split manifest.
/// Image names are `img_<k>` numbered per identity and camera in record order.
pub fn write_dataset_dir(root: &Path, cfg: &DatasetConfig, records: &[ImageRecord], split: &MlrSplit) -> Result<()> {
    fs::create_dir_all(root).at(root)?;
    let mut counters: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut keys: Vec<String> = Vec::with_capacity(records.len());
    for r in records {
        let k = counters.entry((r.identity, r.camera)).or_default();
        let name = format!("img_{k:03}");
        *k += 1;
        let dir = root.join(r.identity.to_string()).join(r.camera.to_string());
        fs::create_dir_all(&dir).at(&dir)?;
        let path = dir.join(format!("{name}.png"));
        let bytes: Vec<u8> = r.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::save_buffer(&path, &bytes, r.width as u32, r.height as u32, image::ColorType::Rgb8)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        keys.push(record_key(r.identity, r.camera, &name));
    }
    let key_of = |rec: &ImageRecord| -> Result<String> {
        records
            .iter()
            .position(|r| r.identity == rec.identity && r.camera == rec.camera && r.pixels == rec.pixels)
            .map(|i| keys[i].clone())
            .ok_or_else(|| Error::Dataset("split record not found among dataset records".into()))
    };
    let manifest = SplitManifest {
        lr_camera: split.lr_camera,
        train_ids: split.train_ids.clone(),
        test_ids: split.test_ids.clone(),
        query: split
            .query_hr
            .iter()
            .zip(&split.query)
            .map(|(hr, q)| Ok((key_of(hr)?, q.rate)))
            .collect::<Result<_>>()?,
        gallery: split.gallery.iter().map(key_of).collect::<Result<_>>()?,
    };
    let mut w = KvWriter::new();
    w.section("data");
    cfg.write_kv(&mut w);
    let p = root.join(DATASET_FILE);
    fs::write(&p, w.finish()).at(&p)?;
    let p = root.join(SPLIT_FILE);
    fs::write(&p, manifest.to_text()).at(&p)?;
    Ok(())
}

fn numeric_subdirs(dir: &Path) -> Result<Vec<(usize, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        if let Some(n) = path.file_name().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Load every `<identity>/<camera>/*.png` under `root`, rescaled to `[0, 1]`
/// and bilinearly resized to `height×width`. Returns `(key, record)` pairs
/// sorted by identity, camera and file name.
pub fn load_dataset_dir(root: &Path, height: usize, width: usize) -> Result<Vec<(String, ImageRecord)>> {
    let mut out = Vec::new();
    for (identity, id_dir) in numeric_subdirs(root)? {
        for (camera, cam_dir) in numeric_subdirs(&id_dir)? {
            let mut files: Vec<_> = fs::read_dir(&cam_dir)
                .at(&cam_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for path in files {
                let img = image::open(&path)
                    .map_err(|source| Error::Image { path: path.clone(), source })?
                    .to_rgb8();
                let (w0, h0) = (img.width() as usize, img.height() as usize);
                let mut pixels: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
                if (h0, w0) != (height, width) {
                    pixels = bilinear_resize(&pixels, h0, w0, height, width);
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                out.push((
                    record_key(identity, camera, stem),
                    ImageRecord {
                        height,
                        width,
                        pixels,
                        identity,
                        camera,
                        rate: 1,
                        labeled: true,
                    },
                ));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    Ok(out)
}

pub fn read_split_manifest(root: &Path) -> Result<Option<SplitManifest>> {
    let p = root.join(SPLIT_FILE);
    if !p.exists() {
        return Ok(None);
    }
    SplitManifest::parse(&fs::read_to_string(&p).at(&p)?).map(Some)
}

/// Load a dataset directory written by [`write_dataset_dir`] (or a
/// user-supplied tree). Without `split.txt` the split is rebuilt from `cfg`.
pub fn load_split_dir(root: &Path, cfg: Option<&DatasetConfig>) -> Result<(DatasetConfig, MlrSplit)> {
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let p = root.join(DATASET_FILE);
            if p.exists() {
                let doc = KvDoc::parse(&fs::read_to_string(&p).at(&p)?)?;
                doc.expect_sections(&["data"])?;
                DatasetConfig::from_kv(&doc, "data")?
            } else {
                DatasetConfig::default()
            }
        }
    };
    let loaded = load_dataset_dir(root, cfg.height, cfg.width)?;
    let Some(manifest) = read_split_manifest(root)? else {
        let records: Vec<ImageRecord> = loaded.into_iter().map(|(_, r)| r).collect();
        let split = super::build_mlr_split(&records, &cfg)?;
        return Ok((cfg, split));
    };
    let by_key: BTreeMap<&str, &ImageRecord> = loaded.iter().map(|(k, r)| (k.as_str(), r)).collect();
    let fetch = |k: &str| -> Result<ImageRecord> {
        by_key
            .get(k)
            .map(|r| (*r).clone())
            .ok_or_else(|| Error::Dataset(format!("split references missing image {k}")))
    };
    let train = loaded
        .iter()
        .filter(|(_, r)| manifest.train_ids.contains(&r.identity))
        .map(|(_, r)| r.clone())
        .collect();
    let mut query = Vec::new();
    let mut query_hr = Vec::new();
    for (k, rate) in &manifest.query {
        let hr = fetch(k)?;
        query.push(if *rate == 1 { hr.clone() } else { synthesize_lr(&hr, *rate)? });
        query_hr.push(hr);
    }
    let gallery = manifest.gallery.iter().map(|k| fetch(k)).collect::<Result<_>>()?;
    Ok((
        cfg,
        MlrSplit {
            train,
            query,
            query_hr,
            gallery,
            train_ids: manifest.train_ids,
            test_ids: manifest.test_ids,
            lr_camera: manifest.lr_camera,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{build_mlr_split, generate_toy_dataset};

    #[test]
    fn directory_roundtrip_preserves_split() {
        let cfg = DatasetConfig {
            height: 16,
            width: 8,
            num_identities: 6,
            images_per_id_per_cam: 2,
            ..Default::default()
        };
        let recs = generate_toy_dataset(&cfg);
        let split = build_mlr_split(&recs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &cfg, &recs, &split).unwrap();
        let (cfg2, split2) = load_split_dir(dir.path(), None).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(split2.train_ids, split.train_ids);
        assert_eq!(split2.test_ids, split.test_ids);
        assert_eq!(split2.query.len(), split.query.len());
        assert_eq!(split2.gallery.len(), split.gallery.len());
        for (a, b) in split2.query.iter().zip(&split.query) {
            assert_eq!((a.identity, a.camera, a.rate), (b.identity, b.camera, b.rate));
        }
        for (a, b) in split2.gallery.iter().zip(&split.gallery) {
            assert_eq!(a.identity, b.identity);
            let max_err = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = SplitManifest {
            lr_camera: 0,
            train_ids: vec![1, 2],
            test_ids: vec![0, 3],
            query: vec![("0/0/img_000".into(), 3), ("3/0/img_001".into(), 2)],
            gallery: vec!["0/1/img_000".into()],
        };
        assert_eq!(SplitManifest::parse(&m.to_text()).unwrap(), m);
    }
}
