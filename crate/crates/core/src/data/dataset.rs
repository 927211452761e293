//! On-disk dataset: one directory per sample holding `short.png`,
//! `tele.png`, `clean.png` (16-bit), `warp.bin` and `meta.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::color::ColorAffine;
use super::noise::{NoiseDraw, NoiseStage};
use super::pair::{make_dualzoom_pair, DegradationMeta, PairConfig};
use super::scene::synthesize_scene;
use super::warp::WarpField;
use super::DualZoomSample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

const WARP_MAGIC: &[u8; 4] = b"DZW1";

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub scenes: usize,
    pub ratio: usize,
    /// Side of the LR crop; scenes are `lr_size * ratio^2` pixels square.
    pub lr_size: usize,
    pub pair: PairConfig,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenes: 32,
            ratio: 2,
            lr_size: 32,
            pair: PairConfig::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn scene_size(&self) -> usize {
        self.lr_size * self.ratio * self.ratio
    }
}

pub fn sample_seeds(seed: u64, index: usize) -> (u64, u64) {
    (rng::derive2(seed, 1, index as u64), rng::derive2(seed, 2, index as u64))
}

/// The `index`-th sample of a generation config, in memory.
pub fn generate_sample(cfg: &GenConfig, index: usize) -> Result<DualZoomSample> {
    let side = cfg.scene_size();
    let (scene_seed, pair_seed) = sample_seeds(cfg.seed, index);
    let hr = synthesize_scene(scene_seed, side, side)?;
    make_dualzoom_pair(&hr, cfg.ratio, &cfg.pair, pair_seed)
}

pub fn generate_samples(cfg: &GenConfig) -> Result<Vec<DualZoomSample>> {
    cfg.pair.validate()?;
    (0..cfg.scenes).map(|i| generate_sample(cfg, i)).collect()
}

/// Generate `cfg.scenes` samples under `root`. Existing sample folders with
/// the same names are overwritten.
pub fn generate_dataset(root: &Path, cfg: &GenConfig) -> Result<Vec<PathBuf>> {
    cfg.pair.validate()?;
    fs::create_dir_all(root)?;
    let mut out = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let sample = generate_sample(cfg, i)?;
        let dir = root.join(format!("sample_{i:04}"));
        save_sample(&dir, &sample)?;
        out.push(dir);
    }
    Ok(out)
}

/// Sample directories under `root`, sorted by name.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no samples found in {}", root.display())));
    }
    Ok(dirs)
}

fn join3<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn write_meta(s: &DualZoomSample) -> String {
    let m = &s.meta;
    let order: String = m.noise.order.iter().map(|st| st.tag()).collect();
    let lines = [
        ("seed", s.gen_seed.to_string()),
        ("ratio", s.ratio.to_string()),
        ("sigma", m.blur_sigma.to_string()),
        ("quality", m.noise.quality.to_string()),
        ("order", order),
        ("noise_sigma", m.noise.sigma.to_string()),
        ("sensor_a", m.noise.sensor_a.to_string()),
        ("sensor_b", m.noise.sensor_b.to_string()),
        ("warp_bound", m.warp_bound.to_string()),
        ("jitter_gain", join3(&m.jitter_gain)),
        ("jitter_offset", join3(&m.jitter_offset)),
        ("color_gain", join3(&m.color.gain)),
        ("color_offset", join3(&m.color.offset)),
    ];
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("malformed meta line {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Data(format!("meta.txt is missing {key}")))?
        .parse()
        .map_err(|_| Error::Data(format!("meta.txt has an invalid {key}")))
}

fn field3<T: std::str::FromStr + Copy + Default>(map: &BTreeMap<String, String>, key: &str) -> Result<[T; 3]> {
    let raw: String = field(map, key)?;
    let parts: Vec<T> = raw
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Data(format!("meta.txt has an invalid {key}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Data(format!("meta.txt {key} needs 3 values")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn write_warp(path: &Path, warp: &WarpField) -> Result<()> {
    let (h, w) = warp.dims();
    let (h16, w16) = (u16::try_from(h), u16::try_from(w));
    let (Ok(h16), Ok(w16)) = (h16, w16) else {
        return Err(Error::Data(format!("warp {h}x{w} too large for the header")));
    };
    let mut bytes = Vec::with_capacity(8 + warp.data().len() * 4);
    bytes.extend_from_slice(WARP_MAGIC);
    bytes.extend_from_slice(&h16.to_le_bytes());
    bytes.extend_from_slice(&w16.to_le_bytes());
    for v in warp.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn read_warp(path: &Path) -> Result<WarpField> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != WARP_MAGIC {
        return Err(Error::Data(format!("{} is not a warp file", path.display())));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != h * w * 2 * 4 {
        return Err(Error::Data(format!("{} has a truncated body", path.display())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    WarpField::new(h, w, data)
}

pub fn save_sample(dir: &Path, s: &DualZoomSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    s.short_focus.save_png16(&dir.join("short.png"))?;
    s.telephoto.save_png16(&dir.join("tele.png"))?;
    s.clean_short.save_png16(&dir.join("clean.png"))?;
    write_warp(&dir.join("warp.bin"), &s.true_warp)?;
    fs::write(dir.join("meta.txt"), write_meta(s))?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<DualZoomSample> {
    let text = fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| Error::Data(format!("{}: cannot read meta.txt: {e}", dir.display())))?;
    let map = parse_meta(&text)?;
    let order_raw: String = field(&map, "order")?;
    let order = order_raw
        .chars()
        .map(|c| NoiseStage::from_tag(c).ok_or_else(|| Error::Data(format!("unknown noise stage {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let meta = DegradationMeta {
        blur_sigma: field(&map, "sigma")?,
        noise: NoiseDraw {
            order,
            sigma: field(&map, "noise_sigma")?,
            quality: field(&map, "quality")?,
            sensor_a: field(&map, "sensor_a")?,
            sensor_b: field(&map, "sensor_b")?,
        },
        warp_bound: field(&map, "warp_bound")?,
        jitter_gain: field3(&map, "jitter_gain")?,
        jitter_offset: field3(&map, "jitter_offset")?,
        color: ColorAffine {
            gain: field3(&map, "color_gain")?,
            offset: field3(&map, "color_offset")?,
        },
    };
    let missing = |name: &str| -> Result<Image> {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::Data(format!("{} is missing", p.display())));
        }
        Image::load_png(&p)
    };
    let sample = DualZoomSample {
        short_focus: missing("short.png")?,
        telephoto: missing("tele.png")?,
        clean_short: missing("clean.png")?,
        ratio: field(&map, "ratio")?,
        true_warp: read_warp(&dir.join("warp.bin"))?,
        gen_seed: field(&map, "seed")?,
        meta,
    };
    if sample.short_focus.dims() != sample.telephoto.dims() || sample.true_warp.dims() != sample.telephoto.dims() {
        return Err(Error::Data(format!("{}: inconsistent view sizes", dir.display())));
    }
    Ok(sample)
}
