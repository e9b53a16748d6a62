//! PNG images, PFM float maps, split-file listings and dataset folders.
//!
//! A dataset folder holds `dataset.toml` (camera model), a split file with
//! one `left right [disp_left [disp_right]]` line per pair (paths relative
//! to the folder), and the referenced PNG and PFM files.

use std::path::{Path, PathBuf};

use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use super::{SceneSpec, StereoSample};
use crate::error::{invalid, io_err, Error, Result};
use crate::quantize::CameraModel;

/// Write a `[1, 3, H, W]` or `[1, 1, H, W]` image in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let [b, c, h, w] = img.dims4()?;
    if b != 1 || !(c == 1 || c == 3) {
        return Err(invalid(
            "write_png",
            format!("expected [1, 1|3, H, W], got {:?}", img.shape()),
        ));
    }
    let plane = h * w;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = Vec::with_capacity(plane * c);
    for p in 0..plane {
        for ch in 0..c {
            bytes.push(q(img.data()[ch * plane + p]));
        }
    }
    let color = if c == 3 {
        image::ColorType::Rgb8
    } else {
        image::ColorType::L8
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}

/// Read any PNG as `[1, 3, H, W]` RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![1, 3, h, w], data)?)
}

/// PFM bytes for a `[1, 1, H, W]` (`Pf`) or `[1, 3, H, W]` (`PF`) map,
/// little-endian, rows stored bottom-up.
pub fn encode_pfm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let [b, c, h, w] = t.dims4()?;
    if b != 1 || !(c == 1 || c == 3) {
        return Err(invalid(
            "write_pfm",
            format!("expected [1, 1|3, H, W], got {:?}", t.shape()),
        ));
    }
    let magic = if c == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{w} {h}\n-1\n").into_bytes();
    let plane = h * w;
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&t.data()[ch * plane + y * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}, found end of file")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            offset: start,
            msg: format!("{what} is not valid text"),
        })
    }
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut hd = Header {
        bytes,
        pos: 0,
        path,
    };
    let channels = match hd.token("magic")? {
        "Pf" => 1,
        "PF" => 3,
        other => {
            let other = other.to_string();
            hd.pos = 0;
            return Err(hd.fail(format!("bad magic `{other}`, expected Pf or PF")));
        }
    };
    let dim = |hd: &mut Header, what: &str| -> Result<usize> {
        let at = {
            hd.skip_space();
            hd.pos
        };
        let tok = hd.token(what)?.to_string();
        tok.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: at,
                msg: format!("{what} `{tok}` is not a positive integer"),
            })
    };
    let w = dim(&mut hd, "width")?;
    let h = dim(&mut hd, "height")?;
    hd.skip_space();
    let scale_at = hd.pos;
    let scale_tok = hd.token("scale")?.to_string();
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: scale_at,
            msg: format!("scale `{scale_tok}` is not a non-zero number"),
        })?;
    if hd.pos >= bytes.len() || !bytes[hd.pos].is_ascii_whitespace() {
        return Err(hd.fail("expected a single whitespace byte after the scale"));
    }
    let start = hd.pos + 1;
    let n = w * h * channels;
    let have = bytes.len() - start;
    if have != n * 4 {
        hd.pos = start;
        return Err(hd.fail(format!("pixel data is {have} bytes, expected {}", n * 4)));
    }
    let little = scale < 0.0;
    let plane = h * w;
    let mut data = vec![0f32; n];
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (pixel, ch) = (i / channels, i % channels);
        let (row, x) = (pixel / w, pixel % w);
        let y = h - 1 - row;
        data[ch * plane + y * w + x] = v;
    }
    Ok(Tensor::new(vec![1, channels, h, w], data)?)
}

pub fn write_pfm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pfm(t)?).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pfm(&bytes, path)
}

/// One pair of a split file, paths resolved against the dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub disparity_left: Option<PathBuf>,
    pub disparity_right: Option<PathBuf>,
}

/// Parse a split file; every referenced file must exist. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_split(split: &Path, root: &Path) -> Result<Vec<SplitEntry>> {
    let text = std::fs::read_to_string(split).map_err(io_err(split))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: String| Error::SplitLine {
            path: split.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if !(2..=4).contains(&cols.len()) {
            return Err(fail(format!(
                "expected `left right [disp_left [disp_right]]`, found {} columns",
                cols.len()
            )));
        }
        let resolve = |c: &str| -> Result<PathBuf> {
            let p = root.join(c);
            if p.is_file() {
                Ok(p)
            } else {
                Err(fail(format!("{} does not exist", p.display())))
            }
        };
        entries.push(SplitEntry {
            left: resolve(cols[0])?,
            right: resolve(cols[1])?,
            disparity_left: cols.get(2).map(|c| resolve(c)).transpose()?,
            disparity_right: cols.get(3).map(|c| resolve(c)).transpose()?,
        });
    }
    Ok(entries)
}

pub fn load_entry(entry: &SplitEntry, camera: CameraModel) -> Result<StereoSample> {
    let left = read_png(&entry.left)?;
    let right = read_png(&entry.right)?;
    if left.shape() != right.shape() {
        return Err(invalid(
            "load_entry",
            format!(
                "{} and {} differ in size",
                entry.left.display(),
                entry.right.display()
            ),
        ));
    }
    let disp = |p: &Option<PathBuf>| -> Result<Option<Tensor<f32>>> {
        p.as_ref()
            .map(|p| {
                let d = read_pfm(p)?;
                if d.shape()[1] != 1 || d.shape()[2..] != left.shape()[2..] {
                    return Err(invalid(
                        "load_entry",
                        format!(
                            "{}: disparity size {:?} does not match the image",
                            p.display(),
                            d.shape()
                        ),
                    ));
                }
                Ok(d)
            })
            .transpose()
    };
    let mut sample = StereoSample {
        disparity_left: disp(&entry.disparity_left)?,
        disparity_right: disp(&entry.disparity_right)?,
        left,
        right,
        visible_left: None,
        visible_right: None,
        camera,
    };
    sample.compute_visibility()?;
    Ok(sample)
}

pub fn load_split(split: &Path, root: &Path, camera: CameraModel) -> Result<Vec<StereoSample>> {
    read_split(split, root)?
        .iter()
        .map(|e| load_entry(e, camera))
        .collect()
}

pub const DATASET_FILE: &str = "dataset.toml";
pub const SPLIT_FILE: &str = "split.txt";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetInfo {
    camera: CameraModel,
    pairs: usize,
}

/// Write samples (and their scene specs, when given) into `root`.
pub fn write_dataset(root: &Path, samples: &[(StereoSample, Option<SceneSpec>)]) -> Result<()> {
    for sub in ["left", "right", "disp_left", "disp_right", "scenes"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let camera = samples
        .first()
        .map(|s| s.0.camera)
        .ok_or_else(|| invalid("write_dataset", "no samples"))?;
    let mut split = String::new();
    for (i, (s, spec)) in samples.iter().enumerate() {
        let name = format!("{i:05}");
        write_png(&root.join(format!("left/{name}.png")), &s.left)?;
        write_png(&root.join(format!("right/{name}.png")), &s.right)?;
        let mut line = format!("left/{name}.png right/{name}.png");
        if let (Some(dl), Some(dr)) = (&s.disparity_left, &s.disparity_right) {
            write_pfm(&root.join(format!("disp_left/{name}.pfm")), dl)?;
            write_pfm(&root.join(format!("disp_right/{name}.pfm")), dr)?;
            line.push_str(&format!(" disp_left/{name}.pfm disp_right/{name}.pfm"));
        }
        if let Some(spec) = spec {
            let p = root.join(format!("scenes/{name}.toml"));
            let text =
                toml::to_string(spec).map_err(|e| invalid("write_dataset", e.to_string()))?;
            std::fs::write(&p, text).map_err(io_err(&p))?;
        }
        split.push_str(&line);
        split.push('\n');
    }
    let sp = root.join(SPLIT_FILE);
    std::fs::write(&sp, split).map_err(io_err(&sp))?;
    let info = DatasetInfo {
        camera,
        pairs: samples.len(),
    };
    let ip = root.join(DATASET_FILE);
    let text = toml::to_string(&info).map_err(|e| invalid("write_dataset", e.to_string()))?;
    std::fs::write(&ip, text).map_err(io_err(&ip))?;
    Ok(())
}

/// Load a folder written by [`write_dataset`], or any folder with a
/// `dataset.toml` and a split file.
pub fn load_dataset(root: &Path, split: Option<&Path>) -> Result<Vec<StereoSample>> {
    Ok(load_dataset_entries(root, split)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// [`load_dataset`] keeping each sample's split entry.
pub fn load_dataset_entries(
    root: &Path,
    split: Option<&Path>,
) -> Result<Vec<(SplitEntry, StereoSample)>> {
    let ip = root.join(DATASET_FILE);
    let text = std::fs::read_to_string(&ip).map_err(io_err(&ip))?;
    let info: DatasetInfo = toml::from_str(&text).map_err(|e| Error::Config {
        path: ip.clone(),
        msg: e.message().to_string(),
    })?;
    let split = split
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join(SPLIT_FILE));
    read_split(&split, root)?
        .into_iter()
        .map(|e| {
            let s = load_entry(&e, info.camera)?;
            Ok((e, s))
        })
        .collect()
}

/// Parse a scene description file.
pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        msg: e.message().to_string(),
    })
}
